"""Watch the worker pool follow the task backlog, tick by tick.

A 64-partition graph with two tasks per worker fills the pool to its cap,
then idle workers drain away once the graph is done.
"""

import tempfile

from casa.facility import Facility, from_dict
from casa.pipeline.datagen import gen_dataset

SPEC = {"dataset": "/store/ds", "selection": "pt > 25",
        "histogram": {"variable": "pt", "n_bins": 10, "lo": 0.0, "hi": 200.0}}


def main():
    with tempfile.TemporaryDirectory() as root:
        gen_dataset(f"{root}/origin/store/ds", 64_000, 64, seed=4)
        config = from_dict({
            "facility": "timeline",
            "ports": {s: 0 for s in ("admin", "batch", "sched", "cache", "delivery", "ml")},
            "batch": {"slots": 8},
            "scaler": {"tasks_per_worker": 2, "max_workers": 8, "idle_timeout": 4},
            "cache": {"origin_root": f"{root}/origin", "block_size": 65536, "capacity_blocks": 1024},
            "delivery": {"root": f"{root}/delivery"},
            "credentials_dir": f"{root}/credentials",
        })
        with Facility(config) as fac:
            gid = fac.submit(SPEC)
            print("tick  running-jobs  workers  pending  events")
            while True:
                r = fac.tick()
                status = fac.status(gid)
                pending = status["progress"]["pending"]
                notes = [" ".join(map(str, a)) for a in r.actions if a[0] != "submit"]
                submits = sum(1 for a in r.actions if a[0] == "submit")
                if submits:
                    notes.insert(0, f"submit x{submits}")
                print(f"{r.now:4d}  {r.running_jobs:12d}  {'*' * r.live_workers:<8} {pending:7d}  "
                      + ", ".join(notes))
                if status["state"] == "Done" and r.live_workers == 0:
                    break
            print(f"peak workers {fac.peak_workers}; graph done, pool back to zero at tick {fac.now}")


if __name__ == "__main__":
    main()
