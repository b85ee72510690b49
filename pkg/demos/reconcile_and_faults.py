"""Shrink a running facility and crash a worker mid-analysis.

Neither event changes the answer: the merged histogram is compared bit for
bit against a run on an untouched facility.
"""

import tempfile

from casa.facility import Facility, from_dict
from casa.pipeline.datagen import gen_dataset

SPEC = {"dataset": "/store/ds", "selection": "pt > 30 && abs(eta) < 2.4",
        "histogram": {"variable": "mass", "n_bins": 25, "lo": 0.0, "hi": 250.0}}


def config(root, name, max_workers=8, slots=8, capacity=4096):
    return from_dict({
        "facility": name,
        "ports": {s: 0 for s in ("admin", "batch", "sched", "cache", "delivery", "ml")},
        "batch": {"slots": slots},
        "scaler": {"max_workers": max_workers, "idle_timeout": 3},
        "cache": {"origin_root": f"{root}/origin", "block_size": 4096, "capacity_blocks": capacity},
        "delivery": {"root": f"{root}/delivery"},
        "credentials_dir": f"{root}/credentials",
    })


def main():
    with tempfile.TemporaryDirectory() as root:
        gen_dataset(f"{root}/origin/store/ds", 48_000, 32, seed=8)
        with Facility(config(root, "reference")) as fac:
            reference = fac.run(SPEC)["histogram"]

        with Facility(config(root, "live")) as fac:
            gid = fac.submit(SPEC)
            fac.tick()
            fac.tick()
            busy = [w["worker_id"] for w in fac.live_workers() if w["state"] == "Busy"]
            print(f"tick {fac.now}: {len(busy)} busy workers, {len(fac.cache.resident())} cached blocks")

            victim = busy[0]
            fac.kill_worker(victim)
            print(f"killed {victim}; its task is requeued after three missed heartbeats")

            report = fac.reconcile(config(root, "live", max_workers=3, slots=4, capacity=40))
            print(f"reconcile: applied {report['applied']}, evicted {report['evicted']} blocks, "
                  f"drained now {[a[1] for a in report['actions'] if a[0] == 'drain'] or 'none'}")

            status = fac.wait(gid)
            for _ in range(5):
                fac.tick()
            lost = [e[2] for e in fac.scheduler.trace if e[0] == "gone"]
            exits = [e[2] for e in fac.scheduler.trace if e[0] == "exit"]
            print(f"done at tick {fac.now}: lost {lost}, drained cleanly {len(exits)}, "
                  f"live now {len(fac.live_workers())}, cached blocks {len(fac.cache.resident())}")
            same = status["histogram"].identical(reference)
            print("merged histogram identical to the undisturbed run:", same)


if __name__ == "__main__":
    main()
