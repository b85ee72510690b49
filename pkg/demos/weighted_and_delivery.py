"""Model lifecycle, inference-weighted histograms and columnar delivery.

Registers two versions of a logistic model, promotes them in turn, fills a
histogram weighted by the Production model's scores, and asks the delivery
service for a reduced column set (twice, to show it is computed once).
"""

import tempfile

from casa.facility import Facility, from_dict
from casa.pipeline.datagen import gen_dataset

SPEC = {"dataset": "/store/ds", "selection": "njet >= 2",
        "histogram": {"variable": "mass", "n_bins": 10, "lo": 0.0, "hi": 250.0},
        "weighting": {"features": ["pt", "btag"], "model": "sig"}}


def main():
    with tempfile.TemporaryDirectory() as root:
        gen_dataset(f"{root}/origin/store/ds", 20_000, 8, seed=2)
        config = from_dict({
            "facility": "mlops",
            "ports": {s: 0 for s in ("admin", "batch", "sched", "cache", "delivery", "ml")},
            "cache": {"origin_root": f"{root}/origin", "block_size": 65536, "capacity_blocks": 1024},
            "delivery": {"root": f"{root}/delivery"},
            "credentials_dir": f"{root}/credentials",
            "users": [{"name": "carol", "caps": ["read:/store/", "transform:/store/"]}],
        })
        with Facility(config) as fac:
            tok = fac.operator_token
            ml = fac.ctl["ml"]
            for w in ([0.02, 1.5], [0.04, 3.0]):
                version = ml.request("ml.register", {"name": "sig", "params": {"w": w, "b": -2.0}, "token": tok})
                for stage in ("Staging", "Production"):
                    ml.request("ml.transition", {"name": "sig", "version": version["version"], "stage": stage,
                                                 "token": tok})
                models = ml.request("ml.list")["models"]
                print("registry:", ", ".join(f"v{m['version']}={m['stage']}" for m in models))
                hist = fac.run(SPEC)["histogram"]
                print("  weighted counts:", [round(c, 1) for c in hist.counts.tolist()])
            print(f"inference batches: {ml.request('ml.list')['executions']}")

            carol = fac.tokens["carol"]
            request = {"dataset": "/store/ds", "columns": ["pt", "eta"], "selection": "pt > 60", "token": carol,
                       "wait": True}
            for attempt in (1, 2):
                m = fac.ctl["delivery"].request("delivery.transform", request)
                print(f"delivery #{attempt}: {m['request_hash'][:12]}..., {m['rows_out']}/{m['rows_in']} rows, "
                      f"transforms run so far {fac.delivery.executions}")


if __name__ == "__main__":
    main()
