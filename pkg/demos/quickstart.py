"""Bring up an in-process facility, run one analysis twice and compare cold and warm.

    python demos/quickstart.py [--rows 200000] [--partitions 16]
"""

import argparse
import tempfile

from casa.facility import Facility, from_dict
from casa.pipeline.datagen import gen_dataset

SPEC = {"dataset": "/store/agc", "selection": "pt > 30 && abs(eta) < 2.4 && njet >= 2",
        "histogram": {"variable": "mass", "n_bins": 20, "lo": 0.0, "hi": 250.0}}


def bar_chart(summary, width=50):
    counts = summary["counts"]
    top = max(counts) or 1.0
    step = (summary["hi"] - summary["lo"]) / summary["n_bins"]
    for i, c in enumerate(counts):
        lo = summary["lo"] + i * step
        print(f"  [{lo:6.1f}, {lo + step:6.1f})  {'#' * int(width * c / top):<{width}} {c:.0f}")
    print(f"  underflow {summary['underflow']:.0f}  overflow {summary['overflow']:.0f}")


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--rows", type=int, default=200_000)
    ap.add_argument("--partitions", type=int, default=16)
    args = ap.parse_args()

    with tempfile.TemporaryDirectory() as root:
        gen_dataset(f"{root}/origin/store/agc", args.rows, args.partitions, seed=1)
        config = from_dict({
            "facility": "demo",
            "ports": {s: 0 for s in ("admin", "batch", "sched", "cache", "delivery", "ml")},
            "cache": {"origin_root": f"{root}/origin", "block_size": 65536, "capacity_blocks": 4096,
                      "origin_latency_ms": 2},
            "delivery": {"root": f"{root}/delivery"},
            "credentials_dir": f"{root}/credentials",
            "users": [{"name": "alice", "caps": ["read:/store/", "submit:queue/default"]}],
        })
        with Facility(config) as fac:
            report = fac.bench(SPEC, repeats=2, token=fac.tokens["alice"])
        for run in report["runs"]:
            cache = run["cache"]
            print(f"run {run['run']}: {run['wall_s']:.2f} s, {run['events_per_s']:,.0f} events/s, "
                  f"peak {run['peak_workers']} workers, {cache['misses']} misses / {cache['hits']} hits")
        print(f"warm run fetched {report['cold_vs_warm']['warm_origin_bytes']} bytes from origin")
        print("\nmass of selected events:")
        bar_chart(report["runs"][-1]["histogram"])


if __name__ == "__main__":
    main()
