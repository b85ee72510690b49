"""Seeded synthetic collision-like datasets."""

import numpy as np

from .partition import write_dataset

SCHEMA = ("pt", "eta", "phi", "mass", "njet", "btag")


def synth_partition(rng, rows):
    return {
        "pt": 20.0 + rng.exponential(30.0, rows),
        "eta": rng.normal(0.0, 1.6, rows),
        "phi": rng.uniform(-np.pi, np.pi, rows),
        "mass": rng.gamma(4.0, 20.0, rows),
        "njet": rng.poisson(3.0, rows).astype(np.int64),
        "btag": rng.uniform(0.0, 1.0, rows),
    }


def partition_sizes(rows, partitions):
    if rows < 0 or partitions < 1:
        raise ValueError("rows must be >= 0 and partitions >= 1")
    base, extra = divmod(rows, partitions)
    return [base + (1 if i < extra else 0) for i in range(partitions)]


def gen_dataset(directory, rows, partitions, seed=0):
    """Write a dataset; identical arguments give byte-identical files."""
    tables = [
        synth_partition(np.random.default_rng([seed, i]), n)
        for i, n in enumerate(partition_sizes(rows, partitions))
    ]
    return write_dataset(directory, tables)
