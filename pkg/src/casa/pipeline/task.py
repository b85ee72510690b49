"""Analysis specs and the worker-side task executor."""

from dataclasses import dataclass

import numpy as np

from ..errors import BadRequest, NotFound
from .expr import BOOL, NUM, check_columns, eval_columns, parse
from .hist import Histogram, HistogramSpec
from .partition import MANIFEST, parse_manifest, read_partition

READ_CHUNK = 8 * 2**20


@dataclass(frozen=True)
class Weighting:
    features: tuple
    model: str
    version: object = "Production"

    def to_doc(self):
        return {"features": list(self.features), "model": self.model, "version": self.version}


@dataclass(frozen=True)
class AnalysisSpec:
    dataset: str
    selection: str
    histogram: HistogramSpec
    weighting: Weighting = None

    def __post_init__(self):
        if not isinstance(self.dataset, str) or not self.dataset.startswith("/"):
            raise BadRequest(f"dataset must be an absolute path, got {self.dataset!r}")
        self.parsed()

    def parsed(self):
        """(selection tree, variable tree); raises BadRequest with an offset on bad source."""
        return parse(self.selection, BOOL), parse(self.histogram.variable, NUM)

    def check_schema(self, schema):
        names = {c["name"] for c in schema}
        selection, variable = self.parsed()
        check_columns(selection, names)
        check_columns(variable, names)
        if self.weighting is not None:
            missing = [f for f in self.weighting.features if f not in names]
            if missing:
                raise BadRequest(f"unknown feature columns {missing}")

    def to_doc(self):
        doc = {"dataset": self.dataset, "selection": self.selection, "histogram": self.histogram.to_doc()}
        if self.weighting is not None:
            doc["weighting"] = self.weighting.to_doc()
        return doc

    @classmethod
    def from_doc(cls, doc):
        if not isinstance(doc, dict):
            raise BadRequest("analysis spec must be an object")
        try:
            weighting = doc.get("weighting")
            if weighting is not None:
                features = weighting["features"]
                if not isinstance(features, list) or not features:
                    raise BadRequest("weighting.features must be a non-empty list")
                weighting = Weighting(tuple(features), weighting["model"], weighting.get("version", "Production"))
            return cls(doc["dataset"], doc["selection"], HistogramSpec.from_doc(doc["histogram"]), weighting)
        except KeyError as exc:
            raise BadRequest(f"analysis spec missing {exc.args[0]!r}") from None


def read_object(cache, path, token, size=None, chunk=READ_CHUNK):
    """Read a whole object through anything exposing ``read_range``."""
    parts = []
    offset = 0
    while size is None or offset < size:
        want = chunk if size is None else min(chunk, size - offset)
        data = cache.read_range(path, offset, want, token)
        parts.append(data)
        offset += len(data)
        if len(data) < want:
            break
    return b"".join(parts)


def dataset_manifest(cache, dataset, token):
    return parse_manifest(read_object(cache, f"{dataset.rstrip('/')}/{MANIFEST}", token))


def load_partition(cache, dataset, partition, token, manifest=None):
    manifest = manifest or dataset_manifest(cache, dataset, token)
    entries = manifest["partitions"]
    if type(partition) is not int or not 0 <= partition < len(entries):
        raise NotFound(f"{dataset} has no partition {partition} (n_partitions={len(entries)})")
    entry = entries[partition]
    data = read_object(cache, f"{dataset.rstrip('/')}/{entry['path']}", token, size=entry["bytes"])
    return read_partition(data)


def run_task(spec, partition, cache, ml, token, manifest=None):
    """Process one partition of ``spec.dataset`` into a histogram.

    ``cache`` needs ``read_range(path, offset, length, token)``; ``ml`` needs
    ``infer(name, version, rows, token)`` and is only used when the spec is
    weighted.
    """
    manifest = manifest or dataset_manifest(cache, spec.dataset, token)
    spec.check_schema(manifest["schema"])
    columns = load_partition(cache, spec.dataset, partition, token, manifest)
    n_rows = len(next(iter(columns.values()))) if columns else 0
    selection, variable = spec.parsed()
    mask = eval_columns(selection, columns, n_rows)
    values = eval_columns(variable, columns, n_rows)[mask]
    if spec.weighting is None:
        weights = np.ones(len(values))
    elif len(values) == 0:
        weights = np.empty(0)
    else:
        w = spec.weighting
        features = np.column_stack([np.asarray(columns[f], dtype=np.float64)[mask] for f in w.features])
        weights = np.asarray(ml.infer(w.model, w.version, features, token), dtype=np.float64)
    return Histogram(spec.histogram).fill(values, weights)
