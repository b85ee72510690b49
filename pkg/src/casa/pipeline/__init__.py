from .expr import eval_columns, eval_numeric, eval_selection, parse, parse_selection, to_source
from .hist import Histogram, HistogramSpec, fill_histogram, fold, merge_histograms
from .partition import read_dataset, read_partition, write_dataset, write_partition
from .task import AnalysisSpec, Weighting, run_task

__all__ = [
    "AnalysisSpec", "Histogram", "HistogramSpec", "Weighting", "eval_columns", "eval_numeric",
    "eval_selection", "fill_histogram", "fold", "merge_histograms", "parse", "parse_selection",
    "read_dataset", "read_partition", "run_task", "to_source", "write_dataset", "write_partition",
]
