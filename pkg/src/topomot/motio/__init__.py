"""File formats, evaluation, configuration and the command line."""
from .config import ConfigError, RunConfig, SEED_ENV, load_config
from .metrics import Counts, EvalReport, evaluate, evaluate_many, iou_matrix
from .params import ParamsError, load_params, save_params
from .records import (GroundTruthFilter, MotFormatError, MotRecord, read_descriptors, read_mot,
                      write_descriptors, write_mot, write_records)

__all__ = [
    "ConfigError", "Counts", "EvalReport", "GroundTruthFilter", "MotFormatError", "MotRecord",
    "ParamsError", "RunConfig", "SEED_ENV", "evaluate", "evaluate_many", "iou_matrix", "load_config",
    "load_params", "read_descriptors", "read_mot", "save_params", "write_descriptors", "write_mot",
    "write_records",
]
