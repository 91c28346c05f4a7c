"""Gated multi-teacher representation fusion and distillation pretraining."""

from .autodiff import Tensor
from .data import EegSegment, SegmentStore, SynthSpec, TaskSplit, synth_dataset
from .distill import (GateNetwork, PredictionHeads, ProjectionHead, Stage1Config,
                      Stage2Config, build_bank, train_gate, train_student)
from .evaluation import TaskSpec, evaluate, extract_features, linear_probe
from .student import StudentConfig, StudentEncoder
from .teachers import RepCache, cache_read, cache_write, make_teacher, precompute_reps

__version__ = "0.1.0"

__all__ = [
    "Tensor", "EegSegment", "SegmentStore", "SynthSpec", "TaskSplit", "synth_dataset",
    "GateNetwork", "PredictionHeads", "ProjectionHead", "Stage1Config", "Stage2Config",
    "build_bank", "train_gate", "train_student", "TaskSpec", "evaluate",
    "extract_features", "linear_probe", "StudentConfig", "StudentEncoder",
    "RepCache", "cache_read", "cache_write", "make_teacher", "precompute_reps",
]
