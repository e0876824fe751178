"""Audit chat models for delusions: wrong answers held with unusually high belief."""

from .calibrate import (
    BeliefThresholdClassifier,
    RankNormalizer,
    ThresholdSpec,
    belief_threshold,
    classify,
    ensemble,
    rank_normalize,
)
from .client import Client, EndpointConfig, MockBackend, MockScript, Request, scripted
from .core import (
    ENSEMBLE,
    METHODS,
    AuditRecord,
    BeliefVector,
    Classification,
    GenerationTrace,
    Outcome,
    QAItem,
    RoleTag,
    SamplingParams,
    TokenLogprob,
    Verdict,
    load_dataset,
    load_records,
    save_records,
)
from .grading import grade, is_rejection, normalize_answer
from .report import RunReport, aggregate, compare_runs, emit

__version__ = "0.1.0"

__all__ = [
    "AuditRecord",
    "BeliefThresholdClassifier",
    "BeliefVector",
    "Classification",
    "Client",
    "ENSEMBLE",
    "EndpointConfig",
    "GenerationTrace",
    "METHODS",
    "MockBackend",
    "MockScript",
    "Outcome",
    "QAItem",
    "RankNormalizer",
    "Request",
    "RoleTag",
    "RunReport",
    "SamplingParams",
    "ThresholdSpec",
    "TokenLogprob",
    "Verdict",
    "aggregate",
    "belief_threshold",
    "classify",
    "compare_runs",
    "emit",
    "ensemble",
    "grade",
    "is_rejection",
    "load_dataset",
    "load_records",
    "normalize_answer",
    "rank_normalize",
    "save_records",
    "scripted",
]
