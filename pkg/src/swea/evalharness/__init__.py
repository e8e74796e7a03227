"""Synthetic fact corpus, edit metrics and editing-schedule runners."""

from .corpus import RELATIONS, Fact, FactCorpus, generate_corpus, make_requests
from .metrics import EditMetrics, efficacy, evaluate, fact_recall, generalization, harmonic_score, specificity
from .runners import (
    StageResult,
    SweepTable,
    parse_schedule,
    rows_to_csv,
    rows_to_text,
    run_batch,
    run_schedule,
    run_sequential,
    run_sequential_batch,
    stages_report,
    sweep,
)

__all__ = [
    "RELATIONS",
    "EditMetrics",
    "Fact",
    "FactCorpus",
    "StageResult",
    "SweepTable",
    "efficacy",
    "evaluate",
    "fact_recall",
    "generalization",
    "generate_corpus",
    "harmonic_score",
    "make_requests",
    "parse_schedule",
    "rows_to_csv",
    "rows_to_text",
    "run_batch",
    "run_schedule",
    "run_sequential",
    "run_sequential_batch",
    "specificity",
    "stages_report",
    "sweep",
]
