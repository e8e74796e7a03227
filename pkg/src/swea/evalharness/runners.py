"""Batch, sequential and sequential-batch editing runs, and gamma/t sweeps."""

from __future__ import annotations

import csv
import io
import json
import re
from dataclasses import dataclass, field
from typing import Sequence

from ..osfusion import EditRequest, FusionConfig, fuse_many, store_from_results
from ..store import EditingStore, recompute_for_sequential
from .metrics import EditMetrics, evaluate

METRIC_COLUMNS = (
    "efficacy",
    "generalization",
    "specificity",
    "score",
    "efficacy_argmax",
    "generalization_argmax",
    "specificity_argmax",
)


@dataclass
class StageResult:
    stage: int
    n_edited: int
    metrics: EditMetrics
    failures: dict[str, str] = field(default_factory=dict)

    def row(self) -> dict:
        d = {"stage": self.stage, "n_edited": self.n_edited}
        d.update({c: getattr(self.metrics, c) for c in METRIC_COLUMNS})
        d["failures"] = len(self.failures)
        return d


def parse_schedule(spec: str, n_requests: int | None = None) -> tuple[int, int]:
    """``"10x2"`` -> 10 stages of 2 requests."""
    m = re.fullmatch(r"\s*(\d+)\s*[xX]\s*(\d+)\s*", spec)
    if not m:
        raise ValueError(f"schedule must look like STAGESxBATCH, got {spec!r}")
    stages, batch = int(m.group(1)), int(m.group(2))
    if stages < 1 or batch < 1:
        raise ValueError("schedule stages and batch size must be >= 1")
    if n_requests is not None and stages * batch != n_requests:
        raise ValueError(f"schedule {stages}x{batch} does not partition {n_requests} requests")
    return stages, batch


def run_schedule(
    model,
    requests: Sequence[EditRequest],
    batch_sizes: Sequence[int],
    config: FusionConfig,
    workers: int | None = None,
) -> list[StageResult]:
    """Apply ``requests`` in consecutive stages; evaluate all edits so far after each."""
    if sum(batch_sizes) != len(requests) or any(b < 1 for b in batch_sizes):
        raise ValueError("batch sizes must be positive and partition the requests")
    store = EditingStore.for_model(model)
    results, pos = [], 0
    for stage, size in enumerate(batch_sizes):
        batch = requests[pos : pos + size]
        pos += size
        for req in batch:
            store.log_request(req)
        store = recompute_for_sequential(store, model, config, workers, strict=False)
        edited = list(requests[:pos])
        results.append(StageResult(stage, pos, evaluate(model, store, edited), dict(store.failures)))
    return results


def run_batch(model, requests, config: FusionConfig, workers: int | None = None) -> list[StageResult]:
    return run_schedule(model, requests, [len(requests)], config, workers)


def run_sequential(model, requests, config: FusionConfig, workers: int | None = None) -> list[StageResult]:
    return run_schedule(model, requests, [1] * len(requests), config, workers)


def run_sequential_batch(
    model, requests, schedule: str | tuple[int, int], config: FusionConfig, workers: int | None = None
) -> list[StageResult]:
    stages, batch = parse_schedule(schedule, len(requests)) if isinstance(schedule, str) else schedule
    if stages * batch != len(requests):
        raise ValueError(f"schedule {stages}x{batch} does not partition {len(requests)} requests")
    return run_schedule(model, requests, [batch] * stages, config, workers)


# -- sweeps --------------------------------------------------------------------------


@dataclass
class SweepTable:
    axis: str
    values: list[float]
    metrics: list[EditMetrics]
    failures: dict[str, str] = field(default_factory=dict)

    def rows(self) -> list[dict]:
        out = []
        for v, m in zip(self.values, self.metrics):
            d = {self.axis: v}
            d.update({c: getattr(m, c) for c in METRIC_COLUMNS})
            out.append(d)
        return out

    def to_csv(self) -> str:
        return rows_to_csv(self.rows())

    def to_text(self) -> str:
        return rows_to_text(self.rows())

    def to_json(self) -> str:
        return json.dumps({"axis": self.axis, "rows": self.rows(), "failures": self.failures}, indent=2, sort_keys=True)


def sweep(
    model,
    requests: Sequence[EditRequest],
    axis: str,
    values: Sequence[float],
    config: FusionConfig,
    workers: int | None = None,
) -> SweepTable:
    """One batch edit + evaluation per value of ``gamma`` or ``t``.

    Optimization and attribution do not depend on either value, so they run
    once per request; only KED selection and suppression are redone per value.
    """
    if axis not in ("gamma", "t"):
        raise ValueError("sweep axis must be 'gamma' or 't'")
    values = [float(v) for v in values]
    field_name = "t_threshold" if axis == "t" else "gamma"
    configs = [config.replace(**{field_name: v}) for v in values]  # validates before fusing
    results, failures = fuse_many(model, requests, config, workers)
    table = SweepTable(axis, values, [], failures)
    for cfg in configs:
        store = store_from_results(model, requests, results, cfg, failures)
        table.metrics.append(evaluate(model, store, requests))
    return table


# -- report formatting -------------------------------------------------------------------


def rows_to_csv(rows: list[dict]) -> str:
    if not rows:
        return ""
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
    writer.writeheader()
    for r in rows:
        writer.writerow({k: (f"{v:.6f}" if isinstance(v, float) else v) for k, v in r.items()})
    return buf.getvalue()


def rows_to_text(rows: list[dict]) -> str:
    if not rows:
        return "(no rows)\n"
    cols = list(rows[0])
    cells = [[f"{r[c]:.4f}" if isinstance(r[c], float) else str(r[c]) for c in cols] for r in rows]
    widths = [max(len(c), *(len(row[i]) for row in cells)) for i, c in enumerate(cols)]
    lines = ["  ".join(c.rjust(w) for c, w in zip(cols, widths))]
    lines.append("  ".join("-" * w for w in widths))
    lines += ["  ".join(v.rjust(w) for v, w in zip(row, widths)) for row in cells]
    return "\n".join(lines) + "\n"


def stages_report(mode: str, stages: list[StageResult]) -> dict:
    return {
        "mode": mode,
        "stages": [{**s.row(), "failures": s.failures, "flagged": s.metrics.flagged} for s in stages],
        "final": stages[-1].metrics.to_dict() if stages else None,
    }
