"""Efficacy / generalization / specificity under SWEA inference.

A probe succeeds when the patched model assigns the target a higher joint
(teacher-forced) probability than the competitor:

* efficacy: ``P(new | prompt) > P(original | prompt)``
* generalization: the same test on each paraphrase
* specificity: ``P(true | neighbor prompt) > P(new | neighbor prompt)``

Per-request rates average over that request's probes; the reported metric
averages over requests that have at least one probe.  A strict variant checks
that greedy decoding reproduces the target exactly.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from ..matcher import swea_greedy, swea_sequence_logprob
from ..osfusion import EditRequest, find_subsequence
from ..store import EditingStore
from ..toylm.tokenizer import UnknownTokenError


def harmonic_score(efficacy: float, generalization: float, specificity: float) -> float:
    parts = (efficacy, generalization, specificity)
    if any(math.isnan(p) for p in parts):
        return float("nan")
    if min(parts) <= 0:
        return 0.0
    return 3.0 / sum(1.0 / p for p in parts)


@dataclass
class EditMetrics:
    efficacy: float
    generalization: float
    specificity: float
    efficacy_argmax: float = float("nan")
    generalization_argmax: float = float("nan")
    specificity_argmax: float = float("nan")
    n_requests: int = 0
    per_request: list[dict] = field(default_factory=list)
    flagged: list[str] = field(default_factory=list)
    score: float = field(init=False)

    def __post_init__(self):
        self.score = harmonic_score(self.efficacy, self.generalization, self.specificity)

    def summary(self) -> dict:
        d = asdict(self)
        d.pop("per_request")
        return d

    def to_dict(self) -> dict:
        return asdict(self)


def _mean(xs: Sequence[float]) -> float:
    return float(np.mean(xs)) if len(xs) else float("nan")


class _Probe:
    def __init__(self, model, store: EditingStore | None):
        self.model = model
        self.store = store
        self.tok = model.tokenizer

    def ids(self, text: str) -> list[int]:
        return [self.tok.bos_id, *self.tok.encode(text)]

    def logprob(self, prompt_ids: list[int], obj: str) -> float:
        return swea_sequence_logprob(self.model, prompt_ids, self.tok.encode(obj), self.store)

    def prefers(self, prompt: str, target: str, competitor: str) -> bool:
        ids = self.ids(prompt)
        return self.logprob(ids, target) > self.logprob(ids, competitor)

    def greedy_matches(self, prompt: str, target: str) -> bool:
        want = self.tok.encode(target)
        return swea_greedy(self.model, self.ids(prompt), self.store, len(want)) == want


def _efficacy_one(p: _Probe, req: EditRequest) -> tuple[bool, bool]:
    return p.prefers(req.prompt, req.new_object, req.original_object), p.greedy_matches(req.prompt, req.new_object)


def _generalization_one(p: _Probe, req: EditRequest, flagged: list[str]) -> tuple[list[bool], list[bool]]:
    subject_ids = p.tok.encode(req.subject)
    prob, strict = [], []
    for para in req.paraphrases:
        try:
            ids = p.ids(para)
        except UnknownTokenError:
            ids = None
        if ids is None or find_subsequence(ids, subject_ids) < 0:
            flagged.append(f"{req.request_id}: paraphrase lacks subject span: {para!r}")
            prob.append(False)
            strict.append(False)
            continue
        prob.append(p.prefers(para, req.new_object, req.original_object))
        strict.append(p.greedy_matches(para, req.new_object))
    return prob, strict


def _specificity_one(p: _Probe, req: EditRequest) -> tuple[list[bool], list[bool]]:
    prob, strict = [], []
    for prompt, true_obj in req.neighborhood:
        prob.append(p.prefers(prompt, true_obj, req.new_object))
        strict.append(p.greedy_matches(prompt, true_obj))
    return prob, strict


def efficacy(model, store: EditingStore | None, requests: Sequence[EditRequest]) -> float:
    p = _Probe(model, store)
    return _mean([_efficacy_one(p, r)[0] for r in requests])


def generalization(model, store: EditingStore | None, requests: Sequence[EditRequest]) -> float:
    p = _Probe(model, store)
    rates = []
    for r in requests:
        prob, _ = _generalization_one(p, r, [])
        if prob:
            rates.append(_mean(prob))
    return _mean(rates)


def specificity(model, store: EditingStore | None, requests: Sequence[EditRequest]) -> float:
    p = _Probe(model, store)
    rates = []
    for r in requests:
        prob, _ = _specificity_one(p, r)
        if prob:
            rates.append(_mean(prob))
    return _mean(rates)


def evaluate(model, store: EditingStore | None, requests: Sequence[EditRequest]) -> EditMetrics:
    """All three metrics, their strict variants and a per-request breakdown."""
    p = _Probe(model, store)
    flagged: list[str] = []
    rows = []
    eff, eff_s, gen, gen_s, spec, spec_s = [], [], [], [], [], []
    for r in requests:
        e, es = _efficacy_one(p, r)
        g, gs = _generalization_one(p, r, flagged)
        s, ss = _specificity_one(p, r)
        eff.append(e)
        eff_s.append(es)
        if g:
            gen.append(_mean(g))
            gen_s.append(_mean(gs))
        if s:
            spec.append(_mean(s))
            spec_s.append(_mean(ss))
        rows.append(
            {
                "request_id": r.request_id,
                "subject": r.subject,
                "efficacy": bool(e),
                "generalization": _mean(g),
                "specificity": _mean(s),
            }
        )
    return EditMetrics(
        efficacy=_mean(eff),
        generalization=_mean(gen),
        specificity=_mean(spec),
        efficacy_argmax=_mean(eff_s),
        generalization_argmax=_mean(gen_s),
        specificity_argmax=_mean(spec_s),
        n_requests=len(requests),
        per_request=rows,
        flagged=flagged,
    )


def fact_recall(model, facts, all_prompts: bool = True) -> float:
    """Fraction of fact prompts whose greedy continuation is the stored object."""
    p = _Probe(model, None)
    hits = []
    for f in facts:
        prompts = f.prompts() if all_prompts else f.prompts()[:1]
        hits += [p.greedy_matches(q, f.object) for q in prompts]
    return _mean(hits)
