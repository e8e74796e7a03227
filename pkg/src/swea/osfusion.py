"""Optimizing-then-suppressing fusion of editing embeddings.

For one edit request the pipeline is:

1. optimize additive deltas ``e`` on the subject token embeddings so the model
   prefers the new object (KL-regularized, prefix-augmented NLL, Adam, per-row
   norm clamp);
2. attribute the *original* object's probability to each subject embedding
   dimension with a right Riemann sum of gradients along the straight path from
   zero to the embedding;
3. keep dimensions scoring above ``t`` times the maximum score (the KEDs);
4. subtract ``gamma`` times the original embedding at those dimensions from ``e``.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import autodiff as ad
from ._io import atomic_write_text
from .autodiff import Tensor
from .optim import Adam
from .toylm.model import LanguageModel, generate_prefixes

log = logging.getLogger(__name__)


class FusionError(RuntimeError):
    def __init__(self, message: str, request_id: str = ""):
        super().__init__(message)
        self.request_id = request_id


class SubjectNotFoundError(ValueError):
    pass


@dataclass(frozen=True)
class FusionConfig:
    alpha: float = 0.2
    beta: float = 1.0
    gamma: float = 0.5
    t_threshold: float = 0.35
    riemann_n: int = 20
    prefix_count: int = 10
    prefix_length: int = 5
    opt_steps: int = 25
    learning_rate: float = 2e-2
    weight_decay: float = 0.3
    clamp_factor: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("alpha and beta must be >= 0")
        if self.gamma < 0:
            raise ValueError("gamma must be >= 0")
        if not 0.0 <= self.t_threshold <= 1.0:
            raise ValueError("t_threshold must lie in [0, 1]")
        if self.riemann_n < 1:
            raise ValueError("riemann_n must be >= 1")
        if self.opt_steps < 1:
            raise ValueError("opt_steps must be >= 1")
        if self.prefix_count < 0 or self.prefix_length < 0:
            raise ValueError("prefix_count and prefix_length must be >= 0")
        if not self.clamp_factor > 0:
            raise ValueError("clamp_factor must be > 0")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> FusionConfig:
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown fusion config keys: {sorted(unknown)}")
        return cls(**d)

    def replace(self, **changes) -> FusionConfig:
        return replace(self, **changes)


def _contains_words(text: str, phrase: str) -> bool:
    words, sub = text.split(), phrase.split()
    return any(words[i : i + len(sub)] == sub for i in range(len(words) - len(sub) + 1))


@dataclass
class EditRequest:
    subject: str
    prompt: str
    original_object: str
    new_object: str
    paraphrases: list[str] = field(default_factory=list)
    neighborhood: list[tuple[str, str]] = field(default_factory=list)
    request_id: str = ""

    def __post_init__(self):
        if not self.subject.split():
            raise ValueError("empty subject")
        self.prompt = self.prompt.replace("{subject}", self.subject)
        self.paraphrases = [p.replace("{subject}", self.subject) for p in self.paraphrases]
        self.neighborhood = [(str(p), str(o)) for p, o in self.neighborhood]
        if not _contains_words(self.prompt, self.subject):
            raise SubjectNotFoundError(f"subject {self.subject!r} does not occur in prompt {self.prompt!r}")
        if not self.original_object.split() or not self.new_object.split():
            raise ValueError("objects must be non-empty")
        if self.new_object.split() == self.original_object.split():
            raise ValueError(f"new object equals the original object ({self.new_object!r})")

    def to_dict(self) -> dict:
        return {
            "id": self.request_id,
            "subject": self.subject,
            "prompt": self.prompt,
            "original_object": self.original_object,
            "new_object": self.new_object,
            "paraphrases": list(self.paraphrases),
            "neighborhood": [{"prompt": p, "object": o} for p, o in self.neighborhood],
        }

    @classmethod
    def from_dict(cls, d: dict, default_id: str = "") -> EditRequest:
        return cls(
            subject=d["subject"],
            prompt=d["prompt"],
            original_object=d["original_object"],
            new_object=d["new_object"],
            paraphrases=list(d.get("paraphrases", [])),
            neighborhood=[(n["prompt"], n["object"]) for n in d.get("neighborhood", [])],
            request_id=d.get("id") or default_id,
        )

    def fingerprint(self, config: FusionConfig | None = None) -> str:
        payload = {"request": self.to_dict(), "config": config.to_dict() if config else None}
        return hashlib.sha256(json.dumps(payload, sort_keys=True).encode("utf-8")).hexdigest()


def load_requests(path: str | Path) -> list[EditRequest]:
    """Read JSON Lines edit requests; blank lines are skipped."""
    out = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        try:
            out.append(EditRequest.from_dict(json.loads(line), default_id=f"req-{len(out):04d}"))
        except (KeyError, ValueError) as exc:
            raise ValueError(f"{path}:{lineno}: {exc}") from exc
    return out


def save_requests(requests: Iterable[EditRequest], path: str | Path) -> None:
    atomic_write_text(path, "".join(json.dumps(r.to_dict(), ensure_ascii=False) + "\n" for r in requests))


def find_subsequence(ids: Sequence[int], sub: Sequence[int]) -> int:
    n, m = len(ids), len(sub)
    for i in range(n - m + 1):
        if list(ids[i : i + m]) == list(sub):
            return i
    return -1


@dataclass(frozen=True)
class PreparedRequest:
    request: EditRequest
    subject_ids: list[int]
    prompt_ids: list[int]  # BOS-prefixed
    span: tuple[int, int]
    original_ids: list[int]
    new_ids: list[int]


def prepare(model: LanguageModel, request: EditRequest) -> PreparedRequest:
    tok = model.tokenizer
    subject_ids = tok.encode(request.subject)
    prompt_ids = [tok.bos_id, *tok.encode(request.prompt)]
    start = find_subsequence(prompt_ids, subject_ids)
    if start < 0:
        raise SubjectNotFoundError(f"subject tokens of {request.subject!r} not found in prompt")
    return PreparedRequest(
        request,
        subject_ids,
        prompt_ids,
        (start, start + len(subject_ids)),
        tok.encode(request.original_object),
        tok.encode(request.new_object),
    )


# -- optimization ----------------------------------------------------------------


def reference_logits(model: LanguageModel, prep: PreparedRequest) -> np.ndarray:
    """Unedited next-token logits at the subject's last token."""
    return model.logits(prep.prompt_ids)[prep.span[1] - 1]


def edit_loss(
    model: LanguageModel,
    prep: PreparedRequest,
    delta: Tensor,
    config: FusionConfig,
    prefixes: Sequence[Sequence[int]] = (),
    ref_logits: np.ndarray | None = None,
) -> tuple[Tensor, Tensor | None, Tensor]:
    """Return ``(loss, kl, nll)`` for deltas added over the subject span.

    ``loss = alpha * KL(P(.|X) || P(.|X_hat)) + beta * mean_j NLL(new | prefix_j + X_hat)``
    where the KL compares next-token distributions at the subject's last token
    of the bare prompt (the reference is detached) and each NLL is averaged over
    the new object's tokens.  With no prefixes the bare prompt is the only NLL
    context.
    """
    s, e = prep.span
    kl = None
    loss_terms = []
    if config.alpha > 0:
        if ref_logits is None:
            ref_logits = reference_logits(model, prep)
        x = Tensor(model.embed(prep.prompt_ids))
        q = model.forward_embeddings(ad.index_add(x, slice(s, e), delta))[e - 1]
        kl = ad.kl_divergence(Tensor(np.asarray(ref_logits, dtype=model.dtype)), q)
        loss_terms.append(ad.scale(kl, config.alpha))

    body = prep.prompt_ids[1:] + prep.new_ids[:-1]
    bos = prep.prompt_ids[0]
    groups: dict[int, list[list[int]]] = {}
    for pref in prefixes or [[]]:
        groups.setdefault(len(pref), []).append([bos, *pref, *body])
    total = sum(len(rows) for rows in groups.values())
    nll = None
    for plen, rows in groups.items():
        X = Tensor(model.embed(np.array(rows)))
        Xh = ad.index_add(X, (slice(None), slice(s + plen, e + plen)), delta)
        logp = ad.log_softmax(model.forward_embeddings(Xh), -1)
        targets = np.tile(np.asarray(prep.new_ids), (len(rows), 1))
        term = ad.scale(ad.nll_loss(logp, targets), len(rows) / total)
        nll = term if nll is None else nll + term
    loss_terms.append(ad.scale(nll, config.beta))
    loss = loss_terms[0]
    for t in loss_terms[1:]:
        loss = loss + t
    return loss, kl, nll


def clamp_rows(delta: np.ndarray, reference: np.ndarray, factor: float) -> np.ndarray:
    """Rescale rows of ``delta`` whose L2 norm exceeds ``factor * ||reference row||``."""
    norms = np.linalg.norm(delta.astype(np.float64), axis=1)
    limits = factor * np.linalg.norm(reference.astype(np.float64), axis=1)
    over = norms > limits
    if over.any():
        delta = delta.copy()
        delta[over] *= (limits[over] / norms[over])[:, None].astype(delta.dtype)
    return delta


@dataclass
class DeltaResult:
    delta: np.ndarray
    losses: list[float]
    nll: list[float]
    best_step: int

    @property
    def initial_nll(self) -> float:
        return self.nll[0]

    @property
    def best_nll(self) -> float:
        return self.nll[self.best_step]


def optimize_delta(
    model: LanguageModel,
    request: EditRequest | PreparedRequest,
    config: FusionConfig,
    prefixes: Sequence[Sequence[int]] | None = None,
) -> DeltaResult:
    """Learn subject-embedding deltas for ``request``; returns the best-loss iterate.

    Losses are recorded for the starting point, every Adam step, and the final
    iterate, so ``len(losses) == opt_steps + 1``.
    """
    prep = request if isinstance(request, PreparedRequest) else prepare(model, request)
    rid = prep.request.request_id
    if prefixes is None:
        prefixes = generate_prefixes(model, config.prefix_count, config.prefix_length, config.seed)
    s, e = prep.span
    x_subject = model.embed(prep.prompt_ids[s:e])
    ref = reference_logits(model, prep)
    delta = Tensor(np.zeros_like(x_subject), requires_grad=True)
    opt = Adam([delta], lr=config.learning_rate, weight_decay=config.weight_decay)
    losses, nlls = [], []
    best, best_loss, best_step = delta.data.copy(), np.inf, 0
    for step in range(config.opt_steps + 1):
        delta.grad = None
        with ad.Tape() as tape:
            loss, _, nll = edit_loss(model, prep, delta, config, prefixes, ref)
        value = float(loss.data)
        if not np.isfinite(value):
            raise FusionError(f"non-finite loss at step {step}", rid)
        losses.append(value)
        nlls.append(float(nll.data))
        if value < best_loss:
            best, best_loss, best_step = delta.data.copy(), value, step
        if step == config.opt_steps:
            break
        tape.backward(loss)
        opt.step()
        delta.data[...] = clamp_rows(delta.data, x_subject, config.clamp_factor)
    return DeltaResult(best, losses, nlls, best_step)


# -- attribution ---------------------------------------------------------------------


@dataclass
class AttributionReport:
    scores: np.ndarray  # (|S|, h)
    keds: tuple[tuple[int, int], ...]
    max_score: float
    t: float

    def mask(self) -> np.ndarray:
        m = np.zeros(self.scores.shape, dtype=bool)
        for r, d in self.keds:
            m[r, d] = True
        return m

    def top(self, k: int) -> list[tuple[int, int, float]]:
        flat = np.argsort(-self.scores, axis=None, kind="stable")[:k]
        rows, dims = np.unravel_index(flat, self.scores.shape)
        return [(int(r), int(d), float(self.scores[r, d])) for r, d in zip(rows, dims)]


def select_keds(scores: np.ndarray | AttributionReport, t: float) -> tuple[tuple[int, int], ...]:
    """Positions whose score is strictly greater than ``t`` times the global max.

    A positive maximum always selects its own position(s), so ``t=1`` keeps
    exactly the argmax dimensions instead of an empty set.
    """
    if not 0.0 <= t <= 1.0:
        raise ValueError("t must lie in [0, 1]")
    if isinstance(scores, AttributionReport):
        scores = scores.scores
    scores = np.asarray(scores)
    if scores.size == 0:
        return ()
    top = scores.max()
    mask = scores > t * top
    if top > 0:
        mask |= scores == top
    return tuple((int(r), int(d)) for r, d in np.argwhere(mask))


def target_probability_grads(
    model: LanguageModel, embeddings: np.ndarray, n_prefix: int, target_ids: Sequence[int]
) -> tuple[np.ndarray, np.ndarray]:
    """Joint teacher-forced probability of ``target_ids`` for a batch of inputs,
    and its gradient with respect to the input token embeddings.

    ``embeddings`` has shape ``(B, n_prefix + len(target) - 1, h)``.
    """
    X = Tensor(embeddings, requires_grad=True)
    m = len(target_ids)
    B = embeddings.shape[0]
    with ad.Tape() as tape:
        logp = ad.log_softmax(model.forward_embeddings(X), -1)
        bi = np.repeat(np.arange(B), m).reshape(B, m)
        ri = np.tile(np.arange(n_prefix - 1, n_prefix - 1 + m), (B, 1))
        ti = np.tile(np.asarray(target_ids), (B, 1))
        joint = ad.exp(ad.tensor_sum(logp[bi, ri, ti], axis=1))
        total = ad.tensor_sum(joint)
    tape.backward(total)
    return joint.data, X.grad


def attribute(
    model: LanguageModel,
    subject_span: tuple[int, int],
    prompt_ids: Sequence[int],
    object_ids: Sequence[int],
    n: int = 20,
    t: float = 0.35,
) -> AttributionReport:
    """Per-dimension attribution of ``P(object | prompt)`` to subject embeddings.

    For each subject position z, the row is replaced by ``k/n * x_z`` for
    k = 1..n (other rows untouched); gradients of the joint object probability
    w.r.t. that row are summed and multiplied by ``x_z / n``.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    if len(object_ids) == 0:
        raise ValueError("object has no tokens")
    s, e = subject_span
    prompt_ids = list(prompt_ids)
    if not 0 <= s < e <= len(prompt_ids):
        raise IndexError(f"subject span {subject_span} outside prompt of length {len(prompt_ids)}")
    full = prompt_ids + list(object_ids)[:-1]
    X = model.embed(full)
    width = e - s
    alphas = np.arange(1, n + 1, dtype=np.float64) / n
    batch = np.repeat(X[None], width * n, axis=0)
    for z in range(width):
        block = slice(z * n, (z + 1) * n)
        batch[block, s + z] = (alphas[:, None] * X[s + z].astype(np.float64)).astype(X.dtype)
    _, grads = target_probability_grads(model, batch, len(prompt_ids), list(object_ids))
    scores = np.empty((width, X.shape[1]), dtype=np.float64)
    for z in range(width):
        g = grads[z * n : (z + 1) * n, s + z].astype(np.float64).sum(axis=0)
        scores[z] = X[s + z].astype(np.float64) / n * g
    keds = select_keds(scores, t)
    return AttributionReport(scores, keds, float(scores.max()), t)


def fuse(e: np.ndarray, x_subject: np.ndarray, keds: Iterable[tuple[int, int]], gamma: float) -> np.ndarray:
    """Subtract ``gamma * x_subject`` from ``e`` at the KED positions only."""
    e = np.asarray(e)
    x_subject = np.asarray(x_subject)
    if e.shape != x_subject.shape:
        raise ValueError(f"shape mismatch: e {e.shape} vs x_subject {x_subject.shape}")
    keds = list(keds)
    out = e.copy()
    if gamma == 0 or not keds:
        return out
    rows = np.array([r for r, _ in keds])
    dims = np.array([d for _, d in keds])
    if rows.min() < 0 or dims.min() < 0 or rows.max() >= e.shape[0] or dims.max() >= e.shape[1]:
        raise IndexError("KED position outside the embedding matrix")
    out[rows, dims] = e[rows, dims] - gamma * x_subject[rows, dims]
    return out


# -- end to end --------------------------------------------------------------------


@dataclass
class FusionResult:
    prepared: PreparedRequest
    optimization: DeltaResult
    report: AttributionReport
    x_subject: np.ndarray

    def editing_embedding(self, gamma: float, t: float | None = None) -> np.ndarray:
        keds = self.report.keds if t is None else select_keds(self.report.scores, t)
        return fuse(self.optimization.delta, self.x_subject, keds, gamma)


def fuse_request(
    model: LanguageModel,
    request: EditRequest,
    config: FusionConfig,
    prefixes: Sequence[Sequence[int]] | None = None,
) -> FusionResult:
    prep = prepare(model, request)
    if prefixes is None:
        prefixes = generate_prefixes(model, config.prefix_count, config.prefix_length, config.seed)
    opt = optimize_delta(model, prep, config, prefixes)
    report = attribute(model, prep.span, prep.prompt_ids, prep.original_ids, config.riemann_n, config.t_threshold)
    s, e = prep.span
    return FusionResult(prep, opt, report, model.embed(prep.prompt_ids[s:e]))


def default_workers() -> int:
    try:
        return max(1, int(os.environ.get("SWEA_THREADS", "1")))
    except ValueError:
        return 1


def fuse_many(
    model: LanguageModel,
    requests: Sequence[EditRequest],
    config: FusionConfig,
    workers: int | None = None,
) -> tuple[list[FusionResult | None], dict[str, str]]:
    """Run fusion for each request; failures are collected, not raised."""
    prefixes = generate_prefixes(model, config.prefix_count, config.prefix_length, config.seed)
    workers = workers or default_workers()

    def one(req):
        try:
            return fuse_request(model, req, config, prefixes), None
        except (FusionError, ValueError, KeyError, IndexError) as exc:
            return None, f"{type(exc).__name__}: {exc}"

    if workers > 1 and len(requests) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            outcomes = list(pool.map(one, requests))
    else:
        outcomes = [one(r) for r in requests]
    failures = {}
    for req, (_, err) in zip(requests, outcomes):
        if err is not None:
            failures[req.request_id] = err
            log.warning("fusion failed for %s: %s", req.request_id, err)
    return [res for res, _ in outcomes], failures


def store_from_results(
    model: LanguageModel,
    requests: Sequence[EditRequest],
    results: Sequence[FusionResult | None],
    config: FusionConfig,
    failures: dict[str, str] | None = None,
):
    """Collect fused editing embeddings into a new store; ``None`` results are skipped."""
    from .store import EditingEmbedding, EditingStore, make_key

    store = EditingStore.for_model(model)
    for req, res in zip(requests, results):
        if res is None:
            continue
        emb = EditingEmbedding(
            make_key(res.prepared.subject_ids),
            res.editing_embedding(config.gamma, config.t_threshold),
            {"request_id": req.request_id, "fingerprint": req.fingerprint(config), "config": config.to_dict()},
        )
        store.upsert(emb, req)
    store.failures = dict(failures or {})
    return store


def edit(
    model: LanguageModel,
    requests: Sequence[EditRequest],
    config: FusionConfig | None = None,
    workers: int | None = None,
):
    """Fuse every request and collect the editing embeddings into a new store.

    Failed requests are skipped and listed in ``store.failures``.
    """
    config = config or FusionConfig()
    results, failures = fuse_many(model, requests, config, workers)
    return store_from_results(model, requests, results, config, failures)
