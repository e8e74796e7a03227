from __future__ import annotations

import logging
from dataclasses import asdict, dataclass
from typing import Callable, Sequence

import numpy as np

from .. import autodiff as ad
from ..optim import Adam
from .model import LanguageModel, ModelConfig
from .tokenizer import Tokenizer

log = logging.getLogger(__name__)


class TrainingDivergedError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 60
    lr: float = 1e-3
    batch_size: int = 32
    seed: int = 0
    # sentences packed into one training row; >1 teaches the model to read facts after context
    max_pack: int = 3
    n_layers: int = 2
    n_heads: int = 4
    d_model: int = 64
    d_ff: int = 256
    max_seq_len: int = 64

    def to_dict(self) -> dict:
        return asdict(self)


def _pack(encoded: list[list[int]], rng: np.random.Generator, max_pack: int, max_len: int, bos: int) -> list[list[int]]:
    order = rng.permutation(len(encoded))
    rows, i = [], 0
    while i < len(order):
        k = int(rng.integers(1, max_pack + 1))
        row = [bos]
        for _ in range(k):
            if i >= len(order) or len(row) + len(encoded[order[i]]) > max_len:
                break
            row += encoded[order[i]]
            i += 1
        if len(row) == 1:
            raise ValueError(f"sentence longer than max_seq_len {max_len}")
        rows.append(row)
    return rows


def pretrain(
    corpus: Sequence[str],
    epochs: int | None = None,
    lr: float | None = None,
    seed: int | None = None,
    *,
    config: TrainConfig | None = None,
    tokenizer: Tokenizer | None = None,
    dtype=np.float32,
    on_epoch: Callable[[int, float], None] | None = None,
) -> LanguageModel:
    """Train a fresh model on ``corpus`` sentences with next-token prediction.

    Deterministic given the seed.  Raises :class:`TrainingDivergedError` when the
    loss becomes non-finite.
    """
    if not corpus:
        raise ValueError("pretraining corpus is empty")
    cfg = config or TrainConfig()
    overrides = {k: v for k, v in (("epochs", epochs), ("lr", lr), ("seed", seed)) if v is not None}
    if overrides:
        cfg = TrainConfig(**{**cfg.to_dict(), **overrides})
    tok = tokenizer or Tokenizer.from_texts(corpus)
    mcfg = ModelConfig(
        vocab_size=len(tok),
        n_layers=cfg.n_layers,
        n_heads=cfg.n_heads,
        d_model=cfg.d_model,
        d_ff=cfg.d_ff,
        max_seq_len=cfg.max_seq_len,
    )
    model = LanguageModel.initialize(mcfg, seed=cfg.seed, dtype=dtype, tokenizer=tok)
    model.requires_grad_(True)
    opt = Adam(model.parameters(), lr=cfg.lr)
    rng = np.random.default_rng(cfg.seed + 1)
    encoded = [tok.encode(s) for s in corpus]
    pad = tok.pad_id

    for epoch in range(cfg.epochs):
        rows = _pack(encoded, rng, cfg.max_pack, mcfg.max_seq_len, tok.bos_id)
        total, n_batches = 0.0, 0
        for b in range(0, len(rows), cfg.batch_size):
            batch = rows[b : b + cfg.batch_size]
            width = max(len(r) for r in batch)
            ids = np.full((len(batch), width), pad, dtype=np.int64)
            for j, r in enumerate(batch):
                ids[j, : len(r)] = r
            inputs, targets = ids[:, :-1], ids[:, 1:]
            opt.zero_grad()
            with ad.Tape() as tape:
                x = ad.embedding_lookup(model.params["tok_emb"], inputs)
                logits = model.forward_embeddings(x)
                loss = ad.nll_loss(ad.log_softmax(logits, -1), targets, ignore_index=pad)
            value = float(loss.data)
            if not np.isfinite(value):
                raise TrainingDivergedError(f"loss became {value} at epoch {epoch}, batch {b // cfg.batch_size}")
            tape.backward(loss)
            opt.step()
            total += value
            n_batches += 1
        mean = total / n_batches
        if on_epoch is not None:
            on_epoch(epoch, mean)
        log.debug("epoch %d loss %.4f", epoch, mean)
    model.requires_grad_(False)
    return model
