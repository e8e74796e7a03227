from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from .. import autodiff as ad
from ..autodiff import DimensionError, Tensor
from .tokenizer import Tokenizer

_MASK_VALUE = -1e9


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    n_layers: int = 2
    n_heads: int = 4
    d_model: int = 64
    d_ff: int = 256
    max_seq_len: int = 64
    ln_eps: float = 1e-5

    def __post_init__(self):
        for name in ("vocab_size", "n_layers", "n_heads", "d_model", "d_ff", "max_seq_len"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        if not self.ln_eps > 0:
            raise ValueError("ln_eps must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class SpanPatch:
    """Additive deltas for input token embeddings over ``[start, start + len(deltas))``."""

    start: int
    deltas: np.ndarray

    @property
    def end(self) -> int:
        return self.start + len(self.deltas)


def param_shapes(cfg: ModelConfig) -> list[tuple[str, tuple[int, ...]]]:
    """Parameter names and shapes, in checkpoint order."""
    h, ff, V = cfg.d_model, cfg.d_ff, cfg.vocab_size
    shapes = [("tok_emb", (V, h)), ("pos_emb", (cfg.max_seq_len, h))]
    for i in range(cfg.n_layers):
        p = f"blocks.{i}."
        shapes += [
            (p + "ln1.gain", (h,)),
            (p + "ln1.bias", (h,)),
            (p + "attn.qkv.weight", (h, 3 * h)),
            (p + "attn.qkv.bias", (3 * h,)),
            (p + "attn.out.weight", (h, h)),
            (p + "attn.out.bias", (h,)),
            (p + "ln2.gain", (h,)),
            (p + "ln2.bias", (h,)),
            (p + "mlp.in.weight", (h, ff)),
            (p + "mlp.in.bias", (ff,)),
            (p + "mlp.out.weight", (ff, h)),
            (p + "mlp.out.bias", (h,)),
        ]
    shapes += [("ln_f.gain", (h,)), ("ln_f.bias", (h,)), ("unembed.weight", (h, V)), ("unembed.bias", (V,))]
    return shapes


class LanguageModel:
    """Pre-LayerNorm decoder-only transformer with learned absolute positions.

    The unembedding is untied from the input embedding table.
    """

    def __init__(self, config: ModelConfig, params: dict[str, np.ndarray], tokenizer: Tokenizer | None = None):
        expected = param_shapes(config)
        if set(params) != {n for n, _ in expected}:
            raise ValueError("parameter names do not match the config")
        for name, shape in expected:
            if params[name].shape != shape:
                raise DimensionError(f"{name}: expected {shape}, got {params[name].shape}")
        if tokenizer is not None and len(tokenizer) != config.vocab_size:
            raise ValueError("tokenizer size differs from config.vocab_size")
        self.config = config
        self.tokenizer = tokenizer
        self.params = {name: Tensor(params[name]) for name, _ in expected}
        dtype = self.dtype
        L = config.max_seq_len
        self._mask = np.triu(np.full((L, L), _MASK_VALUE, dtype=dtype), k=1)

    @classmethod
    def initialize(cls, config: ModelConfig, seed: int = 0, dtype=np.float32, tokenizer: Tokenizer | None = None):
        rng = np.random.default_rng(seed)
        resid_std = 0.02 / math.sqrt(2 * config.n_layers)
        params = {}
        for name, shape in param_shapes(config):
            if name.endswith(".gain"):
                arr = np.ones(shape)
            elif name.endswith(".bias"):
                arr = np.zeros(shape)
            elif name == "pos_emb":
                arr = rng.normal(0.0, 0.01, shape)
            elif name.endswith("attn.out.weight") or name.endswith("mlp.out.weight"):
                arr = rng.normal(0.0, resid_std, shape)
            else:
                arr = rng.normal(0.0, 0.02, shape)
            params[name] = arr.astype(dtype)
        return cls(config, params, tokenizer)

    @property
    def dtype(self):
        return self.params["tok_emb"].dtype

    def astype(self, dtype) -> LanguageModel:
        return LanguageModel(self.config, {k: v.data.astype(dtype) for k, v in self.params.items()}, self.tokenizer)

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def requires_grad_(self, flag: bool) -> LanguageModel:
        for p in self.params.values():
            p.requires_grad = flag
            p.grad = None
        return self

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    # -- forward ---------------------------------------------------------------

    def embed(self, ids) -> np.ndarray:
        """Raw token embeddings (no positions), as a plain array."""
        ids = np.asarray(ids, dtype=np.int64)
        V = self.config.vocab_size
        if ids.size and (ids.min() < 0 or ids.max() >= V):
            raise IndexError(f"token id outside [0, {V})")
        return self.params["tok_emb"].data[ids]

    def forward_embeddings(self, x: Tensor | np.ndarray) -> Tensor:
        """Run the transformer on token embeddings of shape ``(L, h)`` or ``(B, L, h)``."""
        if not isinstance(x, Tensor):
            x = Tensor(np.asarray(x, dtype=self.dtype))
        cfg = self.config
        squeeze = x.data.ndim == 2
        if squeeze:
            x = ad.reshape(x, (1, *x.shape))
        if x.data.ndim != 3 or x.shape[-1] != cfg.d_model:
            raise DimensionError(f"expected (B, L, {cfg.d_model}) embeddings, got {x.shape}")
        B, L, h = x.shape
        if L > cfg.max_seq_len:
            raise DimensionError(f"sequence length {L} exceeds max_seq_len {cfg.max_seq_len}")
        P = self.params
        H = cfg.n_heads
        dh = h // H
        mask = Tensor(self._mask[:L, :L])
        x = x + P["pos_emb"][:L]
        for i in range(cfg.n_layers):
            p = f"blocks.{i}."
            a = ad.layer_norm(x, P[p + "ln1.gain"], P[p + "ln1.bias"], cfg.ln_eps)
            qkv = a @ P[p + "attn.qkv.weight"] + P[p + "attn.qkv.bias"]
            qkv = ad.transpose(ad.reshape(qkv, (B, L, 3, H, dh)), (2, 0, 3, 1, 4))
            q, k, v = qkv[0], qkv[1], qkv[2]
            att = ad.scale(q @ ad.transpose(k, (0, 1, 3, 2)), 1.0 / math.sqrt(dh)) + mask
            att = ad.softmax(att, axis=-1)
            y = ad.reshape(ad.transpose(att @ v, (0, 2, 1, 3)), (B, L, h))
            x = x + (y @ P[p + "attn.out.weight"] + P[p + "attn.out.bias"])
            m = ad.layer_norm(x, P[p + "ln2.gain"], P[p + "ln2.bias"], cfg.ln_eps)
            m = ad.gelu(m @ P[p + "mlp.in.weight"] + P[p + "mlp.in.bias"])
            x = x + (m @ P[p + "mlp.out.weight"] + P[p + "mlp.out.bias"])
        x = ad.layer_norm(x, P["ln_f.gain"], P["ln_f.bias"], cfg.ln_eps)
        logits = x @ P["unembed.weight"] + P["unembed.bias"]
        if squeeze:
            logits = ad.reshape(logits, (L, cfg.vocab_size))
        return logits

    def patched_embeddings(self, ids: Sequence[int], patch: SpanPatch | None = None) -> np.ndarray:
        x = self.embed(ids)
        if patch is None:
            return x
        deltas = np.asarray(patch.deltas)
        if deltas.ndim != 2 or deltas.shape[1] != self.config.d_model:
            raise DimensionError(f"patch deltas must be (n, {self.config.d_model}), got {deltas.shape}")
        if patch.start < 0 or patch.end > len(x) or len(deltas) == 0:
            raise IndexError(f"patch span [{patch.start}, {patch.end}) outside sequence of length {len(x)}")
        x = x.copy()
        x[patch.start : patch.end] += deltas.astype(x.dtype, copy=False)
        return x

    def forward(self, ids: Sequence[int], patch: SpanPatch | None = None) -> Tensor:
        """Causal next-token logits of shape ``(len(ids), vocab_size)``."""
        return self.forward_embeddings(self.patched_embeddings(ids, patch))

    def logits(self, ids: Sequence[int], patch: SpanPatch | None = None) -> np.ndarray:
        with ad.no_grad():
            return self.forward(ids, patch).data

    def sequence_logprob(self, ids: Sequence[int], continuation_ids: Sequence[int], patch: SpanPatch | None = None) -> float:
        """Teacher-forced ``sum_i log P(continuation[i] | ids + continuation[:i])``."""
        ids, cont = list(ids), list(continuation_ids)
        if not ids:
            raise ValueError("sequence_logprob needs a non-empty prefix")
        if not cont:
            return 0.0
        full = ids + cont[:-1]
        return _logprob_from_logits(self.logits(full, patch), len(ids), cont)

    def greedy(self, ids: Sequence[int], max_new_tokens: int, patch: SpanPatch | None = None) -> list[int]:
        seq = list(ids)
        out = []
        for _ in range(max_new_tokens):
            if len(seq) >= self.config.max_seq_len:
                break
            nxt = int(np.argmax(self.logits(seq, patch)[-1]))
            out.append(nxt)
            seq.append(nxt)
        return out


def _logprob_from_logits(logits: np.ndarray, n_prefix: int, cont: list[int]) -> float:
    rows = logits[n_prefix - 1 : n_prefix - 1 + len(cont)].astype(np.float64)
    z = rows - rows.max(axis=-1, keepdims=True)
    lp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    return float(lp[np.arange(len(cont)), cont].sum())


def generate_prefixes(model: LanguageModel, count: int, length: int, seed: int = 0) -> list[list[int]]:
    """Sample ``count`` prefixes of exactly ``length`` tokens from the model.

    Sampling starts after BOS and never emits the padding or BOS tokens.
    """
    if count < 0 or length < 0:
        raise ValueError("count and length must be non-negative")
    rng = np.random.default_rng(seed)
    bos = model.tokenizer.bos_id if model.tokenizer is not None else 1
    banned = [0, bos]
    prefixes = []
    for _ in range(count):
        seq = [bos]
        for _ in range(length):
            logits = model.logits(seq)[-1].astype(np.float64)
            logits[banned] = -np.inf
            p = np.exp(logits - logits.max())
            p /= p.sum()
            seq.append(int(rng.choice(len(p), p=p)))
        prefixes.append(seq[1:])
    return prefixes
