"""``TOYLM1`` checkpoint format.

Layout (all little-endian)::

    b"TOYLM1"
    u32 n_layers, n_heads, d_model, d_ff, vocab_size, max_seq_len
    u32 ln_eps as its IEEE-754 float32 bit pattern
    float32 parameters, row-major, in ``param_shapes`` order

The vocabulary travels in a separate UTF-8 file, one token per line.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .._io import atomic_write_bytes
from .model import LanguageModel, ModelConfig, param_shapes
from .tokenizer import Tokenizer

MAGIC = b"TOYLM1"
_HEADER = struct.Struct("<7I")
CHECKPOINT_NAME = "model.toylm"
VOCAB_NAME = "vocab.txt"


class CheckpointError(ValueError):
    pass


def checkpoint_bytes(model: LanguageModel) -> bytes:
    cfg = model.config
    (eps_bits,) = struct.unpack("<I", struct.pack("<f", cfg.ln_eps))
    parts = [
        MAGIC,
        _HEADER.pack(cfg.n_layers, cfg.n_heads, cfg.d_model, cfg.d_ff, cfg.vocab_size, cfg.max_seq_len, eps_bits),
    ]
    for name, _ in param_shapes(cfg):
        parts.append(np.ascontiguousarray(model.params[name].data, dtype="<f4").tobytes())
    return b"".join(parts)


def save_checkpoint(model: LanguageModel, path: str | Path) -> None:
    atomic_write_bytes(path, checkpoint_bytes(model))


def parse_checkpoint(blob: bytes, tokenizer: Tokenizer | None = None, dtype=np.float32) -> LanguageModel:
    if blob[: len(MAGIC)] != MAGIC:
        raise CheckpointError("not a TOYLM1 checkpoint (bad magic)")
    off = len(MAGIC)
    if len(blob) < off + _HEADER.size:
        raise CheckpointError("truncated checkpoint header")
    *dims, eps_bits = _HEADER.unpack_from(blob, off)
    off += _HEADER.size
    (eps,) = struct.unpack("<f", struct.pack("<I", eps_bits))
    n_layers, n_heads, d_model, d_ff, vocab_size, max_seq_len = dims
    try:
        cfg = ModelConfig(
            vocab_size=vocab_size,
            n_layers=n_layers,
            n_heads=n_heads,
            d_model=d_model,
            d_ff=d_ff,
            max_seq_len=max_seq_len,
            ln_eps=float(eps),
        )
    except ValueError as exc:
        raise CheckpointError(f"invalid config in header: {exc}") from exc
    shapes = param_shapes(cfg)
    need = sum(int(np.prod(s)) for _, s in shapes) * 4
    if len(blob) - off != need:
        raise CheckpointError(f"expected {need} parameter bytes, found {len(blob) - off}")
    params = {}
    for name, shape in shapes:
        n = int(np.prod(shape))
        params[name] = np.frombuffer(blob, dtype="<f4", count=n, offset=off).reshape(shape).astype(dtype)
        off += 4 * n
    if tokenizer is not None and len(tokenizer) != vocab_size:
        raise CheckpointError(f"vocab has {len(tokenizer)} tokens, checkpoint expects {vocab_size}")
    return LanguageModel(cfg, params, tokenizer)


def load_checkpoint(path: str | Path, tokenizer: Tokenizer | None = None, dtype=np.float32) -> LanguageModel:
    return parse_checkpoint(Path(path).read_bytes(), tokenizer, dtype)


def save_model(model: LanguageModel, directory: str | Path) -> None:
    directory = Path(directory)
    save_checkpoint(model, directory / CHECKPOINT_NAME)
    if model.tokenizer is not None:
        model.tokenizer.save(directory / VOCAB_NAME)


def load_model(directory: str | Path, dtype=np.float32) -> LanguageModel:
    directory = Path(directory)
    tok = Tokenizer.load(directory / VOCAB_NAME)
    return load_checkpoint(directory / CHECKPOINT_NAME, tok, dtype)
