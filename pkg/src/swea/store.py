"""Editing-embedding collection keyed by subject token ids.

File format (little-endian)::

    b"SWEA1"
    u32 entry count
    per entry, sorted by key:
        u32 key byte length, UTF-8 key
        u32 rows, u32 cols
        rows * cols float32, row-major
    u32 byte length, UTF-8 JSON object:
        {"meta": {...}, "provenance": {key: {...}}, "request_log": [...]}

Deltas are held as float32 in memory so a save/load round trip is bit-exact.
"""

from __future__ import annotations

import copy
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from ._io import atomic_write_bytes

MAGIC = b"SWEA1"
_U32 = struct.Struct("<I")


class StoreError(ValueError):
    """Malformed or corrupt store file."""


@dataclass(frozen=True)
class EditKey:
    key: str
    token_ids: tuple[int, ...]

    def __post_init__(self):
        if not self.token_ids:
            raise ValueError("an edit key needs at least one token id")
        if self.key != "_".join(str(i) for i in self.token_ids):
            raise ValueError(f"key {self.key!r} does not match token ids {self.token_ids}")

    @classmethod
    def parse(cls, key: str) -> EditKey:
        parts = key.split("_")
        if not key or not all(p.isdigit() and str(int(p)) == p for p in parts):
            raise ValueError(f"malformed edit key {key!r}")
        return cls(key, tuple(int(p) for p in parts))

    def __len__(self) -> int:
        return len(self.token_ids)


def make_key(token_ids: Sequence[int]) -> EditKey:
    """``[2986, 6033] -> "2986_6033"``; a single id is used as-is."""
    ids = tuple(int(i) for i in token_ids)
    if not ids:
        raise ValueError("cannot build a key from an empty id sequence")
    if any(i < 0 for i in ids):
        raise ValueError("token ids must be non-negative")
    return EditKey("_".join(map(str, ids)), ids)


@dataclass
class EditingEmbedding:
    key: EditKey
    deltas: np.ndarray
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        self.deltas = np.array(self.deltas, dtype=np.float32)
        if self.deltas.ndim != 2 or self.deltas.shape[0] != len(self.key):
            raise ValueError(f"deltas of shape {self.deltas.shape} do not match {len(self.key)} key tokens")
        if not np.isfinite(self.deltas).all():
            raise ValueError(f"non-finite delta values for key {self.key.key}")

    def __eq__(self, other) -> bool:
        if not isinstance(other, EditingEmbedding):
            return NotImplemented
        return (
            self.key == other.key
            and self.deltas.shape == other.deltas.shape
            and self.deltas.tobytes() == other.deltas.tobytes()
            and self.provenance == other.provenance
        )


class EditingStore:
    """Map from key string to :class:`EditingEmbedding`, plus the request log.

    Single-writer: mutate from one thread; concurrent lookups on a store that is
    not being mutated are safe.
    """

    def __init__(self, meta: dict | None = None):
        self.entries: dict[str, EditingEmbedding] = {}
        self.request_log: list[dict] = []
        self.meta: dict = dict(meta or {})
        self.failures: dict[str, str] = {}
        self.version = 0

    @classmethod
    def for_model(cls, model) -> EditingStore:
        meta = {}
        if getattr(model, "tokenizer", None) is not None:
            meta["vocab_sha256"] = model.tokenizer.sha256
        return cls(meta)

    def __len__(self) -> int:
        return len(self.entries)

    def __contains__(self, key: str) -> bool:
        return key in self.entries

    def __getitem__(self, key: str) -> EditingEmbedding:
        return self.entries[key]

    def get(self, key: str) -> EditingEmbedding | None:
        return self.entries.get(key)

    def keys(self):
        return self.entries.keys()

    def __eq__(self, other) -> bool:
        if not isinstance(other, EditingStore):
            return NotImplemented
        return self.entries == other.entries and self.request_log == other.request_log and self.meta == other.meta

    def copy(self) -> EditingStore:
        out = EditingStore(self.meta)
        out.entries = {k: EditingEmbedding(v.key, v.deltas.copy(), copy.deepcopy(v.provenance)) for k, v in self.entries.items()}
        out.request_log = copy.deepcopy(self.request_log)
        return out

    def upsert(self, embedding: EditingEmbedding, request=None) -> None:
        """Insert or replace the entry for ``embedding.key``; log ``request`` if given."""
        if not np.isfinite(embedding.deltas).all():
            raise ValueError(f"non-finite delta values for key {embedding.key.key}")
        self.entries[embedding.key.key] = embedding
        if request is not None:
            self.log_request(request)
        self.version += 1

    def log_request(self, request) -> None:
        self.request_log.append(request.to_dict() if hasattr(request, "to_dict") else dict(request))
        self.version += 1

    def remove(self, key: str) -> None:
        del self.entries[key]
        self.version += 1

    # -- persistence -------------------------------------------------------------

    def to_bytes(self) -> bytes:
        parts = [MAGIC, _U32.pack(len(self.entries))]
        for key in sorted(self.entries):
            emb = self.entries[key]
            kb = key.encode("utf-8")
            rows, cols = emb.deltas.shape
            parts += [_U32.pack(len(kb)), kb, _U32.pack(rows), _U32.pack(cols)]
            parts.append(np.ascontiguousarray(emb.deltas, dtype="<f4").tobytes())
        tail = {
            "meta": self.meta,
            "provenance": {k: self.entries[k].provenance for k in sorted(self.entries)},
            "request_log": self.request_log,
        }
        jb = json.dumps(tail, sort_keys=True, ensure_ascii=False).encode("utf-8")
        parts += [_U32.pack(len(jb)), jb]
        return b"".join(parts)

    def save(self, path: str | Path) -> None:
        atomic_write_bytes(path, self.to_bytes())

    @classmethod
    def from_bytes(cls, blob: bytes) -> EditingStore:
        if blob[: len(MAGIC)] != MAGIC:
            raise StoreError("not a SWEA1 store (bad magic)")
        off = len(MAGIC)

        def take(n: int) -> bytes:
            nonlocal off
            if off + n > len(blob):
                raise StoreError("truncated store file")
            chunk = blob[off : off + n]
            off += n
            return chunk

        def u32() -> int:
            return _U32.unpack(take(4))[0]

        count = u32()
        raw = []
        for _ in range(count):
            try:
                key = take(u32()).decode("utf-8")
            except UnicodeDecodeError as exc:
                raise StoreError("entry key is not valid UTF-8") from exc
            rows, cols = u32(), u32()
            deltas = np.frombuffer(take(4 * rows * cols), dtype="<f4").reshape(rows, cols).astype(np.float32)
            raw.append((key, deltas))
        try:
            tail = json.loads(take(u32()).decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise StoreError(f"corrupt request log: {exc}") from exc
        if off != len(blob):
            raise StoreError(f"{len(blob) - off} trailing bytes after request log")
        if not isinstance(tail, dict) or not {"meta", "provenance", "request_log"} <= set(tail):
            raise StoreError("request log JSON lacks required fields")
        store = cls(tail["meta"])
        try:
            for key, deltas in raw:
                if key in store.entries:
                    raise StoreError(f"duplicate key {key!r}")
                store.entries[key] = EditingEmbedding(EditKey.parse(key), deltas, tail["provenance"].get(key, {}))
        except ValueError as exc:
            raise StoreError(str(exc)) from exc
        store.request_log = list(tail["request_log"])
        return store

    @classmethod
    def load(cls, path: str | Path) -> EditingStore:
        return cls.from_bytes(Path(path).read_bytes())


def upsert(store: EditingStore, embedding: EditingEmbedding, request=None) -> EditingStore:
    """Functional form of :meth:`EditingStore.upsert`; returns a modified copy."""
    out = store.copy()
    out.upsert(embedding, request)
    return out


def save(store: EditingStore, path: str | Path) -> None:
    store.save(path)


def load(path: str | Path) -> EditingStore:
    return EditingStore.load(path)


def latest_requests(store: EditingStore) -> dict[str, dict]:
    """Most recent logged request per subject key, in first-seen key order."""
    from .osfusion import EditRequest

    out: dict[str, dict] = {}
    for rec in store.request_log:
        req = EditRequest.from_dict(rec)
        out[req.subject] = rec
    return out


def recompute_for_sequential(
    store: EditingStore, model, config, workers: int | None = None, strict: bool = True
) -> EditingStore:
    """Regenerate entries whose latest logged request (or config) changed.

    Fusion always runs against ``model`` as given, which must be the unedited
    model.  Keys whose provenance already matches are left untouched.  With
    ``strict`` a failure raises :class:`~swea.osfusion.FusionError` naming the
    first failed request; otherwise failures land in ``out.failures`` and the
    affected keys keep their previous entry (if any).
    """
    from .osfusion import EditRequest, FusionError, fuse_many

    if not store.request_log:
        raise ValueError("request log is empty")
    out = store.copy()
    out.failures = dict(store.failures)
    tok = model.tokenizer
    pending = []
    for rec in latest_requests(store).values():
        req = EditRequest.from_dict(rec)
        try:
            key = make_key(tok.encode(req.subject)).key
        except (ValueError, KeyError) as exc:
            if strict:
                raise FusionError(f"fusion failed for request {req.request_id}: {exc}", req.request_id) from exc
            out.failures[req.request_id] = f"{type(exc).__name__}: {exc}"
            continue
        current = store.entries.get(key)
        if current is None or current.provenance.get("fingerprint") != req.fingerprint(config):
            pending.append((key, req))
    if not pending:
        return out
    results, failures = fuse_many(model, [r for _, r in pending], config, workers)
    if failures and strict:
        rid, msg = next(iter(failures.items()))
        raise FusionError(f"fusion failed for request {rid}: {msg}", rid)
    out.failures.update(failures)
    for (key, req), res in zip(pending, results):
        if res is None:
            continue
        out.failures.pop(req.request_id, None)
        out.entries[key] = EditingEmbedding(
            make_key(res.prepared.subject_ids),
            res.editing_embedding(config.gamma),
            {"request_id": req.request_id, "fingerprint": req.fingerprint(config), "config": config.to_dict()},
        )
    out.version += 1
    return out


def apply_requests(store: EditingStore, requests: Iterable, model, config, workers: int | None = None) -> EditingStore:
    """Log ``requests`` then bring entries up to date (one sequential stage)."""
    out = store.copy()
    for req in requests:
        out.log_request(req)
    return recompute_for_sequential(out, model, config, workers)
