"""Token-level longest matching of stored subject keys and embedding altering.

For each input row the matcher scans every contiguous span, looks the span's
key up in the store, and keeps the match whose *key string* is longest.  Ties
go to the earliest start (the scan only replaces on a strictly longer key).  At
most one span per row is patched, and rows with a single token are skipped.
Keys are walked through a token-id trie, so each start position costs at most
the depth of the longest key.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .store import EditingStore, EditKey


class PatchShapeError(ValueError):
    pass


@dataclass(frozen=True)
class MatchResult:
    key: EditKey
    start: int
    end: int


class _Node:
    __slots__ = ("children", "key")

    def __init__(self):
        self.children: dict[int, _Node] = {}
        self.key: EditKey | None = None


class KeyTrie:
    def __init__(self, keys):
        self.root = _Node()
        for key in keys:
            node = self.root
            for tid in key.token_ids:
                node = node.children.setdefault(tid, _Node())
            node.key = key

    def longest(self, ids: Sequence[int]) -> MatchResult | None:
        best, best_len = None, 0
        n = len(ids)
        for k in range(n):
            node = self.root
            for j in range(k, n):
                node = node.children.get(int(ids[j]))
                if node is None:
                    break
                if node.key is not None and len(node.key.key) > best_len:
                    best, best_len = MatchResult(node.key, k, j + 1), len(node.key.key)
        return best


def _trie_for(store: EditingStore) -> KeyTrie:
    cached = getattr(store, "_trie", None)
    if cached is not None and cached[0] == store.version and cached[1] == len(store.entries):
        return cached[2]
    trie = KeyTrie(e.key for e in store.entries.values())
    store._trie = (store.version, len(store.entries), trie)
    return trie


def find_longest_match(ids: Sequence[int], store: EditingStore) -> MatchResult | None:
    if store is None or len(store) == 0:
        return None
    return _trie_for(store).longest(ids)


def apply_patches(batch_ids, batch_embeddings, store: EditingStore):
    """Add matched deltas to each row's embeddings; returns a patched copy.

    ``batch_embeddings`` is an array ``(B, L, h)`` or a list of ``(L_i, h)``
    arrays aligned with ``batch_ids``.  Rows without a match are returned
    bit-identical.
    """
    if store is None or len(store) == 0:
        return batch_embeddings
    is_array = isinstance(batch_embeddings, np.ndarray)
    out = batch_embeddings.copy() if is_array else [np.array(r) for r in batch_embeddings]
    for i, ids in enumerate(batch_ids):
        if len(ids) <= 1:
            continue
        match = find_longest_match(ids, store)
        if match is None:
            continue
        deltas = store[match.key.key].deltas
        row = out[i]
        if deltas.shape[0] != match.end - match.start or deltas.shape[1] != row.shape[-1]:
            raise PatchShapeError(
                f"stored deltas {deltas.shape} do not fit span [{match.start}, {match.end}) of width {row.shape[-1]}"
            )
        row[match.start : match.end] += deltas.astype(row.dtype, copy=False)
    return out


def swea_logits(model, ids: Sequence[int], store: EditingStore | None) -> np.ndarray:
    """Logits of ``model`` on ``ids`` with the store's edits applied at the input."""
    from . import autodiff as ad

    x = model.embed(list(ids))
    x = apply_patches([list(ids)], x[None], store)[0]
    with ad.no_grad():
        return model.forward_embeddings(x).data


def swea_sequence_logprob(model, ids: Sequence[int], continuation: Sequence[int], store: EditingStore | None) -> float:
    from .toylm.model import _logprob_from_logits

    ids, cont = list(ids), list(continuation)
    if not cont:
        return 0.0
    return _logprob_from_logits(swea_logits(model, ids + cont[:-1], store), len(ids), cont)


def swea_greedy(model, ids: Sequence[int], store: EditingStore | None, max_new_tokens: int = 1) -> list[int]:
    seq, out = list(ids), []
    for _ in range(max_new_tokens):
        nxt = int(np.argmax(swea_logits(model, seq, store)[-1]))
        out.append(nxt)
        seq.append(nxt)
    return out
