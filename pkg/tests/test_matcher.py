import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from swea.matcher import MatchResult, PatchShapeError, apply_patches, find_longest_match, swea_logits
from swea.store import EditingEmbedding, EditingStore, make_key


def store_of(*keys, h=3):
    s = EditingStore()
    for i, ids in enumerate(keys):
        s.upsert(EditingEmbedding(make_key(ids), np.full((len(ids), h), i + 1.0)))
    return s


def brute_force(ids, store):
    best, best_len = None, 0
    for i in range(len(ids)):
        for j in range(i + 1, len(ids) + 1):
            key = "_".join(map(str, ids[i:j]))
            if key in store and len(key) > best_len:
                best, best_len = (key, i, j), len(key)
    return best


def as_tuple(m: MatchResult | None):
    return None if m is None else (m.key.key, m.start, m.end)


def test_longest_key_string_wins():
    s = store_of([5], [5, 6], [123])
    assert as_tuple(find_longest_match([1, 5, 6, 123], s)) == ("5_6", 1, 3)
    # "123" and "5_6" are both three characters: the earlier start wins
    assert as_tuple(find_longest_match([123, 0, 5, 6], s)) == ("123", 0, 1)


def test_key_string_length_not_token_count():
    s = store_of([1, 2], [12345])
    assert as_tuple(find_longest_match([1, 2, 12345], s)) == ("12345", 2, 3)


def test_no_match_and_empty_store():
    assert find_longest_match([1, 2, 3], store_of([4])) is None
    assert find_longest_match([1, 2, 3], EditingStore()) is None


@settings(max_examples=300, deadline=None)
@given(
    st.lists(st.lists(st.integers(0, 12), min_size=1, max_size=3), max_size=6),
    st.lists(st.integers(0, 12), max_size=10),
)
def test_matches_brute_force(keys, ids):
    s = store_of(*keys)
    assert as_tuple(find_longest_match(ids, s)) == brute_force(ids, s.entries)


def test_apply_patches_adds_only_on_match():
    s = store_of([2, 3])
    x = np.zeros((2, 4, 3))
    out = apply_patches([[1, 2, 3, 4], [1, 5, 6, 7]], x, s)
    np.testing.assert_array_equal(out[0, 1:3], 1.0)
    assert out[0, [0, 3]].sum() == 0
    assert out[1].tobytes() == x[1].tobytes()
    assert x.sum() == 0


def test_single_token_rows_skipped():
    s = store_of([2])
    x = np.zeros((1, 1, 3))
    assert apply_patches([[2]], x, s).sum() == 0


def test_only_one_span_patched_per_row():
    s = store_of([2], [4])
    out = apply_patches([[2, 9, 4]], np.zeros((1, 3, 3)), s)
    assert out[0, 0].sum() == 3.0 and out[0, 2].sum() == 0.0


def test_shape_mismatch():
    s = store_of([2, 3], h=5)
    with pytest.raises(PatchShapeError):
        apply_patches([[2, 3]], np.zeros((1, 2, 3)), s)


def test_empty_store_logits_bitwise(small_model):
    ids = [1, 3, 4, 5, 6]
    assert swea_logits(small_model, ids, EditingStore()).tobytes() == small_model.logits(ids).tobytes()


def test_unmatched_prompt_bitwise(small_model, small_tokenizer):
    alice = small_tokenizer.encode("Alice Smith")
    s = EditingStore()
    s.upsert(EditingEmbedding(make_key(alice), np.ones((2, 64))))
    ids = [1, *small_tokenizer.encode("Bob lives in Rome")]
    assert swea_logits(small_model, ids, s).tobytes() == small_model.logits(ids).tobytes()
    hit = [1, *small_tokenizer.encode("Alice Smith lives in")]
    assert swea_logits(small_model, hit, s).tobytes() != small_model.logits(hit).tobytes()


def test_trie_cache_invalidated_on_upsert():
    s = store_of([1])
    assert find_longest_match([1, 2], s).key.key == "1"
    s.upsert(EditingEmbedding(make_key([1, 2]), np.zeros((2, 3))))
    assert find_longest_match([1, 2], s).key.key == "1_2"
    s.remove("1_2")
    assert find_longest_match([1, 2], s).key.key == "1"
