import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import unit_rows
from knnmoco.bank import DualQueue
from knnmoco.errors import ConfigError, NumericError, RetrievalError


def make_bank(seed=0, capacity=8, dim_h=4, dim_g=3):
    return DualQueue(capacity, dim_h, dim_g, np.random.default_rng(seed))


def test_wraparound_pointer_arithmetic(rng):
    bank = make_bank(capacity=4)
    for _ in range(2):
        bank.enqueue(unit_rows(rng, 2, 4), rng.standard_normal((2, 3)))
    assert bank.ptr == 0
    assert bank.filled == 4


def test_write_contract(rng):
    bank = make_bank(capacity=8)
    h = unit_rows(rng, 3, 4)
    g = rng.standard_normal((3, 3))
    p_old = bank.ptr
    bank.enqueue(h, g)
    assert np.array_equal(bank.q_h[p_old : p_old + 3], h)
    g_norm = g / np.linalg.norm(g, axis=1, keepdims=True)
    assert bank.q_g[p_old : p_old + 3] == pytest.approx(g_norm)


def test_shadow_provenance_alignment(rng):
    # every (q_h[i], q_g[i]) pair must come from the same enqueue row
    bank = make_bank(capacity=32, dim_h=5, dim_g=6)
    shadow = {}
    for step in range(1000):
        b = int(rng.integers(1, 9))
        h = unit_rows(rng, b, 5)
        g = rng.standard_normal((b, 6))
        rows = (bank.ptr + np.arange(b)) % bank.capacity
        bank.enqueue(h, g)
        for j, row in enumerate(rows):
            shadow[int(row)] = (h[j], g[j] / np.linalg.norm(g[j]))
    misaligned = 0
    for row, (h_exp, g_exp) in shadow.items():
        if not (np.array_equal(bank.q_h[row], h_exp)
                and np.allclose(bank.q_g[row], g_exp, atol=1e-12)):
            misaligned += 1
    assert misaligned == 0


def test_all_rows_unit_norm_including_init():
    bank = make_bank(seed=5, capacity=64, dim_h=8, dim_g=12)
    assert np.abs(np.linalg.norm(bank.q_h, axis=1) - 1).max() <= 1e-9
    assert np.abs(np.linalg.norm(bank.q_g, axis=1) - 1).max() <= 1e-9
    rng = np.random.default_rng(6)
    bank.enqueue(unit_rows(rng, 16, 8), rng.standard_normal((16, 12)) * 5)
    assert np.abs(np.linalg.norm(bank.q_g, axis=1) - 1).max() <= 1e-9


def test_topk_self_retrieval(rng):
    bank = make_bank(capacity=8, dim_h=4, dim_g=3)
    g = rng.standard_normal((8, 3))
    bank.enqueue(unit_rows(rng, 8, 4), g)
    assert bank.topk_neighbors(bank.q_g[5], 1)[0] == 5


def test_topk_orthogonal_basis(rng):
    bank = make_bank(capacity=4, dim_h=4, dim_g=4)
    basis = np.eye(4)
    bank.enqueue(basis, basis)
    assert bank.topk_neighbors(np.eye(4)[2], 1)[0] == 2


def test_topk_matches_full_sort_oracle():
    rng = np.random.default_rng(42)
    for trial in range(100):
        dim_g = int(rng.integers(2, 6))
        cap = int(rng.integers(4, 17))
        bank = make_bank(seed=trial, capacity=cap, dim_h=3, dim_g=dim_g)
        bank.enqueue(unit_rows(rng, cap, 3), rng.standard_normal((cap, dim_g)))
        k = int(rng.integers(1, cap + 1))
        q = rng.standard_normal(dim_g)
        got = bank.topk_neighbors(q, k)
        sims = (q / np.linalg.norm(q)) @ bank.q_g.T
        oracle = sorted(range(cap), key=lambda i: (-sims[i], i))[:k]
        assert list(got) == oracle


def test_topk_stable_tie_break():
    bank = make_bank(capacity=4, dim_h=4, dim_g=4)
    row = np.array([1.0, 0.0, 0.0, 0.0])
    bank.enqueue(np.tile(np.eye(4)[0], (4, 1)), np.tile(row, (4, 1)))
    assert list(bank.topk_neighbors(row, 3)) == [0, 1, 2]


def test_retrieval_invariant_to_query_rescaling(rng):
    bank = make_bank(capacity=16, dim_h=4, dim_g=5)
    bank.enqueue(unit_rows(rng, 16, 4), rng.standard_normal((16, 5)))
    q = rng.standard_normal(5)
    assert np.array_equal(bank.topk_neighbors(q, 4), bank.topk_neighbors(37.0 * q, 4))


def test_neighbor_embeddings_contract(rng):
    bank = make_bank(capacity=8, dim_h=4, dim_g=3)
    bank.enqueue(unit_rows(rng, 8, 4), rng.standard_normal((8, 3)))
    assert np.array_equal(bank.neighbor_embeddings([5]), bank.q_h[[5]])
    assert bank.neighbor_embeddings([]).shape == (0, 4)
    # round trip: mine on q_g, read aligned q_h rows
    idx = bank.topk_neighbors(bank.q_g[3], 1)
    assert np.array_equal(bank.neighbor_embeddings(idx), bank.q_h[[3]])


def test_errors():
    bank = make_bank(capacity=4)
    rng = np.random.default_rng(0)
    with pytest.raises(ConfigError):
        bank.enqueue(unit_rows(rng, 5, 4), rng.standard_normal((5, 3)))
    with pytest.raises(ConfigError):
        bank.enqueue(unit_rows(rng, 2, 4) * 2.0, rng.standard_normal((2, 3)))
    with pytest.raises(NumericError):
        bank.enqueue(unit_rows(rng, 1, 4), np.zeros((1, 3)))
    fresh = make_bank(capacity=4)
    with pytest.raises(RetrievalError):
        fresh.topk_neighbors(np.ones(3), 1)  # nothing filled yet
    with pytest.raises(RetrievalError):
        bank.neighbor_embeddings([9])


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 6), st.integers(1, 4), st.integers(0, 2 ** 31 - 1))
def test_pointer_advances_modulo_capacity(n_batches, b, seed):
    rng = np.random.default_rng(seed)
    bank = DualQueue(8, 3, 3, rng)
    total = 0
    for _ in range(n_batches):
        bank.enqueue(unit_rows(rng, b, 3), rng.standard_normal((b, 3)))
        total += b
        assert bank.ptr == total % 8
        assert bank.filled == min(8, total)


def test_state_dict_roundtrip(rng):
    bank = make_bank(capacity=8, dim_h=4, dim_g=3)
    bank.enqueue(unit_rows(rng, 5, 4), rng.standard_normal((5, 3)))
    clone = make_bank(seed=99, capacity=8, dim_h=4, dim_g=3)
    clone.load_state_dict(bank.state_dict())
    assert np.array_equal(clone.q_h, bank.q_h)
    assert np.array_equal(clone.q_g, bank.q_g)
    assert (clone.ptr, clone.filled) == (bank.ptr, bank.filled)
