import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import loop_contract, loop_matricize
from tnsynth.errors import InvalidArgument, ShapeMismatch
from tnsynth.tensor import (
    Index,
    Tensor,
    canonical,
    contract,
    frobenius_norm,
    from_matrix,
    matricize,
    permute,
    singular_values,
    svd,
    unmatricize,
)


def make(shape, seed=0, names=None):
    rng = np.random.default_rng(seed)
    names = names or [f"I{k + 1}" for k in range(len(shape))]
    idx = [Index(k, names[k], n) for k, n in enumerate(shape)]
    return Tensor(idx, rng.standard_normal(shape))


def test_index_rejects_zero_size():
    with pytest.raises(InvalidArgument):
        Index(0, "I1", 0)


def test_tensor_rejects_duplicate_ids():
    with pytest.raises(InvalidArgument):
        Tensor([Index(0, "a", 2), Index(0, "b", 2)], np.zeros((2, 2)))


def test_tensor_rejects_wrong_length():
    with pytest.raises(ShapeMismatch):
        Tensor([Index(0, "a", 2), Index(1, "b", 3)], np.zeros(5))


def test_tensor_copies_and_freezes_without_touching_caller():
    arr = np.arange(6.0).reshape(2, 3)
    t = Tensor([Index(0, "a", 2), Index(1, "b", 3)], arr)
    arr[0, 0] = 99.0
    assert t.data[0, 0] == 0.0
    assert arr.flags.writeable
    with pytest.raises(ValueError):
        t.data[0, 0] = 1.0


def test_permute_relabels_elements():
    t = make((2, 3, 4))
    p = permute(t, [2, 0, 1])
    assert [ix.name for ix in p.indices] == ["I3", "I1", "I2"]
    for i in range(2):
        for j in range(3):
            for k in range(4):
                assert p.data[k, i, j] == t.data[i, j, k]


def test_permute_rejects_non_permutation():
    with pytest.raises(InvalidArgument):
        permute(make((2, 3, 4)), [0, 0, 1])


def test_canonical_sorts_by_id():
    t = Tensor([Index(5, "x", 2), Index(1, "y", 3)], np.arange(6.0).reshape(2, 3))
    c = canonical(t)
    assert c.ids() == (1, 5)
    assert np.array_equal(c.data, t.data.T)


@pytest.mark.parametrize("rows", [[0], [1], [0, 2], [1, 3], [0, 1, 3]])
def test_matricize_matches_loop_oracle(rows):
    t = make((2, 3, 2, 3), seed=1)
    m = matricize(t, rows)
    assert np.array_equal(m.matrix, loop_matricize(t.data, rows))


def test_matricize_rejects_trivial_row_sets():
    t = make((2, 3, 4))
    with pytest.raises(InvalidArgument):
        matricize(t, [])
    with pytest.raises(InvalidArgument):
        matricize(t, [0, 1, 2])
    with pytest.raises(InvalidArgument):
        matricize(t, [7])


@settings(max_examples=40, deadline=None)
@given(
    shape=st.lists(st.integers(1, 4), min_size=2, max_size=4),
    seed=st.integers(0, 1000),
    data=st.data(),
)
def test_matricize_roundtrip(shape, seed, data):
    t = make(tuple(shape), seed)
    k = data.draw(st.integers(1, len(shape) - 1))
    rows = data.draw(st.permutations(range(len(shape))))[:k]
    back = unmatricize(matricize(t, rows))
    assert back.indices == t.indices
    assert np.array_equal(back.data, t.data)


def test_frobenius_norm_by_sum_of_squares():
    t = make((3, 4, 5), seed=2)
    assert frobenius_norm(t) == pytest.approx(np.sqrt(sum(x * x for x in t.data.ravel())))


def test_svd_reconstructs_with_descending_values():
    m = np.random.default_rng(3).standard_normal((7, 5))
    U, s, Vt = svd(m)
    assert U.shape == (7, 5) and Vt.shape == (5, 5)
    assert np.all(np.diff(s) <= 0)
    assert np.allclose(U @ np.diag(s) @ Vt, m)
    assert np.allclose(U.T @ U, np.eye(5))
    assert np.allclose(singular_values(m), s)


def test_svd_rejects_nan():
    with pytest.raises(InvalidArgument):
        svd(np.array([[1.0, np.nan]]))


def test_contract_matches_loop_oracle():
    rng = np.random.default_rng(4)
    a = Tensor([Index(0, "i", 2), Index(5, "r", 3), Index(1, "j", 2)],
               rng.standard_normal((2, 3, 2)))
    b = Tensor([Index(5, "r", 3), Index(2, "k", 4)], rng.standard_normal((3, 4)))
    c = contract(a, b)
    assert c.ids() == (0, 1, 2)
    expect = loop_contract(a.data, "irj", b.data, "rk", "ijk")
    assert np.allclose(c.data, expect)


def test_contract_size_mismatch():
    a = Tensor([Index(0, "i", 2), Index(5, "r", 3)], np.zeros((2, 3)))
    b = Tensor([Index(5, "r", 4)], np.zeros(4))
    with pytest.raises(ShapeMismatch):
        contract(a, b)


def test_from_matrix_with_order():
    rows = (Index(1, "b", 2),)
    cols = (Index(0, "a", 3),)
    mat = np.arange(6.0).reshape(2, 3)
    t = from_matrix(mat, rows, cols, order=(cols[0], rows[0]))
    assert t.ids() == (0, 1)
    assert np.array_equal(t.data, mat.T)
