import itertools

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra import numpy as hnp

from hntc.tensor import fold, frobenius, inner, load_tensor, lttv, save_tensor, unfold

shapes = hnp.array_shapes(min_dims=1, max_dims=4, min_side=1, max_side=4)


def numbered():
    x = np.empty((2, 2, 2))
    for i1, i2, i3 in itertools.product(range(1, 3), repeat=3):
        x[i1 - 1, i2 - 1, i3 - 1] = i1 + 2 * (i2 - 1) + 4 * (i3 - 1)
    return x


def unfold_oracle(x, m):
    """Direct evaluation of j = 1 + sum_{k != m} (i_k - 1) J_k."""
    dims = x.shape
    mat = np.zeros((dims[m - 1], x.size // dims[m - 1]))
    for idx in itertools.product(*(range(d) for d in dims)):
        j, stride = 0, 1
        for k in range(len(dims)):
            if k == m - 1:
                continue
            j += idx[k] * stride
            stride *= dims[k]
        mat[idx[m - 1], j] = x[idx]
    return mat


def test_unfold_matrix_mode1_is_identity(rng):
    a = rng.normal(size=(3, 5))
    np.testing.assert_array_equal(unfold(a, 1), a)


def test_unfold_numbered_tensor():
    np.testing.assert_array_equal(unfold(numbered(), 1), [[1, 3, 5, 7], [2, 4, 6, 8]])


def test_fold_numbered_tensor():
    np.testing.assert_array_equal(fold(np.array([[1, 3, 5, 7], [2, 4, 6, 8.0]]), 1, (2, 2, 2)), numbered())


def test_fold_dimension_mismatch():
    with pytest.raises(ValueError):
        fold(np.zeros((3, 2)), 1, (2, 2, 2))


@pytest.mark.parametrize("m", [0, 4])
def test_unfold_mode_out_of_range(m):
    with pytest.raises(ValueError):
        unfold(np.zeros((2, 2, 2)), m)


@given(hnp.arrays(np.float64, shapes, elements=st.floats(-1e6, 1e6)), st.data())
def test_unfold_matches_index_formula_and_round_trips(x, data):
    m = data.draw(st.integers(1, x.ndim))
    mat = unfold(x, m)
    np.testing.assert_array_equal(mat, unfold_oracle(x, m))
    back = fold(mat, m, x.shape)
    assert np.array_equal(back, x)
    assert sorted(mat.ravel()) == sorted(x.ravel())


def test_inner_and_frobenius_examples(rng):
    x = rng.normal(size=(2, 3))
    assert inner(x, np.zeros_like(x)) == 0
    assert inner(x, x) == pytest.approx(frobenius(x) ** 2)
    assert inner(np.array([1.0, 2.0]), np.array([3.0, 4.0])) == 11
    assert frobenius(np.zeros((2, 2))) == 0
    assert frobenius(np.ones((2, 2, 2))) == pytest.approx(np.sqrt(8), abs=1e-15)
    assert frobenius(-3 * x) == pytest.approx(3 * frobenius(x))
    with pytest.raises(ValueError):
        inner(np.zeros(2), np.zeros(3))


def test_lttv_hand_examples():
    assert lttv(np.full((3, 4), 2.5)) == 0
    assert abs(lttv(np.array([0.0, 1.0, 3.0])) - 5) <= 1e-12
    assert abs(lttv(np.array([[0.0, 1.0], [2.0, 3.0]])) - 10) <= 1e-12


def lttv_oracle(x):
    total = 0.0
    for idx in itertools.product(*(range(d) for d in x.shape)):
        for axis in range(x.ndim):
            if idx[axis] + 1 < x.shape[axis]:
                nb = list(idx)
                nb[axis] += 1
                total += (x[tuple(nb)] - x[idx]) ** 2
    return total


@given(hnp.arrays(np.float64, shapes, elements=st.floats(-100, 100)),
       st.floats(-50, 50), st.floats(-5, 5))
def test_lttv_properties(x, c, s):
    v = lttv(x)
    assert v >= 0
    assert v == pytest.approx(lttv_oracle(x), rel=1e-9, abs=1e-9)
    assert lttv(x + c) == pytest.approx(v, rel=1e-9, abs=1e-6)
    assert lttv(s * x) == pytest.approx(s * s * v, rel=1e-9, abs=1e-9)


def test_lttv_zero_only_for_constant(rng):
    x = np.ones((2, 3, 2))
    x[1, 2, 0] += 1e-3
    assert lttv(x) > 0


def test_tensor_file_round_trip(tmp_path, rng):
    x = rng.normal(size=(3, 2, 4))
    path = tmp_path / "t.npy"
    save_tensor(path, x)
    np.testing.assert_array_equal(load_tensor(path), x)
    with pytest.raises(FileNotFoundError):
        load_tensor(tmp_path / "missing.npy")
