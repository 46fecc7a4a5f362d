import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from contilora import matcore
from contilora.errors import ConvergenceError, DimensionError, NonFiniteError, UndefinedInputError


def test_dense_ops_examples():
    m = np.array([[1.0, 2.0], [3.0, 4.0]])
    assert np.array_equal(matcore.product(np.eye(2), m), m)
    assert np.array_equal(matcore.transpose([[1.0, 2.0, 3.0]]), [[1.0], [2.0], [3.0]])
    assert np.array_equal(matcore.product(m, [[5.0], [6.0]]), [[17.0], [39.0]])
    assert np.array_equal(matcore.add(m, m), 2 * m)
    assert np.array_equal(matcore.scale(m, -1.0), -m)
    assert np.array_equal(matcore.elementwise(m, np.square), m * m)


def test_dense_ops_reject_bad_shapes():
    with pytest.raises(DimensionError):
        matcore.product(np.ones((2, 3)), np.ones((2, 3)))
    with pytest.raises(DimensionError):
        matcore.add(np.ones((2, 3)), np.ones((3, 2)))
    with pytest.raises(DimensionError):
        matcore.as_matrix(np.ones(3))
    with pytest.raises(NonFiniteError):
        matcore.as_matrix([[np.nan]])


def test_inputs_not_mutated():
    m = np.array([[1.0, 2.0], [3.0, 4.0]])
    keep = m.copy()
    matcore.svd(m)
    matcore.truncated_factorize(m, 1)
    assert np.array_equal(m, keep)


def test_inner_and_cosine():
    m = np.array([[1.0, 2.0], [3.0, 4.0]])
    assert matcore.frobenius_inner(m, np.zeros((2, 2))) == 0.0
    assert matcore.frobenius_inner(np.eye(2), np.eye(2)) == 2.0
    assert matcore.frobenius_inner(m, np.ones((2, 2))) == 10.0
    assert matcore.cosine_similarity_flat(m, m) == pytest.approx(1.0, abs=1e-15)
    assert matcore.cosine_similarity_flat(m, -m) == pytest.approx(-1.0, abs=1e-15)
    assert matcore.cosine_similarity_flat([[1.0, 0.0]], [[0.0, 1.0]]) == 0.0
    with pytest.raises(UndefinedInputError):
        matcore.cosine_similarity_flat(m, np.zeros((2, 2)))


def test_svd_examples(backend):
    assert np.allclose(matcore.svd(np.diag([3.0, 2.0, 1.0])).singular_values, [3, 2, 1], atol=1e-14)
    zero = matcore.svd(np.zeros((2, 3)))
    assert np.array_equal(zero.singular_values, [0.0, 0.0])
    assert np.allclose(zero.u.T @ zero.u, np.eye(2), atol=1e-12)
    assert np.allclose(matcore.svd([[0.0, 1.0], [1.0, 0.0]]).singular_values, [1, 1], atol=1e-14)


@pytest.mark.parametrize("shape", [(1, 1), (5, 3), (3, 5), (8, 8), (40, 7), (7, 40)])
def test_svd_factors_are_orthonormal(backend, shape):
    m = np.random.default_rng(sum(shape)).standard_normal(shape)
    res = matcore.svd(m)
    k = min(shape)
    assert res.u.shape == (shape[0], k) and res.vt.shape == (k, shape[1])
    assert np.allclose(res.u.T @ res.u, np.eye(k), atol=1e-10)
    assert np.allclose(res.vt @ res.vt.T, np.eye(k), atol=1e-10)
    assert np.all(np.diff(res.singular_values) <= 0)
    assert np.allclose(res.singular_values, np.linalg.svd(m, compute_uv=False), rtol=1e-10)


def test_svd_sign_convention(backend):
    res = matcore.svd(np.random.default_rng(3).standard_normal((6, 4)))
    for col in res.u.T:
        first = col[np.flatnonzero(np.abs(col) > 1e-14)[0]]
        assert first > 0


def test_svd_rank_deficient_completion(backend):
    b = np.random.default_rng(4).standard_normal((6, 2))
    m = b @ np.random.default_rng(5).standard_normal((2, 5))
    res = matcore.svd(m)
    assert np.allclose(res.u.T @ res.u, np.eye(5), atol=1e-10)
    assert np.all(res.singular_values[2:] < 1e-10)
    assert np.linalg.norm(res.reconstruct() - m) <= 1e-10 * np.linalg.norm(m)


@pytest.mark.parametrize("n", [16, 64, 128])
def test_svd_round_trip_large(backend, n):
    m = np.random.default_rng(n).standard_normal((n, n - 3))
    res = matcore.svd(m)
    assert np.linalg.norm(m - res.reconstruct()) / np.linalg.norm(m) <= 1e-9


@pytest.mark.parametrize("magnitude", [1e-300, 1.1e-104, 1e200])
def test_svd_extreme_scales(backend, magnitude):
    # squared column norms would underflow or overflow without rescaling
    m = magnitude * np.random.default_rng(9).standard_normal((5, 3))
    res = matcore.svd(m)
    assert np.all(np.isfinite(res.singular_values))
    assert np.abs(res.reconstruct() - m).max() <= 1e-12 * np.abs(m).max()


def test_svd_power_of_two_scaling_is_exact(backend):
    m = np.random.default_rng(10).standard_normal((6, 4))
    a, b = matcore.svd(m), matcore.svd(m * 2.0**-40)
    assert np.array_equal(a.singular_values * 2.0**-40, b.singular_values)
    assert np.array_equal(a.u, b.u)


def test_backends_agree():
    from contilora import _jacobi_py

    m = np.random.default_rng(11).standard_normal((9, 6))
    g1, j1 = np.ascontiguousarray(m.T), np.eye(6)
    g2, j2 = g1.copy(), j1.copy()
    matcore._jacobi_rotate(g1, j1, 1e-12, 200)
    _jacobi_py.jacobi_rotate(g2, j2, 1e-12, 200)
    s1 = np.sort(np.linalg.norm(g1, axis=1))
    s2 = np.sort(np.linalg.norm(g2, axis=1))
    assert np.allclose(s1, s2, rtol=1e-12)


def test_svd_sweep_cap_raises(backend, monkeypatch):
    monkeypatch.setattr(matcore, "MAX_SWEEPS", 1)
    with pytest.raises(ConvergenceError) as info:
        matcore.svd(np.random.default_rng(0).standard_normal((4, 4)))
    assert info.value.residual > 0


def test_truncated_factorize_examples():
    b, a = matcore.truncated_factorize(np.diag([3.0, 2.0, 1.0]), 2)
    assert np.allclose(b @ a, np.diag([3.0, 2.0, 0.0]), atol=1e-12)
    m = np.random.default_rng(1).standard_normal((5, 4))
    b, a = matcore.truncated_factorize(m, 4)
    assert np.linalg.norm(m - b @ a) <= 1e-9 * np.linalg.norm(m)
    m = np.random.default_rng(2).standard_normal((8, 6))
    s = np.linalg.svd(m, compute_uv=False)
    b, a = matcore.truncated_factorize(m, 2)
    assert np.linalg.norm(m - b @ a) ** 2 == pytest.approx(np.sum(s[2:] ** 2), rel=1e-9)
    with pytest.raises(DimensionError):
        matcore.truncated_factorize(m, 0)
    with pytest.raises(DimensionError):
        matcore.truncated_factorize(m, 7)


def test_energy_proportion_examples():
    assert matcore.energy_proportion([3, 2, 1], 2) == pytest.approx(13 / 14, abs=1e-15)
    assert matcore.energy_proportion([3, 2, 1], 3) == 1.0
    assert matcore.energy_proportion([5, 0, 0], 1) == 1.0
    with pytest.raises(UndefinedInputError):
        matcore.energy_proportion([0, 0], 1)
    with pytest.raises(UndefinedInputError):
        matcore.energy_proportion([1, 2], 1)


def test_binary_layout_is_fixed():
    m = np.array([[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]])
    buf = matcore.to_bytes(m)
    assert buf[:16] == (2).to_bytes(8, "little") + (3).to_bytes(8, "little")
    assert buf[16:24] == np.float64(1.0).tobytes()
    assert len(buf) == 16 + 6 * 8
    with pytest.raises(DimensionError):
        matcore.from_bytes(buf[:-1])


def test_file_round_trip(tmp_path):
    m = np.random.default_rng(0).standard_normal((3, 7))
    matcore.write_matrix(tmp_path / "m.bin", m)
    assert np.array_equal(matcore.read_matrix(tmp_path / "m.bin"), m)


finite = st.floats(-1e3, 1e3, allow_nan=False, width=64)


@st.composite
def matrices(draw, max_side=8):
    rows = draw(st.integers(1, max_side))
    cols = draw(st.integers(1, max_side))
    return draw(arrays(np.float64, (rows, cols), elements=finite))


@settings(max_examples=60, deadline=None)
@given(matrices())
def test_bytes_round_trip_property(m):
    assert np.array_equal(matcore.from_bytes(matcore.to_bytes(m)), m)


@settings(max_examples=60, deadline=None)
@given(matrices())
def test_svd_reconstructs_property(m):
    res = matcore.svd(m)
    scale = max(np.linalg.norm(m), 1e-300)
    assert np.linalg.norm(m - res.reconstruct()) <= 1e-9 * scale + 1e-12


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(2, 8), st.integers(2, 8), st.data())
def test_eckart_young_property(seed, rows, cols, data):
    r = data.draw(st.integers(1, min(rows, cols)))
    rng = np.random.default_rng(seed)
    m = rng.standard_normal((rows, cols))
    b, a = matcore.truncated_factorize(m, r)
    best = np.linalg.norm(m - b @ a)
    for _ in range(20):
        alt = rng.standard_normal((rows, r)) @ rng.standard_normal((r, cols))
        assert best <= np.linalg.norm(m - alt) + 1e-12
    s = np.linalg.svd(b @ a, compute_uv=False)
    assert np.all(s[r:] < 1e-9)
