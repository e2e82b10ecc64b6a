import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from stgnn_lab.graph_core import build_gso, path_graph
from stgnn_lab.spacetime import TimeShiftOperator
from stgnn_lab.stgf import (
    FilterTaps, FrequencyPoint, apply_generalized_stgf, apply_stgf, estimate_c_l, filter_norm,
    frequency_response, lipschitz_gradient, load_taps, loads_taps, dumps_taps, mixed_gradient, response,
    save_taps, spectral_range,
)

CIRC = TimeShiftOperator(mode="circulant")
DELAY = TimeShiftOperator(mode="zero_pad_delay")


def dense_generalized(x, seq, c, h):
    # sum_k h_k S_k ... S_1 X C^k, feature by feature
    n, t, f = x.shape
    out = np.zeros_like(x)
    for g in range(f):
        prod = np.eye(n)
        for k, hk in enumerate(h):
            if k > 0:
                prod = seq[k - 1] @ prod
            out[:, :, g] += hk * prod @ x[:, :, g] @ np.linalg.matrix_power(c, k)
    return out


def random_instance(rng):
    n, t, k = rng.integers(1, 11), rng.integers(1, 9), rng.integers(0, 5)
    x = rng.standard_normal((n, t, rng.integers(1, 3)))
    h = rng.standard_normal(k + 1)
    seq = []
    for _ in range(k):
        m = rng.standard_normal((n, n)) / np.sqrt(n)
        seq.append(m + m.T)
    return x, seq, h


@pytest.mark.parametrize("tso", [CIRC, DELAY])
def test_filters_match_dense_oracle(tso):
    rng = np.random.default_rng(0)
    for _ in range(40):
        x, seq, h = random_instance(rng)
        c = tso.matrix(x.shape[1])
        np.testing.assert_allclose(apply_generalized_stgf(x, seq, tso, h), dense_generalized(x, seq, c, h),
                                   atol=1e-12)
        if seq:
            fixed = apply_stgf(x, seq[0], tso, h)
            np.testing.assert_allclose(fixed, dense_generalized(x, [seq[0]] * len(seq), c, h), atol=1e-12)


def test_identical_sequence_is_bitwise_fixed_filter():
    rng = np.random.default_rng(1)
    for _ in range(20):
        x, seq, h = random_instance(rng)
        s = seq[0] if seq else np.eye(x.shape[0])
        a = apply_stgf(x, s, CIRC, h)
        b = apply_generalized_stgf(x, [s] * (len(h) - 1), CIRC, h)
        assert np.array_equal(a, b)


def test_time_indexed_sequence_matches_loop_oracle():
    # z_k[t] = S_k(t) z_{k-1}[t-1] with zero initial condition
    rng = np.random.default_rng(2)
    n, t = 4, 6
    x = rng.standard_normal((n, t, 1))
    stacks = [rng.standard_normal((t, n, n)) for _ in range(2)]
    h = np.array([0.5, -1.0, 2.0])
    z_prev = x[:, :, 0]
    oracle = h[0] * z_prev
    for k, stack in enumerate(stacks, start=1):
        z = np.zeros((n, t))
        for tt in range(1, t):
            z[:, tt] = stack[tt] @ z_prev[:, tt - 1]
        oracle = oracle + h[k] * z
        z_prev = z
    np.testing.assert_allclose(apply_generalized_stgf(x, stacks, DELAY, h)[:, :, 0], oracle, atol=1e-12)


def test_filter_special_cases():
    rng = np.random.default_rng(3)
    x = rng.standard_normal((5, 4, 1))
    s = build_gso(path_graph(5), "laplacian")
    np.testing.assert_array_equal(apply_stgf(x, s, CIRC, [1.0]), x)
    np.testing.assert_array_equal(apply_stgf(x, s, CIRC, [0.0, 0.0, 0.0]), np.zeros_like(x))
    np.testing.assert_allclose(apply_stgf(x, np.eye(5), CIRC, [0.0, 1.0]), np.roll(x, 1, axis=1))


def test_filter_is_linear():
    rng = np.random.default_rng(4)
    x1, x2 = rng.standard_normal((2, 6, 5, 2))
    s = build_gso(path_graph(6), "adjacency")
    h = rng.standard_normal(4)
    lhs = apply_stgf(2.0 * x1 - 3.0 * x2, s, CIRC, h)
    rhs = 2.0 * apply_stgf(x1, s, CIRC, h) - 3.0 * apply_stgf(x2, s, CIRC, h)
    np.testing.assert_allclose(lhs, rhs, atol=1e-12)


def test_generalized_filter_checks_sequence_length():
    with pytest.raises(ValueError):
        apply_generalized_stgf(np.zeros((2, 3, 1)), [np.eye(2)], CIRC, [1.0, 1.0, 1.0])


def spectral_output(h, seq, v, omega, t):
    # input v e^{-j omega t}; the circulant delay multiplies it by e^{j omega}
    u = np.exp(-1j * omega * np.arange(t))
    x = np.outer(v, u)
    re = apply_generalized_stgf(x.real, seq, CIRC, h)[:, :, 0]
    im = apply_generalized_stgf(x.imag, seq, CIRC, h)[:, :, 0]
    return re + 1j * im, x


def test_eigenvector_exponential_inputs_scale_by_response():
    rng = np.random.default_rng(5)
    for _ in range(10):
        n, t, k = 6, 8, 3
        q, _ = np.linalg.qr(rng.standard_normal((n, n)))
        eigs = rng.standard_normal((k, n))
        seq = [(q * e) @ q.T for e in eigs]
        h = rng.standard_normal(k + 1)
        i, m = rng.integers(n), rng.integers(t)
        omega = 2 * np.pi * m / t
        y, x = spectral_output(h, seq, q[:, i], omega, t)
        expected = frequency_response(h, FrequencyPoint(eigs[:, i], omega))
        np.testing.assert_allclose(y, expected * x, atol=1e-10)


def test_response_examples():
    assert response([2.0], np.zeros((0,)), 0.3) == 2.0
    pt = FrequencyPoint([2.0, 3.0], np.pi)
    # 1 + 1 * e^{j pi} * 2 + 1 * e^{2 j pi} * 6
    assert frequency_response([1.0, 1.0, 1.0], pt) == pytest.approx(5.0 + 0j, abs=1e-12)


@settings(max_examples=60, deadline=None)
@given(k=st.integers(1, 5), seed=st.integers(0, 2**32 - 1))
def test_lipschitz_gradient_difference_identity(k, seed):
    rng = np.random.default_rng(seed)
    h = rng.standard_normal(k + 1)
    p1 = FrequencyPoint(rng.uniform(-3, 3, k))
    p2 = FrequencyPoint(rng.uniform(-3, 3, k))
    omega = rng.uniform(0, 2 * np.pi)
    lhs = response(h, p1.lambda_vec, omega) - response(h, p2.lambda_vec, omega)
    rhs = lipschitz_gradient(h, p1, p2, omega) @ (p1.lambda_vec - p2.lambda_vec)
    assert abs(lhs - rhs) <= 1e-10 * max(1.0, abs(lhs))


def test_mixed_gradient_matches_finite_differences_at_mixed_points():
    rng = np.random.default_rng(6)
    h = rng.standard_normal(4)
    lam1, lam2 = rng.standard_normal((2, 3))
    omega = 0.7
    grad = mixed_gradient(h, lam1, lam2, omega)
    eps = 1e-6
    for k in range(3):
        mixed = np.concatenate([lam1[: k + 1], lam2[k + 1:]])
        up, dn = mixed.copy(), mixed.copy()
        up[k] += eps
        dn[k] -= eps
        fd = (response(h, up, omega) - response(h, dn, omega)) / (2 * eps)
        assert abs(fd - grad[k]) < 1e-8


def test_c_l_examples():
    assert estimate_c_l([3.0], (-1, 1)).c_l == 0.0
    assert estimate_c_l([0.0, 0.0, 0.0], (-1, 1)).c_l == 0.0
    # h = [0, 1]: gradient is e^{j omega}, norm 1; |lambda_1 * e^{j omega}| <= 1 on [-1, 1]
    assert estimate_c_l([0.0, 1.0], (-1, 1)).c_l == pytest.approx(1.0, abs=1e-12)
    # on [0, 2] the Hadamard term reaches 2
    est = estimate_c_l([0.0, 1.0], (0, 2))
    assert est.gradient_max == pytest.approx(1.0)
    assert est.hadamard_max == pytest.approx(2.0)


def test_c_l_vertex_case_k2():
    # h = [0, 0, 1]: grad = (e^{2jw} lam2_2, e^{2jw} lam1_1); on [-1, 1] the max norm is sqrt(2)
    est = estimate_c_l([0.0, 0.0, 1.0], (-1, 1), lambda_samples=5, omega_samples=4, refine=False)
    assert est.gradient_max == pytest.approx(np.sqrt(2))


def test_c_l_refinement_is_monotone():
    h = [0.3, -0.7, 0.4, 0.1]
    coarse = estimate_c_l(h, (-2, 2), omega_samples=8, lambda_samples=4, refine=False)
    fine = estimate_c_l(h, (-2, 2), omega_samples=8, lambda_samples=4, refine=True, max_rounds=3)
    assert fine.c_l >= coarse.c_l
    assert fine.grid_spec["rounds"] >= 1


def test_c_l_rejects_empty_range():
    with pytest.raises(ValueError):
        estimate_c_l([1.0, 1.0], (1.0, -1.0))


def test_filter_norm():
    assert filter_norm([2.0], (-1, 1)) == 2.0
    # |1 + e^{jw} lambda| peaks at 2 for lambda = 1, omega = 0
    assert filter_norm([1.0, 1.0], (-1, 1)) == pytest.approx(2.0)


def test_spectral_range():
    lo, hi = spectral_range(build_gso(path_graph(3), "laplacian"), pad=0.5)
    assert lo == pytest.approx(-0.5) and hi == pytest.approx(3.5)


def test_taps_roundtrip(tmp_path):
    h = FilterTaps([0.1, 1 / 3, -2e-9])
    assert np.array_equal(loads_taps(dumps_taps(h)).coefficients, h.coefficients)
    save_taps(h, tmp_path / "h.txt")
    assert np.array_equal(load_taps(tmp_path / "h.txt").coefficients, h.coefficients)
    assert h.order == 2
    with pytest.raises(ValueError):
        loads_taps("2\n1.0\n2.0\n")
    with pytest.raises(ValueError):
        FilterTaps([np.inf])
