import math

import numpy as np
import pytest
import scipy.linalg
from hypothesis import given, settings, strategies as st

from ssvi.errors import UnsupportedKernelError
from ssvi.kernels import (Cosine, Matern12, Matern32, Matern52, Product, Sum, format_kernel, kernel_eval,
                          kernel_log_gradients, kernel_params, kernel_variance, parse_kernel, with_params)
from ssvi.statespace import (discretize, discretize_grid, stationary_covariance, step_sizes, to_state_space)


def ssm_cov(kernel, tau):
    return to_state_space(kernel).covariance(tau)


# closed-form Matérn covariances, written out independently of the library
def matern_ref(order, var, ell, tau):
    r = np.abs(tau) / ell
    if order == 0:
        return var * np.exp(-r)
    if order == 1:
        s = math.sqrt(3) * r
        return var * (1 + s) * np.exp(-s)
    s = math.sqrt(5) * r
    return var * (1 + s + s * s / 3) * np.exp(-s)


KERNELS = [
    Matern12(1.3, 0.7),
    Matern32(0.8, 2.0),
    Matern52(2.0, 1.5),
    Cosine(1.1, 2.3),
    Sum((Matern32(1.0, 1.0), Matern12(0.5, 3.0), Cosine(0.3, 1.0))),
    Product((Cosine(0.9, math.pi), Matern52(1.0, 2.0))),
]


@pytest.mark.parametrize("order,cls", [(0, Matern12), (1, Matern32), (2, Matern52)])
def test_matern_eval_matches_closed_form(order, cls):
    tau = np.linspace(-6, 6, 31)
    np.testing.assert_allclose(kernel_eval(cls(1.7, 1.3), tau), matern_ref(order, 1.7, 1.3, tau), rtol=1e-13)


def test_kernel_eval_examples():
    assert kernel_eval(Matern12(1, 1), 1.0) == pytest.approx(math.exp(-1), abs=1e-15)
    for k in KERNELS:
        assert kernel_eval(k, 0.0) == pytest.approx(kernel_variance(k), rel=1e-14)
        assert kernel_eval(k, 0.37) == pytest.approx(kernel_eval(k, -0.37), rel=1e-15)


@pytest.mark.parametrize("kernel", KERNELS, ids=lambda k: format_kernel(k)[:30])
def test_kernel_ssm_equivalence(kernel):
    ell = max([v for n, v in kernel_params(kernel) if "lengthscale" in n] or [1.0])
    tau = np.linspace(0, 5 * ell, 50)
    assert np.max(np.abs(ssm_cov(kernel, tau) - kernel_eval(kernel, tau))) <= 1e-8


def test_matern12_state_space_example():
    m = to_state_space(Matern12(1.0, 2.0))
    np.testing.assert_allclose(m.F, [[-0.5]])
    np.testing.assert_allclose(m.L, [[1.0]])
    np.testing.assert_allclose(m.Qc, [[1.0]])
    np.testing.assert_allclose(m.h, [1.0])
    np.testing.assert_allclose(m.Pinf, [[1.0]], rtol=1e-12)


def test_cosine_state_space_example():
    m = to_state_space(Cosine(1.0, math.pi))
    np.testing.assert_allclose(m.F, [[0, -math.pi], [math.pi, 0]])
    np.testing.assert_allclose(m.h, [1, 0])
    np.testing.assert_allclose(m.Pinf, np.eye(2))
    tau = np.linspace(0, 3, 13)
    np.testing.assert_allclose(m.covariance(tau), np.cos(math.pi * tau), atol=1e-13)


def test_sum_is_block_diagonal():
    m = to_state_space(Sum((Matern12(1, 1), Matern12(1, 1))))
    assert m.d == 2
    assert m.h @ m.Pinf @ m.h == pytest.approx(2.0)
    assert m.F[0, 1] == 0 and m.F[1, 0] == 0
    k = Sum((Matern52(1, 2), Matern32(0.5, 1)))
    assert to_state_space(k).d == 3 + 2
    tau = np.linspace(0, 4, 9)
    np.testing.assert_allclose(kernel_eval(k, tau), kernel_eval(Matern52(1, 2), tau) + kernel_eval(Matern32(0.5, 1), tau))


def test_product_cosine_matern_example():
    k = Product((Cosine(1.0, math.pi), Matern52(1.0, 2.0)))
    m = to_state_space(k)
    assert m.h @ m.Pinf @ m.h == pytest.approx(1.0, rel=1e-10)
    assert m.covariance(0.5) == pytest.approx(kernel_eval(k, 0.5), abs=1e-12)


@pytest.mark.parametrize("kernel", [
    Product((Matern12(1, 1), Matern32(1, 1))),
    Product((Sum((Cosine(1, 1), Matern12(1, 1))), Sum((Matern12(1, 1), Matern12(1, 2))))),
    Product((Cosine(1, 1), Cosine(1, 2))),
    Product((Cosine(1, 1), Matern12(1, 1), Matern12(1, 1))),
])
def test_unsupported_product_is_explicit(kernel):
    with pytest.raises(UnsupportedKernelError, match="unsupported kernel algebra"):
        to_state_space(kernel)


def test_invalid_kernel_parameters():
    with pytest.raises(ValueError):
        Matern12(-1.0, 1.0)
    with pytest.raises(ValueError):
        Matern32(1.0, 0.0)
    with pytest.raises(ValueError):
        Cosine(1.0, -2.0)
    with pytest.raises(ValueError):
        Sum((Matern12(1, 1),))


# --- stationary covariance -----------------------------------------------------


def test_lyapunov_examples():
    np.testing.assert_allclose(stationary_covariance(np.array([[-0.5]]), np.eye(1), np.eye(1)), [[1.0]])
    for s2 in (0.5, 1.0, 4.0):
        P = stationary_covariance(np.array([[-1.0]]), np.eye(1), np.array([[2 * s2]]))
        np.testing.assert_allclose(P, [[s2]], rtol=1e-12)


def test_lyapunov_zero_dispersion_passes_through():
    F = np.array([[0.0, -2.0], [2.0, 0.0]])
    P0 = 0.7 * np.eye(2)
    np.testing.assert_array_equal(stationary_covariance(F, np.eye(2), np.zeros((2, 2)), pinf=P0), P0)


@pytest.mark.parametrize("kernel", KERNELS[:3])
def test_lyapunov_residual(kernel):
    m = to_state_space(kernel)
    R = m.F @ m.Pinf + m.Pinf @ m.F.T + m.L @ m.Qc @ m.L.T
    assert np.linalg.norm(R) <= 1e-10 * np.linalg.norm(m.Pinf)
    np.testing.assert_array_equal(m.Pinf, m.Pinf.T)


# --- discretisation ------------------------------------------------------------


def test_discretize_matern12_closed_form():
    tr = discretize(to_state_space(Matern12(1.0, 1.0)), 1.0)
    assert tr.A[0, 0] == pytest.approx(math.exp(-1), abs=1e-14)
    assert tr.Q[0, 0] == pytest.approx(1 - math.exp(-2), abs=1e-14)
    assert tr.A[0, 0] == pytest.approx(0.36788, abs=5e-6)
    assert tr.Q[0, 0] == pytest.approx(0.86466, abs=5e-6)


@pytest.mark.parametrize("kernel", KERNELS, ids=lambda k: format_kernel(k)[:30])
def test_discretize_zero_step(kernel):
    m = to_state_space(kernel)
    tr = discretize(m, 0.0)
    np.testing.assert_array_equal(tr.A, np.eye(m.d))
    np.testing.assert_array_equal(tr.Q, np.zeros((m.d, m.d)))


def test_discretize_cosine_quarter_turn():
    tr = discretize(to_state_space(Cosine(1.0, math.pi)), 0.5)
    np.testing.assert_allclose(tr.A, [[0, -1], [1, 0]], atol=1e-12)


def test_discretize_negative_step_rejected():
    with pytest.raises(ValueError):
        discretize(to_state_space(Matern12(1, 1)), -0.1)


def _taylor_expm(M, terms=60):
    # independent oracle: scaled Taylor series then repeated squaring
    s = max(0, int(np.ceil(np.log2(max(np.linalg.norm(M, 1), 1e-300)))) + 1)
    X = M / 2 ** s
    out, term = np.eye(len(M)), np.eye(len(M))
    for k in range(1, terms):
        term = term @ X / k
        out = out + term
    for _ in range(s):
        out = out @ out
    return out


@pytest.mark.parametrize("kernel", KERNELS, ids=lambda k: format_kernel(k)[:30])
def test_transition_matches_series_oracle(kernel):
    m = to_state_space(kernel)
    for dt in (0.01, 0.3, 2.0):
        A = discretize(m, dt).A
        np.testing.assert_allclose(A, _taylor_expm(m.F * dt), atol=1e-10 * max(1, np.abs(A).max()))


@settings(max_examples=40, deadline=None)
@given(st.sampled_from(range(len(KERNELS))), st.floats(0.0, 3.0), st.floats(0.0, 3.0))
def test_semigroup(idx, a, b):
    m = to_state_space(KERNELS[idx])
    A = discretize(m, a).A @ discretize(m, b).A
    np.testing.assert_allclose(A, discretize(m, a + b).A, atol=1e-10)


@settings(max_examples=40, deadline=None)
@given(st.sampled_from(range(len(KERNELS))), st.floats(0.0, 1e3))
def test_process_noise_psd(idx, dt):
    tr = discretize(to_state_space(KERNELS[idx]), dt)
    np.testing.assert_array_equal(tr.Q, tr.Q.T)
    assert np.linalg.eigvalsh(tr.Q).min() >= -1e-12


@pytest.mark.parametrize("kernel", KERNELS[:3])
def test_process_noise_tends_to_pinf(kernel):
    m = to_state_space(kernel)
    np.testing.assert_allclose(discretize(m, 500.0).Q, m.Pinf, atol=1e-10)


def test_grid_groups_equal_steps():
    m = to_state_space(Matern32(1, 1))
    t = np.array([0.0, 1.0, 2.0, 3.0, 3.5, 4.0])
    tr = discretize_grid(m, t)
    assert len(tr) == 6
    assert len(tr.A) == 3  # dt in {0, 1, 0.5}
    for i, dt in enumerate(step_sizes(t)):
        np.testing.assert_allclose(tr.step(i).A, scipy.linalg.expm(m.F * dt), atol=1e-13)


def test_step_sizes_rejects_unsorted():
    with pytest.raises(ValueError):
        step_sizes(np.array([0.0, 2.0, 1.0]))
    with pytest.raises(ValueError):
        step_sizes(np.array([0.0, 1.0, 1.0]))


# --- grammar and parameters -------------------------------------------------------


def test_parse_example_expression():
    k = parse_kernel("sum(matern52(var=1.0,len=10.0), prod(cosine(period=7.0), matern52(var=1.0,len=30.0)))")
    assert isinstance(k, Sum)
    cos = k.children[1].children[0]
    assert cos.frequency == pytest.approx(2 * math.pi / 7.0)
    assert to_state_space(k).d == 3 + 2 * 3


@pytest.mark.parametrize("text", ["matern72(var=1,len=1)", "sum(matern12(var=1,len=1))",
                                  "matern12(var=1,len=1,foo=2)", "cosine(freq=1, period=2)", "1 + 2", ""])
def test_parse_rejects_bad_expressions(text):
    with pytest.raises(ValueError):
        parse_kernel(text)


@pytest.mark.parametrize("kernel", KERNELS, ids=lambda k: format_kernel(k)[:30])
def test_format_parse_round_trip(kernel):
    assert parse_kernel(format_kernel(kernel)) == kernel


@pytest.mark.parametrize("kernel", KERNELS, ids=lambda k: format_kernel(k)[:30])
def test_log_gradients_match_finite_differences(kernel):
    tau = np.linspace(0, 4, 7)
    names, x = zip(*kernel_params(kernel))
    theta = np.log(np.array(x))
    grads = kernel_log_gradients(kernel, tau)
    for j in range(len(theta)):
        h = 1e-6
        up, dn = theta.copy(), theta.copy()
        up[j] += h
        dn[j] -= h
        fd = (kernel_eval(with_params(kernel, np.exp(up)), tau) - kernel_eval(with_params(kernel, np.exp(dn)), tau)) / (2 * h)
        np.testing.assert_allclose(grads[j], fd, atol=1e-7, err_msg=names[j])
