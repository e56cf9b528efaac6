import math

import numpy as np
import pytest

from sdvae import autodiff as ad
from sdvae.autodiff import Tensor
from sdvae.distributions import GaussianPosterior, gaussian_kl_standard
from sdvae.flow import (
    FlowStep,
    affine_step,
    autoregressive_mask,
    flow_init,
    flow_kl_u,
    flow_step,
    run_flow,
)


def gaussian(mu, sigma):
    return GaussianPosterior(Tensor(np.atleast_2d(mu)), Tensor(np.atleast_2d(sigma)))


def random_step(dim, rng, scale=0.8):
    return FlowStep(
        Tensor(rng.normal(0, scale, size=(dim, dim))),
        Tensor(rng.normal(0, scale, size=dim)),
        Tensor(rng.normal(0, scale, size=(dim, dim))),
        Tensor(rng.normal(0, scale, size=dim)),
    )


def identity_chain(g, eps, length):
    s = flow_init(g, eps, length)
    ones, zeros = Tensor(np.ones(s.u.shape)), Tensor(np.zeros(s.u.shape))
    for _ in range(length):
        s = affine_step(s, ones, zeros)
    return s


def chain(u0, steps):
    """u_T as a plain function of u_0 (one row)."""
    with ad.no_grad():
        s = flow_init(gaussian(np.zeros_like(u0), np.ones_like(u0)), u0[None, :], len(steps))
        for st in steps:
            s = flow_step(s, st)
    return s.u.data[0], -s.log_q_correction.data[0]


def numeric_jacobian(fn, u0, h=1e-6):
    jac = np.zeros((fn(u0).size, u0.size))
    for j in range(u0.size):
        up, dn = u0.copy(), u0.copy()
        up[j] += h
        dn[j] -= h
        jac[:, j] = (fn(up) - fn(dn)) / (2 * h)
    return jac


def test_init_is_reparameterization():
    e = np.array([[0.3, -1.2]])
    s = flow_init(gaussian([0.0, 0.0], [1.0, 1.0]), e, 2)
    np.testing.assert_array_equal(s.u.data, e)
    assert s.log_q_correction.data[0] == 0.0 and s.t == 0


def test_base_density_at_mode():
    s = flow_init(gaussian([0.7], [1.0]), np.zeros((1, 1)), 0)
    assert s.log_q_base.data[0] == pytest.approx(-0.918939, abs=1e-6)


def test_hand_step():
    s = flow_init(gaussian([1.0, 2.0], [1.0, 1.0]), np.zeros((1, 2)), 1)
    s = affine_step(s, Tensor([[0.5, 0.5]]), Tensor([[1.0, -1.0]]))
    np.testing.assert_array_equal(s.u.data, [[1.5, 0.0]])
    assert s.log_q_correction.data[0] == pytest.approx(-2 * math.log(0.5))


def test_identity_step_changes_nothing():
    rng = np.random.default_rng(0)
    g = gaussian(rng.normal(size=(4, 3)), rng.uniform(0.5, 2, size=(4, 3)))
    eps = rng.normal(size=(4, 3))
    base = flow_kl_u(run_flow(g, eps, []))
    for t in (1, 3):
        s = identity_chain(g, eps, t)
        np.testing.assert_array_equal(s.u.data, run_flow(g, eps, []).u.data)
        np.testing.assert_array_equal(s.log_q_correction.data, 0.0)
        np.testing.assert_array_equal(flow_kl_u(s).data, base.data)


def test_standard_posterior_identity_flow_estimate_is_zero():
    eps = np.random.default_rng(1).normal(size=(5, 2))
    s = identity_chain(gaussian(np.zeros((5, 2)), np.ones((5, 2))), eps, 1)
    assert np.all(flow_kl_u(s).data == 0.0)


def test_step_past_length_is_usage_error():
    s = flow_init(gaussian([0.0], [1.0]), np.zeros((1, 1)), 0)
    with pytest.raises(ad.UsageError):
        affine_step(s, Tensor([[0.5]]), Tensor([[0.0]]))


def test_incomplete_chain_is_usage_error():
    s = flow_init(gaussian([0.0], [1.0]), np.zeros((1, 1)), 2)
    with pytest.raises(ad.UsageError):
        flow_kl_u(s)


def test_delta_starts_near_gate_bias():
    step = FlowStep.init(4, np.random.default_rng(0))
    delta, _, _ = step(Tensor.constant(np.zeros((1, 4))))
    np.testing.assert_allclose(delta.data, 1 / (1 + math.exp(-1.0)))


def test_mask_is_strictly_triangular():
    m = autoregressive_mask(4)
    assert np.all(np.diag(m) == 0) and np.all(np.tril(m) == 0) and np.all(np.triu(m, 1)[np.triu_indices(4, 1)] == 1)


def test_autoregressive_probe_finds_exact_zeros():
    rng = np.random.default_rng(2)
    for dim in (1, 2, 3, 4):
        step = random_step(dim, rng)
        u0 = rng.normal(size=dim)

        def outputs(u):
            with ad.no_grad():
                d, _, p = step(Tensor.constant(u[None, :]))
            return np.concatenate([d.data[0], p.data[0]])

        jac = numeric_jacobian(outputs, u0)
        for i in range(dim):
            for j in range(i, dim):
                assert jac[i, j] == 0.0 and jac[dim + i, j] == 0.0
        # and the allowed positions really are used
        if dim > 1:
            assert np.any(jac[1:dim, 0] != 0)


def test_log_det_matches_numeric_jacobian():
    rng = np.random.default_rng(3)
    for _ in range(20):
        dim, length = int(rng.integers(1, 5)), int(rng.integers(1, 4))
        steps = [random_step(dim, rng) for _ in range(length)]
        u0 = rng.normal(size=dim)
        _, log_det = chain(u0, steps)
        jac = numeric_jacobian(lambda u: chain(u, steps)[0], u0)
        sign, numeric = np.linalg.slogdet(jac)
        assert sign > 0
        assert abs(log_det - numeric) / max(1.0, abs(numeric)) < 1e-4


def test_empty_chain_matches_closed_form_in_expectation():
    rng = np.random.default_rng(4)
    mu, sigma = rng.normal(size=(1, 3)), rng.uniform(0.4, 1.8, size=(1, 3))
    exact = gaussian_kl_standard(gaussian(mu, sigma)).data[0]
    n = 100_000
    g = gaussian(np.repeat(mu, n, 0), np.repeat(sigma, n, 0))
    with ad.no_grad():
        est = flow_kl_u(run_flow(g, rng.standard_normal((n, 3)), [])).data
    assert abs(est.mean() - exact) < 3 * est.std(ddof=1) / math.sqrt(n)


def test_flow_kl_is_nonnegative_in_expectation():
    rng = np.random.default_rng(5)
    n = 50_000
    steps = [random_step(3, rng, 0.5) for _ in range(2)]
    g = gaussian(np.repeat(rng.normal(size=(1, 3)), n, 0), np.repeat(rng.uniform(0.5, 1.5, (1, 3)), n, 0))
    with ad.no_grad():
        est = flow_kl_u(run_flow(g, rng.standard_normal((n, 3)), steps)).data
    assert est.mean() > -3 * est.std(ddof=1) / math.sqrt(n)


def test_flow_gradients():
    rng = np.random.default_rng(6)
    step = random_step(3, rng, 0.5)
    eps = rng.normal(size=(4, 3))
    mu, log_var = Tensor(rng.normal(size=(4, 3))), Tensor(rng.normal(size=(4, 3)))

    def f(mu, log_var, *params):
        g = GaussianPosterior.from_log_var(mu, log_var)
        return ad.sum(flow_kl_u(run_flow(g, eps, [FlowStep(*params)])))

    points = [mu, log_var, step.w_delta, step.b_delta, step.w_pi, step.b_pi]
    assert ad.finite_difference_check(f, points) < 1e-5
