from __future__ import annotations

import numpy as np
import pytest

from _util import TanhNet, get_params, numeric_grad, rel_err, set_params
from lsslnode.autodiff import Tensor, backward, tsum
from lsslnode.odesolve import (
    SolverConfig,
    SolverError,
    dopri5_step,
    integrate,
    integrate_batch,
    odeint,
)


def linear_rhs(lam):
    return lambda t, z: z * lam


@pytest.mark.parametrize("lam", [-1.0, 0.0, 1.0])
@pytest.mark.parametrize("horizon", [0.5, 1.0, 5.0])
def test_exponential_closed_form(lam, horizon):
    cfg = SolverConfig(rtol=1e-3, atol=1e-4)
    z0 = np.linspace(-1.0, 1.0, 8)
    z = integrate(linear_rhs(lam), Tensor(z0), 0.0, horizon, cfg).final.data
    truth = z0 * np.exp(lam * horizon)
    assert np.all(np.abs(z - truth) <= 10 * (cfg.atol + cfg.rtol * np.abs(truth)))


def test_time_dependent_rhs_and_offset_horizon():
    # dz/dt = t on [1, 3]: z(3) = z0 + (9 - 1) / 2
    z = odeint(lambda t, z: Tensor(np.broadcast_to(np.asarray(t).reshape(-1, 1), z.shape).copy()),
               Tensor(np.zeros((2, 3))), np.array([1.0, 1.0]), np.array([3.0, 2.0]),
               SolverConfig(rtol=1e-8, atol=1e-10))
    np.testing.assert_allclose(z.data[0], 4.0, rtol=1e-8)
    np.testing.assert_allclose(z.data[1], 1.5, rtol=1e-8)


def test_single_step_local_error_is_sixth_order():
    errs = []
    for h in (0.2, 0.1, 0.05):
        z5, _ = dopri5_step(linear_rhs(1.0), 0.0, Tensor(np.ones(1)), h)
        errs.append(abs(z5.data[0] - np.exp(h)))
    ratios = [errs[0] / errs[1], errs[1] / errs[2]]
    # local error of a 5th-order method scales like h^6 -> ratio about 64
    assert all(50 < r < 70 for r in ratios), ratios


def test_embedded_estimate_is_fifth_order():
    ests = [abs(dopri5_step(linear_rhs(1.0), 0.0, Tensor(np.ones(1)), h)[1].data[0]) for h in (0.2, 0.1)]
    assert 25 < ests[0] / ests[1] < 40


def test_tighter_tolerance_takes_more_steps_and_is_more_accurate():
    f = lambda t, z: z * np.cos(t) * -2.0  # noqa: E731
    truth = np.exp(-2.0 * np.sin(6.0))
    loose = integrate(f, Tensor(np.ones(1)), 0.0, 6.0, SolverConfig(rtol=1e-3, atol=1e-6))
    tight = integrate(f, Tensor(np.ones(1)), 0.0, 6.0, SolverConfig(rtol=1e-8, atol=1e-10))
    assert tight.n_accepted > loose.n_accepted
    assert abs(tight.final.data[0] - truth) < abs(loose.final.data[0] - truth)
    assert abs(tight.final.data[0] - truth) < 1e-7


def test_flow_composition():
    rng = np.random.default_rng(0)
    f = TanhNet(rng)
    cfg = SolverConfig(rtol=1e-9, atol=1e-11)
    z0 = Tensor(rng.normal(size=3))
    mid = integrate(f, z0, 0.0, 0.7, cfg).final
    two = integrate(f, mid, 0.7, 1.5, cfg).final
    one = integrate(f, z0, 0.0, 1.5, cfg).final
    np.testing.assert_allclose(two.data, one.data, rtol=1e-7, atol=1e-9)


def test_t_eval_returns_interior_states():
    sol = integrate(linear_rhs(-1.0), Tensor(np.ones(1)), 0.0, 2.0, SolverConfig(rtol=1e-8, atol=1e-10),
                    t_eval=[0.0, 0.5, 1.0, 2.0])
    np.testing.assert_allclose([s.data[0] for s in sol.states], np.exp(-np.array([0.0, 0.5, 1.0, 2.0])),
                               rtol=1e-7)


def test_large_first_step_is_rejected_then_recovers():
    sol = integrate(linear_rhs(-50.0), Tensor(np.ones(1)), 0.0, 1.0, SolverConfig(first_step=1.0))
    assert sol.n_rejected > 0
    assert abs(sol.final.data[0]) < 1e-3


def test_stats_account_for_every_evaluation():
    sol = integrate(linear_rhs(1.0), Tensor(np.ones(2)), 0.0, 1.0)
    assert sol.n_fevals == 2 + 6 * (sol.n_accepted + sol.n_rejected)
    assert len(sol.steps) == sol.n_accepted
    assert sum(h for _, h in sol.steps) == pytest.approx(1.0)


def test_errors():
    with pytest.raises(ValueError):
        integrate(linear_rhs(1.0), Tensor(np.ones(1)), 1.0, 0.0)
    with pytest.raises(SolverError, match="max_steps"):
        integrate(linear_rhs(-1.0), Tensor(np.ones(1)), 0.0, 100.0, SolverConfig(max_steps=3, first_step=1e-3))
    with pytest.raises(SolverError):
        integrate(lambda t, z: np.full(z.shape, np.nan), Tensor(np.ones(1)), 0.0, 1.0)
    with pytest.raises(ValueError):
        SolverConfig(rtol=0.0)
    with pytest.raises(ValueError):
        odeint(linear_rhs(1.0), Tensor(np.ones((2, 1))), np.zeros(2), np.array([1.0, -1.0]))


def test_zero_horizon_is_identity():
    z0 = Tensor(np.arange(6.0).reshape(2, 3))
    assert odeint(linear_rhs(1.0), z0, np.zeros(2), np.zeros(2)) is z0
    np.testing.assert_array_equal(integrate_batch(linear_rhs(1.0), z0, np.zeros(2), np.zeros(2)).data, z0.data)


def test_batched_horizons_match_independent_solves():
    rng = np.random.default_rng(1)
    f = TanhNet(rng)
    cfg = SolverConfig(rtol=1e-9, atol=1e-11)
    z0 = rng.normal(size=(4, 3))
    t0 = np.array([0.0, 0.5, 1.0, 0.0])
    t1 = np.array([1.0, 0.5, 3.0, 0.25])
    batch = odeint(f, Tensor(z0), t0, t1, cfg).data
    for i in range(4):
        single = integrate(f, Tensor(z0[i]), t0[i], t1[i], cfg).final.data if t1[i] > t0[i] else z0[i]
        np.testing.assert_allclose(batch[i], single, rtol=1e-7, atol=1e-9)


def _loss_and_grads(f, z0, t1, grad_mode, cfg):
    for p in f.parameters():
        p.grad = None
    z = Tensor(z0.copy(), requires_grad=True)
    out = odeint(f, z, np.zeros(z0.shape[0]), t1, cfg, grad_mode=grad_mode)
    w = np.linspace(-1.0, 1.0, out.data.size).reshape(out.shape)
    loss = tsum(out * Tensor(w))
    backward(loss)
    return loss.item(), z.grad, np.concatenate([p.grad.ravel() for p in f.parameters()])


@pytest.mark.parametrize("seed", range(3))
def test_adjoint_matches_direct_and_finite_differences(seed):
    rng = np.random.default_rng(seed)
    f = TanhNet(rng)
    cfg = SolverConfig(rtol=1e-8, atol=1e-10)
    z0 = rng.normal(size=(2, 3))
    t1 = rng.uniform(0.5, 1.5, size=2)
    _, gz_adj, gp_adj = _loss_and_grads(f, z0, t1, "adjoint", cfg)
    _, gz_dir, gp_dir = _loss_and_grads(f, z0, t1, "direct", cfg)
    assert rel_err(gz_adj, gz_dir) < 1e-3
    assert rel_err(gp_adj, gp_dir) < 1e-3
    theta = get_params(f)

    def loss_at(th, z):
        set_params(f, th)
        return _loss_and_grads(f, z, t1, "direct", cfg)[0]

    gp_fd, gz_fd = numeric_grad(loss_at, [theta.copy(), z0.copy()], eps=1e-5)
    set_params(f, theta)
    assert rel_err(gp_adj, gp_fd) < 1e-2
    assert rel_err(gz_adj, gz_fd) < 1e-2


def test_odeint_single_vector_state():
    z = Tensor(np.ones(3), requires_grad=True)
    out = odeint(linear_rhs(0.5), z, 0.0, 2.0, SolverConfig(rtol=1e-8, atol=1e-10))
    assert out.shape == (3,)
    backward(tsum(out))
    np.testing.assert_allclose(z.grad, np.full(3, np.e), rtol=1e-6)


def test_stats_dict_accumulates():
    stats: dict = {}
    for _ in range(2):
        odeint(linear_rhs(1.0), Tensor(np.ones((1, 2))), 0.0, 1.0, stats=stats)
    assert stats["accepted"] > 0 and stats["fevals"] > stats["accepted"]
    with pytest.raises(ValueError):
        odeint(linear_rhs(1.0), Tensor(np.ones((1, 2))), 0.0, 1.0, grad_mode="bogus")
