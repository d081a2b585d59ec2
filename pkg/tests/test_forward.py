import numpy as np
import pytest

from mfbsde.forward import propagate
from mfbsde.paths import PathEnsemble, TimeGrid, joint_marginal, make_bundle
from mfbsde.problem import MfProblem
from oracles import rk4


def make_problem(f, sigma, dim=1, x0=None, horizon=1.0, law_free=True):
    return MfProblem(
        dim_state=dim, dim_bm=1,
        x0=np.zeros(dim) if x0 is None else x0,
        horizon=horizon,
        f=f, sigma=sigma,
        h=lambda t, x, y, z, nu: np.zeros_like(x),
        g=lambda x, mu: x,
        law_free_sigma=law_free,
    )


def zero_state(particles, steps, dim=1):
    y = PathEnsemble(np.zeros((particles, steps + 1, dim)))
    z = PathEnsemble(np.zeros((particles, steps, dim)))
    flow = [joint_marginal(y, y, k) for k in range(steps + 1)]
    return y, z, flow


class TestPropagate:
    def test_no_dynamics_stays_at_x0(self):
        p = make_problem(
            lambda t, x, y, z, nu: np.zeros_like(x),
            lambda t, x, y, z, nu: np.zeros((x.shape[0], 1, 1)),
            x0=[1.3],
        )
        grid = TimeGrid(1.0, 20)
        bundle = make_bundle(grid, 16, 1, seed=0)
        y, z, flow = zero_state(16, 20)
        x = propagate(p, grid, bundle, y, z, y, z, flow, 0.0)
        assert np.allclose(x.values, 1.3)

    def test_constant_drift_integrates_exactly(self):
        p = make_problem(
            lambda t, x, y, z, nu: np.ones_like(x),
            lambda t, x, y, z, nu: np.zeros((x.shape[0], 1, 1)),
            x0=[0.0],
        )
        grid = TimeGrid(1.0, 13)
        bundle = make_bundle(grid, 8, 1, seed=0)
        y, z, flow = zero_state(8, 13)
        x = propagate(p, grid, bundle, y, z, y, z, flow, 0.0)
        assert np.allclose(x.values[:, -1, 0], 1.0, atol=1e-14)

    def test_linear_drift_converges_to_exponential(self):
        a = 0.8
        p = make_problem(
            lambda t, x, y, z, nu: a * x,
            lambda t, x, y, z, nu: np.zeros((x.shape[0], 1, 1)),
            x0=[1.0],
        )
        errs = []
        for steps in (50, 100, 200):
            grid = TimeGrid(1.0, steps)
            bundle = make_bundle(grid, 4, 1, seed=0)
            y, z, flow = zero_state(4, steps)
            x = propagate(p, grid, bundle, y, z, y, z, flow, 0.0)
            errs.append(abs(x.values[0, -1, 0] - np.exp(a)))
        assert errs[0] < 0.02
        # first-order convergence: halving dt roughly halves the error
        assert errs[0] / errs[1] == pytest.approx(2.0, rel=0.2)
        assert errs[1] / errs[2] == pytest.approx(2.0, rel=0.2)

    def test_zero_delta_matches_positive_delta_with_equal_prev(self):
        p = make_problem(
            lambda t, x, y, z, nu: -x + y,
            lambda t, x, y, z, nu: (0.5 * x)[:, :, None],
            x0=[1.0],
        )
        grid = TimeGrid(1.0, 30)
        bundle = make_bundle(grid, 32, 1, seed=1)
        rng = np.random.default_rng(2)
        y = PathEnsemble(rng.standard_normal((32, 31, 1)))
        z = PathEnsemble(rng.standard_normal((32, 30, 1)))
        _, _, flow = zero_state(32, 30)
        x0 = propagate(p, grid, bundle, y, z, y, z, flow, 0.0)
        x1 = propagate(p, grid, bundle, y, z, y, z, flow, 0.7)
        assert np.array_equal(x0.values, x1.values)

    def test_delta_term_active_when_prev_differs(self):
        p = make_problem(
            lambda t, x, y, z, nu: np.zeros_like(x),
            lambda t, x, y, z, nu: np.zeros((x.shape[0], 1, 1)),
            x0=[0.0],
        )
        grid = TimeGrid(1.0, 10)
        bundle = make_bundle(grid, 4, 1, seed=0)
        y = PathEnsemble(np.ones((4, 11, 1)))
        z = PathEnsemble(np.zeros((4, 10, 1)))
        y_prev = PathEnsemble(np.zeros((4, 11, 1)))
        _, _, flow = zero_state(4, 10)
        x = propagate(p, grid, bundle, y, z, y_prev, z, flow, 0.5)
        # drift is -delta (y - y_prev) = -0.5, so X_T = -0.5
        assert np.allclose(x.values[:, -1, 0], -0.5, atol=1e-14)

    def test_mean_field_drift_matches_ode_oracle(self):
        # f = a x + d E[x] + beta: ensemble mean follows m' = (a + d) m + beta
        a, d, beta = 0.4, -0.9, 0.3

        def f(t, x, y, z, nu):
            return a * x + d * nu.mean()[0] + beta

        p = make_problem(f, lambda t, x, y, z, nu: np.full((x.shape[0], 1, 1), 0.5), x0=[1.0])
        grid = TimeGrid(1.0, 200)
        particles = 20_000
        bundle = make_bundle(grid, particles, 1, seed=3)
        y = PathEnsemble(np.zeros((particles, 201, 1)))
        z = PathEnsemble(np.zeros((particles, 200, 1)))
        # self-consistent flow: iterate the plug-in mean twice
        flow = [joint_marginal(y, y, k) for k in range(201)]
        x = propagate(p, grid, bundle, y, z, y, z, flow, 0.0)
        for _ in range(3):
            flow = [joint_marginal(x, y, k) for k in range(201)]
            x = propagate(p, grid, bundle, y, z, y, z, flow, 0.0)
        oracle = rk4(lambda t, m: (a + d) * m + beta, np.array([1.0]), 0.0, 1.0, 4000)
        tol = 5 * (grid.dt + particles**-0.5)
        assert abs(x.values[:, -1, 0].mean() - oracle[0]) < tol

    def test_deterministic_repeat(self, toy_problem):
        grid = TimeGrid(0.25, 20)
        bundle = make_bundle(grid, 64, 1, seed=5)
        rng = np.random.default_rng(6)
        y = PathEnsemble(rng.standard_normal((64, 21, 1)))
        z = PathEnsemble(rng.standard_normal((64, 20, 1)))
        flow = [joint_marginal(y, y, k) for k in range(21)]
        a = propagate(toy_problem, grid, bundle, y, z, y, z, flow, 1e-3)
        b = propagate(toy_problem, grid, bundle, y, z, y, z, flow, 1e-3)
        assert np.array_equal(a.values, b.values)

    def test_shape_mismatch_rejected(self, toy_problem):
        grid = TimeGrid(0.25, 10)
        bundle = make_bundle(grid, 8, 1, seed=0)
        y, z, flow = zero_state(8, 10)
        y_bad = PathEnsemble(np.zeros((8, 9, 1)))
        with pytest.raises(ValueError, match="y_ens"):
            propagate(toy_problem, grid, bundle, y_bad, z, y, z, flow, 0.0)

    def test_blowup_aborts_with_step_index(self):
        p = make_problem(
            lambda t, x, y, z, nu: np.exp(x) * 1e6,
            lambda t, x, y, z, nu: np.zeros((x.shape[0], 1, 1)),
            x0=[10.0],
        )
        grid = TimeGrid(1.0, 50)
        bundle = make_bundle(grid, 4, 1, seed=0)
        y, z, flow = zero_state(4, 50)
        with np.errstate(over="ignore", invalid="ignore"):
            with pytest.raises(FloatingPointError, match="step"):
                propagate(p, grid, bundle, y, z, y, z, flow, 0.0)
