import math

import numpy as np
import pytest

from mfbsde.measure import EmpiricalMeasure
from mfbsde.problem import (
    H1,
    H1PRIME,
    LipschitzProfile,
    MfProblem,
    MonotonicityProfile,
    PiecewiseConstant,
    as_path,
    check_H1,
    check_smallness,
    contraction_constants,
    eval_A,
    problem_from_config,
    sup_spectral_norm,
)


def gaussian_cloud(rng, n, d):
    return EmpiricalMeasure(rng.standard_normal((n, d)))


def affine_problem_from_blocks(s11, s12, s21, s22, sigma_const=0.4):
    """Problem with f = -(S21 x + S22 y), h = -(S11 x + S12 y), constant
    sigma, so that A(t,u,u',nu) = -(dx, dy)' S (dx, dy)."""
    m = np.atleast_2d(np.asarray(s11, dtype=float)).shape[0]

    def f(t, x, y, z, nu):
        return -(x @ np.atleast_2d(s21).T + y @ np.atleast_2d(s22).T)

    def h(t, x, y, z, nu):
        return -(x @ np.atleast_2d(s11).T + y @ np.atleast_2d(s12).T)

    return MfProblem(
        dim_state=m,
        dim_bm=1,
        x0=np.zeros(m),
        horizon=1.0,
        f=f,
        sigma=lambda t, x, y, z, nu: np.full((x.shape[0], m, 1), sigma_const),
        h=h,
        g=lambda x, mu: x,
        law_free_sigma=True,
    )


class TestEvalA:
    def test_identical_arguments_vanish(self, toy_problem):
        rng = np.random.default_rng(0)
        u = (rng.standard_normal(1), rng.standard_normal(1), rng.standard_normal((1, 1)))
        nu = gaussian_cloud(rng, 16, 2)
        assert eval_A(toy_problem, 0.1, u, u, nu) == pytest.approx(0.0, abs=1e-14)

    def test_lq_reduced_value(self):
        # aggregated structure with sum K_i M_i = I and A = sigma = D = 0:
        # A(t, u, u', nu) = -|dy|^2 - |dx|^2 = -4 - 1 = -5
        from mfbsde.lqgame import GameSpec, build_aggregated

        gs = GameSpec(n=2, horizon=1.0, x0=[0.0, 0.0], A=np.zeros((2, 2)),
                      C=[np.eye(2)], N=[np.eye(2)], Q=[np.eye(2)], M=[np.eye(2)])
        agg = build_aggregated(gs)
        nu = EmpiricalMeasure(np.zeros((4, 4)))
        val = eval_A(
            agg, 0.3,
            (np.array([1.0, 0.0]), np.array([2.0, 0.0]), np.zeros((2, 1))),
            (np.zeros(2), np.zeros(2), np.zeros((2, 1))),
            nu,
        )
        assert val == pytest.approx(-5.0, abs=1e-12)

    def test_linear_in_y_drift_only(self):
        p = MfProblem(
            dim_state=1, dim_bm=1, x0=[0.0], horizon=1.0,
            f=lambda t, x, y, z, nu: -y,
            sigma=lambda t, x, y, z, nu: np.full((x.shape[0], 1, 1), 0.7),
            h=lambda t, x, y, z, nu: np.zeros_like(x),
            g=lambda x, mu: x, law_free_sigma=True,
        )
        rng = np.random.default_rng(1)
        nu = gaussian_cloud(rng, 8, 2)
        for _ in range(20):
            u = (rng.standard_normal(1), rng.standard_normal(1), rng.standard_normal((1, 1)))
            v = (rng.standard_normal(1), rng.standard_normal(1), rng.standard_normal((1, 1)))
            dy = u[1] - v[1]
            assert eval_A(p, 0.5, u, v, nu) == pytest.approx(-float(dy @ dy), abs=1e-12)

    def test_matches_symbolic_bilinear_form_on_random_affine(self):
        rng = np.random.default_rng(2)
        for _ in range(10):
            m = int(rng.integers(1, 3))
            s = rng.standard_normal((2 * m, 2 * m))
            p = affine_problem_from_blocks(
                s[:m, :m], s[:m, m:], s[m:, :m], s[m:, m:]
            )
            nu = gaussian_cloud(rng, 8, 2 * m)
            u = (rng.standard_normal(m), rng.standard_normal(m), rng.standard_normal((m, 1)))
            v = (rng.standard_normal(m), rng.standard_normal(m), rng.standard_normal((m, 1)))
            w = np.concatenate([u[0] - v[0], u[1] - v[1]])
            expected = -float(w @ s @ w)
            assert eval_A(p, 0.3, u, v, nu) == pytest.approx(expected, abs=1e-10)


class TestCheckH1:
    def test_lq_reduced_estimates_k(self):
        from mfbsde.lqgame import GameSpec, build_aggregated

        gs = GameSpec(n=1, horizon=1.0, x0=[0.0], A=np.zeros((1, 1)),
                      C=[[[1.0]]], N=[[[1.0]]], Q=[[[1.0]]], M=[[[0.5]]])
        rep = check_H1(build_aggregated(gs), samples=3000, rng_seed=1)
        assert rep.passed
        assert rep.k_estimate >= min(1.0, 0.5) - 1e-9
        assert rep.k_estimate == pytest.approx(0.5, abs=0.02)

    def test_identity_terminal_estimates_k_prime(self, martingale_problem):
        rep = check_H1(martingale_problem, samples=500, rng_seed=0)
        assert rep.k_prime_estimate == pytest.approx(1.0, abs=1e-9)

    def test_counterexample_terminal_monotonicity_fails(self):
        from mfbsde.lqgame import build_aggregated, example3_game

        agg = build_aggregated(example3_game(1.0), force=True)
        rep = check_H1(agg, samples=3000, rng_seed=1)
        assert not rep.terminal_ok
        assert rep.k_prime_estimate < 0  # eigenvalues {-1, 3}
        assert not rep.passed

    def test_probe_estimates_match_eigen_bounds(self):
        # spectral oracle: smallest eigenvalue of the symmetrized block form
        rng = np.random.default_rng(3)
        raw = rng.standard_normal((2, 2))
        s = (raw + raw.T) / 2 + 1.5 * np.eye(2)
        p = affine_problem_from_blocks(s[:1, :1], s[:1, 1:], s[1:, :1], s[1:, 1:])
        p.monotonicity = MonotonicityProfile(k=1e-6, k_prime=1e-6, variant=H1PRIME)
        rep = check_H1(p, samples=10_000, rng_seed=4)
        lam_min = float(np.linalg.eigvalsh(s)[0])
        assert rep.k_estimate == pytest.approx(lam_min, rel=0.05)

    def test_report_serializes(self, toy_problem):
        d = check_H1(toy_problem, samples=200, rng_seed=0).to_dict()
        assert d["pass"] is True
        assert set(d) >= {"variant", "declared", "estimates", "margins", "note"}

    def test_invalid_samples(self, toy_problem):
        with pytest.raises(ValueError):
            check_H1(toy_problem, samples=0)


class TestCheckSmallness:
    def test_zero_coupling_passes(self):
        rep = check_smallness(
            LipschitzProfile(2.0, 0.0, 1.0, 0.0), MonotonicityProfile(0.3, 0.7, H1)
        )
        assert rep.passed

    def test_relaxed_variant_bound(self):
        rep = check_smallness(
            LipschitzProfile(1.0, 0.1, 1.0, 0.1), MonotonicityProfile(1.0, 1.0, H1PRIME)
        )
        assert rep.bound == pytest.approx(min(2 * (math.sqrt(2) - 1), math.sqrt(2) / 2))
        assert rep.bound == pytest.approx(0.70710678, abs=1e-7)
        assert rep.passed and rep.regime == "relaxed"

    def test_strong_variant_fail(self):
        rep = check_smallness(
            LipschitzProfile(1.0, 0.6, 1.0, 0.0), MonotonicityProfile(1.0, 1.0, H1)
        )
        assert rep.bound == pytest.approx(min(math.sqrt(3) - 1, math.sqrt(3) / 3))
        assert rep.bound == pytest.approx(0.57735027, abs=1e-7)
        assert not rep.passed and rep.regime == "strong"

    def test_report_json_shape(self):
        d = check_smallness(
            LipschitzProfile(1.0, 0.1, 1.0, 0.1), MonotonicityProfile(1.0, 1.0, H1PRIME)
        ).to_dict()
        assert set(d) == {"variant", "regime", "bound", "constants", "margins", "pass"}


class TestContractionConstants:
    def test_relaxed_variant_reference_values(self):
        lam, theta = contraction_constants(
            LipschitzProfile(1.0, 0.1, 1.0, 0.1),
            MonotonicityProfile(1.0, 1.0, H1PRIME),
            eps=1.0, alpha=math.sqrt(2) / 2, delta=0.01,
        )
        assert lam == pytest.approx(0.93428932, abs=1e-6)
        assert theta == pytest.approx(0.07571068, abs=1e-6)
        assert theta / lam == pytest.approx(0.081, abs=5e-4)

    def test_zero_coupling_limit(self):
        prof = LipschitzProfile(1.0, 0.0, 1.0, 0.0)
        mono = MonotonicityProfile(2.0, 0.8, H1PRIME)
        for delta in (0.1, 1e-3, 1e-6):
            lam, theta = contraction_constants(prof, mono, delta=delta)
            assert theta == pytest.approx(delta / 2)
            assert lam == pytest.approx(min(0.8, delta / 2 + 2.0))
        assert theta / lam < 1e-6

    def test_strong_variant_canonical_parameters_minimize(self):
        # eps = 1 minimizes eps/2 + 1/(2 eps); alpha = sqrt(3)/3 minimizes
        # 1/(2 alpha) + 3 alpha / 2; the canonical choice maximizes lam - theta
        prof = LipschitzProfile(1.0, 0.3, 1.0, 0.3)
        mono = MonotonicityProfile(1.0, 1.0, H1)
        delta = 1e-4

        def margin(eps, alpha):
            lam, theta = contraction_constants(prof, mono, eps=eps, alpha=alpha, rho=1.0, delta=delta)
            return lam - theta

        best = margin(1.0, math.sqrt(3) / 3)
        for eps in (0.5, 0.8, 1.3, 2.0):
            for alpha in (0.3, 0.5, 0.8, 1.0):
                assert margin(eps, alpha) <= best + 1e-12

    def test_invalid_parameters(self):
        prof = LipschitzProfile(1.0, 0.1, 1.0, 0.1)
        mono = MonotonicityProfile(1.0, 1.0, H1PRIME)
        for kwargs in ({"eps": 0.0}, {"alpha": -1.0}, {"rho": 0.0}, {"delta": 0.0}):
            with pytest.raises(ValueError):
                contraction_constants(prof, mono, **kwargs)

    def test_smallness_pass_implies_contraction_params_exist(self):
        rng = np.random.default_rng(5)
        found_pass = 0
        for _ in range(40):
            k, kp = rng.uniform(0.2, 2.0, size=2)
            c_nu, c_g = rng.uniform(0.0, 1.0, size=2)
            variant = H1 if rng.random() < 0.5 else H1PRIME
            prof = LipschitzProfile(1.0, c_nu, 1.0, c_g)
            mono = MonotonicityProfile(k, kp, variant)
            if not check_smallness(prof, mono).passed:
                continue
            found_pass += 1
            ok = False
            for eps in np.linspace(0.2, 3.0, 12):
                for alpha in np.linspace(0.2, 2.0, 12):
                    for delta in (1e-6, 1e-4, 1e-2):
                        lam, theta = contraction_constants(prof, mono, eps=eps, alpha=alpha, rho=1.0, delta=delta)
                        if lam > 0 and theta < lam:
                            ok = True
                            break
                    if ok:
                        break
                if ok:
                    break
            assert ok, f"no contraction parameters found for {prof}, {mono}"
        assert found_pass >= 5


class TestProfiles:
    def test_lipschitz_rejects_negative(self):
        with pytest.raises(ValueError):
            LipschitzProfile(-0.1, 0.0, 0.0, 0.0)

    def test_monotonicity_validation(self):
        with pytest.raises(ValueError):
            MonotonicityProfile(0.0, 1.0)
        with pytest.raises(ValueError):
            MonotonicityProfile(1.0, 1.0, variant="H2")


class TestSpotCheck:
    def test_law_free_flag_violation_detected(self):
        p = MfProblem(
            dim_state=1, dim_bm=1, x0=[0.0], horizon=1.0,
            f=lambda t, x, y, z, nu: np.zeros_like(x),
            sigma=lambda t, x, y, z, nu: np.full((x.shape[0], 1, 1), 1.0 if nu is None else float(nu.mean()[0])),
            h=lambda t, x, y, z, nu: np.zeros_like(x),
            g=lambda x, mu: x, law_free_sigma=True,
        )
        with pytest.raises(ValueError, match="law_free"):
            p.spot_check()

    def test_shape_violation_detected(self):
        p = MfProblem(
            dim_state=2, dim_bm=1, x0=[0.0, 0.0], horizon=1.0,
            f=lambda t, x, y, z, nu: x[:, :1],  # wrong width
            sigma=lambda t, x, y, z, nu: np.zeros((x.shape[0], 2, 1)),
            h=lambda t, x, y, z, nu: np.zeros_like(x),
            g=lambda x, mu: x, law_free_sigma=True,
        )
        with pytest.raises(ValueError, match="shape"):
            p.spot_check()


class TestPiecewisePaths:
    def test_piecewise_lookup_and_clamp(self):
        p = PiecewiseConstant([0.0, 1.0], [np.eye(1), 2 * np.eye(1)])
        assert p(-0.5) == pytest.approx(1.0)
        assert p(0.5) == pytest.approx(1.0)
        assert p(1.0) == pytest.approx(2.0)
        assert p(7.0) == pytest.approx(2.0)

    def test_as_path_forms(self):
        assert np.allclose(as_path(3.0)(0.1), 3.0)
        assert np.allclose(as_path({"const": [[1.0, 0.0], [0.0, 1.0]]})(0.5), np.eye(2))
        pw = as_path({"piecewise": [{"t_from": 0.0, "value": 1.0}, {"t_from": 0.5, "value": 2.0}]})
        assert pw(0.25) == pytest.approx(1.0) and pw(0.75) == pytest.approx(2.0)
        fn = as_path(lambda t: np.array([[t]]))
        assert fn(0.3) == pytest.approx(0.3)

    def test_as_path_rejects_bad_dict(self):
        with pytest.raises(ValueError):
            as_path({"weird": 1})

    def test_sup_spectral_norm(self):
        pw = PiecewiseConstant([0.0, 0.5], [np.diag([1.0, 2.0]), np.diag([3.0, 0.5])])
        assert sup_spectral_norm(pw, 1.0) == pytest.approx(3.0)
        assert sup_spectral_norm(lambda t: np.array([[t]]), 2.0) == pytest.approx(2.0)


class TestProblemFromConfig:
    def config(self):
        return {
            "kind": "problem",
            "dim": 1, "horizon": 0.25, "x0": [1.0],
            "f": {"y": -1.0, "mean_x": 0.1},
            "h": {"x": -1.0, "z": -0.3, "mean_y": 0.1},
            "sigma": {"x": 0.3, "const": 0.2},
            "g": {"x": 1.0, "mean_x": 0.1},
            "lipschitz": {"c_u": 1.0, "c_nu": 0.1, "c_g_x": 1.0, "c_g_nu": 0.1},
            "monotonicity": {"k": 1.0, "k_prime": 1.0, "variant": "H1prime"},
        }

    def test_matches_hand_built_toy(self, toy_problem):
        p = problem_from_config(self.config())
        rng = np.random.default_rng(0)
        x, y = rng.standard_normal((2, 5, 1))
        z = rng.standard_normal((5, 1, 1))
        nu = gaussian_cloud(rng, 8, 2)
        mu = gaussian_cloud(rng, 8, 1)
        assert np.allclose(p.f(0.1, x, y, z, nu), toy_problem.f(0.1, x, y, z, nu))
        assert np.allclose(p.h(0.1, x, y, z, nu), toy_problem.h(0.1, x, y, z, nu))
        assert np.allclose(p.sigma(0.1, x, y, z, None), toy_problem.sigma(0.1, x, y, z, None))
        assert np.allclose(p.g(x, mu), toy_problem.g(x, mu))
        assert p.law_free_sigma
        assert p.monotonicity.variant == H1PRIME

    def test_probes_pass_on_config_problem(self):
        p = problem_from_config(self.config())
        p.spot_check()
        assert check_H1(p, samples=400, rng_seed=0).passed
        assert check_smallness(p.lipschitz, p.monotonicity).passed

    def test_missing_field_rejected(self):
        cfg = self.config()
        del cfg["horizon"]
        with pytest.raises(ValueError, match="horizon"):
            problem_from_config(cfg)

    def test_sigma_measure_terms_rejected(self):
        cfg = self.config()
        cfg["sigma"]["mean_x"] = 0.5
        with pytest.raises(ValueError, match="law-free"):
            problem_from_config(cfg)

    def test_wrong_kind_rejected(self):
        cfg = self.config()
        cfg["kind"] = "game"
        with pytest.raises(ValueError, match="kind"):
            problem_from_config(cfg)
