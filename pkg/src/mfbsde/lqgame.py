"""Linear-quadratic mean-field nonzero-sum games, open-loop framework.

The game: n-dimensional state driven by a scalar Brownian motion,

    dX_t = (A_t X_t + sum_k C^k u^k_t + D_t E[X_t] + beta_t) dt
         + (sigma_t X_t + alpha_t) dW_t,

with player i minimizing

    J_i(u) = 1/2 ( E[X_T' Q_i X_T] + E[X_T]' R_i E[X_T]
           + E int_0^T (X' M_i X + u_i' N_i u_i + E[X]' Gamma_i E[X]) dt ).

Candidate open-loop Nash controls have the closed form
u_i = -N_i^{-1} C_i' p_i with (p_i, q_i) the adjoint pair of player i.
Setting K_i = C_i N_i^{-1} C_i', the weighted sums Ytilde = sum K_i p_i
and Ztilde = sum K_i q_i solve a single aggregated mean-field BFSDE, so
synthesis runs in three stages: solve the aggregated system with the
frozen-measure scheme, reconstruct per-player adjoints by regression
backward solves along the solved state, and read off the controls.

The module also provides the solvability gate (positivity of the
weighted cost sums, commutation of K_i with the dynamics, and smallness
of the mean couplings), Monte Carlo cost evaluation, a statistical
unilateral-deviation check of the Nash property, and the deterministic
mean reduction whose boundary matrix B(T) detects nonexistence: taking
expectations turns the adjoint system into a linear two-point boundary
problem for the means, and a singular B(T) means no solution for that
horizon (the built-in two-player counterexample has det B(T) =
(1 - T)(1 + 3T), singular exactly at T = 1).
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy.linalg import expm

from . import fixpoint
from .backward import solve_backward
from .paths import BrownianBundle, PathEnsemble, TimeGrid, joint_marginal, marginal
from .problem import (
    LipschitzProfile,
    MfProblem,
    MonotonicityProfile,
    PiecewiseConstant,
    as_path,
    sup_spectral_norm,
    _coerce_matrix,
    _coerce_vector,
)

__all__ = [
    "GameSpec",
    "H2Report",
    "NashResult",
    "DeviationReport",
    "MeanSolution",
    "Nonexistence",
    "check_H2",
    "build_aggregated",
    "solve_nash",
    "cost",
    "deviation_test",
    "solve_mean_fbode",
    "hamiltonian",
    "simulate_state",
    "game_from_config",
    "example3_game",
]

_SYMMETRY_TOL = 1e-12
_COMMUTATION_TOL = 1e-10
_SINGULARITY_RTOL = 1e-9


def _shaped_matrix_path(spec, n_rows: int, n_cols: int, name: str):
    path = as_path(spec)
    coerce = lambda v: _coerce_matrix(v, n_rows, n_cols, name)
    if isinstance(path, PiecewiseConstant):
        path.values = np.stack([coerce(v) for v in path.values])
        return path
    return lambda t, _p=path, _c=coerce: _c(np.asarray(_p(t), dtype=float))


def _shaped_vector_path(spec, n: int, name: str):
    path = as_path(spec)
    coerce = lambda v: _coerce_vector(v, n, name)
    if isinstance(path, PiecewiseConstant):
        path.values = np.stack([coerce(v) for v in path.values])
        return path
    return lambda t, _p=path, _c=coerce: _c(np.asarray(_p(t), dtype=float))


def _sample_times(horizon: float, paths, samples: int = 257) -> np.ndarray:
    """Uniform sampling times plus every piecewise breakpoint in [0, T]."""
    ts = [np.linspace(0.0, horizon, samples)]
    for p in paths:
        if isinstance(p, PiecewiseConstant):
            bp = p.breakpoints
            ts.append(bp[(bp >= 0.0) & (bp <= horizon)])
    return np.unique(np.concatenate(ts))


def _check_symmetric(mat: np.ndarray, name: str) -> None:
    if not np.allclose(mat, mat.T, atol=_SYMMETRY_TOL, rtol=0.0):
        raise ValueError(f"{name} must be symmetric (tolerance {_SYMMETRY_TOL:g})")


@dataclass
class GameSpec:
    """Coefficients of one LQ mean-field game.

    Dynamics paths (A, D, sigma: t -> n x n; beta, alpha: t -> n) accept
    constants, piecewise tables or callables.  Per-player data: C_i
    (n x m_i) and N_i (m_i x m_i symmetric positive definite) must be
    constant; M_i and Gamma_i are symmetric nonnegative paths; Q_i and
    R_i constant symmetric nonnegative matrices.
    """

    n: int
    horizon: float
    x0: np.ndarray
    A: object
    C: Sequence[np.ndarray]
    N: Sequence[np.ndarray]
    Q: Sequence[np.ndarray]
    D: object = 0.0
    beta: object = 0.0
    sigma: object = 0.0
    alpha: object = 0.0
    M: Sequence = ()
    Gamma: Sequence = ()
    R: Sequence = ()

    def __post_init__(self):
        n = self.n
        if n < 1:
            raise ValueError("state dimension n must be positive")
        if not (self.horizon > 0 and np.isfinite(self.horizon)):
            raise ValueError(f"horizon must be positive and finite, got {self.horizon}")
        self.x0 = _coerce_vector(np.asarray(self.x0, dtype=float), n, "x0")

        self.A = _shaped_matrix_path(self.A, n, n, "A")
        self.D = _shaped_matrix_path(self.D, n, n, "D")
        self.sigma = _shaped_matrix_path(self.sigma, n, n, "sigma")
        self.beta = _shaped_vector_path(self.beta, n, "beta")
        self.alpha = _shaped_vector_path(self.alpha, n, "alpha")

        players = len(self.C)
        if players < 1:
            raise ValueError("at least one player (one C matrix) is required")
        if len(self.N) != players:
            raise ValueError("need one N matrix per player")
        C_list, N_list = [], []
        for i, (c, nn) in enumerate(zip(self.C, self.N)):
            c = np.asarray(c, dtype=float)
            if c.ndim == 0:
                c = c.reshape(1, 1)
            elif c.ndim == 1:
                c = c.reshape(n, 1)
            if c.shape[0] != n:
                raise ValueError(f"C[{i}] must have {n} rows, got shape {c.shape}")
            m_i = c.shape[1]
            nn = _coerce_matrix(np.asarray(nn, dtype=float), m_i, m_i, f"N[{i}]")
            _check_symmetric(nn, f"N[{i}]")
            try:
                np.linalg.cholesky(nn)
            except np.linalg.LinAlgError as exc:
                raise ValueError(f"N[{i}] must be positive definite") from exc
            C_list.append(c)
            N_list.append(nn)
        self.C, self.N = C_list, N_list

        def per_player_const(values, name):
            vals = list(values) if len(values) else [np.zeros((n, n))] * players
            if len(vals) != players:
                raise ValueError(f"need one {name} matrix per player")
            out = []
            for i, v in enumerate(vals):
                v = _coerce_matrix(np.asarray(v, dtype=float), n, n, f"{name}[{i}]")
                _check_symmetric(v, f"{name}[{i}]")
                out.append(v)
            return out

        self.Q = per_player_const(self.Q, "Q")
        self.R = per_player_const(self.R, "R")

        def per_player_path(values, name):
            vals = list(values) if len(values) else [np.zeros((n, n))] * players
            if len(vals) != players:
                raise ValueError(f"need one {name} path per player")
            out = []
            for i, v in enumerate(vals):
                path = _shaped_matrix_path(v, n, n, f"{name}[{i}]")
                for t in self._symmetry_sample(path):
                    _check_symmetric(np.asarray(path(t), dtype=float), f"{name}[{i}](t={t:g})")
                out.append(path)
            return out

        self.M = per_player_path(self.M, "M")
        self.Gamma = per_player_path(self.Gamma, "Gamma")

    def _symmetry_sample(self, path) -> np.ndarray:
        if isinstance(path, PiecewiseConstant):
            return np.clip(path.breakpoints, 0.0, self.horizon)
        return np.linspace(0.0, self.horizon, 5)

    @property
    def players(self) -> int:
        return len(self.C)

    @property
    def control_dims(self) -> list[int]:
        return [c.shape[1] for c in self.C]

    def control_gains(self) -> list[np.ndarray]:
        """N_i^{-1} C_i' per player (the feedback gain from the adjoint)."""
        return [np.linalg.solve(nn, c.T) for c, nn in zip(self.C, self.N)]

    def k_matrices(self) -> list[np.ndarray]:
        """K_i = C_i N_i^{-1} C_i', symmetric positive semidefinite."""
        out = []
        for c, nn in zip(self.C, self.N):
            k = c @ np.linalg.solve(nn, c.T)
            out.append((k + k.T) / 2.0)
        return out


# ---------------------------------------------------------------------------
# solvability gate
# ---------------------------------------------------------------------------


@dataclass
class H2Report:
    """Structural conditions for aggregated solvability.

    eta1/eta2 are the smallest eigenvalues of the symmetric parts of
    sum K_i Q_i and (over the grid) sum K_i M_i(t).  The mean couplings
    ||sum K_i R_i|| and ||D|| must both stay below
    min{2(sqrt2-1) eta1, sqrt2/2, (sqrt2/2) eta2}.
    """

    K: list
    eta1: float
    eta2: float
    commutation_residual: float
    norm_KR: float
    norm_D: float
    bound: float
    structure_ok: bool
    positivity_ok: bool
    commutation_ok: bool
    coupling_R_ok: bool
    coupling_D_ok: bool
    passed: bool

    def to_dict(self) -> dict:
        return {
            "eta1": self.eta1,
            "eta2": self.eta2,
            "commutation_residual": self.commutation_residual,
            "norm_KR": self.norm_KR,
            "norm_D": self.norm_D,
            "bound": self.bound,
            "checks": {
                "time_independent_CN": self.structure_ok,
                "positivity": self.positivity_ok,
                "commutation": self.commutation_ok,
                "coupling_R": self.coupling_R_ok,
                "coupling_D": self.coupling_D_ok,
            },
            "pass": self.passed,
        }


def _sym_min_eig(mat: np.ndarray) -> float:
    return float(np.linalg.eigvalsh((mat + mat.T) / 2.0)[0])


def _spectral(mat: np.ndarray) -> float:
    return float(np.linalg.norm(mat, 2))


def coupling_bound(eta1: float, eta2: float) -> float:
    """Admissible strict bound min{2(sqrt2-1) eta1, sqrt2/2, (sqrt2/2) eta2}."""
    return min(2.0 * (math.sqrt(2.0) - 1.0) * eta1, math.sqrt(2.0) / 2.0, math.sqrt(2.0) / 2.0 * eta2)


def check_H2(gs: GameSpec, grid: TimeGrid) -> H2Report:
    """Evaluate the structural and smallness conditions on ``grid``'s nodes."""
    K = gs.k_matrices()
    skq = sum(k @ q for k, q in zip(K, gs.Q))
    eta1 = _sym_min_eig(skq)

    times = grid.nodes
    eta2 = math.inf
    commut = 0.0
    norm_d = 0.0
    for t in times:
        skm = sum(k @ np.asarray(mi(t), dtype=float) for k, mi in zip(K, gs.M))
        eta2 = min(eta2, _sym_min_eig(skm))
        a_t = np.asarray(gs.A(t), dtype=float)
        d_t = np.asarray(gs.D(t), dtype=float)
        s_t = np.asarray(gs.sigma(t), dtype=float)
        norm_d = max(norm_d, _spectral(d_t))
        for k in K:
            for mat in (a_t.T, d_t.T, s_t.T):
                commut = max(commut, _spectral(k @ mat - mat @ k))

    norm_kr = _spectral(sum(k @ r for k, r in zip(K, gs.R)))
    bound = coupling_bound(eta1, eta2)
    positivity_ok = eta1 > 0 and eta2 > 0
    commutation_ok = commut < _COMMUTATION_TOL
    coupling_r_ok = norm_kr < bound
    coupling_d_ok = norm_d < bound
    return H2Report(
        K=K,
        eta1=eta1,
        eta2=float(eta2),
        commutation_residual=commut,
        norm_KR=norm_kr,
        norm_D=norm_d,
        bound=bound,
        structure_ok=True,  # C_i, N_i are constant matrices by construction
        positivity_ok=positivity_ok,
        commutation_ok=commutation_ok,
        coupling_R_ok=coupling_r_ok,
        coupling_D_ok=coupling_d_ok,
        passed=positivity_ok and commutation_ok and coupling_r_ok and coupling_d_ok,
    )


# ---------------------------------------------------------------------------
# aggregated system
# ---------------------------------------------------------------------------


def build_aggregated(gs: GameSpec, force: bool = False) -> MfProblem:
    """Aggregated mean-field BFSDE in (X, sum K_i p_i, sum K_i q_i).

    Coefficients:

        f(t, x, y, z, nu)     = A_t x - y + D_t E[xi_1] + beta_t
        sigma(t, x, y, z)     = sigma_t x + alpha_t              (law-free)
        h(t, x, y, z, nu)     = -A_t' y - (sum K_i M_i) x - D_t' E[xi_2] - sigma_t' z
        g(x, mu)              = (sum K_i Q_i) x + (sum K_i R_i) E[mu]

    with attached constants C_nu = ||D||, C_g_nu = ||sum K_i R_i||,
    k = min{1, eta2}, k' = eta1.  Without ``force`` the build fails when
    eta1 or eta2 is nonpositive (the monotonicity constants do not
    exist); with ``force`` the problem is built anyway, with no
    monotonicity profile, for counterexample studies.
    """
    n = gs.n
    K = gs.k_matrices()
    skq = sum(k @ q for k, q in zip(K, gs.Q))
    skr = sum(k @ r for k, r in zip(K, gs.R))

    def skm(t):
        return sum(k @ np.asarray(mi(t), dtype=float) for k, mi in zip(K, gs.M))

    times = _sample_times(gs.horizon, [gs.A, gs.D, gs.sigma] + list(gs.M))
    eta1 = _sym_min_eig(skq)
    eta2 = min(_sym_min_eig(skm(t)) for t in times)
    if not force and not (eta1 > 0 and eta2 > 0):
        raise ValueError(
            f"monotonicity constants unavailable (eta1={eta1:g}, eta2={eta2:g}); "
            "pass force=True to build anyway"
        )

    A, D, sig = gs.A, gs.D, gs.sigma
    beta, alpha = gs.beta, gs.alpha

    def f_cb(t, x, y, z, nu):
        out = x @ np.asarray(A(t)).T - y + beta(t)
        d_t = np.asarray(D(t))
        if np.any(d_t):
            out = out + d_t @ nu.mean()[:n]
        return out

    def sigma_cb(t, x, y, z, nu):
        return (x @ np.asarray(sig(t)).T + alpha(t))[:, :, None]

    def h_cb(t, x, y, z, nu):
        out = y @ np.asarray(A(t)) + x @ skm(t).T + z[:, :, 0] @ np.asarray(sig(t))
        d_t = np.asarray(D(t))
        if np.any(d_t):
            out = out + d_t.T @ nu.mean()[n:]
        return -out

    def g_cb(x, mu):
        out = x @ skq.T
        if np.any(skr):
            out = out + skr @ mu.mean()
        return out

    sup_skm = max(_spectral(skm(t)) for t in times)
    lip = LipschitzProfile(
        c_u=max(sup_spectral_norm(A, gs.horizon), 1.0, sup_skm, sup_spectral_norm(sig, gs.horizon)),
        c_nu=sup_spectral_norm(D, gs.horizon),
        c_g_x=_spectral(skq),
        c_g_nu=_spectral(skr),
    )
    mono = None
    if eta1 > 0 and eta2 > 0:
        mono = MonotonicityProfile(k=min(1.0, eta2), k_prime=eta1, variant="H1prime")

    return MfProblem(
        dim_state=n,
        dim_bm=1,
        x0=gs.x0,
        horizon=gs.horizon,
        f=f_cb,
        sigma=sigma_cb,
        h=h_cb,
        g=g_cb,
        law_free_sigma=True,
        lipschitz=lip,
        monotonicity=mono,
    )


# ---------------------------------------------------------------------------
# state simulation under explicit controls
# ---------------------------------------------------------------------------


def _control_fn(u) -> Callable:
    if isinstance(u, PathEnsemble):
        arr = u.values
        return lambda k, t, x: arr[:, k, :]
    if callable(u):
        return u
    arr = np.asarray(u, dtype=float)
    return lambda k, t, x: arr[:, k, :]


def simulate_state(gs: GameSpec, grid: TimeGrid, bundle: BrownianBundle, controls) -> PathEnsemble:
    """Euler simulation of the controlled state with plug-in ensemble mean.

    ``controls`` holds one entry per player: a PathEnsemble/array of
    per-particle control values on the grid nodes, or an adapted callable
    ``(step, t, x) -> (particles, m_i)`` used for feedback deviations.
    """
    if bundle.dim != 1:
        raise ValueError("the game layer uses a one-dimensional Brownian motion")
    if bundle.steps != grid.steps:
        raise ValueError("bundle and grid step counts differ")
    if len(controls) != gs.players:
        raise ValueError(f"need one control per player, got {len(controls)}")
    fns = [_control_fn(u) for u in controls]
    particles, steps = bundle.particles, bundle.steps
    n = gs.n
    dt = grid.dt
    times = grid.nodes
    x = np.empty((particles, steps + 1, n))
    x[:, 0, :] = gs.x0
    for k in range(steps):
        t_k = float(times[k])
        xk = x[:, k, :]
        drift = xk @ np.asarray(gs.A(t_k)).T + gs.beta(t_k)
        d_t = np.asarray(gs.D(t_k))
        if np.any(d_t):
            drift = drift + d_t @ xk.mean(axis=0)
        for i, fn in enumerate(fns):
            drift = drift + fn(k, t_k, xk) @ gs.C[i].T
        diff = xk @ np.asarray(gs.sigma(t_k)).T + gs.alpha(t_k)
        x[:, k + 1, :] = xk + drift * dt + diff * bundle.increments[:, k, :]
        if not np.all(np.isfinite(x[:, k + 1, :])):
            raise FloatingPointError(f"state simulation produced non-finite values at step {k}")
    return PathEnsemble(values=x)


# ---------------------------------------------------------------------------
# cost functional
# ---------------------------------------------------------------------------


def _trapezoid_weights(grid: TimeGrid) -> np.ndarray:
    w = np.full(grid.steps + 1, grid.dt)
    w[0] *= 0.5
    w[-1] *= 0.5
    return w


def _cost_of_slice(gs: GameSpec, i: int, x_vals: np.ndarray, u_vals: np.ndarray, grid: TimeGrid) -> float:
    """Plug-in cost of player i over one particle slice (means taken
    within the slice)."""
    w = _trapezoid_weights(grid)
    times = grid.nodes
    x_t = x_vals[:, -1, :]
    total = float(np.mean(np.einsum("pi,ij,pj->p", x_t, gs.Q[i], x_t)))
    m_t = x_t.mean(axis=0)
    total += float(m_t @ gs.R[i] @ m_t)
    run = np.einsum("pki,ij,pkj->pk", u_vals, gs.N[i], u_vals)
    means = x_vals.mean(axis=0)
    for k, t in enumerate(times):
        m_k = np.asarray(gs.M[i](t), dtype=float)
        if np.any(m_k):
            run[:, k] += np.einsum("pi,ij,pj->p", x_vals[:, k, :], m_k, x_vals[:, k, :])
        g_k = np.asarray(gs.Gamma[i](t), dtype=float)
        if np.any(g_k):
            total += w[k] * float(means[k] @ g_k @ means[k])
    total += float(np.mean(run @ w))
    return 0.5 * total


def _cost_with_batches(
    gs: GameSpec, i: int, x_vals: np.ndarray, u_vals: np.ndarray, grid: TimeGrid, n_batches: int = 20
) -> tuple[float, float, np.ndarray]:
    value = _cost_of_slice(gs, i, x_vals, u_vals, grid)
    particles = x_vals.shape[0]
    n_batches = min(n_batches, particles)
    bounds = np.linspace(0, particles, n_batches + 1).astype(int)
    batch_vals = np.array(
        [_cost_of_slice(gs, i, x_vals[a:b], u_vals[a:b], grid) for a, b in zip(bounds[:-1], bounds[1:])]
    )
    stderr = float(np.std(batch_vals, ddof=1) / math.sqrt(n_batches)) if n_batches > 1 else 0.0
    return value, stderr, batch_vals


def cost(gs: GameSpec, i: int, x_ens: PathEnsemble, controls, grid: TimeGrid) -> tuple[float, float]:
    """Monte Carlo estimate of J_i with its standard error.

    Quadrature is trapezoidal in time; the E[X]-product terms use plug-in
    ensemble means, and the standard error comes from batch means over
    contiguous particle blocks.
    """
    u = controls[i] if isinstance(controls, (list, tuple)) else controls
    u_vals = u.values if isinstance(u, PathEnsemble) else np.asarray(u, dtype=float)
    if u_vals.shape[0] != x_ens.particles or u_vals.shape[1] != x_ens.nodes:
        raise ValueError("control and state ensembles must share particles and nodes")
    value, stderr, _ = _cost_with_batches(gs, i, x_ens.values, u_vals, grid)
    return value, stderr


# ---------------------------------------------------------------------------
# Nash synthesis
# ---------------------------------------------------------------------------


@dataclass
class NashResult:
    """Synthesized equilibrium candidate with Monte Carlo costs."""

    aggregated: fixpoint.MfSolution
    controls: list
    adjoints_p: list
    adjoints_q: list
    costs: list
    cost_stderrs: list
    aggregation_residual_y: float
    aggregation_residual_z: float
    adjoint_iterations: list

    @property
    def x_ens(self) -> PathEnsemble:
        return self.aggregated.x_ens

    @property
    def converged(self) -> bool:
        return self.aggregated.converged

    def summary(self) -> dict:
        return {
            "converged": self.converged,
            "costs": [
                {"player": i, "J": c, "stderr": s}
                for i, (c, s) in enumerate(zip(self.costs, self.cost_stderrs))
            ],
            "aggregation_residual_y": self.aggregation_residual_y,
            "aggregation_residual_z": self.aggregation_residual_z,
            "adjoint_iterations": self.adjoint_iterations,
        }


def _adjoint_problem(gs: GameSpec, i: int) -> MfProblem:
    """Player i's adjoint backward equation packaged for the regression
    solver; the measure argument carries the joint (X, p_i) cloud."""
    n = gs.n
    A, D, sig, Mi, Gi = gs.A, gs.D, gs.sigma, gs.M[i], gs.Gamma[i]
    Qi, Ri = gs.Q[i], gs.R[i]

    def h_cb(t, x, y, z, nu):
        mu = nu.mean()
        out = y @ np.asarray(A(t)) + x @ np.asarray(Mi(t)).T + z[:, :, 0] @ np.asarray(sig(t))
        d_t = np.asarray(D(t))
        if np.any(d_t):
            out = out + d_t.T @ mu[n:]
        g_t = np.asarray(Gi(t))
        if np.any(g_t):
            out = out + g_t @ mu[:n]
        return -out

    def g_cb(x, mu):
        out = x @ Qi.T
        if np.any(Ri):
            out = out + Ri @ mu.mean()
        return out

    return MfProblem(
        dim_state=n,
        dim_bm=1,
        x0=gs.x0,
        horizon=gs.horizon,
        f=lambda t, x, y, z, nu: np.zeros_like(x),
        sigma=lambda t, x, y, z, nu: np.zeros((x.shape[0], n, 1)),
        h=h_cb,
        g=g_cb,
        law_free_sigma=True,
    )


def _solve_adjoint(gs, i, sol, params) -> tuple[PathEnsemble, PathEnsemble, int]:
    """Iterate the adjoint mean-field BSDE to a fixed point of its own
    mean coupling (frozen (X, p_i) flow, refrozen each pass)."""
    prob = _adjoint_problem(gs, i)
    grid, bundle = sol.grid, sol.bundle
    x_ens = sol.x_ens
    terminal = marginal(x_ens, x_ens.nodes - 1)
    p_ens = PathEnsemble(values=np.zeros((bundle.particles, grid.steps + 1, gs.n)))
    q_ens = None
    max_iter = 50
    gaps = []
    for it in range(1, max_iter + 1):
        flow = [joint_marginal(x_ens, p_ens, k) for k in range(x_ens.nodes)]
        p_new, q_ens, _ = solve_backward(
            prob, grid, bundle, x_ens, flow, terminal, params.basis, params.picard_inner
        )
        diff = np.mean(np.sum((p_new.values - p_ens.values) ** 2, axis=2), axis=0)
        gap = float(np.trapezoid(diff, dx=grid.dt))
        gaps.append(gap)
        p_ens = p_new
        if gap < params.tol**2:
            return p_ens, q_ens, it
        if len(gaps) > 3 and gaps[-4] > 0 and gap > 10.0 * gaps[-4]:
            raise fixpoint.Diverged(f"adjoint reconstruction diverged for player {i}", sol.history)
    return p_ens, q_ens, max_iter


def solve_nash(
    gs: GameSpec,
    grid: TimeGrid,
    params: fixpoint.SchemeParams,
    seed: int = 0,
    threads: int = 1,
) -> NashResult:
    """Synthesize the open-loop Nash candidate.

    Solves the aggregated system with the frozen-measure scheme (built
    with ``force=True`` so counterexample instances run and are caught by
    divergence detection), reconstructs each player's adjoint pair by
    regression backward solves along the solved state, and applies the
    closed-form control map.  The identity sum K_i p_i = Ytilde (and its
    q/Ztilde analogue) is recorded as an aggregation residual.
    """
    agg = build_aggregated(gs, force=True)
    sol = fixpoint.solve(agg, grid, params, seed)

    players = gs.players
    if threads > 1 and players > 1:
        with ThreadPoolExecutor(max_workers=min(threads, players)) as pool:
            results = list(pool.map(lambda i: _solve_adjoint(gs, i, sol, params), range(players)))
    else:
        results = [_solve_adjoint(gs, i, sol, params) for i in range(players)]
    p_list = [r[0] for r in results]
    q_list = [r[1] for r in results]
    iters = [r[2] for r in results]

    gains = gs.control_gains()
    controls = [
        PathEnsemble(values=-(p.values @ gain.T)) for p, gain in zip(p_list, gains)
    ]

    K = gs.k_matrices()
    ky = sum(p.values @ k.T for p, k in zip(p_list, K))
    res_y = np.mean(np.sum((ky - sol.y_ens.values) ** 2, axis=2), axis=0)
    kq = sum(q.values @ k.T for q, k in zip(q_list, K))
    res_z = np.mean(np.sum((kq - sol.z_ens.values) ** 2, axis=2), axis=0)

    costs, stderrs = [], []
    for i in range(players):
        value, se = cost(gs, i, sol.x_ens, controls, grid)
        costs.append(value)
        stderrs.append(se)

    return NashResult(
        aggregated=sol,
        controls=controls,
        adjoints_p=p_list,
        adjoints_q=q_list,
        costs=costs,
        cost_stderrs=stderrs,
        aggregation_residual_y=float(np.max(res_y)),
        aggregation_residual_z=float(np.max(res_z)),
        adjoint_iterations=iters,
    )


# ---------------------------------------------------------------------------
# deviation testing
# ---------------------------------------------------------------------------


@dataclass
class DeviationReport:
    """Outcome of randomized unilateral-deviation probing of player i."""

    player: int
    perturbations: int
    magnitude: float
    baseline_cost: float
    deltas: list
    stderrs: list
    min_delta: float
    min_stderr: float
    passed: bool

    def to_dict(self) -> dict:
        return {
            "player": self.player,
            "perturbations": self.perturbations,
            "magnitude": self.magnitude,
            "baseline_cost": self.baseline_cost,
            "deltas": self.deltas,
            "stderrs": self.stderrs,
            "min_delta": self.min_delta,
            "min_stderr": self.min_stderr,
            "pass": self.passed,
        }


def deviation_test(
    gs: GameSpec,
    nash: NashResult,
    i: int,
    perturbations: int = 20,
    magnitude: float = 0.1,
    seed: int = 0,
) -> DeviationReport:
    """Probe the Nash inequality J_i(u*) <= J_i(u* deviated in slot i).

    Deviations are drawn from a finite adapted family (constant vectors
    and affine state-feedback maps), scaled by ``magnitude`` and applied
    on top of player i's candidate control; the state is re-simulated
    with the SAME Brownian bundle, so cost differences are paired.  The
    test passes when the most favorable deviation does not beat the
    candidate by more than 3 standard errors of the paired difference.
    Full open-loop function-space deviations are not verifiable
    numerically; this finite family is a documented limitation.
    """
    grid, bundle = nash.aggregated.grid, nash.aggregated.bundle
    base_controls = [u.values for u in nash.controls]
    m_i = gs.control_dims[i]
    rng = np.random.default_rng(seed)

    x_base = simulate_state(gs, grid, bundle, base_controls)
    j_base, _, base_batches = _cost_with_batches(gs, i, x_base.values, base_controls[i], grid)

    deltas, stderrs = [], []
    base_i = base_controls[i]
    for j in range(perturbations):
        if j % 2 == 0:
            v = rng.standard_normal(m_i)
            dev = lambda k, t, x, _v=v: base_i[:, k, :] + magnitude * _v
        else:
            a = rng.standard_normal(m_i)
            b = rng.standard_normal((m_i, gs.n)) / math.sqrt(gs.n)
            dev = lambda k, t, x, _a=a, _b=b: base_i[:, k, :] + magnitude * (_a + x @ _b.T)
        controls = list(base_controls)
        controls[i] = dev
        x_dev = simulate_state(gs, grid, bundle, controls)
        u_dev = np.stack(
            [dev(k, float(grid.nodes[k]), x_dev.values[:, k, :]) for k in range(grid.steps + 1)],
            axis=1,
        )
        j_dev, _, dev_batches = _cost_with_batches(gs, i, x_dev.values, u_dev, grid)
        deltas.append(j_dev - j_base)
        paired = dev_batches - base_batches
        stderrs.append(float(np.std(paired, ddof=1) / math.sqrt(len(paired))) if len(paired) > 1 else 0.0)

    idx = int(np.argmin(deltas))
    return DeviationReport(
        player=i,
        perturbations=perturbations,
        magnitude=magnitude,
        baseline_cost=j_base,
        deltas=[float(d) for d in deltas],
        stderrs=stderrs,
        min_delta=float(deltas[idx]),
        min_stderr=stderrs[idx],
        passed=bool(deltas[idx] >= -3.0 * stderrs[idx]),
    )


# ---------------------------------------------------------------------------
# deterministic mean reduction
# ---------------------------------------------------------------------------


@dataclass
class MeanSolution:
    """Mean trajectories of the adjoint system for a solvable horizon."""

    times: np.ndarray
    state_mean: np.ndarray  # (len, n)
    adjoint_means: np.ndarray  # (players, len, n)
    control_means: list  # per player (len, m_i)
    terminal_state_mean: np.ndarray
    det: float
    cond: float

    def to_dict(self) -> dict:
        return {
            "exists": True,
            "det": self.det,
            "cond": self.cond,
            "terminal_state_mean": [float(v) for v in self.terminal_state_mean],
            "initial_controls": [[float(v) for v in u[0]] for u in self.control_means],
        }


@dataclass
class Nonexistence:
    """Singular boundary matrix: no solution of the mean system."""

    det: float
    cond: float
    horizon: float

    def to_dict(self) -> dict:
        return {"exists": False, "det": self.det, "cond": self.cond, "horizon": self.horizon}


def _mean_system(gs: GameSpec):
    """Block matrix G(t) and affine term b(t) of the joint mean ODE in
    (state mean, adjoint means), dimension (players + 1) * n."""
    n, players = gs.n, gs.players
    K = gs.k_matrices()
    dim = (players + 1) * n

    def G(t: float) -> np.ndarray:
        a_t = np.asarray(gs.A(t), dtype=float)
        d_t = np.asarray(gs.D(t), dtype=float)
        ad = a_t + d_t
        out = np.zeros((dim, dim))
        out[:n, :n] = ad
        for i in range(players):
            sl = slice((i + 1) * n, (i + 2) * n)
            out[:n, sl] = -K[i]
            out[sl, :n] = -(np.asarray(gs.M[i](t), dtype=float) + np.asarray(gs.Gamma[i](t), dtype=float))
            out[sl, sl] = -ad.T
        return out

    def b(t: float) -> np.ndarray:
        out = np.zeros(dim)
        out[:n] = gs.beta(t)
        return out

    return G, b, dim


def _augmented(G, b, t: float, dim: int) -> np.ndarray:
    out = np.zeros((dim + 1, dim + 1))
    out[:dim, :dim] = G(t)
    out[:dim, dim] = b(t)
    return out


def _backward_transition(gs: GameSpec, G, b, dim: int, t_hi: float, t_lo: float, rk_steps: int = 512) -> np.ndarray:
    """Transition matrix of the augmented mean ODE from t_hi down to t_lo.

    Exact (matrix exponentials per piece) when every coefficient path is
    piecewise constant; dense RK4 otherwise.
    """
    if t_hi <= t_lo:
        return np.eye(dim + 1)
    paths = [gs.A, gs.D, gs.beta] + list(gs.M) + list(gs.Gamma)
    if all(isinstance(p, PiecewiseConstant) for p in paths):
        cuts = np.unique(
            np.concatenate(
                [[t_lo, t_hi]]
                + [p.breakpoints[(p.breakpoints > t_lo) & (p.breakpoints < t_hi)] for p in paths]
            )
        )
        # left-to-right product: factor j maps across the j-th lowest piece
        total = np.eye(dim + 1)
        for a, c in zip(cuts[:-1], cuts[1:]):
            mid = 0.5 * (a + c)
            total = total @ expm(-_augmented(G, b, mid, dim) * (c - a))
        return total
    # general deterministic callables: RK4 on Phi' = G_hat Phi integrated backward
    phi = np.eye(dim + 1)
    hs = (t_hi - t_lo) / rk_steps
    t = t_hi
    for _ in range(rk_steps):
        k1 = _augmented(G, b, t, dim) @ phi
        k2 = _augmented(G, b, t - hs / 2, dim) @ (phi - hs / 2 * k1)
        k3 = _augmented(G, b, t - hs / 2, dim) @ (phi - hs / 2 * k2)
        k4 = _augmented(G, b, t - hs, dim) @ (phi - hs * k3)
        phi = phi - hs / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
        t -= hs
    return phi


def solve_mean_fbode(gs: GameSpec, times: np.ndarray | None = None):
    """Deterministic mean reduction of the adjoint system.

    Taking expectations of the adjoint system turns it into a linear
    two-point boundary problem for (E[X_t], E[p_i_t]); this requires
    deterministic coefficients and a vanishing state-multiplicative
    diffusion (otherwise E[sigma' q] is not a function of the means).
    The affine map from the terminal state mean s to the implied initial
    state mean is assembled by integrating the ODE backward; its linear
    part is the boundary matrix B(T).  Returns the mean trajectories, or
    :class:`Nonexistence` when |det B(T)| < 1e-9 * (product of row norms).
    """
    if sup_spectral_norm(gs.sigma, gs.horizon) > 1e-14:
        raise ValueError(
            "mean reduction requires a vanishing state-multiplicative diffusion "
            "(sigma = 0); the additive alpha term is fine"
        )
    n, players = gs.n, gs.players
    G, b, dim = _mean_system(gs)
    T = gs.horizon

    transition = _backward_transition(gs, G, b, dim, T, 0.0)
    stack = np.zeros((dim, n))
    stack[:n, :] = np.eye(n)
    for i in range(players):
        stack[(i + 1) * n : (i + 2) * n, :] = gs.Q[i] + gs.R[i]
    boundary = transition[:n, :dim] @ stack
    offset = transition[:n, dim]

    det = float(np.linalg.det(boundary))
    row_norms = np.linalg.norm(boundary, axis=1)
    scale = float(np.prod(row_norms))
    cond = float(np.linalg.cond(boundary)) if scale > 0 else math.inf
    if scale == 0.0 or abs(det) < _SINGULARITY_RTOL * scale:
        return Nonexistence(det=det, cond=cond, horizon=T)

    s = np.linalg.solve(boundary, gs.x0 - offset)
    v_t = np.concatenate([stack @ s, [1.0]])

    if times is None:
        times = np.linspace(0.0, T, 201)
    times = np.asarray(times, dtype=float)
    if times.size == 0 or times.min() < 0 or times.max() > T + 1e-12:
        raise ValueError(f"output times must lie in [0, {T}]")
    order = np.argsort(times)[::-1]
    values = np.empty((times.size, dim))
    v = v_t
    t_prev = T
    for idx in order:
        t = float(times[idx])
        v = _backward_transition(gs, G, b, dim, t_prev, t) @ v
        values[idx] = v[:dim]
        t_prev = t

    state_mean = values[:, :n]
    adjoint_means = np.stack(
        [values[:, (i + 1) * n : (i + 2) * n] for i in range(players)], axis=0
    )
    gains = gs.control_gains()
    control_means = [-(adjoint_means[i] @ gains[i].T) for i in range(players)]
    return MeanSolution(
        times=times,
        state_mean=state_mean,
        adjoint_means=adjoint_means,
        control_means=control_means,
        terminal_state_mean=s,
        det=det,
        cond=cond,
    )


# ---------------------------------------------------------------------------
# Hamiltonians
# ---------------------------------------------------------------------------


def hamiltonian(gs: GameSpec, i: int, t: float, x, u_all, zeta, p_i, q_i) -> float:
    """Player i's Hamiltonian at a single point.

    ``zeta`` is the placeholder variable standing for the state
    expectation.  The minimizer over u_i is -N_i^{-1} C_i' p_i.
    """
    x = _coerce_vector(np.asarray(x, dtype=float), gs.n, "x")
    zeta = _coerce_vector(np.asarray(zeta, dtype=float), gs.n, "zeta")
    p_i = _coerce_vector(np.asarray(p_i, dtype=float), gs.n, "p_i")
    q_i = _coerce_vector(np.asarray(q_i, dtype=float), gs.n, "q_i")
    if len(u_all) != gs.players:
        raise ValueError(f"need one control per player, got {len(u_all)}")
    us = [
        _coerce_vector(np.asarray(u, dtype=float), m_k, f"u_{k}")
        for k, (u, m_k) in enumerate(zip(u_all, gs.control_dims))
    ]
    drift = np.asarray(gs.A(t)) @ x + np.asarray(gs.D(t)) @ zeta + gs.beta(t)
    for c, u in zip(gs.C, us):
        drift = drift + c @ u
    value = float(p_i @ drift)
    value += 0.5 * float(x @ np.asarray(gs.M[i](t)) @ x)
    value += 0.5 * float(us[i] @ gs.N[i] @ us[i])
    value += 0.5 * float(zeta @ np.asarray(gs.Gamma[i](t)) @ zeta)
    value += float((np.asarray(gs.sigma(t)) @ x + gs.alpha(t)) @ q_i)
    return value


# ---------------------------------------------------------------------------
# configs and the built-in counterexample
# ---------------------------------------------------------------------------


def game_from_config(cfg: dict) -> GameSpec:
    """Build a GameSpec from a config dict (JSON schema).

    Schema: ``{"kind": "game", "n":, "m":, "T":, "x0": [...],
    "A"|"D"|"beta"|"sigma"|"alpha": coeff, "C": [...], "N": [...],
    "M": [...], "Gamma": [...], "Q": [...], "R": [...]}`` where dynamics
    coefficients are constants, ``{"const": ...}`` or piecewise tables,
    and the per-player lists hold one entry per player (M and Gamma
    entries may be piecewise; C, N, Q, R are constant matrices).
    Omitted zero blocks (D, beta, sigma, alpha, M, Gamma, R) default to
    zero.  Coefficients are deterministic; adapted random coefficients
    need library callbacks.
    """
    if cfg.get("kind", "game") != "game":
        raise ValueError(f"expected a game config, got kind={cfg.get('kind')!r}")
    for key in ("n", "m", "T", "x0", "C", "N"):
        if key not in cfg:
            raise ValueError(f"game config is missing required field {key!r}")
    n = int(cfg["n"])
    players = int(cfg["m"])
    for name in ("C", "N"):
        if len(cfg[name]) != players:
            raise ValueError(f"{name} must list one entry per player ({players})")
    for name in ("M", "Gamma", "Q", "R"):
        if name in cfg and len(cfg[name]) != players:
            raise ValueError(f"{name} must list one entry per player ({players})")
    zeros_mat = np.zeros((n, n))
    zeros_vec = np.zeros(n)
    return GameSpec(
        n=n,
        horizon=float(cfg["T"]),
        x0=np.asarray(cfg["x0"], dtype=float),
        A=cfg.get("A", zeros_mat),
        D=cfg.get("D", zeros_mat),
        beta=cfg.get("beta", zeros_vec),
        sigma=cfg.get("sigma", zeros_mat),
        alpha=cfg.get("alpha", zeros_vec),
        C=[np.asarray(c, dtype=float) for c in cfg["C"]],
        N=[np.asarray(v, dtype=float) for v in cfg["N"]],
        M=list(cfg.get("M", ())),
        Gamma=list(cfg.get("Gamma", ())),
        Q=[np.asarray(v, dtype=float) for v in cfg.get("Q", [zeros_mat] * players)],
        R=[np.asarray(v, dtype=float) for v in cfg.get("R", [zeros_mat] * players)],
    )


def example3_game(horizon: float = 1.0) -> GameSpec:
    """Built-in two-player counterexample game.

    dX = (X - E[X] + u (1, -2)' + v (-2, 1)') dt + (1, 1)' dW from
    x0 = (1, 2)', with J_1 = 1/2 E[int u^2 + (X_T^1)^2] and
    J_2 = 1/2 E[int v^2 + (X_T^2)^2].  Its mean reduction has
    det B(T) = (1 - T)(1 + 3T): no Nash equilibrium at T = 1.
    """
    return GameSpec(
        n=2,
        horizon=horizon,
        x0=[1.0, 2.0],
        A=np.eye(2),
        D=-np.eye(2),
        alpha=[1.0, 1.0],
        C=[np.array([[1.0], [-2.0]]), np.array([[-2.0], [1.0]])],
        N=[np.array([[1.0]]), np.array([[1.0]])],
        Q=[np.diag([1.0, 0.0]), np.diag([0.0, 1.0])],
    )
