"""Problem declaration for fully coupled mean-field backward-forward SDEs.

An :class:`MfProblem` bundles the four coefficient callbacks

    X_t = x0 + int_0^t f(s, X, Y, Z, nu_s) ds + int_0^t sigma(s, X, Y, Z[, nu_s]) dW_s
    Y_t = g(X_T, mu_T) - int_t^T h(s, X, Y, Z, nu_s) ds - int_t^T Z_s dW_s

where nu_s is the joint law of (X_s, Y_s) and mu_T the law of X_T, plus
user-declared Lipschitz and monotonicity metadata.  Coefficient callbacks
are vectorized across the particle axis: x, y have shape (P, m), z has
shape (P, m, d), and nu is an :class:`~mfbsde.measure.EmpiricalMeasure`
whose points concatenate the X components (first m) and Y components
(last m).  Callbacks must be pure functions of their arguments.

This module also evaluates the coupled-coefficient dissipativity
functional

    A(t, u, u', nu) = (f(t,u,nu) - f(t,u',nu)) . (y - y')
                    + (h(t,u,nu) - h(t,u',nu)) . (x - x')
                    + [sigma(t,u,nu) - sigma(t,u',nu), z - z']

(with [A, B] the column-wise inner product), probes the one-sided bounds

    A <= -k (|x-x'|^2 + |y-y'|^2 + |z-z'|^2)        (strong variant, "H1")
    A <= -k (|x-x'|^2 + |y-y'|^2)                   (relaxed variant, "H1prime")
    (g(x,nu) - g(x',nu)) . (x - x') >= k' |x-x'|^2

and checks the mean-field smallness conditions under which the
measure-freezing iteration contracts.  The declared constants are user
metadata; probing verifies them on random samples only ("probed, not
proven") since global certification of black-box callbacks is
intractable.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .measure import EmpiricalMeasure

__all__ = [
    "LipschitzProfile",
    "MonotonicityProfile",
    "MfProblem",
    "MonotonicityReport",
    "ConditionReport",
    "eval_A",
    "check_H1",
    "check_smallness",
    "contraction_constants",
    "PiecewiseConstant",
    "as_path",
    "sup_spectral_norm",
    "problem_from_config",
]

H1 = "H1"
H1PRIME = "H1prime"
_VARIANTS = (H1, H1PRIME)


@dataclass(frozen=True)
class LipschitzProfile:
    """Common Lipschitz constants of (f, h, sigma) in u and in the measure,
    plus the terminal map's constants."""

    c_u: float
    c_nu: float
    c_g_x: float
    c_g_nu: float

    def __post_init__(self):
        for name in ("c_u", "c_nu", "c_g_x", "c_g_nu"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")


@dataclass(frozen=True)
class MonotonicityProfile:
    """Dissipativity constants: k for the operator bound, k' for the
    terminal monotonicity, and which variant they certify."""

    k: float
    k_prime: float
    variant: str = H1PRIME

    def __post_init__(self):
        if self.k <= 0 or self.k_prime <= 0:
            raise ValueError("k and k_prime must be positive")
        if self.variant not in _VARIANTS:
            raise ValueError(f"variant must be one of {_VARIANTS}, got {self.variant!r}")


@dataclass
class MfProblem:
    """Coefficient callbacks and metadata of one mean-field BFSDE.

    ``law_free_sigma`` marks the variant where sigma ignores the measure;
    the solver then uses the relaxed iteration (no delta-perturbation of
    the diffusion) and calls sigma with ``nu=None``.
    """

    dim_state: int
    dim_bm: int
    x0: np.ndarray
    horizon: float
    f: Callable
    sigma: Callable
    h: Callable
    g: Callable
    law_free_sigma: bool = False
    lipschitz: LipschitzProfile | None = None
    monotonicity: MonotonicityProfile | None = None

    def __post_init__(self):
        if self.dim_state < 1 or self.dim_bm < 1:
            raise ValueError("dim_state and dim_bm must be positive")
        if not (self.horizon > 0 and np.isfinite(self.horizon)):
            raise ValueError(f"horizon must be positive and finite, got {self.horizon}")
        x0 = np.atleast_1d(np.asarray(self.x0, dtype=float))
        if x0.shape != (self.dim_state,):
            raise ValueError(f"x0 must have shape ({self.dim_state},), got {x0.shape}")
        if not np.all(np.isfinite(x0)):
            raise ValueError("x0 must be finite")
        self.x0 = x0

    def spot_check(self, seed: int = 0) -> None:
        """Probe the callbacks on a small random batch.

        Verifies output shapes and finiteness, and (when ``law_free_sigma``)
        that sigma is insensitive to the measure argument, including
        ``nu=None``.  Raises ValueError on the first violation.
        """
        rng = np.random.default_rng(seed)
        m, d, batch = self.dim_state, self.dim_bm, 4
        x = rng.standard_normal((batch, m))
        y = rng.standard_normal((batch, m))
        z = rng.standard_normal((batch, m, d))
        nu_a = EmpiricalMeasure(rng.standard_normal((8, 2 * m)))
        nu_b = EmpiricalMeasure(rng.standard_normal((8, 2 * m)))
        mu = EmpiricalMeasure(rng.standard_normal((8, m)))
        t = 0.5 * self.horizon
        for name, out, want in (
            ("f", self.f(t, x, y, z, nu_a), (batch, m)),
            ("h", self.h(t, x, y, z, nu_a), (batch, m)),
            ("g", self.g(x, mu), (batch, m)),
        ):
            out = np.asarray(out)
            if out.shape != want:
                raise ValueError(f"{name} returned shape {out.shape}, expected {want}")
            if not np.all(np.isfinite(out)):
                raise ValueError(f"{name} returned non-finite values on finite inputs")
        sig_a = np.asarray(self.sigma(t, x, y, z, None if self.law_free_sigma else nu_a))
        if sig_a.shape != (batch, m, d):
            raise ValueError(f"sigma returned shape {sig_a.shape}, expected {(batch, m, d)}")
        if not np.all(np.isfinite(sig_a)):
            raise ValueError("sigma returned non-finite values on finite inputs")
        if self.law_free_sigma:
            for nu in (nu_a, nu_b):
                if not np.allclose(sig_a, np.asarray(self.sigma(t, x, y, z, nu)), atol=1e-12, rtol=0.0):
                    raise ValueError("law_free_sigma is set but sigma output depends on the measure")


def _unpack(u, m, d):
    x = np.asarray(u[0], dtype=float).reshape(m)
    y = np.asarray(u[1], dtype=float).reshape(m)
    z = np.asarray(u[2], dtype=float).reshape(m, d)
    return x, y, z


def eval_A(
    p: MfProblem,
    t: float,
    u: tuple,
    u_prime: tuple,
    nu: EmpiricalMeasure,
) -> float:
    """Dissipativity functional A(t, u, u', nu) at a single pair of points.

    ``u`` and ``u_prime`` are (x, y, z) triples with x, y of shape (m,)
    and z of shape (m, d); scalars are accepted when m = d = 1.  The
    sigma difference is contracted against z - z' column-wise.
    """
    m, d = p.dim_state, p.dim_bm
    x, y, z = _unpack(u, m, d)
    xp, yp, zp = _unpack(u_prime, m, d)
    X = np.stack([x, xp])
    Y = np.stack([y, yp])
    Z = np.stack([z, zp])
    fv = np.asarray(p.f(t, X, Y, Z, nu))
    hv = np.asarray(p.h(t, X, Y, Z, nu))
    sv = np.asarray(p.sigma(t, X, Y, Z, None if p.law_free_sigma else nu))
    a = float(np.dot(fv[0] - fv[1], y - yp))
    a += float(np.dot(hv[0] - hv[1], x - xp))
    a += float(np.sum((sv[0] - sv[1]) * (z - zp)))
    return a


@dataclass
class MonotonicityReport:
    """Outcome of randomized monotonicity probing (probed, not proven)."""

    variant: str
    samples: int
    k_declared: float
    k_prime_declared: float
    k_estimate: float
    k_prime_estimate: float
    margin_operator: float
    margin_terminal: float
    operator_ok: bool
    terminal_ok: bool
    passed: bool
    note: str = "probed on random samples, not proven"

    def to_dict(self) -> dict:
        return {
            "variant": self.variant,
            "samples": self.samples,
            "declared": {"k": self.k_declared, "k_prime": self.k_prime_declared},
            "estimates": {"k": self.k_estimate, "k_prime": self.k_prime_estimate},
            "margins": {"operator": self.margin_operator, "terminal": self.margin_terminal},
            "operator_ok": self.operator_ok,
            "terminal_ok": self.terminal_ok,
            "pass": self.passed,
            "note": self.note,
        }


def check_H1(p: MfProblem, samples: int = 4000, rng_seed: int = 0) -> MonotonicityReport:
    """Probe the dissipativity bounds on random (t, u, u', nu) draws.

    Probe distribution: u, u', x, x' standard Gaussian; nu a Gaussian
    cloud of 64 points; t uniform on [0, horizon] (the bounds are only
    required there).  Exact for affine coefficients, heuristic otherwise.
    A failed check is a report, not an error.
    """
    if samples < 1:
        raise ValueError("samples must be >= 1")
    m, d = p.dim_state, p.dim_bm
    variant = p.monotonicity.variant if p.monotonicity is not None else (H1PRIME if p.law_free_sigma else H1)
    k_dec = p.monotonicity.k if p.monotonicity is not None else 0.0
    kp_dec = p.monotonicity.k_prime if p.monotonicity is not None else 0.0
    rng = np.random.default_rng(rng_seed)

    group = 32
    k_est = math.inf
    kp_est = math.inf
    margin_op = math.inf
    margin_g = math.inf
    done = 0
    while done < samples:
        b = min(group, samples - done)
        t = float(rng.uniform(0.0, p.horizon))
        nu = EmpiricalMeasure(rng.standard_normal((64, 2 * m)))
        x, xp = rng.standard_normal((2, b, m))
        y, yp = rng.standard_normal((2, b, m))
        z, zp = rng.standard_normal((2, b, m, d))
        fv = np.asarray(p.f(t, x, y, z, nu)) - np.asarray(p.f(t, xp, yp, zp, nu))
        hv = np.asarray(p.h(t, x, y, z, nu)) - np.asarray(p.h(t, xp, yp, zp, nu))
        nu_sig = None if p.law_free_sigma else nu
        sv = np.asarray(p.sigma(t, x, y, z, nu_sig)) - np.asarray(p.sigma(t, xp, yp, zp, nu_sig))
        a_vals = np.sum(fv * (y - yp), axis=1) + np.sum(hv * (x - xp), axis=1)
        a_vals += np.sum(sv * (z - zp), axis=(1, 2))
        denom = np.sum((x - xp) ** 2, axis=1) + np.sum((y - yp) ** 2, axis=1)
        if variant == H1:
            denom = denom + np.sum((z - zp) ** 2, axis=(1, 2))
        ok = denom > 1e-14
        k_est = min(k_est, float(np.min(-a_vals[ok] / denom[ok])))
        margin_op = min(margin_op, float(np.min(-a_vals - k_dec * denom)))

        xg, xgp = rng.standard_normal((2, b, m))
        mu = EmpiricalMeasure(rng.standard_normal((64, m)))
        gdiff = np.asarray(p.g(xg, mu)) - np.asarray(p.g(xgp, mu))
        gval = np.sum(gdiff * (xg - xgp), axis=1)
        gden = np.sum((xg - xgp) ** 2, axis=1)
        okg = gden > 1e-14
        kp_est = min(kp_est, float(np.min(gval[okg] / gden[okg])))
        margin_g = min(margin_g, float(np.min(gval - kp_dec * gden)))
        done += b

    tol = 1e-10
    operator_ok = margin_op >= -tol and k_est > 0
    terminal_ok = margin_g >= -tol and kp_est > 0
    return MonotonicityReport(
        variant=variant,
        samples=samples,
        k_declared=k_dec,
        k_prime_declared=kp_dec,
        k_estimate=k_est,
        k_prime_estimate=kp_est,
        margin_operator=margin_op,
        margin_terminal=margin_g,
        operator_ok=operator_ok,
        terminal_ok=terminal_ok,
        passed=operator_ok and terminal_ok,
    )


@dataclass
class ConditionReport:
    """Smallness condition on the mean-field Lipschitz constants."""

    variant: str
    regime: str
    bound: float
    c_nu: float
    c_g_nu: float
    k: float
    k_prime: float
    margin_c_nu: float
    margin_c_g_nu: float
    passed: bool

    def to_dict(self) -> dict:
        return {
            "variant": self.variant,
            "regime": self.regime,
            "bound": self.bound,
            "constants": {"C_nu": self.c_nu, "C_g_nu": self.c_g_nu, "k": self.k, "k_prime": self.k_prime},
            "margins": {"C_nu": self.margin_c_nu, "C_g_nu": self.margin_c_g_nu},
            "pass": self.passed,
        }


def smallness_bound(mono: MonotonicityProfile) -> float:
    """Admissible strict upper bound for C_nu and C_g_nu under the variant."""
    if mono.variant == H1:
        return min((math.sqrt(3.0) - 1.0) * mono.k_prime, math.sqrt(3.0) / 3.0 * mono.k)
    return min(2.0 * (math.sqrt(2.0) - 1.0) * mono.k_prime, math.sqrt(2.0) / 2.0 * mono.k)


def check_smallness(prof: LipschitzProfile, mono: MonotonicityProfile) -> ConditionReport:
    """Check C_g_nu, C_nu < bound(k, k') for the declared variant.

    The strong variant's bound is min{(sqrt3 - 1) k', (sqrt3/3) k}; the
    relaxed (law-free sigma) variant's is min{2(sqrt2 - 1) k', (sqrt2/2) k}.
    """
    bound = smallness_bound(mono)
    margin_nu = bound - prof.c_nu
    margin_g = bound - prof.c_g_nu
    return ConditionReport(
        variant=mono.variant,
        regime="strong" if mono.variant == H1 else "relaxed",
        bound=bound,
        c_nu=prof.c_nu,
        c_g_nu=prof.c_g_nu,
        k=mono.k,
        k_prime=mono.k_prime,
        margin_c_nu=margin_nu,
        margin_c_g_nu=margin_g,
        passed=margin_nu > 0 and margin_g > 0,
    )


def contraction_constants(
    prof: LipschitzProfile,
    mono: MonotonicityProfile,
    eps: float = 1.0,
    alpha: float | None = None,
    rho: float = 1.0,
    delta: float = 1e-3,
) -> tuple[float, float]:
    """Contraction pair (lambda, theta) of the frozen-measure iteration.

    The outer iteration's Cauchy gaps satisfy gap(n+1) <= (theta/lambda)
    gap(n); the scheme contracts when theta < lambda.  For the relaxed
    variant

        lambda = min{k' - C_g_nu eps/2, delta/2 + k - C_nu/(2 alpha)}
        theta  = max{C_g_nu/(2 eps),   delta/2 + alpha C_nu}

    and for the strong variant

        lambda = min{k' - C_g_nu eps/2, k - C_nu/(2 alpha),
                     delta (1 - rho/2) + k - C_nu/(2 alpha)}
        theta  = max{C_g_nu/(2 eps), delta/(2 rho) + 3 alpha C_nu/2}.

    ``alpha`` defaults to the variant's optimizer (sqrt2/2 or sqrt3/3).
    """
    if alpha is None:
        alpha = math.sqrt(2.0) / 2.0 if mono.variant == H1PRIME else math.sqrt(3.0) / 3.0
    if eps <= 0 or alpha <= 0 or rho <= 0 or delta <= 0:
        raise ValueError("eps, alpha, rho and delta must be positive")
    k, kp = mono.k, mono.k_prime
    if mono.variant == H1PRIME:
        lam = min(kp - prof.c_g_nu * eps / 2.0, delta / 2.0 + k - prof.c_nu / (2.0 * alpha))
        theta = max(prof.c_g_nu / (2.0 * eps), delta / 2.0 + alpha * prof.c_nu)
    else:
        lam = min(
            kp - prof.c_g_nu * eps / 2.0,
            k - prof.c_nu / (2.0 * alpha),
            delta * (1.0 - rho / 2.0) + k - prof.c_nu / (2.0 * alpha),
        )
        theta = max(prof.c_g_nu / (2.0 * eps), delta / (2.0 * rho) + 3.0 * alpha * prof.c_nu / 2.0)
    return lam, theta


# ---------------------------------------------------------------------------
# deterministic coefficient paths and config-file problems
# ---------------------------------------------------------------------------


class PiecewiseConstant:
    """Deterministic piecewise-constant path t -> matrix/vector.

    ``breakpoints`` are the left endpoints of the pieces (first one must
    be <= 0 so the path is total on [0, T]); queries below the first
    breakpoint clamp to the first piece.
    """

    def __init__(self, breakpoints: Sequence[float], values: Sequence):
        bp = np.asarray(breakpoints, dtype=float)
        if bp.ndim != 1 or bp.size == 0:
            raise ValueError("breakpoints must be a nonempty 1-D sequence")
        if np.any(np.diff(bp) <= 0):
            raise ValueError("breakpoints must be strictly increasing")
        vals = np.asarray(values, dtype=float)
        if vals.shape[0] != bp.size:
            raise ValueError("one value per breakpoint required")
        self.breakpoints = bp
        self.values = vals

    def __call__(self, t: float) -> np.ndarray:
        idx = int(np.searchsorted(self.breakpoints, t, side="right")) - 1
        return self.values[max(idx, 0)]

    @property
    def is_constant(self) -> bool:
        return self.values.shape[0] == 1


def as_path(spec) -> Callable[[float], np.ndarray]:
    """Coerce a coefficient spec to a callable path t -> ndarray.

    Accepts a callable (returned as is), a :class:`PiecewiseConstant`, a
    scalar/array (constant path), or the config-file forms
    ``{"const": value}`` and ``{"piecewise": [{"t_from": t0, "value": v0}, ...]}``.
    """
    if isinstance(spec, PiecewiseConstant):
        return spec
    if callable(spec):
        return spec
    if isinstance(spec, dict):
        if "const" in spec:
            return PiecewiseConstant([0.0], [np.asarray(spec["const"], dtype=float)])
        if "piecewise" in spec:
            pieces = sorted(spec["piecewise"], key=lambda p: float(p["t_from"]))
            if not pieces:
                raise ValueError("piecewise spec must contain at least one piece")
            bp = [float(p["t_from"]) for p in pieces]
            vals = [np.asarray(p.get("value", p.get("matrix")), dtype=float) for p in pieces]
            if any(v is None for v in vals):
                raise ValueError("each piece needs a 'value' (or 'matrix') entry")
            return PiecewiseConstant(bp, vals)
        raise ValueError(f"coefficient dict must contain 'const' or 'piecewise', got keys {sorted(spec)}")
    return PiecewiseConstant([0.0], [np.asarray(spec, dtype=float)])


def sup_spectral_norm(path, horizon: float, samples: int = 257) -> float:
    """Sup over [0, horizon] of the spectral norm of a matrix/vector path.

    Exact for piecewise-constant paths; sampled on a uniform grid for
    general callables.
    """
    if isinstance(path, PiecewiseConstant):
        return max(float(np.linalg.norm(np.atleast_2d(v), 2)) for v in path.values)
    ts = np.linspace(0.0, horizon, samples)
    return max(float(np.linalg.norm(np.atleast_2d(np.asarray(path(t), dtype=float)), 2)) for t in ts)


def _coerce_matrix(value: np.ndarray, rows: int, cols: int, name: str) -> np.ndarray:
    arr = np.asarray(value, dtype=float)
    if arr.ndim == 0:
        if rows == cols == 1:
            return arr.reshape(1, 1)
        if rows == cols:
            return float(arr) * np.eye(rows)
        raise ValueError(f"{name}: scalar given for a {rows}x{cols} coefficient")
    if arr.shape != (rows, cols):
        raise ValueError(f"{name}: expected shape ({rows}, {cols}), got {arr.shape}")
    return arr


def _coerce_vector(value: np.ndarray, n: int, name: str) -> np.ndarray:
    arr = np.asarray(value, dtype=float)
    if arr.ndim == 0:
        return np.full(n, float(arr))
    arr = arr.reshape(-1)
    if arr.shape != (n,):
        raise ValueError(f"{name}: expected shape ({n},), got {arr.shape}")
    return arr


def _shaped_path(spec, name: str, coerce) -> Callable[[float], np.ndarray] | None:
    if spec is None:
        return None
    path = as_path(spec)
    if isinstance(path, PiecewiseConstant):
        path.values = np.stack([coerce(v, name) for v in path.values])
        return path

    def shaped(t, _p=path, _c=coerce, _n=name):
        return _c(np.asarray(_p(t), dtype=float), _n)

    return shaped


def _affine_rhs(terms: dict, m: int, name: str):
    """Build a drift/driver callback from affine term paths.

    Recognized keys: x, y, z (matrix paths applied to the respective
    argument), mean_x, mean_y (matrix paths applied to the measure's
    marginal means) and const (vector path).  The z coupling assumes a
    one-dimensional Brownian motion (z is treated as an m-vector).
    """
    mat = lambda v, nm: _coerce_matrix(v, m, m, nm)
    vec = lambda v, nm: _coerce_vector(v, m, nm)
    px = _shaped_path(terms.get("x"), f"{name}.x", mat)
    py = _shaped_path(terms.get("y"), f"{name}.y", mat)
    pz = _shaped_path(terms.get("z"), f"{name}.z", mat)
    pmx = _shaped_path(terms.get("mean_x"), f"{name}.mean_x", mat)
    pmy = _shaped_path(terms.get("mean_y"), f"{name}.mean_y", mat)
    pc = _shaped_path(terms.get("const"), f"{name}.const", vec)

    def rhs(t, x, y, z, nu):
        out = np.zeros_like(x)
        if px is not None:
            out = out + x @ px(t).T
        if py is not None:
            out = out + y @ py(t).T
        if pz is not None:
            out = out + z[:, :, 0] @ pz(t).T
        if pmx is not None or pmy is not None:
            mu = nu.mean()
            if pmx is not None:
                out = out + pmx(t) @ mu[:m]
            if pmy is not None:
                out = out + pmy(t) @ mu[m:]
        if pc is not None:
            out = out + pc(t)
        return out

    return rhs


def problem_from_config(cfg: dict) -> MfProblem:
    """Build an affine MfProblem from a config dict (JSON schema).

    Schema::

        {"kind": "problem", "dim": m, "horizon": T, "x0": [...],
         "f": {"x"|"y"|"z"|"mean_x"|"mean_y"|"const": coeff, ...},
         "h": {...}, "sigma": {"x"|"y"|"z"|"const": coeff, ...},
         "g": {"x"|"mean_x"|"const": coeff, ...},
         "lipschitz": {"c_u":, "c_nu":, "c_g_x":, "c_g_nu":},      # optional
         "monotonicity": {"k":, "k_prime":, "variant":}}           # optional

    where each coeff is a number, a matrix, ``{"const": ...}`` or
    ``{"piecewise": [{"t_from":, "value":}, ...]}``.  Config problems are
    restricted to a one-dimensional Brownian motion and a law-free sigma;
    anything richer needs library callbacks.
    """
    if cfg.get("kind", "problem") != "problem":
        raise ValueError(f"expected a problem config, got kind={cfg.get('kind')!r}")
    for key in ("dim", "horizon", "x0"):
        if key not in cfg:
            raise ValueError(f"problem config is missing required field {key!r}")
    m = int(cfg["dim"])
    horizon = float(cfg["horizon"])
    x0 = _coerce_vector(np.asarray(cfg["x0"], dtype=float), m, "x0")

    f_terms = cfg.get("f", {})
    h_terms = cfg.get("h", {})
    s_terms = dict(cfg.get("sigma", {}))
    g_terms = cfg.get("g", {})
    for bad in ("mean_x", "mean_y"):
        if bad in s_terms:
            raise ValueError("config sigma must be law-free; measure terms are not allowed")
    unknown = set(g_terms) - {"x", "mean_x", "const"}
    if unknown:
        raise ValueError(f"g supports keys x, mean_x, const; got {sorted(unknown)}")

    f_cb = _affine_rhs(f_terms, m, "f")
    h_cb = _affine_rhs(h_terms, m, "h")
    s_core = _affine_rhs(s_terms, m, "sigma")

    def sigma_cb(t, x, y, z, nu):
        return s_core(t, x, y, z, nu)[:, :, None]

    gx = _coerce_matrix(np.asarray(g_terms["x"], dtype=float), m, m, "g.x") if "x" in g_terms else None
    gm = _coerce_matrix(np.asarray(g_terms["mean_x"], dtype=float), m, m, "g.mean_x") if "mean_x" in g_terms else None
    gc = _coerce_vector(np.asarray(g_terms["const"], dtype=float), m, "g.const") if "const" in g_terms else None

    def g_cb(x, mu):
        out = np.zeros_like(x)
        if gx is not None:
            out = out + x @ gx.T
        if gm is not None:
            out = out + gm @ mu.mean()
        if gc is not None:
            out = out + gc
        return out

    lip = None
    if "lipschitz" in cfg:
        lc = cfg["lipschitz"]
        lip = LipschitzProfile(
            c_u=float(lc["c_u"]), c_nu=float(lc["c_nu"]),
            c_g_x=float(lc["c_g_x"]), c_g_nu=float(lc["c_g_nu"]),
        )
    mono = None
    if "monotonicity" in cfg:
        mc = cfg["monotonicity"]
        mono = MonotonicityProfile(
            k=float(mc["k"]), k_prime=float(mc["k_prime"]),
            variant=str(mc.get("variant", H1PRIME)),
        )

    return MfProblem(
        dim_state=m,
        dim_bm=1,
        x0=x0,
        horizon=horizon,
        f=f_cb,
        sigma=sigma_cb,
        h=h_cb,
        g=g_cb,
        law_free_sigma=True,
        lipschitz=lip,
        monotonicity=mono,
    )
