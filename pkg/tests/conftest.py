import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from mfbsde.problem import LipschitzProfile, MfProblem, MonotonicityProfile


def h1prime_toy(horizon: float = 0.25) -> MfProblem:
    """1-D relaxed-monotonicity problem with k = k' = 1 and mean-field
    Lipschitz constants C_nu = C_g_nu = 0.1 (passes the smallness gate).

    f = -y + 0.1 E[xi_1], h = -x - 0.3 z + 0.1 E[xi_2],
    sigma = 0.3 x + 0.2 (law-free), g = x + 0.1 E[mu]; the -0.3 z term in
    h cancels the sigma/z coupling in the dissipativity functional, so
    A(t, u, u', nu) = -|dx|^2 - |dy|^2 exactly.
    """

    def f(t, x, y, z, nu):
        return -y + 0.1 * nu.mean()[0]

    def h(t, x, y, z, nu):
        return -x - 0.3 * z[:, :, 0] + 0.1 * nu.mean()[1]

    def sigma(t, x, y, z, nu):
        return (0.3 * x + 0.2)[:, :, None]

    def g(x, mu):
        return x + 0.1 * mu.mean()

    return MfProblem(
        dim_state=1,
        dim_bm=1,
        x0=[1.0],
        horizon=horizon,
        f=f,
        sigma=sigma,
        h=h,
        g=g,
        law_free_sigma=True,
        lipschitz=LipschitzProfile(c_u=1.0, c_nu=0.1, c_g_x=1.0, c_g_nu=0.1),
        monotonicity=MonotonicityProfile(k=1.0, k_prime=1.0, variant="H1prime"),
    )


def pure_martingale(x0: float = 0.7, horizon: float = 1.0) -> MfProblem:
    """Zero-driver problem whose backward solution is Y_t = E[X_T | F_t]."""
    return MfProblem(
        dim_state=1,
        dim_bm=1,
        x0=[x0],
        horizon=horizon,
        f=lambda t, x, y, z, nu: np.zeros_like(x),
        sigma=lambda t, x, y, z, nu: np.ones((x.shape[0], 1, 1)),
        h=lambda t, x, y, z, nu: np.zeros_like(x),
        g=lambda x, mu: x,
        law_free_sigma=True,
    )


@pytest.fixture
def toy_problem():
    return h1prime_toy()


@pytest.fixture
def martingale_problem():
    return pure_martingale()
