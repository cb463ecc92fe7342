import numpy as np
import pytest

from qsdelab.models import SdeProblem


def zero_drift_problem(N=1, sigma_b=1.0, T=1.0, x0=None):
    """Pure-noise problem (drift identically zero, tiny declared bounds)."""
    a = np.zeros((N, N))
    b = sigma_b * np.eye(N)
    if x0 is None:
        x0 = np.ones(N)
    return SdeProblem(
        N=N, m=N, T=T, drift=lambda t: a, diffusion=lambda t: b, x0=x0,
        alpha_A=1e-9, eta=1e-9, sigma=sigma_b, kappa_BBT=1.0,
        name="pure-noise", drift_const=a, diffusion_const=b,
        drift_diag_poly=np.zeros((N, 1)),
    )


def zero_noise_problem(N=1, theta=1.0, T=1.0, x0=None):
    """Deterministic decay (diffusion identically zero rows are not allowed
    by the full-rank checks, so sigma is declared tiny instead)."""
    a = -theta * np.eye(N)
    b = np.zeros((N, N))
    if x0 is None:
        x0 = np.ones(N)
    return SdeProblem(
        N=N, m=N, T=T, drift=lambda t: a, diffusion=lambda t: b, x0=x0,
        alpha_A=theta, eta=theta, sigma=1e-9, kappa_BBT=np.inf,
        name="pure-drift", drift_const=a, diffusion_const=b,
        drift_diag_poly=np.array([[-theta]] * N),
    )


def nonnormal_tdep_problem():
    """Non-commuting, time-dependent drift exercising the generic series
    path (no structural metadata declared)."""

    def drift(t):
        return np.array([[-1.0 - 0.3 * t, 0.4 + 0.1 * t],
                         [-0.2, -1.5 + 0.2 * t]])

    return SdeProblem(
        N=2, m=2, T=1.0, drift=drift, diffusion=lambda t: np.eye(2),
        x0=[1.0, 0.0], alpha_A=2.1, eta=0.7, sigma=1.0, kappa_BBT=1.0,
        alpha_dA=0.5, name="nonnormal-tdep",
    )


@pytest.fixture
def pure_noise():
    return zero_drift_problem()


@pytest.fixture
def nonnormal_tdep():
    return nonnormal_tdep_problem()
