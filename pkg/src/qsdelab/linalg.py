"""Dense real matrix kernels shared by every other module.

All routines take and return plain ``numpy`` arrays in double precision and
reject non-finite input.  Reductions run in a fixed order so that repeated
runs are bitwise identical.
"""

from __future__ import annotations

import numpy as np
import scipy.linalg


class NotPsdError(ValueError):
    """Matrix has an eigenvalue below the allowed tolerance."""


class SingularMatrixError(ValueError):
    """Smallest singular value is numerically zero."""


def _as_matrix(m) -> np.ndarray:
    a = np.asarray(m, dtype=float)
    if a.ndim != 2 or a.shape[0] < 1 or a.shape[1] < 1:
        raise ValueError(f"expected a 2-d matrix, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError("matrix has non-finite entries")
    return a


def _as_square(m) -> np.ndarray:
    a = _as_matrix(m)
    if a.shape[0] != a.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {a.shape}")
    return a


def spectral_norm(m) -> float:
    """Largest singular value."""
    a = _as_matrix(m)
    return float(np.linalg.svd(a, compute_uv=False)[0])


def log_norm(m) -> float:
    """Logarithmic norm for the spectral norm: lambda_max((m + m^T)/2)."""
    a = _as_square(m)
    sym = 0.5 * (a + a.T)
    return float(np.linalg.eigvalsh(sym)[-1])


def matrix_exp(m) -> np.ndarray:
    """Matrix exponential (scaling-and-squaring with a Pade core)."""
    a = _as_square(m)
    return scipy.linalg.expm(a)


def sqrt_psd(m, tol: float = 1e-10) -> np.ndarray:
    """Symmetric square root of a PSD matrix.

    Eigenvalues in [-tol, 0) are clamped to zero; anything below -tol is a
    genuine violation and raises.  Asymmetry beyond ``tol`` is rejected.
    """
    a = _as_square(m)
    asym = float(np.max(np.abs(a - a.T))) if a.size else 0.0
    if asym > tol:
        raise ValueError(f"matrix asymmetry {asym:.3e} exceeds tolerance {tol:.3e}")
    sym = 0.5 * (a + a.T)
    w, v = np.linalg.eigh(sym)
    if w[0] < -tol:
        raise NotPsdError(f"eigenvalue {w[0]:.3e} below -{tol:.3e}")
    w = np.clip(w, 0.0, None)
    root = (v * np.sqrt(w)) @ v.T
    return 0.5 * (root + root.T)


def condition_number(m) -> float:
    """Ratio of the largest to the smallest singular value."""
    a = _as_square(m)
    s = np.linalg.svd(a, compute_uv=False)
    if s[-1] <= 1e-14 * s[0]:
        raise SingularMatrixError(
            f"smallest singular value {s[-1]:.3e} is below 1e-14 * {s[0]:.3e}"
        )
    return float(s[0] / s[-1])


def inverse_norm(m) -> float:
    """Spectral norm of the inverse, computed as 1/sigma_min."""
    a = _as_square(m)
    s = np.linalg.svd(a, compute_uv=False)
    if s[-1] <= 1e-14 * s[0]:
        raise SingularMatrixError("matrix is numerically singular")
    return float(1.0 / s[-1])
