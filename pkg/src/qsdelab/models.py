"""Linear SDE problems dX = A(t) X dt + B(t) dW and their ground-truth oracles.

A problem carries the declared bound constants (drift norm, dissipation
rate, diffusion norm, eigenvalue-range ratio of B B^T, derivative bounds)
next to the coefficient maps, plus structural metadata (constant drift,
diagonal polynomial drift, constant diffusion) that lets downstream code
pick exact fast paths.  The oracles here are deliberately independent of
the series machinery they are later used to judge: the propagator comes
from RK4 on the defining matrix ODE, the per-step noise covariance from
Gauss-Legendre quadrature.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace
from typing import Callable, Optional

import numpy as np

from .linalg import log_norm, matrix_exp, spectral_norm


class InvalidIntervalError(ValueError):
    """Interval endpoints are out of order or outside [0, T]."""


@dataclass(frozen=True)
class SdeProblem:
    N: int
    m: int
    T: float
    drift: Callable[[float], np.ndarray]
    diffusion: Callable[[float], np.ndarray]
    x0: np.ndarray
    alpha_A: float
    eta: float
    sigma: float
    kappa_BBT: float
    alpha_dA: float = 0.0
    alpha_dBBT: float = 0.0
    name: str = "custom"
    # structural metadata enabling exact fast paths
    drift_const: Optional[np.ndarray] = None
    drift_diag_poly: Optional[np.ndarray] = None  # (N, deg+1), low-to-high
    diffusion_const: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.N < 1 or not 1 <= self.m <= self.N:
            raise ValueError("need N >= 1 and 1 <= m <= N")
        if self.T <= 0 or self.eta <= 0:
            raise ValueError("need T > 0 and eta > 0")
        if self.eta > self.alpha_A + 1e-12:
            raise ValueError("eta cannot exceed alpha_A")
        object.__setattr__(self, "x0", np.asarray(self.x0, dtype=float).reshape(self.N))

    def a_at(self, t: float) -> np.ndarray:
        if self.drift_const is not None:
            return self.drift_const
        return np.asarray(self.drift(t), dtype=float)

    def b_at(self, t: float) -> np.ndarray:
        if self.diffusion_const is not None:
            return self.diffusion_const
        return np.asarray(self.diffusion(t), dtype=float)

    def bbt_at(self, t: float) -> np.ndarray:
        b = self.b_at(t)
        return b @ b.T

    @property
    def dyson_capable(self) -> bool:
        """Full-rank B B^T with a declared eigenvalue-range ratio."""
        return self.m == self.N and math.isfinite(self.kappa_BBT)


@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid t_n = n*dt with an optional M-fold sub-grid."""

    T: float
    r: int
    M: int = 1

    def __post_init__(self):
        if self.r < 1 or self.M < 1:
            raise ValueError("need r >= 1 and M >= 1")

    @property
    def dt(self) -> float:
        return self.T / self.r

    @property
    def delta_t(self) -> float:
        return self.dt / self.M

    def t(self, n: int) -> float:
        return self.T if n == self.r else n * self.dt

    def s(self, n: int, j: int) -> float:
        return self.t(n) + j * self.delta_t

    def tau(self, n: int, j: int, l: int) -> float:
        s = self.s(n, j)
        return s + l * (self.t(n + 1) - s) / self.M


# --- bound validation ------------------------------------------------------

@dataclass(frozen=True)
class BoundCheck:
    name: str
    measured: float
    declared: float
    passed: bool


@dataclass(frozen=True)
class BoundReport:
    model: str
    checks: tuple

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)


def validate_bounds(p: SdeProblem, samples: int = 33) -> BoundReport:
    """Sample the coefficient maps on a grid and compare against the
    declared constants.  Violations are reported, not raised."""
    if samples < 2:
        raise ValueError("need at least 2 sample points")
    slack = 1e-9
    ts = np.linspace(0.0, p.T, samples)
    max_norm_a = max(spectral_norm(p.a_at(t)) for t in ts)
    max_mu = max(log_norm(p.a_at(t)) for t in ts)
    checks = [
        BoundCheck("max ||A(t)|| <= alpha_A", max_norm_a, p.alpha_A,
                   bool(max_norm_a <= p.alpha_A + slack)),
        BoundCheck("max mu(A(t)) <= -eta", max_mu, -p.eta,
                   bool(max_mu <= -p.eta + slack)),
    ]
    eigs = np.concatenate([np.linalg.eigvalsh(p.bbt_at(t)) for t in ts])
    checks.append(BoundCheck("max eig(BB^T) <= sigma^2", float(eigs.max()),
                             p.sigma ** 2, bool(eigs.max() <= p.sigma ** 2 + slack)))
    if p.dyson_capable:
        floor = p.sigma ** 2 / p.kappa_BBT
        checks.append(BoundCheck("min eig(BB^T) >= sigma^2/kappa", float(eigs.min()),
                                 floor, bool(eigs.min() >= floor - slack)))
    return BoundReport(p.name, tuple(checks))


def pad_to_power_of_two(p: SdeProblem) -> SdeProblem:
    """Extend the state dimension to the next power of two.

    Dummy components evolve as dX = -eta X dt with zero initial value and
    zero diffusion rows, so they stay exactly 0 and the dissipation bound
    mu(A) <= -eta survives the padding.  The padded B B^T is rank
    deficient, which rules out the full-rank covariance route.
    """
    n2 = 1 << (p.N - 1).bit_length()
    if n2 == p.N:
        return p
    pad = n2 - p.N
    eta = p.eta

    def drift(t: float, _inner=p.drift, _n=p.N, _pad=pad, _eta=eta) -> np.ndarray:
        a = np.zeros((_n + _pad, _n + _pad))
        a[:_n, :_n] = _inner(t)
        a[_n:, _n:] = -_eta * np.eye(_pad)
        return a

    def diffusion(t: float, _inner=p.diffusion, _n=p.N, _pad=pad, _m=p.m) -> np.ndarray:
        b = np.zeros((_n + _pad, _m))
        b[:_n, :] = _inner(t)
        return b

    drift_const = None
    if p.drift_const is not None:
        drift_const = np.zeros((n2, n2))
        drift_const[:p.N, :p.N] = p.drift_const
        drift_const[p.N:, p.N:] = -eta * np.eye(pad)
    diag_poly = None
    if p.drift_diag_poly is not None:
        deg1 = p.drift_diag_poly.shape[1]
        diag_poly = np.zeros((n2, deg1))
        diag_poly[:p.N] = p.drift_diag_poly
        diag_poly[p.N:, 0] = -eta
    diff_const = None
    if p.diffusion_const is not None:
        diff_const = np.zeros((n2, p.m))
        diff_const[:p.N] = p.diffusion_const

    return replace(
        p, N=n2, drift=drift, diffusion=diffusion,
        x0=np.concatenate([p.x0, np.zeros(pad)]),
        kappa_BBT=math.inf, name=p.name + "-padded",
        drift_const=drift_const, drift_diag_poly=diag_poly,
        diffusion_const=diff_const,
    )


# --- propagator and covariance oracles -------------------------------------

def _check_interval(p: SdeProblem, s: float, t: float):
    if s > t:
        raise InvalidIntervalError(f"need s <= t, got s={s}, t={t}")


def exact_phi(p: SdeProblem, s: float, t: float, steps: int = 256) -> np.ndarray:
    """Time evolution operator Phi(t, s), RK4 on dPhi/dt = A(t) Phi.

    Constant drift short-circuits to the matrix exponential.
    """
    _check_interval(p, s, t)
    if t == s:
        return np.eye(p.N)
    if p.drift_const is not None:
        return matrix_exp(p.drift_const * (t - s))
    h = (t - s) / steps
    phi = np.eye(p.N)
    for k in range(steps):
        tk = s + k * h
        k1 = p.a_at(tk) @ phi
        k2 = p.a_at(tk + 0.5 * h) @ (phi + 0.5 * h * k1)
        k3 = p.a_at(tk + 0.5 * h) @ (phi + 0.5 * h * k2)
        k4 = p.a_at(tk + h) @ (phi + h * k3)
        phi = phi + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
    return phi


def phi_endpoint_profile(p: SdeProblem, s_values: np.ndarray, t_end: float,
                         min_steps: int = 64) -> np.ndarray:
    """Phi(t_end, s) for every s in ascending ``s_values``, via one backward
    RK4 sweep of dPhi/ds = -Phi A(s) from s = t_end.

    One pass costs the same as a single propagator solve, which makes
    max-over-subgrid error measurements affordable.
    """
    s_values = np.asarray(s_values, dtype=float)
    if s_values.size == 0:
        return np.empty((0, p.N, p.N))
    if np.any(np.diff(s_values) < 0) or s_values[-1] > t_end + 1e-12:
        raise InvalidIntervalError("s_values must ascend and stay below t_end")
    span = t_end - s_values[0]
    h_max = span / min_steps if span > 0 else 1.0
    h_max = min(h_max, 0.05 / max(p.alpha_A, 1e-12))

    out = np.empty((s_values.size, p.N, p.N))
    phi = np.eye(p.N)
    s_cur = t_end
    for idx in range(s_values.size - 1, -1, -1):
        target = s_values[idx]
        gap = s_cur - target
        if gap > 0:
            nsub = max(1, int(math.ceil(gap / h_max)))
            h = gap / nsub
            for _ in range(nsub):
                k1 = -phi @ p.a_at(s_cur)
                k2 = -(phi - 0.5 * h * k1) @ p.a_at(s_cur - 0.5 * h)
                k3 = -(phi - 0.5 * h * k2) @ p.a_at(s_cur - 0.5 * h)
                k4 = -(phi - h * k3) @ p.a_at(s_cur - h)
                phi = phi - (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
                s_cur -= h
            s_cur = target
        out[idx] = phi
    return out


_GL_CACHE: dict = {}


def _gl_nodes(n: int):
    if n not in _GL_CACHE:
        _GL_CACHE[n] = np.polynomial.legendre.leggauss(n)
    return _GL_CACHE[n]


def exact_sigma(p: SdeProblem, s: float, t: float, quad_points: int = 32) -> np.ndarray:
    """Noise covariance over [s, t]:
    integral of Phi(t,tau) B(tau) B^T(tau) Phi^T(t,tau) dtau,
    composite Gauss-Legendre with ``quad_points`` nodes per panel."""
    _check_interval(p, s, t)
    if t == s:
        return np.zeros((p.N, p.N))
    span = t - s
    panels = max(1, int(math.ceil(span * p.alpha_A / 0.5)))
    x, w = _gl_nodes(quad_points)
    taus, weights = [], []
    for k in range(panels):
        a = s + span * k / panels
        b = s + span * (k + 1) / panels
        taus.append(0.5 * (b - a) * x + 0.5 * (a + b))
        weights.append(0.5 * (b - a) * w)
    taus = np.concatenate(taus)
    weights = np.concatenate(weights)
    order = np.argsort(taus, kind="stable")
    phis = phi_endpoint_profile(p, taus[order], t)
    sig = np.zeros((p.N, p.N))
    for pos, tau_idx in enumerate(order):
        tau = taus[tau_idx]
        phi = phis[pos]
        core = phi @ p.bbt_at(tau) @ phi.T
        sig = sig + weights[tau_idx] * core
    return 0.5 * (sig + sig.T)


def ou_analytic_moments(theta: float, sigma_b: float, x0: float, t: float):
    """Mean and variance of the scalar mean-reverting process at time t."""
    if theta <= 0:
        raise ValueError("theta must be positive")
    mean = math.exp(-theta * t) * x0
    var = sigma_b ** 2 * (1.0 - math.exp(-2.0 * theta * t)) / (2.0 * theta)
    return mean, var


def ou_analytic_second_moment(theta: float, sigma_b: float, x0: float, t: float) -> float:
    mean, var = ou_analytic_moments(theta, sigma_b, x0, t)
    return mean ** 2 + var


# --- built-in model library -------------------------------------------------

def scalar_ou(theta: float = 1.0, sigma_b: float = 1.0, x0: float = 1.0,
              T: float = 1.0) -> SdeProblem:
    a = np.array([[-theta]])
    b = np.array([[sigma_b]])
    return SdeProblem(
        N=1, m=1, T=T, drift=lambda t: a, diffusion=lambda t: b, x0=[x0],
        alpha_A=theta, eta=theta, sigma=sigma_b, kappa_BBT=1.0,
        name="ou", drift_const=a, diffusion_const=b,
        drift_diag_poly=np.array([[-theta]]),
    )


def diagonal_ou(thetas=(1.0, 1.3, 1.6, 2.0), sigmas=(1.0, 0.9, 0.8, 0.7),
                x0=None, T: float = 1.0) -> SdeProblem:
    thetas = np.asarray(thetas, dtype=float)
    sigmas = np.asarray(sigmas, dtype=float)
    n = thetas.size
    if x0 is None:
        x0 = np.ones(n)
    a = np.diag(-thetas)
    b = np.diag(sigmas)
    sig = float(sigmas.max())
    kappa = float((sigmas.max() / sigmas.min()) ** 2)
    return SdeProblem(
        N=n, m=n, T=T, drift=lambda t: a, diffusion=lambda t: b, x0=x0,
        alpha_A=float(thetas.max()), eta=float(thetas.min()), sigma=sig,
        kappa_BBT=kappa, name="diag-ou%d" % n, drift_const=a,
        diffusion_const=b, drift_diag_poly=np.array([[-th] for th in thetas]),
    )


def rotating_drift(eta: float = 1.0, omega: float = 0.75, sigma_b: float = 1.0,
                   T: float = 1.0) -> SdeProblem:
    """Dissipative drift plus a rotation: non-normal, constant, N = 4."""
    j2 = np.array([[0.0, 1.0], [-1.0, 0.0]])
    a = -eta * np.eye(4)
    a[:2, :2] += omega * j2
    a[2:, 2:] += omega * j2
    b = sigma_b * np.eye(4)
    return SdeProblem(
        N=4, m=4, T=T, drift=lambda t: a, diffusion=lambda t: b,
        x0=[1.0, 0.0, 1.0, 0.0],
        alpha_A=math.hypot(eta, omega), eta=eta, sigma=sigma_b, kappa_BBT=1.0,
        name="rotating4", drift_const=a, diffusion_const=b,
    )


def time_dependent_scalar(a0: float = 1.0, a1: float = 0.5, sigma_b: float = 1.0,
                          x0: float = 1.0, T: float = 1.0) -> SdeProblem:
    """Scalar drift A(t) = -(a0 + a1 t); dissipation strengthens with t."""
    if a0 <= 0 or a1 < 0:
        raise ValueError("need a0 > 0 and a1 >= 0")
    b = np.array([[sigma_b]])

    def drift(t: float) -> np.ndarray:
        return np.array([[-(a0 + a1 * t)]])

    return SdeProblem(
        N=1, m=1, T=T, drift=drift, diffusion=lambda t: b, x0=[x0],
        alpha_A=a0 + a1 * T, eta=a0, sigma=sigma_b, kappa_BBT=1.0,
        alpha_dA=a1, name="tdep1", diffusion_const=b,
        drift_diag_poly=np.array([[-a0, -a1]]),
    )


def degenerate_ou(theta: float = 1.0, sigma_b: float = 1.0, T: float = 1.0) -> SdeProblem:
    """N = 4 driven by a single Brownian component: B B^T is rank one."""
    a = -theta * np.eye(4)
    b = np.zeros((4, 1))
    b[0, 0] = sigma_b
    return SdeProblem(
        N=4, m=1, T=T, drift=lambda t: a, diffusion=lambda t: b,
        x0=[1.0, 1.0, 1.0, 1.0],
        alpha_A=theta, eta=theta, sigma=sigma_b, kappa_BBT=math.inf,
        name="ou-degenerate", drift_const=a, diffusion_const=b,
        drift_diag_poly=np.array([[-theta]] * 4),
    )


BUILTIN_MODELS = {
    "ou": scalar_ou,
    "diag-ou4": diagonal_ou,
    "rotating4": rotating_drift,
    "tdep1": time_dependent_scalar,
    "ou-degenerate": degenerate_ou,
}


def model_by_name(name: str, **params) -> SdeProblem:
    try:
        builder = BUILTIN_MODELS[name]
    except KeyError:
        raise ValueError(
            f"unknown model {name!r}; available: {sorted(BUILTIN_MODELS)}") from None
    return builder(**params)


def problem_from_dict(doc: dict) -> SdeProblem:
    """Build a problem from the JSON document layout
    {N, m, T, x0, model: {kind, params}, bounds: {...}}."""
    model = doc.get("model", {})
    kind = model.get("kind")
    if kind not in BUILTIN_MODELS:
        raise ValueError(f"unknown model kind {kind!r}")
    p = BUILTIN_MODELS[kind](**model.get("params", {}))
    overrides = {}
    for key in ("N", "m", "T"):
        if key in doc and doc[key] != getattr(p, key):
            raise ValueError(f"{key}={doc[key]} conflicts with model kind {kind!r}")
    if "x0" in doc:
        overrides["x0"] = np.asarray(doc["x0"], dtype=float)
    bounds = doc.get("bounds", {})
    mapping = {"alpha_A": "alpha_A", "eta": "eta", "sigma": "sigma",
               "kappa_BBT": "kappa_BBT", "alpha_dA": "alpha_dA",
               "alpha_dBBT": "alpha_dBBT"}
    for key, attr in mapping.items():
        if key in bounds:
            overrides[attr] = float(bounds[key])
    return replace(p, **overrides) if overrides else p


def problem_from_json(text: str) -> SdeProblem:
    return problem_from_dict(json.loads(text))
