"""Truncated time-ordered series for the propagator, the per-step noise
covariance built from it, its symmetric square root, and the emulated
block-encoding algebra that tracks normalization, ancilla count, and
accuracy budgets through compositions.

The order-K truncation over an M-point sub-grid equals the product of the
M single-node exponentials truncated at total order K, which is how the
generic path computes it (O(K^2 M) small matrix products).  Two exact
collapses make the parameter regimes demanded by the square-root budget
formulas reachable: constant drift reduces every term to a plain truncated
exponential, and diagonal drift with polynomial entries reduces the inner
time-ordered sums to closed-form power sums.  When the sub-grid count M is
too large to enumerate, the covariance sum over sub-grid offsets is
evaluated as an exact-degree Gauss-Legendre integral plus the first
Euler-Maclaurin boundary correction; for the built-in coefficient maps the
integrand is a polynomial, so the only error is the O(1/M^2) tail of the
correction series.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .linalg import spectral_norm, sqrt_psd
from .models import SdeProblem, TimeGrid, exact_sigma, phi_endpoint_profile
from .prng import ClipBound, PcgStream, noise_vector

GENERIC_M_CAP = 4096
VECTOR_M_CAP = 1 << 16


class FeasibilityError(RuntimeError):
    """Requested sub-grid count cannot be enumerated and no exact
    collapse applies to the coefficient maps."""


class ContainmentError(ValueError):
    """Covariance eigenvalues left the declared range."""


# --- emulated block-encodings ----------------------------------------------

@dataclass(frozen=True)
class BlockEncodingSpec:
    """(matrix, normalization, ancillas, accuracy) record standing in for a
    block-encoding unitary; compositions track all three budget fields."""

    target: np.ndarray
    alpha: float
    ancillas: int
    epsilon: float

    def __post_init__(self):
        if self.epsilon < 0 or self.ancillas < 0:
            raise ValueError("epsilon and ancillas must be non-negative")
        if self.alpha < spectral_norm(self.target) - self.epsilon - 1e-12:
            raise ValueError("normalization below encoded-matrix norm")


def be_product(a: BlockEncodingSpec, b: BlockEncodingSpec) -> BlockEncodingSpec:
    """Product encoding: normalizations multiply, ancillas add, accuracies
    combine as alpha_a*eps_b + alpha_b*eps_a + eps_a*eps_b."""
    if a.target.shape[1] != b.target.shape[0]:
        raise ValueError("inner dimensions do not match")
    eps = a.alpha * b.epsilon + b.alpha * a.epsilon + a.epsilon * b.epsilon
    return BlockEncodingSpec(a.target @ b.target, a.alpha * b.alpha,
                             a.ancillas + b.ancillas, eps)


def be_lcu_average(specs, weight: float) -> BlockEncodingSpec:
    """Uniform linear combination sum_j weight * target_j via an
    equi-amplitude selector: alpha = count * weight * max alpha_j."""
    specs = list(specs)
    if not specs:
        raise ValueError("need at least one term")
    shape = specs[0].target.shape
    if any(s.target.shape != shape for s in specs):
        raise ValueError("terms must share a shape")
    target = weight * np.sum([s.target for s in specs], axis=0)
    alpha = len(specs) * weight * max(s.alpha for s in specs)
    ancillas = max(s.ancillas for s in specs) + max(1, math.ceil(math.log2(max(len(specs), 2))))
    eps = weight * sum(s.epsilon for s in specs)
    return BlockEncodingSpec(target, alpha, ancillas, eps)


def nominal_ancillas(p: SdeProblem) -> int:
    """Ancilla count charged to one coefficient-oracle call."""
    return max(1, math.ceil(math.log2(max(p.N, 2)))) + 1


def phi_tilde_ancillas(p: SdeProblem, K: int, M: int) -> int:
    a = nominal_ancillas(p)
    return K * (a + math.ceil(math.log2(max(M, 2))) + math.ceil(math.log2(max(K, 2))))


# --- parameter selection -----------------------------------------------------

def choose_krm_phi(p: SdeProblem, eps: float):
    """Smallest (K, r, M) with truncation error at most eps for the
    propagator over one step (natural-log order rule)."""
    if not 0.0 < eps < 1.0:
        raise ValueError("eps must be in (0, 1)")
    K = max(math.ceil(math.log(3.0 / eps)), 7)
    r = max(math.ceil(p.alpha_A * p.T), 1)
    M = max(math.ceil(4.0 * p.alpha_dA / (p.alpha_A ** 2 * eps)), 1)
    return K, r, M


def choose_krm_sigma(p: SdeProblem, eps: float):
    """Smallest (K, r, M) with covariance error at most eps * sigma^2 * dt."""
    if not 0.0 < eps <= 1.0:
        raise ValueError("eps must be in (0, 1]")
    K = max(math.ceil(math.log(18.0 / eps)), 7)
    r = max(math.ceil(p.alpha_A * p.T), 1)
    dt = p.T / r
    m1 = 24.0 * p.alpha_dA / (p.alpha_A ** 2 * eps)
    m2 = 2.0 * (2.0 * p.alpha_A + p.alpha_dBBT / p.sigma ** 2) * dt / eps
    M = max(math.ceil(max(m1, m2)), 1)
    return K, r, M


def _sqrt_budget_factor(p: SdeProblem, eps: float) -> float:
    inner = 4.0 * p.kappa_BBT * math.log(8.0 / eps)
    return 64.0 * math.pi * (math.log2(inner) + 1.0) ** 2 * math.log(8.0 / eps)


def choose_krm_sqrt(p: SdeProblem, eps: float):
    """(K, r, M) under which the covariance is accurate enough to drive the
    square-root construction to error eps * sqrt(sigma^2 dt)."""
    if not 0.0 < eps <= 1.0:
        raise ValueError("eps must be in (0, 1]")
    if not p.dyson_capable:
        raise ContainmentError(
            "square-root route needs full-rank BB^T with finite kappa_BBT")
    f = _sqrt_budget_factor(p, eps)
    K = max(math.ceil(math.log(18.0 * f / eps)), 7)
    r = math.ceil(4.0 * p.kappa_BBT * p.alpha_A * p.T)
    m_base = max(24.0 * p.alpha_dA / p.alpha_A ** 2,
                 2.0 * (2.0 * p.alpha_A + p.alpha_dBBT / p.sigma ** 2) / p.alpha_A)
    M = max(math.ceil(m_base * f / eps), 1)
    return K, r, M


# --- truncated series, exact paths -------------------------------------------

def _truncexp_matrix(x: np.ndarray, K: int) -> np.ndarray:
    """sum_{k<=K} x^k / k! via Horner."""
    n = x.shape[0]
    out = np.eye(n)
    for k in range(K, 0, -1):
        out = np.eye(n) + (x / k) @ out
    return out


def _truncexp_scalar(g, K: int):
    out = np.ones_like(np.asarray(g, dtype=float))
    for k in range(K, 0, -1):
        out = 1.0 + g * out / k
    return out


_FAULHABER = {
    0: lambda M: M,
    1: lambda M: M * (M - 1) / 2.0,
    2: lambda M: M * (M - 1) * (2 * M - 1) / 6.0,
    3: lambda M: (M * (M - 1) / 2.0) ** 2,
    4: lambda M: M * (M - 1) * (2 * M - 1) * (3 * M * M - 3 * M - 1) / 30.0,
}


def _power_sum(M: int, p: int) -> float:
    """sum_{l=0}^{M-1} l^p, exact closed forms for p <= 4."""
    if p not in _FAULHABER:
        raise FeasibilityError(f"power sums only tabulated up to degree 4, got {p}")
    return float(_FAULHABER[p](float(M)))


def _riemann_poly(coeffs: np.ndarray, s, t_end, M: int):
    """g = ((t_end - s)/M) * sum_{l=0}^{M-1} poly(s + l (t_end - s)/M),
    exact for any M; vectorized over s."""
    s = np.asarray(s, dtype=float)
    h = (t_end - s) / M
    deg = len(coeffs) - 1
    total = np.zeros_like(s)
    for d in range(deg + 1):
        if coeffs[d] == 0.0:
            continue
        inner = np.zeros_like(s)
        for dp in range(d + 1):
            inner = inner + math.comb(d, dp) * s ** (d - dp) * h ** dp * _power_sum(M, dp)
        total = total + coeffs[d] * inner
    return h * total


def _diag_series_exponents(p: SdeProblem, grid: TimeGrid, K: int, n: int, s_vals):
    """Per-entry exponents g_i(s) = delta' * sum_l a_i(tau_l) for diagonal
    polynomial drift; returns (len(s_vals), N)."""
    t_next = grid.t(n + 1)
    cols = [
        _riemann_poly(p.drift_diag_poly[i], s_vals, t_next, grid.M)
        for i in range(p.N)
    ]
    return np.stack(cols, axis=-1)


def truncated_dyson(p: SdeProblem, grid: TimeGrid, K: int, n: int, j: int) -> np.ndarray:
    """Order-K time-ordered series for the propagator from s_{n,j} to
    t_{n+1}, M-point sub-grid per the grid."""
    if not 0 <= n <= grid.r - 1:
        raise ValueError("n out of range")
    if not 0 <= j <= grid.M - 1:
        raise ValueError("j out of range")
    if K < 0:
        raise ValueError("K must be non-negative")
    span = grid.t(n + 1) - grid.s(n, j)
    if p.drift_const is not None:
        return _truncexp_matrix(p.drift_const * span, K)
    if p.drift_diag_poly is not None:
        g = _diag_series_exponents(p, grid, K, n, np.array([grid.s(n, j)]))[0]
        return np.diag(_truncexp_scalar(g, K))
    return _dyson_generic(p, grid, K, n, j)


def _dyson_generic(p: SdeProblem, grid: TimeGrid, K: int, n: int, j: int) -> np.ndarray:
    """Ordered product of node exponentials, truncated at total order K."""
    if grid.M > GENERIC_M_CAP:
        raise FeasibilityError(
            f"generic series path limited to M <= {GENERIC_M_CAP}, got {grid.M}")
    span = grid.t(n + 1) - grid.s(n, j)
    h = span / grid.M
    coeffs = [np.eye(p.N)] + [np.zeros((p.N, p.N)) for _ in range(K)]
    for l in range(grid.M):
        a = p.a_at(grid.tau(n, j, l)) * h
        powers = [np.eye(p.N)]
        for k in range(1, K + 1):
            powers.append(powers[-1] @ (a / k))
        new = [np.zeros((p.N, p.N)) for _ in range(K + 1)]
        for k in range(K + 1):
            acc = np.zeros((p.N, p.N))
            for mth in range(k + 1):
                acc = acc + powers[mth] @ coeffs[k - mth]
            new[k] = acc
        coeffs = new
    total = np.zeros((p.N, p.N))
    for k in range(K, -1, -1):
        total = total + coeffs[k]
    return total


def dyson_oracle_unordered(p: SdeProblem, grid: TimeGrid, K: int, n: int, j: int) -> np.ndarray:
    """Brute-force reference: symmetrized sum over all M^k node tuples with
    explicit time ordering.  Only viable for tiny K and M."""
    import itertools

    if grid.M ** max(K, 1) > 1 << 16:
        raise FeasibilityError("unordered oracle needs M^K <= 65536")
    span = grid.t(n + 1) - grid.s(n, j)
    h = span / grid.M
    total = np.eye(p.N)
    for k in range(1, K + 1):
        acc = np.zeros((p.N, p.N))
        for tup in itertools.product(range(grid.M), repeat=k):
            ordered = sorted(tup, reverse=True)
            prod = np.eye(p.N)
            for l in ordered:
                prod = prod @ p.a_at(grid.tau(n, j, l))
            acc = acc + prod
        total = total + (h ** k / math.factorial(k)) * acc
    return total


def propagator_blocks(p: SdeProblem, grid: TimeGrid, K: int) -> list:
    """The per-step series blocks (j = 0) for n = 0 .. r-1."""
    return [truncated_dyson(p, grid, K, n, 0) for n in range(grid.r)]


# --- error measurement --------------------------------------------------------

@dataclass(frozen=True)
class SeriesErrorRow:
    model: str
    eps_target: float
    K: int
    r: int
    M: int
    measured_error: float
    bound: float
    passed: bool


def _phi_tilde_stack(p: SdeProblem, grid: TimeGrid, K: int, n: int,
                     js: np.ndarray) -> np.ndarray:
    """Series values for one step and many sub-grid offsets, (len(js), N, N)."""
    t_next = grid.t(n + 1)
    spans = t_next - (grid.t(n) + js * grid.delta_t)
    if p.drift_const is not None:
        powers = [np.eye(p.N)]
        for k in range(1, K + 1):
            powers.append(powers[-1] @ (p.drift_const / k))
        pw = np.stack(powers)                      # (K+1, N, N)
        co = spans[:, None] ** np.arange(K + 1)[None, :]   # (nj, K+1)
        return np.einsum("jk,knm->jnm", co, pw)
    if p.drift_diag_poly is not None:
        s_vals = grid.t(n) + js * grid.delta_t
        g = _diag_series_exponents(p, grid, K, n, s_vals)  # (nj, N)
        vals = _truncexp_scalar(g, K)
        out = np.zeros((len(js), p.N, p.N))
        idx = np.arange(p.N)
        out[:, idx, idx] = vals
        return out
    return np.stack([_dyson_generic(p, grid, K, n, int(j)) for j in js])


def dyson_error_bound_check(p: SdeProblem, grid: TimeGrid, K: int,
                            eps: float) -> SeriesErrorRow:
    """Measured max over (n, j) of the series-vs-propagator deviation,
    judged against eps.  The reference comes from one backward RK4 sweep
    per step, independent of the series construction."""
    worst = 0.0
    js = np.arange(grid.M)
    for n in range(grid.r):
        s_vals = grid.t(n) + js * grid.delta_t
        approx = _phi_tilde_stack(p, grid, K, n, js)
        exact = phi_endpoint_profile(p, s_vals, grid.t(n + 1),
                                     min_steps=max(64, 2 * grid.M))
        diff = approx - exact
        svals = np.linalg.svd(diff, compute_uv=False)
        worst = max(worst, float(svals[..., 0].max()))
    return SeriesErrorRow(p.name, eps, K, grid.r, grid.M, worst, eps, worst <= eps)


# --- covariance ---------------------------------------------------------------

def approx_covariance(p: SdeProblem, grid: TimeGrid, K: int, n: int) -> np.ndarray:
    """Step-n covariance assembled from the truncated series:
    sum_j Phi~_{n,j} B B^T(s_{n,j}) Phi~_{n,j}^T * (dt/M).

    Direct enumeration up to the vectorizable cap; beyond it, the sum over
    j is evaluated as an exact-degree Gauss-Legendre integral in x = j/M
    plus the first Euler-Maclaurin boundary correction.
    """
    if not (p.drift_const is None and p.drift_diag_poly is None) and grid.M > VECTOR_M_CAP:
        return _covariance_quadrature(p, grid, K, n)
    if p.drift_const is None and p.drift_diag_poly is None and grid.M > GENERIC_M_CAP:
        raise FeasibilityError(
            f"covariance with generic drift limited to M <= {GENERIC_M_CAP}")
    return _covariance_direct(p, grid, K, n)


def _covariance_direct(p: SdeProblem, grid: TimeGrid, K: int, n: int) -> np.ndarray:
    deltat = grid.delta_t
    sig = np.zeros((p.N, p.N))
    chunk = 2048
    js_all = np.arange(grid.M)
    for lo in range(0, grid.M, chunk):
        js = js_all[lo:lo + chunk]
        phis = _phi_tilde_stack(p, grid, K, n, js)
        if p.diffusion_const is not None:
            bbt = p.bbt_at(0.0)
            core = np.einsum("jab,bc,jdc->jad", phis, bbt, phis)
        else:
            core = np.empty_like(phis)
            for pos, j in enumerate(js):
                bbt = p.bbt_at(grid.s(n, int(j)))
                core[pos] = phis[pos] @ bbt @ phis[pos].T
        sig = sig + deltat * core.sum(axis=0)
    return 0.5 * (sig + sig.T)


def _covariance_quadrature(p: SdeProblem, grid: TimeGrid, K: int, n: int) -> np.ndarray:
    """Large-M path: dt * [ integral_0^1 f(x) dx - (f(1) - f(0)) / (2M) ]
    with f(x) the summand at continuous offset x = j/M.  For polynomial
    coefficient maps the node count makes the quadrature exact."""
    dt = grid.dt
    M = grid.M

    def f_at(x: float) -> np.ndarray:
        span = dt * (1.0 - x)
        s = grid.t(n) + dt * x
        if p.drift_const is not None:
            phi = _truncexp_matrix(p.drift_const * span, K)
        else:
            g = _riemann_poly_matrix_diag(p, s, grid.t(n + 1), M)
            phi = np.diag(_truncexp_scalar(g, K))
        bbt = p.bbt_at(s)
        return phi @ bbt @ phi.T

    deg = 2 * K + 4
    nodes = max(8, deg // 2 + 2)
    x, w = np.polynomial.legendre.leggauss(nodes)
    x = 0.5 * (x + 1.0)
    w = 0.5 * w
    integral = np.zeros((p.N, p.N))
    for xi, wi in zip(x, w):
        integral = integral + wi * f_at(float(xi))
    corr = (f_at(1.0) - f_at(0.0)) / (2.0 * M)
    sig = dt * (integral - corr)
    return 0.5 * (sig + sig.T)


def _riemann_poly_matrix_diag(p: SdeProblem, s: float, t_end: float, M: int) -> np.ndarray:
    return np.array([
        _riemann_poly(p.drift_diag_poly[i], np.array([s]), t_end, M)[0]
        for i in range(p.N)
    ])


def covariance_error_check(p: SdeProblem, grid: TimeGrid, K: int,
                           eps: float) -> SeriesErrorRow:
    """max_n || series covariance - quadrature covariance || vs eps*sigma^2*dt."""
    bound = eps * p.sigma ** 2 * grid.dt
    worst = 0.0
    for n in range(grid.r):
        approx = approx_covariance(p, grid, K, n)
        exact = exact_sigma(p, grid.t(n), grid.t(n + 1))
        worst = max(worst, spectral_norm(approx - exact))
    return SeriesErrorRow(p.name, eps, K, grid.r, grid.M, worst, bound, worst <= bound)


# --- square root and noise -----------------------------------------------------

@dataclass(frozen=True)
class CovApprox:
    """Per-step covariance approximations and their symmetric roots, with
    the budget records of the encodings they emulate."""

    K: int
    r: int
    M: int
    sigmas: tuple
    roots: tuple
    be_sigma: BlockEncodingSpec
    be_sqrt: BlockEncodingSpec
    eps: float

    def sigma_tilde(self, n: int) -> np.ndarray:
        return self.sigmas[n]

    def s_tilde(self, n: int) -> np.ndarray:
        return self.roots[n]


def sqrt_with_budget(cov: np.ndarray, p: SdeProblem, grid: TimeGrid, eps: float,
                     n: Optional[int] = None, K: int = 7):
    """Symmetric root of a step covariance with its budget record
    (normalization 2*sqrt(sigma^2 dt), accuracy eps*sqrt(sigma^2 dt)).

    Eigenvalues must sit inside the declared containment window, up to the
    covariance accuracy itself.  When the step index is given, the root is
    verified against the exact covariance root at that step.
    """
    sc = p.sigma ** 2 * grid.dt
    tol = eps * sc + 1e-10
    eig = np.linalg.eigvalsh(0.5 * (cov + cov.T))
    lo, hi = sc / (2.0 * p.kappa_BBT), sc
    if eig[0] < lo - tol or eig[-1] > hi + tol:
        raise ContainmentError(
            f"covariance eigenvalues [{eig[0]:.3e}, {eig[-1]:.3e}] outside "
            f"[{lo:.3e}, {hi:.3e}] (+/- {tol:.3e})")
    root = sqrt_psd(cov, tol=tol)
    budget = eps * math.sqrt(sc)
    ancillas = 2 * phi_tilde_ancillas(p, K, grid.M) + nominal_ancillas(p) + 4
    spec = BlockEncodingSpec(root, 2.0 * math.sqrt(sc), ancillas, budget)
    if n is not None:
        exact_root = sqrt_psd(exact_sigma(p, grid.t(n), grid.t(n + 1)), tol=1e-9)
        dev = spectral_norm(root - exact_root)
        if dev > budget:
            raise ContainmentError(
                f"root deviation {dev:.3e} exceeds budget {budget:.3e}")
    return root, spec


def build_cov_approx(p: SdeProblem, grid: TimeGrid, K: int, eps: float,
                     sqrt_mode: str = "honest",
                     perturb_stream: Optional[PcgStream] = None) -> CovApprox:
    """Covariances and roots for every step.

    ``sqrt_mode='adversarial'`` tops the root error up to the full budget
    with a pseudorandom symmetric perturbation, to stress downstream
    bounds exactly at their assumption.
    """
    sigmas, roots = [], []
    sc = p.sigma ** 2 * grid.dt
    budget = eps * math.sqrt(sc)
    for n in range(grid.r):
        cov = approx_covariance(p, grid, K, n)
        root, _ = sqrt_with_budget(cov, p, grid, eps)
        if sqrt_mode == "adversarial":
            exact_root = sqrt_psd(exact_sigma(p, grid.t(n), grid.t(n + 1)), tol=1e-9)
            base_err = spectral_norm(root - exact_root)
            room = max(0.0, 0.999 * budget - base_err)
            if room > 0.0:
                stream = perturb_stream or PcgStream(seed=0xC0, stream_id=7 + n)
                g = stream.normals_matrix([1 + n * p.N * p.N], p.N * p.N)[0]
                g = g.reshape(p.N, p.N)
                g = 0.5 * (g + g.T)
                root = root + (room / spectral_norm(g)) * g
        elif sqrt_mode != "honest":
            raise ValueError("sqrt_mode must be 'honest' or 'adversarial'")
        sigmas.append(cov)
        roots.append(root)
    a_phi = phi_tilde_ancillas(p, K, grid.M)
    a_bbt = nominal_ancillas(p)
    be_sigma = BlockEncodingSpec(
        sigmas[0], math.e ** 2 * p.sigma ** 2 * grid.dt,
        2 * a_phi + a_bbt + max(1, math.ceil(math.log2(max(grid.M, 2)))), 0.0)
    be_sqrt = BlockEncodingSpec(
        roots[0], 2.0 * math.sqrt(sc), be_sigma.ancillas + 4, budget)
    return CovApprox(K, grid.r, grid.M, tuple(sigmas), tuple(roots),
                     be_sigma, be_sqrt, eps)


@dataclass(frozen=True)
class NoiseSample:
    vector: np.ndarray
    amplitude_scale: float


def noise_sample(p: SdeProblem, grid: TimeGrid, cov: CovApprox, stream: PcgStream,
                 sample: int, n: int, bound: ClipBound) -> NoiseSample:
    """Step-n noise for one sample: root times the clipped normal block,
    with the amplitude-encoding scale 1/(2 sqrt(N sigma^2 dt) U) recorded."""
    z = noise_vector(stream, sample, n, p.N, grid.r)
    z = bound.apply(z)
    scale = 1.0 / (2.0 * math.sqrt(p.N * p.sigma ** 2 * grid.dt) * bound.u_sn)
    return NoiseSample(cov.s_tilde(n) @ z, scale)
