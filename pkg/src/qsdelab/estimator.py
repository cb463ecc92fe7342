"""Expectation estimation over history states: plan selection, the overlap
estimation emulation, the three end-to-end estimators (multi-time,
terminal-time with padding, stepping-scheme based), and Monte Carlo
validators for the moment and sample-average concentration bounds.

Ground truth for expectations comes only from the RK4/quadrature oracles,
never from the pipeline under test.  The d-fold tensor products are never
materialized: the overlap against a sparse observable factorizes into
per-entry products of state components.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import em as em_mod
from .combinat import double_factorial
from .dyson import CovApprox, build_cov_approx
from .history import ALPHA_SYSTEM, assemble, forward_substitute, rhs
from .linalg import sqrt_psd
from .models import SdeProblem, TimeGrid, exact_phi, exact_sigma
from .prng import ClipBound, PcgStream, choose_usn, noise_block
from .dyson import propagator_blocks


class PlanInfeasibleError(ValueError):
    """Requested accuracy violates a plan precondition."""


class ModeGatingError(ValueError):
    """Algorithm requires structure the model does not declare."""


# --- observables -------------------------------------------------------------

@dataclass(frozen=True)
class ObservableTensor:
    """Sparse d-way tensor driving Y = sum C_{j1..jd} X^{j1} ... X^{jd};
    indices are 0-based."""

    d: int
    dims: int
    entries: tuple   # ((j1, ..., jd), value)

    def __post_init__(self):
        if self.d < 1:
            raise ValueError("tensor order must be at least 1")
        if not self.entries:
            raise ValueError("zero observable tensors are rejected")
        for idx, val in self.entries:
            if len(idx) != self.d:
                raise ValueError("index arity must equal the tensor order")
            if any(not 0 <= j < self.dims for j in idx):
                raise ValueError("index out of range")

    @property
    def frob_norm(self) -> float:
        return math.sqrt(sum(v * v for _, v in self.entries))

    def value_at(self, x: np.ndarray) -> np.ndarray:
        """Y for each row of x (batched)."""
        out = np.zeros(x.shape[:-1])
        for idx, val in self.entries:
            term = np.full(x.shape[:-1], val)
            for j in idx:
                term = term * x[..., j]
            out = out + term
        return out


def observable_from_dict(doc: dict, dims: int) -> ObservableTensor:
    entries = tuple((tuple(int(i) for i in e["idx"]), float(e["val"]))
                    for e in doc["entries"])
    return ObservableTensor(int(doc["d"]), dims, entries)


def terminal_component(n_state: int, r: int, component: int, d: int) -> ObservableTensor:
    """Multi-time tensor selecting one terminal component to the d-th power."""
    j = r * n_state + component
    return ObservableTensor(d, n_state * (r + 1), (((j,) * d, 1.0),))


# --- plans --------------------------------------------------------------------

@dataclass(frozen=True)
class EstimationPlan:
    mode: str                 # 'dyson_multi' | 'dyson_terminal' | 'em_multi'
    eps: float
    delta: float
    delta_prime: float
    d: int
    eps_prime: float
    n_samples: int
    u_sn: float
    u_b: float
    K: int
    r: int
    M: int
    R: int
    eps_oe: float
    scale_out: float
    varepsilon: float
    eta_t: float = 1.0    # max{1, eta*T} of the planned problem
    c_st: float = 0.0
    em_bias_bound: float = 0.0

    def as_dict(self) -> dict:
        return {
            "mode": self.mode, "eps": self.eps, "delta": self.delta,
            "delta_prime": self.delta_prime, "d": self.d,
            "eps_prime": self.eps_prime, "n_samples": self.n_samples,
            "u_sn": self.u_sn, "u_b": self.u_b, "K": self.K, "r": self.r,
            "M": self.M, "R": self.R, "eps_oe": self.eps_oe,
            "scale_out": self.scale_out, "varepsilon": self.varepsilon,
            "eta_t": self.eta_t, "c_st": self.c_st,
            "em_bias_bound": self.em_bias_bound,
        }


def _moment_base(p: SdeProblem, d: int, width: int) -> float:
    return float(p.x0 @ p.x0) + (width + 2 * d) * p.sigma ** 2 * p.T


def _require_dyson(p: SdeProblem):
    if not p.dyson_capable:
        raise ModeGatingError(
            "full-rank B B^T with a declared eigenvalue-range ratio is "
            "required for the series-based algorithms; use the stepping "
            "algorithm for rank-deficient diffusion")


def plan_multi_time(p: SdeProblem, C: ObservableTensor, eps: float,
                    delta: float) -> EstimationPlan:
    _require_dyson(p)
    d = C.d
    r_c = math.ceil(4.0 * p.kappa_BBT * p.alpha_A * p.T)
    denom = 12.0 * 2 ** d * d * math.sqrt(double_factorial(2 * d - 3)) \
        * (r_c + 1) ** (d / 2.0) * _moment_base(p, d, p.N) ** (d / 2.0) * C.frob_norm
    eps_prime = eps / denom
    if eps_prime > 1.0 / 3.0:
        raise PlanInfeasibleError(
            f"per-sample accuracy {eps_prime:.3g} exceeds 1/3; request a "
            f"smaller eps (the plan needs eps <= {denom / 3.0:.3g})")
    delta_prime = delta / 2.0
    n_samples = math.ceil(2.0 / (delta_prime * eps_prime ** 2))
    u_sn = choose_usn(r_c, p.N, n_samples, delta_prime).u_sn
    x0sq = float(p.x0 @ p.x0)
    noise_mass = 4.0 * p.N * p.sigma ** 2 * p.T * u_sn ** 2
    u_b = math.sqrt(x0sq + noise_mass)
    eta_t = max(1.0, p.eta * p.T)
    varepsilon = min(
        (p.eta * p.T) ** 2 / (8.0 * math.sqrt(3.0) * r_c ** 2),
        math.sqrt((x0sq + noise_mass) / (12.0 * noise_mass)) * p.eta * p.T / r_c,
    ) * eps_prime
    from .dyson import choose_krm_sqrt
    K, _, M = choose_krm_sqrt(p, varepsilon)
    eps_oe = (eta_t / (8.0 * r_c * u_b)) ** d * eps / (2.0 * C.frob_norm)
    scale_out = (8.0 * r_c * u_b / eta_t) ** d * C.frob_norm
    return EstimationPlan("dyson_multi", eps, delta, delta_prime, d, eps_prime,
                          n_samples, u_sn, u_b, K, r_c, M, 0, eps_oe,
                          scale_out, varepsilon, eta_t=eta_t)


def plan_terminal(p: SdeProblem, C: ObservableTensor, eps: float,
                  delta: float) -> EstimationPlan:
    _require_dyson(p)
    d = C.d
    r_c = math.ceil(4.0 * p.kappa_BBT * p.alpha_A * p.T)
    denom = 12.0 * 2 ** d * d * math.sqrt(double_factorial(2 * d - 3)) \
        * _moment_base(p, d, p.N) ** (d / 2.0) * C.frob_norm
    eps_prime = eps / denom
    if eps_prime > 1.0 / 3.0:
        raise PlanInfeasibleError(
            f"per-sample accuracy {eps_prime:.3g} exceeds 1/3; request a "
            f"smaller eps (the plan needs eps <= {denom / 3.0:.3g})")
    delta_prime = delta / 2.0
    n_samples = math.ceil(2.0 / (delta_prime * eps_prime ** 2))
    u_sn = choose_usn(r_c, p.N, n_samples, delta_prime).u_sn
    x0sq = float(p.x0 @ p.x0)
    noise_mass = 4.0 * p.N * p.sigma ** 2 * p.T * u_sn ** 2
    u_b = math.sqrt(x0sq + noise_mass)
    eta_t = max(1.0, p.eta * p.T)
    R = max(int(round(r_c / eta_t)), 0)
    varepsilon = min(
        (p.eta * p.T) ** 2 / (8.0 * math.sqrt(3.0) * r_c ** 2),
        math.sqrt((x0sq + noise_mass) / (12.0 * noise_mass)) * p.eta * p.T / r_c,
    ) * eps_prime
    from .dyson import choose_krm_sqrt
    K, _, M = choose_krm_sqrt(p, varepsilon)
    pref_inv = 2.0 * (4.0 * r_c / eta_t + R) * u_b
    scale_out = pref_inv ** d * C.frob_norm / math.sqrt(R + 1.0)
    eps_oe = eps / (2.0 * scale_out)
    return EstimationPlan("dyson_terminal", eps, delta, delta_prime, d, eps_prime,
                          n_samples, u_sn, u_b, K, r_c, M, R, eps_oe,
                          scale_out, varepsilon, eta_t=eta_t)


def plan_em(p: SdeProblem, C: ObservableTensor, eps: float, delta: float,
            c_st_estimate: float, max_iter: int = 20) -> EstimationPlan:
    """Joint (r, per-sample accuracy) fixed point for the stepping-scheme
    estimator: the step count must also suppress the discretization bias,
    whose constant is the supplied empirical estimate."""
    d = C.d
    if c_st_estimate < 0:
        raise ValueError("c_st_estimate must be non-negative")
    r = em_mod.min_steps(p)
    eps_prime = 1.0
    for _ in range(max_iter):
        denom = 2.0 ** (d + 1) * d * math.sqrt(double_factorial(2 * d - 3)) \
            * (r + 1) ** (d / 2.0) * _moment_base(p, d, p.m) ** (d / 2.0) * C.frob_norm
        eps_prime = min(eps / denom, 1.0)
        r_new = max(em_mod.min_steps(p), math.ceil(c_st_estimate / eps_prime ** 2))
        if r_new == r:
            break
        r = r_new
    else:
        raise PlanInfeasibleError("step-count fixed point did not settle")
    delta_prime = delta / 2.0
    n_samples = math.ceil(16.0 / (d * delta_prime * eps_prime ** 2))
    u_sn = choose_usn(r, p.m, n_samples, delta_prime).u_sn
    u_b = math.sqrt(float(p.x0 @ p.x0) + p.m * p.sigma ** 2 * p.T * u_sn ** 2)
    eta_t = max(1.0, p.eta * p.T)
    eps_oe = (eta_t / (8.0 * r * u_b)) ** d * eps / (4.0 * C.frob_norm)
    scale_out = (8.0 * r * u_b / eta_t) ** d * C.frob_norm
    bias = em_bias_bound(p, C, r, c_st_estimate)
    return EstimationPlan("em_multi", eps, delta, delta_prime, d, eps_prime,
                          n_samples, u_sn, u_b, 0, r, 1, 0, eps_oe,
                          scale_out, eps_prime, eta_t=eta_t,
                          c_st=c_st_estimate, em_bias_bound=bias)


def em_bias_bound(p: SdeProblem, C: ObservableTensor, r: int,
                  c_st_estimate: float) -> float:
    """Discretization-bias term of the stepping estimator's error bound;
    decays like 1/sqrt(r) at fixed empirical step constant."""
    d = C.d
    base = _moment_base(p, d, p.m)
    return d * math.sqrt(double_factorial(2 * d - 3)) \
        * (r + 1) ** ((d - 1) / 2.0) * base ** ((d - 1) / 2.0) \
        * C.frob_norm * math.sqrt(c_st_estimate / r)


def query_ledger(plan: EstimationPlan) -> dict:
    """Structural oracle-call accounting implied by the plan (reported for
    inspection; never asserted against asymptotics)."""
    oe_rounds = math.ceil(4.0 / plan.eps_oe * math.log(1.0 / plan.delta_prime))
    hist_uses = oe_rounds * plan.d
    if plan.mode == "em_multi":
        inv_eps = max(2.0, 8.0 * plan.r / (plan.eta_t * plan.eps_prime))
        ua_per_hist = math.ceil(4.0 * plan.r / plan.eta_t * math.log(inv_eps))
    else:
        kappa_sys = ALPHA_SYSTEM * (4.0 * plan.r / plan.eta_t + plan.R)
        inv_eps = max(2.0, kappa_sys / max(plan.eps_prime, 1e-300))
        ua_per_hist = math.ceil(kappa_sys * math.log(inv_eps)) * max(plan.K, 1)
    return {
        "oe_rounds": oe_rounds,
        "hist_oracle_uses": hist_uses,
        "ua_queries": hist_uses * ua_per_hist,
        "prng_queries": hist_uses,
        "x0_queries": hist_uses,
    }


# --- overlap estimation --------------------------------------------------------

def _oe_noise(eps_oe: float, stream: PcgStream, index: int) -> float:
    """Zero-mean noise never exceeding eps_oe (Gaussian of sd eps_oe/3,
    clipped just inside three sigma so rounding cannot cross the budget)."""
    z = stream.normal_at(index)
    return max(min(z, 2.997), -2.997) * eps_oe / 3.0


def overlap_estimate(u: np.ndarray, v: np.ndarray, eps_oe: float, delta: float,
                     mode: str = "exact", stream: Optional[PcgStream] = None,
                     noise_index: int = 1):
    """Inner product of two (near-)unit amplitude vectors; in shot mode a
    calibrated bounded noise models the estimation contract
    |a_hat - <u|v>| <= eps_oe with probability >= 1 - delta.

    Returns (estimate, queries_charged)."""
    u = np.asarray(u, dtype=float)
    v = np.asarray(v, dtype=float)
    if u.shape != v.shape:
        raise ValueError("amplitude vectors must share a dimension")
    for vec in (u, v):
        if np.linalg.norm(vec) > 1.0 + 1e-12:
            raise ValueError("amplitude vectors must have norm at most 1")
    value = float(u @ v)
    queries = math.ceil(4.0 / eps_oe * math.log(1.0 / delta))
    if mode == "exact":
        return value, queries
    if mode != "shot":
        raise ValueError("mode must be 'exact' or 'shot'")
    stream = stream or PcgStream(seed=0xE5, stream_id=17)
    return value + _oe_noise(eps_oe, stream, noise_index), queries


def build_observable_state(C: ObservableTensor, plan: EstimationPlan,
                           size_cap: int = 1 << 22) -> np.ndarray:
    """Explicit amplitude vector over (sample) x (flag) x (d index axes):
    C/||C|| replicated uniformly over samples, and over the padded tail
    slots in terminal mode.  Only for desk-scale dimension checks."""
    if plan.mode == "dyson_terminal":
        dims = (plan.r + plan.R + 1) * C.dims
        slots = [plan.r + k for k in range(plan.R + 1)]
    else:
        dims = C.dims
        slots = [None]
    total = plan.n_samples * 2 * dims ** C.d
    if total > size_cap:
        raise ValueError(f"explicit state of size {total} exceeds cap {size_cap}")
    vec = np.zeros(plan.n_samples * 2 * dims ** C.d)
    norm = C.frob_norm * math.sqrt(len(slots))
    for i in range(plan.n_samples):
        base = i * 2 * dims ** C.d  # flag 0 half of each sample slice
        for slot in slots:
            for idx, val in C.entries:
                flat = 0
                for j in idx:
                    pos = j if slot is None else slot * C.dims + j
                    flat = flat * dims + pos
                vec[base + flat] += val / (norm * math.sqrt(plan.n_samples))
    return vec


# --- state batches ---------------------------------------------------------------

def dyson_batch_states(p: SdeProblem, plan: EstimationPlan, stream: PcgStream,
                       first_sample: int, n_samples: int,
                       cov: Optional[CovApprox] = None) -> np.ndarray:
    """(n_samples, (r+R+1)N) raw history solutions under the series blocks
    and approximate roots, disjoint clipped noise per sample."""
    grid = TimeGrid(p.T, plan.r, plan.M)
    bound = ClipBound(plan.u_sn)
    if cov is None:
        cov = build_cov_approx(p, grid, plan.K, plan.varepsilon)
    z = noise_block(stream, first_sample, n_samples, grid.r, p.N, grid.r)
    z = bound.apply(z)
    size = (plan.r + plan.R + 1) * p.N
    b = np.zeros((n_samples, size))
    b[:, :p.N] = p.x0
    for n in range(grid.r):
        zn = z[:, n * p.N:(n + 1) * p.N]
        b[:, (n + 1) * p.N:(n + 2) * p.N] = zn @ cov.s_tilde(n).T
    blocks = propagator_blocks(p, grid, plan.K)
    kind = "dyson_padded" if plan.R else "dyson"
    sysm = assemble(kind, blocks, plan.R)
    return forward_substitute(sysm, b)


def exact_batch_states(p: SdeProblem, r: int, stream: PcgStream,
                       first_sample: int, n_samples: int,
                       bound: Optional[ClipBound] = None, R: int = 0) -> np.ndarray:
    """Reference batch: exact propagator blocks and exact covariance roots
    applied to (optionally clipped) noise."""
    grid = TimeGrid(p.T, r)
    phis = [exact_phi(p, grid.t(n), grid.t(n + 1)) for n in range(r)]
    roots = [sqrt_psd(exact_sigma(p, grid.t(n), grid.t(n + 1)), tol=1e-9)
             for n in range(r)]
    z = noise_block(stream, first_sample, n_samples, r, p.N, r)
    if bound is not None:
        z = bound.apply(z)
    out = np.empty((n_samples, (r + R + 1) * p.N))
    x = np.broadcast_to(p.x0, (n_samples, p.N)).copy()
    out[:, :p.N] = x
    for n in range(r):
        zn = z[:, n * p.N:(n + 1) * p.N]
        x = x @ phis[n].T + zn @ roots[n].T
        out[:, (n + 1) * p.N:(n + 2) * p.N] = x
    for k in range(r, r + R):
        out[:, (k + 1) * p.N:(k + 2) * p.N] = out[:, r * p.N:(r + 1) * p.N]
    return out


# --- ground truth -----------------------------------------------------------------

def analytic_expectation(p: SdeProblem, C: ObservableTensor, r: int,
                         terminal: bool = False) -> float:
    """E[Y] from the propagator/quadrature oracles (orders 1 and 2 only):
    first moments from Phi(t,0) x0, second moments from the accumulated
    covariance, independent of any series or solver machinery."""
    grid = TimeGrid(p.T, r)
    if C.d > 2:
        raise ValueError("analytic ground truth implemented for d <= 2")

    def locate(j: int):
        if terminal:
            return r, j
        return divmod(j, p.N)

    means = {}
    covs = {}

    def mean_at(n: int) -> np.ndarray:
        if n not in means:
            means[n] = exact_phi(p, 0.0, grid.t(n)) @ p.x0
        return means[n]

    def var_at(n: int) -> np.ndarray:
        if n not in covs:
            covs[n] = exact_sigma(p, 0.0, grid.t(n))
        return covs[n]

    total = 0.0
    for idx, val in C.entries:
        if C.d == 1:
            n, a = locate(idx[0])
            total += val * mean_at(n)[a]
        else:
            n1, a = locate(idx[0])
            n2, b = locate(idx[1])
            if n1 > n2:
                (n1, a), (n2, b) = (n2, b), (n1, a)
            cross = var_at(n1) @ exact_phi(p, grid.t(n1), grid.t(n2)).T
            total += val * (mean_at(n1)[a] * mean_at(n2)[b] + cross[a, b])
    return float(total)


# --- estimators --------------------------------------------------------------------

@dataclass(frozen=True)
class EstimateReport:
    mu_hat: float
    eps: float
    delta: float
    plan: EstimationPlan
    ledger: dict
    truth: Optional[float]
    abs_error: Optional[float]
    y_hat: float
    overlap: float

    @property
    def within_eps(self) -> Optional[bool]:
        if self.abs_error is None:
            return None
        return self.abs_error <= self.eps


def _tensor_averages(C: ObservableTensor, states: np.ndarray, offsets) -> float:
    """(1/(N_s * len(offsets))) sum over samples and block offsets of Y."""
    total = 0.0
    for off in offsets:
        acc = np.zeros(states.shape[0])
        for idx, val in C.entries:
            term = np.full(states.shape[0], val)
            for j in idx:
                term = term * states[:, off + j]
            acc = acc + term
        total += float(acc.mean())
    return total / len(offsets)


def _finish_estimate(p: SdeProblem, C: ObservableTensor, plan: EstimationPlan,
                     y_hat: float, oe_mode: str, oe_stream: Optional[PcgStream],
                     noise_index: int, terminal: bool) -> EstimateReport:
    # rescale identity: scale_out * overlap == y_hat (both modes)
    overlap = y_hat / plan.scale_out
    noise = 0.0
    if oe_mode == "shot":
        # separate stream so shot noise never shares indices with the
        # sample-noise blocks
        base = oe_stream or PcgStream(seed=0xE5, stream_id=17)
        stream = PcgStream(seed=base.seed, stream_id=base.stream_id + 7777)
        noise = _oe_noise(plan.eps_oe, stream, noise_index)
    elif oe_mode != "exact":
        raise ValueError("oe_mode must be 'exact' or 'shot'")
    mu_hat = plan.scale_out * (overlap + noise)
    truth = None
    try:
        truth = analytic_expectation(p, C, plan.r, terminal=terminal)
    except ValueError:
        pass
    abs_error = None if truth is None else abs(mu_hat - truth)
    return EstimateReport(mu_hat, plan.eps, plan.delta, plan, query_ledger(plan),
                          truth, abs_error, y_hat, overlap)


def estimate_multi_time(p: SdeProblem, C: ObservableTensor, eps: float,
                        delta: float, stream: PcgStream, *,
                        oe_mode: str = "shot", first_sample: int = 1,
                        plan: Optional[EstimationPlan] = None,
                        cov: Optional[CovApprox] = None,
                        oe_noise_index: int = 1) -> EstimateReport:
    """Estimate E[Y] for a multi-time observable over the whole history."""
    plan = plan or plan_multi_time(p, C, eps, delta)
    states = dyson_batch_states(p, plan, stream, first_sample, plan.n_samples, cov=cov)
    y_hat = _tensor_averages(C, states, [0])
    return _finish_estimate(p, C, plan, y_hat, oe_mode, stream, oe_noise_index,
                            terminal=False)


def estimate_terminal(p: SdeProblem, C: ObservableTensor, eps: float,
                      delta: float, stream: PcgStream, *,
                      oe_mode: str = "shot", first_sample: int = 1,
                      plan: Optional[EstimationPlan] = None,
                      cov: Optional[CovApprox] = None,
                      oe_noise_index: int = 1) -> EstimateReport:
    """Estimate E[Y] for a terminal-time observable via the padded system;
    the padded slots average the replicated terminal block."""
    plan = plan or plan_terminal(p, C, eps, delta)
    states = dyson_batch_states(p, plan, stream, first_sample, plan.n_samples, cov=cov)
    offsets = [(plan.r + k) * p.N for k in range(plan.R + 1)]
    y_hat = _tensor_averages(C, states, offsets)
    return _finish_estimate(p, C, plan, y_hat, oe_mode, stream, oe_noise_index,
                            terminal=True)


def estimate_em(p: SdeProblem, C: ObservableTensor, eps: float, delta: float,
                stream: PcgStream, c_st_estimate: float, *,
                oe_mode: str = "shot", first_sample: int = 1,
                plan: Optional[EstimationPlan] = None,
                oe_noise_index: int = 1) -> EstimateReport:
    """Estimate E[Y] using stepping-scheme history states (works for
    rank-deficient diffusion)."""
    plan = plan or plan_em(p, C, eps, delta, c_st_estimate)
    grid = TimeGrid(p.T, plan.r)
    bound = ClipBound(plan.u_sn)
    states = em_mod.em_batch_states(p, grid, stream, first_sample,
                                    plan.n_samples, bound=bound)
    y_hat = _tensor_averages(C, states, [0])
    return _finish_estimate(p, C, plan, y_hat, oe_mode, stream, oe_noise_index,
                            terminal=False)


def eps_from_relative(p: SdeProblem, C: ObservableTensor, algorithm: str,
                      eps_prime: float, c_st_estimate: float = 0.0) -> float:
    """Absolute accuracy whose plan lands on the given per-sample accuracy;
    the denominator scales like the observable's root-mean-square size."""
    d = C.d
    if algorithm == "multi":
        _require_dyson(p)
        r_c = math.ceil(4.0 * p.kappa_BBT * p.alpha_A * p.T)
        denom = 12.0 * 2 ** d * d * math.sqrt(double_factorial(2 * d - 3)) \
            * (r_c + 1) ** (d / 2.0) * _moment_base(p, d, p.N) ** (d / 2.0) * C.frob_norm
    elif algorithm == "terminal":
        _require_dyson(p)
        denom = 12.0 * 2 ** d * d * math.sqrt(double_factorial(2 * d - 3)) \
            * _moment_base(p, d, p.N) ** (d / 2.0) * C.frob_norm
    elif algorithm == "em":
        r = max(em_mod.min_steps(p),
                math.ceil(c_st_estimate / max(eps_prime, 1e-12) ** 2))
        denom = 2.0 ** (d + 1) * d * math.sqrt(double_factorial(2 * d - 3)) \
            * (r + 1) ** (d / 2.0) * _moment_base(p, d, p.m) ** (d / 2.0) * C.frob_norm
    else:
        raise ValueError("algorithm must be multi, terminal, or em")
    return eps_prime * denom


@dataclass(frozen=True)
class CoverageReport:
    repeats: int
    within: int
    eps: float
    delta: float
    abs_errors: tuple
    mu_hats: tuple
    truth: Optional[float]
    plan: EstimationPlan

    @property
    def coverage(self) -> float:
        return self.within / self.repeats


def estimate_coverage(p: SdeProblem, C: ObservableTensor, algorithm: str,
                      eps: float, delta: float, stream: PcgStream,
                      repeats: int, c_st_estimate: float = 0.0,
                      plan: Optional[EstimationPlan] = None) -> CoverageReport:
    """Repeat an estimator on disjoint sample blocks and count how often
    the estimate lands within eps of the oracle expectation."""
    if plan is None:
        if algorithm == "multi":
            plan = plan_multi_time(p, C, eps, delta)
        elif algorithm == "terminal":
            plan = plan_terminal(p, C, eps, delta)
        elif algorithm == "em":
            plan = plan_em(p, C, eps, delta, c_st_estimate)
        else:
            raise ValueError("algorithm must be multi, terminal, or em")
    cov = None
    if plan.mode != "em_multi":
        cov = build_cov_approx(p, TimeGrid(p.T, plan.r, plan.M), plan.K,
                               plan.varepsilon)
    errors = []
    mu_hats = []
    truth = None
    within = 0
    for k in range(repeats):
        first = 1 + k * plan.n_samples
        if algorithm == "multi":
            rep = estimate_multi_time(p, C, eps, delta, stream, plan=plan,
                                      cov=cov, first_sample=first,
                                      oe_noise_index=k + 1)
        elif algorithm == "terminal":
            rep = estimate_terminal(p, C, eps, delta, stream, plan=plan,
                                    cov=cov, first_sample=first,
                                    oe_noise_index=k + 1)
        else:
            rep = estimate_em(p, C, eps, delta, stream, c_st_estimate,
                              plan=plan, first_sample=first,
                              oe_noise_index=k + 1)
        errors.append(rep.abs_error)
        mu_hats.append(rep.mu_hat)
        truth = rep.truth
        if rep.abs_error is not None and rep.abs_error <= eps:
            within += 1
    return CoverageReport(repeats, within, eps, delta, tuple(errors),
                          tuple(mu_hats), truth, plan)


# --- bound validators ----------------------------------------------------------------

@dataclass(frozen=True)
class MomentReport:
    kind: str
    d: int
    estimate: float
    bound: float
    rel_se: float
    passed: bool


def moment_bound_check(p: SdeProblem, kind: str, d: int, n_samples: int,
                       stream: PcgStream, r: Optional[int] = None,
                       eps: float = 0.1) -> MomentReport:
    """Monte Carlo check of E||X^(tensor d)||^2 = E||X||^(2d) against the
    closed-form bound; passes when the estimate is at most
    bound * (1 + 3 * relative standard error).

    ``dyson_approx`` runs the approximate pipeline states at accuracy
    ``eps``; the bound then carries the (1+3 eps)^(2d) factor."""
    if d not in (1, 2, 3):
        raise ValueError("moment order d must be 1, 2, or 3")
    if kind in ("dyson", "terminal"):
        _require_dyson(p)
        r = r or math.ceil(4.0 * p.kappa_BBT * p.alpha_A * p.T)
        states = exact_batch_states(p, r, stream, 1, n_samples)
        if kind == "terminal":
            states = states[:, r * p.N:(r + 1) * p.N]
            bound = double_factorial(2 * d - 1) * _moment_base(p, d, p.N) ** d
        else:
            bound = double_factorial(2 * d - 1) * (r + 1) ** d \
                * _moment_base(p, d, p.N) ** d
    elif kind == "dyson_approx":
        from .history import history_params
        params = history_params(p, eps, n_samples=n_samples, delta=0.1)
        plan = EstimationPlan(
            "dyson_multi", eps, 0.1, 0.05, d, eps, n_samples, params.u_sn,
            params.u_b, params.K, params.r, params.M, 0, eps, 1.0,
            params.varepsilon)
        states = dyson_batch_states(p, plan, stream, 1, n_samples)
        r = params.r
        bound = double_factorial(2 * d - 1) * (1.0 + 3.0 * eps) ** (2 * d) \
            * (r + 1) ** d * _moment_base(p, d, p.N) ** d
    elif kind == "em":
        r = r or em_mod.min_steps(p)
        grid = TimeGrid(p.T, r)
        states = em_mod.em_batch_states(p, grid, stream, 1, n_samples)
        bound = double_factorial(2 * d - 1) * (r + 1) ** d \
            * _moment_base(p, d, p.m) ** d
    else:
        raise ValueError("kind must be dyson, dyson_approx, terminal, or em")
    v = np.sum(states ** 2, axis=1) ** d
    est = float(v.mean())
    rel_se = float(v.std(ddof=1) / (math.sqrt(n_samples) * est)) if est > 0 else 0.0
    passed = est <= bound * (1.0 + 3.0 * rel_se)
    return MomentReport(kind, d, est, bound, rel_se, passed)


@dataclass(frozen=True)
class ConcentrationReport:
    kind: str
    repeats: int
    violations: int
    delta: float
    rhs: float
    slack: float
    passed: bool


def sample_average_bound_check(p: SdeProblem, C: ObservableTensor, kind: str,
                               repeats: int, delta: float, stream: PcgStream,
                               n_samples: Optional[int] = None,
                               r: Optional[int] = None,
                               c_st_estimate: float = 0.0) -> ConcentrationReport:
    """Empirical frequency of |Y_hat - E[Y]| exceeding the concentration
    bound, judged against delta plus three binomial standard errors.

    States are exact (per-sample accuracy 0), so the bound reduces to its
    Chebyshev term (plus the discretization term in the stepping case)."""
    if repeats < 100:
        raise ValueError("need at least 100 repeats")
    d = C.d
    if kind in ("dyson", "terminal"):
        _require_dyson(p)
        r = r or math.ceil(4.0 * p.kappa_BBT * p.alpha_A * p.T)
        base = _moment_base(p, d, p.N)
    else:
        r = r or em_mod.min_steps(p)
        base = _moment_base(p, d, p.m)
    n_samples = n_samples or 256
    cheb = math.sqrt(2.0 / (delta * n_samples))
    if kind == "dyson":
        rhs = 3.0 * d * math.sqrt(double_factorial(2 * d - 3)) \
            * (r + 1) ** (d / 2.0) * base ** (d / 2.0) * C.frob_norm * cheb
        truth = analytic_expectation(p, C, r, terminal=False)
    elif kind == "terminal":
        rhs = 3.0 * d * math.sqrt(double_factorial(2 * d - 3)) \
            * base ** (d / 2.0) * C.frob_norm * cheb
        truth = analytic_expectation(p, C, r, terminal=True)
    elif kind == "em":
        rhs = math.sqrt(double_factorial(2 * d - 1)) * (r + 1) ** (d / 2.0) \
            * base ** (d / 2.0) * C.frob_norm * cheb \
            + d * math.sqrt(double_factorial(2 * d - 3)) * (r + 1) ** ((d - 1) / 2.0) \
            * base ** ((d - 1) / 2.0) * C.frob_norm * math.sqrt(c_st_estimate / r)
        truth = analytic_expectation(p, C, r, terminal=False)
    else:
        raise ValueError("kind must be dyson, terminal, or em")

    grid = TimeGrid(p.T, r)
    violations = 0
    for k in range(repeats):
        first = 1 + k * n_samples
        if kind == "em":
            states = em_mod.em_batch_states(p, grid, stream, first, n_samples)
            y_hat = _tensor_averages(C, states, [0])
        elif kind == "terminal":
            states = exact_batch_states(p, r, stream, first, n_samples)
            y_hat = _tensor_averages(C, states[:, r * p.N:(r + 1) * p.N],
                                     [0])
        else:
            states = exact_batch_states(p, r, stream, first, n_samples)
            y_hat = _tensor_averages(C, states, [0])
        if abs(y_hat - truth) > rhs:
            violations += 1
    slack = 3.0 * math.sqrt(delta * (1.0 - delta) / repeats)
    freq = violations / repeats
    return ConcentrationReport(kind, repeats, violations, delta, rhs, slack,
                               freq <= delta + slack)
