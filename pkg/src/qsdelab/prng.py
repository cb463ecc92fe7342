"""Deterministic pseudorandom normals with arbitrary-index access.

A 64-bit linear congruential state is permuted through the RXS-M-XS output
function, giving one 64-bit word per index; the top 53 bits form a uniform
in (0, 1) which is mapped to a standard normal by inverse transform
sampling.  Because the state after ``i`` steps is an affine function of the
initial state, any position is reachable in O(log i) work, so the value at
index ``i`` is a pure function of (seed, stream_id, i).  Monte Carlo code
exploits this to hand out disjoint index blocks per sample with no
coordination.

The scalar path uses Python integers; ``normals_matrix`` runs the same
recurrence on ``uint64`` arrays, one lockstep advance per column.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import scipy.special

_MASK64 = 0xFFFFFFFFFFFFFFFF
_MULT = 6364136223846793005
_RXS_MULT = 12605985483714917081
_INV53 = 2.0 ** -53

DEFAULT_SEED = 123456789
DEFAULT_STREAM = 1


@dataclass(frozen=True)
class ClipBound:
    """Symmetric truncation level for normal samples."""

    u_sn: float

    def apply(self, z):
        return np.clip(z, -self.u_sn, self.u_sn)


def clip(z: float, bound: ClipBound) -> float:
    """max{min{z, U}, -U} for the bound's level U."""
    return max(min(z, bound.u_sn), -bound.u_sn)


def choose_usn(r: int, width: int, n_samples: int, delta: float) -> ClipBound:
    """Clip level that lets all r*width*n_samples draws escape clipping
    with probability at least 1 - delta/2 (Gaussian tail bound)."""
    if min(r, width, n_samples) < 1 or not (0.0 < delta < 1.0):
        raise ValueError("r, width, n_samples must be positive and delta in (0,1)")
    arg = 2.0 * r * width * n_samples / (math.sqrt(2.0 * math.pi) * delta)
    if arg <= 1.0:
        return ClipBound(1.0)
    return ClipBound(max(math.sqrt(2.0 * math.log(arg)), 1.0))


# --- inverse normal CDF ---------------------------------------------------

_ACK_A = (-3.969683028665376e+01, 2.209460984245205e+02, -2.759285104469687e+02,
          1.383577518672690e+02, -3.066479806614716e+01, 2.506628277459239e+00)
_ACK_B = (-5.447609879822406e+01, 1.615858368580409e+02, -1.556989798598866e+02,
          6.680131188771972e+01, -1.328068155288572e+01)
_ACK_C = (-7.784894002430293e-03, -3.223964580411365e-01, -2.400758277161838e+00,
          -2.549732539343734e+00, 4.374664141464968e+00, 2.938163982698783e+00)
_ACK_D = (7.784695709041462e-03, 3.224671290700398e-01, 2.445134137142996e+00,
          3.754408661907416e+00)
_P_LOW = 0.02425


def inv_normal_cdf(u: float) -> float:
    """Standard normal quantile, rational approximation plus one Halley
    refinement against erfc.  Absolute error well under 1e-9 on
    [1e-15, 1 - 1e-15]."""
    if not 0.0 < u < 1.0:
        raise ValueError("u must lie strictly inside (0, 1)")
    # reflect the upper half so the refinement always works in the lower
    # tail, where Phi(x) = erfc(-x/sqrt(2))/2 keeps full relative precision
    if u > 0.5:
        return -inv_normal_cdf(1.0 - u)
    a, b, c, d = _ACK_A, _ACK_B, _ACK_C, _ACK_D
    if u < _P_LOW:
        q = math.sqrt(-2.0 * math.log(u))
        x = (((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) / \
            ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1.0)
    else:
        q = u - 0.5
        s = q * q
        x = (((((a[0] * s + a[1]) * s + a[2]) * s + a[3]) * s + a[4]) * s + a[5]) * q / \
            (((((b[0] * s + b[1]) * s + b[2]) * s + b[3]) * s + b[4]) * s + 1.0)
    # Halley step: f = Phi(x) - u, f' = phi(x), f'' = -x phi(x)
    err = 0.5 * math.erfc(-x / math.sqrt(2.0)) - u
    g = err * math.sqrt(2.0 * math.pi) * math.exp(0.5 * x * x)
    return x - g / (1.0 + 0.5 * x * g)


def _inv_normal_cdf_vec(u: np.ndarray) -> np.ndarray:
    a, b, c, d = _ACK_A, _ACK_B, _ACK_C, _ACK_D
    u = np.asarray(u, dtype=float)
    flip = u > 0.5
    u = np.where(flip, 1.0 - u, u)
    x = np.empty_like(u)

    lo = u < _P_LOW
    mid = ~lo

    if np.any(lo):
        q = np.sqrt(-2.0 * np.log(u[lo]))
        x[lo] = (((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) / \
            ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1.0)
    if np.any(mid):
        q = u[mid] - 0.5
        s = q * q
        x[mid] = (((((a[0] * s + a[1]) * s + a[2]) * s + a[3]) * s + a[4]) * s + a[5]) * q / \
            (((((b[0] * s + b[1]) * s + b[2]) * s + b[3]) * s + b[4]) * s + 1.0)

    err = 0.5 * scipy.special.erfc(-x / math.sqrt(2.0)) - u
    g = err * math.sqrt(2.0 * math.pi) * np.exp(0.5 * x * x)
    x = x - g / (1.0 + 0.5 * x * g)
    return np.where(flip, -x, x)


# --- the generator --------------------------------------------------------

def _rxs_m_xs(state: int) -> int:
    word = (((state >> ((state >> 59) + 5)) ^ state) * _RXS_MULT) & _MASK64
    return (word >> 43) ^ word


def _advance_affine(state: int, delta: int, mult: int, inc: int) -> int:
    """State after ``delta`` LCG steps, via modular exponentiation of the
    affine map (O(log delta))."""
    acc_mult, acc_plus = 1, 0
    cur_mult, cur_plus = mult, inc
    while delta > 0:
        if delta & 1:
            acc_mult = (acc_mult * cur_mult) & _MASK64
            acc_plus = (acc_plus * cur_mult + cur_plus) & _MASK64
        cur_plus = ((cur_mult + 1) * cur_plus) & _MASK64
        cur_mult = (cur_mult * cur_mult) & _MASK64
        delta >>= 1
    return (acc_mult * state + acc_plus) & _MASK64


@dataclass(frozen=True)
class PcgStream:
    """Immutable handle for one generator stream.

    Index 1 is the first output; ``normal_at(i)`` never mutates anything,
    so concurrent access needs no locks.
    """

    seed: int = DEFAULT_SEED
    stream_id: int = DEFAULT_STREAM

    @property
    def increment(self) -> int:
        return ((self.stream_id << 1) | 1) & _MASK64

    @property
    def initial_state(self) -> int:
        inc = self.increment
        state = inc  # advance from 0
        state = (state + self.seed) & _MASK64
        return (state * _MULT + inc) & _MASK64

    def jump_to(self, i: int) -> int:
        """State after exactly ``i`` sequential advances."""
        if i < 0:
            raise ValueError("index must be non-negative")
        return _advance_affine(self.initial_state, i, _MULT, self.increment)

    def advance(self, state: int, steps: int = 1) -> int:
        return _advance_affine(state, steps, _MULT, self.increment)

    def uniform_at(self, i: int) -> float:
        """53-bit uniform in (0, 1) at 1-based index ``i``; an all-zero
        mantissa maps to 2^-53 so the normal transform stays finite."""
        if i < 1:
            raise ValueError("indices are 1-based")
        word = _rxs_m_xs(self.jump_to(i - 1))
        u = (word >> 11) * _INV53
        return u if u > 0.0 else _INV53

    def normal_at(self, i: int) -> float:
        return inv_normal_cdf(self.uniform_at(i))

    # vectorized paths ----------------------------------------------------

    def _states_at(self, indices: np.ndarray) -> np.ndarray:
        """Vectorized jump: states after indices[k] advances each."""
        idx = np.asarray(indices, dtype=np.uint64)
        acc_mult = np.ones_like(idx)
        acc_plus = np.zeros_like(idx)
        cur_mult = np.uint64(_MULT)
        cur_plus = np.uint64(self.increment)
        one = np.uint64(1)
        remaining = idx.copy()
        with np.errstate(over="ignore"):
            while np.any(remaining):
                bit = (remaining & one).astype(bool)
                if np.any(bit):
                    acc_mult[bit] = acc_mult[bit] * cur_mult
                    acc_plus[bit] = acc_plus[bit] * cur_mult + cur_plus
                cur_plus = (cur_mult + one) * cur_plus
                cur_mult = cur_mult * cur_mult
                remaining >>= one
            return acc_mult * np.uint64(self.initial_state) + acc_plus

    @staticmethod
    def _output64(states: np.ndarray) -> np.ndarray:
        with np.errstate(over="ignore"):
            shift = (states >> np.uint64(59)) + np.uint64(5)
            word = ((states >> shift) ^ states) * np.uint64(_RXS_MULT)
            return (word >> np.uint64(43)) ^ word

    def normals_matrix(self, row_starts, row_len: int) -> np.ndarray:
        """Normals at indices row_starts[k] .. row_starts[k]+row_len-1
        (1-based, inclusive), one row per start.

        Rows are jumped to in one vectorized pass, then advanced in
        lockstep, so the cost is O(row_len) vector operations.
        """
        starts = np.asarray(row_starts, dtype=np.uint64)
        if row_len < 0 or np.any(starts < 1):
            raise ValueError("row starts are 1-based and row_len non-negative")
        states = self._states_at(starts - np.uint64(1))
        out = np.empty((starts.size, row_len), dtype=float)
        mult = np.uint64(_MULT)
        inc = np.uint64(self.increment)
        with np.errstate(over="ignore"):
            for j in range(row_len):
                word = self._output64(states)
                out[:, j] = (word >> np.uint64(11)).astype(float) * _INV53
                states = states * mult + inc
        np.copyto(out, _INV53, where=(out == 0.0))
        return _inv_normal_cdf_vec(out)

    def normals_range(self, start: int, count: int, chunk: int = 1024) -> np.ndarray:
        """Normals at the contiguous 1-based index range [start, start+count)."""
        if count == 0:
            return np.empty(0)
        width = min(chunk, count)
        rows = [start + k for k in range(0, count, width)]
        return self.normals_matrix(rows, width).ravel()[:count]


def noise_vector(stream: PcgStream, sample: int, step: int, width: int, r: int) -> np.ndarray:
    """The ``step``-th width-``width`` block of sample ``sample``'s noise:
    entries z_{(i-1)*r*w + n*w + k} for k = 1..w, with 0-based step n.

    Sample blocks are disjoint by construction, so trajectories built from
    different samples are independent.
    """
    if sample < 1:
        raise ValueError("sample indices are 1-based")
    if not 0 <= step <= r - 1:
        raise ValueError("step must lie in [0, r-1]")
    start = (sample - 1) * r * width + step * width + 1
    return stream.normals_matrix([start], width)[0]


def noise_block(stream: PcgStream, first_sample: int, n_samples: int,
                steps: int, width: int, r: int) -> np.ndarray:
    """(n_samples, steps*width) array: rows are whole per-sample noise blocks
    for samples first_sample .. first_sample+n_samples-1."""
    starts = [(first_sample - 1 + k) * r * width + 1 for k in range(n_samples)]
    return stream.normals_matrix(starts, steps * width)
