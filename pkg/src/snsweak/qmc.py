"""Sobol' points from Joe-Kuo direction numbers and Gaussian path draws."""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from importlib import resources
from pathlib import Path
import math

import numpy as np
from scipy.special import erfc

__all__ = [
    "BITS",
    "DirectionNumbers",
    "load_direction_numbers",
    "SobolStream",
    "sobol_point",
    "inverse_normal_cdf",
    "PathDraws",
    "path_draws",
    "path_draws_batch",
]

BITS = 32
_DEFAULT_FILE = "new-joe-kuo-6.21201"


@dataclass(frozen=True)
class DirectionNumbers:
    """Rows of a Joe-Kuo table: degree ``s``, coefficients ``a``, initial ``m``.

    Row ``i`` describes dimension ``i + 2``; dimension 1 is implicit.
    """

    s: tuple[int, ...]
    a: tuple[int, ...]
    m: tuple[tuple[int, ...], ...]

    @property
    def max_dimension(self) -> int:
        return len(self.s) + 1


def _parse(text: str, max_dimension: int | None) -> DirectionNumbers:
    s, a, m = [], [], []
    lines = text.splitlines()
    if not lines or not lines[0].split() or lines[0].split()[0] != "d":
        raise ValueError("direction-number file must start with the 'd s a m_i' header")
    for lineno, line in enumerate(lines[1:], start=2):
        parts = line.split()
        if not parts:
            continue
        d, deg, coef = int(parts[0]), int(parts[1]), int(parts[2])
        if d != len(s) + 2:
            raise ValueError(f"line {lineno}: expected dimension {len(s) + 2}, got {d}")
        mi = tuple(int(x) for x in parts[3:])
        if len(mi) != deg:
            raise ValueError(f"line {lineno}: degree {deg} but {len(mi)} initial numbers")
        for k, v in enumerate(mi, start=1):
            if v % 2 == 0 or v >= 2**k:
                raise ValueError(f"line {lineno}: m_{k} = {v} must be odd and < 2^{k}")
        s.append(deg)
        a.append(coef)
        m.append(mi)
        if max_dimension is not None and len(s) + 1 >= max_dimension:
            break
    return DirectionNumbers(tuple(s), tuple(a), tuple(m))


@lru_cache(maxsize=8)
def _load_cached(path: str | None, max_dimension: int | None) -> DirectionNumbers:
    if path is None:
        text = resources.files("snsweak").joinpath("data").joinpath(_DEFAULT_FILE).read_text()
    else:
        text = Path(path).read_text()
    return _parse(text, max_dimension)


def load_direction_numbers(path: str | Path | None = None,
                           max_dimension: int | None = None) -> DirectionNumbers:
    """Parse a ``new-joe-kuo-6`` style file (the bundled 21201-dim table by default)."""
    return _load_cached(None if path is None else str(path), max_dimension)


def _direction_matrix(table: DirectionNumbers, D: int) -> np.ndarray:
    """``V[j, b]``: direction number ``b + 1`` of dimension ``j + 1`` as a 32-bit integer."""
    V = np.zeros((D, BITS), dtype=np.uint64)
    V[0] = [1 << (BITS - 1 - b) for b in range(BITS)]
    for j in range(1, D):
        s, a, m = table.s[j - 1], table.a[j - 1], table.m[j - 1]
        v = [0] * (BITS + 1)
        for i in range(1, BITS + 1):
            if i <= s:
                v[i] = m[i - 1] << (BITS - i)
            else:
                x = v[i - s] ^ (v[i - s] >> s)
                for k in range(1, s):
                    if (a >> (s - 1 - k)) & 1:
                        x ^= v[i - k]
                v[i] = x
        V[j] = v[1:]
    return V


class SobolStream:
    """Random-access Sobol' points in Gray-code order (index 0 is the origin).

    Parameters
    ----------
    dimension : int
        Number of coordinates per point.
    direction_file : path, optional
        Alternative Joe-Kuo formatted table.
    shift_seed : int, optional
        If given, apply a random digital shift (XOR) to every point.  Off by
        default; the unshifted sequence is the deterministic estimator.
    """

    def __init__(self, dimension: int, direction_file=None, shift_seed: int | None = None):
        if dimension < 1:
            raise ValueError(f"dimension must be >= 1, got {dimension}")
        table = load_direction_numbers(direction_file, dimension)
        if dimension > table.max_dimension:
            raise ValueError(
                f"Sobol dimension {dimension} exceeds direction table size {table.max_dimension}"
            )
        self.dimension = dimension
        self._V = _direction_matrix(table, dimension)
        if shift_seed is None:
            self._shift = None
        else:
            rng = np.random.default_rng(shift_seed)
            self._shift = rng.integers(0, 2**BITS, size=dimension, dtype=np.uint64)

    def integers(self, indices) -> np.ndarray:
        """Points as 32-bit integers, shape ``(len(indices), dimension)``."""
        idx = np.asarray(indices, dtype=np.uint64).reshape(-1)
        if idx.size and int(idx.max()) >= 2**BITS:
            raise ValueError(f"Sobol index must be < 2^{BITS}")
        gray = idx ^ (idx >> np.uint64(1))
        out = np.zeros((idx.size, self.dimension), dtype=np.uint64)
        for b in range(BITS):
            bit = ((gray >> np.uint64(b)) & np.uint64(1)).astype(bool)
            if not bit.any():
                if not (gray >> np.uint64(b)).any():
                    break
                continue
            out[bit] ^= self._V[:, b]
        if self._shift is not None:
            out ^= self._shift
        return out

    def points(self, indices) -> np.ndarray:
        """Points in ``[0, 1)^dimension``, one row per index."""
        return self.integers(indices).astype(float) * (0.5**BITS)

    def point(self, i: int) -> np.ndarray:
        return self.points([i])[0]


def sobol_point(stream: SobolStream, i: int) -> np.ndarray:
    """The ``i``-th point of ``stream``."""
    return stream.point(i)


# Acklam's rational approximation (relative error ~1e-9 before refinement)
_A = (-3.969683028665376e01, 2.209460984245205e02, -2.759285104469687e02,
      1.383577518672690e02, -3.066479806614716e01, 2.506628277459239e00)
_B = (-5.447609879822406e01, 1.615858368580409e02, -1.556989798598866e02,
      6.680131188771972e01, -1.328068155288572e01)
_C = (-7.784894002430293e-03, -3.223964580411365e-01, -2.400758277161838e00,
      -2.549732539343734e00, 4.374664141464968e00, 2.938163982698783e00)
_D = (7.784695709041462e-03, 3.224671290700398e-01, 2.445134137142996e00,
      3.754408661907416e00)
_P_LOW = 0.02425


def _lower_tail(p: np.ndarray) -> np.ndarray:
    """Phi^{-1}(p) for 0 < p <= 1/2."""
    x = np.empty_like(p)
    tail = p < _P_LOW
    if tail.any():
        q = np.sqrt(-2.0 * np.log(p[tail]))
        num = ((((_C[0] * q + _C[1]) * q + _C[2]) * q + _C[3]) * q + _C[4]) * q + _C[5]
        den = (((_D[0] * q + _D[1]) * q + _D[2]) * q + _D[3]) * q + 1.0
        x[tail] = num / den
    mid = ~tail
    if mid.any():
        q = p[mid] - 0.5
        r = q * q
        num = (((((_A[0] * r + _A[1]) * r + _A[2]) * r + _A[3]) * r + _A[4]) * r + _A[5]) * q
        den = ((((_B[0] * r + _B[1]) * r + _B[2]) * r + _B[3]) * r + _B[4]) * r + 1.0
        x[mid] = num / den
    # one Halley step on Phi(x) - p
    e = 0.5 * erfc(-x / math.sqrt(2.0)) - p
    u = e * math.sqrt(2.0 * math.pi) * np.exp(0.5 * x * x)
    return x - u / (1.0 + 0.5 * x * u)


def inverse_normal_cdf(u):
    """Standard normal quantile, absolute error below 1e-9 on (0, 1)."""
    arr = np.asarray(u, dtype=float)
    if np.any(~(arr > 0) | ~(arr < 1)):
        raise ValueError("inverse_normal_cdf requires 0 < u < 1")
    flat = arr.reshape(-1)
    upper = flat > 0.5
    p = np.where(upper, 1.0 - flat, flat)
    x = _lower_tail(p)
    x = np.where(upper, -x, x)
    x[flat == 0.5] = 0.0
    x = x.reshape(arr.shape)
    return float(x) if np.ndim(u) == 0 else x


@dataclass(frozen=True, eq=False)
class PathDraws:
    """Normals of shape ``(n, d)`` and the ordering bit(s) for one path."""

    normals: np.ndarray
    bernoulli: np.ndarray


LAYOUTS = ("bridge", "step-major")


def draw_dimension(n: int, d: int, per_step_ordering: bool = False) -> int:
    return n * d + (n if per_step_ordering else 1)


@lru_cache(maxsize=32)
def bridge_matrix(n: int) -> np.ndarray:
    """Orthogonal ``(n, n)`` map from bridge variates to normalized step increments.

    Column 0 sets the terminal value, later columns refine by bisection, so
    ``Q @ eta`` is again i.i.d. standard normal while the leading coordinates
    carry most of the path's variance.
    """
    W = np.zeros((n + 1, n))
    W[n, 0] = math.sqrt(n)
    col = 1
    queue = [(0, n)]
    while queue:
        a, b = queue.pop(0)
        if b - a < 2:
            continue
        m = (a + b) // 2
        W[m] = ((b - m) * W[a] + (m - a) * W[b]) / (b - a)
        W[m, col] = math.sqrt((m - a) * (b - m) / (b - a))
        col += 1
        queue += [(a, m), (m, b)]
    Q = np.diff(W, axis=0)
    Q.setflags(write=False)
    return Q


def path_draws_batch(stream: SobolStream, path_indices, n: int, d: int,
                     per_step_ordering: bool = False, layout: str = "bridge"):
    """Normals ``(K, n, d)`` and bits ``(K,)`` (or ``(K, n)``) for many paths.

    Path ``k`` uses Sobol index ``k + 1`` (the origin is skipped).  Coordinate
    ``l * d + j`` feeds level ``l`` of forcing mode ``j``; with the
    ``"bridge"`` layout level 0 fixes each mode's total increment and later
    levels bisect, with ``"step-major"`` level ``l`` is simply step ``l``.
    The trailing coordinate(s) give the ordering bits (bit = u >= 1/2).
    """
    if layout not in LAYOUTS:
        raise ValueError(f"unknown layout {layout!r}; choose from {LAYOUTS}")
    D = draw_dimension(n, d, per_step_ordering)
    if stream.dimension < D:
        raise ValueError(f"stream dimension {stream.dimension} < required {D}")
    idx = np.asarray(path_indices, dtype=np.int64).reshape(-1)
    if idx.size and idx.min() < 0:
        raise ValueError("path indices must be nonnegative")
    u = stream.points(idx + 1)
    eta = inverse_normal_cdf(u[:, : n * d]).reshape(idx.size, n, d)
    if layout == "bridge" and n > 1:
        normals = np.einsum("il,kld->kid", bridge_matrix(n), eta)
    else:
        normals = eta
    bits = u[:, n * d: D] >= 0.5
    if not per_step_ordering:
        bits = bits[:, 0]
    return normals, bits


def path_draws(stream: SobolStream, path_index: int, n: int, d: int,
               per_step_ordering: bool = False, layout: str = "bridge") -> PathDraws:
    normals, bits = path_draws_batch(stream, [path_index], n, d, per_step_ordering, layout)
    return PathDraws(normals[0], bits[0])
