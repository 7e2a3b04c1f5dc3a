"""Mean-zero vorticity fields on the torus [0, 2pi)^2 in the real Laplace eigenbasis.

A field of truncation degree ``N`` is stored as a real array of shape
``(..., 2N+1, 2N+1)``; entry ``[k1 + N, k2 + N]`` is the coefficient of

    f_k(x) = (2 pi^2)^(-1/2) sin(k.x)   if k2 > 0, or k2 == 0 and k1 > 0,
    f_k(x) = (2 pi^2)^(-1/2) cos(k.x)   otherwise,

so that the L2 norm is the Euclidean norm of the array.  Leading axes are
batch axes: one array can hold an ensemble of independent fields.  The
``(0, 0)`` entry is always zero.

The nonlinearity is evaluated pseudospectrally on a grid of at least
``3N + 1`` points per dimension, which removes every aliased contribution
to the retained modes (the 2/3 rule).
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
import math

import numpy as np
import scipy.fft

__all__ = [
    "SCALE",
    "TruncationError",
    "SpectralField",
    "is_positive",
    "grid_size",
    "basis_field",
    "project",
    "biot_savart",
    "nonlinear_term",
    "sobolev_norm",
    "to_grid",
    "from_grid",
]

#: sqrt(2 pi^2): L2 norm of sin(k.x) on [0, 2pi)^2.
SCALE = math.sqrt(2.0) * math.pi


class TruncationError(ValueError):
    """A wavenumber lies outside the truncation or is the mean mode."""


def is_positive(k1: int, k2: int) -> bool:
    """Whether ``(k1, k2)`` carries a sine (k2 > 0, or k2 == 0 and k1 > 0)."""
    return k2 > 0 or (k2 == 0 and k1 > 0)


def _smooth23(n: int) -> bool:
    for p in (2, 3):
        while n % p == 0:
            n //= p
    return n == 1


@lru_cache(maxsize=None)
def grid_size(N: int) -> int:
    """Smallest even 3-smooth grid size G >= 3N + 1."""
    if N < 1:
        raise ValueError(f"truncation degree must be >= 1, got {N}")
    G = 3 * N + 1
    G += G % 2
    while not _smooth23(G):
        G += 2
    return G


class _Modes:
    """Per-degree wavenumber tables (cached, read-only)."""

    def __init__(self, N: int, G: int):
        self.N = N
        self.G = G
        ks = np.arange(-N, N + 1)
        self.k1, self.k2 = np.meshgrid(ks, ks, indexing="ij")
        self.ksq = (self.k1**2 + self.k2**2).astype(float)
        self.positive = (self.k2 > 0) | ((self.k2 == 0) & (self.k1 > 0))
        inv = np.zeros_like(self.ksq)
        inv[self.ksq > 0] = 1.0 / self.ksq[self.ksq > 0]
        self.inv_ksq = inv
        # half plane k2 >= 0 in rfft layout
        self.rows = np.mod(ks, G)
        self.hk1 = self.k1[:, N:].astype(float)
        self.hk2 = self.k2[:, N:].astype(float)
        self.hinv_ksq = inv[:, N:]
        self.nrow = N + 1
        # half-plane multipliers giving u1, u2, dw/dx1, dw/dx2 (scaled for the inverse FFT)
        ik1, ik2 = 1j * self.hk1, 1j * self.hk2
        psi = -self.hinv_ksq
        self.grad = np.stack([ik2 * psi, -ik1 * psi, ik1, ik2]) * float(G * G)
        self.grad_half = self.grad / (2.0 * SCALE)
        for a in ("k1", "k2", "ksq", "positive", "inv_ksq", "hk1", "hk2", "hinv_ksq", "grad",
                  "grad_half"):
            getattr(self, a).setflags(write=False)


@lru_cache(maxsize=None)
def _modes(N: int, G: int | None = None) -> _Modes:
    if G is None:
        G = grid_size(N)
    return _Modes(N, G)


def _degree(coeffs: np.ndarray) -> int:
    n = coeffs.shape[-1]
    if coeffs.ndim < 2 or coeffs.shape[-2] != n or n % 2 == 0 or n < 3:
        raise ValueError(f"coefficient array must end in (2N+1, 2N+1), got {coeffs.shape}")
    return (n - 1) // 2


@dataclass(frozen=True, eq=False)
class SpectralField:
    """Real coefficients of a field (or a batch of fields) in ``H_N``.

    ``coeffs[..., k1 + N, k2 + N]`` multiplies ``f_(k1, k2)``.
    """

    N: int
    coeffs: np.ndarray

    def __post_init__(self):
        c = np.asarray(self.coeffs, dtype=float)
        if _degree(c) != self.N:
            raise ValueError(f"coeffs shape {c.shape} does not match N={self.N}")
        if np.any(c[..., self.N, self.N] != 0.0):
            raise TruncationError("mean mode (0, 0) must vanish")
        object.__setattr__(self, "coeffs", c)

    @classmethod
    def zeros(cls, N: int, batch: tuple[int, ...] = ()) -> "SpectralField":
        return cls(N, np.zeros(batch + (2 * N + 1, 2 * N + 1)))

    @classmethod
    def from_modes(cls, N: int, modes: dict) -> "SpectralField":
        """Build a single field from ``{(k1, k2): value}``."""
        c = np.zeros((2 * N + 1, 2 * N + 1))
        for k, v in modes.items():
            _check_index(k, N)
            c[k[0] + N, k[1] + N] += v
        return cls(N, c)

    @classmethod
    def random(cls, N: int, rng: np.random.Generator, batch: tuple[int, ...] = (),
               decay: float = 0.0) -> "SpectralField":
        """Gaussian coefficients with standard deviation ``|k|^(-decay)``."""
        m = _modes(N)
        c = rng.standard_normal(batch + m.ksq.shape)
        with np.errstate(divide="ignore"):
            scale = np.where(m.ksq > 0, m.ksq ** (-decay / 2.0), 0.0)
        return cls(N, c * scale)

    @property
    def batch_shape(self) -> tuple[int, ...]:
        return self.coeffs.shape[:-2]

    def coefficient(self, k) -> np.ndarray | float:
        _check_index(k, self.N)
        return self.coeffs[..., k[0] + self.N, k[1] + self.N]

    def norm(self, s: float = 0.0):
        return sobolev_norm(self, s)

    def __getitem__(self, idx) -> "SpectralField":
        return SpectralField(self.N, self.coeffs[idx])

    def __add__(self, other: "SpectralField") -> "SpectralField":
        _same_degree(self, other)
        return SpectralField(self.N, self.coeffs + other.coeffs)

    def __sub__(self, other: "SpectralField") -> "SpectralField":
        _same_degree(self, other)
        return SpectralField(self.N, self.coeffs - other.coeffs)

    def __mul__(self, alpha: float) -> "SpectralField":
        return SpectralField(self.N, self.coeffs * alpha)

    __rmul__ = __mul__

    def __neg__(self) -> "SpectralField":
        return SpectralField(self.N, -self.coeffs)

    def inner(self, other: "SpectralField"):
        """L2 scalar product (per batch element)."""
        _same_degree(self, other)
        return np.sum(self.coeffs * other.coeffs, axis=(-2, -1))

    def __repr__(self):
        return f"SpectralField(N={self.N}, batch={self.batch_shape})"


def _same_degree(a: SpectralField, b: SpectralField) -> None:
    if a.N != b.N:
        raise ValueError(f"degree mismatch: {a.N} vs {b.N}")


def _check_index(k, N: int) -> None:
    k1, k2 = int(k[0]), int(k[1])
    if k1 == 0 and k2 == 0:
        raise TruncationError("wavenumber (0, 0) is excluded (mean-zero fields)")
    if max(abs(k1), abs(k2)) > N:
        raise TruncationError(
            f"wavenumber ({k1}, {k2}) outside H_N: max(|k1|, |k2|) = "
            f"{max(abs(k1), abs(k2))} > N = {N}"
        )


def basis_field(k, N: int) -> SpectralField:
    """The eigenfunction ``f_k`` as an element of ``H_N``."""
    _check_index(k, N)
    return SpectralField.from_modes(N, {tuple(k): 1.0})


def project(w: SpectralField, M: int) -> SpectralField:
    """Galerkin projection onto ``H_M`` (zero-padding when ``M > N``)."""
    if M < 1:
        raise ValueError(f"projection degree must be >= 1, got {M}")
    N = w.N
    if M == N:
        return SpectralField(N, w.coeffs.copy())
    out = np.zeros(w.batch_shape + (2 * M + 1, 2 * M + 1))
    r = min(M, N)
    out[..., M - r:M + r + 1, M - r:M + r + 1] = w.coeffs[..., N - r:N + r + 1, N - r:N + r + 1]
    return SpectralField(M, out)


# -- real <-> complex exponential coefficients -------------------------------

def _to_complex(coeffs: np.ndarray, m: _Modes) -> np.ndarray:
    """Coefficients c_k of w = sum c_k exp(i k.x), full (2N+1)^2 layout."""
    flip = coeffs[..., ::-1, ::-1]
    c = np.where(m.positive, flip - 1j * coeffs, coeffs + 1j * flip)
    return c / (2.0 * SCALE)


def _from_complex(c: np.ndarray, m: _Modes) -> np.ndarray:
    out = np.where(m.positive, -2.0 * SCALE * c.imag, 2.0 * SCALE * c.real)
    out[..., m.N, m.N] = 0.0
    return out


def _half_to_full(h: np.ndarray, N: int) -> np.ndarray:
    """Complete a k2 >= 0 half-plane array by Hermitian symmetry."""
    c = np.empty(h.shape[:-1] + (2 * N + 1,), dtype=complex)
    c[..., N:] = h
    c[..., :N] = np.conj(h[..., ::-1, N:0:-1])
    return c


def _half_to_grid(h: np.ndarray, m: _Modes) -> np.ndarray:
    G = m.G
    X = np.zeros(h.shape[:-2] + (G, G // 2 + 1), dtype=complex)
    X[..., m.rows, :m.nrow] = h * (G * G)
    return scipy.fft.irfft2(X, s=(G, G), axes=(-2, -1))


def _grid_to_half(g: np.ndarray, m: _Modes) -> np.ndarray:
    G = m.G
    Y = scipy.fft.rfft2(g, axes=(-2, -1))
    return Y[..., m.rows, :m.nrow] / (G * G)


def to_grid(w: SpectralField, G: int | None = None) -> np.ndarray:
    """Sample ``w`` on the uniform ``G x G`` grid ``x = 2 pi j / G``."""
    if G is None:
        G = grid_size(w.N)
    if G < 2 * w.N + 2:
        raise ValueError(f"grid size {G} cannot represent degree {w.N}")
    m = _modes(w.N, G)
    c = _to_complex(w.coeffs, m)
    return _half_to_grid(c[..., w.N:], m)


def from_grid(values: np.ndarray, N: int) -> SpectralField:
    """Galerkin projection of grid samples onto ``H_N``."""
    values = np.asarray(values, dtype=float)
    G = values.shape[-1]
    if values.shape[-2] != G or G < 2 * N + 2:
        raise ValueError(f"grid of shape {values.shape} cannot resolve degree {N}")
    m = _modes(N, G)
    c = _half_to_full(_grid_to_half(values, m), N)
    return SpectralField(N, _from_complex(c, m))


# -- operators -----------------------------------------------------------------

def _derivative(coeffs: np.ndarray, kj: np.ndarray) -> np.ndarray:
    # d/dx_j maps sin <-> cos:  (d_j w)_k = -k_j w_{-k}
    return -kj * coeffs[..., ::-1, ::-1]


def biot_savart(w: SpectralField) -> tuple[SpectralField, SpectralField]:
    """Velocity ``u = K w`` with ``d2 u1 - d1 u2 = w`` and ``div u = 0``.

    Uses the streamfunction ``psi = Laplace^-1 w`` and ``u = (d2 psi, -d1 psi)``.
    Both components are mean zero and are returned in the same basis.
    """
    m = _modes(w.N)
    psi = -w.coeffs * m.inv_ksq
    u1 = _derivative(psi, m.k2)
    u2 = -_derivative(psi, m.k1)
    return SpectralField(w.N, u1), SpectralField(w.N, u2)


def _nonlinear(coeffs: np.ndarray, m: _Modes, want_umax: bool = False):
    """pi_N B(Kw, w) on raw coefficient arrays, optionally with max |Kw|.

    The transforms are pruned: only the N + 1 retained k2 columns go through
    the k1-axis FFT, in both directions.
    """
    N, G = m.N, m.G
    # half-plane exponential coefficients, 1 / (2 SCALE) folded into the multipliers
    ch = coeffs[..., N:]
    fh = coeffs[..., ::-1, N::-1]
    pos = m.positive[:, N:]
    c = np.where(pos, fh - 1j * ch, ch + 1j * fh)
    X = np.zeros(c.shape[:-2] + (4, G, N + 1), dtype=complex)
    X[..., m.rows, :] = c[..., None, :, :] * m.grad_half
    P = np.zeros(X.shape[:-1] + (G // 2 + 1,), dtype=complex)
    P[..., : N + 1] = scipy.fft.ifft(X, axis=-2, overwrite_x=True)
    u1, u2, w1, w2 = np.moveaxis(scipy.fft.irfft(P, n=G, axis=-1, overwrite_x=True), -3, 0)
    prod = u1 * w1
    prod += u2 * w2
    Y = scipy.fft.rfft(prod, axis=-1)[..., : N + 1]
    Y = scipy.fft.fft(Y, axis=-2, overwrite_x=True)[..., m.rows, :]
    # back to the real basis; the k2 < 0 columns follow from Hermitian symmetry
    s = -2.0 * SCALE / (G * G)
    out = np.empty(coeffs.shape)
    out[..., N:] = np.where(pos, -s * Y.imag, s * Y.real)
    out[..., :N] = s * Y.real[..., ::-1, N:0:-1]
    out[..., N, N] = 0.0
    if want_umax:
        umax = np.sqrt(np.max(u1 * u1 + u2 * u2, axis=(-2, -1)))
        return out, umax
    return out


def nonlinear_term(w: SpectralField) -> SpectralField:
    """``pi_N B(Kw, w)`` with ``B(u, w) = -(u . grad) w``, dealiased."""
    return SpectralField(w.N, _nonlinear(w.coeffs, _modes(w.N)))


def max_velocity(w: SpectralField) -> np.ndarray | float:
    """Maximum of ``|Kw|`` over the dealiased grid."""
    return _nonlinear(w.coeffs, _modes(w.N), want_umax=True)[1]


def sobolev_norm(w: SpectralField, s: float = 0.0):
    """``sqrt(sum |k|^(2s) w_k^2)``; ``s = 0`` is the L2 norm."""
    m = _modes(w.N)
    if s == 0:
        weight = 1.0
    else:
        with np.errstate(divide="ignore"):
            weight = np.where(m.ksq > 0, m.ksq ** float(s), 0.0)
    return np.sqrt(np.sum(weight * w.coeffs**2, axis=(-2, -1)))
