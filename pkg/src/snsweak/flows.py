"""The two split sub-flows of the Galerkin system.

* the deterministic vorticity (Euler, for ``epsilon = 1``) flow, integrated
  with classical RK4 under an imaginary-axis CFL rule;
* the Ornstein-Uhlenbeck flow of the stochastic heat equation, sampled
  exactly in distribution.
"""

from __future__ import annotations

from dataclasses import dataclass, field
import math

import numpy as np

from .spectral import SpectralField, TruncationError, _check_index, _modes, _nonlinear

__all__ = [
    "RK4_IMAG_LIMIT",
    "BlowUpError",
    "FlowConfig",
    "ForcingConfig",
    "OUStepParams",
    "euler_rhs",
    "rk4_flow",
    "rk4_substeps",
    "ou_params",
    "ou_exact_step",
    "ou_psi_expectation",
]

#: Stability bound of classical RK4 on the imaginary axis (exact value 2*sqrt(2)).
RK4_IMAG_LIMIT = 2.8


class BlowUpError(FloatingPointError):
    """Non-finite state produced during time stepping."""

    def __init__(self, message, substep=None, batch_index=None):
        super().__init__(message)
        self.substep = substep
        self.batch_index = batch_index
        self.step = None


@dataclass(frozen=True)
class FlowConfig:
    """Viscosity, split fraction and truncation of the Galerkin system.

    ``epsilon`` is the share of the viscosity given to the OU flow; with
    ``epsilon = 1`` the deterministic flow is the inviscid Euler equation.
    """

    nu: float
    N: int
    epsilon: float = 1.0
    cfl_safety: float = 0.8

    def __post_init__(self):
        if not self.nu > 0:
            raise ValueError(f"nu must be positive, got {self.nu}")
        if not 0 < self.epsilon <= 1:
            raise ValueError(f"epsilon must lie in (0, 1], got {self.epsilon}")
        if not 0 < self.cfl_safety <= 1:
            raise ValueError(f"cfl_safety must lie in (0, 1], got {self.cfl_safety}")
        if self.N < 1:
            raise ValueError(f"N must be >= 1, got {self.N}")

    @property
    def euler_viscosity(self) -> float:
        return (1.0 - self.epsilon) * self.nu

    @property
    def ou_viscosity(self) -> float:
        return self.epsilon * self.nu


@dataclass(frozen=True)
class ForcingConfig:
    """Forced wavenumbers ``k_j`` with amplitudes ``q_j``.

    The theory asks for ``q_j != 0`` (see :attr:`nondegenerate`); zero
    amplitudes are accepted so that unforced test problems can reuse the
    same draw layout.
    """

    wavenumbers: tuple[tuple[int, int], ...]
    amplitudes: tuple[float, ...]

    def __post_init__(self):
        ks = tuple((int(k[0]), int(k[1])) for k in self.wavenumbers)
        qs = tuple(float(q) for q in self.amplitudes)
        if len(ks) != len(qs):
            raise ValueError("wavenumbers and amplitudes differ in length")
        if len(set(ks)) != len(ks):
            raise ValueError(f"forced wavenumbers must be distinct: {ks}")
        for k, q in zip(ks, qs):
            if k == (0, 0):
                raise TruncationError("cannot force the mean mode (0, 0)")
            if not math.isfinite(q):
                raise ValueError(f"amplitude of mode {k} must be finite, got {q}")
        object.__setattr__(self, "wavenumbers", ks)
        object.__setattr__(self, "amplitudes", qs)

    @classmethod
    def standard(cls, q: float = 1.0) -> "ForcingConfig":
        """Modes (1,0), (-1,0), (1,1), (-1,-1), all with amplitude ``q``."""
        return cls(((1, 0), (-1, 0), (1, 1), (-1, -1)), (q,) * 4)

    @property
    def d(self) -> int:
        return len(self.wavenumbers)

    @property
    def nondegenerate(self) -> bool:
        return all(q != 0 for q in self.amplitudes)

    def check_within(self, N: int) -> None:
        for k in self.wavenumbers:
            _check_index(k, N)

    def indices(self, N: int) -> tuple[np.ndarray, np.ndarray]:
        self.check_within(N)
        k = np.array(self.wavenumbers, dtype=int).reshape(-1, 2)
        return k[:, 0] + N, k[:, 1] + N

    def vectors(self, N: int) -> np.ndarray:
        """The fields ``q_j f_{k_j}`` stacked as a ``(d, 2N+1, 2N+1)`` array."""
        i1, i2 = self.indices(N)
        out = np.zeros((self.d, 2 * N + 1, 2 * N + 1))
        out[np.arange(self.d), i1, i2] = self.amplitudes
        return out


def _as_field(w, N=None) -> SpectralField:
    if isinstance(w, SpectralField):
        return w
    w = np.asarray(w, dtype=float)
    return SpectralField((w.shape[-1] - 1) // 2, w)


def _rhs(coeffs: np.ndarray, damping: float, m, want_umax=False):
    out = _nonlinear(coeffs, m, want_umax)
    if damping == 0.0:
        return out
    if want_umax:
        b, umax = out
        return b - damping * m.ksq * coeffs, umax
    return out - damping * m.ksq * coeffs


def euler_rhs(w: SpectralField, cfg: FlowConfig) -> SpectralField:
    """``(1 - epsilon) nu Laplace(w) + pi_N B(Kw, w)``."""
    return SpectralField(w.N, _rhs(w.coeffs, cfg.euler_viscosity, _modes(w.N)))


def rk4_substeps(umax, t: float, N: int, cfl_safety: float) -> np.ndarray:
    """Substep count with ``N * umax * h <= 2.8 * cfl_safety`` (at least 1)."""
    umax = np.asarray(umax, dtype=float)
    if not np.all(np.isfinite(umax)):
        raise BlowUpError("non-finite velocity before RK4 flow", substep=0)
    m = np.ceil(N * umax * t / (RK4_IMAG_LIMIT * cfl_safety))
    return np.maximum(m, 1).astype(int)


def _rk4(coeffs: np.ndarray, t: float, damping: float, m, cfl_safety: float,
         forcing_rate: np.ndarray | None = None):
    """Classical RK4 over ``[0, t]`` for a batch of states.

    ``forcing_rate`` is an optional constant additive term (shape broadcastable
    to ``coeffs``).  Returns the final states and the substep counts.
    """
    if t == 0:
        return coeffs.copy(), np.zeros(coeffs.shape[:-2], dtype=int)
    k1, umax = _rhs(coeffs, damping, m, want_umax=True)
    steps = rk4_substeps(umax, t, m.N, cfl_safety)
    batch = coeffs.shape[:-2]
    x = coeffs.copy()
    flat_x = x.reshape((-1,) + x.shape[-2:])
    flat_k1 = k1.reshape(flat_x.shape)
    flat_steps = steps.reshape(-1)
    fr = None
    if forcing_rate is not None:
        fr = np.broadcast_to(forcing_rate, x.shape).reshape(flat_x.shape)
    nmax = int(flat_steps.max()) if flat_steps.size else 0

    def f(y, sel):
        r = _rhs(y, damping, m)
        return r if fr is None else r + fr[sel]

    for s in range(nmax):
        sel = np.nonzero(flat_steps > s)[0]
        whole = sel.size == flat_x.shape[0]
        if whole:
            sel = slice(None)
        y = flat_x[sel]
        h = (t / flat_steps[sel])[..., None, None]
        if s == 0:
            a = flat_k1[sel] if fr is None else flat_k1[sel] + fr[sel]
        else:
            a = f(y, sel)
        b = f(y + 0.5 * h * a, sel)
        c = f(y + 0.5 * h * b, sel)
        e = f(y + h * c, sel)
        y = y + (h / 6.0) * (a + 2.0 * b + 2.0 * c + e)
        if not np.all(np.isfinite(y)):
            bad = np.nonzero(~np.all(np.isfinite(y), axis=(-2, -1)))[0]
            idx = bad if whole else sel[bad]
            raise BlowUpError(
                f"non-finite coefficients after RK4 substep {s + 1}", substep=s + 1,
                batch_index=np.unravel_index(idx, batch) if batch else None,
            )
        flat_x[sel] = y
    return x, steps


def rk4_flow(w0: SpectralField, t: float, cfg: FlowConfig, return_substeps: bool = False):
    """Integrate the deterministic vorticity equation over ``[0, t]`` with RK4.

    The substep count is fixed once per call from ``max |K w0|`` on the
    dealiased grid.  Works on batches; each batch element gets its own count.
    """
    if t < 0:
        raise ValueError(f"duration must be nonnegative, got {t}")
    w0 = _as_field(w0)
    out, steps = _rk4(w0.coeffs, float(t), cfg.euler_viscosity, _modes(w0.N), cfg.cfl_safety)
    res = SpectralField(w0.N, out)
    return (res, steps) if return_substeps else res


@dataclass(frozen=True, eq=False)
class OUStepParams:
    """Decay factors ``exp(lambda_k t)`` and forced-mode standard deviations.

    ``lambda_k = -epsilon nu |k|^2``;
    ``sigma_j^2 = q_j^2 (1 - exp(2 t lambda_j)) / (-2 lambda_j)``.
    """

    t: float
    decay: np.ndarray
    sigma: np.ndarray
    rows: np.ndarray
    cols: np.ndarray
    amplitudes: np.ndarray = field(repr=False)

    @property
    def d(self) -> int:
        return self.sigma.shape[0]


def _variance_factor(lam: np.ndarray, t: float) -> np.ndarray:
    # (1 - exp(2 t lam)) / (-2 lam), continuous at lam = 0
    lam = np.asarray(lam, dtype=float)
    x = 2.0 * t * lam
    safe = np.where(lam == 0, 1.0, lam)
    return np.where(lam == 0, t, -np.expm1(x) / (-2.0 * safe))


def ou_params(t: float, cfg: FlowConfig, forcing: ForcingConfig) -> OUStepParams:
    if not t > 0:
        raise ValueError(f"OU step duration must be positive, got {t}")
    m = _modes(cfg.N)
    rows, cols = forcing.indices(cfg.N)
    lam_all = -cfg.ou_viscosity * m.ksq
    decay = np.exp(lam_all * t)
    decay[cfg.N, cfg.N] = 0.0
    q = np.asarray(forcing.amplitudes)
    sigma = np.abs(q) * np.sqrt(_variance_factor(lam_all[rows, cols], t))
    return OUStepParams(float(t), decay, sigma, rows, cols, q)


def ou_exact_step(w0: SpectralField, t: float, params: OUStepParams, gaussians) -> SpectralField:
    """Exact OU transition: decay every mode, add ``sigma_j g_j`` to forced mode ``j``.

    ``gaussians`` has shape ``batch + (d,)`` (or ``(d,)``, broadcast).
    Amplitude signs are carried by the draws, which is equivalent in law.
    """
    w0 = _as_field(w0)
    if not math.isclose(t, params.t, rel_tol=1e-14, abs_tol=0.0):
        raise ValueError(f"params were built for t={params.t}, not t={t}")
    g = np.asarray(gaussians, dtype=float)
    if g.shape[-1:] != (params.d,):
        raise ValueError(f"expected {params.d} gaussian draws per state, got shape {g.shape}")
    out = w0.coeffs * params.decay
    out = np.broadcast_to(out, np.broadcast_shapes(out.shape, g.shape[:-1] + out.shape[-2:])).copy()
    out[..., params.rows, params.cols] += params.sigma * np.sign(params.amplitudes) * g
    return SpectralField(w0.N, out)


def ou_psi_expectation(w0: SpectralField, t: float, params: OUStepParams, eta: float):
    """Closed form of ``E[exp(eta ||w2(t, w0)||^2)]`` for the exact OU flow.

    With ``S = exp(t epsilon nu Laplace) w0``, ``b_j = <S, f_{k_j}>`` and
    ``sigma_j`` as in ``params``::

        prod_j (1 - 2 eta sigma_j^2)^(-1/2)
            * exp(eta ||S||^2 + sum_j 2 eta^2 b_j^2 sigma_j^2 / (1 - 2 eta sigma_j^2))
    """
    w0 = _as_field(w0)
    s2 = params.sigma**2
    gap = 1.0 - 2.0 * eta * s2
    if np.any(gap <= 0):
        j = int(np.argmin(gap))
        raise ValueError(
            f"eta={eta} too large: 1 - 2 eta sigma^2 = {gap[j]:.3g} <= 0 for forced mode {j}"
        )
    S = w0.coeffs * params.decay
    b = S[..., params.rows, params.cols]
    expo = eta * np.sum(S * S, axis=(-2, -1)) + np.sum(2.0 * eta**2 * b**2 * s2 / gap, axis=-1)
    return np.exp(expo) / np.sqrt(np.prod(gap))
