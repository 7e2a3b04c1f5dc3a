"""Pathwise splitting schemes built from the RK4 Euler flow and the exact OU flow."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .flows import BlowUpError, FlowConfig, ForcingConfig, ou_exact_step, ou_params, rk4_flow
from .spectral import SpectralField

__all__ = [
    "SCHEMES",
    "SchemeSpec",
    "strang_path_step",
    "lie_path_step",
    "swss_path_step",
    "run_trajectory",
    "swss_trajectory",
]

SCHEMES = ("strang", "lie", "swss")


@dataclass(frozen=True)
class SchemeSpec:
    """Scheme kind, number of steps ``n`` and horizon ``T``.

    For ``swss`` the ordering is drawn once per trajectory unless
    ``per_step_ordering`` is set.
    """

    kind: str
    n: int
    T: float = 1.0
    per_step_ordering: bool = False

    def __post_init__(self):
        if self.kind not in SCHEMES:
            raise ValueError(f"unknown scheme {self.kind!r}; choose from {SCHEMES}")
        if self.n < 1:
            raise ValueError(f"need n >= 1 steps, got {self.n}")
        if not self.T > 0:
            raise ValueError(f"horizon must be positive, got {self.T}")

    @property
    def dt(self) -> float:
        return self.T / self.n


def strang_path_step(w: SpectralField, dt: float, draws, cfg: FlowConfig,
                     forcing: ForcingConfig, _params=None) -> SpectralField:
    """Half Euler step, full OU step, half Euler step."""
    params = _params if _params is not None else ou_params(dt, cfg, forcing)
    w = rk4_flow(w, 0.5 * dt, cfg)
    w = ou_exact_step(w, dt, params, draws)
    return rk4_flow(w, 0.5 * dt, cfg)


def lie_path_step(w: SpectralField, dt: float, draws, cfg: FlowConfig,
                  forcing: ForcingConfig, _params=None) -> SpectralField:
    """Euler step followed by OU step (first weak order)."""
    params = _params if _params is not None else ou_params(dt, cfg, forcing)
    return ou_exact_step(rk4_flow(w, dt, cfg), dt, params, draws)


def swss_path_step(w: SpectralField, dt: float, draws, ou_first, cfg: FlowConfig,
                   forcing: ForcingConfig, _params=None) -> SpectralField:
    """One sequential step; ``ou_first`` (per batch element) selects OU before Euler."""
    params = _params if _params is not None else ou_params(dt, cfg, forcing)
    ou_first = np.asarray(ou_first, dtype=bool)
    if not ou_first.any():
        return ou_exact_step(rk4_flow(w, dt, cfg), dt, params, draws)
    if ou_first.all():
        return rk4_flow(ou_exact_step(w, dt, params, draws), dt, cfg)
    sel = ou_first[..., None, None]
    x = ou_exact_step(w, dt, params, draws).coeffs
    x = np.where(sel, x, w.coeffs)
    x = rk4_flow(SpectralField(w.N, x), dt, cfg)
    y = ou_exact_step(x, dt, params, draws).coeffs
    return SpectralField(w.N, np.where(sel, x.coeffs, y))


def run_trajectory(w0: SpectralField, spec: SchemeSpec, normals, cfg: FlowConfig,
                   forcing: ForcingConfig, bernoulli=None) -> SpectralField:
    """Run ``spec.n`` steps of the chosen scheme.

    ``normals`` has shape ``batch + (n, d)``; ``bernoulli`` has shape ``batch``
    (or ``batch + (n,)`` with per-step ordering) and is required for ``swss``.
    A bit of 0 means Euler then OU within each step; 1 means OU then Euler.
    """
    normals = np.asarray(normals, dtype=float)
    n, d = spec.n, forcing.d
    if normals.shape[-2:] != (n, d):
        raise ValueError(f"need normals of trailing shape ({n}, {d}), got {normals.shape}")
    batch = normals.shape[:-2]
    if w0.batch_shape != batch:
        w0 = SpectralField(w0.N, np.broadcast_to(w0.coeffs, batch + w0.coeffs.shape[-2:]).copy())
    params = ou_params(spec.dt, cfg, forcing)
    if spec.kind == "swss":
        if bernoulli is None:
            raise ValueError("swss needs an ordering draw per trajectory")
        bits = np.asarray(bernoulli, dtype=bool)
        want = batch + ((n,) if spec.per_step_ordering else ())
        if bits.shape != want:
            raise ValueError(f"ordering draws must have shape {want}, got {bits.shape}")
    w = w0
    for i in range(n):
        g = normals[..., i, :]
        try:
            if spec.kind == "strang":
                w = strang_path_step(w, spec.dt, g, cfg, forcing, params)
            elif spec.kind == "lie":
                w = lie_path_step(w, spec.dt, g, cfg, forcing, params)
            else:
                b = bits[..., i] if spec.per_step_ordering else bits
                w = swss_path_step(w, spec.dt, g, b, cfg, forcing, params)
        except BlowUpError as exc:
            exc.step = i
            raise
    return w


def swss_trajectory(w0: SpectralField, spec: SchemeSpec, path_draws, cfg: FlowConfig,
                    forcing: ForcingConfig) -> SpectralField:
    """Symmetrically weighted sequential splitting for one set of path draws.

    ``path_draws`` is a :class:`~snsweak.qmc.PathDraws` (or any object with
    ``normals`` and ``bernoulli``); the ordering bit holds for the whole path.
    """
    if spec.kind != "swss":
        raise ValueError("swss_trajectory needs a SchemeSpec of kind 'swss'")
    normals = np.asarray(path_draws.normals)
    if normals.shape[-2:] != (spec.n, forcing.d):
        raise ValueError(
            f"insufficient draws: need ({spec.n}, {forcing.d}) normals, got {normals.shape}"
        )
    return run_trajectory(w0, spec, normals, cfg, forcing, path_draws.bernoulli)
