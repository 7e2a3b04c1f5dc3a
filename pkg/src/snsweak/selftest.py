"""Fast consistency checks run by ``snsweak selftest``."""

from __future__ import annotations

import numpy as np

from .cubature import degree3_formula, validate_formula
from .flows import FlowConfig, ForcingConfig, ou_exact_step, ou_params
from .harness import ExperimentConfig, run_estimate
from .qmc import SobolStream
from .spectral import SpectralField, from_grid, nonlinear_term, to_grid


def _skew(rng):
    w = SpectralField.random(12, rng, (8,))
    b = nonlinear_term(w)
    rel = np.abs(b.inner(w)) / (w.norm(1) ** 2)
    return float(rel.max()) < 1e-10, f"max |<B(w),w>| / |w|_1^2 = {rel.max():.1e}"


def _roundtrip(rng):
    w = SpectralField.random(10, rng, (4,))
    back = from_grid(to_grid(w), 10)
    err = np.abs(back.coeffs - w.coeffs).max() / np.abs(w.coeffs).max()
    return err < 1e-12, f"relative error {err:.1e}"


def _ou_variance(rng):
    cfg = FlowConfig(nu=0.01, N=4)
    forcing = ForcingConfig.standard()
    p = ou_params(1.0, cfg, forcing)
    g = rng.standard_normal((200_000, forcing.d))
    out = ou_exact_step(SpectralField.zeros(4, (g.shape[0],)), 1.0, p, g)
    r, c = p.rows, p.cols
    var = out.coeffs[:, r, c].var(axis=0)
    z = np.abs(var - p.sigma**2) / (p.sigma**2 * np.sqrt(2.0 / g.shape[0]))
    return bool(np.all(z < 4)), f"max z-score {z.max():.2f}"


def _cubature():
    bad = [d for d in (1, 2, 4, 8) if not validate_formula(degree3_formula(d))]
    return not bad, "degree 3 moments exact for d = 1, 2, 4, 8" if not bad else f"failed d={bad}"


def _sobol():
    from scipy.stats import qmc

    ours = SobolStream(32).points(np.arange(1024))
    ref = qmc.Sobol(32, scramble=False).random(1024)
    ok = np.array_equal(ours, ref)
    return ok, "first 1024 points of 32 dimensions " + ("bit-identical" if ok else "differ")


def _workers():
    cfg = ExperimentConfig(N=4, n=4, K=48, chunk_size=16)
    a = run_estimate(cfg).estimates
    b = run_estimate(cfg.replace(workers=2)).estimates
    return a == b, "1 and 2 workers " + ("agree bit-exactly" if a == b else "differ")


def run_selftest():
    rng = np.random.default_rng(20240601)
    checks = [
        ("nonlinearity skew-symmetry", lambda: _skew(rng)),
        ("grid round trip", lambda: _roundtrip(rng)),
        ("OU step variance", lambda: _ou_variance(rng)),
        ("cubature moments", _cubature),
        ("Sobol points", _sobol),
        ("worker reproducibility", _workers),
    ]
    out = []
    for name, check in checks:
        try:
            ok, detail = check()
        except Exception as exc:  # noqa: BLE001
            ok, detail = False, f"raised {exc!r}"
        out.append((name, bool(ok), detail))
    return out
