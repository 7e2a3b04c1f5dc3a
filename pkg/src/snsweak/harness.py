"""Experiment orchestration: QMC path ensembles, convergence studies, CSV output."""

from __future__ import annotations

import csv
import dataclasses
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Sequence

import numpy as np

from .flows import BlowUpError, FlowConfig, ForcingConfig, ou_params
from .qmc import LAYOUTS, SobolStream, draw_dimension, path_draws_batch
from .spectral import SCALE, SpectralField
from .splitting import SCHEMES, SchemeSpec, run_trajectory

__all__ = [
    "PAPER_REFERENCE",
    "CONVENTIONS",
    "SUBSTEP_RULE",
    "ExperimentConfig",
    "EstimateResult",
    "StudyResult",
    "PathBlowUpError",
    "parse_functional",
    "evaluate_functionals",
    "run_estimate",
    "path_values",
    "convergence_study",
    "fit_slope",
    "emit_csv",
    "read_csv",
]

#: Reference expectations at T = 1 for the default problem.
PAPER_REFERENCE = {
    "H-1": 1.138449630686444,
    "L2": 1.319968848291092,
    "H1": 1.620419847035606,
}

#: ``trig``: forcing ``q sin/cos(k.x)`` and norms w.r.t. the normalized measure on the
#: torus; ``orthonormal``: forcing ``q f_k`` and norms of the orthonormal coefficients.
CONVENTIONS = ("trig", "orthonormal")

SUBSTEP_RULE = "rk4: m = max(1, ceil(N * max|Kw| * t / (2.8 * cfl_safety))) per flow call"

_NORMS = {"H-1": -1.0, "L2": 0.0, "H1": 1.0}
_STANDARD_FORCING = ((1, 0, 1.0), (-1, 0, 1.0), (1, 1, 1.0), (-1, -1, 1.0))


class PathBlowUpError(BlowUpError):
    def __init__(self, path_index: int, step, cause: BlowUpError):
        super().__init__(f"path {path_index} blew up at step {step}: {cause}",
                         substep=cause.substep, batch_index=cause.batch_index)
        self.path_index = path_index
        self.step = step


@dataclass(frozen=True)
class Functional:
    name: str
    s: float | None = None
    eta: float | None = None


def parse_functional(spec: str) -> Functional:
    """``H-1``, ``L2``, ``H1`` (Sobolev norms) or ``psi:<eta>`` for ``exp(eta |w|^2)``."""
    spec = spec.strip()
    if spec in _NORMS:
        return Functional(spec, s=_NORMS[spec])
    if spec.startswith("psi"):
        _, _, val = spec.partition(":")
        eta = float(val) if val else 0.05
        if not eta > 0:
            raise ValueError(f"psi needs eta > 0, got {eta}")
        return Functional(f"psi:{eta!r}", eta=eta)
    raise ValueError(f"unknown functional {spec!r}; use H-1, L2, H1 or psi:<eta>")


@dataclass(frozen=True)
class ExperimentConfig:
    """Problem, scheme and sampling parameters of one estimate.

    ``forcing`` lists ``(k1, k2, q)`` triples.  ``K`` is the number of QMC
    paths; path ``k`` uses Sobol index ``k + 1``.
    """

    nu: float = 0.01
    epsilon: float = 1.0
    N: int = 16
    n: int = 64
    T: float = 1.0
    K: int = 4096
    scheme: str = "swss"
    forcing: tuple = _STANDARD_FORCING
    functionals: tuple = ("H-1", "L2", "H1")
    reference: dict | None = None
    output: str | None = None
    workers: int = 1
    convention: str = "trig"
    layout: str = "bridge"
    per_step_ordering: bool = False
    chunk_size: int = 256
    cfl_safety: float = 0.8
    shift_seed: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "forcing",
                           tuple((int(a), int(b), float(q)) for a, b, q in self.forcing))
        object.__setattr__(self, "functionals", tuple(self.functionals))
        if self.scheme not in SCHEMES:
            raise ValueError(f"unknown scheme {self.scheme!r}; choose from {SCHEMES}")
        if self.convention not in CONVENTIONS:
            raise ValueError(f"unknown convention {self.convention!r}; choose from {CONVENTIONS}")
        if self.layout not in LAYOUTS:
            raise ValueError(f"unknown layout {self.layout!r}; choose from {LAYOUTS}")
        for name, v in (("K", self.K), ("n", self.n), ("workers", self.workers),
                        ("chunk_size", self.chunk_size)):
            if int(v) != v or v < 1:
                raise ValueError(f"{name} must be a positive integer, got {v}")
        for f in self.functionals:
            parse_functional(f)
        # constructs and validates the flow and forcing
        self.flow_config().N
        self.forcing_config().check_within(self.N)

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)

    def flow_config(self) -> FlowConfig:
        return FlowConfig(nu=self.nu, N=self.N, epsilon=self.epsilon, cfl_safety=self.cfl_safety)

    def forcing_config(self) -> ForcingConfig:
        gain = SCALE if self.convention == "trig" else 1.0
        return ForcingConfig(tuple((a, b) for a, b, _ in self.forcing),
                             tuple(q * gain for _, _, q in self.forcing))

    def scheme_spec(self) -> SchemeSpec:
        return SchemeSpec(self.scheme, self.n, self.T, self.per_step_ordering)

    @property
    def norm_scale(self) -> float:
        return 1.0 / (2.0 * math.pi) if self.convention == "trig" else 1.0

    @property
    def parsed_functionals(self) -> tuple[Functional, ...]:
        return tuple(parse_functional(f) for f in self.functionals)

    @property
    def functional_names(self) -> tuple[str, ...]:
        return tuple(f.name for f in self.parsed_functionals)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["forcing"] = [list(t) for t in self.forcing]
        d["functionals"] = list(self.functionals)
        return d

    @classmethod
    def from_mapping(cls, data: dict, base: "ExperimentConfig | None" = None) -> "ExperimentConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - names
        if unknown:
            raise ValueError(f"unknown config keys: {', '.join(sorted(unknown))}")
        return dataclasses.replace(base or cls(), **data)

    def metadata(self) -> dict:
        return {
            "substep_rule": SUBSTEP_RULE,
            "qmc_layout": self.layout,
            "sobol_index": "path k uses point k+1 (origin skipped)",
            "ordering": "per-step" if self.per_step_ordering else "per-trajectory",
            "convention": self.convention,
        }


@dataclass
class EstimateResult:
    estimates: dict
    K: int
    wall_time: float
    metadata: dict
    stderr: dict = field(default_factory=dict)
    reference: dict | None = None
    config: ExperimentConfig | None = None

    @property
    def rel_error(self) -> dict:
        if not self.reference:
            return {}
        return {k: abs(v - self.reference[k]) / abs(self.reference[k])
                for k, v in self.estimates.items() if k in self.reference}

    def to_row(self) -> dict:
        row = _config_columns(self.config) if self.config is not None else {}
        row["K"] = self.K
        for k, v in self.estimates.items():
            row[k] = v
            row[f"{k}_stderr"] = self.stderr.get(k)
            row[f"{k}_relerr"] = self.rel_error.get(k)
        row["wall_time"] = self.wall_time
        row.update(self.metadata)
        return row


# -- path evaluation -----------------------------------------------------------------

def evaluate_functionals(w: SpectralField, cfg: ExperimentConfig) -> np.ndarray:
    """Values of the configured functionals, shape ``w.batch_shape + (nf,)``."""
    scale = cfg.norm_scale
    cols = []
    for f in cfg.parsed_functionals:
        if f.s is not None:
            cols.append(w.norm(f.s) * scale)
        else:
            cols.append(np.exp(f.eta * (w.norm(0.0) * scale) ** 2))
    return np.stack(cols, axis=-1)


def _check_psi(cfg: ExperimentConfig) -> None:
    """Reject ``psi`` weights for which the forced OU modes have no finite MGF."""
    etas = [f.eta for f in cfg.parsed_functionals if f.eta is not None]
    if not etas:
        return
    params = ou_params(cfg.T, cfg.flow_config(), cfg.forcing_config())
    s2 = params.sigma**2 * cfg.norm_scale**2
    for eta in etas:
        gap = 1.0 - 2.0 * eta * s2
        if np.any(gap <= 0):
            raise ValueError(
                f"psi eta={eta} exceeds the moment bound: 1 - 2 eta sigma^2 = {gap.min():.3g} <= 0"
            )


@lru_cache(maxsize=4)
def _stream(dimension: int, shift_seed: int | None) -> SobolStream:
    return SobolStream(dimension, shift_seed=shift_seed)


def _simulate(cfg: ExperimentConfig, start: int, stop: int, n: int | None = None) -> SpectralField:
    n = cfg.n if n is None else n
    forcing = cfg.forcing_config()
    stream = _stream(draw_dimension(n, forcing.d, cfg.per_step_ordering), cfg.shift_seed)
    normals, bits = path_draws_batch(stream, np.arange(start, stop), n, forcing.d,
                                     cfg.per_step_ordering, cfg.layout)
    spec = SchemeSpec(cfg.scheme, n, cfg.T, cfg.per_step_ordering)
    w0 = SpectralField.zeros(cfg.N)
    try:
        return run_trajectory(w0, spec, normals, cfg.flow_config(), forcing, bits)
    except BlowUpError as exc:
        idx = exc.batch_index
        local = int(np.ravel(idx[0])[0]) if idx else 0
        raise PathBlowUpError(start + local, exc.step, exc) from exc


def _chunk_values(args) -> np.ndarray:
    cfg, start, stop = args
    return evaluate_functionals(_simulate(cfg, start, stop), cfg)


def _chunks(K: int, size: int):
    return [(a, min(K, a + size)) for a in range(0, K, size)]


def _map(func, tasks, workers: int):
    if workers <= 1 or len(tasks) <= 1:
        return [func(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=workers) as ex:
        return list(ex.map(func, tasks))


def path_values(cfg: ExperimentConfig) -> np.ndarray:
    """Per-path functional values, shape ``(K, nf)``, in path-index order."""
    _check_psi(cfg)
    tasks = [(cfg, a, b) for a, b in _chunks(cfg.K, cfg.chunk_size)]
    return np.concatenate(_map(_chunk_values, tasks, cfg.workers), axis=0)


def _summarize(values: np.ndarray, names, ref=None):
    K = values.shape[0]
    est, se = {}, {}
    for j, name in enumerate(names):
        col = values[:, j]
        mean = math.fsum(col) / K
        est[name] = mean
        se[name] = math.sqrt(math.fsum((col - mean) ** 2) / (K * max(K - 1, 1)))
    return est, se


def run_estimate(cfg: ExperimentConfig) -> EstimateResult:
    """Average the functionals over ``cfg.K`` QMC trajectories.

    Paths are processed in fixed chunks and reduced in index order with an
    exactly rounded sum, so the result does not depend on ``cfg.workers``.
    """
    t0 = time.perf_counter()
    values = path_values(cfg)
    est, se = _summarize(values, cfg.functional_names)
    return EstimateResult(est, cfg.K, time.perf_counter() - t0, cfg.metadata(), se,
                          cfg.reference, cfg)


# -- convergence studies --------------------------------------------------------------

@dataclass
class StudyResult:
    axis: str
    values: list
    rows: list
    reference: dict
    metadata: dict

    def errors(self, name: str) -> np.ndarray:
        return np.array([r[f"{name}_relerr"] for r in self.rows], dtype=float)

    def slope(self, name: str, upto=None) -> float:
        pts = [(v, e) for v, e in zip(self.values, self.errors(name)) if upto is None or v <= upto]
        v, e = zip(*pts)
        return fit_slope(v, e)


def fit_slope(values: Sequence[float], errors: Sequence[float]) -> float:
    """Least-squares order ``p`` in ``error ~ value^-p`` (log-log)."""
    x = np.log(np.asarray(values, dtype=float))
    e = np.abs(np.asarray(errors, dtype=float))
    if np.any(e <= 0):
        raise ValueError("cannot fit a slope through zero errors")
    return float(-np.polyfit(x, np.log(e), 1)[0])


def _log2_ratios(errors: np.ndarray) -> list:
    out = [None]
    for a, b in zip(errors[:-1], errors[1:]):
        out.append(math.log2(a / b) if a > 0 and b > 0 else None)
    return out


def _config_columns(cfg: ExperimentConfig) -> dict:
    d = cfg.to_dict()
    d.pop("reference")
    d.pop("output")
    d["forcing"] = ";".join(f"{a},{b},{q!r}" for a, b, q in cfg.forcing)
    d["functionals"] = ";".join(cfg.functionals)
    return d


def _study_rows(cfg, axis, grid, est, err, se, ref, total_time):
    names = cfg.functional_names
    rows = []
    ratios = {k: _log2_ratios(np.abs(np.array(err[k]))) for k in names}
    for i, v in enumerate(grid):
        # the swept value leads so the first column is the grid
        row = {"value": v, "axis": axis}
        row.update(_config_columns(cfg.replace(**{_AXIS_FIELD[axis]: v})))
        for k in names:
            row[k] = est[k][i]
            row[f"{k}_ref"] = ref[k]
            row[f"{k}_relerr"] = abs(err[k][i]) / abs(ref[k])
            row[f"{k}_relerr_stderr"] = None if se is None else se[k][i] / abs(ref[k])
            row[f"{k}_log2ratio"] = ratios[k][i]
        row["wall_time"] = total_time
        row.update(cfg.metadata())
        rows.append(row)
    return rows


_AXIS_FIELD = {"timesteps": "n", "modes": "N", "paths": "K"}


def convergence_study(cfg: ExperimentConfig, axis: str, grid: Sequence[int],
                      reference: dict | None = None) -> StudyResult:
    """Errors of the estimate along one of ``timesteps``, ``modes`` or ``paths``.

    All grid points share the same Sobol points, so the differences between
    them carry little sampling noise.  The reference is ``reference`` if
    given, else ``cfg.reference``, else the finest grid point.

    * ``paths``: prefix means of one run with ``max(grid)`` paths (each equals
      :func:`run_estimate` with that ``K``).
    * ``modes``: :func:`run_estimate` per ``N``; the draws do not depend on ``N``.
    * ``timesteps``: grid values must be powers-of-two multiples of each other.
      The error of level ``n`` against the finest level ``n_ref`` is summed
      over dyadic levels ``m`` from antithetic differences
      ``F_m - (F_2m + F~_2m) / 2``, where ``F~_2m`` swaps the two halves of
      every coarse step.  For ``swss`` both orderings are evaluated and
      averaged (the exact expectation over the ordering bit).  With a
      supplied reference the plain per-level estimates are used instead.
    """
    grid = [int(v) for v in grid]
    if axis not in _AXIS_FIELD:
        raise ValueError(f"unknown axis {axis!r}; choose from {tuple(_AXIS_FIELD)}")
    if not grid or grid != sorted(set(grid)):
        raise ValueError("grid must be non-empty, strictly ascending")
    reference = reference if reference is not None else cfg.reference
    names = cfg.functional_names
    t0 = time.perf_counter()
    se = None
    if axis == "paths":
        values = path_values(cfg.replace(K=grid[-1]))
        est = {k: [] for k in names}
        for K in grid:
            e, _ = _summarize(values[:K], names)
            for k in names:
                est[k].append(e[k])
    elif axis == "modes":
        est = {k: [] for k in names}
        for N in grid:
            e = run_estimate(cfg.replace(N=N)).estimates
            for k in names:
                est[k].append(e[k])
    else:
        est, err_t, se_t = _timestep_study(cfg, grid)
        if reference is None:
            ref = {k: est[k][-1] for k in names}
            rows = _study_rows(cfg, axis, grid, est, err_t, se_t, ref, time.perf_counter() - t0)
            return StudyResult(axis, grid, rows, ref, cfg.metadata())
    ref = dict(reference) if reference is not None else {k: est[k][-1] for k in names}
    err = {k: [v - ref[k] for v in est[k]] for k in names}
    rows = _study_rows(cfg, axis, grid, est, err, se, ref, time.perf_counter() - t0)
    return StudyResult(axis, grid, rows, ref, cfg.metadata())


def _dyadic_chain(grid: list[int]) -> list[int]:
    chain = [grid[0]]
    while chain[-1] < grid[-1]:
        chain.append(chain[-1] * 2)
    if chain[-1] != grid[-1] or not set(grid) <= set(chain):
        raise ValueError(f"timestep grid {grid} must consist of powers-of-two multiples of {grid[0]}")
    return chain


def _level_normals(fine: np.ndarray, m: int) -> np.ndarray:
    K, n, d = fine.shape
    r = n // m
    return fine.reshape(K, m, r, d).sum(axis=2) / math.sqrt(r)


def _swap_halves(g: np.ndarray) -> np.ndarray:
    K, n, d = g.shape
    return g.reshape(K, n // 2, 2, d)[:, :, ::-1, :].reshape(K, n, d)


def _level_values(cfg, normals, bits) -> np.ndarray:
    n = normals.shape[1]
    spec = SchemeSpec(cfg.scheme, n, cfg.T)
    w0 = SpectralField.zeros(cfg.N)
    flow, forcing = cfg.flow_config(), cfg.forcing_config()
    if cfg.scheme != "swss":
        return evaluate_functionals(run_trajectory(w0, spec, normals, flow, forcing), cfg)
    K = normals.shape[0]
    vals = [evaluate_functionals(run_trajectory(w0, spec, normals, flow, forcing, np.full(K, b)), cfg)
            for b in (False, True)]
    return 0.5 * (vals[0] + vals[1])


def _timestep_chunk(args):
    cfg, chain, start, stop = args
    forcing = cfg.forcing_config()
    nref = chain[-1]
    stream = _stream(draw_dimension(nref, forcing.d), cfg.shift_seed)
    fine, _ = path_draws_batch(stream, np.arange(start, stop), nref, forcing.d, False, cfg.layout)
    plain, anti = {}, {}
    for m in chain:
        g = _level_normals(fine, m)
        plain[m] = _level_values(cfg, g, None)
        if m > chain[0]:
            anti[m] = _level_values(cfg, _swap_halves(g), None)
    return plain, anti


def _timestep_study(cfg: ExperimentConfig, grid: list[int]):
    if cfg.per_step_ordering:
        raise ValueError("the timestep study supports per-trajectory ordering only")
    chain = _dyadic_chain(grid)
    names = cfg.functional_names
    _check_psi(cfg)
    tasks = [(cfg, chain, a, b) for a, b in _chunks(cfg.K, cfg.chunk_size)]
    parts = _map(_timestep_chunk, tasks, cfg.workers)
    plain = {m: np.concatenate([p[0][m] for p in parts]) for m in chain}
    anti = {m: np.concatenate([p[1][m] for p in parts]) for m in chain[1:]}
    K = cfg.K
    diff_mean, diff_var = {}, {}
    for m in chain[:-1]:
        D = plain[m] - 0.5 * (plain[2 * m] + anti[2 * m])
        diff_mean[m] = np.array([math.fsum(D[:, j]) / K for j in range(D.shape[1])])
        diff_var[m] = D.var(axis=0, ddof=1) / K
    est = {k: [] for k in names}
    err = {k: [] for k in names}
    se = {k: [] for k in names}
    for n in grid:
        levels = [m for m in chain[:-1] if m >= n]
        for j, k in enumerate(names):
            est[k].append(math.fsum(plain[n][:, j]) / K)
            err[k].append(math.fsum(diff_mean[m][j] for m in levels))
            # level differences are treated as independent for the error bar
            se[k].append(math.sqrt(sum(diff_var[m][j] for m in levels)))
    return est, err, se


# -- CSV ---------------------------------------------------------------------------

def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return str(bool(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return format(float(v), ".17g")
    return str(v)


def default_columns(cfg: ExperimentConfig | None = None) -> list[str]:
    cfg = cfg or ExperimentConfig()
    return list(EstimateResult({k: 0.0 for k in cfg.functional_names}, cfg.K, 0.0,
                               cfg.metadata(), config=cfg).to_row())


def emit_csv(rows, path, columns: Sequence[str] | None = None) -> None:
    """Write result rows (dicts, :class:`EstimateResult` or a :class:`StudyResult`).

    The single header line names every config, result and metadata column;
    floats are written with 17 significant digits.
    """
    if isinstance(rows, StudyResult):
        rows = rows.rows
    rows = [r.to_row() if isinstance(r, EstimateResult) else dict(r) for r in rows]
    if columns is None:
        columns = list(rows[0]) if rows else default_columns()
        for r in rows[1:]:
            columns += [c for c in r if c not in columns]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(columns)
        for r in rows:
            writer.writerow([_fmt(r.get(c)) for c in columns])


def read_csv(path) -> list[dict]:
    """Parse a file written by :func:`emit_csv`; numeric fields become int/float."""
    def conv(s):
        if s == "":
            return None
        for t in (int, float):
            try:
                return t(s)
            except ValueError:
                pass
        return s

    with open(path, newline="") as fh:
        return [{k: conv(v) for k, v in r.items()} for r in csv.DictReader(fh)]
