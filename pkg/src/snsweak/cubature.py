"""Cubature on Wiener space for the Galerkin system.

A cubature formula of order ``m`` is a weighted set of piecewise-linear
paths ``omega_i = (omega^0, ..., omega^d)`` with ``omega^0(s) = s`` whose
iterated integrals reproduce the expected iterated Stratonovich integrals of
``(t, W_t)`` for every multi-index with ``k + #zeros <= m``.

Signatures are handled as truncated tensor series: a list ``S`` with
``S[k]`` an array of shape ``(d+1,) * k``.

Formula files are plain text::

    # comments start with '#'
    cubature d=<d> order=<m> paths=<M>
    path weight=<lambda> segments=<L>
    <t_0> <omega^1(t_0)> ... <omega^d(t_0)>
    ...                                   (L + 1 breakpoint lines)
    path weight=...

The time channel ``omega^0`` is implicit (it equals the breakpoint time).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from itertools import product
from math import factorial, sqrt
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .flows import BlowUpError, FlowConfig, ForcingConfig, _rk4
from .spectral import SpectralField, _modes

__all__ = [
    "MAX_DEGREE",
    "CubatureError",
    "CubaturePath",
    "CubatureFormula",
    "ValidationReport",
    "CubatureEstimate",
    "degree3_formula",
    "scale_formula",
    "path_signature",
    "iterated_path_integral",
    "brownian_expected_signature",
    "multi_indices",
    "validate_formula",
    "symmetrize",
    "load_formula",
    "save_formula",
    "cubature_weak_step",
    "cubature_estimate",
]

#: Highest ``k + #zeros`` for which iterated integrals and references are supported.
MAX_DEGREE = 5


class CubatureError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class CubaturePath:
    """Piecewise-linear path; ``values[:, 0]`` is time, ``values[:, 1:]`` Brownian channels."""

    breakpoints: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.breakpoints, dtype=float)
        v = np.asarray(self.values, dtype=float)
        if t.ndim != 1 or t.size < 2:
            raise CubatureError("a path needs at least two breakpoints")
        if t[0] != 0 or np.any(np.diff(t) <= 0):
            raise CubatureError("breakpoints must start at 0 and increase strictly")
        if v.ndim != 2 or v.shape[0] != t.size or v.shape[1] < 2:
            raise CubatureError(f"values must have shape ({t.size}, d+1), got {v.shape}")
        if np.any(v[0] != 0):
            raise CubatureError("paths must start at the origin")
        if not np.array_equal(v[:, 0], t):
            raise CubatureError("channel 0 must equal time")
        object.__setattr__(self, "breakpoints", t)
        object.__setattr__(self, "values", v)

    @classmethod
    def from_brownian(cls, breakpoints, brownian) -> "CubaturePath":
        t = np.asarray(breakpoints, dtype=float)
        b = np.asarray(brownian, dtype=float).reshape(t.size, -1)
        return cls(t, np.column_stack([t, b]))

    @property
    def d(self) -> int:
        return self.values.shape[1] - 1

    @property
    def horizon(self) -> float:
        return float(self.breakpoints[-1])

    @property
    def endpoint(self) -> np.ndarray:
        return self.values[-1, 1:]

    @property
    def increments(self) -> np.ndarray:
        return np.diff(self.values, axis=0)


@dataclass(frozen=True, eq=False)
class CubatureFormula:
    paths: tuple[CubaturePath, ...]
    weights: np.ndarray
    order: int

    def __post_init__(self):
        paths = tuple(self.paths)
        w = np.asarray(self.weights, dtype=float)
        if not paths or w.shape != (len(paths),):
            raise CubatureError("need one positive weight per path")
        if np.any(~(w > 0)):
            raise CubatureError("cubature weights must be positive")
        if len({p.d for p in paths}) != 1:
            raise CubatureError("all paths must share the Brownian dimension")
        if len({p.horizon for p in paths}) != 1:
            raise CubatureError("all paths must share the same horizon")
        if self.order < 1 or self.order % 2 == 0:
            raise CubatureError(f"order must be a positive odd integer, got {self.order}")
        object.__setattr__(self, "paths", paths)
        object.__setattr__(self, "weights", w)

    @property
    def d(self) -> int:
        return self.paths[0].d

    @property
    def M(self) -> int:
        return len(self.paths)

    @property
    def horizon(self) -> float:
        return self.paths[0].horizon

    @property
    def endpoints(self) -> np.ndarray:
        return np.array([p.endpoint for p in self.paths])

    def is_symmetric(self, tol: float = 1e-12) -> bool:
        """Every path has a partner of equal weight with negated endpoint."""
        ends = self.endpoints
        w = self.weights
        unused = set(range(self.M))
        for i in range(self.M):
            if i not in unused:
                continue
            match = [j for j in unused
                     if abs(w[j] - w[i]) <= tol * max(w[i], 1.0)
                     and np.all(np.abs(ends[j] + ends[i]) <= tol * max(1.0, np.abs(ends[i]).max()))]
            if not match:
                return False
            # self-paired paths (zero endpoint) consume only themselves
            j = i if i in match else match[0]
            unused.discard(i)
            unused.discard(j)
        return True


def degree3_formula(d: int) -> CubatureFormula:
    """``2d`` straight lines to ``+-sqrt(d) e_j`` with weights ``1/(2d)``."""
    if d < 1:
        raise ValueError(f"dimension must be >= 1, got {d}")
    paths = []
    for j in range(d):
        for sign in (1.0, -1.0):
            z = np.zeros(d)
            z[j] = sign * sqrt(d)
            paths.append(CubaturePath.from_brownian([0.0, 1.0], np.vstack([np.zeros(d), z])))
    return CubatureFormula(tuple(paths), np.full(2 * d, 1.0 / (2 * d)), 3)


def scale_formula(f: CubatureFormula, dt: float) -> CubatureFormula:
    """Rescale from ``[0, T]`` to ``[0, dt]``: time by ``dt/T``, Brownian channels by ``sqrt(dt/T)``."""
    if not dt > 0:
        raise ValueError(f"dt must be positive, got {dt}")
    r = dt / f.horizon
    paths = tuple(
        CubaturePath.from_brownian(p.breakpoints * r, p.values[:, 1:] * sqrt(r)) for p in f.paths
    )
    return CubatureFormula(paths, f.weights.copy(), f.order)


# -- truncated tensor algebra ----------------------------------------------------

def _tensor_mul(a: list, b: list, depth: int) -> list:
    out = []
    for k in range(depth + 1):
        acc = None
        for i in range(k + 1):
            term = np.multiply.outer(a[i], b[k - i])
            acc = term if acc is None else acc + term
        out.append(acc)
    return out


def _segment_exp(delta: np.ndarray, depth: int) -> list:
    out = [np.array(1.0)]
    for k in range(1, depth + 1):
        out.append(np.multiply.outer(out[-1], delta) / k)
    return out


def path_signature(path: CubaturePath, depth: int) -> list:
    """Truncated signature via Chen's identity over the linear segments."""
    if depth > MAX_DEGREE:
        raise CubatureError(f"signature depth {depth} exceeds supported maximum {MAX_DEGREE}")
    sig = None
    for delta in path.increments:
        seg = _segment_exp(delta, depth)
        sig = seg if sig is None else _tensor_mul(sig, seg, depth)
    return sig


def _degree(multi_index: Sequence[int]) -> int:
    return len(multi_index) + sum(1 for j in multi_index if j == 0)


def iterated_path_integral(path: CubaturePath, multi_index: Sequence[int]) -> float:
    """``int_{0<t_1<...<t_k<T} d omega^{j_1}(t_1) ... d omega^{j_k}(t_k)`` in closed form.

    On a linear segment with increment ``Delta`` the integral of a word equals
    ``prod Delta_{j_l} / k!``; words are split across segments in order.
    """
    alpha = [int(j) for j in multi_index]
    if any(j < 0 or j > path.d for j in alpha):
        raise CubatureError(f"multi-index {alpha} has entries outside 0..{path.d}")
    if _degree(alpha) > MAX_DEGREE:
        raise CubatureError(
            f"multi-index {alpha} has degree {_degree(alpha)} > supported {MAX_DEGREE}"
        )
    k = len(alpha)
    F = np.zeros(k + 1)
    F[0] = 1.0
    for delta in path.increments:
        new = np.zeros(k + 1)
        for i in range(k + 1):
            prod_ = 1.0
            acc = F[i]
            for j in range(i - 1, -1, -1):
                prod_ *= delta[alpha[j]]
                acc += F[j] * prod_ / factorial(i - j)
            new[i] = acc
        F = new
    return float(F[k])


def brownian_expected_signature(d: int, depth: int, T: float = 1.0) -> list:
    """``E`` of the Stratonovich signature of ``(t, W_t)`` on ``[0, T]``.

    Equals ``exp(T (e_0 + 1/2 sum_j e_j e_j))`` in the truncated tensor algebra.
    """
    if depth > MAX_DEGREE:
        raise CubatureError(f"reference depth {depth} exceeds supported maximum {MAX_DEGREE}")
    D = d + 1
    X = [np.array(0.0), np.zeros(D), np.zeros((D, D))]
    X[1][0] = T
    X[2][np.arange(1, D), np.arange(1, D)] = 0.5 * T
    X = X[: depth + 1] + [np.zeros((D,) * k) for k in range(3, depth + 1)]
    out = [np.array(1.0)] + [np.zeros((D,) * k) for k in range(1, depth + 1)]
    power = [np.array(1.0)] + [np.zeros((D,) * k) for k in range(1, depth + 1)]
    for r in range(1, depth + 1):
        power = _tensor_mul(power, X, depth)
        for k in range(depth + 1):
            out[k] = out[k] + power[k] / factorial(r)
    return out


def multi_indices(d: int, m: int):
    """All words over ``{0..d}`` with ``k + #zeros <= m`` (including the empty word)."""
    yield ()
    for k in range(1, m + 1):
        for word in product(range(d + 1), repeat=k):
            if _degree(word) <= m:
                yield word


@dataclass
class ValidationReport:
    order: int
    checked: int
    mismatches: list = field(default_factory=list)
    tol: float = 1e-12

    @property
    def passed(self) -> bool:
        return not self.mismatches

    def __bool__(self):
        return self.passed

    def summary(self, limit: int = 10) -> str:
        if self.passed:
            return f"PASS: {self.checked} moment conditions up to order {self.order}"
        lines = [f"FAIL: {len(self.mismatches)} of {self.checked} moment conditions "
                 f"up to order {self.order}"]
        for idx, got, want in self.mismatches[:limit]:
            lines.append(f"  index {idx}: got {got!r}, expected {want!r}")
        return "\n".join(lines)


def validate_formula(f: CubatureFormula, order: int | None = None,
                     tol: float = 1e-12) -> ValidationReport:
    """Compare weighted path iterated integrals against the Brownian reference."""
    m = f.order if order is None else order
    if m > MAX_DEGREE:
        raise CubatureError(f"validation order {m} exceeds supported maximum {MAX_DEGREE}")
    sigs = [path_signature(p, m) for p in f.paths]
    ref = brownian_expected_signature(f.d, m, f.horizon)
    report = ValidationReport(order=m, checked=0, tol=tol)
    for word in multi_indices(f.d, m):
        k = len(word)
        got = float(sum(w * s[k][word] for w, s in zip(f.weights, sigs)))
        want = float(ref[k][word])
        report.checked += 1
        if abs(got - want) > tol:
            report.mismatches.append((word, got, want))
    return report


def symmetrize(f: CubatureFormula) -> CubatureFormula:
    """Add the sign-reflected paths, halving all weights."""
    reflected = tuple(
        CubaturePath.from_brownian(p.breakpoints, -p.values[:, 1:]) for p in f.paths
    )
    return CubatureFormula(f.paths + reflected, np.concatenate([f.weights, f.weights]) / 2, f.order)


# -- file format -------------------------------------------------------------------

def _fields(tokens, keys, lineno):
    out = {}
    for tok in tokens:
        if "=" not in tok:
            raise CubatureError(f"line {lineno}: expected key=value, got {tok!r}")
        k, v = tok.split("=", 1)
        out[k] = v
    missing = [k for k in keys if k not in out]
    if missing:
        raise CubatureError(f"line {lineno}: missing {', '.join(missing)}")
    return out


def load_formula(path) -> CubatureFormula:
    rows = []
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if line:
            rows.append((lineno, line.split()))
    if not rows or rows[0][1][0] != "cubature":
        raise CubatureError("formula file must start with a 'cubature d=.. order=.. paths=..' header")
    lineno, head = rows[0]
    hdr = _fields(head[1:], ("d", "order", "paths"), lineno)
    d, order, M = int(hdr["d"]), int(hdr["order"]), int(hdr["paths"])
    paths, weights = [], []
    pos = 1
    for _ in range(M):
        if pos >= len(rows) or rows[pos][1][0] != "path":
            raise CubatureError(f"expected {M} path records, found {len(paths)}")
        lineno, toks = rows[pos]
        rec = _fields(toks[1:], ("weight", "segments"), lineno)
        L = int(rec["segments"])
        pts = rows[pos + 1: pos + 2 + L]
        if len(pts) != L + 1:
            raise CubatureError(f"line {lineno}: path needs {L + 1} breakpoint lines")
        data = []
        for ln, toks in pts:
            if len(toks) != d + 1:
                raise CubatureError(f"line {ln}: expected {d + 1} numbers, got {len(toks)}")
            data.append([float(x) for x in toks])
        data = np.array(data)
        paths.append(CubaturePath.from_brownian(data[:, 0], data[:, 1:]))
        weights.append(float(rec["weight"]))
        pos += L + 2
    if pos != len(rows):
        raise CubatureError(f"line {rows[pos][0]}: unexpected content after {M} paths")
    return CubatureFormula(tuple(paths), np.array(weights), order)


def save_formula(f: CubatureFormula, path) -> None:
    lines = [f"cubature d={f.d} order={f.order} paths={f.M}"]
    for p, w in zip(f.paths, f.weights):
        lines.append(f"path weight={float(w)!r} segments={len(p.breakpoints) - 1}")
        for row in p.values:
            lines.append(" ".join(repr(float(x)) for x in row))
    Path(path).write_text("\n".join(lines) + "\n")


# -- weak scheme -----------------------------------------------------------------------

def _branch_groups(f: CubatureFormula):
    """Group path indices by identical breakpoints so they can share a batch."""
    groups: dict[bytes, list[int]] = {}
    for i, p in enumerate(f.paths):
        groups.setdefault(p.breakpoints.tobytes(), []).append(i)
    return list(groups.values())


def _integrate_paths(coeffs: np.ndarray, f: CubatureFormula, idx: Sequence[int], cfg: FlowConfig,
                     vecs: np.ndarray, nonlinear: bool) -> np.ndarray:
    """Integrate states ``coeffs`` (batch B) along paths ``idx`` sharing breakpoints.

    Returns shape ``(len(idx), B..., 2N+1, 2N+1)``.
    """
    m = _modes(cfg.N)
    p0 = f.paths[idx[0]]
    x = np.broadcast_to(coeffs, (len(idx),) + coeffs.shape).copy()
    inc = np.stack([f.paths[i].increments[:, 1:] for i in idx])   # (g, L, d)
    extra = (1,) * (coeffs.ndim - 2)
    for seg, tau in enumerate(np.diff(p0.breakpoints)):
        slopes = inc[:, seg, :] / tau
        rate = np.tensordot(slopes, vecs, axes=(1, 0)).reshape((len(idx),) + extra + vecs.shape[1:])
        if nonlinear:
            x, _ = _rk4(x, float(tau), cfg.nu, m, cfg.cfl_safety, forcing_rate=rate)
        else:
            x = _linear_segment(x, float(tau), cfg, m, rate)
    return x


def _linear_segment(x, tau, cfg, m, rate):
    # exact affine flow of dw = (nu Laplace w + rate) ds
    a = cfg.nu * m.ksq
    decay = np.exp(-a * tau)
    gain = np.where(a > 0, -np.expm1(-a * tau) / np.where(a > 0, a, 1.0), tau)
    out = x * decay + rate * gain
    out[..., m.N, m.N] = 0.0
    return out


def cubature_weak_step(w: SpectralField, dt: float, formula: CubatureFormula, cfg: FlowConfig,
                       forcing: ForcingConfig, nonlinear: bool = True):
    """One cubature step of size ``dt`` from ``w`` (single field or batch).

    Along each scaled path the Galerkin ODE with drift ``nu Laplace w + pi_N B(Kw, w)``
    (the full viscosity, no splitting) and forcing ``sum_j q_j f_{k_j} d omega^j``
    is integrated by RK4 on every linear segment.  ``nonlinear=False`` drops
    ``B`` and uses the exact affine flow instead.

    Returns ``(weights, branches)`` with ``branches.coeffs`` of shape
    ``(M,) + w.batch_shape + (2N+1, 2N+1)``.
    """
    if formula.d != forcing.d:
        raise CubatureError(f"formula has d={formula.d} but forcing has d={forcing.d}")
    if not formula.is_symmetric():
        raise CubatureError("cubature_weak_step needs a symmetric formula (see symmetrize)")
    if w.N != cfg.N:
        raise ValueError(f"state degree {w.N} differs from config N={cfg.N}")
    scaled = scale_formula(formula, dt)
    vecs = forcing.vectors(cfg.N)
    out = np.empty((formula.M,) + w.coeffs.shape)
    for idx in _branch_groups(scaled):
        try:
            out[idx] = _integrate_paths(w.coeffs, scaled, idx, cfg, vecs, nonlinear)
        except BlowUpError as exc:
            branch = idx[int(np.ravel(exc.batch_index[0])[0])] if exc.batch_index else idx[0]
            err = BlowUpError(f"cubature branch {branch}: {exc}", exc.substep, exc.batch_index)
            err.branch = branch
            raise err from exc
    return formula.weights.copy(), SpectralField(w.N, out)


@dataclass(frozen=True)
class CubatureEstimate:
    """``value`` and ``stderr`` are floats, or arrays for vector-valued functionals."""

    value: float | np.ndarray
    stderr: float | np.ndarray
    mode: str
    count: int

    def __float__(self):
        return self.value


def cubature_estimate(w0: SpectralField, T: float, n: int, formula: CubatureFormula,
                      functional: Callable[[SpectralField], np.ndarray], budget: int,
                      cfg: FlowConfig, forcing: ForcingConfig, seed: int = 0,
                      batch_size: int = 4096, nonlinear: bool = True,
                      mode: str = "auto") -> CubatureEstimate:
    """Estimate ``(Q_{T/n})^n functional (w0)``.

    With ``mode="auto"`` the full tree is evaluated with exact weights if
    ``M**n <= budget``; otherwise ``budget`` trajectories are sampled, each
    step choosing branch ``i`` with probability ``lambda_i`` (unbiased for the
    full tree).  ``mode="tree"`` or ``"sampled"`` forces one route; a forced
    tree must still fit in the budget.  ``functional`` maps a batch of
    states to values of shape ``batch`` or ``batch + (nf,)``.
    """
    if budget < 1:
        raise ValueError(f"budget must be >= 1, got {budget}")
    if n < 1:
        raise ValueError(f"need n >= 1 steps, got {n}")
    if mode not in ("auto", "tree", "sampled"):
        raise ValueError(f"mode must be 'auto', 'tree' or 'sampled', got {mode!r}")
    dt = T / n
    M = formula.M
    if mode == "tree" and M**n > budget:
        raise ValueError(f"full tree has {M**n} leaves, more than the budget {budget}")
    if mode == "tree" or (mode == "auto" and M**n <= budget):
        states = SpectralField(w0.N, w0.coeffs[None])
        weights = np.ones(1)
        for _ in range(n):
            lam, br = cubature_weak_step(states, dt, formula, cfg, forcing, nonlinear)
            weights = (lam[:, None] * weights[None, :]).reshape(-1)
            states = SpectralField(w0.N, br.coeffs.reshape((-1,) + br.coeffs.shape[-2:]))
        vals = np.asarray(functional(states), dtype=float)
        value = np.tensordot(weights, vals, axes=(0, 0))
        return CubatureEstimate(_scalar(value), _scalar(np.zeros_like(value)), "tree", weights.size)

    if not formula.is_symmetric():
        raise CubatureError("cubature_estimate needs a symmetric formula (see symmetrize)")
    rng = np.random.default_rng(seed)
    choices = rng.choice(M, size=(budget, n), p=formula.weights / formula.weights.sum())
    scaled = scale_formula(formula, dt)
    vecs = forcing.vectors(cfg.N)
    vals = []
    for start in range(0, budget, batch_size):
        sl = slice(start, min(budget, start + batch_size))
        x = np.broadcast_to(w0.coeffs, (sl.stop - sl.start,) + w0.coeffs.shape[-2:]).copy()
        for step in range(n):
            ch = choices[sl, step]
            for i in np.unique(ch):
                sel = ch == i
                x[sel] = _integrate_paths(x[sel], scaled, [int(i)], cfg, vecs, nonlinear)[0]
        vals.append(np.asarray(functional(SpectralField(w0.N, x)), dtype=float))
    vals = np.concatenate(vals, axis=0)
    se = vals.std(axis=0, ddof=1) / sqrt(budget) if budget > 1 else np.zeros_like(vals[0])
    return CubatureEstimate(_scalar(vals.mean(axis=0)), _scalar(se), "sampled", budget)


def _scalar(x):
    x = np.asarray(x, dtype=float)
    return float(x) if x.ndim == 0 else x
