"""Stochastic collocation of the QoI and the three error studies.

A :class:`QoiSampler` maps a parameter point to the (normalised) QoI of one
deterministic solve.  An :class:`Evaluator` caches those values by node
coordinates, so nested grids and truncated grids (zero-padded into the full
parameter space) never solve the same point twice, and optionally spreads
the solves over a process pool.  Reductions always run in node order.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import analyticity, domain_map, fem
from . import sparse_grid as sg
from .errors import ContractError, ParameterError, StochDomainError

log = logging.getLogger(__name__)

CSV_SCHEMAS = {
    "sg": ("knots", "mean_error", "var_error"),
    "truncation": ("N_s", "mean_error", "var_error"),
    "fem": ("h", "qoi_error"),
}


# ---------------------------------------------------------------------------
# Samplers
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SamplerSpec:
    """Picklable recipe for a :class:`QoiSampler` (used to seed worker processes)."""

    model: domain_map.DeformationModel
    mesh_n: int
    normalize: bool = True
    condense: bool = True

    def build(self) -> "QoiSampler":
        return QoiSampler(self.model, fem.build_mesh(self.mesh_n), normalize=self.normalize, condense=self.condense)

    def fingerprint(self) -> dict:
        return {
            "model": domain_map.model_to_dict(self.model),
            "mesh_n": self.mesh_n,
            "normalize": self.normalize,
            "qoi": "bump_lower_half",
            "boundary": "top_edge_bump",
            "solver": "splu",
        }


class QoiSampler:
    """QoI of the remapped problem at one parameter point.

    With ``normalize`` the value is divided by the QoI of the undeformed
    domain (``y = 0``).  With ``condense`` the parameter-independent
    elements are eliminated once (:class:`fem.CondensedQoi`).
    """

    def __init__(
        self,
        model: domain_map.DeformationModel,
        mesh: fem.Mesh,
        qoi: fem.QoiFunctional | None = None,
        *,
        normalize: bool = True,
        condense: bool = True,
        boundary: Callable | None = None,
    ):
        self.model, self.mesh = model, mesh
        self.qoi = fem.build_qoi(mesh) if qoi is None else qoi
        self.boundary = fem.TopEdgeBump() if boundary is None else boundary
        pieces = fem.quadrature_pieces(mesh)
        full = domain_map.PreparedMap(model, mesh.qpoints, pieces)
        self.condensed = None
        if condense:
            act = np.zeros(mesh.qpoints.shape[0] * mesh.qpoints.shape[1], dtype=bool)
            act[full.active] = True
            variable = act.reshape(-1, mesh.qpoints.shape[1]).any(axis=1)
            ref = full.evaluate(np.zeros(1))
            self.condensed = fem.CondensedQoi(mesh, variable, self.qoi, ref, None, self.boundary)
            self.prepared = domain_map.PreparedMap(model, mesh.qpoints[variable], pieces[variable])
        else:
            self.prepared = full
        self.scale = 1.0
        if normalize:
            self.scale = self.raw(np.zeros(model.n_total))
            if self.scale == 0.0:
                raise ParameterError("reference QoI is zero; cannot normalise")

    @property
    def dim(self) -> int:
        return self.model.n_total

    def raw(self, y) -> float:
        coeff = self.prepared.evaluate(y)
        if self.condensed is not None:
            return self.condensed(coeff)
        system = fem.assemble(self.mesh, coeff, None, self.boundary)
        return self.qoi(fem.solve_primal(system))

    def __call__(self, y) -> float:
        return self.raw(y) / self.scale

    def by_duality(self, y) -> float:
        """Normalised QoI through the adjoint product (cross-check path)."""
        full = domain_map.PreparedMap(self.model, self.mesh.qpoints, fem.quadrature_pieces(self.mesh))
        system = fem.assemble(self.mesh, full.evaluate(y), None, self.boundary)
        return fem.qoi_by_duality(system, self.qoi) / self.scale


# ---------------------------------------------------------------------------
# Cached, optionally parallel node evaluation
# ---------------------------------------------------------------------------

_WORKER: Callable | None = None


def _init_worker(factory):
    global _WORKER
    _WORKER = factory()


def _worker_eval(y):
    return _WORKER(y)


class Evaluator:
    """Cached sample function over the full ``dim``-dimensional parameter box.

    Parameters
    ----------
    sample : callable
        ``sample(y)`` with ``y`` of length ``dim``; must be picklable when
        ``jobs > 1`` unless ``factory`` is given.
    dim : int
        Dimension of the full parameter space; shorter points are padded
        with zeros.
    jobs : int
        Number of worker processes (1 = serial).
    factory : callable, optional
        Zero-argument picklable callable building the sample function in
        each worker (avoids pickling large objects).
    """

    def __init__(self, sample: Callable, dim: int, jobs: int = 1, factory: Callable | None = None, tag: dict | None = None):
        if jobs < 1:
            raise ParameterError("jobs must be >= 1")
        self.sample, self.dim, self.jobs = sample, dim, jobs
        self.factory = factory
        self.tag = tag or {}
        self.cache: dict[bytes, float] = {}
        self.n_solves = 0

    def _pad(self, points) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        if pts.shape[1] > self.dim:
            raise ParameterError(f"points have {pts.shape[1]} coordinates, sampler has {self.dim}")
        out = np.zeros((len(pts), self.dim))
        out[:, : pts.shape[1]] = pts
        return out

    def values(self, points) -> np.ndarray:
        """Sample values at ``points`` (solving only the uncached ones)."""
        full = self._pad(points)
        keys = [k.tobytes() for k in sg.node_keys(full)]
        todo, seen = [], set()
        for i, k in enumerate(keys):
            if k not in self.cache and k not in seen:
                todo.append(i)
                seen.add(k)
        if todo:
            results = self._run(full[todo])
            for i, v in zip(todo, results):
                self.cache[keys[i]] = v
            self.n_solves += len(todo)
        return np.array([self.cache[k] for k in keys])

    def _run(self, pts: np.ndarray) -> list[float]:
        out = []
        if self.jobs == 1 or len(pts) < 2:
            for i, y in enumerate(pts):
                out.append(self._one(self.sample, i, y))
            return out
        factory = self.factory or _Const(self.sample)
        with ProcessPoolExecutor(self.jobs, initializer=_init_worker, initargs=(factory,)) as ex:
            futures = [ex.submit(_worker_eval, y) for y in pts]
            for i, (y, fut) in enumerate(zip(pts, futures)):
                try:
                    out.append(float(fut.result()))
                except StochDomainError as exc:
                    raise type(exc)(f"node solve failed at y={y.tolist()}: {exc}") from exc
        return out

    @staticmethod
    def _one(sample, i, y) -> float:
        try:
            v = float(sample(y))
        except StochDomainError as exc:
            raise type(exc)(f"node solve failed at y={y.tolist()}: {exc}") from exc
        if not math.isfinite(v):
            raise ContractError(f"non-finite sample {v} at y={y.tolist()}")
        return v

    # -- persistence ---------------------------------------------------------

    def fingerprint(self) -> str:
        return stable_hash({"dim": self.dim, **self.tag})

    def save(self, path) -> None:
        path = Path(path)
        keys = np.array([np.frombuffer(k, dtype=np.int64) for k in self.cache], dtype=np.int64).reshape(-1, self.dim)
        vals = np.array(list(self.cache.values()), dtype=float)
        tmp = path.with_suffix(".tmp.npz")
        np.savez(tmp, keys=keys, values=vals, fingerprint=np.array(self.fingerprint()))
        tmp.replace(path)

    def load(self, path) -> int:
        """Merge a saved cache with a matching fingerprint; returns entries added."""
        path = Path(path)
        if not path.exists():
            return 0
        with np.load(path) as data:
            if str(data["fingerprint"]) != self.fingerprint():
                log.warning("ignoring node cache %s: fingerprint mismatch", path)
                return 0
            before = len(self.cache)
            for k, v in zip(data["keys"], data["values"]):
                self.cache.setdefault(np.ascontiguousarray(k, dtype=np.int64).tobytes(), float(v))
        return len(self.cache) - before


@dataclass(frozen=True)
class _Const:
    fn: Callable

    def __call__(self):
        return self.fn


def sampler_evaluator(spec: SamplerSpec, jobs: int = 1) -> Evaluator:
    sampler = spec.build()
    return Evaluator(sampler, sampler.dim, jobs, factory=spec.build, tag=spec.fingerprint())


def stable_hash(obj) -> str:
    text = json.dumps(obj, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(text.encode()).hexdigest()[:16]


# ---------------------------------------------------------------------------
# Estimates and curves
# ---------------------------------------------------------------------------


@dataclass
class QoiEstimate:
    mean: float
    variance: float
    eta: int
    n_s: int
    rule: sg.IndexRule
    nodes: np.ndarray = field(repr=False)
    samples: np.ndarray = field(repr=False)
    wall_time: float = 0.0
    fingerprint: str = ""

    def as_dict(self) -> dict:
        return {
            "mean": self.mean,
            "variance": self.variance,
            "eta": self.eta,
            "n_s": self.n_s,
            "rule": self.rule.variant,
            "level": self.rule.level,
            "wall_time": self.wall_time,
            "fingerprint": self.fingerprint,
        }


def moments(grid: sg.SparseGrid, samples) -> tuple[float, float]:
    """Mean and variance ``E[S Q^2] - E[S Q]^2`` by grid quadrature."""
    mean = sg.quadrature(grid, samples)
    var = sg.quadrature(grid, np.asarray(samples) ** 2) - mean**2
    if var < 0.0:
        if var >= -1e-12 * max(1.0, mean**2):
            log.warning("variance %.3e within round-off of zero; clamped", var)
            var = 0.0
        else:
            log.warning("negative variance estimate %.3e (negative quadrature weights)", var)
    return mean, var


def estimate(evaluator: Evaluator, rule: sg.IndexRule, n_s: int) -> QoiEstimate:
    """Mean and variance of the QoI over the first ``n_s`` parameters."""
    t0 = time.perf_counter()
    grid = sg.build_grid(rule, n_s)
    vals = evaluator.values(grid.nodes)
    mean, var = moments(grid, vals)
    fp = stable_hash({"sampler": evaluator.fingerprint(), "rule": rule.variant, "w": rule.level, "n_s": n_s})
    return QoiEstimate(mean, var, grid.eta, n_s, rule, grid.nodes, vals, time.perf_counter() - t0, fp)


def reference_estimate(
    evaluator: Evaluator, n_s_ref: int, w_ref: int, cache_dir=None, variant: str = "SM"
) -> QoiEstimate:
    """High-level isotropic grid estimate used as ground truth.

    With ``cache_dir`` the result is stored under its fingerprint and
    reused by later calls with the same sampler and budget.
    """
    rule = sg.IndexRule(variant, w_ref)
    fp = stable_hash({"sampler": evaluator.fingerprint(), "rule": variant, "w": w_ref, "n_s": n_s_ref})
    path = None
    if cache_dir is not None:
        path = Path(cache_dir) / f"reference-{fp}.json"
        if path.exists():
            d = json.loads(path.read_text())
            grid = sg.build_grid(rule, n_s_ref)
            return QoiEstimate(
                d["mean"], d["variance"], d["eta"], n_s_ref, rule, grid.nodes, np.array(d["samples"]), d["wall_time"], fp
            )
    est = estimate(evaluator, rule, n_s_ref)
    if path is not None:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps({**est.as_dict(), "samples": est.samples.tolist()}))
    return est


@dataclass
class ConvergenceCurve:
    """Error rows against one abscissa (knots, ``N_s`` or ``h``)."""

    kind: str
    rows: list[tuple]
    reference: dict = field(default_factory=dict)
    label: str = ""
    estimates: list = field(default_factory=list, repr=False)

    def __post_init__(self):
        if self.kind not in CSV_SCHEMAS:
            raise ParameterError(f"unknown curve kind {self.kind!r}")
        self.rows = sorted(self.rows, key=lambda r: r[0])

    @property
    def columns(self) -> tuple[str, ...]:
        return CSV_SCHEMAS[self.kind]

    def column(self, name: str) -> np.ndarray:
        k = self.columns.index(name)
        return np.array([r[k] for r in self.rows], dtype=float)

    def to_csv(self, path) -> None:
        write_csv(path, self.columns, self.rows)


def _fmt(v) -> str:
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def write_csv(path, header: Sequence[str], rows: Sequence[Sequence]) -> None:
    """Deterministic CSV: header always present, floats in round-trip form."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(v) for v in r])


def read_csv(path) -> tuple[list[str], list[tuple]]:
    with open(path, newline="") as fh:
        rd = csv.reader(fh)
        header = next(rd)
        rows = [tuple(int(x) if x.lstrip("-").isdigit() else float(x) for x in r) for r in rd]
    return header, rows


# ---------------------------------------------------------------------------
# Studies
# ---------------------------------------------------------------------------


def sparse_grid_study(
    evaluator: Evaluator, n_s: int, w_list: Sequence[int], reference: QoiEstimate, variant: str = "SM"
) -> ConvergenceCurve:
    """Errors of the level-``w`` estimates against ``reference`` versus knots."""
    rows, ests = [], []
    for w in sorted(w_list):
        est = estimate(evaluator, sg.IndexRule(variant, w), n_s)
        rows.append((est.eta, abs(reference.mean - est.mean), abs(reference.variance - est.variance)))
        ests.append(est)
    return ConvergenceCurve("sg", rows, reference.as_dict(), f"N_s={n_s}", ests)


def truncation_study(
    evaluator: Evaluator,
    n_s_list: Sequence[int],
    reference: QoiEstimate,
    level: int | Callable[[int], int] = 3,
    variant: str = "SM",
) -> ConvergenceCurve:
    """Errors of truncated-parameter estimates against ``reference`` versus ``N_s``."""
    rows, ests = [], []
    for n_s in sorted(n_s_list):
        w = level(n_s) if callable(level) else level
        est = estimate(evaluator, sg.IndexRule(variant, w), n_s)
        rows.append((n_s, abs(reference.mean - est.mean), abs(reference.variance - est.variance)))
        ests.append(est)
    return ConvergenceCurve("truncation", rows, reference.as_dict(), "", ests)


def loglog_slope(x, y) -> float:
    """Least-squares slope of ``log y`` against ``log x`` (zero errors dropped)."""
    x, y = np.asarray(x, dtype=float), np.asarray(y, dtype=float)
    keep = (x > 0) & (y > 0)
    if keep.sum() < 2:
        raise ParameterError("need at least two positive points for a slope fit")
    return float(np.polyfit(np.log(x[keep]), np.log(y[keep]), 1)[0])


@dataclass
class FemStudyResult:
    curve: ConvergenceCurve
    slope: float
    local_slopes: list[float]
    flagged: list[float]


def fem_study(
    mesh_list: Sequence[int],
    sample_for_mesh: Callable[[int], Callable],
    rule: sg.IndexRule,
    n_s: int,
    reference_mesh: int | None = None,
    expected_slope: float = 2.0,
    window: float = 0.15,
) -> FemStudyResult:
    """QoI-mean error against the finest (or a given) mesh versus ``h``.

    ``sample_for_mesh(n)`` returns the sample function on an ``n x n`` mesh.
    Meshes whose local slope falls outside ``expected_slope * (1 +- window)``
    are reported in ``flagged``.
    """
    meshes = sorted(mesh_list)
    ref_n = reference_mesh or meshes[-1]
    grid = sg.build_grid(rule, n_s)

    def mean_for(n):
        f = sample_for_mesh(n)
        return sg.quadrature(grid, np.array([f(y) for y in grid.nodes]))

    ref = mean_for(ref_n)
    rows = [(1.0 / (n - 1), abs(mean_for(n) - ref)) for n in meshes if n != ref_n]
    curve = ConvergenceCurve("fem", rows, {"mesh": ref_n, "mean": ref})
    h, e = curve.column("h"), curve.column("qoi_error")
    slope = loglog_slope(h, e) if len(h) >= 2 else float("nan")
    local = [float(np.log(e[i + 1] / e[i]) / np.log(h[i + 1] / h[i])) for i in range(len(h) - 1)]
    lo, hi = expected_slope * (1 - window), expected_slope * (1 + window)
    flagged = [float(h[i + 1]) for i, s in enumerate(local) if not lo <= s <= hi]
    return FemStudyResult(curve, slope, local, flagged)


@dataclass
class TruncationBoundCheck:
    n_s: list[int]
    measured: list[float]
    bound: list[float]
    c1: float
    c2: float

    @property
    def holds(self) -> bool:
        return all(m <= b * (1 + 1e-12) for m, b in zip(self.measured, self.bound))


def truncation_bound_check(
    curve: ConvergenceCurve, report: domain_map.AssumptionReport, c1: float | None = None, c2: float | None = None
) -> TruncationBoundCheck:
    """Compare measured truncation errors with ``c1 B_T + c2 C_T``.

    ``B_T``/``C_T`` are the sampled tails of the gradient and value sums.
    The constants involve norms of the unknown solution; when omitted they
    are calibrated on the first row (``c1 = c2``), so the check then tests
    that the measured error decays no slower than the tail sums.
    """
    n_s = [int(r[0]) for r in curve.rows]
    err = [float(r[1]) for r in curve.rows]
    bt = [float(report.tail_B[k]) for k in n_s]
    ct = [float(report.tail_C[k]) for k in n_s]
    if c1 is None or c2 is None:
        k = 0
        denom = bt[k] + ct[k]
        c = err[k] / denom if denom > 0 else 0.0
        c1 = c if c1 is None else c1
        c2 = c if c2 is None else c2
    bound = [c1 * b + c2 * t for b, t in zip(bt, ct)]
    return TruncationBoundCheck(n_s, err, bound, c1, c2)


def predicted_curve(eta_list, n_s: int, delta_tilde: float, d: int = 2, q_scale: float = 1.0) -> list[float]:
    """Overlay of the analytic sparse-grid bound (never used as an oracle)."""
    rep = analyticity.analyze(delta_tilde, d, n_s=n_s, policy="lemma")
    if rep.sigma is None:
        return [math.nan for _ in eta_list]
    return [analyticity.predicted_error(e, rep.sigma, n_s, q_scale) for e in eta_list]
