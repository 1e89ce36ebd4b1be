"""Random domain maps ``F(x, y) = x + e(x, y) v(x)`` and the remapped coefficients.

The deformation is separable: a scalar perturbation

    e(x, y) = sum_l sqrt_mu[l] * b_l(x) * y_l,      y in [-1, 1]^N

moves every point of the reference domain along a fixed direction field
``v(x)``.  Pulling the elliptic problem back onto the reference domain turns
the scalar diffusion ``a`` into the matrix coefficient

    G(x, y) = a(x) det(dF) dF^{-1} dF^{-T}.

All evaluators are vectorised over points: ``x`` has shape ``(..., d)``.
Fields with a derivative jump across an interface accept an optional
``piece`` array of the same shape; it is used only to pick the smooth branch
(assembly passes the element centroid there), so quadrature points lying on
the interface are evaluated from the element's own side.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np

from .errors import AssumptionViolatedError, DegenerateMapError, ParameterError

DET_TOL = 1e-14


# ---------------------------------------------------------------------------
# Scalar and vector fields
# ---------------------------------------------------------------------------


class ScalarField:
    """Interface for a scalar field ``b(x)`` with gradient."""

    def value(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def grad(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return self.value(x)


class VectorField:
    """Interface for a direction field ``v(x)`` with Jacobian ``dv[i, j] = d_j v_i``."""

    def value(self, x: np.ndarray, piece: np.ndarray | None = None) -> np.ndarray:
        raise NotImplementedError

    def jac(self, x: np.ndarray, piece: np.ndarray | None = None) -> np.ndarray:
        raise NotImplementedError


@dataclass(frozen=True)
class ConstantField(ScalarField):
    c: float = 1.0

    def value(self, x):
        x = np.asarray(x, dtype=float)
        return np.full(x.shape[:-1], self.c)

    def grad(self, x):
        return np.zeros_like(np.asarray(x, dtype=float))


@dataclass(frozen=True)
class LinearField(ScalarField):
    """``b(x) = coef . x + offset``."""

    coef: tuple[float, ...]
    offset: float = 0.0

    def value(self, x):
        x = np.asarray(x, dtype=float)
        return x @ np.asarray(self.coef) + self.offset

    def grad(self, x):
        x = np.asarray(x, dtype=float)
        return np.broadcast_to(np.asarray(self.coef, dtype=float), x.shape).copy()


@dataclass(frozen=True)
class TrigMode(ScalarField):
    """Mode ``n`` of the square test case, a function of ``x1`` only.

    ``n**-1 sin(k pi x1 / L_p)`` for even ``n`` and ``n**-1 cos(k pi x1 / L_p)``
    for odd ``n``, with ``k = n // 2``.
    """

    n: int
    L_p: float = 1.0

    @property
    def wavenumber(self) -> float:
        return (self.n // 2) * math.pi / self.L_p

    def value(self, x):
        x1 = np.asarray(x, dtype=float)[..., 0]
        k = self.wavenumber
        if self.n % 2 == 0:
            return np.sin(k * x1) / self.n
        return np.cos(k * x1) / self.n

    def grad(self, x):
        x = np.asarray(x, dtype=float)
        k = self.wavenumber
        out = np.zeros_like(x)
        if self.n % 2 == 0:
            out[..., 0] = k * np.cos(k * x[..., 0]) / self.n
        else:
            out[..., 0] = -k * np.sin(k * x[..., 0]) / self.n
        return out


@dataclass(frozen=True)
class ConstantDirection(VectorField):
    vec: tuple[float, ...]

    def value(self, x, piece=None):
        x = np.asarray(x, dtype=float)
        return np.broadcast_to(np.asarray(self.vec, dtype=float), x.shape).copy()

    def jac(self, x, piece=None):
        x = np.asarray(x, dtype=float)
        d = x.shape[-1]
        return np.zeros(x.shape[:-1] + (d, d))


@dataclass(frozen=True)
class LinearDirection(VectorField):
    """``v(x) = A x + b`` for a constant matrix ``A``."""

    matrix: tuple[tuple[float, ...], ...]
    shift: tuple[float, ...] | None = None

    def value(self, x, piece=None):
        x = np.asarray(x, dtype=float)
        out = x @ np.asarray(self.matrix, dtype=float).T
        if self.shift is not None:
            out = out + np.asarray(self.shift)
        return out

    def jac(self, x, piece=None):
        x = np.asarray(x, dtype=float)
        A = np.asarray(self.matrix, dtype=float)
        return np.broadcast_to(A, x.shape[:-1] + A.shape).copy()


@dataclass(frozen=True)
class UpperHalfStretch(VectorField):
    """``v(x) = (0, x2 - split)`` above ``x2 = split`` and zero below.

    Continuous across the interface; its Jacobian jumps there, so the branch
    is selected from ``piece`` when given.
    """

    split: float = 0.5

    def _upper(self, x, piece):
        ref = x if piece is None else np.asarray(piece, dtype=float)
        return ref[..., 1] > self.split

    def value(self, x, piece=None):
        x = np.asarray(x, dtype=float)
        out = np.zeros_like(x)
        out[..., 1] = np.where(self._upper(x, piece), x[..., 1] - self.split, 0.0)
        return out

    def jac(self, x, piece=None):
        x = np.asarray(x, dtype=float)
        out = np.zeros(x.shape[:-1] + (2, 2))
        out[..., 1, 1] = np.where(self._upper(x, piece), 1.0, 0.0)
        return out


# ---------------------------------------------------------------------------
# Deformation model
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DeformationModel:
    """Separable random deformation of the reference domain.

    ``sqrt_mu`` already carries any scaling of the random variables onto
    ``[-1, 1]``; ``params`` records how the model was built so it can be
    serialised back into an experiment config.
    """

    sqrt_mu: np.ndarray
    basis: tuple[ScalarField, ...]
    direction: VectorField
    dim: int = 2
    params: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        sqrt_mu = np.asarray(self.sqrt_mu, dtype=float)
        object.__setattr__(self, "sqrt_mu", sqrt_mu)
        object.__setattr__(self, "basis", tuple(self.basis))
        if sqrt_mu.ndim != 1 or len(sqrt_mu) != len(self.basis):
            raise ParameterError("sqrt_mu and basis must have the same length")
        if np.any(sqrt_mu < 0):
            raise ParameterError("sqrt_mu amplitudes must be non-negative")

    @property
    def n_total(self) -> int:
        return len(self.sqrt_mu)

    def is_monotone(self) -> bool:
        return bool(np.all(np.diff(self.sqrt_mu) <= 1e-15))

    def padded(self, y: Sequence[float] | np.ndarray) -> np.ndarray:
        """Return ``y`` padded with zeros to length ``n_total``."""
        y = np.atleast_1d(np.asarray(y, dtype=float))
        if y.ndim != 1 or len(y) > self.n_total:
            raise ParameterError(f"parameter point has {len(y)} entries, model has {self.n_total}")
        if np.any(np.abs(y) > 1.0 + 1e-12):
            raise ParameterError("parameter point outside [-1, 1]")
        out = np.zeros(self.n_total)
        out[: len(y)] = y
        return out

    def truncated(self, n_s: int) -> "DeformationModel":
        """Model with the amplitudes beyond ``n_s`` set to zero."""
        if not 0 <= n_s <= self.n_total:
            raise ParameterError(f"n_s={n_s} outside [0, {self.n_total}]")
        sqrt_mu = self.sqrt_mu.copy()
        sqrt_mu[n_s:] = 0.0
        return DeformationModel(sqrt_mu, self.basis, self.direction, self.dim, dict(self.params))


def perturbation_matrix(model: DeformationModel, l: int, x, piece=None) -> np.ndarray:
    """Matrix ``B_l(x) = b_l dv + v grad(b_l)^T`` for 1-based index ``l``."""
    if not 1 <= l <= model.n_total:
        raise ParameterError(f"expansion index {l} outside [1, {model.n_total}]")
    x = np.asarray(x, dtype=float)
    b = model.basis[l - 1]
    v = model.direction.value(x, piece)
    dv = model.direction.jac(x, piece)
    return b.value(x)[..., None, None] * dv + v[..., :, None] * b.grad(x)[..., None, :]


def perturbation_matrices(model: DeformationModel, x, piece=None) -> np.ndarray:
    """All ``B_l(x)`` stacked along a leading axis of length ``n_total``."""
    x = np.asarray(x, dtype=float)
    v = model.direction.value(x, piece)
    dv = model.direction.jac(x, piece)
    out = np.empty((model.n_total,) + x.shape[:-1] + (model.dim, model.dim))
    for k, b in enumerate(model.basis):
        out[k] = b.value(x)[..., None, None] * dv + v[..., :, None] * b.grad(x)[..., None, :]
    return out


def displacement(model: DeformationModel, x, y, piece=None) -> np.ndarray:
    """``e(x, y) v(x)``; trailing parameters missing from ``y`` count as zero."""
    x = np.asarray(x, dtype=float)
    yp = model.padded(y)
    e = np.zeros(x.shape[:-1])
    for amp, b, yl in zip(model.sqrt_mu, model.basis, yp):
        if amp != 0.0 and yl != 0.0:
            e = e + amp * yl * b.value(x)
    return e[..., None] * model.direction.value(x, piece)


def mapped_points(model: DeformationModel, x, y, piece=None) -> np.ndarray:
    return np.asarray(x, dtype=float) + displacement(model, x, y, piece)


def jacobian(model: DeformationModel, x, y, piece=None) -> np.ndarray:
    """``dF(x, y) = I + sum_l sqrt_mu_l B_l(x) y_l``."""
    x = np.asarray(x, dtype=float)
    yp = model.padded(y)
    J = np.broadcast_to(np.eye(model.dim), x.shape[:-1] + (model.dim, model.dim)).copy()
    active = [k for k in range(model.n_total) if model.sqrt_mu[k] != 0.0 and yp[k] != 0.0]
    if not active:
        return J
    v = model.direction.value(x, piece)
    dv = model.direction.jac(x, piece)
    for k in active:
        b = model.basis[k]
        B = b.value(x)[..., None, None] * dv + v[..., :, None] * b.grad(x)[..., None, :]
        J += (model.sqrt_mu[k] * yp[k]) * B
    return J


def _det_and_cofactor_product(J: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Return ``det J`` and ``det(J)^2 J^{-1} J^{-T}`` (exactly symmetric for d=2)."""
    d = J.shape[-1]
    if d == 2:
        a, b = J[..., 0, 0], J[..., 0, 1]
        c, e = J[..., 1, 0], J[..., 1, 1]
        det = a * e - b * c
        # adj(J) = [[e, -b], [-c, a]]; adj adj^T
        M = np.empty(J.shape)
        M[..., 0, 0] = e * e + b * b
        M[..., 0, 1] = -(e * c + b * a)
        M[..., 1, 0] = M[..., 0, 1]
        M[..., 1, 1] = c * c + a * a
        return det, M
    det = np.linalg.det(J)
    Jinv = np.linalg.inv(J)
    M = (det * det)[..., None, None] * (Jinv @ np.swapaxes(Jinv, -1, -2))
    return det, 0.5 * (M + np.swapaxes(M, -1, -2))


def coefficient_matrix(model: DeformationModel, a, x, y, piece=None):
    """Remapped coefficient at reference points ``x`` for parameter ``y``.

    Parameters
    ----------
    a : callable or float or None
        Deterministic diffusion on the reference domain; ``None`` means 1.

    Returns
    -------
    G : ndarray (..., d, d)
        ``a det(dF) dF^{-1} dF^{-T}``.
    det : ndarray (...)
        Jacobian determinant, needed for the load term.
    Fx : ndarray (..., d)
        Mapped points ``F(x, y)``.
    """
    x = np.asarray(x, dtype=float)
    J = jacobian(model, x, y, piece)
    det, M = _det_and_cofactor_product(J)
    bad = np.ravel(det <= DET_TOL)
    if bad.any():
        k = int(np.argmax(bad))
        raise DegenerateMapError(
            f"det dF = {np.ravel(det)[k]:.3e} at x={x.reshape(-1, model.dim)[k].tolist()},"
            f" y={np.asarray(y).tolist()}"
        )
    av = _eval_diffusion(a, x)
    G = (av / det)[..., None, None] * M
    return G, det, x + displacement(model, x, y, piece)


def _eval_diffusion(a, x) -> np.ndarray:
    if a is None:
        return np.ones(x.shape[:-1])
    if callable(a):
        return np.asarray(a(x), dtype=float) * np.ones(x.shape[:-1])
    return np.full(x.shape[:-1], float(a))


# ---------------------------------------------------------------------------
# Assumption checks
# ---------------------------------------------------------------------------


@dataclass
class AssumptionReport:
    delta_tilde: float
    worst_x: np.ndarray
    b_sup: float
    tail_B: np.ndarray
    tail_C: np.ndarray
    n_samples: int
    monotone: bool

    def as_dict(self) -> dict[str, Any]:
        return {
            "delta_tilde": self.delta_tilde,
            "worst_x": self.worst_x.tolist(),
            "b_sup": self.b_sup,
            "tail_B": self.tail_B.tolist(),
            "tail_C": self.tail_C.tolist(),
            "n_samples": self.n_samples,
            "monotone": self.monotone,
        }


def verify_assumptions(model: DeformationModel, points, pieces=None, *, force: bool = False) -> AssumptionReport:
    """Sampled invertibility margin ``1 - max_x sum_l sqrt_mu_l ||B_l(x)||_2``.

    ``tail_B[k]`` is ``max_x sum_{l > k} sqrt_mu_l ||B_l(x)||_2`` (the
    truncation quantity when keeping ``k`` dimensions) and ``tail_C[k]`` the
    same sum over ``|b_l(x)|``.

    Raises
    ------
    AssumptionViolatedError
        If the margin is not positive and ``force`` is false.
    """
    pts = np.asarray(points, dtype=float).reshape(-1, model.dim)
    if len(pts) == 0:
        raise ParameterError("need at least one sample point")
    pc = None if pieces is None else np.asarray(pieces, dtype=float).reshape(-1, model.dim)
    B = perturbation_matrices(model, pts, pc)
    norms = np.linalg.norm(B, ord=2, axis=(-2, -1)) if model.n_total else np.zeros((0, len(pts)))
    weighted = model.sqrt_mu[:, None] * norms
    bvals = np.array([np.abs(b.value(pts)) for b in model.basis]).reshape(model.n_total, len(pts))
    weighted_b = model.sqrt_mu[:, None] * bvals
    # rev cumulative sums: tail[k] = sum_{l >= k} (0-based) i.e. dims beyond the first k kept
    cumB = np.vstack([np.cumsum(weighted[::-1], axis=0)[::-1], np.zeros((1, len(pts)))])
    cumC = np.vstack([np.cumsum(weighted_b[::-1], axis=0)[::-1], np.zeros((1, len(pts)))])
    tail_B = cumB.max(axis=1)
    tail_C = cumC.max(axis=1)
    total = cumB[0]
    worst = int(np.argmax(total))
    report = AssumptionReport(
        delta_tilde=float(1.0 - total[worst]),
        worst_x=pts[worst].copy(),
        b_sup=float(bvals.max()) if bvals.size else 0.0,
        tail_B=tail_B,
        tail_C=tail_C,
        n_samples=len(pts),
        monotone=model.is_monotone(),
    )
    if report.delta_tilde <= 0 and not force:
        raise AssumptionViolatedError(
            f"invertibility margin delta_tilde={report.delta_tilde:.4f} <= 0 (worst x={report.worst_x.tolist()})"
        )
    return report


# ---------------------------------------------------------------------------
# Square test case
# ---------------------------------------------------------------------------

SQUARE_DEFAULTS = {"c": 0.1533, "L": 0.5, "L_p": 1.0, "N": 15, "decay": "linear"}


def build_square_testcase(c: float = 0.1533, L: float = 0.5, L_p: float = 1.0, n_total: int = 15) -> DeformationModel:
    """Upper half of the unit square stretched vertically by a random profile in ``x1``.

    The random variables are uniform on ``(-sqrt3, sqrt3)``; they are rescaled
    to ``[-1, 1]`` with the factor ``sqrt3`` absorbed into the amplitudes.
    Mode 1 is constant in ``x1``; modes ``n >= 2`` use :class:`TrigMode` with
    amplitude ``(sqrt(pi) L)**0.5 / n``.
    """
    if not (c > 0 and L > 0 and L_p > 0) or int(n_total) < 1:
        raise ParameterError("need c > 0, L > 0, L_p > 0 and n_total >= 1")
    n_total = int(n_total)
    s3 = math.sqrt(3.0)
    amps = [c * s3 * math.sqrt(math.sqrt(math.pi) * L / 2.0)]
    basis: list[ScalarField] = [ConstantField(1.0)]
    for n in range(2, n_total + 1):
        amps.append(c * s3 * math.sqrt(math.sqrt(math.pi) * L) / n)
        basis.append(TrigMode(n, L_p))
    params = {"c": c, "L": L, "L_p": L_p, "N": n_total, "decay": "linear"}
    return DeformationModel(np.array(amps), tuple(basis), UpperHalfStretch(0.5), 2, params)


def zero_model(n_total: int = 1, dim: int = 2) -> DeformationModel:
    """A model whose every realisation is the identity map."""
    basis = tuple(ConstantField(1.0) for _ in range(n_total))
    return DeformationModel(np.zeros(n_total), basis, UpperHalfStretch(0.5), dim, {"zero": True, "N": n_total})


def model_to_dict(model: DeformationModel) -> dict[str, Any]:
    if not model.params:
        raise ParameterError("model was not built from serialisable parameters")
    return dict(model.params)


def model_from_dict(cfg: dict[str, Any]) -> DeformationModel:
    cfg = {**SQUARE_DEFAULTS, **cfg}
    if cfg.get("zero"):
        return zero_model(int(cfg["N"]))
    if cfg["decay"] != "linear":
        raise ParameterError(f"unsupported decay law {cfg['decay']!r}; only 'linear' is available")
    return build_square_testcase(float(cfg["c"]), float(cfg["L"]), float(cfg["L_p"]), int(cfg["N"]))


class PreparedMap:
    """Coefficient evaluator with every ``B_l`` precomputed at fixed points.

    Rebuilding ``dF`` for a new parameter point then costs one contraction.
    Points where the direction field and all ``B_l`` vanish are skipped; the
    map is the identity there for every ``y``.
    """

    def __init__(self, model: DeformationModel, x, piece=None, a=None):
        x = np.asarray(x, dtype=float)
        self.model = model
        self.shape = x.shape[:-1]
        flat = x.reshape(-1, model.dim)
        pc = None if piece is None else np.asarray(piece, dtype=float).reshape(-1, model.dim)
        B = perturbation_matrices(model, flat, pc)
        v = model.direction.value(flat, pc)
        active = np.any(B != 0.0, axis=(0, 2, 3)) | np.any(v != 0.0, axis=-1)
        self.x = flat
        self.active = np.flatnonzero(active)
        self.B = np.ascontiguousarray(np.moveaxis(B[:, self.active], 0, -1))  # (P, d, d, N)
        self.bvals = np.array([b.value(flat[self.active]) for b in model.basis]).reshape(model.n_total, -1).T
        self.v = v[self.active]
        self.a = _eval_diffusion(a, flat)

    def evaluate(self, y):
        """``(G, det, F(x))`` at the prepared points, shaped like the input."""
        model = self.model
        d = model.dim
        yp = model.padded(y)
        coef = model.sqrt_mu * yp
        n = len(self.x)
        G = np.broadcast_to(np.eye(d), (n, d, d)) * self.a[:, None, None]
        det = np.ones(n)
        Fx = self.x.copy()
        if np.any(coef != 0.0) and len(self.active):
            J = np.eye(d) + self.B @ coef
            dA, M = _det_and_cofactor_product(J)
            if np.any(dA <= DET_TOL):
                k = int(np.argmax(dA <= DET_TOL))
                raise DegenerateMapError(
                    f"det dF = {dA[k]:.3e} at x={self.x[self.active[k]].tolist()}, y={np.asarray(y).tolist()}"
                )
            G = G.copy()
            G[self.active] = (self.a[self.active] / dA)[:, None, None] * M
            det[self.active] = dA
            Fx[self.active] += (self.bvals @ coef)[:, None] * self.v
        return G.reshape(self.shape + (d, d)), det.reshape(self.shape), Fx.reshape(self.shape + (d,))
