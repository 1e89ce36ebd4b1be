"""P1 finite elements on a structured triangulation of the unit square.

One call to :func:`assemble` builds the remapped stiffness matrix for a single
parameter point.  Integrals use the three-point edge-midpoint rule (exact for
quadratics); the coefficient is evaluated per element, with the element
centroid passed as ``piece`` so interface quadrature points stay on the
element's own side.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from . import domain_map
from .errors import DegenerateMapError, ParameterError, SolverError

SOLVER_RTOL = 1e-12

# barycentric coordinates of the edge midpoints, rows = quadrature points
_MIDPOINT_BARY = np.array([[0.5, 0.5, 0.0], [0.0, 0.5, 0.5], [0.5, 0.0, 0.5]])

# degree-5, 7-point rule used for error norms (barycentric, weights sum to 1)
_a1, _b1 = 0.059715871789770, 0.470142064105115
_a2, _b2 = 0.797426985353087, 0.101286507323456
_DUNAVANT7_BARY = np.array(
    [
        [1 / 3, 1 / 3, 1 / 3],
        [_a1, _b1, _b1],
        [_b1, _a1, _b1],
        [_b1, _b1, _a1],
        [_a2, _b2, _b2],
        [_b2, _a2, _b2],
        [_b2, _b2, _a2],
    ]
)
_DUNAVANT7_W = np.array([0.225] + [0.132394152788506] * 3 + [0.125939180544827] * 3)


@dataclass(eq=False)
class Mesh:
    """Structured ``n x n`` vertex grid of the unit square, two triangles per cell."""

    n: int
    vertices: np.ndarray
    triangles: np.ndarray
    boundary: np.ndarray
    sides: dict[str, np.ndarray]
    h: float
    area: np.ndarray = field(init=False, repr=False)
    grads: np.ndarray = field(init=False, repr=False)
    centroids: np.ndarray = field(init=False, repr=False)
    qpoints: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        p = self.vertices[self.triangles]  # (T, 3, 2)
        M = np.stack([p[:, 1] - p[:, 0], p[:, 2] - p[:, 0]], axis=1)
        self.area = 0.5 * (M[:, 0, 0] * M[:, 1, 1] - M[:, 0, 1] * M[:, 1, 0])
        Minv = np.linalg.inv(M)
        g12 = np.swapaxes(Minv, 1, 2)  # rows: grad of lambda_1, lambda_2
        g0 = -(g12[:, 0] + g12[:, 1])
        self.grads = np.concatenate([g0[:, None], g12], axis=1)  # (T, 3, 2)
        self.centroids = p.mean(axis=1)
        self.qpoints = np.einsum("qi,tid->tqd", _MIDPOINT_BARY, p)
        rows = np.repeat(self.triangles, 3, axis=1).ravel()
        cols = np.tile(self.triangles, (1, 3)).ravel()
        nv = len(self.vertices)
        keys, self._scatter = np.unique(rows.astype(np.int64) * nv + cols, return_inverse=True)
        self._csr_rows = keys // nv
        self._csr_cols = keys % nv
        counts = np.bincount(self._csr_rows, minlength=nv)
        self._indptr = np.concatenate([[0], np.cumsum(counts)])
        self.interior = np.flatnonzero(~self.boundary)

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    def matrix_from_local(self, local: np.ndarray) -> sp.csr_matrix:
        """Sum element matrices ``(T, 3, 3)`` into a global CSR matrix."""
        data = np.bincount(self._scatter, weights=local.ravel(), minlength=len(self._csr_cols))
        nv = self.n_vertices
        return sp.csr_matrix((data, self._csr_cols.copy(), self._indptr.copy()), shape=(nv, nv))

    def vector_from_local(self, local: np.ndarray) -> np.ndarray:
        return np.bincount(self.triangles.ravel(), weights=local.ravel(), minlength=self.n_vertices)

    def sample_points(self) -> tuple[np.ndarray, np.ndarray]:
        """Vertices plus quadrature points, with branch hints for each."""
        qp = self.qpoints.reshape(-1, 2)
        pc = np.repeat(self.centroids, 3, axis=0)
        return np.vstack([self.vertices, qp]), np.vstack([self.vertices, pc])


def build_mesh(n: int) -> Mesh:
    """Uniform mesh with ``n`` vertices per side and ``2 (n-1)^2`` triangles."""
    if int(n) != n or n < 3:
        raise ParameterError(f"need at least 3 vertices per side, got {n}")
    n = int(n)
    t = np.linspace(0.0, 1.0, n)
    X1, X2 = np.meshgrid(t, t)
    vertices = np.column_stack([X1.ravel(), X2.ravel()])
    i, j = np.meshgrid(np.arange(n - 1), np.arange(n - 1))
    k = (j * n + i).ravel()
    lower = np.column_stack([k, k + 1, k + n + 1])
    upper = np.column_stack([k, k + n + 1, k + n])
    triangles = np.empty((2 * len(k), 3), dtype=np.int64)
    triangles[0::2] = lower
    triangles[1::2] = upper
    x1, x2 = vertices[:, 0], vertices[:, 1]
    tol = 1e-14
    sides = {
        "bottom": np.flatnonzero(np.abs(x2) < tol),
        "top": np.flatnonzero(np.abs(x2 - 1.0) < tol),
        "left": np.flatnonzero(np.abs(x1) < tol),
        "right": np.flatnonzero(np.abs(x1 - 1.0) < tol),
    }
    boundary = np.zeros(len(vertices), dtype=bool)
    for idx in sides.values():
        boundary[idx] = True
    return Mesh(n, vertices, triangles, boundary, sides, 1.0 / (n - 1))


# ---------------------------------------------------------------------------
# Problem data
# ---------------------------------------------------------------------------


def bump(t):
    """``exp(-1 / (1 - 4 (t - 1/2)^2))`` on ``(0, 1)``, zero elsewhere."""
    t = np.asarray(t, dtype=float)
    s = 1.0 - 4.0 * (t - 0.5) ** 2
    out = np.zeros_like(t)
    inside = s > 0
    out[inside] = np.exp(-1.0 / s[inside])
    return out


@dataclass(frozen=True)
class TopEdgeBump:
    """Dirichlet datum: ``bump(x1)`` on the top edge, zero on the other sides."""

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        return np.where(np.abs(x[..., 1] - 1.0) < 1e-14, bump(x[..., 0]), 0.0)


@dataclass(frozen=True)
class BumpWeight:
    """QoI weight ``bump(x1) bump(2 x2)`` restricted to the lower half."""

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        return np.where(x[..., 1] < 0.5, bump(x[..., 0]) * bump(2.0 * x[..., 1]), 0.0)


@dataclass(frozen=True)
class CoefficientField:
    """Remapped coefficient of :mod:`domain_map` frozen at one parameter point."""

    model: domain_map.DeformationModel
    y: tuple[float, ...]
    a: object = None

    def __call__(self, x, piece=None):
        return domain_map.coefficient_matrix(self.model, self.a, x, np.asarray(self.y), piece)


@dataclass(frozen=True)
class IdentityCoefficient:
    """Coefficient of the undeformed problem, ``G = a I``."""

    a: object = None
    dim: int = 2

    def __call__(self, x, piece=None):
        x = np.asarray(x, dtype=float)
        av = domain_map._eval_diffusion(self.a, x)
        G = av[..., None, None] * np.eye(self.dim)
        return G, np.ones(x.shape[:-1]), x.copy()


# ---------------------------------------------------------------------------
# Assembly and solves
# ---------------------------------------------------------------------------


@dataclass(eq=False)
class FemSystem:
    mesh: Mesh
    K_full: sp.csr_matrix
    K: sp.csc_matrix
    rhs: np.ndarray
    lift: np.ndarray
    load: np.ndarray
    primal: np.ndarray | None = None
    adjoint: np.ndarray | None = None
    method: str = "direct"
    _lu: object = field(default=None, repr=False)

    @property
    def interior(self) -> np.ndarray:
        return self.mesh.interior


def quadrature_pieces(mesh: Mesh) -> np.ndarray:
    """Branch hints for ``mesh.qpoints``: each point's element centroid."""
    return np.broadcast_to(mesh.centroids[:, None, :], mesh.qpoints.shape)


def assemble(
    mesh: Mesh,
    coeff: Callable,
    source: Callable | None = None,
    boundary: Callable | None = None,
    method: str = "direct",
) -> FemSystem:
    """Stiffness, load and Dirichlet lift for one coefficient field.

    ``coeff(points, piece)`` returns ``(G, det, F(points))`` as
    :func:`domain_map.coefficient_matrix` does; a tuple of those arrays,
    already evaluated at ``mesh.qpoints``, is accepted as well.  ``source``
    is evaluated at mapped points, ``boundary`` at boundary vertices.
    """
    if callable(coeff):
        G, det, Fx = coeff(mesh.qpoints, quadrature_pieces(mesh))
    else:
        G, det, Fx = coeff
    # SPD check for 2x2 blocks: positive leading entry and determinant
    if G.shape[-1] == 2:
        ok = (G[..., 0, 0] > 0) & (G[..., 0, 0] * G[..., 1, 1] - G[..., 0, 1] * G[..., 1, 0] > 0)
    else:
        ok = np.linalg.eigvalsh(G)[..., 0] > 0
    if not np.all(ok):
        t = int(np.argmin(ok.all(axis=1)))
        raise DegenerateMapError(f"coefficient not SPD on element {t} (centroid {mesh.centroids[t].tolist()})")
    Gbar = G.mean(axis=1)
    local = mesh.area[:, None, None] * (mesh.grads @ Gbar @ np.swapaxes(mesh.grads, 1, 2))
    K_full = mesh.matrix_from_local(local)

    load = np.zeros(mesh.n_vertices)
    if source is not None:
        fq = np.asarray(source(Fx), dtype=float) * det
        load = mesh.vector_from_local((mesh.area / 3.0)[:, None] * (fq @ _MIDPOINT_BARY))
    lift = np.zeros(mesh.n_vertices)
    if boundary is not None:
        bidx = np.flatnonzero(mesh.boundary)
        lift[bidx] = boundary(mesh.vertices[bidx])
    rhs_full = load - K_full @ lift
    inner = mesh.interior
    K = K_full[inner][:, inner].tocsc()
    return FemSystem(mesh, K_full, K, rhs_full[inner], lift, load, method=method)


def _solve(system: FemSystem, rhs: np.ndarray) -> np.ndarray:
    if system.method == "direct":
        if system._lu is None:
            system._lu = spla.splu(system.K, permc_spec="MMD_AT_PLUS_A")
        x = system._lu.solve(rhs)
    elif system.method == "cg":
        d = system.K.diagonal()
        M = sp.diags(1.0 / d)
        x, info = spla.cg(system.K, rhs, rtol=SOLVER_RTOL, atol=0.0, M=M, maxiter=20 * len(rhs))
        if info != 0:
            res = np.linalg.norm(system.K @ x - rhs)
            raise SolverError(f"CG did not converge (info={info}, residual={res:.3e})")
    else:
        raise ParameterError(f"unknown solver method {system.method!r}")
    nb = np.linalg.norm(rhs)
    res = np.linalg.norm(system.K @ x - rhs)
    if nb > 0 and res > 1e-9 * nb:
        raise SolverError(f"linear solve residual {res:.3e} exceeds tolerance (|b|={nb:.3e})")
    return x


def solve_primal(system: FemSystem) -> np.ndarray:
    """Nodal values of the full solution (interior solve plus lift)."""
    u = system.lift.copy()
    if len(system.rhs):
        u[system.interior] += _solve(system, system.rhs)
    system.primal = u
    return u


@dataclass(eq=False)
class QoiFunctional:
    """``Q(u) = int q u`` discretised as ``vector . u`` for nodal ``u``."""

    weight: Callable
    vector: np.ndarray

    def __call__(self, u: np.ndarray) -> float:
        return float(self.vector @ u)


def build_qoi(mesh: Mesh, weight: Callable | None = None) -> QoiFunctional:
    """Discrete QoI; the default weight is :class:`BumpWeight`."""
    weight = BumpWeight() if weight is None else weight
    qv = np.asarray(weight(mesh.qpoints), dtype=float)
    vec = mesh.vector_from_local((mesh.area / 3.0)[:, None] * (qv @ _MIDPOINT_BARY))
    return QoiFunctional(weight, vec)


def solve_adjoint(system: FemSystem, qoi: QoiFunctional) -> np.ndarray:
    """Influence function: ``K phi = q`` on interior nodes, zero on the boundary."""
    phi = np.zeros(system.mesh.n_vertices)
    rhs = qoi.vector[system.interior]
    if np.any(rhs):
        phi[system.interior] = _solve(system, rhs)
    system.adjoint = phi
    return phi


def evaluate_qoi(u: np.ndarray, qoi: QoiFunctional) -> float:
    return float(qoi.vector @ u)


def bilinear(system: FemSystem, u: np.ndarray, v: np.ndarray) -> float:
    """Discrete remapped bilinear form ``B(y; u, v)``."""
    return float(u @ (system.K_full @ v))


def qoi_by_duality(system: FemSystem, qoi: QoiFunctional) -> float:
    """``Q(u) = B(y; u - lift, phi) + Q(lift)``; cross-check for the direct value."""
    if system.primal is None:
        solve_primal(system)
    if system.adjoint is None:
        solve_adjoint(system, qoi)
    return bilinear(system, system.primal - system.lift, system.adjoint) + evaluate_qoi(system.lift, qoi)


# ---------------------------------------------------------------------------
# Error norms and export
# ---------------------------------------------------------------------------


def error_norms(mesh: Mesh, uh: np.ndarray, exact: Callable, grad_exact: Callable) -> tuple[float, float]:
    """L2 and H1-seminorm errors of a P1 field against a smooth function."""
    p = mesh.vertices[mesh.triangles]
    x = np.einsum("qi,tid->tqd", _DUNAVANT7_BARY, p)
    uq = np.einsum("qi,ti->tq", _DUNAVANT7_BARY, uh[mesh.triangles])
    gh = np.einsum("ti,tid->td", uh[mesh.triangles], mesh.grads)
    w = mesh.area[:, None] * _DUNAVANT7_W[None, :]
    l2 = np.sum(w * (uq - exact(x)) ** 2)
    h1 = np.sum(w * np.sum((gh[:, None, :] - grad_exact(x)) ** 2, axis=-1))
    return math.sqrt(l2), math.sqrt(h1)


def export_field(mesh: Mesh, values: np.ndarray, path) -> None:
    """Plain-text ``x1 x2 value`` table, one row per vertex."""
    table = np.column_stack([mesh.vertices, values])
    np.savetxt(path, table, fmt="%.16e", header="x1 x2 value", comments="")


# ---------------------------------------------------------------------------
# Static condensation of the parameter-independent part
# ---------------------------------------------------------------------------


def _local_stiffness(mesh: Mesh, G: np.ndarray, elements: np.ndarray) -> np.ndarray:
    Gbar = G.mean(axis=1)
    grads = mesh.grads[elements]
    return mesh.area[elements, None, None] * (grads @ Gbar @ np.swapaxes(grads, 1, 2))


class CondensedQoi:
    """QoI evaluator that eliminates unknowns untouched by the deformation.

    ``variable`` flags the elements whose coefficient depends on the
    parameter.  Interior vertices touching only fixed elements are
    condensed out once (sparse LU of their block); every later call
    assembles the variable elements only and solves the interface-coupled
    remainder.  The result equals ``qoi(solve_primal(assemble(...)))`` up
    to round-off.
    """

    def __init__(
        self,
        mesh: Mesh,
        variable: np.ndarray,
        qoi: QoiFunctional,
        reference: tuple,
        source: Callable | None = None,
        boundary: Callable | None = None,
    ):
        variable = np.asarray(variable, dtype=bool)
        self.mesh, self.source = mesh, source
        self.var_el = np.flatnonzero(variable)
        fixed_el = np.flatnonzero(~variable)
        nv = mesh.n_vertices
        G0, det0, Fx0 = reference
        lift = np.zeros(nv)
        if boundary is not None:
            bidx = np.flatnonzero(mesh.boundary)
            lift[bidx] = boundary(mesh.vertices[bidx])
        self.lift = lift

        # fixed part
        local = np.zeros((len(mesh.triangles), 3, 3))
        local[fixed_el] = _local_stiffness(mesh, G0[fixed_el], fixed_el)
        K_fix = mesh.matrix_from_local(local)
        load_fix = np.zeros(nv)
        if source is not None:
            fq = np.asarray(source(Fx0[fixed_el]), dtype=float) * det0[fixed_el]
            loc = np.zeros((len(mesh.triangles), 3))
            loc[fixed_el] = (mesh.area[fixed_el] / 3.0)[:, None] * (fq @ _MIDPOINT_BARY)
            load_fix = mesh.vector_from_local(loc)

        touched = np.zeros(nv, dtype=bool)
        touched[mesh.triangles[self.var_el].ravel()] = True
        inner = ~mesh.boundary
        V = np.flatnonzero(inner & touched)
        C = np.flatnonzero(inner & ~touched)
        self.V = V
        K_fix = K_fix.tocsr()
        b_fix = load_fix - K_fix @ lift
        K_VV = K_fix[V][:, V]
        q = qoi.vector
        self.q_const = float(q[mesh.boundary] @ lift[mesh.boundary])
        if len(C):
            K_CC = K_fix[C][:, C].tocsc()
            K_CV = K_fix[C][:, V].tocsc()
            lu = spla.splu(K_CC, permc_spec="MMD_AT_PLUS_A")
            hit = np.flatnonzero(np.diff(K_CV.indptr))
            X = lu.solve(K_CV[:, hit].toarray())
            corr = sp.csr_matrix((len(V), len(V)))
            if len(hit):
                block = K_CV[:, hit].T @ X  # symmetric fixed block
                corr = sp.coo_matrix(
                    (block.ravel(), (np.repeat(hit, len(hit)), np.tile(hit, len(hit)))), shape=(len(V), len(V))
                ).tocsr()
            K_static = (K_VV - corr).tocoo()
            z_b = lu.solve(b_fix[C])
            z_q = lu.solve(q[C])
            self.rhs_static = b_fix[V] - K_CV.T @ z_b
            self.q_eff = q[V] - K_CV.T @ z_q
            self.q_const += float(q[C] @ z_b)
        else:
            K_static = K_VV.tocoo()
            self.rhs_static = b_fix[V].copy()
            self.q_eff = q[V].copy()

        # merged CSC pattern of the fixed block and the variable elements
        vloc = np.full(nv, -1, dtype=np.int64)
        vloc[V] = np.arange(len(V))
        tri = mesh.triangles[self.var_el]
        r = vloc[np.repeat(tri, 3, axis=1).ravel()]
        c_glob = np.tile(tri, (1, 3)).ravel()
        c = vloc[c_glob]
        both = (r >= 0) & (c >= 0)
        to_bnd = (r >= 0) & mesh.boundary[c_glob]
        nV = len(V)
        keys_var = c[both] * nV + r[both]
        keys_st = K_static.col.astype(np.int64) * nV + K_static.row
        keys, inv = np.unique(np.concatenate([keys_st, keys_var]), return_inverse=True)
        inv = inv.ravel()
        self._nnz = len(keys)
        self._static_data = np.bincount(inv[: len(keys_st)], weights=K_static.data, minlength=self._nnz)
        self._var_map = inv[len(keys_st) :]
        self._both, self._to_bnd = both, to_bnd
        self._rows_bnd = r[to_bnd]
        self._lift_bnd = lift[c_glob[to_bnd]]
        self._indices = (keys % nV).astype(np.int32)
        counts = np.bincount(keys // nV, minlength=nV)
        self._indptr = np.concatenate([[0], np.cumsum(counts)]).astype(np.int32)
        self._vloc_tri = vloc[tri]

    def __call__(self, coeff: tuple) -> float:
        """QoI for the coefficient ``(G, det, F(x))`` at the variable elements' quadrature points."""
        G, det, Fx = coeff
        mesh = self.mesh
        ok = (G[..., 0, 0] > 0) & (G[..., 0, 0] * G[..., 1, 1] - G[..., 0, 1] * G[..., 1, 0] > 0)
        if not np.all(ok):
            t = self.var_el[int(np.argmin(ok.all(axis=1)))]
            raise DegenerateMapError(f"coefficient not SPD on element {t} (centroid {mesh.centroids[t].tolist()})")
        local = _local_stiffness(mesh, G, self.var_el).ravel()
        data = self._static_data + np.bincount(self._var_map, weights=local[self._both], minlength=self._nnz)
        nV = len(self.V)
        K = sp.csc_matrix((data, self._indices, self._indptr), shape=(nV, nV))
        rhs = self.rhs_static - np.bincount(
            self._rows_bnd, weights=local[self._to_bnd] * self._lift_bnd, minlength=nV
        )
        if self.source is not None:
            fq = np.asarray(self.source(Fx), dtype=float) * det
            lv = ((mesh.area[self.var_el] / 3.0)[:, None] * (fq @ _MIDPOINT_BARY)).ravel()
            idx = self._vloc_tri.ravel()
            keep = idx >= 0
            rhs = rhs + np.bincount(idx[keep], weights=lv[keep], minlength=nV)
        u = spla.splu(K, permc_spec="MMD_AT_PLUS_A").solve(rhs)
        res = np.linalg.norm(K @ u - rhs)
        if res > 1e-9 * max(np.linalg.norm(rhs), 1e-300):
            raise SolverError(f"condensed solve residual {res:.3e} exceeds tolerance")
        return self.q_const + float(self.q_eff @ u)
