"""Generalised Smolyak interpolation and quadrature on ``[-1, 1]^N``.

Four index rules are supported (tensor product, total degree, hyperbolic
cross and classical Smolyak), all on Clenshaw-Curtis abscissas.  The
operator is stored in combination form: a signed integer combination of
full tensor interpolants, with their nodes merged into one node list.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.polynomial import chebyshev

from .errors import ContractError, ParameterError

VARIANTS = ("TP", "TD", "HC", "SM")
_KEY_SCALE = 1e13


# ---------------------------------------------------------------------------
# One-dimensional building blocks
# ---------------------------------------------------------------------------


@lru_cache(maxsize=None)
def _cc_nodes(m: int) -> tuple[float, ...]:
    if m == 1:
        return (0.0,)
    k = np.arange(m)
    x = -np.cos(np.pi * k / (m - 1))
    # exact symmetry and an exact zero for odd m
    x = 0.5 * (x - x[::-1])
    if m % 2 == 1:
        x[m // 2] = 0.0
    return tuple(float(v) for v in x)


def cc_nodes(m: int) -> np.ndarray:
    """Clenshaw-Curtis abscissas (Chebyshev extrema), sorted ascending."""
    if int(m) != m or m < 1:
        raise ParameterError(f"number of nodes must be >= 1, got {m}")
    return np.array(_cc_nodes(int(m)))


@lru_cache(maxsize=None)
def _uniform_weights(m: int) -> tuple[float, ...]:
    # interpolatory weights int l_k(t) dt/2 via Chebyshev moments
    if m == 1:
        return (1.0,)
    x = np.array(_cc_nodes(m))
    V = chebyshev.chebvander(x, m - 1)  # V[k, j] = T_j(x_k)
    j = np.arange(m)
    moments = np.zeros(m)
    even = j % 2 == 0
    moments[even] = 1.0 / (1.0 - j[even].astype(float) ** 2)
    w = np.linalg.solve(V.T, moments)
    w = 0.5 * (w + w[::-1])
    return tuple(float(v) for v in w)


def cc_weights(m: int, density: str = "uniform") -> np.ndarray:
    """Interpolatory weights ``int l_k(t) rho(t) dt`` for the uniform density on [-1, 1]."""
    if density != "uniform":
        raise ParameterError(f"unsupported density {density!r}; only 'uniform' is available")
    cc_nodes(m)
    return np.array(_uniform_weights(int(m)))


@lru_cache(maxsize=None)
def _bary_weights(m: int) -> np.ndarray:
    x = np.array(_cc_nodes(m))
    w = np.ones(m)
    for k in range(m):
        diff = x[k] - np.delete(x, k)
        w[k] = 1.0 / np.prod(diff)
    return w / np.max(np.abs(w))


def lagrange_basis(m: int, t: np.ndarray) -> np.ndarray:
    """Values ``l_k(t)`` of the Lagrange basis on ``cc_nodes(m)``, shape ``(len(t), m)``."""
    t = np.asarray(t, dtype=float)
    if m == 1:
        return np.ones((len(t), 1))
    x = np.array(_cc_nodes(m))
    w = _bary_weights(m)
    diff = t[:, None] - x[None, :]
    exact = diff == 0.0
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = w / diff
        L = terms / terms.sum(axis=1, keepdims=True)
    hit = exact.any(axis=1)
    if hit.any():
        L[hit] = exact[hit].astype(float)
    return L


# ---------------------------------------------------------------------------
# Index rules
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class IndexRule:
    """Admissibility rule ``g(i) <= level`` together with its growth ``m(i)``.

    ``weights`` is reserved for anisotropic rules and must be ``None``.
    """

    variant: str = "SM"
    level: int = 0
    weights: tuple[float, ...] | None = None

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ParameterError(f"unknown index rule {self.variant!r}; expected one of {VARIANTS}")
        if int(self.level) != self.level or self.level < 0:
            raise ParameterError(f"level must be a non-negative integer, got {self.level}")
        if self.weights is not None:
            raise ParameterError("anisotropic rules are not implemented")

    def growth(self, i: int) -> int:
        return growth(i, self.variant)

    def g(self, idx: Sequence[int]) -> int:
        """Cost of a multi-index; admissible iff ``g(idx) <= level``."""
        if self.variant == "TP":
            return max((k - 1 for k in idx), default=0)
        if self.variant == "HC":
            return math.prod(idx) - 1
        return sum(k - 1 for k in idx)

    def with_level(self, level: int) -> "IndexRule":
        return IndexRule(self.variant, level, self.weights)


def growth(i: int, variant: str = "SM") -> int:
    """Number of 1D nodes at level ``i`` (``m(0) = 0``)."""
    if i < 0:
        raise ParameterError(f"level must be >= 0, got {i}")
    if i == 0:
        return 0
    if variant == "SM":
        return 1 if i == 1 else 2 ** (i - 1) + 1
    if variant in VARIANTS:
        return i
    raise ParameterError(f"unknown index rule {variant!r}")


def index_set(rule: IndexRule, n_s: int) -> list[tuple[int, ...]]:
    """All multi-indices ``i >= 1`` with ``g(i) <= level``, in lexicographic order."""
    if n_s < 0:
        raise ParameterError("dimension must be non-negative")
    out: list[tuple[int, ...]] = []

    def rec(prefix: list[int]):
        if len(prefix) == n_s:
            out.append(tuple(prefix))
            return
        k = 1
        while True:
            trial = prefix + [k] + [1] * (n_s - len(prefix) - 1)
            if rule.g(trial) > rule.level:
                break
            rec(prefix + [k])
            k += 1

    rec([])
    return out


def combination_coefficients(rule: IndexRule, n_s: int) -> dict[tuple[int, ...], int]:
    """Nonzero ``c(i) = sum_{j in {0,1}^N, g(i+j) <= w} (-1)^|j|``."""
    members = index_set(rule, n_s)
    admissible = set(members)
    coeffs: dict[tuple[int, ...], int] = {}
    for idx in members:
        dirs = [n for n in range(n_s) if _bumped(idx, (n,)) in admissible]
        total = 0

        # the set is downward closed, so a failing j prunes all its supersets
        def rec(start: int, chosen: tuple[int, ...]):
            nonlocal total
            total += (-1) ** len(chosen)
            for p in range(start, len(dirs)):
                nxt = chosen + (dirs[p],)
                if _bumped(idx, nxt) in admissible:
                    rec(p + 1, nxt)

        rec(0, ())
        if total != 0:
            coeffs[idx] = total
    return coeffs


def _bumped(idx: tuple[int, ...], dims: Iterable[int]) -> tuple[int, ...]:
    out = list(idx)
    for n in dims:
        out[n] += 1
    return tuple(out)


def polynomial_space(rule: IndexRule, n_s: int) -> list[tuple[int, ...]]:
    """Multi-degrees reproduced exactly by the sparse operator."""
    w = rule.level

    def f_sm(p: int) -> int:
        if p <= 1:
            return p
        return math.ceil(math.log2(p))

    if rule.variant == "TP":
        ok = lambda p: max(p, default=0) <= w  # noqa: E731
        pmax = w
    elif rule.variant == "TD":
        ok = lambda p: sum(p) <= w  # noqa: E731
        pmax = w
    elif rule.variant == "HC":
        ok = lambda p: math.prod(q + 1 for q in p) <= w + 1  # noqa: E731
        pmax = w
    else:
        ok = lambda p: sum(f_sm(q) for q in p) <= w  # noqa: E731
        pmax = 2 ** (w - 1) if w >= 1 else 0
    return [p for p in itertools.product(range(pmax + 1), repeat=n_s) if ok(p)]


# ---------------------------------------------------------------------------
# Grids
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TensorTerm:
    index: tuple[int, ...]
    coef: int
    sizes: tuple[int, ...]
    node_ids: np.ndarray = field(repr=False)


@dataclass(frozen=True)
class SparseGrid:
    rule: IndexRule
    n_s: int
    nodes: np.ndarray
    weights: np.ndarray
    terms: tuple[TensorTerm, ...]
    counts: np.ndarray
    density: str = "uniform"

    @property
    def eta(self) -> int:
        return len(self.nodes)


def node_keys(points: np.ndarray) -> np.ndarray:
    """Integer keys of points rounded to a 1e-13 lattice."""
    return np.round(np.asarray(points, dtype=float) * _KEY_SCALE).astype(np.int64)


def _tensor_nodes(sizes: Sequence[int], variant: str) -> tuple[np.ndarray, np.ndarray]:
    grids = [cc_nodes(m) for m in sizes]
    wts = [cc_weights(m) for m in sizes]
    if not sizes:
        return np.zeros((1, 0)), np.ones(1)
    pts = np.stack(np.meshgrid(*grids, indexing="ij"), axis=-1).reshape(-1, len(sizes))
    w = np.ones(1)
    for wk in wts:
        w = np.multiply.outer(w, wk).ravel()
    return pts, w


def build_grid(rule: IndexRule, n_s: int, density: str = "uniform") -> SparseGrid:
    """Merged nodes and quadrature weights of the combination-form operator."""
    if density != "uniform":
        raise ParameterError(f"unsupported density {density!r}; only 'uniform' is available")
    coeffs = combination_coefficients(rule, n_s)
    blocks, wblocks, owners = [], [], []
    term_specs = []
    for t, (idx, c) in enumerate(coeffs.items()):
        sizes = tuple(rule.growth(k) for k in idx)
        pts, w = _tensor_nodes(sizes, rule.variant)
        blocks.append(pts)
        wblocks.append(c * w)
        owners.append(np.full(len(pts), t))
        term_specs.append((idx, c, sizes, len(pts)))
    allpts = np.vstack(blocks)
    allw = np.concatenate(wblocks)
    keys = node_keys(allpts)
    if n_s == 0:
        uniq_idx, inverse = np.array([0]), np.zeros(len(allpts), dtype=np.int64)
    else:
        _, uniq_idx, inverse = np.unique(keys, axis=0, return_index=True, return_inverse=True)
        inverse = inverse.ravel()
    nodes = allpts[uniq_idx]
    weights = np.bincount(inverse, weights=allw, minlength=len(nodes))
    counts = np.bincount(inverse, minlength=len(nodes))
    terms, start = [], 0
    for idx, c, sizes, size in term_specs:
        terms.append(TensorTerm(idx, c, sizes, inverse[start : start + size].copy()))
        start += size
    return SparseGrid(rule, n_s, nodes, weights, tuple(terms), counts, density)


def _check_samples(grid: SparseGrid, samples) -> np.ndarray:
    vals = np.asarray(samples, dtype=float)
    if vals.shape[:1] != (grid.eta,) or np.any(~np.isfinite(vals)):
        raise ContractError(f"need one finite sample per node ({grid.eta}), got shape {vals.shape}")
    return vals


def _tensor_eval(sizes: Sequence[int], values: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Evaluate a full tensor interpolant with nodal ``values`` at points ``y``."""
    P = len(y)
    T = values.reshape(sizes)
    active = [n for n, m in enumerate(sizes) if m > 1]
    if not active:
        return np.full(P, float(T.reshape(-1)[0]))
    T = T.reshape([sizes[n] for n in active])
    L0 = lagrange_basis(sizes[active[0]], y[:, active[0]])
    R = L0 @ T.reshape(sizes[active[0]], -1)  # (P, rest)
    for n in active[1:]:
        m = sizes[n]
        Ln = lagrange_basis(m, y[:, n])
        R = np.einsum("pk,pkr->pr", Ln, R.reshape(P, m, -1))
    return R.reshape(P)


def interpolate(grid: SparseGrid, samples) -> Callable[[np.ndarray], np.ndarray]:
    """Sparse interpolant ``S_w[f]`` as a callable on points of shape ``(P, n_s)``."""
    vals = _check_samples(grid, samples)

    def evaluate(y):
        y = np.atleast_2d(np.asarray(y, dtype=float))
        if y.shape[1] != grid.n_s:
            raise ParameterError(f"points must have {grid.n_s} coordinates")
        out = np.zeros(len(y))
        for term in grid.terms:
            out += term.coef * _tensor_eval(term.sizes, vals[term.node_ids], y)
        return out

    return evaluate


def interpolate_difference_form(rule: IndexRule, n_s: int, f: Callable, y, indices=None) -> np.ndarray:
    """``sum_i (x)_n Delta^{m(i_n)} f`` evaluated at ``y``, expanding each difference.

    Independent of :func:`combination_coefficients`; used to cross-check the
    combination form.  ``indices`` restricts the outer sum (default: the
    whole admissible set).
    """
    y = np.atleast_2d(np.asarray(y, dtype=float))
    indices = index_set(rule, n_s) if indices is None else indices
    cache: dict[tuple[int, ...], np.ndarray] = {}

    def tensor(levels):
        if levels not in cache:
            sizes = tuple(rule.growth(k) for k in levels)
            pts, _ = _tensor_nodes(sizes, rule.variant)
            cache[levels] = _tensor_eval(sizes, np.asarray(f(pts), dtype=float), y)
        return cache[levels]

    out = np.zeros(len(y))
    for idx in indices:
        for j in itertools.product((0, 1), repeat=n_s):
            lev = tuple(a - b for a, b in zip(idx, j))
            if min(lev, default=1) < 1:
                continue  # I^{m(0)} = 0
            out += (-1) ** sum(j) * tensor(lev)
    return out


def quadrature(grid: SparseGrid, samples) -> float:
    """Integral of the sparse interpolant under the grid density."""
    vals = _check_samples(grid, samples)
    return float(grid.weights @ vals)


def dump_grid(grid: SparseGrid, path) -> None:
    """Text table: node coordinates, weight, number of contributing tensors."""
    cols = [f"y{k + 1}" for k in range(grid.n_s)] + ["weight", "n_terms"]
    table = np.column_stack([grid.nodes, grid.weights, grid.counts])
    fmt = ["%.17g"] * (grid.n_s + 1) + ["%d"]
    np.savetxt(path, table, fmt=fmt, header=" ".join(cols), comments="")
