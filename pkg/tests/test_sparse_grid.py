import itertools
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from numpy.polynomial.legendre import leggauss

from stochdomain import sparse_grid as sg
from stochdomain.errors import ContractError, ParameterError

ETA_SM = {
    2: [1, 5, 13, 29, 65],
    3: [1, 7, 25, 69, 177],
    4: [1, 9, 41, 137, 401],
    5: [1, 11, 61, 241, 801],
    6: [1, 13, 85, 389, 1457],
}


def rule(variant, w):
    return sg.IndexRule(variant, w)


def keyset(grid):
    return {tuple(k) for k in sg.node_keys(grid.nodes)}


def test_cc_nodes():
    assert np.array_equal(sg.cc_nodes(1), [0.0])
    np.testing.assert_allclose(sg.cc_nodes(3), [-1, 0, 1], atol=1e-15)
    h = math.sqrt(2) / 2
    np.testing.assert_allclose(sg.cc_nodes(5), [-1, -h, 0, h, 1], atol=1e-15)
    with pytest.raises(ParameterError):
        sg.cc_nodes(0)


def test_growth():
    assert sg.growth(1, "SM") == 1 and sg.growth(4, "SM") == 9
    assert sg.growth(4, "TD") == 4 and sg.growth(0, "SM") == 0
    with pytest.raises(ParameterError):
        sg.growth(2, "XX")


def test_index_sets():
    for v in sg.VARIANTS:
        assert sg.index_set(rule(v, 0), 3) == [(1, 1, 1)]
    assert set(sg.index_set(rule("TD", 2), 2)) == {(1, 1), (2, 1), (1, 2), (3, 1), (2, 2), (1, 3)}
    assert set(sg.index_set(rule("HC", 1), 2)) == {(1, 1), (2, 1), (1, 2)}
    assert set(sg.index_set(rule("TP", 1), 2)) == {(1, 1), (2, 1), (1, 2), (2, 2)}


def test_rule_validation():
    with pytest.raises(ParameterError):
        sg.IndexRule("SM", -1)
    with pytest.raises(ParameterError):
        sg.IndexRule("SM", 1, weights=(1.0, 2.0))


@pytest.mark.parametrize("variant", sg.VARIANTS)
def test_g_increasing(variant):
    # max(i - 1) only grows once the bumped entry is the largest
    r = rule(variant, 0)
    for idx in itertools.product(range(1, 4), repeat=3):
        for n in range(3):
            up = list(idx)
            up[n] += 1
            if variant == "TP":
                assert r.g(up) >= r.g(idx)
            else:
                assert r.g(up) > r.g(idx)


def test_combination_coefficients():
    assert sg.combination_coefficients(rule("SM", 0), 4) == {(1, 1, 1, 1): 1}
    for v in ("SM", "TD"):
        assert sg.combination_coefficients(rule(v, 1), 2) == {(1, 1): -1, (2, 1): 1, (1, 2): 1}


@pytest.mark.parametrize("variant", sg.VARIANTS)
@pytest.mark.parametrize("n_s", [1, 2, 3, 4])
@pytest.mark.parametrize("w", [0, 1, 2, 3])
def test_coefficients_sum_to_one(variant, n_s, w):
    assert sum(sg.combination_coefficients(rule(variant, w), n_s).values()) == 1


def test_one_dimensional_weights():
    g = sg.build_grid(rule("SM", 1), 1)
    np.testing.assert_allclose(g.nodes[:, 0], [-1, 0, 1], atol=1e-15)
    np.testing.assert_allclose(g.weights, [1 / 6, 2 / 3, 1 / 6], atol=1e-15)


def test_cross_pattern():
    g = sg.build_grid(rule("SM", 1), 2)
    assert g.eta == 5
    assert keyset(g) == {tuple(k) for k in sg.node_keys([[0, 0], [-1, 0], [1, 0], [0, -1], [0, 1]])}


@pytest.mark.parametrize("n_s", sorted(ETA_SM))
def test_eta_table(n_s):
    assert [sg.build_grid(rule("SM", w), n_s).eta for w in range(5)] == ETA_SM[n_s]


def test_eta_high_dimension():
    assert sg.build_grid(rule("SM", 3), 15).eta == 5021


@pytest.mark.parametrize("variant", sg.VARIANTS)
@pytest.mark.parametrize("n_s", [1, 2, 3])
@pytest.mark.parametrize("w", [0, 2, 3])
def test_weights_sum_and_symmetry(variant, n_s, w):
    g = sg.build_grid(rule(variant, w), n_s)
    assert g.weights.sum() == pytest.approx(1.0, abs=1e-13)
    flipped = {tuple(k): wt for k, wt in zip(sg.node_keys(-g.nodes), g.weights)}
    for k, wt in zip(sg.node_keys(g.nodes), g.weights):
        assert flipped[tuple(k)] == pytest.approx(wt, abs=1e-13)
    assert len(keyset(g)) == g.eta


def test_second_moment():
    g = sg.build_grid(rule("SM", 2), 2)
    assert sg.quadrature(g, g.nodes[:, 0] ** 2) == pytest.approx(1 / 3, abs=1e-14)
    assert sg.quadrature(g, np.ones(g.eta)) == pytest.approx(1.0, abs=1e-14)


def test_multilinear_exactness(rng):
    n_s = 4
    c = rng.normal(size=2**n_s)
    monos = list(itertools.product((0, 1), repeat=n_s))

    def f(y):
        return sum(ck * np.prod(y**np.array(p), axis=1) for ck, p in zip(c, monos))

    y = rng.uniform(-1, 1, (100, n_s))
    for w in (1, 2, 3):
        g = sg.build_grid(rule("SM", w), n_s)
        if w < n_s:
            continue  # a product of all n_s variables needs level n_s
        np.testing.assert_allclose(sg.interpolate(g, f(g.nodes))(y), f(y), atol=1e-12)
    # with a small index set, degree <= 1 per variable but few interactions
    g = sg.build_grid(rule("SM", 1), n_s)
    lin = lambda y: 0.3 + y @ np.arange(1, n_s + 1)  # noqa: E731
    np.testing.assert_allclose(sg.interpolate(g, lin(g.nodes))(y), lin(y), atol=1e-12)


@pytest.mark.parametrize("variant", sg.VARIANTS)
@pytest.mark.parametrize("n_s", [1, 2, 3])
@pytest.mark.parametrize("w", [1, 2, 3])
def test_polynomial_space_exactness(variant, n_s, w, rng):
    r = rule(variant, w)
    space = sg.polynomial_space(r, n_s)
    assert (0,) * n_s in space
    c = rng.normal(size=len(space))
    degs = np.array(space)

    def f(y):
        return np.prod(y[:, None, :] ** degs[None], axis=2) @ c

    g = sg.build_grid(r, n_s)
    y = rng.uniform(-1, 1, (50, n_s))
    np.testing.assert_allclose(sg.interpolate(g, f(g.nodes))(y), f(y), atol=1e-10)


# TD and HC use m(i) = i, whose nodes are not nested, so they do not interpolate
@pytest.mark.parametrize("variant", ["SM", "TP"])
def test_interpolation_property(variant, rng):
    g = sg.build_grid(rule(variant, 3), 3)
    vals = rng.normal(size=g.eta)
    np.testing.assert_allclose(sg.interpolate(g, vals)(g.nodes), vals, atol=1e-12)


def smooth(y):
    return np.exp(0.4 * y[:, 0]) / (1.5 + y[:, 1] * (y[:, 2] if y.shape[1] > 2 else 0.5))


@pytest.mark.parametrize("variant", sg.VARIANTS)
@pytest.mark.parametrize("n_s,w", [(2, 3), (3, 2), (3, 3)])
def test_combination_equals_difference_form(variant, n_s, w, rng):
    r = rule(variant, w)
    g = sg.build_grid(r, n_s)
    y = rng.uniform(-1, 1, (40, n_s))
    a = sg.interpolate(g, smooth(g.nodes))(y)
    b = sg.interpolate_difference_form(r, n_s, smooth, y)
    np.testing.assert_allclose(a, b, atol=1e-12)


@pytest.mark.parametrize("variant", ["SM", "TD"])
def test_telescoping(variant, rng):
    n_s = 3
    y = rng.uniform(-1, 1, (30, n_s))
    for w in (1, 2, 3):
        hi, lo = rule(variant, w), rule(variant, w - 1)
        g_hi, g_lo = sg.build_grid(hi, n_s), sg.build_grid(lo, n_s)
        diff = sg.interpolate(g_hi, smooth(g_hi.nodes))(y) - sg.interpolate(g_lo, smooth(g_lo.nodes))(y)
        shell = [i for i in sg.index_set(hi, n_s) if hi.g(i) == w]
        np.testing.assert_allclose(diff, sg.interpolate_difference_form(hi, n_s, smooth, y, shell), atol=1e-12)


@pytest.mark.parametrize("n_s", [2, 3, 5])
def test_nested(n_s):
    prev = keyset(sg.build_grid(rule("SM", 0), n_s))
    for w in range(1, 4):
        cur = keyset(sg.build_grid(rule("SM", w), n_s))
        assert prev < cur
        prev = cur


@given(
    a=st.floats(-5, 5),
    b=st.floats(-5, 5),
    seed=st.integers(0, 2**31 - 1),
)
def test_linearity(a, b, seed):
    g = sg.build_grid(rule("SM", 2), 3)
    r = np.random.default_rng(seed)
    u, v = r.normal(size=g.eta), r.normal(size=g.eta)
    y = r.uniform(-1, 1, (10, 3))
    lhs = sg.interpolate(g, a * u + b * v)(y)
    rhs = a * sg.interpolate(g, u)(y) + b * sg.interpolate(g, v)(y)
    np.testing.assert_allclose(lhs, rhs, atol=1e-11)
    assert sg.quadrature(g, a * u + b * v) == pytest.approx(a * sg.quadrature(g, u) + b * sg.quadrature(g, v), abs=1e-11)


def test_missing_samples_rejected():
    g = sg.build_grid(rule("SM", 1), 2)
    with pytest.raises(ContractError):
        sg.interpolate(g, np.ones(4))
    with pytest.raises(ContractError):
        sg.quadrature(g, np.r_[np.ones(4), np.nan])
    with pytest.raises(ParameterError):
        sg.build_grid(rule("SM", 1), 2, density="gaussian")


def test_cosine_product_quadrature():
    n_s = 3
    exact = math.sin(1.0) ** n_s  # mean of cos over [-1, 1]
    t, wq = leggauss(20)
    dense = np.sum(np.multiply.outer(np.multiply.outer(wq, wq), wq) / 8 * np.cos(t)[:, None, None] * np.cos(t)[None, :, None] * np.cos(t)[None, None, :])
    assert dense == pytest.approx(exact, rel=1e-14)
    errs = []
    for w in range(1, 6):
        g = sg.build_grid(rule("SM", w), n_s)
        errs.append(abs(sg.quadrature(g, np.prod(np.cos(g.nodes), axis=1)) - dense))
    assert all(b < a for a, b in zip(errs, errs[1:])), errs
    assert errs[-1] < 1e-6


def test_dump_grid(tmp_path):
    g = sg.build_grid(rule("SM", 2), 2)
    p = tmp_path / "grid.txt"
    sg.dump_grid(g, p)
    table = np.loadtxt(p, skiprows=1)
    assert table.shape == (g.eta, 4)
    assert table[:, 2].sum() == pytest.approx(1.0)
