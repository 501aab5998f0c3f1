import math

import numpy as np
import pytest

from stopdex.diffusion_core import DiffusionSpec, Domain, EigenPair, GridFunction
from stopdex.errors import EmptySubdifferential, NonMonotoneIndex
from stopdex.forward_solver import EarlyReward, ForwardProblem, RewardFamily
from stopdex.index_engine import (Direction, IndexProblem, check_u_convex, double_dual, dual_pair,
                                  index_curve, indifference_map, log_eigen_dual, u_dual,
                                  u_subdifferential)

import oracles as O

YZ = lambda y, z: y * z


def legendre(n=201, half=5.0):
    y = np.linspace(-half, half, n)
    return GridFunction(y, y * y / 2)


@pytest.fixture(scope="module")
def gauss_problem():
    """E = exp(theta^2/2), U = exp(theta x), phi = exp(x^2/2), start 0."""
    g = np.linspace(-3, 6, 901)
    pair = EigenPair.from_functions(g, lambda x: np.exp(x * x / 2), lambda x: x * np.exp(x * x / 2),
                                    0.5, 0.0)
    er = EarlyReward.direct(g, lambda x, t: np.exp(t * x), lambda x, t: x * np.exp(t * x),
                            lambda x, t: t * np.exp(t * x))
    return IndexProblem(er, pair, "upper", (0.5, 4.0))


@pytest.fixture(scope="module")
def martingale_problem():
    k = 2
    g = np.geomspace(0.01, 5, 1201)
    pair = EigenPair.from_functions(g, lambda x: x ** (k + 1), lambda x: (k + 1) * x**k, 0.1, 1.0,
                                    lambda x: x ** (-k), lambda x: -k * x ** (-k - 1))
    er = EarlyReward.direct(g, lambda x, t: t - x, lambda x, t: 1 + 0 * x, lambda x, t: -1 + 0 * x)
    return IndexProblem(er, pair, "lower", (0.05, (k + 1) / k)), k


def test_legendre_pair():
    f = legendre()
    fu = u_dual(f, YZ, f.grid)
    assert np.max(np.abs(fu.values - f.grid**2 / 2)) <= 1e-12


def test_quadratic_dual_and_maximiser():
    t = np.linspace(0, 3, 61)
    eta = GridFunction(t, t * t / 2)
    x = np.linspace(0.5, 2.5, 41)
    dual = u_dual(eta, YZ, x)
    assert dual.values == pytest.approx(x * x / 2, abs=1e-12)
    pair = dual_pair(eta, YZ, x)
    for th in (0.5, 1.25, 2.0):
        assert u_subdifferential(pair, th) == pytest.approx((th,))


def test_log_coupling_dual_martingale():
    k = 2
    t = np.linspace(1e-3, (k + 1) / k, 20001)
    eta = GridFunction(t, np.log(np.array([O.martingale_V(v, k) for v in t]) - 1))
    u = lambda x, th: np.where(th > x, np.log(np.maximum(th - x, 1e-300)), -np.inf)
    x = np.linspace(0.1, 0.95, 18)
    dual = u_dual(eta, lambda th, xx: u(xx, th), x)
    assert dual.values == pytest.approx(-k * np.log(x), abs=1e-6)


def test_subdifferential_singleton_and_interval():
    f = legendre()
    pair = dual_pair(f, YZ, f.grid)
    assert pair.subdifferential(2.0) == pytest.approx((2.0,))
    # |y| has a kink at 0: its dual is 0 on [-1, 1], so every z there attains equality
    y = np.linspace(-2, 2, 81)
    pair = dual_pair(GridFunction(y, np.abs(y)), YZ, np.linspace(-1, 1, 21))
    sub = pair.subdifferential(0.0)
    assert sub[0] == pytest.approx(-1) and sub[-1] == pytest.approx(1) and len(sub) == 21


def test_empty_subdifferential():
    y = np.linspace(-1, 1, 21)
    pair = dual_pair(GridFunction(y, -y * y), YZ, np.linspace(-0.5, 0.5, 11))
    with pytest.raises(EmptySubdifferential):
        pair.subdifferential(0.0)


def test_young_inequality_and_equality_graph():
    f = legendre(101)
    pair = dual_pair(f, YZ, np.linspace(-4, 4, 81))
    gap = pair.gap()
    assert gap.min() >= -1e-12
    for i in range(10, 91, 10):
        y = f.grid[i]
        for z in pair.subdifferential(y):
            j = int(np.argmin(np.abs(pair.f_u.grid - z)))
            assert abs(gap[i, j]) <= 1e-12 * (1 + abs(y * z))


def test_u_convexity():
    f = legendre()
    assert check_u_convex(f, YZ, f.grid)
    y = np.linspace(-1, 1, 41)
    concave = GridFunction(y, -y * y)
    assert not check_u_convex(concave, YZ, np.linspace(-3, 3, 121))
    env = double_dual(concave, YZ, np.linspace(-3, 3, 121))
    assert np.all(env.values <= concave.values + 1e-12)


def test_triple_dual_identity():
    rng = np.random.default_rng(0)
    y = np.linspace(-2, 2, 41)
    z = np.linspace(-3, 3, 61)
    f = GridFunction(y, rng.normal(size=len(y)))
    fu = u_dual(f, YZ, z)
    fuu = double_dual(f, YZ, z)
    fuuu = u_dual(fuu, YZ, z)
    assert np.max(np.abs(fuuu.values - fu.values)) <= 1e-12


def test_gauss_indifference_map(gauss_problem):
    for x in (1.0, 2.0, 3.3):
        lo, hi = indifference_map(gauss_problem, x)
        assert lo == pytest.approx(x, abs=1e-8) and hi == pytest.approx(x, abs=1e-8)
    grid = np.linspace(0.5, 4.0, 36)
    assert indifference_map(gauss_problem, 2.0, grid) == pytest.approx((2.0,))


def test_gauss_index_curve(gauss_problem):
    xs = np.linspace(1, 3, 11)
    curve = index_curve(gauss_problem, xs)
    assert curve.theta_star() == pytest.approx(xs, abs=1e-8)
    assert curve.direction is Direction.NONDECREASING
    assert curve.stationarity_residual <= 1e-6
    assert curve.domain == (1.0, 3.0)
    assert curve.theta_star(1.55) == pytest.approx(1.55, abs=1e-8)


def test_martingale_index(martingale_problem):
    P, k = martingale_problem
    xs = np.linspace(0.2, 1.0, 5)
    curve = index_curve(P, xs)
    assert curve.theta_star() == pytest.approx(xs * (k + 1) / k, abs=1e-7)
    assert curve.direction is Direction.NONDECREASING


def test_gbm_index_at_start():
    p = O.GBM_FIXTURE
    spec = DiffusionSpec(Domain(0, math.inf), lambda x: p["sigma"] ** 2 * x * x,
                         lambda x: p["mu"] * x, 1.0)
    rw = RewardFamily(lambda x, t: t + 0 * x, lambda x, t: 1 + 0 * x, lambda x, t: x, (0.5, 4.0))
    P = IndexProblem.from_forward(ForwardProblem(spec, rw, p["rho"]), "lower")
    c = O.GBM_FIXTURE_C_MINUS
    expect = (1 + c) / (c * (p["rho"] - p["mu"]))
    lo, hi = indifference_map(P, 1.0)
    assert lo == pytest.approx(expect, abs=1e-6) and hi == pytest.approx(expect, abs=1e-6)


def test_index_and_threshold_sets_are_inverse(gauss_problem):
    thetas = np.linspace(0.5, 4.0, 15)
    xs = np.linspace(0.5, 4.0, 15)
    for x in xs:
        members = set(np.round(indifference_map(gauss_problem, x, thetas), 12))
        for th in thetas:
            in_set = any(abs(a - x) <= 1e-8 for a in gauss_problem.threshold_set(th).points)
            assert (round(th, 12) in members) == in_set


def test_eta_equals_log_eigen_dual(gauss_problem):
    thetas = np.linspace(0.5, 3.0, 26)
    x = np.union1d(np.linspace(-1, 5, 601), thetas)
    dual = log_eigen_dual(gauss_problem, x, thetas)
    assert dual.values == pytest.approx(thetas**2 / 2, abs=1e-6)


def test_non_monotone_index_reports_witness(gauss_problem, monkeypatch):
    # a continuum search assumes a monotone threshold map, so stub the per-x intervals
    fake = {1.0: (1.0, 1.0), 1.5: (1.5, 1.5), 2.0: (1.2, 1.2), 2.5: (2.5, 2.5)}
    monkeypatch.setattr("stopdex.index_engine._index_interval", lambda problem, x: fake[x])
    with pytest.raises(NonMonotoneIndex) as ei:
        index_curve(gauss_problem, list(fake))
    assert ei.value.witness == ((1.5, 1.5), (2.0, 1.2))
    curve = index_curve(gauss_problem, list(fake), check_monotone=False)
    assert curve.direction is Direction.NONDECREASING
