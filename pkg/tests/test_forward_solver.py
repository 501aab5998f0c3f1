import math

import numpy as np
import pytest

from stopdex.diffusion_core import DiffusionSpec, Domain, EigenPair, solve_eigenfunctions, solve_resolvent
from stopdex.errors import AllNonPositive, EmptyThresholdSet
from stopdex.forward_solver import (EarlyReward, ForwardProblem, RewardFamily, Strategy,
                                    check_reward_derivative, envelope_derivatives,
                                    lower_threshold_set, neutral_tax_rate, taxed_threshold,
                                    threshold_region, upper_threshold_set, validate_assumptions,
                                    value_curve, value_derivatives)

import oracles as O

ONE = lambda x: 1.0 + 0.0 * x
ZERO = lambda x: 0.0 * x


def gbm_spec(sigma, mu, x0=1.0):
    return DiffusionSpec(Domain(0, math.inf), lambda x: sigma**2 * x * x, lambda x: mu * x, x0)


GBM_REWARD = RewardFamily(lambda x, t: t + 0 * x, lambda x, t: 1 + 0 * x, lambda x, t: x, (0.0, 3.0))
KILLED_REWARD = RewardFamily(lambda x, t: t * np.abs(np.sinh(x * np.sin(x))),
                             lambda x, t: np.abs(np.sinh(x * np.sin(x))), None, (0.5, 2.0))


@pytest.fixture(scope="module")
def gbm():
    p = O.GBM_FIXTURE
    return ForwardProblem(gbm_spec(p["sigma"], p["mu"]), GBM_REWARD, p["rho"])


def killed_problem(x0):
    spec = DiffusionSpec(Domain(0, 2 * math.pi, "killing", "killing"), ONE, ZERO, x0)
    return ForwardProblem(spec, KILLED_REWARD, 0.5)


@pytest.fixture(scope="module")
def bessel():
    spec = DiffusionSpec(Domain(0, math.inf), ONE, lambda x: 1 / x, 1.0)
    rw = RewardFamily(lambda x, t: 0 * x, lambda x, t: 0 * x, lambda x, t: t * np.cos(x), (-1, 1),
                      lambda x, t: np.cos(x))
    return ForwardProblem(spec, rw, 0.5)


def test_gbm_early_reward_closed_form(gbm):
    p = O.GBM_FIXTURE
    xs = np.linspace(0.2, 3, 9)
    for th in (0.5, 1.0, 2.0):
        assert gbm.early.U(xs, th) == pytest.approx(th - xs / (p["rho"] - p["mu"]), abs=1e-8)


@pytest.mark.parametrize("theta", [0.3, 0.7, 1.0, 1.3])
def test_gbm_lower_threshold(gbm, theta):
    p = O.GBM_FIXTURE
    rep = gbm.report(theta)
    expect = O.gbm_threshold(theta, p["rho"], p["sigma"], p["mu"])
    assert rep.classification is Strategy.LOWER
    assert rep.thresholds[0] == pytest.approx(expect, abs=1e-6)
    assert rep.value == pytest.approx(O.gbm_value(theta, p["rho"], p["sigma"], p["mu"]), rel=1e-6)
    assert lower_threshold_set(gbm.early, gbm.pair, theta, spec=gbm.spec) == pytest.approx((expect,), abs=1e-6)


def test_gbm_stop_now_and_wait_forever(gbm):
    p = O.GBM_FIXTURE
    # threshold above the start: stop immediately and collect theta
    th = 2.0
    assert O.gbm_threshold(th, p["rho"], p["sigma"], p["mu"]) > 1
    rep = gbm.report(th)
    assert rep.classification is Strategy.STOP_NOW
    assert rep.value == pytest.approx(th, rel=1e-9)
    # theta = 0: U < 0 everywhere, never stop
    rep = gbm.report(0.0)
    assert rep.classification is Strategy.WAIT_FOREVER
    assert rep.early_value == 0.0
    assert rep.value == pytest.approx(1 / (p["rho"] - p["mu"]), rel=1e-6)
    with pytest.raises(AllNonPositive):
        upper_threshold_set(gbm.early, gbm.pair, 0.0)


def test_killed_bm_threshold_sets():
    P = killed_problem(1.0)
    rep = P.report(1.0)
    assert rep.upper_set == pytest.approx(O.KILLED_BM_UPPER, abs=1e-6)
    assert rep.lower_set == pytest.approx((O.KILLED_BM_LOWER,), abs=1e-6)
    assert max(rep.upper_set) <= min(rep.lower_set)
    assert rep.classification is Strategy.UPPER


@pytest.mark.parametrize("x0,kind", [(1.0, Strategy.UPPER), (4.0, Strategy.UPPER),
                                     (5.0, Strategy.NO_THRESHOLD), (5.5, Strategy.LOWER)])
def test_killed_bm_classification(x0, kind):
    assert killed_problem(x0).report(1.0).classification is kind


def test_bessel_running_reward_argmax(bessel):
    up = bessel.report(1.0)
    down = bessel.report(-1.0)
    assert up.upper_set[0] == pytest.approx(O.BESSEL_ROOTS[0], abs=1e-6)
    assert down.upper_set[0] == pytest.approx(O.BESSEL_ROOTS[1], abs=1e-6)
    for rep in (up, down):
        assert abs(O.bessel_root_fn(rep.upper_set[0])) <= 1e-6


def test_constant_reward_stops_now():
    spec = DiffusionSpec(Domain(-math.inf, math.inf), ONE, ZERO, 0.0)
    rw = RewardFamily(lambda x, t: 2.5 + 0 * x, lambda x, t: 0 * x, None, (0, 1))
    rep = ForwardProblem(spec, rw, 0.5).report(0.5)
    assert rep.classification is Strategy.STOP_NOW
    assert rep.value == 2.5


def test_martingale_value_curve():
    k, rho = 2, 0.1
    sigma = math.sqrt(2 * rho / (k * (k + 1)))
    rw = RewardFamily(lambda x, t: t + 0 * x, lambda x, t: 1 + 0 * x, lambda x, t: rho * x,
                      (0.05, (k + 1) / k))
    P = ForwardProblem(gbm_spec(sigma, 0.0), rw, rho)
    thetas = np.linspace(0.1, 1.45, 8)
    curve = value_curve(P, thetas, workers=1)
    exact = np.array([O.martingale_V(t, k) for t in thetas])
    assert np.max(np.abs(curve.V / exact - 1)) <= 1e-3
    assert np.array_equal(curve.theta, thetas)


def test_gbm_envelope_matches_closed_form(gbm):
    p = O.GBM_FIXTURE
    for th in (0.4, 0.9, 1.2):
        lo, hi = value_derivatives(gbm, th)
        expect = O.gbm_value_prime(th, p["rho"], p["sigma"], p["mu"])
        assert lo == pytest.approx(expect, rel=1e-6)
        assert hi == pytest.approx(expect, rel=1e-6)
        _, _, singleton = envelope_derivatives(gbm, th)
        assert singleton


def test_envelope_matches_finite_difference(gbm):
    th, h = 0.8, 1e-4
    fd = (gbm.report(th + h).value - gbm.report(th - h).value) / (2 * h)
    lo, _ = value_derivatives(gbm, th)
    assert abs(fd - lo) <= 1e-3 * (1 + abs(lo))


def test_integral_representation(gbm):
    from scipy.integrate import quad
    a, b = 0.3, 1.2
    integral, _ = quad(lambda s: value_derivatives(gbm, s)[0], a, b, epsabs=1e-9, limit=50)
    diff = gbm.report(b).early_value - gbm.report(a).early_value
    # R does not depend on theta here, so E' = V'
    assert diff == pytest.approx(integral, abs=1e-3)


def test_envelope_needs_thresholds(gbm):
    with pytest.raises(EmptyThresholdSet):
        envelope_derivatives(gbm, 0.0)


def test_threshold_region_linear_log_reward():
    spec = DiffusionSpec(Domain(-math.inf, math.inf), ONE, ZERO, 0.0)
    rw = RewardFamily(lambda x, t: np.exp(t * x), lambda x, t: x * np.exp(t * x), None, (0.2, 2.0))
    P = ForwardProblem(spec, rw, 0.5)
    grid = np.linspace(0.25, 1.95, 18)
    lo, hi = threshold_region(P, grid)
    assert lo == pytest.approx(0.25)
    # supremum of (theta - sqrt(2 rho)) x escapes for theta > 1
    assert hi == pytest.approx(0.95)


def test_threshold_region_empty_everywhere(gbm):
    lo, hi = threshold_region(gbm, [0.0])
    assert lo == hi == 0.0


def test_killed_bm_region_is_all_of_theta():
    P = killed_problem(1.0)
    assert threshold_region(P, np.linspace(0.5, 2.0, 4)) == (0.5, 2.0)


def test_validate_assumptions():
    rep = validate_assumptions(ForwardProblem(gbm_spec(0.5, 0.1), GBM_REWARD, 1.0),
                               theta_samples=[0.5, 1.0])
    assert rep.ok
    bad = ForwardProblem(gbm_spec(0.3, 0.2), GBM_REWARD, 0.1, check_integrability=False)
    rep = validate_assumptions(bad, theta_samples=[1.0])
    assert not rep.integrable
    spec = DiffusionSpec(Domain(-math.inf, math.inf), ONE, ZERO, 0.0)
    neg = RewardFamily(lambda x, t: -1 + 0 * x, lambda x, t: 0 * x, None, (0, 1))
    rep = validate_assumptions(ForwardProblem(spec, neg, 0.5), theta_samples=[0.5])
    assert not rep.positive
    assert not rep.ok


def test_reward_derivative_cross_check():
    xs = np.linspace(0.5, 2, 5)
    ok, _ = check_reward_derivative(GBM_REWARD, xs, [0.5, 1.0])
    assert ok
    wrong = RewardFamily(lambda x, t: t * t + 0 * x, lambda x, t: 1 + 0 * x)
    ok, worst = check_reward_derivative(wrong, xs, [2.0])
    assert not ok and worst > 1


def test_argmax_scale_invariance():
    P = killed_problem(1.0)
    scaled = RewardFamily(lambda x, t: 7 * t * np.abs(np.sinh(x * np.sin(x))),
                          lambda x, t: 7 * np.abs(np.sinh(x * np.sin(x))), None, (0.5, 2.0))
    Q = ForwardProblem(P.spec, scaled, 0.5, pair=P.pair)
    a, b = P.report(1.0), Q.report(1.0)
    assert a.upper_set == pytest.approx(b.upper_set, abs=1e-9)
    assert a.lower_set == pytest.approx(b.lower_set, abs=1e-9)


def test_value_dominates_immediate_and_never_stopping(gbm):
    for th in np.linspace(0.2, 2.0, 7):
        rep = gbm.report(th)
        assert rep.value >= th - 1e-9
        assert rep.value >= rep.resolvent_at_start - 1e-9


def test_direct_early_reward_upper_threshold():
    g = np.linspace(-3, 6, 901)
    pair = EigenPair.from_functions(g, lambda x: np.exp(x * x / 2), lambda x: x * np.exp(x * x / 2),
                                    0.5, 0.0)
    er = EarlyReward.direct(g, lambda x, t: np.exp(t * x), lambda x, t: x * np.exp(t * x))
    for th in (0.5, 1.5, 2.5):
        assert upper_threshold_set(er, pair, th) == pytest.approx((th,), abs=1e-8)


def test_untaxed_threshold_closed_form():
    rho, delta, sigma, d = 0.5, 1.0, 1.0, 1.2
    x = taxed_threshold(0.0, rho, delta, sigma, d, 5.5)
    assert x == pytest.approx(delta * rho - sigma / math.sqrt(2 * rho), abs=1e-6)


def test_neutral_tax_rate():
    rho, delta, sigma, d = 1.0, 0.5, 2.0, 1.5
    th = neutral_tax_rate(rho, delta, sigma, d, delta * rho + 5)
    assert th == pytest.approx(O.tax_neutral_rate(rho, delta, sigma, d), abs=1e-6)


def test_threshold_below_default_cutoff_is_found():
    # exact lower threshold ~0.0104 sits inside the outer shell of [x0/50, 50 x0]
    rho, sigma, mu, theta = 0.16382386790786624, 0.21832388289539595, 0.12671244209348795, 0.33086128910337
    P = ForwardProblem(gbm_spec(sigma, mu), GBM_REWARD, rho)
    rep = P.report(theta)
    assert rep.classification is Strategy.LOWER
    assert rep.thresholds[0] == pytest.approx(O.gbm_threshold(theta, rho, sigma, mu), abs=1e-6)
    assert rep.value == pytest.approx(O.gbm_value(theta, rho, sigma, mu), rel=1e-6)
    lo, hi = value_derivatives(P, theta)
    assert lo == pytest.approx(O.gbm_value_prime(theta, rho, sigma, mu), rel=1e-6)


def test_slowly_decaying_resolvent_tail():
    # mu / rho ~ 0.77: the Green-kernel tail shrinks only ~8% per doubling
    rho, sigma, mu = 0.2013778621638635, 0.6793173373505302, 0.1548
    spec = gbm_spec(sigma, mu)
    pair = solve_eigenfunctions(spec, rho)
    R = solve_resolvent(spec, pair, lambda x: x)
    xs = np.geomspace(0.1, 10, 9)
    assert R(xs) == pytest.approx(xs / (rho - mu), rel=1e-6)
