import math

import pytest

from stopdex.diffusion_core import DiffusionSpec, Domain, hitting_laplace, solve_eigenfunctions
from stopdex.errors import AtomUnsupported, InvalidRule
from stopdex.forward_solver import RewardFamily
from stopdex.montecarlo import Rule, SimConfig, simulate_hitting_laplace, simulate_value

import oracles as O

BM = DiffusionSpec(Domain(-math.inf, math.inf), lambda x: 1 + 0 * x, lambda x: 0 * x, 0.0)
# overshoot of a Gaussian walk past a level, in units of sigma sqrt(dt)
OVERSHOOT = 0.5826


def gbm(x0=1.0):
    p = O.GBM_FIXTURE
    return DiffusionSpec(Domain(0, math.inf), lambda x: p["sigma"] ** 2 * x * x,
                         lambda x: p["mu"] * x, x0)


GBM_REWARD = RewardFamily(lambda x, t: t + 0 * x, lambda x, t: 1 + 0 * x, lambda x, t: x, (0.1, 3))


def hit_tol(est, exact, rate, dt):
    """3.5 standard errors plus the first-order grid-monitoring bias."""
    return 3.5 * est.stderr + OVERSHOOT * math.sqrt(dt) * rate * exact


def test_stop_rule_is_exact():
    e = simulate_value(gbm(), GBM_REWARD, 1.7, "stop", rho=1.0)
    assert e.mean == 1.7 and e.stderr == 0.0
    e = simulate_value(gbm(), GBM_REWARD, 1.7, Rule.hit(1.0), rho=1.0)
    assert e.mean == 1.7 and e.stderr == 0.0


def test_hitting_at_start_is_one():
    e = simulate_hitting_laplace(BM, 0.5, 0.3, 0.3)
    assert e.mean == 1.0 and e.stderr == 0.0


def test_bm_hitting_laplace():
    cfg = SimConfig(4000, 1e-3, 15.0, seed=2)
    e = simulate_hitting_laplace(BM, 0.5, 0.0, 1.0, cfg)
    exact = math.exp(-1.0)
    assert abs(e.mean - exact) <= hit_tol(e, exact, 1.0, cfg.dt)
    assert e.n_effective == 2000


def test_hitting_matches_eigenfunction_ratio():
    pair = solve_eigenfunctions(BM, 0.5)
    cfg = SimConfig(4000, 1e-3, 15.0, seed=5)
    e = simulate_hitting_laplace(BM, 0.5, 0.0, -0.7, cfg)
    exact = float(hitting_laplace(pair, 0.0, -0.7))
    assert exact == pytest.approx(math.exp(-0.7), rel=1e-8)
    assert abs(e.mean - exact) <= hit_tol(e, exact, 1.0, cfg.dt)


def test_factorisation_through_intermediate_level():
    cfg = SimConfig(4000, 1e-3, 12.0, seed=3)
    whole = simulate_hitting_laplace(BM, 0.5, 0.0, 1.0, cfg)
    a = simulate_hitting_laplace(BM, 0.5, 0.0, 0.5, cfg)
    b = simulate_hitting_laplace(BM, 0.5, 0.5, 1.0, cfg)
    prod = a.mean * b.mean
    se = math.hypot(whole.stderr, math.hypot(a.stderr * b.mean, b.stderr * a.mean))
    # the product crosses twice, so it carries twice the monitoring bias
    bias = 2 * OVERSHOOT * math.sqrt(cfg.dt) * math.exp(-1)
    assert abs(whole.mean - prod) <= 3.5 * se + bias


def test_seed_determinism_and_thread_independence():
    cfg = SimConfig(3000, 2e-3, 5.0, seed=11, block=500, threads=1)
    a = simulate_hitting_laplace(BM, 0.5, 0.0, 1.0, cfg)
    b = simulate_hitting_laplace(BM, 0.5, 0.0, 1.0, cfg)
    c = simulate_hitting_laplace(BM, 0.5, 0.0, 1.0, SimConfig(3000, 2e-3, 5.0, seed=11, block=500,
                                                               threads=4))
    d = simulate_hitting_laplace(BM, 0.5, 0.0, 1.0, SimConfig(3000, 2e-3, 5.0, seed=12, block=500))
    assert a == b == c
    assert d.mean != a.mean


def test_antithetic_reduces_variance_for_monotone_payoff():
    base = dict(n_paths=4000, dt=2e-3, t_max=8.0, seed=4)
    xs = O.GBM_FIXTURE_THRESHOLD
    anti = simulate_value(gbm(), GBM_REWARD, 1.0, xs, SimConfig(**base), rho=1.0)
    plain = simulate_value(gbm(), GBM_REWARD, 1.0, xs, SimConfig(antithetic=False, **base), rho=1.0)
    assert anti.stderr < plain.stderr
    assert plain.n_effective == 4000 and anti.n_effective == 2000


def test_coarse_step_underestimates_hitting():
    # a path monitored on a coarser grid crosses later, so the estimate drops
    fine = simulate_hitting_laplace(BM, 0.5, 0.0, 1.0, SimConfig(20000, 1e-3, 10.0, seed=6))
    coarse = simulate_hitting_laplace(BM, 0.5, 0.0, 1.0, SimConfig(20000, 1.6e-2, 10.0, seed=6))
    assert coarse.mean < fine.mean
    assert abs(fine.mean - math.exp(-1)) < abs(coarse.mean - math.exp(-1))


def test_never_rule_discounts_running_reward():
    # E int e^{-rho t} X_t dt = x0 / (rho - mu) for GBM
    cfg = SimConfig(2000, 2e-3, 40.0, seed=8)
    e = simulate_value(gbm(), GBM_REWARD, 1.0, "never", cfg, rho=1.0)
    assert abs(e.mean - 1 / 0.9) <= 3.5 * e.stderr + 2e-3
    assert e.truncation_bias_bound < 1e-3 and e.warnings == ()


def test_truncation_warning():
    e = simulate_hitting_laplace(BM, 0.5, 0.0, 5.0, SimConfig(200, 1e-2, 1.0, seed=1))
    assert e.truncation_bias_bound > 1e-3 and e.warnings


def test_invalid_rules_and_atoms():
    with pytest.raises(InvalidRule):
        simulate_value(gbm(), GBM_REWARD, 1.0, "sometimes", rho=1.0)
    with pytest.raises(InvalidRule):
        simulate_value(gbm(), GBM_REWARD, 1.0, -1.0, rho=1.0)
    with pytest.raises(InvalidRule):
        simulate_hitting_laplace(gbm(), 1.0, 1.0, math.inf)
    sticky = DiffusionSpec(Domain(0, math.inf), lambda x: x * x, lambda x: 0 * x, 1.0, ((1.5, 0.1),))
    with pytest.raises(AtomUnsupported):
        simulate_value(sticky, GBM_REWARD, 1.0, 2.0, rho=1.0)
    with pytest.raises(ValueError):
        SimConfig(n_paths=1)


def test_absorbing_end_pays_perpetuity():
    # BM absorbed at 0 from x0 = 1 with c = 1: value 1/rho whatever happens
    spec = DiffusionSpec(Domain(0, math.inf, "absorbing", "inaccessible"), lambda x: 1 + 0 * x,
                         lambda x: 0 * x, 1.0)
    rw = RewardFamily(lambda x, t: 0 * x, lambda x, t: 0 * x, lambda x, t: 1 + 0 * x, (0, 1))
    e = simulate_value(spec, rw, 0.5, "never", SimConfig(1000, 2e-3, 20.0, seed=9), rho=0.5)
    assert e.mean == pytest.approx(2.0, abs=1e-3)


def test_gbm_threshold_value_small_sample():
    p = O.GBM_FIXTURE
    cfg = SimConfig(8000, 1e-3, 10.0, seed=1)
    e = simulate_value(gbm(), GBM_REWARD, 1.0, O.GBM_FIXTURE_THRESHOLD, cfg, rho=p["rho"])
    assert abs(e.mean - O.GBM_FIXTURE_VALUE) <= 3.5 * e.stderr + 5e-3
