import math

import numpy as np
import pytest

from stopdex.diffusion_core import DiffusionSpec, Domain
from stopdex.errors import EmptyMask
from stopdex.forward_solver import ForwardProblem, RewardFamily
from stopdex.modularity import (Verdict, check_log_submodular, check_log_supermodular,
                                check_monotone_threshold_map, check_standard_Q, lattice_verdict)

import oracles as O

X = np.linspace(0.1, 3.0, 30)
T = np.linspace(0.2, 4.0, 25)


def test_exponential_is_strictly_supermodular():
    v = check_log_supermodular(lambda x, t: np.exp(t * x), X, T)
    assert v.verdict is Verdict.SUPERMODULAR and v.strict and v.witness is None


def test_theta_minus_x_on_its_mask():
    v = check_log_supermodular(lambda x, t: t - x, X, T)
    assert v.supermodular and v.strict
    assert "component" in v.tested_domain


def test_separable_is_modular_not_strict():
    v = check_log_supermodular(lambda x, t: (1 + x * x) * np.exp(t), X, T)
    assert v.verdict is Verdict.MODULAR and not v.strict
    assert v.supermodular and v.submodular


def test_cosine_reward_modular_per_component():
    # theta cos x: positive on two sign components, separable on each
    x = np.linspace(0.05, 6.0, 60)
    t = np.linspace(-1, 1, 21)
    v = check_log_supermodular(lambda x, t: t * np.cos(x), x, t)
    assert v.verdict is Verdict.MODULAR
    assert v.components >= 2


def test_neither_has_witness_inside_mask():
    f = lambda x, t: np.exp(np.sin(3 * x) * np.cos(2 * t))
    v = check_log_supermodular(f, X, T)
    assert v.verdict is Verdict.NEITHER
    x0, x1, t0, t1 = v.witness
    lhs = math.log(f(x1, t1)) + math.log(f(x0, t0))
    rhs = math.log(f(x0, t1)) + math.log(f(x1, t0))
    assert lhs < rhs
    for a in (x0, x1):
        for b in (t0, t1):
            assert f(a, b) > 0


def test_submodular_reading():
    v = check_log_submodular(lambda x, t: np.exp(-t * x), X, T)
    assert v.submodular and not v.supermodular and v.strict


def test_empty_mask():
    with pytest.raises(EmptyMask):
        check_log_supermodular(lambda x, t: -1 - x * t, X, T)


def test_plain_scale_option():
    v = check_log_supermodular(lambda x, t: x * t, X, T, log_scale=False)
    assert v.verdict is Verdict.SUPERMODULAR
    assert lattice_verdict(np.add.outer(X, T), X, T, log_scale=False).verdict is Verdict.MODULAR


@pytest.mark.parametrize("lam", [1e-3, 0.5, 7.0, 1e4])
def test_rescaling_invariance(lam):
    f = lambda x, t: (t - x) ** 2 * np.exp(t * x)
    a = check_log_supermodular(f, X, T)
    b = check_log_supermodular(lambda x, t: lam * f(x, t), X, T)
    assert (a.verdict, a.strict) == (b.verdict, b.strict)


def test_standard_Q_examples():
    rho = 0.5
    assert check_standard_Q(lambda t: t, lambda x: x, rho, X, T).supermodular
    assert check_standard_Q(lambda t: t, lambda x: 0.1 + 0 * x, rho, X, T).verdict is Verdict.MODULAR
    v = check_standard_Q(lambda t: t, lambda x: -x, rho, X, T)
    assert v.submodular and not v.supermodular


def test_Q_verdict_matches_early_reward():
    p = O.GBM_FIXTURE
    spec = DiffusionSpec(Domain(0, math.inf), lambda x: p["sigma"] ** 2 * x * x,
                         lambda x: p["mu"] * x, 1.0)
    rw = RewardFamily(lambda x, t: t + 0 * x, lambda x, t: 1 + 0 * x, lambda x, t: x, (0.2, 3))
    P = ForwardProblem(spec, rw, p["rho"])
    x = np.linspace(0.1, 2.5, 25)
    t = np.linspace(0.2, 3.0, 15)
    q = check_standard_Q(lambda t: t, lambda x: x, p["rho"], x, t)
    F = np.column_stack([P.early.U(x, th) for th in t])
    u = lattice_verdict(F, x, t)
    assert (q.verdict, q.strict) == (u.verdict, u.strict)


def test_monotone_threshold_maps():
    p = O.GBM_FIXTURE
    samples = [(t, [O.gbm_threshold(t, p["rho"], p["sigma"], p["mu"])]) for t in T]
    assert check_monotone_threshold_map(samples)
    assert not check_monotone_threshold_map(samples, increasing=False)
    bessel = [(-1.0, [O.BESSEL_ROOTS[1]]), (1.0, [O.BESSEL_ROOTS[0]])]
    assert check_monotone_threshold_map(bessel, increasing=False)
    res = check_monotone_threshold_map(bessel)
    assert not res and res.witness == ((-1.0, O.BESSEL_ROOTS[1]), (1.0, O.BESSEL_ROOTS[0]))
    const = [(t, [1.5]) for t in T]
    assert check_monotone_threshold_map(const) and check_monotone_threshold_map(const, False)


def test_set_valued_monotonicity():
    ok = [(0.0, [1.0, 2.0]), (1.0, [2.0, 3.0]), (2.0, []), (3.0, [3.5])]
    assert check_monotone_threshold_map(ok)
    bad = [(0.0, [1.0, 2.5]), (1.0, [2.0, 3.0])]
    assert not check_monotone_threshold_map(bad)
