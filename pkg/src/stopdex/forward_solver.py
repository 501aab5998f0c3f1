"""Parametrised optimal stopping: threshold sets, strategy classification, value curves.

For a reward family ``G(x, theta)`` and running reward ``c(x, theta)`` the
early stopping reward is ``U = G - R`` where ``R`` is the resolvent of ``c``.
An upper threshold ``z`` is optimal when ``U/phi`` peaks at ``z``, a lower one
when ``U/Phi`` does.
"""

from __future__ import annotations

import enum
import functools
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy.optimize import brentq, minimize_scalar

from ._numerics import worker_count
from .diffusion_core import (DEFAULT_POINTS, DiffusionSpec, Domain, EigenPair, GridFunction,
                             check_integrability, outer_shells, solve_eigenfunctions,
                             solve_resolvent, widen_truncation)
from .errors import (AllNonPositive, DivergentIntegral, EmptyThresholdSet, NonConvergent, NonIntervalRegion,
                     TriangleViolation)

log = logging.getLogger(__name__)

TIE_TOL = 1e-9
DEFAULT_THETA_POINTS = 201
MAX_REFINED = 50
MAX_WIDENINGS = 3


class Strategy(str, enum.Enum):
    STOP_NOW = "stop_now"
    UPPER = "upper_threshold"
    LOWER = "lower_threshold"
    WAIT_FOREVER = "wait_forever"
    NO_THRESHOLD = "no_threshold"


def _as_array(v, like):
    return np.asarray(v, float) * np.ones_like(like, dtype=float)


@dataclass(frozen=True, eq=False)
class RewardFamily:
    """Terminal reward G, its analytic theta-partial, and running reward c.

    ``c_theta`` is the analytic theta-partial of ``c``; leave it ``None`` when
    ``c`` does not depend on theta, in which case one resolvent serves every
    theta.  ``c=None`` means no running reward.
    """

    G: Callable
    G_theta: Callable
    c: Optional[Callable] = None
    theta_range: tuple = (-math.inf, math.inf)
    c_theta: Optional[Callable] = None

    def G_of(self, x, theta):
        return _as_array(self.G(x, theta), x)

    def G_theta_of(self, x, theta):
        return _as_array(self.G_theta(x, theta), x)

    def G_x(self, x, theta):
        x = np.asarray(x, float)
        h = 1e-6 * np.maximum(1.0, np.abs(x))
        return (self.G_of(x + h, theta) - self.G_of(x - h, theta)) / (2 * h)

    def running(self, theta):
        if self.c is None:
            return None
        return lambda x: _as_array(self.c(x, theta), x)

    def running_theta(self, theta):
        if self.c_theta is None:
            return None
        return lambda x: _as_array(self.c_theta(x, theta), x)


def check_reward_derivative(reward: RewardFamily, xs, thetas, tol=1e-5):
    """Largest mismatch between G_theta and a central difference of G (scaled)."""
    worst = 0.0
    xs = np.asarray(xs, float)
    for th in thetas:
        h = 1e-6 * max(1.0, abs(th))
        fd = (reward.G_of(xs, th + h) - reward.G_of(xs, th - h)) / (2 * h)
        an = reward.G_theta_of(xs, th)
        worst = max(worst, float(np.max(np.abs(fd - an) / (1 + np.abs(an)))))
    return worst <= tol, worst


@dataclass(frozen=True, eq=False)
class EarlyReward:
    """U = G - R on a working grid, with off-grid evaluation.

    Build with :func:`compute_early_reward`, or with :meth:`direct` when U is
    known in closed form.
    """

    grid: np.ndarray
    U_fn: Callable
    U_x_fn: Callable
    U_theta_fn: Callable
    resolvent_fn: Callable = field(default=lambda theta: None, repr=False)
    resolvent_theta_fn: Callable = field(default=lambda theta: None, repr=False)

    def U(self, x, theta):
        return self.U_fn(np.asarray(x, float), theta)

    def u(self, x, theta):
        """log U on {U > 0}, -inf elsewhere."""
        U = self.U(x, theta)
        out = np.full(np.shape(U), -np.inf)
        pos = U > 0
        out[pos] = np.log(U[pos])
        return out

    def U_x(self, x, theta):
        return self.U_x_fn(np.asarray(x, float), theta)

    def U_theta(self, x, theta):
        return self.U_theta_fn(np.asarray(x, float), theta)

    def resolvent(self, theta):
        return self.resolvent_fn(theta)

    def resolvent_theta(self, theta):
        return self.resolvent_theta_fn(theta)

    @classmethod
    def direct(cls, grid, U, U_theta, U_x=None):
        """Closed-form U(x, theta) (no running reward bookkeeping)."""
        if U_x is None:
            def U_x(x, th):
                h = 1e-6 * np.maximum(1.0, np.abs(x))
                return (_as_array(U(x + h, th), x) - _as_array(U(x - h, th), x)) / (2 * h)
        return cls(np.asarray(grid, float), lambda x, th: _as_array(U(x, th), x),
                   lambda x, th: _as_array(U_x(x, th), x), lambda x, th: _as_array(U_theta(x, th), x))


def compute_early_reward(reward: RewardFamily, resolvent: Callable, grid,
                         resolvent_theta: Optional[Callable] = None) -> EarlyReward:
    """Assemble U = G - R from per-theta resolvents.

    ``resolvent(theta)`` returns a GridFunction for R(., theta) (or ``None``
    for zero running reward); ``resolvent_theta(theta)`` likewise for the
    resolvent of c_theta.
    """
    resolvent_theta = resolvent_theta or (lambda th: None)

    def U(x, th):
        R = resolvent(th)
        return reward.G_of(x, th) - (0.0 if R is None else R(x))

    def U_x(x, th):
        R = resolvent(th)
        return reward.G_x(x, th) - (0.0 if R is None else R.derivative(x))

    def U_theta(x, th):
        Rt = resolvent_theta(th)
        return reward.G_theta_of(x, th) - (0.0 if Rt is None else Rt(x))

    return EarlyReward(np.asarray(grid, float), U, U_x, U_theta, resolvent, resolvent_theta)


@dataclass(frozen=True)
class ArgmaxResult:
    points: tuple
    sup: float
    escaped: Optional[str] = None  # "left" / "right" when the supremum runs off the grid


@dataclass(frozen=True, eq=False)
class ThresholdReport:
    theta: float
    upper_set: tuple
    lower_set: tuple
    classification: Strategy
    early_value: float
    value: float
    thresholds: tuple = ()
    resolvent_at_start: float = 0.0
    notes: tuple = ()
    escaped: bool = False  # a global search ran off a truncated end

    @property
    def threshold_lo(self):
        return min(self.thresholds) if self.thresholds else math.nan

    @property
    def threshold_hi(self):
        return max(self.thresholds) if self.thresholds else math.nan


def _escape_edges(pair: EigenPair, spec: Optional[DiffusionSpec]):
    """Where a maximiser counts as running off a truncated end (None: genuine boundary)."""
    if spec is None:
        return pair.grid[0], pair.grid[-1]
    return outer_shells(spec, pair.grid)


def _argmax(early, eig: GridFunction, theta, lo, hi, edge_left, edge_right, tol):
    """All (refined) maximisers of U/f on grid nodes within [lo, hi].

    A grid argmax beyond ``edge_left`` / ``edge_right`` (the outermost
    doubling shell of a truncated end), or within two cells of that end and
    still rising, is reported as an escape with no maximiser.
    """
    g = eig.grid
    sel = (g >= lo) & (g <= hi) & (eig.values > 0)
    idx = np.nonzero(sel)[0]
    if len(idx) == 0:
        return ArgmaxResult((), -math.inf)
    xs = g[idx]
    U = early.U(xs, theta)
    if not np.any(U > 0):
        raise AllNonPositive(f"U(., {theta}) <= 0 on [{lo}, {hi}]")
    obj = U / eig.values[idx]
    n = len(xs)
    k = int(np.argmax(obj))
    if edge_right is not None and idx[-1] == len(g) - 1 and n > 1:
        if xs[k] > edge_right or (k >= n - 3 and obj[-1] >= obj[-2]):
            return ArgmaxResult((), float(obj[k]), "right")
    if edge_left is not None and idx[0] == 0 and n > 1:
        if xs[k] < edge_left or (k <= 2 and obj[0] >= obj[1]):
            return ArgmaxResult((), float(obj[k]), "left")

    def f(x):
        x = np.asarray(x, float)
        return early.U(x, theta) / eig(x)

    def df(x):
        x = np.asarray(x, float)
        v, d = eig(x), eig.derivative(x)
        return (early.U_x(x, theta) * v - early.U(x, theta) * d) / (v * v)

    is_peak = np.ones(n, bool)
    is_peak[1:] &= obj[1:] >= obj[:-1]
    is_peak[:-1] &= obj[:-1] >= obj[1:]
    peaks = np.nonzero(is_peak)[0]
    peaks = peaks[np.argsort(-obj[peaks], kind="stable")][:MAX_REFINED]
    cands = []
    for j in peaks:
        best_x, best_v = float(xs[j]), float(obj[j])
        a = float(xs[j - 1]) if j > 0 else float(xs[j])
        b = float(xs[j + 1]) if j < n - 1 else float(xs[j])
        if b > a:
            xr = _refine(f, df, a, b, best_x)
            vr = float(f(xr))
            if vr > best_v:
                best_x, best_v = xr, vr
        cands.append((best_x, best_v))
    M = max(v for _, v in cands)
    keep = sorted(x for x, v in cands if v >= M - tol * (1 + abs(M)))
    pts = []
    for x in keep:
        if not pts or x - pts[-1] > 1e-9 * max(1.0, abs(x)):
            pts.append(x)
    return ArgmaxResult(tuple(pts), M)


def _refine(f, df, a, b, x_node):
    """Polish a grid maximiser inside [a, b]: derivative root if bracketed, else Brent."""
    da, db, dn = float(df(a)), float(df(b)), float(df(x_node))
    scale = max(1.0, abs(x_node))
    try:
        if x_node > a and da > 0 > dn:
            return brentq(df, a, x_node, xtol=1e-14 * scale, rtol=1e-15)
        if x_node < b and dn > 0 > db:
            return brentq(df, x_node, b, xtol=1e-14 * scale, rtol=1e-15)
        if da > 0 > db:
            return brentq(df, a, b, xtol=1e-14 * scale, rtol=1e-15)
    except (ValueError, RuntimeError):
        pass
    res = minimize_scalar(lambda t: -float(f(t)), bounds=(a, b), method="bounded",
                          options={"xatol": 1e-12 * scale})
    return float(res.x)


def upper_threshold_set(early: EarlyReward, pair: EigenPair, theta, tol=TIE_TOL, *,
                        spec: Optional[DiffusionSpec] = None, lo=None, hi=None):
    """Maximisers of U(., theta)/phi over the working interval (or [lo, hi]).

    An empty set means the supremum is approached at a truncation end.
    """
    return _threshold(early, pair, pair.phi_inc, theta, tol, spec, lo, hi).points


def lower_threshold_set(early: EarlyReward, pair: EigenPair, theta, tol=TIE_TOL, *,
                        spec: Optional[DiffusionSpec] = None, lo=None, hi=None):
    """Maximisers of U(., theta)/Phi; mirror of :func:`upper_threshold_set`."""
    return _threshold(early, pair, pair.phi_dec, theta, tol, spec, lo, hi).points


def _threshold(early, pair, eig, theta, tol, spec, lo, hi):
    el, er = _escape_edges(pair, spec)
    g = pair.grid
    lo = g[0] if lo is None else lo
    hi = g[-1] if hi is None else hi
    return _argmax(early, eig, theta, lo, hi, el, er, tol)


def _at_accessible_end(spec: DiffusionSpec, x):
    dom = spec.domain
    return (x == dom.left and dom.left_behavior.accessible) or (x == dom.right and dom.right_behavior.accessible)


def _safe(fn):
    try:
        return fn()
    except AllNonPositive:
        return None


def classify(early: EarlyReward, pair: EigenPair, theta, x0=None, *, spec=None,
             tol=TIE_TOL) -> ThresholdReport:
    """Strategy at the start point for one theta, with E(theta) and V(theta)."""
    x0 = pair.x0 if x0 is None else x0
    scale = max(1.0, abs(x0))
    R = early.resolvent(theta)
    R0 = 0.0 if R is None else float(R(x0))
    notes = []

    up = _safe(lambda: _threshold(early, pair, pair.phi_inc, theta, tol, spec, None, None))
    dn = _safe(lambda: _threshold(early, pair, pair.phi_dec, theta, tol, spec, None, None))
    upper = up.points if up else ()
    lower = dn.points if dn else ()
    # only an upper search running right (lower running left) can resolve on wider cutoffs
    escaped = bool(up and up.escaped == "right") or bool(dn and dn.escaped == "left")
    if upper and lower and max(upper) > min(lower) + 1e-6 * scale:
        raise TriangleViolation(f"theta={theta}: max upper {max(upper)} > min lower {min(lower)}")

    def report(cls, E, thr):
        if spec is not None and any(_at_accessible_end(spec, a) for a in thr):
            notes.append("threshold at an accessible boundary: envelope formula used without interior guarantee")
        return ThresholdReport(float(theta), upper, lower, cls, float(E), R0 + float(E),
                               tuple(thr), R0, tuple(notes), escaped)

    if up is None and dn is None:
        notes.append("U <= 0 everywhere: never stopping")
        return report(Strategy.WAIT_FOREVER, 0.0, ())

    near = lambda a: abs(a - x0) <= 1e-9 * scale
    U0 = float(early.U(np.array(x0), theta))
    if any(near(a) for a in upper + lower):
        thr = [x0]
        if any(near(a) for a in upper):
            thr += [a for a in upper if a > x0 and not near(a)]
        if any(near(a) for a in lower):
            thr += [a for a in lower if a < x0 and not near(a)]
        return report(Strategy.STOP_NOW, U0, sorted(thr))
    above = [a for a in upper if a > x0]
    below = [a for a in lower if a < x0]
    if above:
        E = float(early.U(np.array(above[0]), theta) / pair.phi_inc(above[0]))
        return report(Strategy.UPPER, E, above)
    if below:
        E = float(early.U(np.array(below[-1]), theta) / pair.phi_dec(below[-1]))
        return report(Strategy.LOWER, E, below[::-1])

    # global maximisers (if any) lie on the wrong side of x0: fall back to one-sided searches
    g = pair.grid
    sup_up = _safe(lambda: _threshold(early, pair, pair.phi_inc, theta, tol, spec, x0, g[-1]))
    sup_dn = _safe(lambda: _threshold(early, pair, pair.phi_dec, theta, tol, spec, g[0], x0))
    if upper and lower:
        notes.append("start lies between the threshold sets; E is the best one-sided threshold value")
        best = max((r for r in (sup_up, sup_dn) if r is not None), key=lambda r: r.sup)
        return report(Strategy.NO_THRESHOLD, best.sup, ())
    sides = [(r, s) for r, s in ((sup_up, Strategy.UPPER), (sup_dn, Strategy.LOWER)) if r is not None]
    if not sides:
        notes.append("U <= 0 on both sides of the start: never stopping")
        return report(Strategy.WAIT_FOREVER, 0.0, ())
    at_start = [r for r, _ in sides if r.points and all(near(a) for a in r.points)]
    best, kind = max(sides, key=lambda rs: rs[0].sup)
    if best.escaped:
        notes.append(f"supremum approached at the {best.escaped} truncation end")
        return report(Strategy.WAIT_FOREVER, max(best.sup, 0.0), ())
    if at_start and (len(at_start) == len(sides) or all(near(a) for a in best.points)):
        return report(Strategy.STOP_NOW, U0, [x0])
    pts = [a for a in best.points if not near(a)]
    if not pts:
        return report(Strategy.STOP_NOW, U0, [x0])
    notes.append("one-sided optimum (global maximiser lies on the other side of the start)")
    return report(kind, best.sup, pts if kind is Strategy.UPPER else pts[::-1])


class ForwardProblem:
    """A diffusion, a reward family and a discount rate, solved on one working grid."""

    def __init__(self, spec: DiffusionSpec, reward: RewardFamily, rho: float, *,
                 pair: Optional[EigenPair] = None, n_points=DEFAULT_POINTS, truncation=None,
                 tol=TIE_TOL, check_integrability=True, max_widenings=MAX_WIDENINGS):
        self.spec = spec
        self.n_points = n_points
        self.max_widenings = max_widenings
        self._wider = None
        self.reward = reward
        self.rho = float(rho)
        self.tol = tol
        self.pair = pair if pair is not None else solve_eigenfunctions(
            spec, rho, n_points=n_points, truncation=truncation)
        self._check = check_integrability
        solve = functools.lru_cache(maxsize=None)(self._solve_resolvent)
        self._resolvent_theta = functools.lru_cache(maxsize=None)(self._solve_resolvent_theta)
        # a theta-free running reward needs a single resolvent
        self._resolvent = solve if reward.c_theta is not None else (lambda theta: solve(0.0))
        self.early = compute_early_reward(reward, self._resolvent, self.pair.grid,
                                          self._resolvent_theta)

    def _solve_resolvent(self, theta):
        c = self.reward.running(theta)
        if c is None:
            return None
        return solve_resolvent(self.spec, self.pair, c, check=self._check)

    def _solve_resolvent_theta(self, theta):
        c = self.reward.running_theta(theta)
        if c is None:
            return None
        return solve_resolvent(self.spec, self.pair, c, check=False)

    @property
    def x0(self):
        return self.spec.start

    def report(self, theta) -> ThresholdReport:
        return self.solved(theta)[1]

    def solved(self, theta):
        """(problem, report) at theta, re-solved on wider cutoffs while a threshold escapes."""
        rep = classify(self.early, self.pair, theta, self.x0, spec=self.spec, tol=self.tol)
        if rep.escaped and self.max_widenings > 0:
            try:
                wider = self.widened()
            except (NonConvergent, DivergentIntegral) as exc:
                self._wider = False
                log.warning("wider cutoffs unusable: %s", exc)
                wider = None
            if wider is not None:
                return wider.solved(theta)
        return self, rep

    def covering(self, xs) -> "ForwardProblem":
        """The narrowest problem in the widening chain whose grid holds every point of xs."""
        p = self
        while True:
            g = p.pair.grid
            if all(g[0] <= x <= g[-1] for x in xs) or not p._wider:
                return p
            p = p._wider

    def widened(self) -> Optional["ForwardProblem"]:
        """The same problem on cutoffs widened eightfold (None when nothing is truncated)."""
        if self._wider is None:
            g = self.pair.grid
            trunc = (float(g[0]), float(g[-1]))
            wide = trunc
            for _ in range(3):
                wide = widen_truncation(self.spec, wide)
            if wide == trunc:
                self._wider = False
            else:
                self._wider = ForwardProblem(
                    self.spec, self.reward, self.rho, n_points=self.n_points, truncation=wide,
                    tol=self.tol, check_integrability=self._check, max_widenings=self.max_widenings - 1)
        return self._wider or None

    def theta_grid(self, n=DEFAULT_THETA_POINTS, bounds=None):
        lo, hi = bounds if bounds is not None else self.reward.theta_range
        if not (math.isfinite(lo) and math.isfinite(hi)):
            raise ValueError("theta range must be finite (pass working bounds)")
        return np.linspace(lo, hi, int(n))


def envelope_derivatives(problem: ForwardProblem, theta, report: Optional[ThresholdReport] = None):
    """One-sided derivatives (E'(theta-), E'(theta+)) and whether they agree.

    Uses min / max of U_theta(x, theta)/phi(x) over the optimal threshold set
    (Phi for lower thresholds).
    """
    rep = report if report is not None else problem.report(theta)
    if rep.classification in (Strategy.WAIT_FOREVER, Strategy.NO_THRESHOLD) or not rep.thresholds:
        raise EmptyThresholdSet(f"no optimal threshold at theta={theta}")
    problem = problem.covering(rep.thresholds)
    eig = problem.pair.phi_dec if rep.classification is Strategy.LOWER else problem.pair.phi_inc
    xs = np.array(rep.thresholds, float)
    vals = problem.early.U_theta(xs, theta) / eig(xs)
    lo, hi = float(np.min(vals)), float(np.max(vals))
    return lo, hi, math.isclose(lo, hi, rel_tol=1e-9, abs_tol=1e-12)


def value_derivatives(problem: ForwardProblem, theta, report=None):
    """(V'(theta-), V'(theta+)) = E' + resolvent of c_theta at the start."""
    lo, hi, _ = envelope_derivatives(problem, theta, report)
    Rt = problem.early.resolvent_theta(theta)
    shift = 0.0 if Rt is None else float(Rt(problem.x0))
    return lo + shift, hi + shift


@dataclass(frozen=True, eq=False)
class ValueCurve:
    theta: np.ndarray
    V: np.ndarray
    E: np.ndarray
    classification: tuple
    threshold_lo: np.ndarray
    threshold_hi: np.ndarray
    dV_left: np.ndarray
    dV_right: np.ndarray
    reports: tuple


def value_curve(problem: ForwardProblem, theta_grid=None, *, n=DEFAULT_THETA_POINTS,
                workers=None) -> ValueCurve:
    """Per-theta reports plus envelope derivatives over a theta grid."""
    thetas = np.asarray(theta_grid if theta_grid is not None else problem.theta_grid(n), float)

    def one(th):
        rep = problem.report(th)
        try:
            dl, dr = value_derivatives(problem, th, rep)
        except EmptyThresholdSet:
            dl = dr = math.nan
        return rep, dl, dr

    workers = workers or worker_count()
    if workers > 1 and len(thetas) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(one, thetas))
    else:
        rows = [one(t) for t in thetas]
    reps = tuple(r for r, _, _ in rows)
    return ValueCurve(
        thetas,
        np.array([r.value for r in reps]),
        np.array([r.early_value for r in reps]),
        tuple(r.classification for r in reps),
        np.array([r.threshold_lo for r in reps]),
        np.array([r.threshold_hi for r in reps]),
        np.array([d for _, d, _ in rows]),
        np.array([d for _, _, d in rows]),
        reps,
    )


def threshold_region(problem: ForwardProblem, theta_grid):
    """End-points (theta_minus, theta_R) of the sub-grid interval where X*(theta) is nonempty."""
    thetas = np.asarray(theta_grid, float)
    ok = np.array([bool(problem.report(t).thresholds) for t in thetas])
    if not ok.any():
        return float(thetas[0]), float(thetas[0])
    idx = np.nonzero(ok)[0]
    if np.any(np.diff(idx) > 1):
        gap = thetas[idx[np.argmax(np.diff(idx) > 1)] + 1]
        raise NonIntervalRegion(f"threshold set empty at theta={gap} inside the region")
    return float(thetas[idx[0]]), float(thetas[idx[-1]])


@dataclass(frozen=True)
class AssumptionReport:
    integrable: bool
    divergent: tuple  # (theta, side)
    positive: bool
    nonpositive_thetas: tuple
    derivative_ok: bool
    derivative_mismatch: float

    @property
    def ok(self):
        return self.integrable and self.positive and self.derivative_ok


def validate_assumptions(problem: ForwardProblem, theta_samples=None, n=11) -> AssumptionReport:
    """Integrability of the running reward and existence of x with U(x, theta) > 0."""
    thetas = (np.asarray(theta_samples, float) if theta_samples is not None
              else problem.theta_grid(n))
    divergent = []
    nonpos = []
    g = problem.pair.grid
    for th in thetas:
        c = problem.reward.running(th)
        if c is not None:
            for side, _, _ in check_integrability(problem.pair, c):
                divergent.append((float(th), side))
        try:
            R = problem.early.resolvent(th) if c is not None else None
            U = problem.reward.G_of(g, th) - (0.0 if R is None else R.values)
        except DivergentIntegral:
            continue
        if not np.any(U > 0):
            nonpos.append(float(th))
    inner = g[(g > g[0]) & (g < g[-1])][:: max(1, len(g) // 50)]
    ok, worst = check_reward_derivative(problem.reward, inner, thetas)
    return AssumptionReport(not divergent, tuple(divergent), not nonpos, tuple(nonpos), ok, worst)


def taxed_threshold(tax, rho, delta, sigma, d, x0, **kw):
    """Lower exit threshold for profits taxed at rate ``tax`` on the base x - d.

    The firm's profit process is Brownian motion with volatility
    (1 - tax) sigma, the running reward is (1 - tax) x + tax d and the exit
    reward is ``delta``.  ``tax = 0`` is the untaxed problem.
    """
    vol2 = ((1.0 - tax) * sigma) ** 2
    spec = DiffusionSpec(Domain(-math.inf, math.inf), lambda x: vol2 + 0.0 * x, lambda x: 0.0 * x, x0)
    reward = RewardFamily(lambda x, t: delta + 0.0 * x, lambda x, t: 0.0 * x,
                          lambda x, t: (1.0 - t) * x + t * d, (0.0, 1.0), lambda x, t: d - x)
    if "truncation" not in kw:
        # cover both x0 and the point where the running reward drops below rho * delta
        scale = max((1.0 - tax) * sigma / math.sqrt(2.0 * rho), 1e-6)
        guess = (delta * rho - tax * d) / (1.0 - tax)
        lo, hi = min(x0, guess) - 25.0 * scale, max(x0, guess) + 25.0 * scale
        kw["truncation"] = (lo, hi)
        kw.setdefault("n_points", int(min(max(DEFAULT_POINTS, 20.0 * (hi - lo) / scale), 20001)))
    rep = ForwardProblem(spec, reward, rho, **kw).report(tax)
    if rep.classification is not Strategy.LOWER:
        raise EmptyThresholdSet(f"no lower threshold below x0={x0} at tax rate {tax}")
    return rep.thresholds[0]


def neutral_tax_rate(rho, delta, sigma, d, x0, *, eps=0.02, n_scan=11, **kw):
    """Tax rate in (0, 1) that leaves the exit threshold unchanged.

    Root of threshold(tax) - threshold(0) on [eps, 1 - eps]; tax = 0 is always
    a root, hence the open bracket.  Rates close to 1 shrink the volatility so
    far that the eigenfunctions overflow; such scan points are skipped.
    """
    base = taxed_threshold(0.0, rho, delta, sigma, d, x0, **kw)
    f = lambda t: taxed_threshold(t, rho, delta, sigma, d, x0, **kw) - base
    # scan for a sign change, skipping rates where the small volatility defeats the grid
    prev = None
    for t in np.linspace(eps, 1.0 - eps, n_scan):
        try:
            ft = f(t)
        except (NonConvergent, EmptyThresholdSet):
            continue
        if prev is not None and np.sign(prev[1]) != np.sign(ft):
            return brentq(f, prev[0], t, xtol=1e-12, rtol=1e-12)
        prev = (t, ft)
    raise NonConvergent(f"no neutral rate found in [{eps}, {1.0 - eps}]")
