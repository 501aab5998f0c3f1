"""Indifference maps (allocation indices) and the u-convex dual calculus.

For a coupling ``u(y, z)`` the u-dual of ``f`` is ``f^u(z) = sup_y [u(y, z) - f(y)]``.
With ``u = log U`` and ``psi = log phi`` the early value satisfies
``log E = psi^u``, and the indifference index theta*(x) is the u-subdifferential
of psi at x.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy.optimize import brentq

from .diffusion_core import DiffusionSpec, EigenPair, GridFunction
from .errors import AllNonPositive, EmptySubdifferential, NonMonotoneIndex
from .forward_solver import TIE_TOL, EarlyReward, ForwardProblem, _threshold

CHUNK = 2_000_000  # matrix entries per block of the exhaustive scans


def _coupling(u, y, z):
    Y, Z = np.meshgrid(y, z, indexing="ij")
    return np.asarray(u(Y, Z), float) * np.ones_like(Y)


def _sup_scan(values, u, src, dst):
    """max over src of u(src, dst) - values, chunked over dst."""
    out = np.empty(len(dst))
    step = max(1, CHUNK // max(1, len(src)))
    for a in range(0, len(dst), step):
        block = _coupling(u, src, dst[a:a + step]) - values[:, None]
        out[a:a + step] = np.max(block, axis=0)
    return out


def u_dual(f: GridFunction, u: Callable, target_grid) -> GridFunction:
    """f^u(z) = max over grid y of u(y, z) - f(y), exhaustively."""
    z = np.asarray(target_grid, float)
    return GridFunction(z, _sup_scan(f.values, u, f.grid, z))


def u_dual_reverse(g: GridFunction, u: Callable, target_grid) -> GridFunction:
    """Dual taken over the second argument: sup_z [u(y, z) - g(z)] at each y."""
    y = np.asarray(target_grid, float)
    swapped = lambda Z, Y: u(Y, Z)
    return GridFunction(y, _sup_scan(g.values, swapped, g.grid, y))


@dataclass(frozen=True, eq=False)
class DualPair:
    f: GridFunction
    f_u: GridFunction
    u: Callable

    def gap(self):
        """f(y) + f^u(z) - u(y, z) on the product grid (non-negative)."""
        return (self.f.values[:, None] + self.f_u.values[None, :]
                - _coupling(self.u, self.f.grid, self.f_u.grid))

    def subdifferential(self, y, tol=1e-12):
        return u_subdifferential(self, y, tol)


def dual_pair(f: GridFunction, u: Callable, target_grid) -> DualPair:
    return DualPair(f, u_dual(f, u, target_grid), u)


def u_subdifferential(pair: DualPair, y, tol=1e-12):
    """Grid z with f(y) + f^u(z) = u(y, z) within tol (1 + |u|)."""
    fy = float(np.interp(y, pair.f.grid, pair.f.values)) if y not in pair.f.grid else \
        float(pair.f.values[np.searchsorted(pair.f.grid, y)])
    z = pair.f_u.grid
    uz = np.asarray(pair.u(np.full_like(z, y), z), float) * np.ones_like(z)
    gap = fy + pair.f_u.values - uz
    hit = np.abs(gap) <= tol * (1.0 + np.abs(uz))
    if not hit.any():
        raise EmptySubdifferential(f"no z attains equality at y={y} (min gap {gap.min():.3g})")
    return tuple(float(v) for v in z[hit])


def double_dual(f: GridFunction, u: Callable, target_grid) -> GridFunction:
    """f^{uu} on f's own grid, via the dual on ``target_grid``."""
    return u_dual_reverse(u_dual(f, u, target_grid), u, f.grid)


def check_u_convex(f: GridFunction, u: Callable, target_grid, tol=1e-10):
    """True iff max |f^{uu} - f| <= tol on the grid."""
    fuu = double_dual(f, u, target_grid)
    return bool(np.max(np.abs(fuu.values - f.values)) <= tol * (1.0 + np.max(np.abs(f.values))))


class Direction(str, enum.Enum):
    NONDECREASING = "nondecreasing"
    NONINCREASING = "nonincreasing"


@dataclass(frozen=True, eq=False)
class IndexProblem:
    """What the index needs: U, an eigenfunction, the threshold side and a theta range.

    ``side='upper'`` pairs U with the increasing eigenfunction, ``'lower'``
    with the decreasing one.
    """

    early: EarlyReward
    pair: EigenPair
    side: str = "upper"
    theta_range: tuple = (-math.inf, math.inf)
    spec: Optional[DiffusionSpec] = None
    tol: float = TIE_TOL
    _sets: dict = field(default_factory=dict, repr=False)

    @classmethod
    def from_forward(cls, problem: ForwardProblem, side="upper"):
        return cls(problem.early, problem.pair, side, problem.reward.theta_range, problem.spec,
                   problem.tol)

    @property
    def eig(self):
        return self.pair.phi_inc if self.side == "upper" else self.pair.phi_dec

    def threshold_set(self, theta):
        """Global maximisers of U/eig (escape reported through ``escaped``)."""
        key = float(theta)
        if key not in self._sets:
            try:
                self._sets[key] = _threshold(self.early, self.pair, self.eig, theta, self.tol,
                                             self.spec, None, None)
            except AllNonPositive as exc:
                self._sets[key] = exc
        res = self._sets[key]
        if isinstance(res, AllNonPositive):
            raise res
        return res

    def ratio_gap(self, x, theta):
        """sup_y U/eig - U(x)/eig(x), relative to 1 + |sup|."""
        res = self.threshold_set(theta)
        ux = float(self.early.U(np.array(x), theta) / self.eig(x))
        return (res.sup - ux) / (1.0 + abs(res.sup)), res


def indifference_map(problem: IndexProblem, x, theta_grid=None, tol=1e-9):
    """Theta*(x): parameters for which stopping at x is optimal.

    With ``theta_grid`` the grid members are returned.  Without it the set is
    located in the continuum by root-finding on the threshold map and returned
    as an interval ``(theta_lo, theta_hi)`` (empty tuple when no theta works).
    """
    if theta_grid is not None:
        out = []
        for th in np.asarray(theta_grid, float):
            try:
                gap, res = problem.ratio_gap(x, th)
            except AllNonPositive:
                continue
            if res.escaped is None and gap <= tol:
                out.append(float(th))
        return tuple(out)
    return _index_interval(problem, x)


def _selection(problem, theta, which):
    """Smallest or largest element of X*(theta); escapes map to -/+ inf.

    When U <= 0 everywhere stopping never happens, which is treated as a
    threshold infinitely far out on the problem's side.
    """
    try:
        res = problem.threshold_set(theta)
    except AllNonPositive:
        return math.inf if problem.side == "upper" else -math.inf
    if res.escaped == "left":
        return -math.inf
    if res.escaped == "right" or not res.points:
        return math.inf
    return res.points[0] if which == "min" else res.points[-1]


def _crossing(problem, x, which, lo, hi, xtol):
    """Theta where the selection crosses x, or lo / None when it never changes sign."""
    def d(t):
        v = _selection(problem, t, which) - x
        return v if math.isfinite(v) else math.copysign(1e300, v)

    da, db = d(lo), d(hi)
    if np.sign(da) == np.sign(db) or da == 0 or db == 0:
        if da == 0:
            return lo
        if db == 0:
            return hi
        return "below" if da < 0 else "above"
    # the selection is monotone in theta, possibly with jumps; brentq then brackets the jump
    return brentq(d, lo, hi, xtol=xtol, rtol=1e-15)


def _index_interval(problem, x, xtol=1e-13):
    lo, hi = problem.theta_range
    if not (math.isfinite(lo) and math.isfinite(hi)):
        raise ValueError("a finite theta range is needed to locate the index")
    xtol = xtol * max(1.0, abs(lo), abs(hi))
    probe = [_selection(problem, t, "min") for t in np.linspace(lo, hi, 21)]
    f = [v for v in probe if math.isfinite(v)]
    increasing = len(f) < 2 or f[-1] >= f[0]
    first, second = ("max", "min") if increasing else ("min", "max")
    a = _crossing(problem, x, first, lo, hi, xtol)
    b = _crossing(problem, x, second, lo, hi, xtol)

    # a constant sign means x sits on one side of every selection over the whole range
    def resolve(c, end, keep):
        if not isinstance(c, str):
            return c
        return end if c == keep else None

    t_lo = resolve(a, lo, "above" if increasing else "below")
    t_hi = resolve(b, hi, "below" if increasing else "above")
    if t_lo is None or t_hi is None:
        return ()
    t_lo, t_hi = min(t_lo, t_hi), max(t_lo, t_hi)
    gap, res = problem.ratio_gap(x, 0.5 * (t_lo + t_hi))
    if res.escaped is not None or gap > 1e-6:
        return ()
    return (t_lo, t_hi)


@dataclass(frozen=True, eq=False)
class IndexCurve:
    x: np.ndarray
    theta_lo: np.ndarray
    theta_hi: np.ndarray
    direction: Direction
    stationarity_residual: float = math.nan

    @property
    def domain(self):
        ok = np.isfinite(self.theta_lo)
        return (float(self.x[ok][0]), float(self.x[ok][-1])) if ok.any() else (math.nan, math.nan)

    def theta_star(self, x=None):
        """Midpoint selection of the index, interpolated off the grid."""
        mid = 0.5 * (self.theta_lo + self.theta_hi)
        if x is None:
            return mid
        return np.interp(x, self.x, mid)


def index_curve(problem: IndexProblem, x_grid, *, check_monotone=True, mono_tol=1e-9) -> IndexCurve:
    """Index interval at each x, monotonicity check and stationarity residual."""
    xs = np.asarray(x_grid, float)
    lo = np.full(len(xs), np.nan)
    hi = np.full(len(xs), np.nan)
    for i, x in enumerate(xs):
        iv = indifference_map(problem, float(x))
        if iv:
            lo[i], hi[i] = iv
    mid = 0.5 * (lo + hi)
    ok = np.isfinite(mid)
    f = mid[ok]
    direction = Direction.NONDECREASING if len(f) < 2 or f[-1] >= f[0] else Direction.NONINCREASING
    if check_monotone and len(f) >= 2:
        xo = xs[ok]
        scale = 1.0 + np.max(np.abs(f))
        if direction is Direction.NONDECREASING:
            bad = np.nonzero(hi[ok][:-1] > lo[ok][1:] + mono_tol * scale)[0]
        else:
            bad = np.nonzero(lo[ok][:-1] < hi[ok][1:] - mono_tol * scale)[0]
        if len(bad):
            k = bad[0]
            raise NonMonotoneIndex(
                f"index not {direction.value} between x={xo[k]} and x={xo[k + 1]}",
                witness=((float(xo[k]), float(f[k])), (float(xo[k + 1]), float(f[k + 1]))))
    resid = stationarity_residual(problem, xs[ok], mid[ok], lo[ok], hi[ok])
    return IndexCurve(xs, lo, hi, direction, resid)


def stationarity_residual(problem: IndexProblem, xs, theta, lo=None, hi=None, kink_tol=1e-4):
    """max |psi'(x) - u_x(x, theta*(x))| over single-valued, differentiable points."""
    if len(xs) == 0:
        return math.nan
    eig = problem.eig
    psi_p = eig.derivative(xs) / eig(xs)
    worst = 0.0
    for i, (x, th) in enumerate(zip(xs, theta)):
        if lo is not None and not math.isclose(lo[i], hi[i], rel_tol=1e-6, abs_tol=1e-9):
            continue
        U = float(problem.early.U(np.array(x), th))
        if U <= 0:
            continue
        g = eig.grid
        j = np.searchsorted(g, x)
        if j < len(g) and g[j] == x and eig.left_deriv is not None:
            if abs(eig.left_deriv[j] - eig.right_deriv[j]) > kink_tol * (1 + abs(eig.right_deriv[j])):
                continue
        ux = float(problem.early.U_x(np.array(x), th)) / U
        worst = max(worst, abs(psi_p[i] - ux) / (1.0 + abs(ux)))
    return worst


def log_eigen_dual(problem: IndexProblem, x_grid, theta_grid) -> GridFunction:
    """psi^u(theta) = max over grid x of u(x, theta) - log eig(x)."""
    xs = np.asarray(x_grid, float)
    psi = GridFunction(xs, np.log(problem.eig(xs)))
    u = lambda X, T: problem.early.u(X, T)
    return u_dual(psi, u, theta_grid)
