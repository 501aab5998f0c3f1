"""One-dimensional diffusions: rho-eigenfunctions, hitting-time transforms, resolvents.

A diffusion is given by smooth coefficients ``sigma2`` and ``mu`` plus a finite
list of speed-measure atoms (sticky points).  Eigenfunctions are integrated as
a linear ODE with an adaptive high-order integrator and sampled on a grid that
is uniform in a working coordinate ``z`` (``log x`` on positive half-lines
with an inaccessible origin, ``x`` otherwise).

Atom convention: at an atom of mass ``m`` located at ``x`` every eigenfunction
satisfies ``f'(x+) - f'(x-) = 2 * rho * f(x) * m``.
"""

from __future__ import annotations

import enum
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy.integrate import cumulative_simpson, solve_ivp

from ._numerics import gauss_integral, hermite_eval
from .errors import (DegenerateCoefficient, DivergentIntegral, InvalidBoundary,
                     NonConvergent, OutOfGrid)

log = logging.getLogger(__name__)

DEFAULT_POINTS = 4001
TRUNCATION_TOL = 1e-6


class Boundary(str, enum.Enum):
    ABSORBING = "absorbing"
    KILLING = "killing"
    REFLECTING = "reflecting"
    INACCESSIBLE = "inaccessible"

    @property
    def accessible(self):
        return self is not Boundary.INACCESSIBLE


@dataclass(frozen=True)
class Domain:
    left: float
    right: float
    left_behavior: Boundary = Boundary.INACCESSIBLE
    right_behavior: Boundary = Boundary.INACCESSIBLE

    def __post_init__(self):
        object.__setattr__(self, "left_behavior", Boundary(self.left_behavior))
        object.__setattr__(self, "right_behavior", Boundary(self.right_behavior))
        if not self.left < self.right:
            raise InvalidBoundary(f"need left < right, got [{self.left}, {self.right}]")
        if (self.left_behavior is Boundary.REFLECTING
                and self.right_behavior is Boundary.REFLECTING):
            raise InvalidBoundary("at most one endpoint may be reflecting")
        for end, beh in ((self.left, self.left_behavior), (self.right, self.right_behavior)):
            if beh.accessible and not math.isfinite(end):
                raise InvalidBoundary(f"{beh.value} endpoint must be finite, got {end}")

    def contains(self, x):
        return self.left <= x <= self.right


@dataclass(frozen=True, eq=False)
class DiffusionSpec:
    """Smooth coefficients plus finitely many speed-measure atoms.

    ``sigma2`` and ``mu`` must accept numpy arrays.  ``atoms`` is a sequence
    of ``(location, mass)`` pairs strictly inside the domain.
    """

    domain: Domain
    sigma2: Callable
    mu: Callable
    start: float
    atoms: tuple = ()

    def __post_init__(self):
        atoms = tuple((float(x), float(m)) for x, m in self.atoms)
        object.__setattr__(self, "atoms", atoms)
        dom = self.domain
        locs = [x for x, _ in atoms]
        if any(m <= 0 for _, m in atoms):
            raise InvalidBoundary("atom masses must be positive")
        if any(not dom.left < x < dom.right for x in locs):
            raise InvalidBoundary("atoms must lie strictly inside the domain")
        if any(b <= a for a, b in zip(locs, locs[1:])):
            raise InvalidBoundary("atom locations must be strictly increasing")
        x0 = self.start
        if dom.left_behavior is Boundary.REFLECTING:
            if x0 != dom.left:
                raise InvalidBoundary("diffusion must start at its reflecting endpoint")
        elif dom.right_behavior is Boundary.REFLECTING:
            if x0 != dom.right:
                raise InvalidBoundary("diffusion must start at its reflecting endpoint")
        elif not dom.left < x0 < dom.right:
            raise InvalidBoundary(f"start {x0} must lie in the interior of the domain")

    def with_start(self, x0):
        return DiffusionSpec(self.domain, self.sigma2, self.mu, x0, self.atoms)


@dataclass(frozen=True, eq=False)
class GridFunction:
    """Samples of a function on a strictly increasing grid.

    ``fn``, when present, maps x to ``(values, first derivatives)`` and is used
    for off-grid evaluation; otherwise piecewise cubic Hermite interpolation
    on the one-sided derivatives is used.
    """

    grid: np.ndarray
    values: np.ndarray
    left_deriv: Optional[np.ndarray] = None
    right_deriv: Optional[np.ndarray] = None
    fn: Optional[Callable] = field(default=None, repr=False)

    def __post_init__(self):
        g = np.asarray(self.grid, float)
        v = np.asarray(self.values, float)
        if g.ndim != 1 or g.shape != v.shape:
            raise ValueError("grid and values must be 1-d arrays of the same length")
        if np.any(np.diff(g) <= 0):
            raise ValueError("grid must be strictly increasing")
        object.__setattr__(self, "grid", g)
        object.__setattr__(self, "values", v)
        for name in ("left_deriv", "right_deriv"):
            d = getattr(self, name)
            if d is not None:
                object.__setattr__(self, name, np.asarray(d, float))

    def _eval(self, x):
        x = np.asarray(x, float)
        if np.any(x < self.grid[0]) or np.any(x > self.grid[-1]):
            raise OutOfGrid(f"evaluation outside [{self.grid[0]}, {self.grid[-1]}]")
        if self.fn is not None:
            return self.fn(x)
        if self.left_deriv is None:
            f = np.interp(x, self.grid, self.values)
            return f, np.interp(x, self.grid[:-1], np.diff(self.values) / np.diff(self.grid))
        return hermite_eval(x, self.grid, self.values, self.right_deriv, self.left_deriv)

    def __call__(self, x):
        return self._eval(x)[0]

    def derivative(self, x):
        return self._eval(x)[1]

    def restrict(self, lo, hi):
        keep = (self.grid >= lo) & (self.grid <= hi)
        pick = lambda a: None if a is None else a[keep]
        return GridFunction(self.grid[keep], self.values[keep], pick(self.left_deriv),
                            pick(self.right_deriv), self.fn)


class _Coord:
    """Working coordinate z(x): log for (0, .) with an inaccessible origin."""

    def __init__(self, kind):
        self.kind = kind

    @classmethod
    def for_domain(cls, dom):
        if dom.left == 0.0 and not dom.left_behavior.accessible:
            return cls("log")
        return cls("linear")

    def z(self, x):
        return np.log(x) if self.kind == "log" else np.asarray(x, float)

    def x(self, z):
        return np.exp(z) if self.kind == "log" else np.asarray(z, float)

    def dxdz(self, x):
        return np.asarray(x, float) if self.kind == "log" else np.ones_like(np.asarray(x, float))


def default_truncation(spec: DiffusionSpec, rho=None):
    """Working interval: [x0/50, 50 x0] on positive half-lines, x0 -/+ 25 L otherwise.

    L is the slower eigenfunction decay length, max(sqrt(sigma2/(2 rho)), |mu|/rho)
    at x0, when ``rho`` is given, else 1.
    """
    dom, x0 = spec.domain, spec.start
    coord = _Coord.for_domain(dom)
    width = 25.0
    if rho is not None:
        s2 = float(np.asarray(spec.sigma2(np.array(x0)), float))
        mu = float(np.asarray(spec.mu(np.array(x0)), float))
        scale = max(math.sqrt(max(s2, 0.0) / (2.0 * rho)), abs(mu) / rho)
        if 0 < scale < math.inf:
            width *= scale

    def side(end, beh, sign):
        if beh.accessible:
            return end
        if coord.kind == "log":
            return x0 * 50.0 ** sign if not math.isfinite(end) or sign < 0 else end - (end - x0) / 50
        if math.isfinite(end):
            return end - (end - x0) / 50.0
        return x0 + width * sign

    return side(dom.left, dom.left_behavior, -1), side(dom.right, dom.right_behavior, +1)


def widen_truncation(spec: DiffusionSpec, trunc):
    """One doubling step of the truncation cutoffs of inaccessible ends."""
    dom, x0 = spec.domain, spec.start
    coord = _Coord.for_domain(dom)
    lo, hi = trunc
    if not dom.left_behavior.accessible:
        if coord.kind == "log":
            lo = lo / 2.0
        elif math.isfinite(dom.left):
            lo = dom.left + (lo - dom.left) / 2.0
        else:
            lo = x0 - 2.0 * (x0 - lo)
    if not dom.right_behavior.accessible:
        if math.isfinite(dom.right):
            hi = dom.right - (dom.right - hi) / 2.0
        elif coord.kind == "log":
            hi = hi * 2.0
        else:
            hi = x0 + 2.0 * (hi - x0)
    return lo, hi


def outer_shells(spec: DiffusionSpec, grid):
    """Inner edges of the last doubling shells at truncated inaccessible ends.

    Returns ``(left_edge, right_edge)``; an entry is ``None`` when that end of
    the grid is a genuine (accessible) boundary.
    """
    dom, x0 = spec.domain, spec.start
    coord = _Coord.for_domain(dom)
    lo, hi = float(grid[0]), float(grid[-1])
    left = right = None
    if not (lo == dom.left and dom.left_behavior.accessible):
        if coord.kind == "log":
            left = 2.0 * lo
        elif math.isfinite(dom.left):
            left = dom.left + 2.0 * (lo - dom.left)
        else:
            left = x0 - 0.5 * (x0 - lo)
        left = min(left, x0)
    if not (hi == dom.right and dom.right_behavior.accessible):
        if math.isfinite(dom.right):
            right = dom.right - 2.0 * (dom.right - hi)
        elif coord.kind == "log":
            right = 0.5 * hi
        else:
            right = x0 + 0.5 * (hi - x0)
        right = max(right, x0)
    return left, right


def build_grid(spec: DiffusionSpec, truncation=None, n_points=DEFAULT_POINTS):
    """Grid uniform in the working coordinate, with x0 and atoms snapped onto nodes."""
    lo, hi = truncation if truncation is not None else default_truncation(spec)
    coord = _Coord.for_domain(spec.domain)
    z = np.linspace(coord.z(lo), coord.z(hi), int(n_points))
    breaks = [spec.start] + [x for x, _ in spec.atoms]
    return _insert_nodes(coord.x(z), breaks, lo, hi)


def _insert_nodes(x, points, lo, hi):
    x = np.array(x, float)
    x[0], x[-1] = lo, hi
    fixed = {0, len(x) - 1}
    extra = []
    for p in points:
        if not lo <= p <= hi:
            raise OutOfGrid(f"breakpoint {p} outside the working interval [{lo}, {hi}]")
        i = int(np.argmin(np.abs(x - p)))
        if x[i] == p:
            fixed.add(i)
        elif i in fixed:
            extra.append(p)
        else:
            x[i] = p
            fixed.add(i)
    if extra:
        x = np.union1d(x, extra)
    return x


@dataclass(frozen=True, eq=False)
class EigenPair:
    """Increasing and decreasing rho-eigenfunctions normalised to 1 at the start."""

    phi_inc: GridFunction
    phi_dec: Optional[GridFunction]
    rho: float
    wronskian: np.ndarray
    x0: float
    spec: Optional[DiffusionSpec] = field(default=None, repr=False)
    coord: _Coord = field(default_factory=lambda: _Coord("linear"), repr=False)
    log_scale: Optional[np.ndarray] = field(default=None, repr=False)

    @property
    def grid(self):
        return self.phi_inc.grid

    @property
    def W(self):
        """Wronskian (phi' Phi - Phi' phi) / s' at the start point."""
        i = int(np.argmin(np.abs(self.grid - self.x0)))
        return float(self.wronskian[i])

    def scale_log(self, x):
        """M(x) with s'(x) = exp(-M(x)), normalised so that s'(x0) = 1."""
        x = np.asarray(x, float)
        if self.log_scale is None:
            return np.zeros_like(x)
        grid = self.grid
        i = np.clip(np.searchsorted(grid, x, side="right") - 1, 0, len(grid) - 2)
        z0 = self.coord.z(grid[i])
        zx = self.coord.z(x)
        spec, coord = self.spec, self.coord

        def integrand(z):
            xx = coord.x(z)
            return 2.0 * spec.mu(xx) / spec.sigma2(xx) * coord.dxdz(xx)

        return self.log_scale[i] + gauss_integral(integrand, z0, zx)

    def scale_density(self, x):
        return np.exp(-self.scale_log(x))

    def speed_density(self, x):
        """Density of the speed measure, 1 / (sigma2 * s')."""
        if self.spec is None:
            return np.ones_like(np.asarray(x, float))
        return np.exp(self.scale_log(x)) / self.spec.sigma2(np.asarray(x, float))

    @classmethod
    def from_functions(cls, grid, phi, dphi, rho, x0, phi_dec=None, dphi_dec=None):
        """Build a pair from closed-form eigenfunctions (natural scale assumed).

        Functions are normalised at ``x0`` here.
        """
        grid = np.asarray(grid, float)
        if not np.any(grid == x0):
            grid = np.union1d(grid, [x0])

        def make(f, df):
            c = float(f(np.array(x0)))
            fn = lambda x: (np.asarray(f(x), float) / c, np.asarray(df(x), float) / c)
            v, d = fn(grid)
            return GridFunction(grid, v, d, d, fn)

        inc = make(phi, dphi)
        dec = make(phi_dec, dphi_dec) if phi_dec is not None else None
        if dec is not None:
            wr = inc.right_deriv * dec.values - dec.right_deriv * inc.values
        else:
            wr = np.full(len(grid), np.nan)
        return cls(inc, dec, float(rho), wr, float(x0))


def _frozen_root(coord, spec, rho, x, sign):
    """Log-derivative (in z) of the local exponential solution with frozen coefficients."""
    s2, m = float(spec.sigma2(x)), float(spec.mu(x))
    if coord.kind == "log":
        a, b = s2 / x**2, m / x - 0.5 * s2 / x**2
    else:
        a, b = s2, m
    disc = math.sqrt(b * b + 2.0 * a * rho)
    return (-b + sign * disc) / a


def _integrate_branch(spec, coord, rho, zs, atom_z, y_init, forward):
    """Integrate the eigen-ODE across segments separated by atoms.

    Returns list of (z_start, z_end, OdeSolution, log_scale_factor).
    """
    masses = {z: m for z, m in atom_z}

    def rhs(z, y):
        x = math.exp(z) if coord.kind == "log" else z
        s2 = spec.sigma2(x)
        m = spec.mu(x)
        if coord.kind == "log":
            A = 1.0 - 2.0 * m * x / s2
            B = 2.0 * rho * x * x / s2
        else:
            A = -2.0 * m / s2
            B = 2.0 * rho / s2
        return [y[1], A * y[1] + B * y[0]]

    breaks = sorted(masses)
    knots = [zs[0]] + breaks + [zs[-1]]
    if not forward:
        knots = knots[::-1]
    y = np.array(y_init, float)
    logscale = 0.0
    segments = []
    for k in range(len(knots) - 1):
        za, zb = knots[k], knots[k + 1]
        sol = solve_ivp(rhs, (za, zb), y, method="DOP853", rtol=1e-12, atol=1e-14,
                        dense_output=True)
        if not sol.success:
            raise NonConvergent(f"eigenfunction integration failed: {sol.message}")
        segments.append((za, zb, sol.sol, logscale))
        y = sol.y[:, -1].copy()
        if not np.all(np.isfinite(y)):
            raise NonConvergent("eigenfunction integration overflowed")
        if k < len(knots) - 2:
            x_at = float(coord.x(zb))
            jump = 2.0 * rho * y[0] * masses[zb] * float(coord.dxdz(x_at))
            y[1] += jump if forward else -jump
        s = max(abs(y[0]), abs(y[1]), 1e-300)
        y /= s
        logscale += math.log(s)
    return segments


def _sample_branch(segments, coord, z_nodes, forward):
    """Values and one-sided x-derivatives of a branch at grid nodes."""
    n = len(z_nodes)
    val = np.empty(n)
    dl = np.empty(n)
    dr = np.empty(n)
    ordered = segments if forward else segments[::-1]
    for za, zb, sol, ls in ordered:
        lo, hi = min(za, zb), max(za, zb)
        mask = (z_nodes >= lo) & (z_nodes <= hi)
        if not np.any(mask):
            continue
        y = sol(z_nodes[mask]) * math.exp(ls)
        idx = np.nonzero(mask)[0]
        # left-to-right order: this segment owns right derivatives at its lower end
        first = z_nodes[idx] == lo
        last = z_nodes[idx] == hi
        val[idx] = y[0]
        inner = ~(first | last)
        dl[idx[inner]] = y[1][inner]
        dr[idx[inner]] = y[1][inner]
        dr[idx[first]] = y[1][first]
        dl[idx[last]] = y[1][last]
    dl[0], dr[-1] = dr[0], dl[-1]
    x = coord.x(z_nodes)
    jac = coord.dxdz(x)
    return val, dl / jac, dr / jac


def _branch_fn(segments, coord, norm):
    """Off-grid evaluator (values, x-derivative) for a branch."""
    bounds = np.array([min(s[0], s[1]) for s in segments])
    order = np.argsort(bounds)
    segs = [segments[i] for i in order]
    starts = np.array([min(s[0], s[1]) for s in segs])

    def fn(x):
        x = np.asarray(x, float)
        z = coord.z(x)
        flat = np.atleast_1d(z).ravel()
        k = np.clip(np.searchsorted(starts, flat, side="right") - 1, 0, len(segs) - 1)
        v = np.empty_like(flat)
        d = np.empty_like(flat)
        for j in np.unique(k):
            sel = k == j
            za, zb, sol, ls = segs[j]
            y = sol(flat[sel]) * math.exp(ls - norm)
            v[sel] = y[0]
            d[sel] = y[1]
        xs = coord.x(flat)
        d = d / coord.dxdz(xs)
        return v.reshape(np.shape(z)), d.reshape(np.shape(z))

    return fn


def _solve_on_grid(spec, rho, grid):
    dom = spec.domain
    coord = _Coord.for_domain(dom)
    x0 = spec.start
    s2 = np.asarray(spec.sigma2(grid), float) * np.ones_like(grid)
    if np.any(~np.isfinite(s2)) or np.any(s2 <= 0):
        bad = grid[~(s2 > 0)]
        raise DegenerateCoefficient(f"sigma2 <= 0 near x = {bad[:3]}")
    z = coord.z(grid)
    atom_z = []
    for xa, m in spec.atoms:
        i = int(np.argmin(np.abs(grid - xa)))
        if grid[i] != xa:
            raise OutOfGrid(f"atom at {xa} is not a grid node")
        atom_z.append((float(z[i]), m))
    lo, hi = grid[0], grid[-1]

    if lo == dom.left and dom.left_behavior.accessible:
        y_inc = [1.0, 0.0] if dom.left_behavior is Boundary.REFLECTING else [0.0, 1.0]
    else:
        y_inc = [1.0, _frozen_root(coord, spec, rho, lo, +1)]
    if hi == dom.right and dom.right_behavior.accessible:
        y_dec = [1.0, 0.0] if dom.right_behavior is Boundary.REFLECTING else [0.0, -1.0]
    else:
        y_dec = [1.0, _frozen_root(coord, spec, rho, hi, -1)]

    seg_inc = _integrate_branch(spec, coord, rho, z, atom_z, y_inc, forward=True)
    seg_dec = _integrate_branch(spec, coord, rho, z, atom_z, y_dec, forward=False)

    i0 = int(np.nonzero(grid == x0)[0][0])
    out = []
    for segs, fwd in ((seg_inc, True), (seg_dec, False)):
        v, dl, dr = _sample_branch(segs, coord, z, fwd)
        c = v[i0]
        if not c > 0:
            raise NonConvergent("eigenfunction vanishes at the start point")
        v, dl, dr = v / c, dl / c, dr / c
        norm_fn = _branch_fn(segs, coord, 0.0)
        fn = (lambda f, c: (lambda x: tuple(a / c for a in f(x))))(norm_fn, c)
        out.append(GridFunction(grid, v, dl, dr, fn))
    inc, dec = out

    # s'(x) = exp(-M(x)), M(x0) = 0
    g = 2.0 * np.asarray(spec.mu(grid), float) / s2 * coord.dxdz(grid)
    M = cumulative_simpson(g, x=z, initial=0.0)
    M = M - M[i0]
    wr = (inc.right_deriv * dec.values - dec.right_deriv * inc.values) * np.exp(M)
    return EigenPair(inc, dec, float(rho), wr, float(x0), spec, coord, M)


def _check_points(spec, lo, hi):
    x0 = spec.start
    pts = []
    for p, fallback in ((x0 - 1.0, 0.5 * (lo + x0)), (x0 + 1.0, 0.5 * (x0 + hi))):
        pts.append(p if lo < p < hi else fallback)
    return np.array(sorted(set(pts)))


def solve_eigenfunctions(spec: DiffusionSpec, rho: float, grid=None, *, truncation=None,
                         n_points=DEFAULT_POINTS, auto_truncate=True,
                         truncation_tol=TRUNCATION_TOL, max_doublings=12) -> EigenPair:
    """Increasing and decreasing solutions of (1/2) sigma2 f'' + mu f' = rho f.

    When no grid is given, the working interval starts at ``truncation`` (or
    the default cutoffs) and, with ``auto_truncate``, inaccessible cutoffs are
    doubled until both eigenfunctions change by at most ``truncation_tol``
    (relative) at x0 -/+ 1.
    """
    if not rho > 0:
        raise ValueError("rho must be positive")
    if grid is not None:
        grid = np.asarray(grid, float)
        grid = _insert_nodes(grid, [spec.start] + [x for x, _ in spec.atoms], grid[0], grid[-1])
        return _solve_on_grid(spec, rho, grid)

    trunc = truncation if truncation is not None else default_truncation(spec, rho)
    coord = _Coord.for_domain(spec.domain)
    density = (n_points - 1) / float(coord.z(trunc[1]) - coord.z(trunc[0]))

    def solve(tr):
        n = max(int(n_points), int(math.ceil((coord.z(tr[1]) - coord.z(tr[0])) * density)) + 1)
        return _solve_on_grid(spec, rho, build_grid(spec, tr, n))

    pair = solve(trunc)
    if not auto_truncate:
        return pair
    for _ in range(max_doublings):
        wider = widen_truncation(spec, trunc)
        if wider == trunc:
            return pair
        nxt = solve(wider)
        pts = _check_points(spec, *trunc)
        change = 0.0
        for a, b in ((pair.phi_inc, nxt.phi_inc), (pair.phi_dec, nxt.phi_dec)):
            va, vb = a(pts), b(pts)
            change = max(change, float(np.max(np.abs(va - vb) / np.abs(vb))))
        pair, trunc = nxt, wider
        if change <= truncation_tol:
            return pair
    log.warning("eigenfunction truncation did not settle after %d doublings", max_doublings)
    return pair


def hitting_laplace(pair: EigenPair, x: float, y: float) -> float:
    """E_x[exp(-rho H_y)]: phi(x)/phi(y) for x <= y, Phi(x)/Phi(y) otherwise."""
    g = pair.grid
    for p in (x, y):
        if not g[0] <= p <= g[-1]:
            raise OutOfGrid(f"{p} outside the eigenfunction grid [{g[0]}, {g[-1]}]")
    if x == y:
        return 1.0
    f = pair.phi_inc if x <= y else pair.phi_dec
    return float(f(x) / f(y))


def _atom_masses(pair):
    """(grid index, mass in speed-measure units) for each atom of the pair's diffusion."""
    out = []
    if pair.spec is None:
        return out
    for xa, m in pair.spec.atoms:
        i = int(np.nonzero(pair.grid == xa)[0][0])
        out.append((i, m * math.exp(pair.log_scale[i])))
    return out


def _cumulative(y, z, breaks):
    """Cumulative Simpson integral of y over z that restarts cleanly at break indices."""
    out = np.zeros_like(y)
    cuts = [0] + sorted(breaks) + [len(z) - 1]
    offset = 0.0
    for a, b in zip(cuts, cuts[1:]):
        if b <= a:
            continue
        seg = slice(a, b + 1)
        if b - a >= 2:
            part = cumulative_simpson(y[seg], x=z[seg], initial=0.0)
        else:
            part = np.concatenate([[0.0], np.cumsum(0.5 * (y[seg][1:] + y[seg][:-1]) * np.diff(z[seg]))])
        out[seg] = offset + part
        offset = out[b]
    return out


def _geometric_tail(y, z, k=10, rel=0.1):
    """Mass beyond a truncation cutoff for an integrand decaying exponentially in z.

    ``y`` starts at the cutoff and runs inward.  The correction is applied
    only when three samples agree on a single positive decay rate.
    """
    if len(y) < 2 * k + 1:
        return 0.0
    a, b, c = y[0], y[k], y[2 * k]
    if not (a != 0 and np.sign(a) == np.sign(b) == np.sign(c)):
        return 0.0
    k1 = math.log(b / a) / (z[k] - z[0])
    k2 = math.log(c / b) / (z[2 * k] - z[k])
    if k1 <= 0 or k2 <= 0 or abs(k1 - k2) > rel * k1:
        return 0.0
    return a / k1


def _kernel_integrals(pair, c_vals):
    """I1(x) = int_lo^x phi c m(dy) and I2(x) = int_x^hi Phi c m(dy) on the grid."""
    g = pair.grid
    coord = pair.coord
    z = coord.z(g)
    nu = pair.speed_density(g) if pair.spec is None else np.exp(pair.log_scale) / pair.spec.sigma2(g)
    jac = coord.dxdz(g)
    g1 = pair.phi_inc.values * c_vals * nu * jac
    g2 = pair.phi_dec.values * c_vals * nu * jac
    atoms = _atom_masses(pair)
    breaks = [i for i, _ in atoms]
    I1 = _cumulative(g1, z, breaks)
    # integrate from the right so the decreasing branch does not cancel
    n = len(g)
    I2 = _cumulative(g2[::-1], -z[::-1], [n - 1 - i for i in breaks])[::-1]
    dom = pair.spec.domain if pair.spec is not None else None
    if dom is None or not (g[0] == dom.left and dom.left_behavior.accessible):
        I1 = I1 + _geometric_tail(g1, z)
    if dom is None or not (g[-1] == dom.right and dom.right_behavior.accessible):
        I2 = I2 + _geometric_tail(g2[::-1], -z[::-1])
    a1 = np.zeros_like(g)
    a2 = np.zeros_like(g)
    for i, mt in atoms:
        a1[i] = pair.phi_inc.values[i] * c_vals[i] * mt
        a2[i] = pair.phi_dec.values[i] * c_vals[i] * mt
    # atoms at x_k <= x belong to I1, atoms at x_k > x to I2
    I1 = I1 + np.cumsum(a1)
    I2 = I2 + (np.sum(a2) - np.cumsum(a2))
    return I1, I2, a1, a2


def _tail_divergence(pair, c, ratio_tol=0.98, share_tol=1e-8):
    """Detect non-decaying Green-kernel mass of |c| next to truncated inaccessible ends."""
    spec = pair.spec
    dom = spec.domain
    coord = pair.coord
    g = pair.grid
    x0 = pair.x0
    z0 = float(coord.z(x0))
    zlo, zhi = float(coord.z(g[0])), float(coord.z(g[-1]))

    def weight(fn, cfun):
        def integrand(zz):
            xx = coord.x(zz)
            return fn(xx) * np.abs(cfun(xx)) * pair.speed_density(xx) * coord.dxdz(xx)
        return integrand

    c_arr = lambda xx: np.asarray(c(xx), float) * np.ones_like(xx)
    lower = weight(pair.phi_inc, c_arr)
    upper = weight(pair.phi_dec, c_arr)

    def shell_integral(f, a, b, pieces=64):
        edges = np.linspace(a, b, pieces + 1)
        return float(np.sum(gauss_integral(f, edges[:-1], edges[1:])))

    total = shell_integral(lower, zlo, z0) + shell_integral(upper, z0, zhi)
    problems = []
    if not (g[0] == dom.left and dom.left_behavior.accessible) and zlo < z0:
        d = math.log(2.0) if coord.kind == "log" else 0.5 * (z0 - zlo)
        d = min(d, 0.5 * (z0 - zlo))
        outer = shell_integral(lower, zlo, zlo + d)
        inner = shell_integral(lower, zlo + d, zlo + 2 * d) if coord.kind == "log" else shell_integral(lower, zlo + d, zlo + 1.5 * d) * 2
        if outer >= ratio_tol * inner and outer > share_tol * total:
            problems.append(("left", outer, inner))
    if not (g[-1] == dom.right and dom.right_behavior.accessible) and zhi > z0:
        d = math.log(2.0) if coord.kind == "log" else 0.5 * (zhi - z0)
        d = min(d, 0.5 * (zhi - z0))
        outer = shell_integral(upper, zhi - d, zhi)
        inner = shell_integral(upper, zhi - 2 * d, zhi - d) if coord.kind == "log" else shell_integral(upper, zhi - 1.5 * d, zhi - d) * 2
        if outer >= ratio_tol * inner and outer > share_tol * total:
            problems.append(("right", outer, inner))
    return problems


def check_integrability(pair: EigenPair, c: Callable):
    """List of (side, outer_shell, inner_shell) where the resolvent quadrature does not converge."""
    if pair.spec is None:
        return []
    return _tail_divergence(pair, c)


def solve_resolvent(spec: DiffusionSpec, pair: EigenPair, c: Callable, rho: Optional[float] = None,
                    *, check=True) -> GridFunction:
    """R(x) = E_x int_0^inf e^{-rho t} c(X_t) dt via the Green kernel phi(x^y) Phi(x v y) / W."""
    if rho is not None and not math.isclose(rho, pair.rho):
        raise ValueError("rho differs from the eigenpair's discount rate")
    if pair.spec is None:
        pair = EigenPair(pair.phi_inc, pair.phi_dec, pair.rho, pair.wronskian, pair.x0,
                         spec, _Coord.for_domain(spec.domain), None)
    if check:
        bad = _tail_divergence(pair, c)
        if bad:
            side, outer, inner = bad[0]
            raise DivergentIntegral(
                f"resolvent quadrature does not converge at the {side} cutoff "
                f"(outer shell {outer:.3g} vs inner shell {inner:.3g})")
    g = pair.grid
    c_vals = np.asarray(c(g), float) * np.ones_like(g)
    I1, I2, a1, a2 = _kernel_integrals(pair, c_vals)
    k = 2.0 / pair.W
    phi, Phi = pair.phi_inc, pair.phi_dec
    R = k * (Phi.values * I1 + phi.values * I2)
    dR_right = k * (Phi.right_deriv * I1 + phi.right_deriv * I2)
    dR_left = k * (Phi.left_deriv * (I1 - a1) + phi.left_deriv * (I2 + a2))

    coord = pair.coord
    sigma2 = spec.sigma2

    def g1(zz):
        xx = coord.x(zz)
        return phi(xx) * c(xx) * np.exp(pair.scale_log(xx)) / sigma2(xx) * coord.dxdz(xx)

    def g2(zz):
        xx = coord.x(zz)
        return Phi(xx) * c(xx) * np.exp(pair.scale_log(xx)) / sigma2(xx) * coord.dxdz(xx)

    z_grid = coord.z(g)

    def fn(x):
        x = np.asarray(x, float)
        i = np.clip(np.searchsorted(g, x, side="right") - 1, 0, len(g) - 2)
        za, zx = z_grid[i], coord.z(x)
        j1 = I1[i] + gauss_integral(g1, za, zx)
        j2 = I2[i] - gauss_integral(g2, za, zx)
        pv, pd = phi.fn(x)
        qv, qd = Phi.fn(x)
        v, d = k * (qv * j1 + pv * j2), k * (qd * j1 + pd * j2)
        for coef, eig in extra:
            ev, ed = eig.fn(x)
            v, d = v + coef * ev, d + coef * ed
        return v, d

    # an absorbed path keeps earning c(a) forever: add c(a)/rho times E_x[e^{-rho H_a}]
    extra = []
    dom = spec.domain
    if dom.left_behavior is Boundary.ABSORBING:
        extra.append((float(c(np.array(dom.left))) / pair.rho / Phi.values[0], Phi))
    if dom.right_behavior is Boundary.ABSORBING:
        extra.append((float(c(np.array(dom.right))) / pair.rho / phi.values[-1], phi))
    for coef, eig in extra:
        R = R + coef * eig.values
        dR_right = dR_right + coef * eig.right_deriv
        dR_left = dR_left + coef * eig.left_deriv
    return GridFunction(g, R, dR_left, dR_right, fn)
