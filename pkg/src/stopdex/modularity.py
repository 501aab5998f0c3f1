"""Lattice tests for (log-)super/submodularity on grids and monotonicity of threshold maps."""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np
from scipy import ndimage

from .errors import EmptyMask

REL_TOL = 1e-10
STRICT_MARGIN = 1e-8
AUDIT_RECTANGLES = 10_000


class Verdict(str, enum.Enum):
    SUPERMODULAR = "supermodular"
    SUBMODULAR = "submodular"
    MODULAR = "modular"
    NEITHER = "neither"


@dataclass(frozen=True)
class LatticeVerdict:
    verdict: Verdict
    strict: bool
    witness: Optional[tuple]  # (x, x', theta, theta') of a violated inequality
    tested_domain: str
    components: int = 1

    @property
    def supermodular(self):
        return self.verdict in (Verdict.SUPERMODULAR, Verdict.MODULAR)

    @property
    def submodular(self):
        return self.verdict in (Verdict.SUBMODULAR, Verdict.MODULAR)


def _evaluate(f, x_grid, theta_grid):
    X, T = np.meshgrid(np.asarray(x_grid, float), np.asarray(theta_grid, float), indexing="ij")
    return np.asarray(f(X, T), float) * np.ones_like(X)


def check_log_supermodular(f: Callable, x_grid, theta_grid, tol=REL_TOL, *, log_scale=True,
                           audit=AUDIT_RECTANGLES, seed=0) -> LatticeVerdict:
    """Classify log f (or f itself with ``log_scale=False``) on the grid.

    The test runs on each connected component of the mask {f > 0} using
    adjacent 2x2 mixed differences; a seeded audit of random rectangles inside
    each component cross-checks the adjacent test.  The verdicts of all
    components are combined by conjunction.
    """
    x = np.asarray(x_grid, float)
    t = np.asarray(theta_grid, float)
    F = _evaluate(f, x, t)
    return lattice_verdict(F, x, t, tol, log_scale=log_scale, audit=audit, seed=seed)


def lattice_verdict(F, x, t, tol=REL_TOL, *, log_scale=True, audit=AUDIT_RECTANGLES, seed=0):
    """Verdict for tabulated values F[i, j] = f(x[i], theta[j])."""
    F = np.asarray(F, float)
    if log_scale:
        mask = np.isfinite(F) & (F > 0)
        L = np.full(F.shape, np.nan)
        L[mask] = np.log(F[mask])
    else:
        mask = np.isfinite(F)
        L = np.where(mask, F, np.nan)
    if not mask.any():
        raise EmptyMask("f <= 0 on the whole grid")
    labels, ncomp = ndimage.label(mask)
    # mixed differences over 2x2 cells fully inside one component
    D = L[1:, 1:] - L[1:, :-1] - L[:-1, 1:] + L[:-1, :-1]
    scale = (np.abs(L[1:, 1:]) + np.abs(L[1:, :-1]) + np.abs(L[:-1, 1:]) + np.abs(L[:-1, :-1]))
    cell = (mask[1:, 1:] & mask[1:, :-1] & mask[:-1, 1:] & mask[:-1, :-1])
    same = cell & (labels[1:, 1:] == labels[:-1, :-1])
    thr = tol * (1.0 + scale)
    d = np.where(same, D, 0.0)
    thr = np.where(same, thr, np.inf)
    pos = d > thr
    neg = d < -thr
    rng = np.random.default_rng(seed)
    audit_pos, audit_neg = _audit(L, mask, labels, ncomp, audit, rng, tol)
    if audit_neg is not None:
        i0, i1, j0, j1 = audit_neg
        audit_neg = (float(x[i0]), float(x[i1]), float(t[j0]), float(t[j1]))
    any_pos = pos.any() or audit_pos is not None
    any_neg = neg.any() or audit_neg is not None
    tested = same.any()

    def witness(flags, audit_w):
        if flags.any():
            i, j = np.argwhere(flags)[0]
            return (float(x[i]), float(x[i + 1]), float(t[j]), float(t[j + 1]))
        return audit_w

    domain = f"{int(mask.sum())} of {mask.size} grid points in {ncomp} component(s) of the mask"
    if any_pos and any_neg:
        return LatticeVerdict(Verdict.NEITHER, False, witness(neg, audit_neg), domain, ncomp)
    if any_pos:
        strict = bool(tested and np.all(d[same] > STRICT_MARGIN * (1.0 + scale[same])))
        return LatticeVerdict(Verdict.SUPERMODULAR, strict, None, domain, ncomp)
    if any_neg:
        strict = bool(tested and np.all(d[same] < -STRICT_MARGIN * (1.0 + scale[same])))
        return LatticeVerdict(Verdict.SUBMODULAR, strict, None, domain, ncomp)
    return LatticeVerdict(Verdict.MODULAR, False, None, domain, ncomp)


def _audit(L, mask, labels, ncomp, n, rng, tol):
    """Random full rectangles inside single mask components; first violating ones by sign."""
    if n <= 0:
        return None, None
    nx, nt = L.shape
    i = rng.integers(0, nx, size=(n, 2))
    j = rng.integers(0, nt, size=(n, 2))
    i.sort(axis=1)
    j.sort(axis=1)
    ok = (i[:, 0] < i[:, 1]) & (j[:, 0] < j[:, 1])
    i, j = i[ok], j[ok]
    corners = [(i[:, 0], j[:, 0]), (i[:, 0], j[:, 1]), (i[:, 1], j[:, 0]), (i[:, 1], j[:, 1])]
    inside = np.all([mask[a, b] for a, b in corners], axis=0)
    lab = [labels[a, b] for a, b in corners]
    inside &= (lab[0] == lab[1]) & (lab[0] == lab[2]) & (lab[0] == lab[3])
    i, j = i[inside], j[inside]
    if len(i) == 0:
        return None, None
    v = L[i[:, 1], j[:, 1]] + L[i[:, 0], j[:, 0]] - L[i[:, 0], j[:, 1]] - L[i[:, 1], j[:, 0]]
    sc = (np.abs(L[i[:, 1], j[:, 1]]) + np.abs(L[i[:, 0], j[:, 0]])
          + np.abs(L[i[:, 0], j[:, 1]]) + np.abs(L[i[:, 1], j[:, 0]]))
    # rectangle sums of many cells accumulate rounding: scale tolerance by the cell count
    cells = (i[:, 1] - i[:, 0]) * (j[:, 1] - j[:, 0])
    thr = tol * (1.0 + sc) * np.sqrt(cells)
    first = lambda m: (None if not m.any() else tuple(int(q) for q in (
        i[m][0, 0], i[m][0, 1], j[m][0, 0], j[m][0, 1])))
    return first(v > thr), first(v < -thr)


def check_log_submodular(f, x_grid, theta_grid, tol=REL_TOL, **kw) -> LatticeVerdict:
    """Same lattice test; read the ``submodular`` flag of the verdict."""
    return check_log_supermodular(f, x_grid, theta_grid, tol, **kw)


def check_standard_Q(G: Callable, c: Callable, rho, x_grid, theta_grid, tol=REL_TOL,
                     **kw) -> LatticeVerdict:
    """Verdict for Q(x, theta) = rho G(theta) - c(x) on its positivity mask."""
    def Q(X, T):
        return rho * np.asarray(G(T), float) - np.asarray(c(X), float)
    return check_log_supermodular(Q, x_grid, theta_grid, tol, **kw)


@dataclass(frozen=True)
class MonotoneResult:
    monotone: bool
    witness: Optional[tuple] = None  # ((theta, x), (theta', x'))

    def __bool__(self):
        return self.monotone


def check_monotone_threshold_map(samples: Sequence, increasing=True, tol=0.0) -> MonotoneResult:
    """Whether theta -> X*(theta) is monotone in the set sense.

    ``samples`` is a theta-sorted sequence of ``(theta, iterable of x)``.
    Empty sets are skipped.  For the increasing test every x in X*(theta)
    must not exceed any x' in X*(theta') whenever theta <= theta'.
    """
    best = None  # (theta, extreme element seen so far)
    for theta, xs in samples:
        xs = sorted(float(v) for v in xs)
        if not xs:
            continue
        if best is not None:
            if increasing and xs[0] < best[1] - tol:
                return MonotoneResult(False, (best, (float(theta), xs[0])))
            if not increasing and xs[-1] > best[1] + tol:
                return MonotoneResult(False, (best, (float(theta), xs[-1])))
        edge = xs[-1] if increasing else xs[0]
        if best is None or (increasing and edge > best[1]) or (not increasing and edge < best[1]):
            best = (float(theta), edge)
    return MonotoneResult(True)
