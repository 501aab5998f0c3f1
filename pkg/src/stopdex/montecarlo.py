"""Euler-Maruyama oracle for discounted rewards under simple stopping rules.

Paths are simulated in blocks; block ``b`` draws from a Philox generator
keyed by ``SeedSequence(seed, spawn_key=(b,))``, so results do not depend on
how blocks are scheduled across threads.  With antithetic sampling each block
holds pairs driven by ``+dW`` and ``-dW`` and the pair average is the sampling
unit for the standard error.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from ._numerics import worker_count
from .diffusion_core import Boundary, DiffusionSpec
from .errors import AtomUnsupported, InvalidRule
from .forward_solver import RewardFamily


@dataclass(frozen=True)
class SimConfig:
    n_paths: int = 100_000
    dt: float = 1e-3
    t_max: float = 20.0
    seed: int = 0
    antithetic: bool = True
    block: int = 20_000
    bias_tol: float = 1e-3
    threads: Optional[int] = None

    def __post_init__(self):
        if self.n_paths < 2 or self.dt <= 0 or self.t_max <= 0:
            raise ValueError("need n_paths >= 2, dt > 0 and t_max > 0")


@dataclass(frozen=True)
class SimEstimate:
    mean: float
    stderr: float
    n_effective: int
    truncation_bias_bound: float
    warnings: tuple = field(default=())


@dataclass(frozen=True)
class Rule:
    """``kind`` is 'stop' (stop at once), 'never' or 'hit' (first passage to ``level``)."""

    kind: str
    level: Optional[float] = None

    @classmethod
    def stop_now(cls):
        return cls("stop")

    @classmethod
    def never(cls):
        return cls("never")

    @classmethod
    def hit(cls, z):
        return cls("hit", float(z))

    @classmethod
    def parse(cls, rule):
        if isinstance(rule, Rule):
            return rule
        if isinstance(rule, str):
            if rule in ("stop", "never"):
                return cls(rule)
            raise InvalidRule(f"unknown rule {rule!r}")
        return cls.hit(rule)


def _check_spec(spec: DiffusionSpec):
    if spec.atoms:
        raise AtomUnsupported("sticky points cannot be simulated")


def _check_level(spec, z):
    d = spec.domain
    inside = d.left < z < d.right
    at_end = (z == d.left and d.left_behavior.accessible) or (z == d.right and d.right_behavior.accessible)
    if not (math.isfinite(z) and (inside or at_end)):
        raise InvalidRule(f"level {z} is outside the domain [{d.left}, {d.right}]")


def _block_sizes(cfg):
    n = cfg.n_paths
    if cfg.antithetic:
        n -= n % 2
    sizes = []
    while n > 0:
        m = min(cfg.block, n)
        if cfg.antithetic:
            m -= m % 2
        sizes.append(m)
        n -= m
    return sizes


def _run_block(b, m, spec, rho, c, x0, level, payoff, cfg):
    """Per-unit discounted totals and the number still running at t_max.

    Units are single paths, or antithetic pairs (averaged) when enabled.
    """
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(cfg.seed, spawn_key=(b,))))
    dom = spec.domain
    dt = cfg.dt
    sq = math.sqrt(dt)
    n_steps = int(math.ceil(cfg.t_max / dt))
    pairs = 2 if cfg.antithetic else 1
    units = m // pairs
    # state arrays have shape (pairs, active units); finished paths are frozen by `alive`
    x = np.full((pairs, units), float(x0))
    alive = np.ones((pairs, units), bool)
    total = np.zeros((pairs, units))
    ids = np.arange(units)
    out = np.zeros((pairs, units))
    lower = level is not None and x0 > level
    c_prev = c(x) if c is not None else None
    disc = 1.0
    step_disc = math.exp(-rho * dt)
    for k in range(n_steps):
        z = rng.standard_normal(len(ids))
        dW = np.stack([z, -z]) if pairs == 2 else z[None, :]
        xn = x + spec.mu(x) * dt + np.sqrt(np.maximum(spec.sigma2(x), 0.0)) * sq * dW
        disc_n = disc * step_disc
        ended = np.zeros_like(alive)
        # endpoint handling
        for side, edge, beh in (("left", dom.left, dom.left_behavior), ("right", dom.right, dom.right_behavior)):
            if not math.isfinite(edge):
                continue
            crossed = (xn <= edge) if side == "left" else (xn >= edge)
            crossed &= alive
            if not crossed.any():
                continue
            if beh in (Boundary.REFLECTING, Boundary.INACCESSIBLE):
                xn = np.where(crossed, 2 * edge - xn, xn)
            else:
                if beh is Boundary.ABSORBING and c is not None:
                    ca = float(c(np.array(edge)))
                    total += np.where(crossed, disc_n * ca / rho, 0.0)
                xn = np.where(crossed, edge, xn)
                ended |= crossed
        if c is not None:
            c_new = c(xn)
            total += np.where(alive, 0.5 * dt * (disc * c_prev + disc_n * c_new), 0.0)
            c_prev = c_new
        if level is not None:
            hit = alive & ~ended & ((xn <= level) if lower else (xn >= level))
            total += np.where(hit, disc_n * payoff, 0.0)
            ended |= hit
        x = xn
        alive &= ~ended
        disc = disc_n
        if not alive.any():
            break
        if k % 64 == 63:
            keep = alive.any(axis=0)
            if not keep.all():
                out[:, ids[~keep]] = total[:, ~keep]
                x, alive, total, ids = x[:, keep], alive[:, keep], total[:, keep], ids[keep]
                if c_prev is not None:
                    c_prev = c_prev[:, keep]
    out[:, ids] = total
    running = int(alive.sum())
    # what a path still running at t_max could add, before discounting: the payoff
    # plus a perpetuity at its current running rate (a heuristic for unbounded c)
    tail = running * abs(payoff) if level is not None else 0.0
    if running and c is not None:
        tail += float(np.sum(np.abs(c_prev[alive]))) / rho
    return out.mean(axis=0), running, tail


def _simulate(spec, rho, c, x0, level, payoff, cfg: SimConfig) -> SimEstimate:
    sizes = _block_sizes(cfg)
    threads = cfg.threads or worker_count()
    jobs = [(b, m) for b, m in enumerate(sizes)]
    run = lambda job: _run_block(job[0], job[1], spec, rho, c, x0, level, payoff, cfg)
    if threads > 1 and len(jobs) > 1:
        with ThreadPoolExecutor(max_workers=min(threads, len(jobs))) as pool:
            results = list(pool.map(run, jobs))
    else:
        results = [run(j) for j in jobs]
    vals = np.concatenate([r[0] for r in results])
    tail = sum(r[2] for r in results)
    bias = math.exp(-rho * cfg.t_max) * tail / sum(sizes)
    warns = ()
    if bias > cfg.bias_tol:
        warns = (f"truncation bias bound {bias:.3g} exceeds {cfg.bias_tol:.3g}; raise t_max",)
    n = len(vals)
    stderr = float(np.std(vals, ddof=1) / math.sqrt(n)) if n > 1 else 0.0
    return SimEstimate(float(np.mean(vals)), stderr, n, bias, warns)


def simulate_value(spec: DiffusionSpec, reward: RewardFamily, theta, rule, cfg: SimConfig = SimConfig(),
                   rho: Optional[float] = None) -> SimEstimate:
    """Discounted running reward up to the stopping time plus the discounted terminal reward.

    ``rule`` is a Rule, 'stop', 'never' or a level z (stop on first passage).
    The terminal reward is G(z, theta), paid at the first grid time beyond z.
    """
    _check_spec(spec)
    if rho is None:
        raise ValueError("rho is required")
    rule = Rule.parse(rule)
    x0 = spec.start
    c = reward.running(theta)
    if rule.kind == "stop":
        return SimEstimate(float(reward.G_of(np.array(x0), theta)), 0.0, cfg.n_paths, 0.0)
    level = None
    payoff = 0.0
    if rule.kind == "hit":
        _check_level(spec, rule.level)
        payoff = float(reward.G_of(np.array(rule.level), theta))
        if rule.level == x0:
            return SimEstimate(payoff, 0.0, cfg.n_paths, 0.0)
        level = rule.level
    elif rule.kind != "never":
        raise InvalidRule(f"unknown rule {rule.kind!r}")
    return _simulate(spec, rho, c, x0, level, payoff, cfg)


def simulate_hitting_laplace(spec: DiffusionSpec, rho, x, y, cfg: SimConfig = SimConfig()) -> SimEstimate:
    """Estimate E_x[exp(-rho H_y)]; paths still running at t_max count as zero."""
    _check_spec(spec)
    _check_level(spec, x)
    _check_level(spec, y)
    if x == y:
        return SimEstimate(1.0, 0.0, cfg.n_paths, 0.0)
    return _simulate(spec, rho, None, x, y, 1.0, cfg)
