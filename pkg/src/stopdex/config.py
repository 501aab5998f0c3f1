"""Line-based problem files: ``[section]`` headers, ``key = value`` pairs, ``#`` comments.

Values stay strings until a command asks for a number, a list or an
expression.  A ``[constants]`` section defines named numbers that every
expression may use.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

from .errors import StopdexError
from .expression import Compiled, ExpressionError

SECTIONS = {
    "diffusion": {"sigma2", "mu", "domain", "boundaries", "atoms", "start"},
    "reward": {"G", "G_theta", "c", "c_theta", "theta_range"},
    "discount": {"rho"},
    "numerics": {"n_points", "truncation", "tol", "theta_points", "x_points", "x_range", "side"},
    "inverse": {"V", "V_prime", "G", "G_theta", "c", "E", "E_prime", "U", "U_theta", "U_x",
                "theta_star", "theta_range", "start", "side", "x_range", "x_points",
                "r_at_start", "extension_theta_star", "extension_range", "extension_mode",
                "round_trip_theta"},
    "simulate": {"n_paths", "dt", "t_max", "seed", "antithetic", "rule", "theta", "block"},
    "constants": None,  # free-form names
}


class ConfigError(StopdexError):
    pass


@dataclass
class ProblemConfig:
    sections: dict = field(default_factory=dict)
    path: str = "<string>"

    @property
    def constants(self):
        return {k: float(v) for k, v in self.sections.get("constants", {}).items()}

    def has(self, section, key):
        return key in self.sections.get(section, {})

    def raw(self, section, key, default=None, required=False):
        sec = self.sections.get(section, {})
        if key not in sec:
            if required:
                raise ConfigError(f"{self.path}: missing [{section}] {key}")
            return default
        return sec[key]

    def number(self, section, key, default=None, required=False):
        v = self.raw(section, key, None, required)
        if v is None:
            return default
        return _number(v, self.constants, f"[{section}] {key}")

    def integer(self, section, key, default=None, required=False):
        v = self.number(section, key, None, required)
        if v is None:
            return default
        if v != int(v):
            raise ConfigError(f"[{section}] {key} must be an integer, got {v}")
        return int(v)

    def numbers(self, section, key, default=None, required=False, count=None):
        v = self.raw(section, key, None, required)
        if v is None:
            return default
        out = tuple(_number(p, self.constants, f"[{section}] {key}") for p in v.split(","))
        if count is not None and len(out) != count:
            raise ConfigError(f"[{section}] {key} needs {count} comma-separated values, got {len(out)}")
        return out

    def words(self, section, key, default=None, count=None):
        v = self.raw(section, key, None)
        if v is None:
            return default
        out = tuple(p.strip() for p in v.split(","))
        if count is not None and len(out) != count:
            raise ConfigError(f"[{section}] {key} needs {count} comma-separated values")
        return out

    def flag(self, section, key, default=False):
        v = self.raw(section, key)
        if v is None:
            return default
        low = v.strip().lower()
        if low in ("true", "yes", "1"):
            return True
        if low in ("false", "no", "0"):
            return False
        raise ConfigError(f"[{section}] {key} must be true or false, got {v!r}")

    def expression(self, section, key, required=False, allow=("x", "theta")):
        v = self.raw(section, key, None, required)
        if v is None:
            return None
        try:
            expr = Compiled(v, self.constants)
        except ExpressionError as exc:
            raise ConfigError(f"[{section}] {key}: {exc}") from exc
        extra = {n for n in expr.names if n in ("x", "theta")} - set(allow)
        if extra:
            raise ConfigError(f"[{section}] {key} may not depend on {', '.join(sorted(extra))}")
        return expr


def _number(text, constants, what):
    text = text.strip()
    low = text.lower()
    if low in ("inf", "+inf", "infinity"):
        return math.inf
    if low in ("-inf", "-infinity"):
        return -math.inf
    try:
        return float(text)
    except ValueError:
        pass
    try:
        expr = Compiled(text, constants)
    except ExpressionError as exc:
        raise ConfigError(f"{what}: {exc}") from exc
    if expr.names & {"x", "theta"}:
        raise ConfigError(f"{what} must be a number, got an expression in x/theta")
    return float(expr())


def parse_config(text: str, path="<string>") -> ProblemConfig:
    sections = {}
    current = None
    for lineno, line in enumerate(text.splitlines(), 1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if body.startswith("[") and body.endswith("]"):
            name = body[1:-1].strip()
            if name not in SECTIONS:
                raise ConfigError(f"{path}:{lineno}: unknown section [{name}]")
            current = sections.setdefault(name, {})
            continue
        if "=" not in body:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
        if current is None:
            raise ConfigError(f"{path}:{lineno}: key outside any section")
        key, value = (p.strip() for p in body.split("=", 1))
        allowed = SECTIONS[name]
        if allowed is not None and key not in allowed:
            raise ConfigError(f"{path}:{lineno}: unknown key {key!r} in [{name}]")
        if key in current:
            raise ConfigError(f"{path}:{lineno}: duplicate key {key!r} in [{name}]")
        if not value:
            raise ConfigError(f"{path}:{lineno}: empty value for {key!r}")
        current[key] = value
    cfg = ProblemConfig(sections, path)
    for k, v in sections.get("constants", {}).items():
        if k in ("x", "theta", "pi", "e"):
            raise ConfigError(f"{path}: constant name {k!r} is reserved")
        try:
            float(v)
        except ValueError:
            raise ConfigError(f"{path}: constant {k} must be a number, got {v!r}") from None
    return cfg


def load_config(path) -> ProblemConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from exc
    return parse_config(text, str(path))
