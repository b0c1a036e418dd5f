"""Parameter bundles for the single-period SREC market.

Everything here is an immutable value type. ``MarketConfig.validate``
re-checks every constraint and reports all violations at once.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Union

import numpy as np

from .errors import ConfigError

Rate = Union[float, tuple]

DEFAULT_DT = 1.0 / 52.0
DEFAULT_DELTA = 0.05
SCHEME_DEFAULTS = {
    "dt": DEFAULT_DT,
    "x_nodes": 401,
    "epsilon": 1e-4,
    "max_iters": 200,
    "omega": 0.5,
    "quad_nodes": 41,
    "forward_moments": "exact",
}
# Gauss-Hermite weights underflow in double precision beyond this
MAX_QUAD_NODES = 350
RUN_DEFAULTS = {"seed": 0, "n_agents": 2000, "out_dir": "out"}


@dataclass(frozen=True)
class ComplianceParams:
    T: float
    P: float
    R: tuple
    delta: float = DEFAULT_DELTA
    periods: int = 1


@dataclass(frozen=True)
class SubPopulationParams:
    """One sub-population (class) of firms.

    ``h`` and ``sigma`` may be scalars or per-time-step sequences; the solver
    always works with the expanded per-step vectors.
    """

    pi: float
    h: Rate
    sigma: Rate
    zeta: float
    gamma: float
    nu0: float
    m0: float
    name: str = ""

    def h_path(self, m: int) -> np.ndarray:
        return _expand(self.h, m)

    def sigma_path(self, m: int) -> np.ndarray:
        return _expand(self.sigma, m)


@dataclass(frozen=True)
class DerivedCoefficients:
    eta: float
    gamma_tilde: float
    upsilon: float


@dataclass(frozen=True)
class ControlPair:
    g: float
    Gamma: float


@dataclass(frozen=True)
class SchemeSettings:
    dt: float = SCHEME_DEFAULTS["dt"]
    x_nodes: int = SCHEME_DEFAULTS["x_nodes"]
    epsilon: float = SCHEME_DEFAULTS["epsilon"]
    max_iters: int = SCHEME_DEFAULTS["max_iters"]
    omega: float = SCHEME_DEFAULTS["omega"]
    quad_nodes: int = SCHEME_DEFAULTS["quad_nodes"]
    forward_moments: str = SCHEME_DEFAULTS["forward_moments"]


@dataclass(frozen=True)
class RunSettings:
    seed: int = RUN_DEFAULTS["seed"]
    n_agents: int = RUN_DEFAULTS["n_agents"]
    out_dir: str = RUN_DEFAULTS["out_dir"]


@dataclass(frozen=True)
class MarketConfig:
    compliance: ComplianceParams
    classes: tuple
    scheme: SchemeSettings = field(default_factory=SchemeSettings)
    run: RunSettings = field(default_factory=RunSettings)
    defaults_applied: tuple = ()

    @property
    def K(self) -> int:
        return len(self.classes)

    @property
    def n_steps(self) -> int:
        return int(round(self.compliance.T / self.scheme.dt))

    @property
    def times(self) -> np.ndarray:
        return np.arange(self.n_steps + 1) * self.scheme.dt

    def with_(self, **changes) -> "MarketConfig":
        """Return a copy with top-level or nested fields replaced.

        Nested keys use a double underscore, e.g. ``scheme__omega=1.0``.
        """
        top = {}
        nested: dict = {}
        for key, value in changes.items():
            if "__" in key:
                section, name = key.split("__", 1)
                nested.setdefault(section, {})[name] = value
            else:
                top[key] = value
        for section, values in nested.items():
            top[section] = replace(getattr(self, section), **values)
        return replace(self, **top)

    def validate(self) -> "MarketConfig":
        problems = validation_problems(self)
        if problems:
            raise ConfigError(problems)
        return self


def _expand(value: Rate, m: int) -> np.ndarray:
    arr = np.asarray(value, dtype=float)
    if arr.ndim == 0:
        return np.full(m, float(arr))
    if arr.shape != (m,):
        raise ConfigError(f"per-step vector has length {arr.size}, expected {m}")
    return arr.copy()


def _finite(x) -> bool:
    return bool(np.all(np.isfinite(np.asarray(x, dtype=float))))


def validation_problems(cfg: MarketConfig) -> list:
    """Every violated constraint, each naming its config key."""
    out = []
    c = cfg.compliance
    if not (_finite(c.T) and c.T > 0):
        out.append(f"compliance.T must be finite and > 0 (got {c.T})")
    # P = 0 is admitted as the penalty-free limit of the market
    if not (_finite(c.P) and c.P >= 0):
        out.append(f"compliance.P must be finite and >= 0 (got {c.P})")
    if not (_finite(c.delta) and c.delta > 0):
        out.append(f"compliance.delta must be finite and > 0 (got {c.delta})")
    if c.periods != 1:
        out.append(f"compliance.periods must be 1 (single-period model, got {c.periods})")
    if not cfg.classes:
        out.append("at least one [class.<k>] section is required")
    if len(c.R) != len(cfg.classes):
        out.append(f"compliance.R has {len(c.R)} entries for {len(cfg.classes)} classes")
    for k, r in enumerate(c.R):
        if not (_finite(r) and r >= 0):
            out.append(f"compliance.R[{k + 1}] must be finite and >= 0 (got {r})")

    s = cfg.scheme
    if not (_finite(s.dt) and s.dt > 0):
        out.append(f"scheme.dt must be > 0 (got {s.dt})")
    elif _finite(c.T) and c.T > 0:
        ratio = c.T / s.dt
        if abs(ratio - round(ratio)) > 1e-9 * max(1.0, ratio) or round(ratio) < 1:
            out.append(f"scheme.dt={s.dt} does not divide compliance.T={c.T}")
    if int(s.x_nodes) != s.x_nodes or s.x_nodes < 16:
        out.append(f"scheme.x_nodes must be an integer >= 16 (got {s.x_nodes})")
    if not (_finite(s.epsilon) and s.epsilon > 0):
        out.append(f"scheme.epsilon must be > 0 (got {s.epsilon})")
    if int(s.max_iters) != s.max_iters or s.max_iters < 1:
        out.append(f"scheme.max_iters must be a positive integer (got {s.max_iters})")
    if not (_finite(s.omega) and 0 < s.omega <= 1):
        out.append(f"scheme.omega must lie in (0, 1] (got {s.omega})")
    if int(s.quad_nodes) != s.quad_nodes or not 2 <= s.quad_nodes <= MAX_QUAD_NODES:
        out.append(f"scheme.quad_nodes must be an integer in [2, {MAX_QUAD_NODES}] (got {s.quad_nodes})")
    if s.forward_moments not in ("exact", "hermite"):
        out.append(f"scheme.forward_moments must be 'exact' or 'hermite' (got {s.forward_moments!r})")

    r = cfg.run
    if int(r.seed) != r.seed or r.seed < 0:
        out.append(f"run.seed must be a non-negative integer (got {r.seed})")
    if int(r.n_agents) != r.n_agents or r.n_agents < 1:
        out.append(f"run.n_agents must be a positive integer (got {r.n_agents})")

    m = None
    if not any(p.startswith(("scheme.dt", "compliance.T")) for p in out):
        m = cfg.n_steps
    pis = []
    for k, p in enumerate(cfg.classes):
        key = f"class.{p.name or k + 1}"
        pis.append(p.pi)
        if not (_finite(p.pi) and 0 < p.pi < 1) and not (len(cfg.classes) == 1 and p.pi == 1):
            out.append(f"{key}.pi must lie in (0, 1) (got {p.pi})")
        for nm in ("h", "sigma"):
            v = np.asarray(getattr(p, nm), dtype=float)
            if not _finite(v):
                out.append(f"{key}.{nm} must be finite")
            elif nm == "h" and np.any(v < 0):
                out.append(f"{key}.h must be >= 0")
            elif nm == "sigma" and np.any(v <= 0):
                out.append(f"{key}.sigma must be > 0")
            if v.ndim == 1 and m is not None and v.size != m:
                out.append(f"{key}.{nm} has {v.size} per-step values, expected {m}")
        for nm in ("zeta", "gamma"):
            v = getattr(p, nm)
            if not (_finite(v) and v > 0):
                out.append(f"{key}.{nm} must be > 0 (got {v})")
        if not _finite(p.nu0):
            out.append(f"{key}.nu0 must be finite")
        if not (_finite(p.m0) and p.m0 >= 0):
            out.append(f"{key}.m0 must be >= 0 (got {p.m0})")
    if pis and _finite(pis) and abs(math.fsum(pis) - 1.0) > 1e-9:
        names = ", ".join(f"class.{p.name or k + 1}" for k, p in enumerate(cfg.classes))
        out.append(
            f"population fractions pi of {names} sum to {math.fsum(pis):.12g}; "
            "class proportions must be normalised to sum to 1"
        )
    return out


def base_scenario_config(**scheme) -> MarketConfig:
    """The two-class base scenario (T=1, P=1, R=1, weekly steps)."""
    classes = (
        SubPopulationParams(pi=0.25, h=0.2, sigma=0.1, zeta=1.75, gamma=1.25, nu0=0.6, m0=0.1, name="1"),
        SubPopulationParams(pi=0.75, h=0.5, sigma=0.15, zeta=1.25, gamma=1.75, nu0=0.2, m0=0.1, name="2"),
    )
    cfg = MarketConfig(
        compliance=ComplianceParams(T=1.0, P=1.0, R=(1.0, 1.0), delta=DEFAULT_DELTA),
        classes=classes,
        scheme=SchemeSettings(**scheme),
    )
    return cfg.validate()


def single_class_config(**kw) -> MarketConfig:
    """Convenience one-class market; keyword overrides hit the class fields."""
    base = dict(pi=1.0, h=0.5, sigma=0.15, zeta=1.25, gamma=1.75, nu0=0.2, m0=0.1, name="1")
    comp = dict(T=1.0, P=1.0, R=(1.0,), delta=DEFAULT_DELTA)
    scheme = {}
    for key, value in kw.items():
        if key in base:
            base[key] = value
        elif key in comp:
            comp[key] = value
        else:
            scheme[key] = value
    cfg = MarketConfig(
        compliance=ComplianceParams(**comp),
        classes=(SubPopulationParams(**base),),
        scheme=SchemeSettings(**scheme),
    )
    return cfg.validate()
