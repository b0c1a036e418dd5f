"""Empirical epsilon-Nash audit of the equilibrium controls.

A tagged agent departs from the mean-field controls while everyone else
keeps them; the finite market clears with the deviant's trades included.
The best improvement found over a parametric deviation family is a lower
bound on the true deviation gain.
"""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import RefusalError
from .model import path_cost
from .simulate import _Market, agent_normals, class_sizes, replay

GAIN_LABEL = "lower bound on deviation gain"


@dataclass(frozen=True)
class DeviationFamily:
    """Open-loop perturbations (F, m) added to the deviant's g and Gamma."""

    labels: tuple
    shift_g: np.ndarray
    shift_Gamma: np.ndarray

    def __len__(self):
        return len(self.labels)

    def describe(self) -> str:
        return f"{len(self)} perturbations: " + ", ".join(self.labels)


def deviation_family(m, shifts=(-0.2, -0.1, 0.0, 0.1, 0.2), bump=0.5, n_bumps=5, include_zero=True):
    """Constant shifts (a, b) on a grid plus single-step bumps of +-``bump``
    to g and to Gamma at ``n_bumps`` evenly spaced steps."""
    labels, sg, sG = [], [], []
    for a in shifts:
        for b in shifts:
            if a == 0 and b == 0 and not include_zero:
                continue
            labels.append(f"shift(a={a:g},b={b:g})")
            sg.append(np.full(m, float(a)))
            sG.append(np.full(m, float(b)))
    for j in np.linspace(0, m - 1, n_bumps).round().astype(int) if n_bumps else []:
        for sign in (1.0, -1.0):
            for target in ("g", "Gamma"):
                e = np.zeros(m)
                e[j] = sign * bump
                labels.append(f"bump({target},{sign * bump:+g},step={j})")
                sg.append(e if target == "g" else np.zeros(m))
                sG.append(e if target == "Gamma" else np.zeros(m))
    return DeviationFamily(tuple(labels), np.array(sg), np.array(sG))


def zero_family(m) -> DeviationFamily:
    return DeviationFamily(("shift(a=0,b=0)",), np.zeros((1, m)), np.zeros((1, m)))


@dataclass
class GainEstimate:
    """Best improvement over the family and, separately, over its non-zero
    members; the latter shows how close any real deviation comes."""

    N: int
    k: int
    gain: float
    se: float
    best: str
    mean_diff: np.ndarray
    nonzero_gain: float
    nonzero_se: float
    nonzero_best: str
    paired_var: float
    unpaired_var: float

    @property
    def crn_effective(self) -> bool:
        """Pairing shrinks the variance of the best non-zero arm's difference."""
        return self.paired_var < self.unpaired_var


def _require_converged(solution):
    if not solution.converged:
        raise RefusalError(
            f"solution did not converge (residual {solution.final_residual:.3e}); see diagnostics.json"
        )


def deviant_costs(solution, N, k, family: DeviationFamily, seed) -> np.ndarray:
    """Realised cost of agent 0 of class ``k`` under every family member, for one seed."""
    cfg = solution.config
    sizes = class_sizes(N, [p.pi for p in cfg.classes])
    if sizes[k] == 0:
        raise RefusalError(f"class {k + 1} has no agents at N={N}")
    market = _Market(solution, sizes)
    m = solution.grid.m
    normals = agent_normals(seed, sizes, m + 1)
    dev = int(sum(sizes[:k]))
    x, g, G, s, _ = replay(market, normals, shift_g=family.shift_g, shift_Gamma=family.shift_Gamma, deviant=dev)
    return path_cost(k, g[:, :, dev], G[:, :, dev], s, x[m, :, dev], cfg)


def deviation_gain(solution, N, k, family: DeviationFamily, seeds, *, workers=1) -> GainEstimate:
    """Best seed-averaged improvement over the family, with paired standard error.

    The undeviated cost comes from the family's (0, 0) member when present
    and from an extra paired run otherwise, so every difference is computed
    on common random numbers.
    """
    _require_converged(solution)
    seeds = list(seeds)
    zero = [i for i, (a, b) in enumerate(zip(family.shift_g, family.shift_Gamma)) if not a.any() and not b.any()]
    if zero:
        fam, i0 = family, zero[0]
    else:
        fam = DeviationFamily(
            ("shift(a=0,b=0)",) + family.labels,
            np.vstack([np.zeros((1, family.shift_g.shape[1])), family.shift_g]),
            np.vstack([np.zeros((1, family.shift_Gamma.shape[1])), family.shift_Gamma]),
        )
        i0 = 0

    def one(seed):
        return deviant_costs(solution, N, k, fam, seed)

    if workers and workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as ex:
            J = np.array(list(ex.map(one, seeds)))
    else:
        J = np.array([one(s) for s in seeds])
    n = len(seeds)
    ddof = 1 if n > 1 else 0

    def stats(cols):
        diff = J[:, [i0]] - J[:, cols]
        mean = diff.mean(axis=0)
        b = int(np.argmax(mean))
        se = float(diff[:, b].std(ddof=ddof) / math.sqrt(n)) if n > 1 else 0.0
        return mean, b, se, diff[:, b], cols[b]

    keep = [i for i in range(len(fam)) if zero or i != i0]
    mean, _, se, _, col = stats(keep)
    nz = [i for i in range(len(fam)) if i != i0 and i not in zero]
    if nz:
        nz_mean, b, nz_se, nz_diff, nz_col = stats(nz)
        nz_gain, nz_label = float(nz_mean[b]), fam.labels[nz_col]
        paired = float(nz_diff.var(ddof=ddof))
        unpaired = float(J[:, i0].var(ddof=ddof) + J[:, nz_col].var(ddof=ddof))
    else:
        nz_gain, nz_se, nz_label, paired, unpaired = float("nan"), float("nan"), "", 0.0, 0.0
    return GainEstimate(
        N=int(N), k=int(k), gain=float(mean.max()), se=se, best=fam.labels[col], mean_diff=mean,
        nonzero_gain=nz_gain, nonzero_se=nz_se, nonzero_best=nz_label,
        paired_var=paired, unpaired_var=unpaired,
    )


@dataclass
class DeviationReport:
    Ns: list
    classes: list
    gains: dict
    family: str
    seeds: list
    label: str = GAIN_LABEL
    checks: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "label": self.label,
            "N": self.Ns,
            "family": self.family,
            "seeds": self.seeds,
            "classes": {
                f"k{k + 1}": [
                    {"N": e.N, "gain": e.gain, "se": e.se, "best": e.best,
                     "nonzero_gain": e.nonzero_gain, "nonzero_se": e.nonzero_se,
                     "nonzero_best": e.nonzero_best,
                     "paired_var": e.paired_var, "unpaired_var": e.unpaired_var}
                    for e in self.gains[k]
                ]
                for k in self.classes
            },
            "checks": self.checks,
        }


def nonincreasing_within_error(gains, ses, z=2.0) -> bool:
    """Each estimate may exceed its predecessor by at most ``z`` combined standard errors."""
    return all(
        gains[i + 1] <= gains[i] + z * math.hypot(ses[i], ses[i + 1]) for i in range(len(gains) - 1)
    )


def log_slope(Ns, gains, ses):
    """Least-squares slope of log(max(gain, 0) + se) against log N."""
    y = np.log(np.maximum(np.asarray(gains), 0.0) + np.asarray(ses))
    return float(np.polyfit(np.log(np.asarray(Ns, dtype=float)), y, 1)[0])


def audit(solution, Ns, seeds, *, classes=None, family=None, workers=1) -> DeviationReport:
    """Deviation gains for each class across population sizes, with trend checks."""
    _require_converged(solution)
    m = solution.grid.m
    family = family or deviation_family(m)
    classes = list(range(solution.config.K)) if classes is None else list(classes)
    seeds = list(seeds)
    gains, checks = {}, {}
    for k in classes:
        est = [deviation_gain(solution, N, k, family, seeds, workers=workers) for N in Ns]
        gains[k] = est
        g = [e.gain for e in est]
        se = [e.se for e in est]
        c = {
            "nonincreasing_within_2se": nonincreasing_within_error(g, se),
            "crn_variance_reduction": all(e.crn_effective for e in est if e.paired_var > 0),
        }
        if len(Ns) > 1 and all(e.gain > 2 * e.se for e in est):
            c["log_slope"] = log_slope(Ns, g, se)
            c["log_slope_negative"] = c["log_slope"] < 0
        checks[f"k{k + 1}"] = c
    return DeviationReport(
        Ns=[int(n) for n in Ns], classes=classes, gains=gains, family=family.describe(),
        seeds=[int(s) for s in seeds], checks=checks,
    )


@dataclass(frozen=True)
class ProbeResult:
    control: str
    k: int
    j: int
    x: float
    derivative: float
    se: float
    shift: float = 0.0
    resolution: float = 0.0

    def passes(self, z=3.0, expected=0.0, atol=1e-8) -> bool:
        # a sample with no spread cannot see events rarer than about 3/n;
        # ``resolution`` bounds what such events could contribute
        floor = self.resolution if self.se == 0 else 0.0
        return abs(self.derivative - expected) <= z * self.se + max(atol, floor)


def _probe_costs(solution, k, j, x0, normals, bump_g, bump_Gamma):
    """Cost from t_j onward of one agent started at x0, price fixed at the
    equilibrium path; ``bump_*`` are added to the controls on [t_j, t_j+dt)."""
    cfg = solution.config
    m = solution.grid.m
    dt = solution.grid.dt
    p = cfg.classes[k]
    h = p.h_path(m)
    sig = p.sigma_path(m)
    P = cfg.compliance.P
    surf = solution.surface
    n = normals.shape[1]
    g = np.empty((m, n))
    G = np.empty((m, n))
    g[:j] = h[:j, None]
    G[:j] = 0.0
    x = np.full(n, float(x0))
    for i in range(j, m):
        y = np.interp(x, surf.x, surf.y[k, i])
        gi = h[i] + P / p.zeta * y
        Gi = (P * y - solution.price[i]) / p.gamma
        if i == j:
            gi = np.maximum(gi + bump_g, 0.0)
            Gi = Gi + bump_Gamma
        g[i], G[i] = gi, Gi
        x = x + dt * (gi + Gi) + sig[i] * math.sqrt(dt) * normals[i - j]
    return path_cost(k, g, G, solution.price, x, cfg)


def optimality_probe(solution, k, probes=20, *, n_paths=20_000, h=1e-3, shift=0.0, control="g", seed=0):
    """Finite-difference derivative of the agent's expected cost along a
    one-step perturbation of ``control`` at random (t, x) probes.

    Derivatives are per unit of perturbation rate (scaled by 1/dt). The
    price path is held at its equilibrium value, both arms share their
    noise, and ``shift`` moves the base control off its optimum on the
    probed step first.
    """
    _require_converged(solution)
    if control not in ("g", "Gamma"):
        raise ValueError("control must be 'g' or 'Gamma'")
    rng = np.random.default_rng(seed)
    m = solution.grid.m
    dt = solution.grid.dt
    out = []
    for _ in range(probes):
        j = int(rng.integers(0, m))
        x = float(rng.normal(solution.flow.mean[k, j], math.sqrt(solution.flow.var[k, j])))
        normals = rng.standard_normal((m - j, n_paths))
        arms = []
        for sgn in (1.0, -1.0):
            b = shift + sgn * h
            arms.append(
                _probe_costs(solution, k, j, x, normals, b if control == "g" else 0.0, b if control == "Gamma" else 0.0)
            )
        d = (arms[0] - arms[1]) / (2.0 * h * dt)
        out.append(
            ProbeResult(
                control, k, j, x, float(d.mean()), float(d.std(ddof=1) / math.sqrt(n_paths)), shift,
                resolution=3.0 * solution.config.compliance.P / n_paths,
            )
        )
    return out
