"""Deterministic artifact files: CSV tables, JSON summaries and the run manifest.

Every file of one emission is first written to a temporary name in the
target directory and only renamed into place once all of them exist, so a
failure never leaves a half-written set behind. Floats use 17 significant
digits, which round-trip exactly.
"""
from __future__ import annotations

import csv
import hashlib
import io as _io
import json
import os
import tempfile

import numpy as np

from . import __version__
from .config import config_digest, dump_config, load_config
from .errors import ArtifactError, DimensionError, RefusalError
from .solver import EquilibriumSolution, GaussianFlow, SchemeGrid, ValueSurface, z_diagnostic

MANIFEST = "manifest.json"
DIAGNOSTICS = "diagnostics.json"
CONFIG = "config.cfg"


def fmt(v) -> str:
    return "%.17g" % v


def class_label(k: int) -> str:
    return f"k{k + 1}"


def parse_class(label: str) -> int:
    if not label.startswith("k"):
        raise ArtifactError(f"bad class label {label!r}")
    return int(label[1:]) - 1


def csv_text(header, rows) -> str:
    buf = _io.StringIO()
    buf.write(",".join(header) + "\n")
    for row in rows:
        buf.write(",".join(r if isinstance(r, str) else fmt(r) for r in row) + "\n")
    return buf.getvalue()


def json_text(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, default=_json_default, allow_nan=False) + "\n"


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    raise TypeError(f"cannot serialise {type(o).__name__}")


def sha256(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def write_atomic(out_dir, files: dict) -> dict:
    """Write ``{name: text_or_bytes}`` into ``out_dir`` all-or-nothing.

    Returns the sha256 of each file.
    """
    try:
        os.makedirs(out_dir, exist_ok=True)
    except OSError as exc:
        raise ArtifactError(f"cannot create output directory {out_dir}: {exc.strerror or exc}") from None
    temps = {}
    sums = {}
    try:
        for name, data in files.items():
            raw = data.encode() if isinstance(data, str) else data
            fd, tmp = tempfile.mkstemp(prefix=f".{name}.", suffix=".tmp", dir=out_dir)
            temps[name] = tmp
            with os.fdopen(fd, "wb") as fh:
                fh.write(raw)
            sums[name] = sha256(raw)
    except OSError as exc:
        for tmp in temps.values():
            try:
                os.unlink(tmp)
            except OSError:
                pass
        raise ArtifactError(f"cannot write to {out_dir}: {exc.strerror or exc}") from None
    for name, tmp in temps.items():
        os.replace(tmp, os.path.join(out_dir, name))
    return sums


def update_manifest(out_dir, cfg, command: str, checksums: dict, seconds: float, extra=None):
    """Merge one subcommand's record into ``manifest.json``.

    The manifest is the only file carrying wall-clock timings; everything it
    checksums is byte-reproducible.
    """
    path = os.path.join(out_dir, MANIFEST)
    manifest = {}
    if os.path.exists(path):
        try:
            with open(path, encoding="utf-8") as fh:
                manifest = json.load(fh)
        except (OSError, ValueError):
            manifest = {}
    manifest["artifact_version"] = __version__
    manifest["config_digest"] = config_digest(cfg)
    manifest.setdefault("files", {}).update(checksums)
    manifest.setdefault("timings", {})[command] = round(seconds, 6)
    if extra:
        manifest.setdefault("records", {})[command] = extra
    write_atomic(out_dir, {MANIFEST: json_text(manifest)})
    return manifest


def verify_manifest(out_dir) -> list:
    """Names of files whose bytes no longer match the manifest checksums."""
    with open(os.path.join(out_dir, MANIFEST), encoding="utf-8") as fh:
        manifest = json.load(fh)
    bad = []
    for name, digest in sorted(manifest.get("files", {}).items()):
        p = os.path.join(out_dir, name)
        try:
            with open(p, "rb") as fh:
                if sha256(fh.read()) != digest:
                    bad.append(name)
        except OSError:
            bad.append(name)
    return bad


# solution artifacts

def solution_files(solution: EquilibriumSolution, with_z=False) -> dict:
    cfg = solution.config
    t = solution.grid.times
    x = solution.grid.x
    K = solution.surface.y.shape[0]
    files = {}
    files["price.csv"] = csv_text(("t", "s"), zip(t, solution.price))
    rows = []
    y, g, G = solution.surface.y, solution.g, solution.Gamma
    for j in range(t.size):
        for u in range(x.size):
            for k in range(K):
                rows.append((t[j], x[u], class_label(k), y[k, j, u], g[k, j, u], G[k, j, u]))
    files["surface.csv"] = csv_text(("t", "x", "class", "y", "g", "gamma"), rows)
    rows = [
        (t[j], class_label(k), solution.flow.mean[k, j], solution.flow.var[k, j])
        for j in range(t.size)
        for k in range(K)
    ]
    files["flow.csv"] = csv_text(("t", "class", "mean", "var"), rows)
    if with_z:
        z = z_diagnostic(solution)
        rows = [(t[j], x[u], class_label(k), z[k, j, u]) for j in range(t.size) for u in range(x.size) for k in range(K)]
        files["z.csv"] = csv_text(("t", "x", "class", "z"), rows)
    files[CONFIG] = dump_config(cfg)
    files[DIAGNOSTICS] = json_text(diagnostics(solution))
    return files


def diagnostics(solution) -> dict:
    cfg = solution.config
    d = {
        "converged": bool(solution.converged),
        "iterations": solution.iterations,
        "residuals": [float(r) for r in solution.residuals],
        "final_residual": float(solution.final_residual) if solution.residuals else None,
        "tolerance": float(solution.tolerance),
        "config_digest": config_digest(cfg),
        "defaults_applied": list(cfg.defaults_applied),
        "scheme": {k: getattr(cfg.scheme, k) for k in vars(cfg.scheme)},
    }
    d.update({k: v for k, v in solution.meta.items() if k not in d})
    if solution.converged and solution.flow is not None:
        d["compliance_probability"] = {
            class_label(k): float(p) for k, p in enumerate(solution.compliance_probability())
        }
        d["price_mean"] = float(np.mean(solution.price))
    return d


def emit_solution(solution: EquilibriumSolution, out_dir, *, with_z=False) -> dict:
    """Write the solution tables and diagnostics; returns file checksums."""
    if not solution.converged:
        raise RefusalError("only converged solutions are emitted; use emit_failure for diagnostics")
    return write_atomic(out_dir, solution_files(solution, with_z=with_z))


def emit_failure(cfg, residuals, out_dir, message, suggested_omega=None) -> dict:
    """Diagnostics for a solve that did not converge, so later steps can refuse it."""
    d = {
        "converged": False,
        "iterations": len(residuals),
        "residuals": [float(r) for r in residuals],
        "final_residual": float(residuals[-1]) if residuals else None,
        "tolerance": float(cfg.scheme.epsilon),
        "config_digest": config_digest(cfg),
        "defaults_applied": list(cfg.defaults_applied),
        "message": message,
        "suggested_omega": suggested_omega,
    }
    return write_atomic(out_dir, {DIAGNOSTICS: json_text(d), CONFIG: dump_config(cfg)})


def read_csv(path):
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise ArtifactError(f"cannot read {path}: {exc.strerror or exc}") from None
    return rows[0], rows[1:]


def load_solution(sol_dir, config=None) -> EquilibriumSolution:
    """Rebuild an :class:`EquilibriumSolution` from ``solve`` output.

    Refuses directories whose diagnostics report non-convergence, and
    configs that differ from the one the solution was computed for in
    anything but run settings.
    """
    diag_path = os.path.join(sol_dir, DIAGNOSTICS)
    try:
        with open(diag_path, encoding="utf-8") as fh:
            diag = json.load(fh)
    except (OSError, ValueError) as exc:
        raise ArtifactError(f"cannot read {diag_path}: {exc}") from None
    if not diag.get("converged", False):
        raise RefusalError(
            f"{diag_path} reports a non-converged solve "
            f"(residual {diag.get('final_residual')} > tolerance {diag.get('tolerance')}); refusing to use it"
        )
    cfg = load_config(os.path.join(sol_dir, CONFIG))
    if config is not None:
        a = dump_config(config.with_(run=cfg.run))
        b = dump_config(cfg)
        if a != b:
            raise RefusalError(f"config does not match the one used for the solution in {sol_dir}")
        cfg = config

    _, rows = read_csv(os.path.join(sol_dir, "price.csv"))
    t = np.array([float(r[0]) for r in rows])
    price = np.array([float(r[1]) for r in rows])
    _, rows = read_csv(os.path.join(sol_dir, "flow.csv"))
    K = cfg.K
    m1 = t.size
    mean = np.empty((K, m1))
    var = np.empty((K, m1))
    for i, r in enumerate(rows):
        j, k = divmod(i, K)
        if parse_class(r[1]) != k:
            raise DimensionError("flow.csv rows out of order")
        mean[k, j], var[k, j] = float(r[2]), float(r[3])
    _, rows = read_csv(os.path.join(sol_dir, "surface.csv"))
    d = len(rows) // (m1 * K)
    if d * m1 * K != len(rows):
        raise DimensionError("surface.csv does not match price.csv and the class count")
    arr = np.array([[float(r[1]), float(r[3]), float(r[4]), float(r[5])] for r in rows]).reshape(m1, d, K, 4)
    x = arr[0, :, 0, 0]
    y = np.transpose(arr[..., 1], (2, 0, 1)).copy()
    g = np.transpose(arr[..., 2], (2, 0, 1)).copy()
    G = np.transpose(arr[..., 3], (2, 0, 1)).copy()
    grid = SchemeGrid(dt=cfg.scheme.dt, times=t, x=x)
    return EquilibriumSolution(
        config=cfg, grid=grid, surface=ValueSurface(y=y, x=x, times=t), flow=GaussianFlow(mean, var),
        price=price, g=g, Gamma=G, residuals=list(diag["residuals"]), converged=True,
        tolerance=float(diag["tolerance"]),
        meta={k: diag[k] for k in ("omega", "quad_nodes", "forward_moments") if k in diag},
    )


# simulation artifacts

def simulation_files(runs, solution) -> dict:
    """Tables for a batch of finite-player runs sharing N."""
    K = solution.config.K
    t = solution.grid.times
    files = {}
    files["sim_price.csv"] = csv_text(
        ("seed", "t", "s"), [(str(r.seed), t[j], r.price[j]) for r in runs for j in range(t.size)]
    )
    dt = solution.grid.dt
    rows = []
    for r in runs:
        gen = dt * r.g.sum(axis=0)
        trd = dt * r.Gamma.sum(axis=0)
        R = np.asarray(solution.config.compliance.R)[r.classes]
        for i in range(r.N):
            rows.append((str(r.seed), str(i), class_label(int(r.classes[i])), r.x[0, i], r.x[-1, i],
                         gen[i], trd[i], str(int(r.x[-1, i] < R[i]))))
    files["sim_agents.csv"] = csv_text(
        ("seed", "agent", "class", "x0", "xT", "generation", "trading", "noncompliant"), rows
    )
    qs = (0.05, 0.25, 0.5, 0.75, 0.95)
    rows = []
    for r in runs:
        for j in range(t.size - 1):
            for k in range(K):
                sel = r.classes == k
                if not sel.any():
                    continue
                rows.append((str(r.seed), t[j], class_label(k), *np.quantile(r.g[j, sel], qs),
                             *np.quantile(r.Gamma[j, sel], qs)))
    head = ("seed", "t", "class") + tuple(f"g_q{int(q * 100):02d}" for q in qs) + tuple(
        f"gamma_q{int(q * 100):02d}" for q in qs
    )
    files["sim_controls.csv"] = csv_text(head, rows)
    rows = []
    for r in runs:
        for j in range(t.size):
            for k in range(K):
                xs = r.x[j, r.classes == k]
                if xs.size == 0:
                    continue
                rows.append((str(r.seed), t[j], class_label(k), xs.mean(), xs.var(ddof=1) if xs.size > 1 else 0.0,
                             solution.flow.mean[k, j], solution.flow.var[k, j]))
    files["sim_flow.csv"] = csv_text(("seed", "t", "class", "mean", "var", "flow_mean", "flow_var"), rows)
    nonc = np.array([r.noncompliance for r in runs])

    def per_agent(attr, k):
        # classes can be empty at very small N
        vals = [getattr(r, attr)[k] / r.sizes[k] for r in runs if r.sizes[k]]
        return float(np.mean(vals)) if vals else None

    def rate(v):
        return None if np.isnan(v) else float(v)

    summary = {
        "N": runs[0].N,
        "seeds": [r.seed for r in runs],
        "class_sizes": {class_label(k): int(n) for k, n in enumerate(runs[0].sizes)},
        "rounding": runs[0].meta["rounding"],
        "rng": runs[0].meta["rng"],
        "noncompliance_mean": {class_label(k): rate(nonc[:, k].mean()) for k in range(K)},
        "noncompliance_by_seed": {str(r.seed): {class_label(k): rate(r.noncompliance[k]) for k in range(K)} for r in runs},
        "mfg_noncompliance": {class_label(k): float(1 - p) for k, p in enumerate(solution.compliance_probability())},
        "max_clearing_residual": max(r.clearing_residual for r in runs),
        "price_time_average": float(np.mean([r.price.mean() for r in runs])),
        "mfg_price_time_average": float(np.mean(solution.price)),
        "generation_mean": {class_label(k): per_agent("generation", k) for k in range(K)},
        "trading_mean": {class_label(k): per_agent("trading", k) for k in range(K)},
        "digests": {str(r.seed): r.digest for r in runs},
    }
    files["sim_summary.json"] = json_text(summary)
    return files


def emit_simulation(runs, solution, out_dir) -> dict:
    return write_atomic(out_dir, simulation_files(runs, solution))


def emit_audit(report, out_dir) -> dict:
    return write_atomic(out_dir, {"audit.json": json_text(report.to_dict())})
