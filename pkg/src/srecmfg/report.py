"""Plot-ready tables and figures from solve/simulate output.

Tables are always written. Figures are rendered with the non-interactive
Agg backend next to them, one PNG per table family.
"""
from __future__ import annotations

import io as _io
import json
import os

import numpy as np
from scipy.stats import norm

from .io import class_label, csv_text, parse_class, read_csv, write_atomic

SLICE_TIMES = (0.0, 0.25, 0.5, 0.75, 1.0)
HIST_BINS = 40


def _slice_nodes(times, fractions=SLICE_TIMES):
    T = times[-1]
    return sorted({int(np.argmin(np.abs(times - f * T))) for f in fractions})


def control_slices(solution):
    """Controls and adjoint against inventory at a few times, per class."""
    t, x = solution.grid.times, solution.grid.x
    rows = []
    for j in _slice_nodes(t):
        for u in range(x.size):
            for k in range(solution.config.K):
                rows.append((t[j], x[u], class_label(k), solution.surface.y[k, j, u],
                             solution.g[k, j, u], solution.Gamma[k, j, u]))
    return ("t", "x", "class", "y", "g", "gamma"), rows


def flow_params(solution):
    t = solution.grid.times
    R = np.asarray(solution.config.compliance.R)
    rows = []
    for j in range(t.size):
        for k in range(solution.config.K):
            m, v = solution.flow.mean[k, j], solution.flow.var[k, j]
            sd = np.sqrt(v)
            rows.append((t[j], class_label(k), m, sd, float(norm.sf(R[k], m, sd)) if sd > 0 else float(m >= R[k])))
    return ("t", "class", "mean", "sd", "p_comply"), rows


def flow_density(solution, n=241):
    """Gaussian flow densities at the slice times, per class and mixed by pi."""
    t = solution.grid.times
    cfg = solution.config
    lo = float(np.min(solution.flow.mean - 4 * np.sqrt(solution.flow.var)))
    hi = float(np.max(solution.flow.mean + 4 * np.sqrt(solution.flow.var)))
    xs = np.linspace(lo, hi, n)
    rows = []
    for j in _slice_nodes(t):
        dens = [norm.pdf(xs, solution.flow.mean[k, j], np.sqrt(solution.flow.var[k, j])) for k in range(cfg.K)]
        mix = sum(p.pi * d for p, d in zip(cfg.classes, dens))
        for i, xv in enumerate(xs):
            rows.append((t[j], xv, *[d[i] for d in dens], mix[i]))
    head = ("t", "x") + tuple(class_label(k) for k in range(cfg.K)) + ("all",)
    return head, rows


def price_paths(solution, sim_dir=None):
    t = solution.grid.times
    rows = [("mfg", tj, s) for tj, s in zip(t, solution.price)]
    path = os.path.join(sim_dir, "sim_price.csv") if sim_dir else None
    if path and os.path.exists(path):
        _, srows = read_csv(path)
        rows += [(f"seed{r[0]}", float(r[1]), float(r[2])) for r in srows]
    return ("series", "t", "s"), rows


def sim_histograms(sim_dir, solution, bins=HIST_BINS):
    """Histograms over all seeds of initial/terminal inventory, total
    generation and total trading per class, with the Gaussian flow density
    (scaled to counts) for the inventory panels."""
    _, rows = read_csv(os.path.join(sim_dir, "sim_agents.csv"))
    cls = np.array([parse_class(r[2]) for r in rows])
    cols = {
        "initial": np.array([float(r[3]) for r in rows]),
        "terminal": np.array([float(r[4]) for r in rows]),
        "generation": np.array([float(r[5]) for r in rows]),
        "trading": np.array([float(r[6]) for r in rows]),
    }
    out = []
    for name, vals in cols.items():
        edges = np.histogram_bin_edges(vals, bins=bins)
        for k in range(solution.config.K):
            v = vals[cls == k]
            counts, _ = np.histogram(v, bins=edges)
            mid = 0.5 * (edges[1:] + edges[:-1])
            if name in ("initial", "terminal"):
                j = 0 if name == "initial" else -1
                ref = v.size * np.diff(edges) * norm.pdf(
                    mid, solution.flow.mean[k, j], np.sqrt(solution.flow.var[k, j])
                )
            else:
                ref = np.full(mid.size, np.nan)
            for i in range(mid.size):
                out.append((name, class_label(k), edges[i], edges[i + 1], counts[i], ref[i]))
    return ("quantity", "class", "lo", "hi", "count", "flow_expected"), out


def _copy_table(sim_dir, name):
    with open(os.path.join(sim_dir, name), encoding="utf-8") as fh:
        return fh.read()


def _figures(tables: dict) -> dict:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    plt.rcParams.update({"font.size": 9, "axes.grid": True, "grid.alpha": 0.3})
    figs = {}

    def save(fig, name):
        buf = _io.BytesIO()
        fig.savefig(buf, format="png", dpi=110, metadata={"Software": None})
        plt.close(fig)
        figs[name] = buf.getvalue()

    head, rows = tables["controls_slice.csv"]
    classes = sorted({r[2] for r in rows})
    times = sorted({r[0] for r in rows})
    fig, axes = plt.subplots(2, len(classes), figsize=(4 * len(classes), 6), squeeze=False)
    for c, lab in enumerate(classes):
        for tj in times:
            sel = [r for r in rows if r[2] == lab and r[0] == tj]
            xs = [r[1] for r in sel]
            axes[0, c].plot(xs, [r[4] for r in sel], label=f"t={tj:.2f}")
            axes[1, c].plot(xs, [r[5] for r in sel], label=f"t={tj:.2f}")
        axes[0, c].set_title(f"class {lab}: planned generation g")
        axes[1, c].set_title(f"class {lab}: trading rate")
        axes[1, c].set_xlabel("inventory x")
        axes[0, c].set_xlim(-0.5, 2.0)
        axes[1, c].set_xlim(-0.5, 2.0)
    axes[0, -1].legend(fontsize=7)
    fig.tight_layout()
    save(fig, "fig_controls.png")

    head, rows = tables["flow_density.csv"]
    times = sorted({r[0] for r in rows})
    labels = head[2:]
    fig, axes = plt.subplots(len(labels), 1, figsize=(6, 2.2 * len(labels)), sharex=True)
    for a, lab in zip(np.atleast_1d(axes), labels):
        col = head.index(lab)
        for tj in times:
            sel = [r for r in rows if r[0] == tj]
            a.plot([r[1] for r in sel], [r[col] for r in sel], label=f"t={tj:.2f}")
        a.set_ylabel(lab)
    np.atleast_1d(axes)[0].legend(fontsize=7)
    np.atleast_1d(axes)[-1].set_xlabel("inventory x")
    fig.tight_layout()
    save(fig, "fig_flow.png")

    head, rows = tables["price_paths.csv"]
    fig, ax = plt.subplots(figsize=(6, 3.5))
    series = sorted({r[0] for r in rows}, key=lambda s: (s != "mfg", s))
    for s in series:
        sel = [r for r in rows if r[0] == s]
        if s == "mfg":
            ax.plot([r[1] for r in sel], [r[2] for r in sel], "k-", lw=2, label="mean field", zorder=3)
        else:
            ax.plot([r[1] for r in sel], [r[2] for r in sel], lw=0.6, alpha=0.5)
    ax.set_xlabel("t")
    ax.set_ylabel("price")
    ax.legend()
    fig.tight_layout()
    save(fig, "fig_price.png")

    if "sim_histograms.csv" in tables:
        head, rows = tables["sim_histograms.csv"]
        quantities = ["initial", "generation", "trading"]
        fig, axes = plt.subplots(1, 3, figsize=(11, 3.2))
        for a, q in zip(axes, quantities):
            names = ["initial", "terminal"] if q == "initial" else [q]
            for name in names:
                for lab in sorted({r[1] for r in rows}):
                    sel = [r for r in rows if r[0] == name and r[1] == lab]
                    a.stairs([r[4] for r in sel], [sel[0][2]] + [r[3] for r in sel], label=f"{name} {lab}")
            a.set_title("inventory" if q == "initial" else f"total {q}")
            a.legend(fontsize=6)
        fig.tight_layout()
        save(fig, "fig_sim_histograms.png")

    if "sim_controls.csv" in tables:
        head, rows = tables["sim_controls.csv"]
        first = rows[0][0]
        rows = [r for r in rows if r[0] == first]
        fig, axes = plt.subplots(1, 2, figsize=(10, 3.5))
        for a, ctl in zip(axes, ("g", "gamma")):
            i05, i50, i95 = (head.index(f"{ctl}_q{q}") for q in ("05", "50", "95"))
            for lab in sorted({r[2] for r in rows}):
                sel = [r for r in rows if r[2] == lab]
                tt = [float(r[1]) for r in sel]
                a.fill_between(tt, [float(r[i05]) for r in sel], [float(r[i95]) for r in sel], alpha=0.25)
                a.plot(tt, [float(r[i50]) for r in sel], label=f"{lab} median")
            a.set_title(f"{ctl} across agents (seed {first}, 5-95%)")
            a.set_xlabel("t")
            a.legend(fontsize=7)
        fig.tight_layout()
        save(fig, "fig_sim_controls.png")

    if "sim_flow.csv" in tables:
        head, rows = tables["sim_flow.csv"]
        fig, ax = plt.subplots(figsize=(6, 3.5))
        for lab in sorted({r[2] for r in rows}):
            sel = [r for r in rows if r[2] == lab]
            seeds = sorted({r[0] for r in sel})
            for s in seeds:
                ss = [r for r in sel if r[0] == s]
                ax.plot([float(r[1]) for r in ss], [float(r[3]) for r in ss], lw=0.5, alpha=0.4)
            ss = [r for r in sel if r[0] == seeds[0]]
            tt = [float(r[1]) for r in ss]
            fm = np.array([float(r[5]) for r in ss])
            fs = np.sqrt([float(r[6]) for r in ss])
            ax.plot(tt, fm, "k--", lw=1.5)
            ax.fill_between(tt, fm - fs, fm + fs, alpha=0.15, label=f"{lab} flow mean +- sd")
        ax.set_xlabel("t")
        ax.set_ylabel("inventory")
        ax.legend(fontsize=7)
        fig.tight_layout()
        save(fig, "fig_sim_flow.png")
    return figs


def build_report(solution, src_dir, out_dir=None, *, figures=True) -> dict:
    """Write report tables (and figures) for a solution directory.

    Simulation tables in ``src_dir`` are folded in when present. Returns
    the written file checksums.
    """
    out_dir = out_dir or os.path.join(src_dir, "report")
    tables = {
        "controls_slice.csv": control_slices(solution),
        "flow_params.csv": flow_params(solution),
        "flow_density.csv": flow_density(solution),
        "price_paths.csv": price_paths(solution, src_dir),
    }
    files = {name: csv_text(*tab) for name, tab in tables.items()}
    has_sim = os.path.exists(os.path.join(src_dir, "sim_agents.csv"))
    if has_sim:
        tables["sim_histograms.csv"] = sim_histograms(src_dir, solution)
        files["sim_histograms.csv"] = csv_text(*tables["sim_histograms.csv"])
        for name in ("sim_controls.csv", "sim_flow.csv"):
            text = _copy_table(src_dir, name)
            files[name] = text
            lines = text.splitlines()
            tables[name] = (tuple(lines[0].split(",")), [ln.split(",") for ln in lines[1:]])
    index = {
        "tables": sorted(files),
        "slice_times": [float(solution.grid.times[j]) for j in _slice_nodes(solution.grid.times)],
    }
    if figures:
        files.update(_figures(tables))
        index["figures"] = sorted(n for n in files if n.endswith(".png"))
    files["report.json"] = json.dumps(index, indent=2, sort_keys=True) + "\n"
    return write_atomic(out_dir, files)
