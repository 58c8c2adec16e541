"""Figure rendering for recorded traces and sweep summaries.

Everything here consumes the exported CSV artifacts (not live runs), so
plots can always be regenerated after the fact: tracking-error decay, unit
injection trajectories, sensitivity estimates, and dispatch before/after
bars when a trace contains dispatch instants.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from .sim import PHASE_DISPATCH, SimTrace, import_trace


def _unit_labels(trace: SimTrace):
    ids = getattr(trace, "der_bus_ids", None)
    if ids:
        return [f"bus {b}" for b in ids]
    return [f"unit {i + 1}" for i in range(trace.n)]


def render_trace_figures(trace: SimTrace, out_dir) -> list[Path]:
    """Write the standard figure set for one trace; returns the paths."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    labels = _unit_labels(trace)

    fig, ax = plt.subplots(figsize=(7, 4))
    ax.semilogy(trace.k, np.abs(trace.e), lw=1.2)
    ax.axhline(trace.delta, color="gray", ls="--", lw=0.8, label=f"deadband {trace.delta:g} kW")
    ax.set_xlabel("iteration")
    ax.set_ylabel("|tracking error| (kW)")
    ax.grid(True, alpha=0.4)
    ax.legend(fontsize=8)
    paths.append(_save(fig, out_dir / "tracking_error.png"))

    fig, ax = plt.subplots(figsize=(7, 4))
    for i in range(trace.n):
        ax.plot(trace.k, trace.u[:, i], lw=1.0, label=labels[i])
    ax.set_xlabel("iteration")
    ax.set_ylabel("unit injection (kW)")
    ax.grid(True, alpha=0.4)
    ax.legend(fontsize=7, ncol=3)
    paths.append(_save(fig, out_dir / "injections.png"))

    fig, ax = plt.subplots(figsize=(7, 4))
    for i in range(trace.n):
        ax.plot(trace.k, trace.phi[:, i], lw=1.0, label=labels[i])
    ax.set_xlabel("iteration")
    ax.set_ylabel("estimated sensitivity")
    ax.grid(True, alpha=0.4)
    ax.legend(fontsize=7, ncol=3)
    paths.append(_save(fig, out_dir / "estimates.png"))

    disp = [i for i, ph in enumerate(trace.phase) if ph == PHASE_DISPATCH]
    if disp:
        i = disp[-1]
        before = trace.u[i - 1]
        after = trace.u[i]
        idx = np.arange(trace.n)
        fig, ax = plt.subplots(figsize=(7, 4))
        ax.bar(idx - 0.18, before, width=0.36, label="before dispatch")
        ax.bar(idx + 0.18, after, width=0.36, label="after dispatch")
        ax.set_xticks(idx, labels, rotation=45, fontsize=8)
        ax.set_ylabel("injection set-point (kW)")
        ax.grid(True, axis="y", alpha=0.4)
        ax.legend(fontsize=8)
        paths.append(_save(fig, out_dir / "dispatch_adjustment.png"))
    return paths


def render_trace_file(csv_path, out_dir) -> list[Path]:
    return render_trace_figures(import_trace(csv_path), out_dir)


def render_sweep_figure(rows: list[dict], traces: dict, param: str, out_dir) -> list[Path]:
    """Sweep study figures: per-value median |e| decay and terminal MAE."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    values = sorted({r["value"] for r in rows})

    fig, ax = plt.subplots(figsize=(7, 4))
    for val in values:
        series = traces.get(val, [])
        if not series:
            continue
        k_max = max(len(s) for s in series)
        mat = np.full((len(series), k_max), np.nan)
        for i, s in enumerate(series):
            mat[i, : len(s)] = np.abs(s)
            mat[i, len(s):] = abs(s[-1])
        ax.semilogy(np.nanmedian(mat, axis=0), lw=1.2, label=f"{param}={val:g}")
    ax.set_xlabel("iteration")
    ax.set_ylabel("median |tracking error| (kW)")
    ax.grid(True, alpha=0.4)
    ax.legend(fontsize=8)
    paths.append(_save(fig, out_dir / f"sweep_{param}_tracking.png"))

    has_mae = any(not np.isnan(r.get("terminal_mae", np.nan)) for r in rows)
    if has_mae:
        fig, ax = plt.subplots(figsize=(7, 4))
        med = [
            np.median([r["terminal_mae"] for r in rows if r["value"] == val])
            for val in values
        ]
        ax.plot(values, med, "o-")
        ax.set_xlabel(param)
        ax.set_ylabel("median terminal estimation MAE")
        ax.grid(True, alpha=0.4)
        paths.append(_save(fig, out_dir / f"sweep_{param}_mae.png"))
    return paths


def _save(fig, path: Path) -> Path:
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)
    return path
