"""CSV, manifest and SVG emission."""

from __future__ import annotations

import csv
import io
import json
import os
import platform
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from ..logs import MetricLog, format_float  # noqa: E402
from ..theory import config_digest  # noqa: E402

plt.rcParams["svg.hashsalt"] = "stagewise"

DEFINITIONS = {
    "kl_direction": "KL(reference || model): restricted ground truth or restricted-context model first",
    "excess_loss": "cross-entropy minus the entropy of the true next-token law, on the probe batch",
    "stage_crossing": "first logged step at which a series falls below threshold x its initial value",
}


def ensure_writable(out_dir) -> Path:
    """Create ``out_dir`` and confirm it accepts files, before any computation."""
    path = Path(out_dir)
    path.mkdir(parents=True, exist_ok=True)
    probe = path / ".write_test"
    probe.write_text("")
    probe.unlink()
    return path


def write_table(path, rows: list[dict]) -> None:
    """Plain CSV for mixed text/number rows (17 significant digits for floats)."""
    buf = io.StringIO()
    if rows:
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(list(rows[0]))
        for row in rows:
            writer.writerow([v if isinstance(v, str) else format_float(v) for v in row.values()])
    Path(path).write_text(buf.getvalue(), newline="")


def _versions() -> dict:
    import numba
    import yaml

    return {"python": platform.python_version(), "numpy": np.__version__, "numba": numba.__version__,
            "matplotlib": matplotlib.__version__, "pyyaml": yaml.__version__}


def _save(fig, path) -> None:
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def plot_lines(log: MetricLog, x: str, ys: list[str], path, title: str = "", logy: bool = False) -> None:
    fig, ax = plt.subplots(figsize=(6, 4))
    xs = log.column(x) if len(log) else np.array([])
    for y in ys:
        values = log.column(y) if len(log) else np.array([])
        if logy:
            values = np.maximum(values, 1e-16)
        ax.plot(xs, values, label=y)
    if logy:
        ax.set_yscale("log")
    ax.set_xlabel(x)
    ax.set_title(title)
    if ys and len(log):
        ax.legend(fontsize=7)
    _save(fig, path)


def plot_attention_strips(log: MetricLog, h: int, w: int, path) -> None:
    """One heat strip per head: lag (rows) against logged step (columns)."""
    fig, axes = plt.subplots(h, 1, figsize=(6, 1.2 * h + 0.6), squeeze=False)
    steps = log.column("step") if len(log) else np.array([0.0])
    for k in range(h):
        ax = axes[k, 0]
        if len(log):
            strip = np.stack([log.column(f"attn_h{k}_lag{j}") for j in range(w)])
        else:
            strip = np.zeros((w, 1))
        ax.imshow(strip, aspect="auto", vmin=0, vmax=1, cmap="viridis", interpolation="nearest",
                  extent=(steps[0], steps[-1] if steps[-1] > steps[0] else steps[0] + 1, w - 0.5, -0.5))
        ax.set_ylabel(f"head {k}")
    axes[-1, 0].set_xlabel("step")
    _save(fig, path)


def plot_training(log: MetricLog, out_dir, h: int, w: int, prefix: str = "") -> list[str]:
    out = Path(out_dir)
    names = [f"{prefix}loss.svg", f"{prefix}kl.svg", f"{prefix}attention.svg"]
    plot_lines(log, "step", ["train_loss", "val_loss", "excess_loss"], out / names[0], "losses")
    kl_cols = [c for c in log.columns if c.startswith("kl_")]
    plot_lines(log, "step", kl_cols, out / names[1], "KL(reference || model)", logy=True)
    plot_attention_strips(log, h, w, out / names[2])
    return names


def plot_flow(trajectory: MetricLog, residuals: MetricLog | None, out_dir, prefix: str = "") -> list[str]:
    out = Path(out_dir)
    names = [f"{prefix}flow_loss.svg", f"{prefix}flow_overlaps.svg", f"{prefix}flow_attention.svg"]
    plot_lines(trajectory, "t", ["loss"], out / names[0], "loss", logy=True)
    plot_lines(trajectory, "t", [c for c in trajectory.columns if c.startswith("overlap_")], out / names[1],
               "<V_k, V_j*>")
    plot_lines(trajectory, "t", [c for c in trajectory.columns if c.startswith("s_")], out / names[2],
               "attention on true positions")
    if residuals is not None:
        names.append(f"{prefix}flow_residuals.svg")
        plot_lines(residuals, "t", residuals.columns[1:], out / names[-1], "per-feature residual", logy=True)
    return names


def emit_outputs(out_dir, logs: dict, reports: list | None = None, config: dict | None = None,
                 seeds: list | None = None, extra: dict | None = None, plots: list | None = None) -> dict:
    """Write one CSV per log, one text file per check report, and the manifest.

    ``plots`` lists SVG names already written into ``out_dir``; the
    manifest records every file together with the config digest, seeds,
    definitions and library versions.
    """
    out = ensure_writable(out_dir)
    files = []
    for name, log in logs.items():
        log.write_csv(out / f"{name}.csv")
        files.append(f"{name}.csv")
    status = {}
    for i, report in enumerate(reports or []):
        fname = f"check_{i:02d}_{report.name}.txt"
        (out / fname).write_text(report.to_text())
        files.append(fname)
        status[fname] = report.status
    files.extend(plots or [])
    manifest = {
        "config_digest": config_digest(config or {}),
        "config": config or {},
        "seeds": list(seeds or []),
        "files": sorted(files),
        "definitions": DEFINITIONS,
        "versions": _versions(),
        "check_status": status,
        "extra": extra or {},
    }
    text = json.dumps(_jsonable(manifest), sort_keys=True, indent=2) + "\n"
    (out / "manifest.json").write_text(text)
    return manifest


def _jsonable(value):
    if isinstance(value, dict):
        return {str(k): _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    if isinstance(value, np.generic):
        return value.item()
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, float) and not np.isfinite(value):
        return str(value)
    if isinstance(value, os.PathLike):
        return str(value)
    return value
