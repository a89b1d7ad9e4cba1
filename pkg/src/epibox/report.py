"""Deterministic rendering of result artifacts: figures, tables, CSV.

Everything here is byte-stable so command re-runs reproduce their output
files exactly: figures render off-screen with the software tag
stripped, tables use a fixed layout, and all writes go through the
atomic helpers.
"""

from __future__ import annotations

import csv
import io

import matplotlib

matplotlib.use("Agg")  # decided before pyplot loads; no display needed

import matplotlib.pyplot as plt

from .util import write_bytes_atomic, write_text_atomic


def save_figure(fig, path: str) -> None:
    buf = io.BytesIO()
    fig.savefig(buf, format="png", metadata={"Software": None})
    plt.close(fig)
    write_bytes_atomic(path, buf.getvalue())


def save_csv(rows, path: str) -> None:
    """Write an iterable of row sequences as comma-delimited text."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    for row in rows:
        writer.writerow(row)
    write_text_atomic(path, buf.getvalue())


def ap_table(result) -> str:
    """Fixed-width percent table: mean AP3D plus the 15/25/50 rows.

    Threshold rows appear only when the sweep actually contains them,
    so custom sweeps still render.
    """
    rows = [("AP3D", result.ap3d_mean)]
    for t in (0.15, 0.25, 0.50):
        if t in result.ap_per_threshold:
            rows.append((f"AP3D@{round(100 * t)}", result.ap_per_threshold[t]))
    lines = [f"{'metric':<10}{'percent':>10}"]
    for name, value in rows:
        lines.append(f"{name:<10}{100.0 * value:>10.2f}")
    return "\n".join(lines) + "\n"


def ap_curve_figure(result):
    """AP versus IoU threshold across the sweep."""
    fig, ax = plt.subplots(figsize=(5.0, 3.5), dpi=110)
    ts = sorted(result.ap_per_threshold)
    ax.plot(ts, [result.ap_per_threshold[t] for t in ts], marker="o")
    ax.set_xlabel("IoU threshold")
    ax.set_ylabel("AP")
    ax.set_ylim(-0.02, 1.02)
    ax.set_title(f"AP3D {100.0 * result.ap3d_mean:.2f}")
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    return fig


def loss_curve_figure(steps, corner_l1, mu):
    """Fit trajectory: corner L1 on a log axis, mu on a twin linear axis."""
    fig, ax = plt.subplots(figsize=(5.0, 3.5), dpi=110)
    ax.semilogy(steps, corner_l1, color="tab:blue", label="corner L1")
    ax.set_xlabel("step")
    ax.set_ylabel("corner L1")
    ax.grid(True, alpha=0.3)
    twin = ax.twinx()
    twin.plot(steps, mu, color="tab:orange", label="mu")
    twin.set_ylabel("mu")
    fig.tight_layout()
    return fig
