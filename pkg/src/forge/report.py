"""Report writers: CSV tables, a plain-text summary and SVG charts.

All outputs are byte-stable for a fixed input: floats are formatted with a
fixed precision, SVG ids are salted with a constant and no timestamps are
embedded.
"""

from __future__ import annotations

import csv
import io
import json
from pathlib import Path
from typing import Iterable, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .container import atomic_write_text  # noqa: E402

plt.rcParams["svg.hashsalt"] = "forge"
plt.rcParams["svg.fonttype"] = "none"

CONFIG_ECHO = "config.json"


def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return f"{float(v):.6f}"
    return str(v)


def write_csv(path, rows: Sequence[dict], columns: Sequence[str]) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([_fmt(r[c]) for c in columns])
    atomic_write_text(path, buf.getvalue())


def read_csv(path) -> list[dict]:
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


def write_config_echo(out_dir, config: dict, extra: dict | None = None) -> None:
    payload = {"config": config, **(extra or {})}
    atomic_write_text(Path(out_dir) / CONFIG_ECHO, json.dumps(payload, indent=2, sort_keys=True) + "\n")


def write_summary(path, title: str, lines: Iterable[str]) -> None:
    body = [title, "=" * len(title), *lines]
    atomic_write_text(path, "\n".join(body) + "\n")


def _save_svg(fig, path) -> None:
    buf = io.StringIO()
    fig.savefig(buf, format="svg", metadata={"Date": None, "Creator": "forge"})
    plt.close(fig)
    atomic_write_text(path, buf.getvalue())


def grouped_bars(path, groups: Sequence[str], series: dict[str, Sequence[float]], ylabel: str, title: str) -> None:
    """One bar group per entry in ``groups``, one bar per series."""
    fig, ax = plt.subplots(figsize=(7.5, 3.6))
    x = np.arange(len(groups))
    width = 0.8 / max(len(series), 1)
    for i, (name, vals) in enumerate(series.items()):
        ax.bar(x + (i - (len(series) - 1) / 2) * width, vals, width, label=name)
    ax.set_xticks(x)
    ax.set_xticklabels(groups)
    ax.set_ylabel(ylabel)
    ax.set_title(title)
    lo = min(min(v) for v in series.values()) if series else 0.0
    ax.set_ylim(max(0.0, lo - 0.1), 1.0)
    ax.legend(fontsize=8, loc="lower right")
    fig.tight_layout()
    _save_svg(fig, path)


def line_chart(path, x: Sequence[float], series: dict[str, Sequence[float]], xlabel: str, ylabel: str, title: str,
               logx: bool = False, logy: bool = False) -> None:
    fig, ax = plt.subplots(figsize=(6.0, 3.6))
    for name, vals in series.items():
        ax.plot(x, vals, marker="o" if len(x) < 20 else None, label=name)
    if logx:
        ax.set_xscale("log", base=2)
        ax.set_xticks(list(x))
        ax.set_xticklabels([str(v) for v in x])
    if logy:
        ax.set_yscale("log")
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    ax.set_title(title)
    ax.legend(fontsize=8)
    fig.tight_layout()
    _save_svg(fig, path)
