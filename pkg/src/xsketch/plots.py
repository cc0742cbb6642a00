"""Chord-level curve tables and their SVG plots."""

from __future__ import annotations

import csv
from collections import defaultdict
from pathlib import Path
from typing import Iterable

import numpy as np

from .notedata import DataError

ATTR_KEYS = ("vel", "tempo", "art")
ATTR_LABELS = {"vel": "dynamics (velocity)", "tempo": "tempo (IOI ratio)", "art": "articulation"}
CURVE_HEADER = ("series", "attr", "index", "value")
# drawing order and colors loosely follow the usual qualitative-figure palette
STYLE = {
    "truth": dict(color="0.6", lw=2.0),
    "recon": dict(color="tab:cyan", lw=1.2),
    "sampled": dict(color="tab:blue", lw=1.2),
    "sketch": dict(color="tab:green", lw=1.5, ls="--"),
    "planning": dict(color="tab:pink", lw=1.5),
}


def curve_rows(series: str, k: np.ndarray) -> list[tuple]:
    """Rows for a (C, 3) chord-level matrix."""
    return [(series, ATTR_KEYS[a], c, repr(float(k[c, a]))) for c in range(k.shape[0]) for a in range(3)]


def write_curves(path: str | Path, rows: Iterable[tuple]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(CURVE_HEADER)
        w.writerows(rows)


def read_curves(path: str | Path) -> dict[str, dict[str, np.ndarray]]:
    """series -> attr -> values ordered by index."""
    raw: dict[str, dict[str, list]] = defaultdict(lambda: defaultdict(list))
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(header[:4]) != CURVE_HEADER:
            raise DataError(f"{path}: expected header {','.join(CURVE_HEADER)}")
        for line, row in enumerate(reader, start=2):
            if len(row) < 4 or row[1] not in ATTR_KEYS:
                raise DataError(f"{path}:{line}: malformed curve row")
            try:
                raw[row[0]][row[1]].append((int(row[2]), float(row[3])))
            except ValueError:
                raise DataError(f"{path}:{line}: non-numeric index or value") from None
    if not raw:
        raise DataError(f"{path}: no curve rows")
    return {s: {a: np.array([v for _, v in sorted(pts)]) for a, pts in attrs.items()} for s, attrs in raw.items()}


def plot_curves(curves: dict[str, dict[str, np.ndarray]], out: str | Path, title: str | None = None) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    plt.rcParams["svg.hashsalt"] = "xsketch"  # stable element ids across runs
    fig, axes = plt.subplots(3, 1, figsize=(7, 6.5), sharex=True)
    cmap = plt.get_cmap("Oranges")
    extra = [s for s in curves if s not in STYLE]
    for ax, attr in zip(axes, ATTR_KEYS):
        for s in [s for s in STYLE if s in curves] + extra:
            if attr not in curves[s]:
                continue
            style = STYLE.get(s) or dict(color=cmap(0.35 + 0.6 * extra.index(s) / max(len(extra), 1)), lw=1.0)
            ax.plot(np.arange(len(curves[s][attr])), curves[s][attr], label=s, **style)
        ax.set_ylabel(ATTR_LABELS[attr], fontsize=8)
        ax.set_ylim(-1.05, 1.05)
        ax.grid(alpha=0.3)
    axes[-1].set_xlabel("chord")
    axes[0].legend(fontsize=7, ncol=4, loc="upper right")
    if title:
        fig.suptitle(title, fontsize=9)
    fig.tight_layout()
    fig.savefig(str(out), format="svg", metadata={"Date": None})
    plt.close(fig)
