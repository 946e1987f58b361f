"""Plain SVG line charts for training logs (no plotting stack required)."""

from __future__ import annotations

import csv
import math
from pathlib import Path
from typing import Mapping, Sequence
from xml.sax.saxutils import escape

WIDTH, HEIGHT = 640, 400
MARGIN = {"left": 70, "right": 150, "top": 40, "bottom": 55}
PALETTE = ("#1f77b4", "#d62728", "#ff7f0e", "#2ca02c", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f")


class MetricsFormatError(ValueError):
    pass


def read_metrics(path: str | Path) -> dict[str, list[float]]:
    """Read a metrics CSV into columns of floats; errors name the offending row."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header:
            raise MetricsFormatError(f"{path}: empty file, expected a header row")
        for required in ("step", "loss", "p_chosen_mean"):
            if required not in header:
                raise MetricsFormatError(f"{path}: missing column {required!r}")
        cols: dict[str, list[float]] = {h: [] for h in header}
        for rowno, row in enumerate(reader, start=2):
            if len(row) != len(header):
                raise MetricsFormatError(
                    f"{path}: row {rowno} has {len(row)} fields, expected {len(header)}")
            try:
                values = [float(v) for v in row]
            except ValueError:
                raise MetricsFormatError(f"{path}: row {rowno} has a non-numeric field") from None
            for h, v in zip(header, values):
                cols[h].append(v)
    return cols


def _ticks(lo: float, hi: float, n: int = 5) -> list[float]:
    return [lo + (hi - lo) * i / (n - 1) for i in range(n)]


def _fmt(v: float) -> str:
    if v != 0 and (abs(v) < 1e-3 or abs(v) >= 1e4):
        return f"{v:.2e}"
    return f"{v:.4g}"


def line_chart(series: Mapping[str, tuple[Sequence[float], Sequence[float]]], title: str,
               xlabel: str, ylabel: str) -> str:
    """Render named (x, y) series; a series with a single point is drawn as a marker."""
    pts = [(x, y) for xs, ys in series.values() for x, y in zip(xs, ys) if math.isfinite(y)]
    if not pts:
        raise ValueError("nothing to plot")
    x0, x1 = min(p[0] for p in pts), max(p[0] for p in pts)
    y0, y1 = min(p[1] for p in pts), max(p[1] for p in pts)
    if x1 == x0:
        x0, x1 = x0 - 1, x1 + 1
    if y1 == y0:
        pad = abs(y0) * 0.1 or 1.0
        y0, y1 = y0 - pad, y1 + pad
    left, top = MARGIN["left"], MARGIN["top"]
    pw = WIDTH - MARGIN["left"] - MARGIN["right"]
    ph = HEIGHT - MARGIN["top"] - MARGIN["bottom"]

    def sx(x):
        return left + (x - x0) / (x1 - x0) * pw

    def sy(y):
        return top + ph - (y - y0) / (y1 - y0) * ph

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
        f'viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="11">',
        f'<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
        f'<text x="{left + pw / 2}" y="22" text-anchor="middle" font-size="14">{escape(title)}</text>',
        f'<line x1="{left}" y1="{top + ph}" x2="{left + pw}" y2="{top + ph}" stroke="black"/>',
        f'<line x1="{left}" y1="{top}" x2="{left}" y2="{top + ph}" stroke="black"/>',
    ]
    for t in _ticks(x0, x1):
        out.append(f'<line x1="{sx(t):.2f}" y1="{top + ph}" x2="{sx(t):.2f}" y2="{top + ph + 5}" stroke="black"/>')
        out.append(f'<text x="{sx(t):.2f}" y="{top + ph + 18}" text-anchor="middle">{_fmt(t)}</text>')
    for t in _ticks(y0, y1):
        out.append(f'<line x1="{left - 5}" y1="{sy(t):.2f}" x2="{left}" y2="{sy(t):.2f}" stroke="black"/>')
        out.append(f'<text x="{left - 8}" y="{sy(t) + 4:.2f}" text-anchor="end">{_fmt(t)}</text>')
    out.append(f'<text x="{left + pw / 2}" y="{HEIGHT - 12}" text-anchor="middle">{escape(xlabel)}</text>')
    out.append(f'<text x="16" y="{top + ph / 2}" text-anchor="middle" '
               f'transform="rotate(-90 16 {top + ph / 2})">{escape(ylabel)}</text>')

    for k, (name, (xs, ys)) in enumerate(series.items()):
        color = PALETTE[k % len(PALETTE)]
        coords = [(sx(x), sy(y)) for x, y in zip(xs, ys) if math.isfinite(y)]
        if len(coords) > 1:
            path = " ".join(f"{a:.2f},{b:.2f}" for a, b in coords)
            out.append(f'<polyline class="series" data-name="{escape(name)}" fill="none" '
                       f'stroke="{color}" stroke-width="1.5" points="{path}"/>')
        else:
            out.extend(f'<circle class="series" data-name="{escape(name)}" cx="{a:.2f}" cy="{b:.2f}" '
                       f'r="3" fill="{color}"/>' for a, b in coords)
        ly = top + 12 + 16 * k
        out.append(f'<line x1="{left + pw + 12}" y1="{ly}" x2="{left + pw + 32}" y2="{ly}" '
                   f'stroke="{color}" stroke-width="2"/>')
        out.append(f'<text x="{left + pw + 36}" y="{ly + 4}">{escape(name)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def plot_metrics(csv_path: str | Path, out_dir: str | Path | None = None) -> tuple[Path, Path]:
    """Write ``<stem>_likelihood.svg`` and ``<stem>_loss.svg`` next to the CSV (or in ``out_dir``)."""
    csv_path = Path(csv_path)
    cols = read_metrics(csv_path)
    out_dir = Path(out_dir) if out_dir is not None else csv_path.parent
    out_dir.mkdir(parents=True, exist_ok=True)
    steps = cols["step"]
    if not steps:
        raise MetricsFormatError(f"{csv_path}: no data rows")

    likelihood = {"chosen": (steps, cols["p_chosen_mean"])}
    slots = sorted((c for c in cols if c.startswith("p_rejected_") and c[11:].isdigit()),
                   key=lambda c: int(c[11:]))
    if slots:
        for c in slots:
            likelihood[f"rejected {c[11:]}"] = (steps, cols[c])
    elif "p_rejected_mean" in cols:
        likelihood["rejected"] = (steps, cols["p_rejected_mean"])

    lik_path = out_dir / f"{csv_path.stem}_likelihood.svg"
    loss_path = out_dir / f"{csv_path.stem}_loss.svg"
    lik_path.write_text(line_chart(likelihood, "Average likelihood", "step", "p"), encoding="utf-8")
    loss_path.write_text(line_chart({"loss": (steps, cols["loss"])}, "Loss", "step", "loss"),
                         encoding="utf-8")
    return lik_path, loss_path
