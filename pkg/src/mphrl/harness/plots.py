"""Success-rate curves as hand-written SVG: one mean line per series plus a
mean ± std band across seeds."""
from __future__ import annotations

import csv
from pathlib import Path
from xml.sax.saxutils import escape

import numpy as np

from ..errors import InvalidInputError

COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f")


def read_metrics(paths) -> list[dict]:
    from .runner import METRICS_COLUMNS

    rows = []
    for p in paths:
        with Path(p).open(newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if header is None:
                raise InvalidInputError(f"{p}: empty metrics file")
            if tuple(header) != METRICS_COLUMNS:
                raise InvalidInputError(f"{p}: metrics columns {header} do not match the expected schema")
            rows.extend(dict(zip(header, r)) for r in reader)
    return rows


def seed_curves(rows: list[dict], group_by: str = "variant") -> dict[str, dict[int, tuple[np.ndarray, np.ndarray]]]:
    """series -> seed -> (cumulative steps, success rate)."""
    out: dict = {}
    for r in rows:
        series = r[group_by]
        out.setdefault(series, {}).setdefault(int(r["seed"]), []).append(
            (int(r["cumulative_steps"]), float(r["success_rate"])))
    return {s: {seed: (np.array([p[0] for p in pts]), np.array([p[1] for p in pts]))
                for seed, pts in seeds.items()} for s, seeds in out.items()}


def band(curves: dict[int, tuple[np.ndarray, np.ndarray]]):
    """Mean and population std across seeds on the union of step positions.

    Each seed's curve is held at its latest value between points (0 before
    its first point).
    """
    grid = np.unique(np.concatenate([x for x, _ in curves.values()]))
    vals = []
    for x, y in curves.values():
        idx = np.searchsorted(x, grid, side="right") - 1
        vals.append(np.where(idx >= 0, y[np.maximum(idx, 0)], 0.0))
    vals = np.array(vals)
    return grid, vals.mean(axis=0), vals.std(axis=0)


def emit_plots(paths, out_path: str | Path, group_by: str = "variant", title: str = "success rate") -> Path:
    rows = read_metrics(paths)
    if not rows:
        raise InvalidInputError("no metric rows to plot")
    series = seed_curves(rows, group_by)
    out_path = Path(out_path)
    out_path.write_text(render_svg(series, title))
    return out_path


def render_svg(series, title: str, width: int = 640, height: int = 400) -> str:
    left, right, top, bottom = 60, 150, 30, 45
    pw, ph = width - left - right, height - top - bottom
    bands = {name: band(c) for name, c in series.items()}
    x_max = max(float(g[-1]) for g, _, _ in bands.values()) or 1.0

    def sx(x):
        return left + pw * x / x_max

    def sy(y):
        return top + ph * (1.0 - min(max(y, 0.0), 1.0))

    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
             f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">',
             f'<rect width="{width}" height="{height}" fill="white"/>',
             f'<text x="{left}" y="18" font-size="13">{escape(title)}</text>',
             f'<line x1="{left}" y1="{top + ph}" x2="{left + pw}" y2="{top + ph}" stroke="black"/>',
             f'<line x1="{left}" y1="{top}" x2="{left}" y2="{top + ph}" stroke="black"/>']
    for t in np.linspace(0.0, 1.0, 6):
        parts.append(f'<text x="{left - 8}" y="{sy(t) + 4:.1f}" text-anchor="end">{t:.1f}</text>')
    for t in np.linspace(0.0, x_max, 5):
        parts.append(f'<text x="{sx(t):.1f}" y="{top + ph + 16}" text-anchor="middle">{int(t)}</text>')
    parts.append(f'<text x="{left + pw / 2}" y="{height - 8}" text-anchor="middle">environment steps</text>')
    for i, (name, (g, m, s)) in enumerate(bands.items()):
        color = COLORS[i % len(COLORS)]
        upper = " ".join(f"{sx(x):.1f},{sy(y):.1f}" for x, y in zip(g, m + s))
        lower = " ".join(f"{sx(x):.1f},{sy(y):.1f}" for x, y in zip(g[::-1], (m - s)[::-1]))
        parts.append(f'<polygon points="{upper} {lower}" fill="{color}" fill-opacity="0.2" stroke="none"/>')
        line = " ".join(f"{sx(x):.1f},{sy(y):.1f}" for x, y in zip(g, m))
        parts.append(f'<polyline points="{line}" fill="none" stroke="{color}" stroke-width="1.5"/>')
        ly = top + 14 * i + 8
        parts.append(f'<line x1="{left + pw + 10}" y1="{ly}" x2="{left + pw + 28}" y2="{ly}" '
                     f'stroke="{color}" stroke-width="2"/>')
        parts.append(f'<text x="{left + pw + 32}" y="{ly + 4}">{escape(name)} (n={len(series[name])})</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"
