"""Deterministic text artifacts: CSV tables and a dependency-free SVG
renderer for Kaplan-Meier curves."""

from __future__ import annotations

import csv
import io
from pathlib import Path

import numpy as np

from .metrics import CoxResult, KmCurve


def rows_to_csv(rows: list[dict], columns: list[str] | None = None) -> str:
    """Serialize dict rows with a fixed column order (floats via repr, so
    the bytes round-trip and rerurns hash identically)."""
    if not rows:
        return ""
    cols = columns or list(rows[0].keys())
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(cols)
    for row in rows:
        out = []
        for c in cols:
            v = row.get(c, "")
            if isinstance(v, (float, np.floating)):
                out.append(repr(float(v)))
            else:
                out.append(v)
        wr.writerow(out)
    return buf.getvalue()


def write_rows(path: Path, rows: list[dict], columns: list[str] | None = None) -> None:
    Path(path).write_text(rows_to_csv(rows, columns))


def km_rows(curve: KmCurve, group: str) -> list[dict]:
    return [
        {"group": group, "time": float(t), "survival": float(s), "at_risk": int(n)}
        for t, s, n in zip(curve.times, curve.survival, curve.at_risk)
    ]


def _svg_path(xs, ys, x0, y0, w, h, x_max) -> str:
    pts = []
    for x, y in zip(xs, ys):
        px = x0 + (x / x_max) * w if x_max > 0 else x0
        py = y0 + (1.0 - y) * h
        pts.append(f"{px:.2f},{py:.2f}")
    return "M" + " L".join(pts)


def km_svg(curves: dict[str, KmCurve], logrank_p: float | None = None,
           cox: CoxResult | None = None, title: str = "", width: int = 480,
           height: int = 360) -> str:
    """Render step curves for each named group with the test annotations."""
    x0, y0, w, h = 60.0, 30.0, width - 90.0, height - 90.0
    x_max = max((float(c.times[-1]) for c in curves.values() if c.times.size), default=1.0)
    colors = ["#c0392b", "#2471a3", "#1e8449", "#7d3c98"]
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<text x="{width / 2:.0f}" y="18" text-anchor="middle" font-size="13" '
        f'font-family="sans-serif">{title}</text>',
        f'<line x1="{x0}" y1="{y0 + h}" x2="{x0 + w}" y2="{y0 + h}" stroke="black"/>',
        f'<line x1="{x0}" y1="{y0}" x2="{x0}" y2="{y0 + h}" stroke="black"/>',
        f'<text x="{x0 - 8}" y="{y0 + 4}" text-anchor="end" font-size="10" '
        f'font-family="sans-serif">1.0</text>',
        f'<text x="{x0 - 8}" y="{y0 + h + 4}" text-anchor="end" font-size="10" '
        f'font-family="sans-serif">0.0</text>',
        f'<text x="{x0 + w}" y="{y0 + h + 16}" text-anchor="end" font-size="10" '
        f'font-family="sans-serif">{x_max:.0f} months</text>',
    ]
    for i, (name, curve) in enumerate(sorted(curves.items())):
        xs, ys = curve.step_points()
        xs = np.append(xs, x_max)
        ys = np.append(ys, ys[-1])
        color = colors[i % len(colors)]
        parts.append(f'<path d="{_svg_path(xs, ys, x0, y0, w, h, x_max)}" '
                     f'fill="none" stroke="{color}" stroke-width="1.6"/>')
        parts.append(f'<text x="{x0 + w - 4}" y="{y0 + 14 + 14 * i}" text-anchor="end" '
                     f'font-size="11" font-family="sans-serif" fill="{color}">{name}</text>')
    notes = []
    if logrank_p is not None:
        notes.append(f"log-rank p = {logrank_p:.3g}")
    if cox is not None:
        notes.append(f"HR = {cox.hr:.2f} (95% CI {cox.ci_low:.2f}-{cox.ci_high:.2f})")
    for j, note in enumerate(notes):
        parts.append(f'<text x="{x0 + 6}" y="{y0 + 16 + 14 * j}" font-size="11" '
                     f'font-family="sans-serif">{note}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"
