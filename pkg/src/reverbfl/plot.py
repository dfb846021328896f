"""Accuracy-vs-round chart written as a self-contained SVG with byte-stable output."""

from __future__ import annotations

from collections import defaultdict
from pathlib import Path
from xml.sax.saxutils import escape

import numpy as np

from .experiment import read_metrics

WIDTH, HEIGHT = 720, 440
MARGIN = {"left": 70, "right": 190, "top": 40, "bottom": 60}
COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2",
          "#7f7f7f", "#bcbd22", "#17becf")


def _num(v):
    return f"{v:.6g}"


def collect_series(paths):
    """``{label: (rounds, mean accuracy over runs)}``; label is the variant, plus the
    attack when more than one attack is present."""
    if not paths:
        raise ValueError("no metrics files given")
    runs = [read_metrics(p) for p in paths]
    attacks = {r["attack"] for rows in runs for r in rows}
    grouped = defaultdict(list)
    rounds = None
    for path, rows in zip(paths, runs):
        these = [r["round"] for r in rows]
        if rounds is None:
            rounds = these
        elif these != rounds:
            raise ValueError(f"{path}: rounds {these[0]}..{these[-1]} differ from "
                             f"{rounds[0]}..{rounds[-1]}")
        label = rows[0]["variant"] if len(attacks) == 1 else f"{rows[0]['variant']} ({rows[0]['attack']})"
        grouped[label].append([r["test_accuracy"] for r in rows])
    return {k: (rounds, np.mean(np.array(v), axis=0)) for k, v in sorted(grouped.items())}


def render_svg(series, title="Global test accuracy"):
    x0, x1 = MARGIN["left"], WIDTH - MARGIN["right"]
    y0, y1 = HEIGHT - MARGIN["bottom"], MARGIN["top"]
    rounds = next(iter(series.values()))[0]
    r_lo, r_hi = rounds[0], rounds[-1]
    span = max(r_hi - r_lo, 1)

    def sx(r):
        return x0 + (r - r_lo) / span * (x1 - x0)

    def sy(a):
        return y0 - a * (y0 - y1)

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
           f'viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">',
           f'<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
           f'<text x="{_num((x0 + x1) / 2)}" y="24" text-anchor="middle" font-size="14">{escape(title)}</text>']
    for k in range(6):
        a = k / 5
        y = _num(sy(a))
        out.append(f'<line x1="{x0}" y1="{y}" x2="{x1}" y2="{y}" stroke="#dddddd"/>')
        out.append(f'<text x="{x0 - 8}" y="{y}" text-anchor="end" dominant-baseline="middle">{_num(a)}</text>')
    ticks = sorted(set(np.linspace(r_lo, r_hi, min(len(rounds), 7)).round().astype(int).tolist()))
    for r in ticks:
        x = _num(sx(r))
        out.append(f'<line x1="{x}" y1="{y0}" x2="{x}" y2="{y0 + 5}" stroke="black"/>')
        out.append(f'<text x="{x}" y="{y0 + 18}" text-anchor="middle">{r}</text>')
    out.append(f'<line x1="{x0}" y1="{y0}" x2="{x1}" y2="{y0}" stroke="black"/>')
    out.append(f'<line x1="{x0}" y1="{y0}" x2="{x0}" y2="{y1}" stroke="black"/>')
    out.append(f'<text x="{_num((x0 + x1) / 2)}" y="{HEIGHT - 18}" text-anchor="middle">Communication round</text>')
    out.append(f'<text x="18" y="{_num((y0 + y1) / 2)}" text-anchor="middle" '
               f'transform="rotate(-90 18 {_num((y0 + y1) / 2)})">Test accuracy</text>')
    for i, (label, (rs, acc)) in enumerate(series.items()):
        color = COLORS[i % len(COLORS)]
        pts = " ".join(f"{_num(sx(r))},{_num(sy(a))}" for r, a in zip(rs, acc))
        out.append(f'<polyline fill="none" stroke="{color}" stroke-width="2" points="{pts}"/>')
        ly = y1 + 10 + 20 * i
        out.append(f'<line x1="{x1 + 15}" y1="{ly}" x2="{x1 + 40}" y2="{ly}" stroke="{color}" stroke-width="2"/>')
        out.append(f'<text x="{x1 + 46}" y="{ly}" dominant-baseline="middle">{escape(label)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def emit_plot(paths, output, title="Global test accuracy"):
    """Render the mean accuracy curve of each variant; nothing is written on error."""
    svg = render_svg(collect_series(list(paths)), title)
    output = Path(output)
    output.parent.mkdir(parents=True, exist_ok=True)
    output.write_bytes(svg.encode())
    return output
