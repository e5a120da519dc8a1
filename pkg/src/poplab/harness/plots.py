"""Deterministic SVG emission — same inputs, same bytes.

No plotting library: the charts here are simple enough (a metric curve
over observation lengths, a top-down view of a closed-loop run) that
emitting the SVG primitives directly buys byte-stable artifacts that
diff cleanly across reruns. All floats go through one canonical
formatter; nothing timestamps or randomizes.
"""

from __future__ import annotations

import os

import numpy as np

from ..errors import ParameterError

WIDTH, HEIGHT = 640.0, 440.0
MARGIN = 52.0
PALETTE = ("#1f6fb2", "#c64f27", "#3a8f4d", "#8557a8", "#b2861f",
           "#2aa0a6")


def _fmt(v: float) -> str:
    if v == 0:
        return "0"
    s = f"{float(v):.3f}".rstrip("0").rstrip(".")
    return s if s not in ("-0", "") else "0"


def _poly(points, stroke, width=1.5, dash=None, fill="none") -> str:
    pts = " ".join(f"{_fmt(x)},{_fmt(y)}" for x, y in points)
    d = f' stroke-dasharray="{dash}"' if dash else ""
    return (f'<polyline points="{pts}" fill="{fill}" stroke="{stroke}" '
            f'stroke-width="{_fmt(width)}"{d}/>')


def _text(x, y, s, size=11, anchor="start", fill="#333") -> str:
    return (f'<text x="{_fmt(x)}" y="{_fmt(y)}" font-size="{size}" '
            f'font-family="sans-serif" text-anchor="{anchor}" '
            f'fill="{fill}">{s}</text>')


def _document(body: list) -> str:
    head = (f'<svg xmlns="http://www.w3.org/2000/svg" '
            f'width="{_fmt(WIDTH)}" height="{_fmt(HEIGHT)}" '
            f'viewBox="0 0 {_fmt(WIDTH)} {_fmt(HEIGHT)}">')
    return "\n".join([head, *body, "</svg>"]) + "\n"


def _axes(x_label: str, y_label: str) -> list:
    x0, y0 = MARGIN, HEIGHT - MARGIN
    x1, y1 = WIDTH - MARGIN, MARGIN
    return [
        _poly([(x0, y1), (x0, y0), (x1, y0)], "#444", 1.0),
        _text((x0 + x1) / 2, HEIGHT - 14, x_label, anchor="middle"),
        _text(16, (y0 + y1) / 2, y_label, anchor="middle"),
    ]


def obs_curve_svg(series: dict, metric: str = "minade") -> str:
    """Metric vs observation length, one polyline per labeled report.

    ``series`` maps label -> report rows (dicts bearing "obs_setting"
    and the metric column). Rows with obs_setting == "random" render as
    a dashed horizontal reference line instead of a curve point.
    """
    if not series:
        raise ParameterError("obs_curve_svg needs at least one series")
    numeric: dict[str, list] = {}
    randoms: dict[str, float] = {}
    for label, rows in series.items():
        pts = []
        for row in rows:
            if metric not in row:
                raise ParameterError(f"report row lacks column {metric!r}")
            if str(row["obs_setting"]) == "random":
                randoms[label] = float(row[metric])
            else:
                pts.append((float(row["obs_setting"]), float(row[metric])))
        numeric[label] = sorted(pts)

    xs = [x for pts in numeric.values() for x, _ in pts]
    ys = [y for pts in numeric.values() for _, y in pts]
    ys += list(randoms.values())
    if not xs:
        raise ParameterError("no numeric observation settings to plot")
    x_lo, x_hi = min(xs), max(xs)
    y_lo, y_hi = 0.0, max(ys) * 1.1 + 1e-9
    if x_hi == x_lo:
        x_hi = x_lo + 1.0

    def sx(x):
        return MARGIN + (x - x_lo) / (x_hi - x_lo) * (WIDTH - 2 * MARGIN)

    def sy(y):
        return HEIGHT - MARGIN - (y - y_lo) / (y_hi - y_lo) \
            * (HEIGHT - 2 * MARGIN)

    body = _axes("observed history steps", metric)
    for x in sorted({x for x, _ in sum(numeric.values(), [])}):
        body.append(_text(sx(x), HEIGHT - MARGIN + 16, _fmt(x),
                          anchor="middle", size=10))
    for frac in (0.0, 0.5, 1.0):
        y = y_lo + frac * (y_hi - y_lo)
        body.append(_text(MARGIN - 6, sy(y) + 4, _fmt(y), anchor="end",
                          size=10))
    for idx, label in enumerate(sorted(numeric)):
        color = PALETTE[idx % len(PALETTE)]
        pts = numeric[label]
        if pts:
            body.append(_poly([(sx(x), sy(y)) for x, y in pts], color, 2.0))
            for x, y in pts:
                body.append(f'<circle cx="{_fmt(sx(x))}" cy="{_fmt(sy(y))}"'
                            f' r="3" fill="{color}"/>')
        if label in randoms:
            y = sy(randoms[label])
            body.append(_poly([(MARGIN, y), (WIDTH - MARGIN, y)], color,
                              1.2, dash="6,4"))
        body.append(_text(WIDTH - MARGIN, MARGIN + 14 * (idx + 1) - 4,
                          label, anchor="end", fill=color))
    return _document(body)


def trace_svg(trace, paths: dict | None = None) -> str:
    """Top-down view of a closed-loop run: route geometry, background
    trajectories, and the AV's driven line. An empty trace renders the
    frame alone."""
    pts_all = []
    av_line = []
    agent_lines: dict[str, list] = {}
    for row in trace.rows:
        av_line.append((row["av_state"][0], row["av_state"][1]))
        for vid, st in sorted(row["agents"].items()):
            agent_lines.setdefault(vid, []).append((st[0], st[1]))
    path_lines = []
    if paths:
        for pid in sorted(paths):
            xy = paths[pid].resample(2.0)[0]
            path_lines.append([(float(x), float(y)) for x, y in xy])
    for line in (av_line, *agent_lines.values(), *path_lines):
        pts_all.extend(line)

    if pts_all:
        arr = np.asarray(pts_all)
        lo = arr.min(axis=0) - 8.0
        hi = arr.max(axis=0) + 8.0
    else:
        lo, hi = np.array([0.0, 0.0]), np.array([1.0, 1.0])
    span = np.maximum(hi - lo, 1e-9)
    scale = min((WIDTH - 2 * MARGIN) / span[0],
                (HEIGHT - 2 * MARGIN) / span[1])

    def s(p):
        x = MARGIN + (p[0] - lo[0]) * scale
        y = HEIGHT - MARGIN - (p[1] - lo[1]) * scale
        return (x, y)

    body = _axes("x [m]", "y [m]")
    for line in path_lines:
        body.append(_poly([s(p) for p in line], "#bbb", 1.0, dash="2,3"))
    for idx, vid in enumerate(sorted(agent_lines)):
        color = PALETTE[(idx + 1) % len(PALETTE)]
        body.append(_poly([s(p) for p in agent_lines[vid]], color, 1.2))
    if av_line:
        body.append(_poly([s(p) for p in av_line], "#111", 2.2))
        x, y = s(av_line[-1])
        body.append(f'<circle cx="{_fmt(x)}" cy="{_fmt(y)}" r="4" '
                    f'fill="#111"/>')
    body.append(_text(MARGIN, MARGIN - 8,
                      f"{trace.scenario} seed={trace.seed}", size=12))
    return _document(body)


def save_svg(svg: str, path: str) -> None:
    d = os.path.dirname(os.path.abspath(path))
    os.makedirs(d, exist_ok=True)
    with open(path, "w", newline="\n") as f:
        f.write(svg)
