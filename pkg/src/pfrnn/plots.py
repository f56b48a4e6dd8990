"""Static SVG exports: training curves, run comparisons, and per-step
particle frames over the maze.

Charts are plain hand-sized SVG built with the standard XML tools; no
plotting packages. Frames draw the maze grid, the true pose, the mean
prediction, and one marker per particle (class \"particle\").
"""

from __future__ import annotations

import xml.etree.ElementTree as ET

import numpy as np

from . import autodiff as ad
from . import maze as maze_mod
from .autodiff import RngStream

_COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b")

_CHART_W = 640
_CHART_H = 400
_MARGIN = 56


def _root(width, height):
    return ET.Element("svg", {
        "xmlns": "http://www.w3.org/2000/svg",
        "width": str(width), "height": str(height),
        "viewBox": f"0 0 {width} {height}",
    })


def _text(parent, x, y, content, size=12, anchor="start", fill="#222"):
    el = ET.SubElement(parent, "text", {
        "x": f"{x:.1f}", "y": f"{y:.1f}", "font-size": str(size),
        "font-family": "sans-serif", "text-anchor": anchor, "fill": fill,
    })
    el.text = content
    return el


def _line(parent, x1, y1, x2, y2, stroke="#444", width=1.0):
    ET.SubElement(parent, "line", {
        "x1": f"{x1:.1f}", "y1": f"{y1:.1f}", "x2": f"{x2:.1f}", "y2": f"{y2:.1f}",
        "stroke": stroke, "stroke-width": str(width),
    })


def write_svg(elem, path):
    ET.ElementTree(elem).write(path, encoding="unicode", xml_declaration=True)


def _axes(root, x_lo, x_hi, y_lo, y_hi, x_label, y_label, title):
    w, h, m = _CHART_W, _CHART_H, _MARGIN
    _line(root, m, h - m, w - m / 2, h - m)
    _line(root, m, h - m, m, m / 2)
    _text(root, w / 2, 20, title, size=14, anchor="middle")
    _text(root, w / 2, h - 12, x_label, anchor="middle")
    _text(root, 14, h / 2, y_label, anchor="middle")
    _text(root, m, h - m + 16, f"{x_lo:g}", size=10, anchor="middle")
    _text(root, w - m / 2, h - m + 16, f"{x_hi:g}", size=10, anchor="middle")
    _text(root, m - 6, h - m + 4, f"{y_lo:.4g}", size=10, anchor="end")
    _text(root, m - 6, m / 2 + 4, f"{y_hi:.4g}", size=10, anchor="end")


def _scaler(lo, hi, out_lo, out_hi):
    span = hi - lo if hi > lo else 1.0

    def to_px(v):
        return out_lo + (v - lo) / span * (out_hi - out_lo)

    return to_px


def line_chart(rows, x_key, y_keys, title=""):
    """Polyline chart of the y_keys columns against x_key.

    rows: list of dicts with string or numeric values (CSV reader rows
    work directly). Rows missing a y value are skipped for that series.
    """
    if not rows:
        raise ValueError("no data rows")
    series = {}
    for key in y_keys:
        pts = []
        for row in rows:
            xv, yv = row.get(x_key), row.get(key)
            if xv in (None, "") or yv in (None, ""):
                continue
            pts.append((float(xv), float(yv)))
        if pts:
            series[key] = pts
    if not series:
        raise ValueError(f"none of the columns {y_keys} present")

    xs = [x for pts in series.values() for x, _ in pts]
    ys = [y for pts in series.values() for _, y in pts]
    x_lo, x_hi = min(xs), max(xs)
    y_lo, y_hi = min(ys), max(ys)
    to_x = _scaler(x_lo, x_hi, _MARGIN, _CHART_W - _MARGIN / 2)
    to_y = _scaler(y_lo, y_hi, _CHART_H - _MARGIN, _MARGIN / 2)

    root = _root(_CHART_W, _CHART_H)
    _axes(root, x_lo, x_hi, y_lo, y_hi, x_key, "", title)
    for i, (key, pts) in enumerate(series.items()):
        color = _COLORS[i % len(_COLORS)]
        points = " ".join(f"{to_x(x):.1f},{to_y(y):.1f}" for x, y in sorted(pts))
        ET.SubElement(root, "polyline", {
            "points": points, "fill": "none", "stroke": color,
            "stroke-width": "1.5", "class": f"series-{key}",
        })
        _text(root, _CHART_W - _MARGIN / 2, _MARGIN / 2 + 14 * i, key,
              size=11, anchor="end", fill=color)
    return root


def bar_chart(labels, values, title="", y_label=""):
    if len(labels) != len(values) or not labels:
        raise ValueError("labels and values must be non-empty and equal length")
    root = _root(_CHART_W, _CHART_H)
    y_lo = min(0.0, min(values))
    y_hi = max(values)
    _axes(root, 0, len(labels), y_lo, y_hi, "", y_label, title)
    to_y = _scaler(y_lo, y_hi, _CHART_H - _MARGIN, _MARGIN / 2)
    span = _CHART_W - 1.5 * _MARGIN
    width = span / len(labels)
    for i, (label, value) in enumerate(zip(labels, values)):
        x = _MARGIN + i * width
        top = to_y(value)
        base = to_y(max(0.0, y_lo))
        ET.SubElement(root, "rect", {
            "x": f"{x + width * 0.1:.1f}", "y": f"{min(top, base):.1f}",
            "width": f"{width * 0.8:.1f}", "height": f"{abs(base - top):.1f}",
            "fill": _COLORS[i % len(_COLORS)], "class": "bar",
        })
        _text(root, x + width / 2, _CHART_H - _MARGIN + 16, str(label),
              size=9, anchor="middle")
        _text(root, x + width / 2, min(top, base) - 4, f"{value:.3g}",
              size=9, anchor="middle")
    return root


# ---------------------------------------------------------------------------
# localization frames


_CELL_PX = 40


def maze_frame(maze, truth_xy, mean_xy, particles_xy, step):
    """One frame: grid, true pose, mean prediction, K particle markers."""
    n = maze.n
    size = n * _CELL_PX
    root = _root(size, size + 24)
    ET.SubElement(root, "rect", {"x": "0", "y": "0", "width": str(size),
                                 "height": str(size), "fill": "#ffffff"})
    for r in range(n):
        for c in range(n):
            cell = int(maze.cells[r, c])
            if cell == maze_mod.FREE:
                continue
            fill = "#3b3b3b" if cell == maze_mod.BLACK else "#b8b8b8"
            ET.SubElement(root, "rect", {
                "x": str(c * _CELL_PX), "y": str(r * _CELL_PX),
                "width": str(_CELL_PX), "height": str(_CELL_PX), "fill": fill,
            })

    def px(xy):
        # world x -> column axis, world y -> row axis
        return xy[1] * _CELL_PX, xy[0] * _CELL_PX

    for p in np.atleast_2d(particles_xy):
        cx, cy = px(p)
        ET.SubElement(root, "circle", {
            "cx": f"{cx:.1f}", "cy": f"{cy:.1f}", "r": "4",
            "fill": "#2ca02c", "fill-opacity": "0.5", "class": "particle",
        })
    mx, my = px(mean_xy)
    ET.SubElement(root, "circle", {
        "cx": f"{mx:.1f}", "cy": f"{my:.1f}", "r": "6", "fill": "none",
        "stroke": "#1f77b4", "stroke-width": "2.5", "class": "mean",
    })
    tx, ty = px(truth_xy)
    half = 7
    cross = ET.SubElement(root, "g", {"class": "truth"})
    _line(cross, tx - half, ty - half, tx + half, ty + half, stroke="#d62728", width=2.5)
    _line(cross, tx - half, ty + half, tx + half, ty - half, stroke="#d62728", width=2.5)
    _text(root, 6, size + 16, f"step {step}", size=12)
    return root


def particle_frames(model, traj, out_dir, seed=0, max_frames=None):
    """Run one trajectory in eval mode and write one SVG per step.

    traj: dict with poses/actions/obs arrays. Returns the written paths.
    """
    maze = model.maze
    inputs = maze_mod.encode_inputs(traj["actions"], traj["obs"], maze.n)
    poses = np.asarray(traj["poses"], dtype=np.float64)
    n_steps = inputs.shape[0]
    if max_frames is not None:
        n_steps = min(n_steps, int(max_frames))
    with ad.no_grad():
        outs, _ = model.unroll(model.initial_state(1),
                               inputs[:n_steps, None, :], RngStream(seed),
                               mode="eval")
    paths = []
    for t, out in enumerate(outs):
        mean_xy = maze_mod.decode_position(out.mean_pred.data[0], maze.n)
        particles_xy = out.particle_preds.data[:, :2] * maze.n
        frame = maze_frame(maze, poses[t + 1, :2], mean_xy, particles_xy, t)
        path = f"{out_dir}/frame_{t:03d}.svg"
        write_svg(frame, path)
        paths.append(path)
    return paths
