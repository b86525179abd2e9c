"""CSV and SVG writers."""

from __future__ import annotations

import csv
import io
import math
from pathlib import Path
from xml.sax.saxutils import escape

import numpy as np

TRAJECTORY_META = ("iters", "converged", "dt")
ADAPTIVE_META = ("dt_star", "accepted", "rejections")


def fmt(v) -> str:
    """Round-trip text for a CSV cell (17 significant digits for floats)."""
    if isinstance(v, (bool, np.bool_)):
        return "1" if v else "0"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return format(float(v), ".17g")
    return str(v)


def write_csv(path, header, rows) -> int:
    """Write ``rows`` below ``header``; returns the number of data rows."""
    path = Path(path)
    n = 0
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([fmt(v) for v in row])
            n += 1
    return n


def read_csv(path) -> tuple[list[str], dict[str, np.ndarray]]:
    """Header and column arrays; numeric columns become floats, others strings."""
    text = Path(path).read_text()
    reader = csv.reader(io.StringIO(text))
    try:
        header = next(reader)
    except StopIteration:
        raise ValueError(f"{path}: empty file") from None
    rows = [r for r in reader if r]
    cols = {}
    for k, name in enumerate(header):
        cells = [r[k] for r in rows]
        try:
            cols[name] = np.array([float(c) for c in cells], dtype=float)
        except ValueError:
            # text columns such as the scheme name
            cols[name] = np.array(cells, dtype=str)
    return header, cols


def trajectory_header(traj) -> list[str]:
    head = ["t", *traj.labels, *TRAJECTORY_META]
    if hasattr(traj, "dt_star") and traj.dt_star is not None:
        head += ADAPTIVE_META
    return head


def trajectory_rows(traj):
    adaptive = hasattr(traj, "dt_star") and traj.dt_star is not None
    for k in range(len(traj.times)):
        row = [float(traj.times[k]), *map(float, traj.states[k]), int(traj.iterations[k]),
               bool(traj.converged[k]), float(traj.dt[k])]
        if adaptive:
            row += [float(traj.dt_star[k]), bool(traj.accepted[k]), int(traj.rejections[k])]
        yield row


def write_trajectory(path, traj) -> int:
    return write_csv(path, trajectory_header(traj), trajectory_rows(traj))


# --------------------------------------------------------------------------
# SVG

WIDTH, HEIGHT = 640, 480
MARGIN = dict(left=70, right=20, top=30, bottom=50)


def _nice_ticks(lo: float, hi: float, n: int = 5) -> list[float]:
    if not (math.isfinite(lo) and math.isfinite(hi)):
        return []
    if hi <= lo:
        return [lo]
    raw = (hi - lo) / n
    mag = 10 ** math.floor(math.log10(raw))
    step = min((m * mag for m in (1, 2, 5, 10) if m * mag >= raw), default=10 * mag)
    first = math.ceil(lo / step) * step
    ticks = []
    k = 0
    while first + k * step <= hi * (1 + 1e-12) + 1e-300:
        ticks.append(round(first + k * step, 12))
        k += 1
    return ticks


def _num(v: float) -> str:
    return format(v, ".6g")


def render_svg(x, y, kind: str = "scatter", xlabel: str = "x", ylabel: str = "y", title: str = "") -> str:
    """Minimal standalone SVG with axes, tick labels and one mark per point."""
    if kind not in ("scatter", "line"):
        raise ValueError("kind must be 'scatter' or 'line'")
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    ok = np.isfinite(x) & np.isfinite(y)
    x, y = x[ok], y[ok]
    if x.size:
        x0, x1, y0, y1 = x.min(), x.max(), y.min(), y.max()
    else:
        x0, x1, y0, y1 = 0.0, 1.0, 0.0, 1.0
    if x1 == x0:
        x0, x1 = x0 - 0.5, x1 + 0.5
    if y1 == y0:
        y0, y1 = y0 - 0.5, y1 + 0.5
    pl, pr, pt, pb = MARGIN["left"], WIDTH - MARGIN["right"], MARGIN["top"], HEIGHT - MARGIN["bottom"]

    def sx(v):
        return pl + (v - x0) / (x1 - x0) * (pr - pl)

    def sy(v):
        return pb - (v - y0) / (y1 - y0) * (pb - pt)

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
           f'viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="11">',
           f'<rect x="0" y="0" width="{WIDTH}" height="{HEIGHT}" fill="white"/>']
    if title:
        out.append(f'<text x="{WIDTH / 2:.2f}" y="18" text-anchor="middle" font-size="13">{escape(title)}</text>')
    out.append(f'<line x1="{pl}" y1="{pb}" x2="{pr}" y2="{pb}" stroke="black"/>')
    out.append(f'<line x1="{pl}" y1="{pb}" x2="{pl}" y2="{pt}" stroke="black"/>')
    for t in _nice_ticks(x0, x1):
        px = sx(t)
        out.append(f'<line x1="{px:.2f}" y1="{pb}" x2="{px:.2f}" y2="{pb + 5}" stroke="black"/>')
        out.append(f'<text x="{px:.2f}" y="{pb + 18}" text-anchor="middle">{_num(t)}</text>')
    for t in _nice_ticks(y0, y1):
        py = sy(t)
        out.append(f'<line x1="{pl - 5}" y1="{py:.2f}" x2="{pl}" y2="{py:.2f}" stroke="black"/>')
        out.append(f'<text x="{pl - 8}" y="{py + 4:.2f}" text-anchor="end">{_num(t)}</text>')
    out.append(f'<text x="{(pl + pr) / 2:.2f}" y="{HEIGHT - 12}" text-anchor="middle">{escape(xlabel)}</text>')
    out.append(f'<text x="16" y="{(pt + pb) / 2:.2f}" text-anchor="middle" '
               f'transform="rotate(-90 16 {(pt + pb) / 2:.2f})">{escape(ylabel)}</text>')
    if kind == "scatter":
        out.append('<g fill="steelblue">')
        out.extend(f'<circle cx="{sx(a):.2f}" cy="{sy(b):.2f}" r="1.2"/>' for a, b in zip(x, y))
        out.append("</g>")
    elif x.size:
        pts = " ".join(f"{sx(a):.2f},{sy(b):.2f}" for a, b in zip(x, y))
        out.append(f'<polyline fill="none" stroke="steelblue" stroke-width="1" points="{pts}"/>')
    out.append("</svg>")
    return "\n".join(out) + "\n"
