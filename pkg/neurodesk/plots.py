"""
Static SVG figures (embedding maps, FNC heatmaps, overlap-sweep curves) assembled from
string templates, plus optional plotly HTML companions for maps and heatmaps.
"""

from __future__ import annotations

import html
from pathlib import Path
from typing import Optional, Sequence, Union

import matplotlib
import numpy as np
import plotly.graph_objects as go
import plotly.io as pio
from matplotlib.colors import to_hex

from neurodesk.data import DimensionMismatchError

CANVAS = 640
MARGIN = 40
POINT_RADIUS = 4
SPLIT_RING = "#111111"
NEUTRAL = "#BDBDBD"
FONT = "font-family='Arial, sans-serif'"

SEVERITY_ORDER = ("low", "medium", "high")
SEVERITY_PALETTE = {
    "control": NEUTRAL,
    **{level: to_hex(matplotlib.colormaps["YlOrRd"](pos)) for level, pos in zip(SEVERITY_ORDER, (0.3, 0.6, 0.9))},
}


# ==========================================
# 1. Colors
# ==========================================

def class_colors(labels: Sequence) -> dict:
    """Categorical colors in sorted label order (tab10, cycling)."""
    cmap = matplotlib.colormaps["tab10"]
    values = [v.item() if isinstance(v, np.generic) else v for v in labels]
    try:
        ordered = sorted(set(values))
    except TypeError:
        ordered = sorted(set(values), key=str)
    return {v: to_hex(cmap(i % 10)) for i, v in enumerate(ordered)}


def severity_colors(severity: Sequence[str]) -> list[str]:
    unknown = sorted({s for s in severity if s not in SEVERITY_PALETTE})
    if unknown:
        raise ValueError(f"unknown severity levels {unknown}; expected {list(SEVERITY_PALETTE)}")
    return [SEVERITY_PALETTE[s] for s in severity]


def diverging_color(value: float, vmax: float = 1.0) -> str:
    """RdBu_r centered at 0; +vmax maps to the top of the map."""
    cmap = matplotlib.colormaps["RdBu_r"]
    return to_hex(cmap(float(np.clip((value / vmax + 1.0) / 2.0, 0.0, 1.0))))


# ==========================================
# 2. SVG figures
# ==========================================

def _svg(body: list[str], title: str, height: int = CANVAS, width: int = CANVAS) -> str:
    head = (f"<svg xmlns='http://www.w3.org/2000/svg' width='{width}' height='{height}' "
            f"viewBox='0 0 {width} {height}'>")
    caption = f"<text x='{width / 2:.1f}' y='22' text-anchor='middle' {FONT} font-size='15'>{html.escape(title)}</text>"
    return "\n".join([head, "<rect class='background' width='100%' height='100%' fill='#FFFFFF'/>", caption,
                      *body, "</svg>"]) + "\n"


def _to_canvas(positions: np.ndarray) -> np.ndarray:
    """Fit points into the drawing area, same scale on both axes, y pointing up."""
    lo = positions.min(axis=0)
    span = float((positions.max(axis=0) - lo).max())
    span = span if span > 0 else 1.0
    inner = CANVAS - 2 * MARGIN
    xy = (positions - lo) / span * inner + MARGIN
    xy[:, 1] = CANVAS - xy[:, 1]
    return xy


def _legend(entries: list[tuple[str, str]]) -> list[str]:
    out = []
    for i, (name, color) in enumerate(entries):
        y = MARGIN + 18 * i
        out.append(f"<rect class='legend' x='{CANVAS - 130}' y='{y}' width='10' height='10' fill='{color}'/>")
        out.append(f"<text x='{CANVAS - 114}' y='{y + 9}' {FONT} font-size='11'>{html.escape(str(name))}</text>")
    return out


def svg_embedding_map(positions: np.ndarray, labels: Optional[Sequence] = None,
                      split: Optional[Sequence[bool]] = None, severity: Optional[Sequence[str]] = None,
                      title: str = "Embedding map") -> str:
    """
    One <circle> per sample. Color by severity when given, else by class label.
    Samples flagged in `split` (validation) get a dark ring.
    """
    pos = np.asarray(positions, dtype=np.float64)
    if pos.ndim != 2 or pos.shape[1] != 2:
        raise DimensionMismatchError(f"positions must be n x 2, got {pos.shape}")
    n = pos.shape[0]
    for name, column in (("labels", labels), ("split", split), ("severity", severity)):
        if column is not None and len(column) != n:
            raise DimensionMismatchError(f"{name} has {len(column)} entries for {n} points")

    if severity is not None:
        fills = severity_colors(severity)
        legend = [(s, SEVERITY_PALETTE[s]) for s in ("control",) + SEVERITY_ORDER if s in set(severity)]
    elif labels is not None:
        palette = class_colors(labels)
        fills = [palette[v.item() if isinstance(v, np.generic) else v] for v in labels]
        legend = list(palette.items())
    else:
        fills = [to_hex(matplotlib.colormaps["tab10"](0))] * n
        legend = []

    xy = _to_canvas(pos)
    body = []
    for i in range(n):
        ring = f" stroke='{SPLIT_RING}' stroke-width='1.5'" if split is not None and split[i] else ""
        body.append(f"<circle cx='{xy[i, 0]:.2f}' cy='{xy[i, 1]:.2f}' r='{POINT_RADIUS}' "
                    f"fill='{fills[i]}' fill-opacity='0.85'{ring}/>")
    if split is not None:
        legend.append(("validation", SPLIT_RING))
    return _svg(body + _legend(legend), title)


def svg_fnc_heatmap(c: np.ndarray, names: Optional[Sequence[str]] = None, title: str = "FNC") -> str:
    """One <rect class='cell'> per matrix entry on a symmetric diverging scale [-1, 1]."""
    c = np.asarray(c, dtype=np.float64)
    if c.ndim != 2 or c.shape[0] != c.shape[1]:
        raise DimensionMismatchError(f"heatmap needs a square matrix, got {c.shape}")
    n = c.shape[0]
    names = list(names) if names is not None else [str(i + 1) for i in range(n)]
    if len(names) != n:
        raise DimensionMismatchError(f"{len(names)} names for {n} rows")

    cell = (CANVAS - 2 * MARGIN - 60) / n
    body = []
    for i in range(n):
        y = MARGIN + i * cell
        body.append(f"<text x='{MARGIN - 4}' y='{y + cell / 2 + 4:.2f}' text-anchor='end' {FONT} "
                    f"font-size='10'>{html.escape(names[i])}</text>")
        for j in range(n):
            x = MARGIN + j * cell
            body.append(f"<rect class='cell' data-i='{i}' data-j='{j}' x='{x:.2f}' y='{y:.2f}' "
                        f"width='{cell:.2f}' height='{cell:.2f}' fill='{diverging_color(c[i, j])}'/>")

    # color scale
    bar_x = CANVAS - MARGIN - 30
    steps = 21
    height = (CANVAS - 2 * MARGIN) / steps
    for k in range(steps):
        value = 1.0 - 2.0 * k / (steps - 1)
        body.append(f"<rect class='scale' x='{bar_x}' y='{MARGIN + k * height:.2f}' width='14' "
                    f"height='{height:.2f}' fill='{diverging_color(value)}'/>")
    body.append(f"<text x='{bar_x + 18}' y='{MARGIN + 8}' {FONT} font-size='10'>+1</text>")
    body.append(f"<text x='{bar_x + 18}' y='{CANVAS - MARGIN}' {FONT} font-size='10'>-1</text>")
    return _svg(body, title)


def svg_sweep_curves(levels: Sequence[float], series: dict[str, Sequence[float]],
                     title: str = "Correlation vs overlap", y_range: tuple[float, float] = (0.0, 1.0)) -> str:
    """One <polyline> per named series over the overlap levels."""
    x = np.asarray(levels, dtype=np.float64)
    if x.size == 0:
        raise ValueError("sweep plot needs at least one level")
    lo, hi = y_range
    x_span = float(x.max() - x.min()) or 1.0
    inner = CANVAS - 2 * MARGIN
    palette = class_colors(list(series))

    body = [f"<line x1='{MARGIN}' y1='{CANVAS - MARGIN}' x2='{CANVAS - MARGIN}' y2='{CANVAS - MARGIN}' stroke='#444'/>",
            f"<line x1='{MARGIN}' y1='{MARGIN}' x2='{MARGIN}' y2='{CANVAS - MARGIN}' stroke='#444'/>"]
    for name, values in series.items():
        y = np.asarray(values, dtype=np.float64)
        if y.size != x.size:
            raise DimensionMismatchError(f"series {name!r} has {y.size} values for {x.size} levels")
        px = MARGIN + (x - x.min()) / x_span * inner
        py = CANVAS - MARGIN - (np.clip(y, lo, hi) - lo) / (hi - lo) * inner
        points = " ".join(f"{a:.2f},{b:.2f}" for a, b in zip(px, py))
        body.append(f"<polyline fill='none' stroke='{palette[name]}' stroke-width='2' points='{points}'/>")
    return _svg(body + _legend(list(palette.items())), title)


def write_svg(text: str, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8")
    return path


# ==========================================
# 3. Interactive HTML companions
# ==========================================

def html_embedding_map(positions: np.ndarray, labels: Optional[Sequence] = None,
                       title: str = "Embedding map") -> str:
    pos = np.asarray(positions, dtype=np.float64)
    fig = go.Figure()
    if labels is None:
        fig.add_trace(go.Scatter(x=pos[:, 0], y=pos[:, 1], mode="markers", name="samples"))
    else:
        labels = np.asarray(labels)
        for value, color in class_colors(labels).items():
            keep = np.array([str(v) == str(value) for v in labels])
            fig.add_trace(go.Scatter(
                x=pos[keep, 0], y=pos[keep, 1], mode="markers", name=str(value),
                marker=dict(color=color, size=7, line=dict(width=0)),
                hovertemplate=f"class {value}<br>(%{{x:.2f}}, %{{y:.2f}})<extra></extra>",
            ))
    fig.update_layout(title=title, template="plotly_white", yaxis=dict(scaleanchor="x"),
                      margin=dict(l=20, r=20, t=50, b=20))
    return pio.to_html(fig, full_html=False, include_plotlyjs="cdn", div_id="embedding-map")


def html_fnc_heatmap(c: np.ndarray, title: str = "FNC") -> str:
    fig = go.Figure(go.Heatmap(z=np.asarray(c, dtype=np.float64), zmin=-1.0, zmax=1.0, colorscale="RdBu",
                               reversescale=True))
    fig.update_layout(title=title, template="plotly_white", yaxis=dict(autorange="reversed"))
    return pio.to_html(fig, full_html=False, include_plotlyjs="cdn", div_id="fnc-heatmap")


def write_html(fragment: str, path: Union[str, Path], title: str) -> Path:
    path = Path(path)
    page = ("<html><head><meta charset='utf-8'>"
            f"<title>{html.escape(title)}</title></head><body>\n{fragment}\n</body></html>\n")
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(page, encoding="utf-8")
    return path
