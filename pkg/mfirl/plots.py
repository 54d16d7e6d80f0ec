"""Primitive SVG line charts: two axes and one polyline per series."""

import math
import xml.etree.ElementTree as ET
from pathlib import Path
from typing import Mapping, Sequence, Tuple, Optional

from .exceptions import ContractViolationError

SVG_NS = "http://www.w3.org/2000/svg"
PALETTE = ("#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf")
MARGIN = 40


def _finite_points(xs: Sequence[float], ys: Sequence[float]):
    return [(float(x), float(y)) for x, y in zip(xs, ys) if math.isfinite(float(x)) and math.isfinite(float(y))]


def line_chart_svg(
    series: Mapping[str, Tuple[Sequence[float], Sequence[float]]],
    title: str = "",
    x_label: str = "iter",
    y_label: str = "",
    width: int = 640,
    height: int = 400,
) -> str:
    """
    Render named (xs, ys) series as an SVG document.

    Non-finite points (skipped iterations log NaN) are dropped. Series order
    determines colour.

    Args:
        series: Name → (xs, ys)
        title: Chart title
        x_label: Horizontal axis label
        y_label: Vertical axis label
        width: Canvas width in px
        height: Canvas height in px

    Returns:
        SVG text with exactly one <polyline> per series

    Raises:
        ContractViolationError: If a series has mismatched lengths
    """
    cleaned = {}
    for name, (xs, ys) in series.items():
        if len(xs) != len(ys):
            raise ContractViolationError(f"series '{name}' has {len(xs)} x values and {len(ys)} y values")
        cleaned[name] = _finite_points(xs, ys)
    points = [p for pts in cleaned.values() for p in pts]
    x_lo, x_hi = (min(p[0] for p in points), max(p[0] for p in points)) if points else (0.0, 1.0)
    y_lo, y_hi = (min(p[1] for p in points), max(p[1] for p in points)) if points else (0.0, 1.0)
    if x_hi == x_lo:
        x_hi = x_lo + 1.0
    if y_hi == y_lo:
        y_hi = y_lo + 1.0
    plot_w, plot_h = width - 2 * MARGIN, height - 2 * MARGIN

    def to_px(x: float, y: float) -> str:
        px = MARGIN + (x - x_lo) / (x_hi - x_lo) * plot_w
        py = height - MARGIN - (y - y_lo) / (y_hi - y_lo) * plot_h
        return f"{px:.2f},{py:.2f}"

    ET.register_namespace("", SVG_NS)
    root = ET.Element(f"{{{SVG_NS}}}svg", {"width": str(width), "height": str(height), "viewBox": f"0 0 {width} {height}"})
    if title:
        ET.SubElement(root, f"{{{SVG_NS}}}title").text = title
    axis = {"stroke": "#000000", "stroke-width": "1"}
    ET.SubElement(root, f"{{{SVG_NS}}}line", {"x1": str(MARGIN), "y1": str(height - MARGIN), "x2": str(width - MARGIN), "y2": str(height - MARGIN), **axis})
    ET.SubElement(root, f"{{{SVG_NS}}}line", {"x1": str(MARGIN), "y1": str(MARGIN), "x2": str(MARGIN), "y2": str(height - MARGIN), **axis})
    labels = (
        (width / 2, height - 8, x_label),
        (8, MARGIN - 12, f"{y_label} [{y_lo:.4g}, {y_hi:.4g}]".strip()),
        (width - MARGIN, height - MARGIN + 16, f"{x_hi:.4g}"),
    )
    for x, y, text in labels:
        node = ET.SubElement(root, f"{{{SVG_NS}}}text", {"x": f"{x:.0f}", "y": f"{y:.0f}", "font-size": "11"})
        node.text = text
    for k, (name, pts) in enumerate(cleaned.items()):
        line = ET.SubElement(root, f"{{{SVG_NS}}}polyline", {
            "fill": "none", "stroke": PALETTE[k % len(PALETTE)], "stroke-width": "1.5",
            "points": " ".join(to_px(x, y) for x, y in pts),
        })
        ET.SubElement(line, f"{{{SVG_NS}}}title").text = name
    return ET.tostring(root, encoding="unicode")


def write_line_chart(path, series, **kwargs) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(line_chart_svg(series, **kwargs))
    return path


def log_series(frames: Mapping[str, "object"], column: str, x_column: str = "iter") -> Mapping[str, Tuple[Sequence[float], Sequence[float]]]:
    """Name → (iter, column) pairs from per-seed log DataFrames."""
    return {name: (frame[x_column].tolist(), frame[column].tolist()) for name, frame in frames.items() if column in frame}


def chart_title(metric: str, env: Optional[str] = None) -> str:
    return f"{env} {metric}" if env else metric
