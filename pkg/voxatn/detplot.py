"""DET curves as standalone SVG, APCER on x and BPCER on y, both on log axes."""
from __future__ import annotations

import math
from typing import Dict, List, Optional, Sequence, Tuple

from lxml import etree

from .padeval import DetPoint

SVG_NS = "http://www.w3.org/2000/svg"
NSMAP = {None: SVG_NS}

AXIS_MIN = 0.01  # percent
AXIS_MAX = 100.0
WIDTH, HEIGHT = 520, 480
LEFT, RIGHT, TOP, BOTTOM = 70, 20, 30, 60
PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f")


def _elm(parent, tag: str, text: Optional[str] = None, attrib: Optional[Dict[str, str]] = None):
    elem = etree.SubElement(parent, f"{{{SVG_NS}}}{tag}", attrib=attrib or {})
    if text is not None:
        elem.text = text
    return elem


def axis_transform(apcer: float, bpcer: float) -> Tuple[float, float]:
    """Pixel position of a (APCER, BPCER) pair; rates below AXIS_MIN sit on the axis."""
    span = math.log10(AXIS_MAX) - math.log10(AXIS_MIN)

    def frac(v: float) -> float:
        v = min(max(v, AXIS_MIN), AXIS_MAX)
        return (math.log10(v) - math.log10(AXIS_MIN)) / span

    plot_w = WIDTH - LEFT - RIGHT
    plot_h = HEIGHT - TOP - BOTTOM
    return round(LEFT + frac(apcer) * plot_w, 3), round(TOP + (1.0 - frac(bpcer)) * plot_h, 3)


def _ticks() -> List[float]:
    lo, hi = int(round(math.log10(AXIS_MIN))), int(round(math.log10(AXIS_MAX)))
    return [10.0**e for e in range(lo, hi + 1)]


def _tick_label(v: float) -> str:
    return f"{v:g}"


def render_det_svg(curves: Sequence[Tuple[str, Sequence[DetPoint]]], title: str = "DET curve") -> bytes:
    """One polyline per (label, points) curve; a legend is added when there is more than one."""
    root = etree.Element(
        f"{{{SVG_NS}}}svg",
        nsmap=NSMAP,
        attrib={"width": str(WIDTH), "height": str(HEIGHT), "viewBox": f"0 0 {WIDTH} {HEIGHT}"},
    )
    _elm(root, "title", title)
    _elm(root, "rect", attrib={"x": "0", "y": "0", "width": str(WIDTH), "height": str(HEIGHT), "fill": "white"})

    axes = _elm(root, "g", attrib={"id": "axes", "stroke": "#999", "stroke-width": "0.5", "font-size": "11"})
    for v in _ticks():
        x, _ = axis_transform(v, AXIS_MIN)
        _, y = axis_transform(AXIS_MIN, v)
        _elm(axes, "line", attrib={"x1": str(x), "y1": str(TOP), "x2": str(x), "y2": str(HEIGHT - BOTTOM)})
        _elm(axes, "line", attrib={"x1": str(LEFT), "y1": str(y), "x2": str(WIDTH - RIGHT), "y2": str(y)})
        _elm(axes, "text", _tick_label(v), {"x": str(x), "y": str(HEIGHT - BOTTOM + 16), "text-anchor": "middle", "stroke": "none"})
        _elm(axes, "text", _tick_label(v), {"x": str(LEFT - 6), "y": str(y + 4), "text-anchor": "end", "stroke": "none"})
    _elm(root, "text", "APCER (%)", {"x": str((LEFT + WIDTH - RIGHT) / 2), "y": str(HEIGHT - 15), "text-anchor": "middle"})
    _elm(
        root,
        "text",
        "BPCER (%)",
        {"x": "18", "y": str((TOP + HEIGHT - BOTTOM) / 2), "text-anchor": "middle",
         "transform": f"rotate(-90 18 {(TOP + HEIGHT - BOTTOM) / 2})"},
    )

    for i, (label, points) in enumerate(curves):
        coords = " ".join("{},{}".format(*axis_transform(p.apcer, p.bpcer)) for p in points)
        _elm(
            root,
            "polyline",
            attrib={
                "points": coords,
                "fill": "none",
                "stroke": PALETTE[i % len(PALETTE)],
                "stroke-width": "1.5",
                "data-label": label,
            },
        )

    if len(curves) > 1:
        legend = _elm(root, "g", attrib={"id": "legend", "font-size": "11"})
        for i, (label, _points) in enumerate(curves):
            y = TOP + 12 + 16 * i
            _elm(legend, "rect", attrib={"x": str(WIDTH - RIGHT - 150), "y": str(y - 8), "width": "12", "height": "3",
                                          "fill": PALETTE[i % len(PALETTE)]})
            _elm(legend, "text", label, {"x": str(WIDTH - RIGHT - 132), "y": str(y)})

    return etree.tostring(root, xml_declaration=True, encoding="UTF-8", pretty_print=True)


def polyline_points(svg: bytes) -> List[List[Tuple[float, float]]]:
    """Pixel coordinates of every polyline in an SVG produced by render_det_svg."""
    root = etree.fromstring(svg)
    out = []
    for line in root.iter(f"{{{SVG_NS}}}polyline"):
        pairs = [tuple(float(v) for v in pt.split(",")) for pt in line.get("points", "").split()]
        out.append(pairs)
    return out
