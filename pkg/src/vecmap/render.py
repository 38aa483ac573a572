"""SVG rendering of scenes and predictions in metric BEV coordinates."""

from __future__ import annotations

from .geometry import BOUNDARY, CLASS_NAMES, DIVIDER, PED_CROSSING, MapInstance, PerceptionRange

COLORS = {BOUNDARY: "#d62728", DIVIDER: "#ff7f0e", PED_CROSSING: "#1f4fd6"}
PX_PER_M = 10.0
MARGIN = 50.0
LEGEND_W = 150.0


def _f(v: float) -> str:
    return f"{v:.2f}"


def render_svg(gt: list[MapInstance], rng: PerceptionRange, pred: list[MapInstance] | None = None,
               title: str | None = None) -> str:
    """GT drawn solid, predictions dashed in the same class hue; +y points up the page."""
    w = (rng.x_max - rng.x_min) * PX_PER_M
    h = (rng.y_max - rng.y_min) * PX_PER_M
    width, height = w + 2 * MARGIN + LEGEND_W, h + 2 * MARGIN

    def px(x, y):
        return MARGIN + (x - rng.x_min) * PX_PER_M, MARGIN + (rng.y_max - y) * PX_PER_M

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{_f(width)}" height="{_f(height)}" '
           f'viewBox="0 0 {_f(width)} {_f(height)}" font-family="sans-serif" font-size="11">',
           f'<rect x="0" y="0" width="{_f(width)}" height="{_f(height)}" fill="white"/>']
    if title:
        out.append(f'<text x="{_f(MARGIN)}" y="{_f(MARGIN / 2)}" font-size="13">{title}</text>')

    # axes: frame, ticks every 5 m, labels every 10 m
    out.append(f'<g class="axes" stroke="#444" stroke-width="1" fill="none">')
    out.append(f'<rect x="{_f(MARGIN)}" y="{_f(MARGIN)}" width="{_f(w)}" height="{_f(h)}"/>')
    labels = []
    for xm in range(int(rng.x_min) // 5 * 5, int(rng.x_max) + 1, 5):
        if rng.x_min <= xm <= rng.x_max:
            x0, y0 = px(xm, rng.y_min)
            out.append(f'<line x1="{_f(x0)}" y1="{_f(y0)}" x2="{_f(x0)}" y2="{_f(y0 + 5)}"/>')
            if xm % 10 == 0:
                labels.append(f'<text x="{_f(x0)}" y="{_f(y0 + 18)}" text-anchor="middle">{xm}</text>')
    for ym in range(int(rng.y_min) // 5 * 5, int(rng.y_max) + 1, 5):
        if rng.y_min <= ym <= rng.y_max:
            x0, y0 = px(rng.x_min, ym)
            out.append(f'<line x1="{_f(x0 - 5)}" y1="{_f(y0)}" x2="{_f(x0)}" y2="{_f(y0)}"/>')
            if ym % 10 == 0:
                labels.append(f'<text x="{_f(x0 - 8)}" y="{_f(y0 + 4)}" text-anchor="end">{ym}</text>')
    out.append("</g>")
    out.append('<g class="labels" fill="#222">')
    out += labels
    out.append(f'<text x="{_f(MARGIN + w / 2)}" y="{_f(height - 10)}" text-anchor="middle">x (m)</text>')
    out.append(f'<text x="12" y="{_f(MARGIN + h / 2)}" text-anchor="middle" '
               f'transform="rotate(-90 12 {_f(MARGIN + h / 2)})">y (m)</text>')
    out.append("</g>")

    def path(inst: MapInstance, dashed: bool, cls: str) -> str:
        pts = [px(float(x), float(y)) for x, y in inst.points]
        d = "M " + " L ".join(f"{_f(a)} {_f(b)}" for a, b in pts) + (" Z" if inst.closed else "")
        dash = ' stroke-dasharray="6 4"' if dashed else ""
        return (f'<path class="{cls} {CLASS_NAMES[inst.class_id]}" d="{d}" fill="none" '
                f'stroke="{COLORS[inst.class_id]}" stroke-width="2"{dash}/>')

    out.append('<g class="gt">')
    out += [path(i, False, "gt") for i in gt]
    out.append("</g>")
    if pred:
        out.append('<g class="pred">')
        out += [path(i, True, "pred") for i in pred]
        out.append("</g>")

    lx, ly = MARGIN + w + 20, MARGIN + 10
    out.append('<g class="legend">')
    entries = [(c, False, CLASS_NAMES[c]) for c in (BOUNDARY, DIVIDER, PED_CROSSING)]
    if pred:
        entries += [(c, True, CLASS_NAMES[c] + " (pred)") for c in (BOUNDARY, DIVIDER, PED_CROSSING)]
    for k, (c, dashed, name) in enumerate(entries):
        y = ly + 18 * k
        dash = ' stroke-dasharray="6 4"' if dashed else ""
        out.append(f'<line x1="{_f(lx)}" y1="{_f(y)}" x2="{_f(lx + 24)}" y2="{_f(y)}" '
                   f'stroke="{COLORS[c]}" stroke-width="2"{dash}/>')
        out.append(f'<text x="{_f(lx + 30)}" y="{_f(y + 4)}">{name}</text>')
    out.append("</g>")
    out.append("</svg>")
    return "\n".join(out) + "\n"
