"""Self-contained SVG line charts for WER-vs-K and WER-vs-SNR figures."""

from __future__ import annotations

import math
from html import escape

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b")
WIDTH, HEIGHT = 560, 380
MARGIN = {"left": 70, "right": 130, "top": 40, "bottom": 60}


def _nice_max(v: float) -> float:
    if v <= 0:
        return 1.0
    mag = 10 ** math.floor(math.log10(v))
    for m in (1, 2, 2.5, 5, 10):
        if v <= m * mag:
            return m * mag
    return 10 * mag


def line_chart(series: dict[str, list[float | None]], x_labels: list[str], title: str,
               x_title: str, y_title: str) -> str:
    """Categorical-x line chart; ``None`` values leave a gap in a series."""
    if not x_labels:
        raise ValueError("line chart needs at least one x position")
    pw = WIDTH - MARGIN["left"] - MARGIN["right"]
    ph = HEIGHT - MARGIN["top"] - MARGIN["bottom"]
    values = [v for ys in series.values() for v in ys if v is not None]
    y_max = _nice_max(max(values, default=1.0))
    n = len(x_labels)

    def px(i: int) -> float:
        return MARGIN["left"] + (pw * (i + 0.5) / n)

    def py(v: float) -> float:
        return MARGIN["top"] + ph * (1 - v / y_max)

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
           f'viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">',
           f'<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
           f'<text x="{WIDTH / 2:.1f}" y="22" text-anchor="middle" font-size="14">{escape(title)}</text>']
    x0, y0 = MARGIN["left"], MARGIN["top"] + ph
    out.append(f'<line x1="{x0}" y1="{y0}" x2="{x0 + pw}" y2="{y0}" stroke="black"/>')
    out.append(f'<line x1="{x0}" y1="{MARGIN["top"]}" x2="{x0}" y2="{y0}" stroke="black"/>')
    for k in range(6):
        v = y_max * k / 5
        y = py(v)
        out.append(f'<line x1="{x0 - 4}" y1="{y:.1f}" x2="{x0 + pw}" y2="{y:.1f}" stroke="#ddd"/>')
        out.append(f'<text x="{x0 - 8}" y="{y + 4:.1f}" text-anchor="end">{v:g}</text>')
    for i, lab in enumerate(x_labels):
        out.append(f'<text x="{px(i):.1f}" y="{y0 + 18}" text-anchor="middle">{escape(lab)}</text>')
    out.append(f'<text x="{x0 + pw / 2:.1f}" y="{HEIGHT - 15}" text-anchor="middle">{escape(x_title)}</text>')
    out.append(f'<text transform="translate(18,{MARGIN["top"] + ph / 2:.1f}) rotate(-90)" '
               f'text-anchor="middle">{escape(y_title)}</text>')
    for s, (name, ys) in enumerate(series.items()):
        color = PALETTE[s % len(PALETTE)]
        pts = [(px(i), py(v)) for i, v in enumerate(ys) if v is not None]
        if len(pts) > 1:
            path = " ".join(f"{x:.1f},{y:.1f}" for x, y in pts)
            out.append(f'<polyline points="{path}" fill="none" stroke="{color}" stroke-width="2"/>')
        for x, y in pts:
            out.append(f'<circle cx="{x:.1f}" cy="{y:.1f}" r="3.5" fill="{color}"/>')
        ly = MARGIN["top"] + 10 + 20 * s
        lx = x0 + pw + 15
        out.append(f'<line x1="{lx}" y1="{ly}" x2="{lx + 20}" y2="{ly}" stroke="{color}" stroke-width="2"/>')
        out.append(f'<text x="{lx + 26}" y="{ly + 4}">{escape(name)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def wer_vs_k(series: dict[str, dict[int, float]]) -> str:
    ks = sorted({k for d in series.values() for k in d})
    return line_chart({name: [d.get(k) for k in ks] for name, d in series.items()}, [str(k) for k in ks],
                      "WER vs compression rate", "compression rate K", "WER (%)")


def wer_vs_snr(series: dict[str, dict[float, float]]) -> str:
    snrs = sorted({s for d in series.values() for s in d}, key=lambda s: (math.isinf(s), s))
    labels = ["clean" if math.isinf(s) else f"{s:g}" for s in snrs]
    return line_chart({name: [d.get(s) for s in snrs] for name, d in series.items()}, labels,
                      "WER vs acoustic noise", "SNR (dB)", "WER (%)")
