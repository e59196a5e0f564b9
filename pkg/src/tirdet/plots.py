"""Deterministic SVG chart emitters: PR curves, confusion heatmap, training
curves, protocol comparison bars. Pure string assembly with fixed float
formatting, so identical inputs produce byte-identical documents."""

from __future__ import annotations

import numpy as np

W, H = 640, 480
MARGIN = 56
PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e",
           "#8c564b", "#e377c2", "#7f7f7f")


def _fmt(v):
    return f"{v:.2f}"


def _header(title):
    return [f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" '
            f'height="{H}" viewBox="0 0 {W} {H}">',
            f'<rect width="{W}" height="{H}" fill="white"/>',
            f'<text x="{W / 2:.0f}" y="24" text-anchor="middle" '
            f'font-family="sans-serif" font-size="16">{title}</text>']


def _axes(xlabel, ylabel, x0, x1, y0, y1):
    left, right = MARGIN, W - MARGIN // 2
    top, bottom = 40, H - MARGIN
    parts = [f'<line x1="{left}" y1="{bottom}" x2="{right}" y2="{bottom}" '
             'stroke="black"/>',
             f'<line x1="{left}" y1="{top}" x2="{left}" y2="{bottom}" '
             'stroke="black"/>',
             f'<text x="{(left + right) / 2:.0f}" y="{H - 12}" '
             'text-anchor="middle" font-family="sans-serif" '
             f'font-size="12">{xlabel}</text>',
             f'<text x="16" y="{(top + bottom) / 2:.0f}" '
             'text-anchor="middle" font-family="sans-serif" font-size="12" '
             f'transform="rotate(-90 16 {(top + bottom) / 2:.0f})">'
             f'{ylabel}</text>']
    for i in range(5):
        fx = i / 4
        px = left + fx * (right - left)
        py = bottom - fx * (bottom - top)
        parts.append(f'<text x="{px:.1f}" y="{bottom + 16}" '
                     'text-anchor="middle" font-family="sans-serif" '
                     f'font-size="10">{_fmt(x0 + fx * (x1 - x0))}</text>')
        parts.append(f'<text x="{left - 6}" y="{py:.1f}" '
                     'text-anchor="end" font-family="sans-serif" '
                     f'font-size="10">{_fmt(y0 + fx * (y1 - y0))}</text>')
    return parts, (left, right, top, bottom)


def _polyline(xs, ys, frame, x0, x1, y0, y1, color):
    left, right, top, bottom = frame
    pts = []
    for x, y in zip(xs, ys):
        px = left + (x - x0) / max(x1 - x0, 1e-12) * (right - left)
        py = bottom - (y - y0) / max(y1 - y0, 1e-12) * (bottom - top)
        pts.append(f"{px:.2f},{py:.2f}")
    return (f'<polyline fill="none" stroke="{color}" stroke-width="1.5" '
            f'points="{" ".join(pts)}"/>')


def _legend(labels_colors, frame):
    left, right, top, _ = frame
    parts = []
    for i, (label, color) in enumerate(labels_colors):
        y = top + 14 + 16 * i
        parts.append(f'<rect x="{right - 150}" y="{y - 9}" width="12" '
                     f'height="9" fill="{color}"/>')
        parts.append(f'<text x="{right - 134}" y="{y}" '
                     'font-family="sans-serif" font-size="11">'
                     f'{label}</text>')
    return parts


def line_chart_svg(series, title, xlabel, ylabel, y_range=None):
    """series: list of (label, xs, ys)."""
    all_x = [x for _, xs, _ in series for x in xs] or [0, 1]
    all_y = [y for _, _, ys in series for y in ys] or [0, 1]
    x0, x1 = min(all_x), max(all_x) or 1
    if x0 == x1:
        x1 = x0 + 1
    if y_range:
        y0, y1 = y_range
    else:
        y0, y1 = min(all_y), max(all_y)
        if y0 == y1:
            y1 = y0 + 1
    parts = _header(title)
    axes, frame = _axes(xlabel, ylabel, x0, x1, y0, y1)
    parts += axes
    labels = []
    for i, (label, xs, ys) in enumerate(series):
        color = PALETTE[i % len(PALETTE)]
        parts.append(_polyline(xs, ys, frame, x0, x1, y0, y1, color))
        labels.append((label, color))
    parts += _legend(labels, frame)
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def pr_curves_svg(curves, class_names=(), title="Precision-Recall"):
    """curves: {class_id: PRCurve}; adds a combined mean curve."""
    series = []
    grid = np.linspace(0.0, 1.0, 101)
    interp = []
    for cid in sorted(curves):
        c = curves[cid]
        name = class_names[cid] if cid < len(class_names) else f"class {cid}"
        if len(c.recall) == 0:
            continue
        series.append((name, c.recall.tolist(), c.precision.tolist()))
        env = np.maximum.accumulate(c.precision[::-1])[::-1]
        interp.append(np.interp(grid, c.recall, env, left=env[0] if
                                len(env) else 1.0, right=0.0))
    if interp:
        series.append(("all classes",
                       grid.tolist(), np.mean(interp, 0).tolist()))
    return line_chart_svg(series, title, "recall", "precision",
                          y_range=(0.0, 1.05))


def confusion_svg(matrix, class_names=(), title="Confusion matrix"):
    m = np.asarray(matrix, dtype=np.float64)
    n = m.shape[0]
    names = list(class_names) + ["background"] * (n - len(class_names))
    cell = min((W - 2 * MARGIN) / n, (H - 2 * MARGIN) / n)
    x0, y0 = MARGIN + 40, 60
    peak = m.max() or 1.0
    parts = _header(title)
    for i in range(n):
        for j in range(n):
            frac = m[i, j] / peak
            shade = int(255 - 190 * frac)
            parts.append(
                f'<rect x="{x0 + j * cell:.1f}" y="{y0 + i * cell:.1f}" '
                f'width="{cell:.1f}" height="{cell:.1f}" '
                f'fill="rgb({shade},{shade},255)" stroke="#ccc"/>')
            parts.append(
                f'<text x="{x0 + (j + 0.5) * cell:.1f}" '
                f'y="{y0 + (i + 0.62) * cell:.1f}" text-anchor="middle" '
                f'font-family="sans-serif" font-size="11">'
                f'{int(m[i, j])}</text>')
    for k in range(n):
        parts.append(f'<text x="{x0 - 8}" y="{y0 + (k + 0.6) * cell:.1f}" '
                     'text-anchor="end" font-family="sans-serif" '
                     f'font-size="10">{names[k]}</text>')
        parts.append(f'<text x="{x0 + (k + 0.5) * cell:.1f}" '
                     f'y="{y0 + n * cell + 14:.1f}" text-anchor="middle" '
                     f'font-family="sans-serif" font-size="10">'
                     f'{names[k]}</text>')
    parts.append(f'<text x="{x0 - 36}" y="{y0 + n * cell / 2:.1f}" '
                 'font-family="sans-serif" font-size="11" '
                 f'transform="rotate(-90 {x0 - 36} '
                 f'{y0 + n * cell / 2:.1f})" text-anchor="middle">'
                 'true</text>')
    parts.append(f'<text x="{x0 + n * cell / 2:.1f}" '
                 f'y="{y0 + n * cell + 30:.1f}" text-anchor="middle" '
                 'font-family="sans-serif" font-size="11">predicted</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def training_curves_svg(runlog, title="Training progress"):
    epochs = [r["epoch"] for r in runlog]
    series = [("val mAP@0.5", epochs, [r["val_map50"] for r in runlog]),
              ("train loss", epochs, [r["loss_total"] for r in runlog])]
    return line_chart_svg(series, title, "epoch", "value")


def comparison_bars_svg(values, title="Protocol comparison"):
    """values: {label: number}; bar chart, e.g. T1 vs T2 mAP."""
    parts = _header(title)
    labels = list(values)
    n = max(len(labels), 1)
    peak = max(list(values.values()) + [1e-12])
    span = W - 2 * MARGIN
    bw = span / (2 * n)
    bottom, top = H - MARGIN, 60
    for i, label in enumerate(labels):
        v = values[label]
        x = MARGIN + span * (2 * i + 0.5) / (2 * n)
        h = (bottom - top) * v / peak
        parts.append(f'<rect x="{x:.1f}" y="{bottom - h:.1f}" '
                     f'width="{bw:.1f}" height="{h:.1f}" '
                     f'fill="{PALETTE[i % len(PALETTE)]}"/>')
        parts.append(f'<text x="{x + bw / 2:.1f}" y="{bottom + 16}" '
                     'text-anchor="middle" font-family="sans-serif" '
                     f'font-size="11">{label}</text>')
        parts.append(f'<text x="{x + bw / 2:.1f}" y="{bottom - h - 6:.1f}" '
                     'text-anchor="middle" font-family="sans-serif" '
                     f'font-size="11">{v:.3f}</text>')
    parts.append(f'<line x1="{MARGIN}" y1="{bottom}" x2="{W - MARGIN}" '
                 f'y2="{bottom}" stroke="black"/>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"
