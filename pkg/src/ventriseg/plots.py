"""Deterministic SVG report plots: RAVE box plots and Bland-Altman panels.

Every number is printed with a fixed precision, so the same rows always
produce the same bytes.
"""

from __future__ import annotations

import numpy as np

from .data import PHASES, STRUCTURES
from .metrics import bland_altman
from .tensor import percentile

INTERRATER_LOA_ML = {"lv_endo": 27.0}     # reference limits drawn on the agreement plot
IQR_WHISKER = 1.5


def box_stats(values):
    """Median, quartiles, whiskers and outliers of ``values``.

    Whiskers end at the most extreme data points still within 1.5
    interquartile ranges of the box; anything beyond is an outlier.
    """
    v = np.sort(np.asarray(values, dtype=np.float64))
    q1, med, q3 = (percentile(v, p) for p in (25, 50, 75))
    iqr = q3 - q1
    lo_fence, hi_fence = q1 - IQR_WHISKER * iqr, q3 + IQR_WHISKER * iqr
    inside = v[(v >= lo_fence) & (v <= hi_fence)]
    return {"q1": q1, "median": med, "q3": q3,
            "whisker_low": float(inside.min()), "whisker_high": float(inside.max()),
            "outliers": [float(x) for x in v if x < lo_fence or x > hi_fence]}


def _f(x):
    return f"{x:.2f}"


def _svg(width, height, body):
    head = (f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
            f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">\n')
    return head + "".join(body) + "</svg>\n"


def _groups(rows):
    out = []
    for s in STRUCTURES:
        for ph in PHASES:
            sel = [r for r in rows if r.structure == s and r.phase == ph]
            if sel:
                out.append((f"{s} {ph}", sel))
    return out


def boxplot_svg(rows, title="RAVE by structure and phase"):
    """One box per (structure, phase) of the RAVE values in ``rows``."""
    groups = _groups(rows)
    if not groups:
        raise ValueError("no rows to plot")
    W, H, left, top, bottom = 80 + 90 * len(groups), 320, 60, 30, 50
    ph = H - top - bottom
    stats = [(name, box_stats([r.rave for r in sel])) for name, sel in groups]
    ymax = max(max([s["whisker_high"]] + s["outliers"]) for _, s in stats)
    ymax = ymax * 1.1 if ymax > 0 else 1.0

    def y(v):
        return top + ph * (1.0 - v / ymax)

    body = [f'<text x="{W / 2:.2f}" y="18" text-anchor="middle">{title}</text>\n',
            f'<line x1="{left}" y1="{top}" x2="{left}" y2="{top + ph}" stroke="black"/>\n']
    for k in range(5):
        v = ymax * k / 4
        body.append(f'<text x="{left - 4}" y="{_f(y(v) + 4)}" text-anchor="end">{v:.3f}</text>\n')
    for i, (name, s) in enumerate(stats):
        cx = left + 45 + 90 * i
        body.append(f'<line x1="{cx}" y1="{_f(y(s["whisker_low"]))}" x2="{cx}" '
                    f'y2="{_f(y(s["whisker_high"]))}" stroke="black"/>\n')
        for key in ("whisker_low", "whisker_high"):
            body.append(f'<line x1="{cx - 12}" y1="{_f(y(s[key]))}" x2="{cx + 12}" '
                        f'y2="{_f(y(s[key]))}" stroke="black"/>\n')
        body.append(f'<rect x="{cx - 25}" y="{_f(y(s["q3"]))}" width="50" '
                    f'height="{_f(y(s["q1"]) - y(s["q3"]))}" fill="#cfe0f3" stroke="black"/>\n')
        body.append(f'<line x1="{cx - 25}" y1="{_f(y(s["median"]))}" x2="{cx + 25}" '
                    f'y2="{_f(y(s["median"]))}" stroke="#c00000" stroke-width="2"/>\n')
        for o in s["outliers"]:
            body.append(f'<circle cx="{cx}" cy="{_f(y(o))}" r="2.5" fill="none" stroke="black"/>\n')
        body.append(f'<text x="{cx}" y="{H - bottom + 18}" text-anchor="middle">{name}</text>\n')
    return _svg(W, H, body)


def bland_altman_svg(rows, title="Bland-Altman: predicted minus truth (mL)"):
    """One agreement panel per structure, ED and ES pooled."""
    panels = []
    for s in STRUCTURES:
        sel = [r for r in rows if r.structure == s]
        if len(sel) >= 2:
            panels.append((s, sel))
    if not panels:
        raise ValueError("need at least two rows of one structure")
    PW, PH, margin = 300, 240, 50
    W, H = margin + PW * len(panels) + 20, PH + 2 * margin
    body = [f'<text x="{W / 2:.2f}" y="18" text-anchor="middle">{title}</text>\n']
    for i, (s, sel) in enumerate(panels):
        x0 = margin + PW * i
        means = np.array([(r.v_truth + r.v_pred) / 2 for r in sel])
        diffs = np.array([r.v_pred - r.v_truth for r in sel])
        st = bland_altman([(r.v_truth, r.v_pred) for r in sel])
        ref = INTERRATER_LOA_ML.get(s)
        span = max(np.abs(diffs).max(), abs(st.loa_low_mL), abs(st.loa_high_mL), ref or 0.0)
        span = span * 1.15 if span > 0 else 1.0
        xlo, xhi = float(means.min()), float(means.max())
        if xhi <= xlo:
            xlo, xhi = xlo - 1.0, xhi + 1.0
        w, h = PW - 40, PH

        def px(v):
            return x0 + 10 + w * (v - xlo) / (xhi - xlo)

        def py(v):
            return margin + h * (0.5 - v / (2 * span))

        body.append(f'<rect x="{x0}" y="{margin}" width="{w + 20}" height="{h}" fill="none" '
                    f'stroke="black"/>\n')
        body.append(f'<text x="{x0 + (w + 20) / 2:.2f}" y="{margin - 8}" '
                    f'text-anchor="middle">{s} (n={st.n})</text>\n')
        lines = [(st.bias_mL, "#c00000", ""), (st.loa_low_mL, "#404040", ' stroke-dasharray="4,3"'),
                 (st.loa_high_mL, "#404040", ' stroke-dasharray="4,3"')]
        if ref is not None:
            lines += [(ref, "#2a7f2a", ' stroke-dasharray="1,3"'),
                      (-ref, "#2a7f2a", ' stroke-dasharray="1,3"')]
        for v, color, dash in lines:
            body.append(f'<line x1="{x0}" y1="{_f(py(v))}" x2="{x0 + w + 20}" y2="{_f(py(v))}" '
                        f'stroke="{color}"{dash}/>\n')
            body.append(f'<text x="{x0 + w + 18}" y="{_f(py(v) - 2)}" text-anchor="end" '
                        f'fill="{color}">{v:.1f}</text>\n')
        for m, d in zip(means, diffs):
            body.append(f'<circle cx="{_f(px(m))}" cy="{_f(py(d))}" r="2.5" fill="#1f4e99"/>\n')
        body.append(f'<text x="{x0 + (w + 20) / 2:.2f}" y="{margin + h + 16}" '
                    f'text-anchor="middle">mean volume {xlo:.1f}-{xhi:.1f} mL</text>\n')
    return _svg(W, H, body)
