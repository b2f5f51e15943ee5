"""Minimal hand-written SVG plots; output is plain text and byte-stable."""

from __future__ import annotations

from typing import Sequence
from xml.sax.saxutils import escape

W, H, PAD = 360, 360, 40


def _polyline(xs: Sequence[float], ys: Sequence[float], color: str, w=W, h=H, pad=PAD, dash: str = "") -> str:
    pts = " ".join(f"{pad + x * (w - 2 * pad):.2f},{h - pad - y * (h - 2 * pad):.2f}" for x, y in zip(xs, ys))
    extra = f' stroke-dasharray="{dash}"' if dash else ""
    return f'<polyline fill="none" stroke="{color}" stroke-width="1.5"{extra} points="{pts}"/>'


def _frame(title: str, xlabel: str, ylabel: str, body: list[str]) -> str:
    lines = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">',
        f'<rect x="{PAD}" y="{PAD}" width="{W - 2 * PAD}" height="{H - 2 * PAD}" fill="none" stroke="#444"/>',
        f'<text x="{W / 2:.0f}" y="24" text-anchor="middle" font-size="13">{escape(title)}</text>',
        f'<text x="{W / 2:.0f}" y="{H - 10}" text-anchor="middle" font-size="11">{escape(xlabel)}</text>',
        f'<text x="12" y="{H / 2:.0f}" text-anchor="middle" font-size="11" transform="rotate(-90 12 {H / 2:.0f})">{escape(ylabel)}</text>',
    ]
    for v in (0.0, 0.5, 1.0):
        x = PAD + v * (W - 2 * PAD)
        y = H - PAD - v * (H - 2 * PAD)
        lines.append(f'<text x="{x:.0f}" y="{H - PAD + 14}" text-anchor="middle" font-size="10">{v:.1f}</text>')
        lines.append(f'<text x="{PAD - 6}" y="{y + 3:.0f}" text-anchor="end" font-size="10">{v:.1f}</text>')
    return "\n".join(lines + body + ["</svg>"]) + "\n"


def roc_svg(fpr: Sequence[float], tpr: Sequence[float], auc: float) -> str:
    body = [_polyline([0, 1], [0, 1], "#999", dash="4 3"), _polyline(fpr, tpr, "#1f5fa8")]
    return _frame(f"ROC (AUC {auc:.3f})", "1 - specificity", "sensitivity", body)


def sweep_svg(rows: Sequence[dict]) -> str:
    t = [r["threshold"] for r in rows]
    body = []
    for key, color in (("sensitivity", "#c0392b"), ("specificity", "#1f5fa8")):
        body.append(_polyline(t, [r[f"{key}_lo"] for r in rows], color, dash="2 2"))
        body.append(_polyline(t, [r[f"{key}_hi"] for r in rows], color, dash="2 2"))
        body.append(_polyline(t, [r[key] for r in rows], color))
    return _frame("Sensitivity / specificity vs threshold", "threshold", "rate", body)


def sparkline_svg(days: Sequence[float], probs: Sequence[float], smoothed: Sequence[float], label: str) -> str:
    w, h, pad = 240, 60, 6
    span = max(days[-1] - days[0], 1e-9) if len(days) > 1 else 1.0
    xs = [(d - days[0]) / span for d in days]
    return "\n".join([
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">',
        f"<title>{escape(label)}</title>",
        _polyline(xs, probs, "#bbb", w, h, pad),
        _polyline(xs, smoothed, "#1f5fa8", w, h, pad),
        "</svg>",
    ]) + "\n"
