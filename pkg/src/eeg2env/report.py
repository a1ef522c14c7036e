"""Deterministic result emitters: a per-subject CSV and a grouped-bar SVG.

Both are plain-text artifacts written with repr'd floats and fixed
formatting, so two runs over identical inputs produce byte-identical
files that diff cleanly.
"""

from __future__ import annotations

import math
from pathlib import Path

from .errors import ParameterError
from .evaluation import MetricsReport

REPORT_HEADER = "subject_id,model,split,mean_pcc,std_pcc,n_windows,probe_acc"

_PALETTE = ("#4c78a8", "#f58518", "#54a24b", "#e45756", "#72b7b2", "#b279a2")

# fixed canvas; the chart scales bars into this box
_W, _H = 720, 360
_LEFT, _RIGHT, _TOP, _BOTTOM = 56, 168, 24, 44


def _rows(reports: list[MetricsReport]) -> list[tuple]:
    rows = []
    for rep in reports:
        for s in rep.scores:
            rows.append((s.subject_id, rep.model, rep.split, s.mean_pcc,
                         s.std_pcc, s.n_windows, rep.probe_accuracy))
    rows.sort(key=lambda r: (r[1], r[2], r[0]))
    return rows


def write_report_csv(path: str | Path, reports: list[MetricsReport]) -> Path:
    rows = _rows(reports)
    if not rows:
        raise ParameterError("write_report_csv: nothing to report")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [REPORT_HEADER]
    for sid, model, split, mean, std, n, probe in rows:
        lines.append(f"{sid},{model},{split},{repr(float(mean))},"
                     f"{repr(float(std))},{n},{repr(float(probe))}")
    path.write_text("\n".join(lines) + "\n")
    return path


def _ticks(lo: float, hi: float, step: float = 0.2) -> list[float]:
    first = math.ceil(lo / step - 1e-9)
    last = math.floor(hi / step + 1e-9)
    return [round(i * step, 10) for i in range(first, last + 1)]


def write_pcc_svg(path: str | Path, reports: list[MetricsReport]) -> Path:
    """Grouped bars of per-subject mean PCC, one series per (model, split)."""
    rows = _rows(reports)
    if not rows:
        raise ParameterError("write_pcc_svg: nothing to plot")
    series = sorted({(model, split) for _, model, split, *_ in rows})
    subjects = sorted({sid for sid, *_ in rows})
    values = {(r[1], r[2], r[0]): r[3] for r in rows}

    lo = min(0.0, min(r[3] for r in rows))
    hi = max(0.2, max(r[3] for r in rows))
    span = hi - lo

    def y(v: float) -> float:
        return _TOP + (_H - _TOP - _BOTTOM) * (hi - v) / span

    plot_w = _W - _LEFT - _RIGHT
    slot = plot_w / len(subjects)
    bar = slot / (len(series) + 1)

    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{_W}" height="{_H}" '
             f'viewBox="0 0 {_W} {_H}" font-family="sans-serif" font-size="11">',
             f'<rect width="{_W}" height="{_H}" fill="#ffffff"/>']
    for tick in _ticks(lo, hi):
        ty = y(tick)
        parts.append(f'<line x1="{_LEFT}" y1="{ty:.2f}" x2="{_W - _RIGHT}" '
                     f'y2="{ty:.2f}" stroke="#dddddd" stroke-width="1"/>')
        parts.append(f'<text x="{_LEFT - 6}" y="{ty + 4:.2f}" '
                     f'text-anchor="end">{tick:g}</text>')
    for k, (model, split) in enumerate(series):
        color = _PALETTE[k % len(_PALETTE)]
        for g, sid in enumerate(subjects):
            v = values.get((model, split, sid))
            if v is None:
                continue
            x0 = _LEFT + g * slot + (k + 0.5) * bar
            top, bottom = (y(v), y(0.0)) if v >= 0 else (y(0.0), y(v))
            parts.append(f'<rect x="{x0:.2f}" y="{top:.2f}" width="{bar:.2f}" '
                         f'height="{max(bottom - top, 0.0):.2f}" fill="{color}"/>')
        ly = _TOP + 16 * k
        parts.append(f'<rect x="{_W - _RIGHT + 12}" y="{ly}" width="10" '
                     f'height="10" fill="{color}"/>')
        parts.append(f'<text x="{_W - _RIGHT + 27}" y="{ly + 9}">'
                     f'{model}/{split}</text>')
    base = y(0.0)
    parts.append(f'<line x1="{_LEFT}" y1="{base:.2f}" x2="{_W - _RIGHT}" '
                 f'y2="{base:.2f}" stroke="#333333" stroke-width="1"/>')
    for g, sid in enumerate(subjects):
        cx = _LEFT + (g + 0.5) * slot
        parts.append(f'<text x="{cx:.2f}" y="{_H - _BOTTOM + 16}" '
                     f'text-anchor="middle">S{sid}</text>')
    parts.append(f'<text x="{_LEFT + plot_w / 2:.2f}" y="{_H - 8}" '
                 f'text-anchor="middle">subject</text>')
    parts.append(f'<text x="14" y="{_TOP + (_H - _TOP - _BOTTOM) / 2:.2f}" '
                 f'text-anchor="middle" transform="rotate(-90 14 '
                 f'{_TOP + (_H - _TOP - _BOTTOM) / 2:.2f})">mean PCC</text>')
    parts.append("</svg>")

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("\n".join(parts) + "\n")
    return path


def report_emit(out_dir: str | Path, reports: list[MetricsReport]) -> dict[str, Path]:
    """Write both artifacts; returns their paths keyed by kind."""
    if not reports:
        raise ParameterError("report_emit: no reports given")
    out = Path(out_dir)
    return {"csv": write_report_csv(out / "report.csv", reports),
            "svg": write_pcc_svg(out / "pcc_by_subject.svg", reports)}
