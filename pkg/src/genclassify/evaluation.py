"""Risk-coverage analysis for selective classifiers, plus CSV/SVG output."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence, Tuple
from xml.sax.saxutils import escape

import numpy as np

REPORT_COVERAGES = (0.5, 0.8, 0.9, 0.95, 1.0)


@dataclass(frozen=True, eq=False)
class RiskCoverageCurve:
    """One point per distinct confidence, thresholds ascending.

    At threshold t an example is covered when its confidence is >= t.
    """

    thresholds: np.ndarray
    coverage: np.ndarray
    risk: np.ndarray
    total: int

    def __len__(self):
        return self.thresholds.size

    @property
    def points(self):
        return list(zip(self.thresholds.tolist(), self.coverage.tolist(), self.risk.tolist()))


def _as_arrays(records):
    conf = np.array([r.prediction.confidence for r in records], dtype=np.float64)
    correct = np.array([r.correct for r in records], dtype=bool)
    return conf, correct


def curve_from_arrays(confidence, correct) -> RiskCoverageCurve:
    conf = np.asarray(confidence, dtype=np.float64)
    correct = np.asarray(correct, dtype=bool)
    n = conf.size
    if n == 0:
        raise ValueError("cannot build a risk-coverage curve from no records")
    if not np.all(np.isfinite(conf)):
        raise ValueError("confidences must be finite")
    order = np.argsort(-conf, kind="stable")
    sorted_conf = conf[order]
    wrong_cum = np.cumsum(~correct[order])
    # last position of each distinct confidence in descending order
    last = np.flatnonzero(np.append(sorted_conf[1:] != sorted_conf[:-1], True))
    covered = last + 1
    wrong = wrong_cum[last]
    thresholds = sorted_conf[last][::-1]
    coverage = (covered / n)[::-1]
    risk = (wrong / covered)[::-1]
    return RiskCoverageCurve(thresholds, coverage, risk, n)


def risk_coverage(records) -> RiskCoverageCurve:
    """Curve over all distinct confidences. OOD examples always count as errors."""
    return curve_from_arrays(*_as_arrays(records))


def risk_at_coverage(curve: RiskCoverageCurve, target_coverage: float) -> Tuple[float, float]:
    """(risk, threshold) at the curve point with the smallest coverage >= target."""
    if not 0 < target_coverage <= 1:
        raise ValueError("target coverage must lie in (0, 1]")
    if target_coverage < 1.0 / curve.total:
        raise ValueError(f"target coverage {target_coverage} is below the resolution 1/{curve.total}")
    ok = np.flatnonzero(curve.coverage >= target_coverage)
    i = ok[np.argmin(curve.coverage[ok])]
    return float(curve.risk[i]), float(curve.thresholds[i])


def min_risk(curve: RiskCoverageCurve) -> float:
    return float(curve.risk.min())


def has_vanishing_risk(curve: RiskCoverageCurve, eps: float = 0.01) -> bool:
    return min_risk(curve) <= eps


def accuracy(records) -> float:
    _, correct = _as_arrays(records)
    if correct.size == 0:
        return float("nan")
    # written as 1 - risk so that it matches the full-coverage point bit for bit
    return 1.0 - float(np.count_nonzero(~correct)) / correct.size


# ---------------------------------------------------------------------------
# Output


def emit_curve_csv(curve: RiskCoverageCurve, path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("threshold", "coverage", "risk"))
        for t, c, r in zip(curve.thresholds, curve.coverage, curve.risk):
            w.writerow((format(t, ".17g"), format(c, ".17g"), format(r, ".17g")))


def read_curve_csv(path, total: int = 0) -> RiskCoverageCurve:
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["threshold", "coverage", "risk"]:
            raise ValueError(f"{path}: not a curve CSV")
        rows = [tuple(float(v) for v in row) for row in reader]
    arr = np.array(rows, dtype=np.float64).reshape(-1, 3)
    return RiskCoverageCurve(arr[:, 0], arr[:, 1], arr[:, 2], total)


_PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b")


def emit_svg(curves: Sequence[RiskCoverageCurve], labels: Sequence[str], path,
             title: str = "", width: int = 480, height: int = 360) -> None:
    """Overlay risk-coverage curves on axes [0,1] x [0,risk_max] as a standalone SVG."""
    if len(curves) != len(labels):
        raise ValueError("need one label per curve")
    risk_max = max([float(c.risk.max()) for c in curves if len(c)] + [0.0])
    risk_max = max(risk_max, 1e-3) * 1.05
    left, right, top, bottom = 56, 16, 28, 44
    pw, ph = width - left - right, height - top - bottom

    def sx(c):
        return left + c * pw

    def sy(r):
        return top + ph - r / risk_max * ph

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">',
        f'<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>',
        f'<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="black"/>',
    ]
    for i in range(6):
        c = i / 5
        r = risk_max * i / 5
        out.append(f'<text x="{sx(c):.1f}" y="{top + ph + 16}" text-anchor="middle">{c:.1f}</text>')
        out.append(f'<text x="{left - 6}" y="{sy(r) + 4:.1f}" text-anchor="end">{r:.3f}</text>')
    out.append(f'<text x="{left + pw / 2:.1f}" y="{height - 8}" text-anchor="middle">coverage</text>')
    out.append(f'<text x="14" y="{top + ph / 2:.1f}" text-anchor="middle" '
               f'transform="rotate(-90 14 {top + ph / 2:.1f})">risk</text>')
    if title:
        out.append(f'<text x="{left + pw / 2:.1f}" y="18" text-anchor="middle">{escape(title)}</text>')
    for i, (curve, label) in enumerate(zip(curves, labels)):
        colour = _PALETTE[i % len(_PALETTE)]
        # draw from low to high coverage
        pts = " ".join(f"{sx(c):.2f},{sy(r):.2f}" for c, r in zip(curve.coverage[::-1], curve.risk[::-1]))
        out.append(f'<polyline fill="none" stroke="{colour}" stroke-width="1.5" points="{pts}"/>')
    lx, ly = left + 10, top + 10
    out.append('<g class="legend">')
    for i, label in enumerate(labels):
        colour = _PALETTE[i % len(_PALETTE)]
        y = ly + 14 * i
        out.append(f'<line x1="{lx}" y1="{y}" x2="{lx + 18}" y2="{y}" stroke="{colour}" stroke-width="2"/>')
        out.append(f'<text x="{lx + 24}" y="{y + 4}">{escape(label)}</text>')
    out.append("</g>")
    out.append("</svg>")
    Path(path).write_text("\n".join(out) + "\n", encoding="utf-8")


def summarize(records) -> dict:
    curve = risk_coverage(records)
    return {
        "accuracy": accuracy(records),
        "min_risk": min_risk(curve),
        "risk_at": {c: risk_at_coverage(curve, c)[0] for c in REPORT_COVERAGES},
        "n": curve.total,
    }
