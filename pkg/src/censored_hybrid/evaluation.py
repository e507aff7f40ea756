"""RAD scoring, method comparison, training-size curves and a small SVG plotter."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Callable, Mapping, Optional, Sequence
from xml.sax.saxutils import escape

import numpy as np

# discretion thresholds: 20% of the sentence, but never below 2 months
REL_THRESHOLD = 0.2
ABS_THRESHOLD = 2.0


@dataclass
class EvalReport:
    rad: float
    n2: int
    z: np.ndarray
    zhat: np.ndarray
    ztilde: np.ndarray
    triggered: np.ndarray
    method: str = ""

    def ledger_rows(self):
        for k in range(self.n2):
            yield k, self.z[k], self.zhat[k], self.ztilde[k], bool(self.triggered[k])

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["k", "z", "zhat", "ztilde", "triggered"])
            for k, z, zh, zt, t in self.ledger_rows():
                w.writerow([k, repr(float(z)), repr(float(zh)), repr(float(zt)), int(t)])


def rad(preds, actuals, method: str = "") -> EvalReport:
    """Relative accuracy with discretion.

    Only errors strictly above ``max(0.2 z, 2)`` count, each as ``|z - zhat| / z``.
    """
    zhat = np.asarray(preds, dtype=float).reshape(-1)
    z = np.asarray(actuals, dtype=float).reshape(-1)
    if zhat.size != z.size:
        raise ValueError(f"{zhat.size} predictions for {z.size} actual sentences")
    if z.size == 0:
        raise ValueError("RAD needs at least one case")
    if np.any(z <= 0):
        raise ValueError("RAD needs every actual sentence to be positive")
    ztilde = np.abs(z - zhat)
    triggered = ztilde > np.maximum(REL_THRESHOLD * z, ABS_THRESHOLD)
    penalty = np.where(triggered, ztilde / z, 0.0)
    return EvalReport(1.0 - float(penalty.mean()), int(z.size), z, zhat, ztilde, triggered, method)


def compare(methods: Mapping[str, object], test) -> list[tuple[str, int, float]]:
    """RAD of every predictor on the same test cases; rows sorted by method name.

    Each value needs ``predict(batch) -> array``.
    """
    rows = []
    for name in sorted(methods):
        rep = rad(methods[name].predict(test), test.z, name)
        rows.append((name, rep.n2, rep.rad))
    return rows


def write_table_csv(rows, path, header=("method", "n_test", "rad")) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([x if isinstance(x, (str, int)) else repr(float(x)) for x in row])


def geometric_checkpoints(n_min: int, n_max: int, count: int = 10) -> list[int]:
    """``count`` roughly geometric sizes from ``n_min`` to ``n_max`` inclusive, deduplicated."""
    if not (1 <= n_min <= n_max):
        raise ValueError(f"need 1 <= n_min <= n_max, got {n_min}, {n_max}")
    if count < 2 or n_min == n_max:
        return [n_max]
    raw = np.geomspace(n_min, n_max, count)
    out = sorted({int(round(x)) for x in raw})
    out[-1] = n_max
    return out


@dataclass
class Curve:
    method: str
    sizes: list = field(default_factory=list)
    rads: list = field(default_factory=list)


def prefix_curve(method: str, fit: Callable, train, test, sizes: Sequence[int]) -> Curve:
    """Test RAD of ``fit(train.take(slice(0, s)))`` for each prefix size ``s``."""
    curve = Curve(method)
    for s in sizes:
        model = fit(train.take(slice(0, s)))
        curve.sizes.append(int(s))
        curve.rads.append(rad(model.predict(test), test.z, method).rad)
    return curve


def write_curves_csv(curves: Sequence[Curve], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["method", "n_train", "rad"])
        for c in curves:
            for s, r in zip(c.sizes, c.rads):
                w.writerow([c.method, s, repr(float(r))])


# --- SVG ------------------------------------------------------------------------

_PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b")


def _nice_ticks(lo: float, hi: float, count: int = 5) -> list[float]:
    if hi <= lo:
        return [lo]
    step = (hi - lo) / count
    mag = 10 ** math.floor(math.log10(step))
    step = min((m * mag for m in (1, 2, 5, 10) if m * mag >= step), default=step)
    start = math.ceil(lo / step) * step
    ticks, t = [], start
    while t <= hi + 1e-12 * abs(hi):
        ticks.append(round(t, 12))
        t += step
    return ticks


def svg_line_chart(series: Mapping[str, tuple], title: str, xlabel: str, ylabel: str,
                   logx: bool = False, width: int = 640, height: int = 400) -> str:
    """Self-contained SVG with one polyline per series and labelled axes.

    ``series`` maps a legend label to ``(xs, ys)``; non-finite points are skipped.
    """
    ml, mr, mt, mb = 70, 150, 40, 55
    pw, ph = width - ml - mr, height - mt - mb
    pts = {}
    for name, (xs, ys) in series.items():
        xs, ys = np.asarray(xs, float), np.asarray(ys, float)
        keep = np.isfinite(xs) & np.isfinite(ys) & ((xs > 0) if logx else True)
        pts[name] = (xs[keep], ys[keep])
    allx = np.concatenate([p[0] for p in pts.values()]) if pts else np.array([])
    ally = np.concatenate([p[1] for p in pts.values()]) if pts else np.array([])
    if allx.size == 0:
        allx, ally = np.array([1.0, 2.0]), np.array([0.0, 1.0])
    fx = np.log10 if logx else (lambda v: v)
    x0, x1 = float(fx(allx.min())), float(fx(allx.max()))
    y0, y1 = float(ally.min()), float(ally.max())
    if x1 == x0:
        x1 = x0 + 1.0
    if y1 == y0:
        y0, y1 = y0 - 0.5, y1 + 0.5
    pad = 0.05 * (y1 - y0)
    y0, y1 = y0 - pad, y1 + pad

    def sx(v):
        return ml + (float(fx(v)) - x0) / (x1 - x0) * pw

    def sy(v):
        return mt + (1.0 - (float(v) - y0) / (y1 - y0)) * ph

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
           f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="12">',
           f'<rect width="{width}" height="{height}" fill="white"/>',
           f'<text x="{ml + pw / 2:.1f}" y="22" text-anchor="middle" font-size="14">{escape(title)}</text>',
           f'<rect x="{ml}" y="{mt}" width="{pw}" height="{ph}" fill="none" stroke="black"/>']
    for t in _nice_ticks(y0, y1):
        y = sy(t)
        out.append(f'<line x1="{ml - 4}" y1="{y:.1f}" x2="{ml}" y2="{y:.1f}" stroke="black"/>')
        out.append(f'<text x="{ml - 6}" y="{y + 4:.1f}" text-anchor="end">{t:g}</text>')
    for t in _nice_ticks(x0, x1):
        x = ml + (t - x0) / (x1 - x0) * pw
        label = f"{10 ** t:.3g}" if logx else f"{t:g}"
        out.append(f'<line x1="{x:.1f}" y1="{mt + ph}" x2="{x:.1f}" y2="{mt + ph + 4}" stroke="black"/>')
        out.append(f'<text x="{x:.1f}" y="{mt + ph + 18}" text-anchor="middle">{label}</text>')
    out.append(f'<text x="{ml + pw / 2:.1f}" y="{height - 12}" text-anchor="middle">{escape(xlabel)}</text>')
    out.append(f'<text x="18" y="{mt + ph / 2:.1f}" text-anchor="middle" '
               f'transform="rotate(-90 18 {mt + ph / 2:.1f})">{escape(ylabel)}</text>')
    for i, (name, (xs, ys)) in enumerate(pts.items()):
        color = _PALETTE[i % len(_PALETTE)]
        if xs.size:
            path = " ".join(f"{sx(x):.2f},{sy(y):.2f}" for x, y in zip(xs, ys))
            out.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{path}"/>')
        ly = mt + 16 * i + 10
        out.append(f'<line x1="{ml + pw + 12}" y1="{ly}" x2="{ml + pw + 32}" y2="{ly}" stroke="{color}" '
                   f'stroke-width="2"/>')
        out.append(f'<text x="{ml + pw + 38}" y="{ly + 4}">{escape(name)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def thin_series(xs, ys, max_points: int = 2000) -> tuple[np.ndarray, np.ndarray]:
    """Geometric subsample of a long curve, keeping its first and last point."""
    xs, ys = np.asarray(xs), np.asarray(ys)
    n = xs.size
    if n <= max_points:
        return xs, ys
    idx = np.unique(np.geomspace(1, n, max_points).astype(int) - 1)
    return xs[idx], ys[idx]


def regret_svg(tracker, title: str = "ASG regret", eps: Optional[float] = None) -> str:
    ks = np.asarray(tracker.ks, float) + 1.0
    cums = np.asarray(tracker.cums, float)
    norm = np.array([tracker.normalized(c, int(k)) for k, c in zip(ks, cums)])
    xs, avg = thin_series(ks, cums / ks)
    _, nrm = thin_series(ks, norm)
    label = "normalised cumulative" if not eps else f"normalised cumulative (eps={eps:g})"
    return svg_line_chart({"average regret": (xs, avg), label: (xs, nrm)}, title, "steps n", "regret",
                          logx=True)
