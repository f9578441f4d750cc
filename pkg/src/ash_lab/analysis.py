"""Per-class contribution of the scale/shift coefficients, traced over training."""
from __future__ import annotations

import csv
import io
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import tensor as T
from .domains import CLASS_NAMES
from .hallucination import AshNet, ash_params
from .nets import SegNet

TRACE_HEADER = "iteration,class,pixels,dL1_gamma,dL1_beta,dL1_gamma_norm,dL1_beta_norm"


def _l1(prob: np.ndarray, ash: AshNet, style_shape) -> tuple[float, float]:
    with T.no_grad():
        p = ash_params(prob, ash, style_shape)
    return float(np.abs(p.gamma.data).sum()), float(np.abs(p.beta.data).sum())


def class_contribution(prob, ash: AshNet, style_shape, c: int) -> tuple[float, float]:
    """Drop in L1(gamma) and L1(beta) when channel ``c`` of the map is zeroed.

    The remaining channels are left as they are (no renormalization).
    """
    prob = np.asarray(prob.data if isinstance(prob, T.Tensor) else prob, dtype=np.float64)
    if not 0 <= c < prob.shape[0]:
        raise IndexError(f"class index {c} out of range for {prob.shape[0]} classes")
    g_full, b_full = _l1(prob, ash, style_shape)
    zeroed = prob.copy()
    zeroed[c] = 0.0
    g_zero, b_zero = _l1(zeroed, ash, style_shape)
    return g_full - g_zero, b_full - b_zero


def predicted_onehot(segnet: SegNet, image) -> tuple[np.ndarray, np.ndarray]:
    pred = segnet.predict(image)
    onehot = (np.arange(segnet.n_classes)[:, None, None] == pred[None]).astype(np.float64)
    return onehot, np.bincount(pred.ravel(), minlength=segnet.n_classes)


def coeff_rows(iteration: int, segnet: SegNet, ash: AshNet, image, feat_channels: int = 64) -> list[str]:
    """Trace rows for one iteration, conditioning on the predicted (hard) map."""
    onehot, pixels = predicted_onehot(segnet, image)
    _, h, w = onehot.shape
    shape = (feat_channels, h // 4, w // 4)
    rows = []
    for c in range(segnet.n_classes):
        dg, db = class_contribution(onehot, ash, shape, c)
        n = int(pixels[c])
        gn, bn = (dg / n, db / n) if n else (0.0, 0.0)
        name = CLASS_NAMES[c] if c < len(CLASS_NAMES) else str(c)
        rows.append(f"{iteration},{name},{n},{dg:.9g},{db:.9g},{gn:.9g},{bn:.9g}")
    return rows


def trace_coeffs(checkpoints: Sequence, image, every_k: int, out_path) -> Path:
    """Write the contribution trace for every checkpoint whose iteration is a multiple of ``every_k``.

    ``checkpoints`` holds paths or already-loaded training checkpoints.
    """
    from .training import Checkpoint

    if every_k < 1:
        raise ValueError("every_k must be >= 1")
    loaded = []
    for ck in checkpoints:
        if not isinstance(ck, Checkpoint):
            try:
                ck = Checkpoint.load(ck)
            except (OSError, ValueError, KeyError) as exc:
                raise ValueError(f"cannot read checkpoint {ck}: {exc}") from exc
        loaded.append(ck)
    lines = [TRACE_HEADER]
    for ck in sorted(loaded, key=lambda c: c.iteration):
        if ck.iteration % every_k == 0:
            lines.extend(coeff_rows(ck.iteration, ck.players.segnet, ck.players.ash, image))
    out = Path(out_path)
    with open(out, "w", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")
    return out


def read_trace(path_or_text) -> list[dict]:
    text = Path(path_or_text).read_text() if isinstance(path_or_text, Path) else str(path_or_text)
    rows = list(csv.DictReader(io.StringIO(text)))
    for r in rows:
        r["iteration"] = int(r["iteration"])
        r["pixels"] = int(r["pixels"])
        for k in ("dL1_gamma", "dL1_beta", "dL1_gamma_norm", "dL1_beta_norm"):
            r[k] = float(r[k])
    return rows


# -- SVG ------------------------------------------------------------------

_PALETTE = ("#1f77b4", "#7f7f7f", "#8c564b", "#bcbd22", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e")


def line_chart_svg(series: dict[str, Sequence[tuple[float, float]]], title: str = "",
                   xlabel: str = "", ylabel: str = "", width: int = 640, height: int = 400) -> str:
    """Minimal dependency-free line chart; output depends only on the inputs."""
    left, right, top, bottom = 70, 130, 40, 50
    pts = [p for s in series.values() for p in s]
    xs = [p[0] for p in pts] or [0.0, 1.0]
    ys = [p[1] for p in pts] or [0.0, 1.0]
    x0, x1 = min(xs), max(xs)
    y0, y1 = min(ys), max(ys)
    if x1 == x0:
        x1 = x0 + 1
    if y1 == y0:
        y0, y1 = y0 - 1, y1 + 1
    pw, ph = width - left - right, height - top - bottom

    def sx(x):
        return left + (x - x0) / (x1 - x0) * pw

    def sy(y):
        return top + (1 - (y - y0) / (y1 - y0)) * ph

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<text x="{width / 2:.1f}" y="22" text-anchor="middle" font-size="15">{_esc(title)}</text>',
        f'<line x1="{left}" y1="{top + ph}" x2="{left + pw}" y2="{top + ph}" stroke="black"/>',
        f'<line x1="{left}" y1="{top}" x2="{left}" y2="{top + ph}" stroke="black"/>',
        f'<text x="{left + pw / 2:.1f}" y="{height - 12}" text-anchor="middle" font-size="12">{_esc(xlabel)}</text>',
        f'<text x="16" y="{top + ph / 2:.1f}" text-anchor="middle" font-size="12" '
        f'transform="rotate(-90 16 {top + ph / 2:.1f})">{_esc(ylabel)}</text>',
    ]
    for i in range(5):
        yv = y0 + (y1 - y0) * i / 4
        xv = x0 + (x1 - x0) * i / 4
        out.append(f'<text x="{left - 6}" y="{sy(yv) + 4:.1f}" text-anchor="end" font-size="10">{yv:.4g}</text>')
        out.append(f'<text x="{sx(xv):.1f}" y="{top + ph + 16}" text-anchor="middle" font-size="10">{xv:.6g}</text>')
    for k, (name, s) in enumerate(series.items()):
        color = _PALETTE[k % len(_PALETTE)]
        if s:
            path = " ".join(f"{sx(x):.2f},{sy(y):.2f}" for x, y in s)
            out.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{path}"/>')
        ly = top + 14 * k + 6
        out.append(f'<line x1="{left + pw + 10}" y1="{ly}" x2="{left + pw + 28}" y2="{ly}" stroke="{color}" stroke-width="2"/>')
        out.append(f'<text x="{left + pw + 32}" y="{ly + 4}" font-size="11">{_esc(name)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def _esc(s: str) -> str:
    return s.replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;")


def trace_svg(trace_csv_text: str, column: str = "dL1_beta") -> str:
    series: dict[str, list] = {}
    for r in read_trace(trace_csv_text):
        series.setdefault(r["class"], []).append((r["iteration"], r[column]))
    return line_chart_svg(series, f"{column} per class", "iteration", column)


def loss_svg(metrics_csv_text: str) -> str:
    rows = list(csv.DictReader(io.StringIO(metrics_csv_text)))
    series: dict[str, list] = {}
    for r in rows:
        for k, v in r.items():
            if k != "iteration" and v != "":
                series.setdefault(k, []).append((float(r["iteration"]), float(v)))
    return line_chart_svg(series, "training losses", "iteration", "loss")


def write_plots(out_dir, metrics_csv: Path | None = None, trace_csv: Path | None = None) -> list[Path]:
    out_dir = Path(out_dir)
    written = []
    if metrics_csv is not None and Path(metrics_csv).exists():
        p = out_dir / "losses.svg"
        p.write_text(loss_svg(Path(metrics_csv).read_text()))
        written.append(p)
    if trace_csv is not None and Path(trace_csv).exists():
        text = Path(trace_csv).read_text()
        for col in ("dL1_beta", "dL1_beta_norm", "dL1_gamma", "dL1_gamma_norm"):
            p = out_dir / f"trace_{col}.svg"
            p.write_text(trace_svg(text, col))
            written.append(p)
    return written


def median_raw_contribution(rows: Iterable[dict], class_name: str) -> float:
    vals = [abs(r["dL1_gamma"]) + abs(r["dL1_beta"]) for r in rows if r["class"] == class_name]
    return float(np.median(vals)) if vals else 0.0
