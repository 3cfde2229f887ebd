"""Run exports: per-epoch metrics, test-set embeddings, loss/accuracy curves and a text summary."""
from __future__ import annotations

import csv
from dataclasses import asdict
from pathlib import Path
from typing import Iterable, List, Sequence
from xml.sax.saxutils import escape

import numpy as np

from .network import predict_proba
from .synth import Split

METRIC_FIELDS = ("epoch", "phase", "loss_vqa", "loss_vib", "loss_b", "loss_c", "loss_total",
                 "train_acc", "test_acc", "lr", "k")
LOSS_SERIES = ("loss_vqa", "loss_vib", "loss_b", "loss_c", "loss_total")
ACC_SERIES = ("train_acc", "test_acc")
_COLORS = ("#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b")


def _fmt(x) -> str:
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    return str(x)


def metric_rows(history) -> List[dict]:
    rows = []
    for m in history:
        d = asdict(m)
        per_type = d.pop("test_acc_per_type")
        row = {k: d[k] for k in METRIC_FIELDS}
        for t, v in enumerate(per_type):
            row[f"test_acc_q{t}"] = v
        rows.append(row)
    return rows


def write_metrics(history, path) -> Path:
    rows = metric_rows(history)
    if not rows:
        raise ValueError("empty history")
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(list(rows[0]))
        for r in rows:
            w.writerow([_fmt(v) for v in r.values()])
    return path


def read_metrics(path) -> List[dict]:
    out = []
    with open(path, newline="") as fh:
        for r in csv.DictReader(fh):
            out.append({k: (v if k == "phase" else (int(v) if k in ("epoch", "k") else float(v)))
                        for k, v in r.items()})
    return out


def write_embeddings(params: dict, split: Split, path) -> Path:
    """One row per instance: question type, majority answer, predicted answer, then the mean vector."""
    mu, proba = predict_proba(params, split.features.astype(np.float64), split.tokens)
    pred = proba.argmax(axis=1)
    truth = split.majority
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["question_type", "true_answer", "predicted_answer"] + [f"mu_{j}" for j in range(mu.shape[1])])
        for i in range(len(pred)):
            w.writerow([int(split.question_types[i]), int(truth[i]), int(pred[i])] + [repr(float(v)) for v in mu[i]])
    return path


def _polyline(xs, ys, x0, y0, w, h, xr, yr, color) -> str:
    pts = []
    for x, y in zip(xs, ys):
        if not np.isfinite(y):
            continue
        px = x0 + (x - xr[0]) / max(xr[1] - xr[0], 1e-12) * w
        py = y0 + h - (y - yr[0]) / max(yr[1] - yr[0], 1e-12) * h
        pts.append(f"{px:.2f},{py:.2f}")
    return f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{" ".join(pts)}"/>'


def _panel(rows, series: Sequence[str], x0, y0, w, h, title) -> List[str]:
    xs = [r["epoch"] for r in rows]
    vals = np.array([[r[s] for r in rows] for s in series], dtype=np.float64)
    finite = vals[np.isfinite(vals)]
    lo, hi = (float(finite.min()), float(finite.max())) if finite.size else (0.0, 1.0)
    if hi - lo < 1e-12:
        lo, hi = lo - 0.5, hi + 0.5
    xr = (min(xs), max(xs)) if len(xs) > 1 else (xs[0] - 1, xs[0] + 1)
    out = [f'<rect x="{x0}" y="{y0}" width="{w}" height="{h}" fill="none" stroke="#888"/>',
           f'<text x="{x0}" y="{y0 - 8}" font-size="13">{escape(title)}</text>',
           f'<text x="{x0 - 6}" y="{y0 + 10}" font-size="10" text-anchor="end">{hi:.3g}</text>',
           f'<text x="{x0 - 6}" y="{y0 + h}" font-size="10" text-anchor="end">{lo:.3g}</text>',
           f'<text x="{x0}" y="{y0 + h + 14}" font-size="10">{xr[0]}</text>',
           f'<text x="{x0 + w}" y="{y0 + h + 14}" font-size="10" text-anchor="end">epoch {xr[1]}</text>']
    for i, (name, ys) in enumerate(zip(series, vals)):
        color = _COLORS[i % len(_COLORS)]
        out.append(_polyline(xs, ys, x0, y0, w, h, xr, (lo, hi), color))
        out.append(f'<text x="{x0 + w + 10}" y="{y0 + 14 + 14 * i}" font-size="11" fill="{color}">{name}</text>')
    return out


def curves_svg(rows: Sequence[dict]) -> str:
    """Two stacked panels (losses, accuracies) as a standalone SVG document."""
    if not rows:
        raise ValueError("no metric rows to plot")
    W, H = 640, 520
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">',
             '<rect width="100%" height="100%" fill="white"/>']
    parts += _panel(rows, LOSS_SERIES, 60, 30, 440, 200, "losses")
    parts += _panel(rows, ACC_SERIES, 60, 290, 440, 200, "accuracy")
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def summary_text(rows: Sequence[dict]) -> str:
    last = rows[-1]
    best = max(rows, key=lambda r: r["test_acc"])
    phases = {}
    for r in rows:
        phases[r["phase"]] = phases.get(r["phase"], 0) + 1
    lines = [f"epochs: {len(rows)}",
             "phases: " + ", ".join(f"{k}={v}" for k, v in phases.items()),
             f"final train_acc: {last['train_acc']:.4f}",
             f"final test_acc: {last['test_acc']:.4f}",
             f"best test_acc: {best['test_acc']:.4f} (epoch {best['epoch']})",
             f"final loss_total: {last['loss_total']:.6f}"]
    return "\n".join(lines) + "\n"


def export_report(history, params: dict, split: Split, out_dir) -> dict:
    """Write metrics.csv, embeddings.csv, curves.svg and summary.txt into ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"metrics": write_metrics(history, out / "metrics.csv"),
             "embeddings": write_embeddings(params, split, out / "embeddings.csv")}
    paths.update(regenerate(out))
    return paths


def regenerate(run_dir) -> dict:
    """Rebuild curves.svg and summary.txt from an existing metrics.csv."""
    run = Path(run_dir)
    rows = read_metrics(run / "metrics.csv")
    if not rows:
        raise ValueError(f"{run / 'metrics.csv'} has no rows")
    (run / "curves.svg").write_text(curves_svg(rows))
    (run / "summary.txt").write_text(summary_text(rows))
    return {"curves": run / "curves.svg", "summary": run / "summary.txt"}


def write_scores_csv(path, scores: np.ndarray, salient: np.ndarray, ids: Iterable[int]) -> Path:
    """``instance_id, region_index, score, is_salient`` rows for the inspect command."""
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["instance_id", "region_index", "score", "is_salient"])
        for i, s_row, sal in zip(ids, scores, salient):
            sal = set(int(x) for x in sal)
            for r, s in enumerate(s_row):
                w.writerow([int(i), r, repr(float(s)), int(r in sal)])
    return path
