"""File outputs: embedding and t-SNE CSVs, SVG scatter plots and the
appendix-style accuracy table."""

from __future__ import annotations

import csv
from collections import OrderedDict
from pathlib import Path

import numpy as np

REPORT_COLUMNS = ["index", "aug_spec", "train_acc", "valid_acc", "test_acc"]

# colour-blind friendly cycle
PALETTE = ["#0072B2", "#E69F00", "#009E73", "#D55E00", "#CC79A7", "#56B4E9", "#F0E442", "#000000"]


def sample_rows(n_total: int, sample_n: int, seed: int) -> np.ndarray:
    """Seeded uniform sample without replacement, returned in ascending order."""
    if not 0 < sample_n <= n_total:
        raise ValueError(f"sample_n must lie in [1, {n_total}]")
    return np.sort(np.random.default_rng(seed).choice(n_total, size=sample_n, replace=False))


def write_embeddings_csv(path, ids, labels, values) -> None:
    values = np.asarray(values)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "label"] + [f"f{j}" for j in range(values.shape[1])])
        for i, lab, row in zip(ids, labels, values):
            w.writerow([int(i), int(lab)] + [repr(float(v)) for v in row])


def read_embeddings_csv(path) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header[:2] != ["id", "label"]:
            raise ValueError(f"{path}: expected id,label,... header")
        rows = [r for r in reader if r]
    ids = np.array([int(r[0]) for r in rows])
    labels = np.array([int(r[1]) for r in rows])
    values = np.array([[float(v) for v in r[2:]] for r in rows])
    return ids, labels, values


def write_points_csv(path, ids, labels, points) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "label", "x", "y"])
        for i, lab, (x, y) in zip(ids, labels, points):
            w.writerow([int(i), int(lab), repr(float(x)), repr(float(y))])


def scatter_svg(points, labels, size: int = 480, radius: float = 2.5) -> str:
    """Minimal SVG scatter, one colour per label, with a legend."""
    pts = np.asarray(points, dtype=float)
    labels = np.asarray(labels)
    margin = 20
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    span = np.where(hi - lo > 0, hi - lo, 1.0)
    xy = margin + (pts - lo) / span * (size - 2 * margin)
    classes = sorted(set(labels.tolist()))
    colour = {c: PALETTE[k % len(PALETTE)] for k, c in enumerate(classes)}
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{size + 90}" height="{size}" '
           f'viewBox="0 0 {size + 90} {size}">',
           f'<rect width="{size + 90}" height="{size}" fill="white"/>']
    for (x, y), lab in zip(xy, labels):
        out.append(f'<circle cx="{x:.2f}" cy="{size - y:.2f}" r="{radius}" fill="{colour[lab]}" fill-opacity="0.8"/>')
    for k, c in enumerate(classes):
        y = margin + 16 * k
        out.append(f'<circle cx="{size + 10}" cy="{y}" r="4" fill="{colour[c]}"/>')
        out.append(f'<text x="{size + 20}" y="{y + 4}" font-size="12" font-family="sans-serif">{c}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def _read_ledger(path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def dedupe_ledger(rows: list[dict]) -> list[dict]:
    """Keep the last row per (aug_spec, seed, method, stage), at the position
    where that key first appeared."""
    keep: OrderedDict = OrderedDict()
    for row in rows:
        key = (row["aug_spec"], row["seed"], row["method"], row["stage"])
        keep[key] = row
    return list(keep.values())


def _pct(values) -> str:
    vals = [float(v) for v in values if v not in ("", None)]
    return f"{100.0 * sum(vals) / len(vals):.2f}%" if vals else ""


def report_rows(ledger_rows: list[dict], method=None, stage=None) -> list[dict]:
    """One row per spec (first-appearance order), accuracies averaged over seeds."""
    groups: OrderedDict = OrderedDict()
    for row in dedupe_ledger(ledger_rows):
        if method and row["method"] != method or stage and row["stage"] != stage:
            continue
        groups.setdefault(row["aug_spec"], []).append(row)
    out = []
    for idx, (spec, rows) in enumerate(groups.items(), start=1):
        out.append({"index": idx, "aug_spec": spec,
                    **{c: _pct(r[c] for r in rows) for c in ("train_acc", "valid_acc", "test_acc")}})
    return out


def write_report(ledger_path, out_path, method=None, stage=None) -> list[dict]:
    rows = report_rows(_read_ledger(ledger_path), method, stage)
    with open(out_path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=REPORT_COLUMNS, lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    return rows


def read_ledger(path) -> list[dict]:
    return _read_ledger(Path(path))
