"""Paired t-test and the two augmentation-selection strategies."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import betainc

DEFAULT_K = 4


def student_t_sf2(t: float, df: float) -> float:
    """Two-sided tail probability P(|T| >= |t|) for Student's t."""
    if math.isinf(t):
        return 0.0
    return float(betainc(df / 2.0, 0.5, df / (df + t * t)))


def paired_t_test(xs, ys) -> tuple[float, float]:
    """Two-sided paired t-test on ``xs - ys``; returns ``(t, p)``.

    Zero spread gives ``(0, 1)`` for a zero mean difference and
    ``(+-inf, 0)`` otherwise.
    """
    xs = np.asarray(xs, dtype=float)
    ys = np.asarray(ys, dtype=float)
    if xs.shape != ys.shape or xs.ndim != 1:
        raise ValueError("paired samples must be 1-d and of equal length")
    n = len(xs)
    if n < 2:
        raise ValueError("paired t-test needs at least two pairs")
    d = xs - ys
    mean = d.mean()
    sd = d.std(ddof=1)
    if sd == 0.0:
        if mean == 0.0:
            return 0.0, 1.0
        return math.copysign(math.inf, mean), 0.0
    t = float(mean / (sd / math.sqrt(n)))
    return t, student_t_sf2(t, n - 1)


@dataclass
class AugRunTable:
    """(aug_spec, seed) -> accuracies; later inserts replace earlier ones."""

    rows: dict = field(default_factory=dict)

    def add(self, spec: str, seed: int, valid_acc: float, test_acc: float = float("nan"),
            train_acc: float = float("nan")) -> None:
        self.rows[(spec, int(seed))] = {"valid_acc": float(valid_acc), "test_acc": float(test_acc),
                                        "train_acc": float(train_acc)}

    @property
    def specs(self) -> list[str]:
        return sorted({s for s, _ in self.rows})

    def seeds(self, spec: str) -> list[int]:
        return sorted(seed for s, seed in self.rows if s == spec)

    def valid(self, spec: str, seeds=None) -> np.ndarray:
        seeds = self.seeds(spec) if seeds is None else seeds
        return np.array([self.rows[(spec, s)]["valid_acc"] for s in seeds])

    def check_balanced(self) -> None:
        seed_sets = {tuple(self.seeds(s)) for s in self.specs}
        if len(seed_sets) > 1:
            raise ValueError("every spec must have the same seed set")

    @classmethod
    def from_ledger(cls, path, method=None, stage=None) -> "AugRunTable":
        table = cls()
        with open(path, newline="", encoding="utf-8") as fh:
            for row in csv.DictReader(fh):
                if method and row["method"] != method or stage and row["stage"] != stage:
                    continue
                if not row["valid_acc"]:
                    continue
                table.add(row["aug_spec"], int(row["seed"]), float(row["valid_acc"]),
                          float(row["test_acc"] or "nan"), float(row["train_acc"] or "nan"))
        return table


def select_top_k(table: AugRunTable, strategy: str = "ttest", k: int = DEFAULT_K,
                 baseline_spec: str = "randomcrop224") -> list[str]:
    """Rank augmentation specs by validation accuracy.

    ``mean``: mean valid accuracy, descending.
    ``ttest``: paired t-test of each spec against ``baseline_spec`` over the
    shared seeds, keeping only specs with a positive mean improvement, ranked
    by p ascending. Ties fall back to the spec string.
    """
    specs = table.specs
    if k < 1 or k > len(specs):
        raise ValueError(f"k={k} outside [1, {len(specs)}]")
    if strategy == "mean":
        ranked = sorted(specs, key=lambda s: (-float(table.valid(s).mean()), s))
        return ranked[:k]
    if strategy != "ttest":
        raise ValueError(f"unknown strategy {strategy!r}")
    if baseline_spec not in specs:
        raise ValueError(f"baseline spec {baseline_spec!r} not in table")
    base_seeds = set(table.seeds(baseline_spec))
    scored = []
    for spec in specs:
        if spec == baseline_spec:
            continue
        seeds = sorted(base_seeds & set(table.seeds(spec)))
        if len(seeds) < 2:
            raise ValueError(f"{spec!r} shares fewer than two seeds with the baseline")
        xs, ys = table.valid(spec, seeds), table.valid(baseline_spec, seeds)
        if (xs - ys).mean() <= 0:
            continue
        _, p = paired_t_test(xs, ys)
        scored.append((p, spec))
    return [s for _, s in sorted(scored)[:k]]
