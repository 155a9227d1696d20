"""Mask-aware multi-label metrics, threshold sweeps, rare/frequent segments,
the three-way ablation and gate-value histograms.

Only entries with a non-zero mask are scored: ``+1`` is a positive label,
``-1`` a negative one, ``0`` (not asked) is ignored everywhere.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

from .model import LanternConfig, check_mask
from .synth import DatasetManifest, frequency_buckets, stack
from .training import TrainConfig, TrainResult, train

DEFAULT_THRESHOLD = 0.5
DEFAULT_GRID = (0.3, 0.5, 0.7)


@dataclass(frozen=True)
class MetricsReport:
    precision: float
    recall: float
    f1: float
    tp: int
    fp: int
    fn: int
    threshold: Optional[float] = None
    n_scored: int = 0
    averaging: str = "micro"


def masked_confusion(y_hat, mask, threshold: float = DEFAULT_THRESHOLD, keys: Optional[Iterable[int]] = None) -> tuple[int, int, int]:
    """Micro-pooled ``(tp, fp, fn)`` over asked entries, optionally restricted to ``keys``."""
    if not 0.0 < threshold < 1.0:
        raise ValueError(f"threshold must lie in (0, 1), got {threshold}")
    y_hat = np.asarray(y_hat)
    m = check_mask(mask)
    if m.shape != y_hat.shape:
        raise ValueError(f"mask shape {m.shape} does not match predictions {y_hat.shape}")
    if keys is not None:
        cols = np.asarray(sorted(keys), dtype=np.int64)
        y_hat, m = y_hat[..., cols], m[..., cols]
    pred = y_hat >= threshold
    pos, neg = m == 1, m == -1
    return int((pred & pos).sum()), int((pred & neg).sum()), int((~pred & pos).sum())


def precision_recall_f1(tp: int, fp: int, fn: int, threshold: Optional[float] = None, n_scored: int = 0) -> MetricsReport:
    """Precision, recall and F1 with the convention that a zero denominator gives 0."""
    if min(tp, fp, fn) < 0:
        raise ValueError("confusion counts must be non-negative")
    p = tp / (tp + fp) if tp + fp else 0.0
    r = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * p * r / (p + r) if p + r else 0.0
    return MetricsReport(p, r, f1, tp, fp, fn, threshold, n_scored)


def evaluate(y_hat, mask, threshold: float = DEFAULT_THRESHOLD, keys: Optional[Iterable[int]] = None,
             averaging: str = "micro") -> MetricsReport:
    """Metrics over asked entries.

    ``micro`` pools counts over every (user, key) entry.  ``macro`` averages the
    per-key metrics over keys with at least one asked entry; the counts in the
    report stay pooled.
    """
    keys = None if keys is None else sorted(keys)
    tp, fp, fn = masked_confusion(y_hat, mask, threshold, keys)
    m = np.asarray(mask) if keys is None else np.asarray(mask)[..., keys]
    n_scored = int((m != 0).sum())
    if averaging == "micro":
        return precision_recall_f1(tp, fp, fn, threshold, n_scored)
    if averaging != "macro":
        raise ValueError(f"unknown averaging {averaging!r}")
    cols = range(np.asarray(mask).shape[-1]) if keys is None else keys
    per_key = []
    for k in cols:
        if np.any(np.asarray(mask)[..., k] != 0):
            per_key.append(precision_recall_f1(*masked_confusion(y_hat, mask, threshold, [k])))
    if not per_key:
        return MetricsReport(0.0, 0.0, 0.0, tp, fp, fn, threshold, n_scored, "macro")
    return MetricsReport(
        float(np.mean([r.precision for r in per_key])),
        float(np.mean([r.recall for r in per_key])),
        float(np.mean([r.f1 for r in per_key])),
        tp, fp, fn, threshold, n_scored, "macro",
    )


# ---------------------------------------------------------------------------
# threshold sweep


@dataclass
class ThresholdSweep:
    rows: list[tuple[float, MetricsReport]]

    @property
    def thresholds(self) -> list[float]:
        return [t for t, _ in self.rows]

    def to_csv(self) -> str:
        lines = ["threshold,precision,recall,f1"]
        lines += [f"{t!r},{r.precision!r},{r.recall!r},{r.f1!r}" for t, r in self.rows]
        return "\n".join(lines) + "\n"


def threshold_sweep(y_hat, mask, thresholds: Sequence[float] = DEFAULT_GRID, averaging: str = "micro") -> ThresholdSweep:
    thresholds = [float(t) for t in thresholds]
    if not thresholds:
        raise ValueError("threshold grid is empty")
    if any(b <= a for a, b in zip(thresholds, thresholds[1:])):
        raise ValueError(f"thresholds must be strictly increasing, got {thresholds}")
    rows = [(t, evaluate(y_hat, mask, t, averaging=averaging)) for t in thresholds]
    if averaging == "micro":
        recalls = [r.recall for _, r in rows]
        # raising the threshold only removes predicted positives
        assert all(b <= a for a, b in zip(recalls, recalls[1:])), recalls
    return ThresholdSweep(rows)


# ---------------------------------------------------------------------------
# rare / frequent segments


@dataclass
class SegmentReport:
    rare: MetricsReport
    frequent: MetricsReport
    rare_keys: frozenset[int]
    frequent_keys: frozenset[int]

    def to_csv(self) -> str:
        lines = ["bucket,precision,recall,f1"]
        for name, r in (("rare", self.rare), ("frequent", self.frequent)):
            lines.append(f"{name},{r.precision!r},{r.recall!r},{r.f1!r}")
        return "\n".join(lines) + "\n"


def segment_eval(y_hat, mask, rare_keys: Iterable[int], frequent_keys: Iterable[int],
                 threshold: float = DEFAULT_THRESHOLD, averaging: str = "micro") -> SegmentReport:
    rare, frequent = frozenset(int(k) for k in rare_keys), frozenset(int(k) for k in frequent_keys)
    overlap = rare & frequent
    if overlap:
        raise ValueError(f"rare and frequent buckets overlap on keys {sorted(overlap)[:10]}")
    return SegmentReport(
        evaluate(y_hat, mask, threshold, rare, averaging),
        evaluate(y_hat, mask, threshold, frequent, averaging),
        rare,
        frequent,
    )


# ---------------------------------------------------------------------------
# ablation


@dataclass
class AblationResult:
    reports: dict[str, MetricsReport]
    runs: dict[str, TrainResult] = field(default_factory=dict)
    eval_idx: Optional[np.ndarray] = None

    def to_csv(self) -> str:
        lines = ["variant,precision,recall,f1"]
        for name, r in self.reports.items():
            lines.append(f"{name},{r.precision!r},{r.recall!r},{r.f1!r}")
        return "\n".join(lines) + "\n"


def ablation_suite(
    dataset,
    model_cfg: LanternConfig,
    train_cfg: TrainConfig,
    threshold: float = DEFAULT_THRESHOLD,
    variants: Sequence[str] = ("survey_only", "external_only", "fused"),
    averaging: str = "micro",
) -> AblationResult:
    """Train every variant with the same seed (hence the same split) and score the held-out users."""
    if isinstance(dataset, tuple) and len(dataset) == 2 and isinstance(dataset[0], DatasetManifest):
        dataset = dataset[1]
    arrays = dataset if isinstance(dataset, tuple) and len(dataset) == 3 else stack(dataset)
    x_s, x_e, masks = arrays
    reports, runs = {}, {}
    eval_idx = None
    for variant in variants:
        cfg = TrainConfig(**{**train_cfg.__dict__, "variant": variant})
        run = train(arrays, cfg, model_cfg)
        eval_idx = run.val_idx
        y_hat = run.assembly.predict(x_s[eval_idx], x_e[eval_idx], run.params)
        reports[variant] = evaluate(y_hat, masks[eval_idx], threshold, averaging=averaging)
        runs[variant] = run
    return AblationResult(reports, runs, eval_idx)


# ---------------------------------------------------------------------------
# gate histogram


@dataclass
class GateHistogram:
    edges: np.ndarray
    counts: np.ndarray
    mean: float
    frac_low: float
    frac_high: float

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def to_csv(self) -> str:
        lines = ["bin_left,bin_right,count"]
        for lo, hi, c in zip(self.edges[:-1], self.edges[1:], self.counts):
            lines.append(f"{float(lo)!r},{float(hi)!r},{int(c)}")
        return "\n".join(lines) + "\n"


def gate_histogram(gate_values, n_bins: int = 50) -> GateHistogram:
    """Histogram over [0, 1] plus the mean and the shares below 0.1 and above 0.9."""
    if n_bins < 2:
        raise ValueError(f"n_bins must be >= 2, got {n_bins}")
    g = np.asarray(gate_values, dtype=np.float64).reshape(-1)
    if g.size and (g.min() <= 0.0 or g.max() >= 1.0 or not np.isfinite(g).all()):
        raise ValueError("gate values must lie strictly inside (0, 1)")
    edges = np.linspace(0.0, 1.0, n_bins + 1)
    counts, _ = np.histogram(g, bins=edges)
    if g.size == 0:
        return GateHistogram(edges, counts, 0.0, 0.0, 0.0)
    return GateHistogram(edges, counts, float(g.mean()), float((g < 0.1).mean()), float((g > 0.9).mean()))


def rare_frequent_buckets(masks: np.ndarray, k: int, count: str = "served") -> tuple[set[int], set[int]]:
    return frequency_buckets(np.asarray(masks), k, count)
