"""Guidance maps, ground-truth difference maps, NCC scoring and classification metrics."""

from __future__ import annotations

import csv
import json
import logging
import warnings
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Tuple

import numpy as np
from scipy.stats import rankdata

from .core import ShapeError

logger = logging.getLogger(__name__)

STD_EPS = 1e-12


class UndefinedScoreError(ValueError):
    """NCC is undefined for a constant operand."""


def min_max(a: np.ndarray) -> np.ndarray:
    """Scale the whole array into [0, 1]; a constant array maps to zeros."""
    a = np.asarray(a, dtype=np.float64)
    lo, hi = a.min(), a.max()
    if hi - lo <= 0:
        return np.zeros_like(a)
    return (a - lo) / (hi - lo)


def build_guidance(m_first, m_last) -> np.ndarray:
    """MinMax(|m_first| + |m_last|) over each sample.

    Inputs are single maps or batches with a leading sample axis; the
    channel axis is summed away so the result has one channel.
    """
    m_first, m_last = np.asarray(m_first, np.float64), np.asarray(m_last, np.float64)
    if m_first.shape != m_last.shape:
        raise ShapeError(f"maps differ in shape: {m_first.shape} vs {m_last.shape}")
    combined = np.abs(m_first) + np.abs(m_last)
    return min_max(combined)


def build_guidance_batch(m_first: np.ndarray, m_last: np.ndarray) -> np.ndarray:
    """Per-sample :func:`build_guidance` over channel-last batches ``(N, *spatial, C)``."""
    if m_first.shape != m_last.shape:
        raise ShapeError(f"maps differ in shape: {m_first.shape} vs {m_last.shape}")
    combined = (np.abs(m_first) + np.abs(m_last)).sum(axis=-1, keepdims=True)
    return np.stack([min_max(c) for c in combined])


@dataclass(frozen=True)
class GroundTruthMap:
    values: np.ndarray
    direction: str
    baseline_id: str = ""
    target_id: str = ""

    def __post_init__(self):
        if self.direction not in ("plus", "minus"):
            raise ValueError(f"direction must be 'plus' or 'minus', got {self.direction!r}")


def ground_truth_map(baseline, target, baseline_id: str = "", target_id: str = ""):
    """(plus, minus) maps: plus = baseline - target, minus = target - baseline."""
    baseline, target = np.asarray(baseline, np.float64), np.asarray(target, np.float64)
    if baseline.shape != target.shape:
        raise ShapeError(f"image pair differs in shape: {baseline.shape} vs {target.shape}")
    plus = baseline - target
    return (GroundTruthMap(plus, "plus", baseline_id, target_id),
            GroundTruthMap(-plus, "minus", target_id, baseline_id))


def ncc(a, b) -> float:
    """Mean product of z-scores (population std)."""
    a, b = np.asarray(a, np.float64).ravel(), np.asarray(b, np.float64).ravel()
    if a.shape != b.shape:
        raise ShapeError(f"ncc operands differ in size: {a.size} vs {b.size}")
    sa, sb = a.std(), b.std()
    if sa <= STD_EPS or sb <= STD_EPS:
        raise UndefinedScoreError("ncc undefined for a constant operand")
    value = float(np.mean((a - a.mean()) / sa * ((b - b.mean()) / sb)))
    return min(1.0, max(-1.0, value))


@dataclass
class NccReport:
    """Mean NCC per (scenario, direction)."""

    means: Dict[Tuple[str, str], float] = field(default_factory=dict)
    counts: Dict[Tuple[str, str], int] = field(default_factory=dict)
    scores: Dict[Tuple[str, str], List[float]] = field(default_factory=dict)

    def add(self, scenario: str, direction: str, score: float):
        key = (scenario, direction)
        self.scores.setdefault(key, []).append(score)
        self.counts[key] = len(self.scores[key])
        self.means[key] = float(np.mean(self.scores[key]))

    def mean(self, direction: Optional[str] = None) -> float:
        vals = [s for (sc, d), ss in self.scores.items() if direction in (None, d) for s in ss]
        return float(np.mean(vals)) if vals else float("nan")

    def rows(self) -> list:
        return [dict(scenario=s, direction=d, n=self.counts[(s, d)], mean=self.means[(s, d)])
                for (s, d) in sorted(self.means)]

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=["scenario", "direction", "n", "mean"])
            w.writeheader()
            w.writerows(self.rows())

    def to_json(self, path) -> None:
        Path(path).write_text(json.dumps({"rows": self.rows(), "overall": {
            "plus": self.mean("plus"), "minus": self.mean("minus")}}, indent=2))


@dataclass(frozen=True)
class MapPair:
    """A generated map and its ground truth for one (subject, scenario, direction)."""

    subject: str
    scenario: str
    direction: str
    cf_map: np.ndarray
    gt_map: np.ndarray


def directional_ncc(pairs: Iterable[MapPair]) -> NccReport:
    """Score every matched pair; ``direction`` is 'plus' (toward the healthier class) or 'minus'."""
    report = NccReport()
    for p in pairs:
        if p.direction not in ("plus", "minus"):
            raise ValueError(f"unknown direction {p.direction!r}")
        if np.shape(p.cf_map) != np.shape(p.gt_map):
            raise ValueError(f"unmatched pair for subject {p.subject!r}: shapes "
                             f"{np.shape(p.cf_map)} vs {np.shape(p.gt_map)}")
        report.add(p.scenario, p.direction, ncc(p.cf_map, p.gt_map))
    return report


def match_pairs(cf_maps: Dict[tuple, np.ndarray], gt_maps: Dict[tuple, np.ndarray]) -> List[MapPair]:
    """Pair maps keyed by ``(subject, scenario, direction)``; unmatched keys raise."""
    missing = sorted(set(cf_maps) ^ set(gt_maps))
    if missing:
        raise ValueError(f"unmatched map ids: {missing}")
    return [MapPair(s, sc, d, cf_maps[(s, sc, d)], gt_maps[(s, sc, d)]) for (s, sc, d) in sorted(cf_maps)]


def shuffled_pairs(pairs: List[MapPair], rng: np.random.Generator) -> List[MapPair]:
    """Permutation baseline: ground truths derangement-shuffled within each (scenario, direction)."""
    out = []
    groups: Dict[tuple, List[MapPair]] = {}
    for p in pairs:
        groups.setdefault((p.scenario, p.direction), []).append(p)
    for group in groups.values():
        n = len(group)
        if n < 2:
            continue
        shift = rng.integers(1, n)
        order = rng.permutation(n)
        for i in range(n):
            src, dst = group[order[i]], group[order[(i + shift) % n]]
            out.append(MapPair(src.subject, src.scenario, src.direction, src.cf_map, dst.gt_map))
    return out


def accuracy(labels, predictions) -> float:
    labels, predictions = np.asarray(labels), np.asarray(predictions)
    if labels.ndim == 2:
        labels = labels.argmax(axis=1)
    if predictions.ndim == 2:
        predictions = predictions.argmax(axis=1)
    if labels.shape != predictions.shape:
        raise ShapeError(f"{labels.size} labels vs {predictions.size} predictions")
    return float(np.mean(labels == predictions))


def binary_auc(positive, scores) -> float:
    """ROC AUC via the Mann-Whitney U statistic with midranks for ties.

    Twice the U statistic is an integer, so the ratio is formed exactly and
    rounded once.
    """
    positive = np.asarray(positive, dtype=bool)
    scores = np.asarray(scores, dtype=np.float64)
    n_pos = int(positive.sum())
    n_neg = positive.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC needs both positive and negative samples")
    twice_ranks = int(round(2 * rankdata(scores)[positive].sum()))
    twice_u = twice_ranks - n_pos * (n_pos + 1)
    return float(Fraction(twice_u, 2 * n_pos * n_neg))


def mauc(labels, probability_rows) -> float:
    """Macro one-vs-rest ROC AUC; classes absent from ``labels`` are skipped with a warning."""
    labels = np.asarray(labels)
    probs = np.asarray(probability_rows, dtype=np.float64)
    if probs.ndim == 1:
        probs = np.stack([1 - probs, probs], axis=1)
    if labels.ndim == 2:
        labels = labels.argmax(axis=1)
    present = np.unique(labels)
    if present.size < 2:
        raise ValueError("mAUC needs at least two classes present in labels")
    if probs.shape[1] == 2:
        return binary_auc(labels == 1, probs[:, 1])
    aucs = []
    for c in range(probs.shape[1]):
        if c not in present:
            warnings.warn(f"class {c} absent from labels; skipped in mAUC", RuntimeWarning, stacklevel=2)
            continue
        aucs.append(binary_auc(labels == c, probs[:, c]))
    return float(np.mean(aucs))
