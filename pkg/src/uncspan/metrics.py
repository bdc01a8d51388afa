"""Predictive entropy, uncertainty spans, calibration error and OOD detection metrics.

Entropies are in nats. Confidence means maximum softmax probability.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Sequence

import numpy as np

from . import nn
from .attacks import AttackConfig, attack_rows, overconfidence, underconfidence
from .errors import InputError
from .nn import ModelParams

DEFAULT_BUCKETS = 15


def entropy(p) -> np.ndarray:
    """-sum p ln p along the last axis, with 0 ln 0 = 0."""
    p = np.asarray(p, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * np.log(np.where(p > 0, p, 1.0)), 0.0)
    h = -terms.sum(axis=-1)
    # tiny negatives from rounding on one-hot rows
    return np.maximum(h, 0.0)


# --- uncertainty span --------------------------------------------------------


@dataclass(frozen=True)
class SpanRecord:
    row_id: int
    clean_entropy: float
    u_low: float
    u_high: float
    flagged: bool = False

    @property
    def width(self) -> float:
        return self.u_high - self.u_low


def _neg_entropy(probs):
    return -entropy(probs)


@dataclass
class SpanSweep:
    """Warm-started span results; arrays indexed ``[k, i]`` for budget ``k``, row ``i``."""

    epsilons: list
    clean: np.ndarray
    u_low: np.ndarray
    u_high: np.ndarray
    flagged: np.ndarray
    delta_low: list
    delta_high: list

    def records(self, k, row_ids) -> list:
        return [
            SpanRecord(int(r), float(c), float(lo), float(hi), bool(f))
            for r, c, lo, hi, f in zip(
                row_ids, self.clean, self.u_low[k], self.u_high[k], self.flagged[k]
            )
        ]


def span_sweep(
    params: ModelParams, X, epsilons: Sequence[float], cfg: AttackConfig, row_ids=None, threads=1
) -> SpanSweep:
    """Over- and under-confidence attacks at each budget of an ascending sweep.

    The attacks at budget ``k`` start from the perturbations found at budget
    ``k - 1`` (zero for the first budget) and keep the iterate with the best
    entropy. Every starting point stays feasible as the budget grows, so each
    row's lower bound never increases, its upper bound never decreases, and
    ``u_low <= clean <= u_high`` holds exactly.
    """
    X = np.asarray(X, dtype=np.float64)
    eps = [float(e) for e in epsilons]
    if any(b < a for a, b in zip(eps, eps[1:])):
        raise InputError("epsilons must be sorted ascending")
    row_ids = np.arange(len(X)) if row_ids is None else np.asarray(row_ids)
    y = np.zeros(len(X), dtype=np.int64)
    clean = entropy(nn.forward(params, X))
    d_low = np.zeros_like(X)
    d_high = np.zeros_like(X)
    lows, highs, flags, dls, dhs = [], [], [], [], []
    for e in eps:
        c = cfg.with_epsilon(e)
        lo = attack_rows(params, X, y, row_ids, overconfidence, c, d_low, entropy, threads)
        hi = attack_rows(params, X, y, row_ids, underconfidence, c, d_high, _neg_entropy, threads)
        flag = lo.flagged | hi.flagged
        # a failed row keeps its previous perturbation, preserving nesting
        d_low = np.where(lo.flagged[:, None], d_low, lo.delta)
        d_high = np.where(hi.flagged[:, None], d_high, hi.delta)
        u_low = np.minimum(entropy(nn.forward(params, X + d_low)), clean)
        u_high = np.maximum(entropy(nn.forward(params, X + d_high)), clean)
        if lows:
            u_low = np.minimum(u_low, lows[-1])
            u_high = np.maximum(u_high, highs[-1])
        lows.append(u_low)
        highs.append(u_high)
        flags.append(flag)
        dls.append(d_low)
        dhs.append(d_high)
    return SpanSweep(eps, clean, np.array(lows), np.array(highs), np.array(flags), dls, dhs)


def camouflage_sweep(
    params: ModelParams, X, epsilons: Sequence[float], cfg: AttackConfig, row_ids=None, threads=1
) -> list:
    """Warm-started over-confidence perturbations of ``X`` at each ascending budget.

    Used to disguise outliers as in-distribution inputs. Iterates are ranked
    by entropy, and a budget starts from the previous budget's result, so each
    row's entropy is non-increasing along the sweep. Returns one delta array
    per budget; rows whose attack fails keep their previous delta.
    """
    X = np.asarray(X, dtype=np.float64)
    eps = [float(e) for e in epsilons]
    if any(b < a for a, b in zip(eps, eps[1:])):
        raise InputError("epsilons must be sorted ascending")
    row_ids = np.arange(len(X)) if row_ids is None else np.asarray(row_ids)
    y = np.zeros(len(X), dtype=np.int64)
    delta = np.zeros_like(X)
    out = []
    for e in eps:
        res = attack_rows(
            params, X, y, row_ids, overconfidence, cfg.with_epsilon(e), delta, entropy, threads
        )
        delta = np.where(res.flagged[:, None], delta, res.delta)
        out.append(delta)
    return out


def uncertainty_span(params: ModelParams, x, cfg: AttackConfig, row_id=0) -> SpanRecord:
    x = np.asarray(x, dtype=np.float64)
    sweep = span_sweep(params, x[None, :], [cfg.epsilon], cfg, row_ids=[row_id])
    return sweep.records(0, [row_id])[0]


def _widths(records):
    if len(records) == 0:
        raise InputError("no span records")
    return np.array([r.u_high - r.u_low for r in records])


def mus(records) -> float:
    """Mean uncertainty-span width."""
    return math.fsum(_widths(records)) / len(records)


def msus(records) -> float:
    """Mean squared uncertainty-span width."""
    return math.fsum(_widths(records) ** 2) / len(records)


def span_summary(records) -> dict:
    w = _widths(records)
    return {
        "mus": mus(records),
        "mus_std": float(np.std(w)),
        "msus": msus(records),
        "msus_std": float(np.std(w ** 2)),
        "n": len(records),
    }


# --- calibration ---------------------------------------------------------------


@dataclass(frozen=True)
class CalibrationBins:
    """Equal-width confidence buckets.

    Bucket ``s`` covers ``[s/S, (s+1)/S)``; the last one is closed at 1.
    ``expected`` is the bucket midpoint, ``observed`` its accuracy (0 when
    the bucket is empty).
    """

    mass: np.ndarray
    correct: np.ndarray
    lo: np.ndarray
    hi: np.ndarray

    @property
    def size(self) -> int:
        return len(self.mass)

    @property
    def total(self) -> int:
        return int(self.mass.sum())

    @property
    def expected(self) -> np.ndarray:
        S = self.size
        return (2 * np.arange(S) + 1) / (2 * S)

    @property
    def observed(self) -> np.ndarray:
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(self.mass > 0, self.correct / np.maximum(self.mass, 1), 0.0)


def calibration_bins(confidences, correct, S: int = DEFAULT_BUCKETS) -> CalibrationBins:
    conf = np.asarray(confidences, dtype=np.float64)
    corr = np.asarray(correct, dtype=bool)
    if conf.shape != corr.shape or conf.ndim != 1 or conf.size == 0:
        raise InputError("confidences and correct must be equal-length, nonempty 1-D sequences")
    if np.any(conf < 0) or np.any(conf > 1) or not np.all(np.isfinite(conf)):
        raise InputError("confidences must lie in [0, 1]")
    if S < 1:
        raise InputError("need at least one bucket")
    edges = np.arange(S + 1) / S
    idx = np.clip(np.searchsorted(edges, conf, side="right") - 1, 0, S - 1)
    mass = np.bincount(idx, minlength=S)
    hits = np.bincount(idx, weights=corr.astype(np.float64), minlength=S).astype(np.int64)
    return CalibrationBins(mass, hits, edges[:-1], edges[1:])


def _weighted_gaps(bins: CalibrationBins):
    """Exact per-bucket terms (mass / N) * (accuracy - midpoint) as fractions.

    Counts are integers and midpoints rational, so the sums below are exact
    and rounded once; the result does not depend on summation order.
    """
    n = bins.total
    S = bins.size
    return [
        Fraction(int(m), n) * (Fraction(int(h), int(m)) - Fraction(2 * s + 1, 2 * S))
        for s, (m, h) in enumerate(zip(bins.mass, bins.correct))
        if m > 0
    ]


def ece(bins: CalibrationBins) -> float:
    return float(sum((abs(g) for g in _weighted_gaps(bins)), Fraction(0)))


def signed_ece(bins: CalibrationBins) -> float:
    """Sum of mass-weighted (accuracy - midpoint): negative means over-confident."""
    return float(sum(_weighted_gaps(bins), Fraction(0)))


def confidence_and_correct(probs, labels):
    probs = np.asarray(probs)
    return probs.max(axis=1), nn.argmax(probs) == np.asarray(labels)


# --- detection ---------------------------------------------------------------------


def _check_scores(scores_in, scores_out):
    s_in = np.asarray(scores_in, dtype=np.float64).ravel()
    s_out = np.asarray(scores_out, dtype=np.float64).ravel()
    if s_in.size == 0 or s_out.size == 0:
        raise InputError("both score sets must be nonempty")
    return s_in, s_out


def auroc(scores_in, scores_out) -> float:
    """P(out score > in score) + 0.5 P(tie), via mid-ranks."""
    s_in, s_out = _check_scores(scores_in, scores_out)
    allv = np.concatenate([s_in, s_out])
    order = np.argsort(allv, kind="mergesort")
    sorted_v = allv[order]
    ranks = np.empty(len(allv))
    # mid-rank for each run of equal values
    starts = np.flatnonzero(np.r_[True, sorted_v[1:] != sorted_v[:-1]])
    ends = np.r_[starts[1:], len(allv)]
    mid = (starts + ends - 1) / 2.0 + 1.0
    ranks[order] = np.repeat(mid, ends - starts)
    n_in, n_out = len(s_in), len(s_out)
    u = ranks[n_in:].sum() - n_out * (n_out + 1) / 2.0
    return float(u / (n_in * n_out))


def average_precision(scores_pos, scores_neg) -> float:
    """Area under precision-recall by steps over distinct thresholds (high score = positive)."""
    s_pos, s_neg = _check_scores(scores_pos, scores_neg)
    allv = np.concatenate([s_pos, s_neg])
    is_pos = np.r_[np.ones(len(s_pos)), np.zeros(len(s_neg))]
    order = np.argsort(-allv, kind="mergesort")
    v, lab = allv[order], is_pos[order]
    last = np.r_[v[1:] != v[:-1], True]
    tp = np.cumsum(lab)[last]
    fp = np.cumsum(1 - lab)[last]
    precision = tp / (tp + fp)
    recall = tp / len(s_pos)
    d_recall = np.diff(np.r_[0.0, recall])
    return float(np.sum(d_recall * precision))


def fpr_at_tpr(scores_in, scores_out, tpr=0.95) -> float:
    """In-distribution false-positive rate at the first threshold (high to low)
    where at least ``tpr`` of the outliers score at or above it."""
    s_in, s_out = _check_scores(scores_in, scores_out)
    thresholds = np.unique(s_out)[::-1]
    out_sorted = np.sort(s_out)
    in_sorted = np.sort(s_in)
    hit = len(s_out) - np.searchsorted(out_sorted, thresholds, side="left")
    k = int(np.argmax(hit >= tpr * len(s_out) - 1e-12))
    t = thresholds[k]
    fp = len(s_in) - np.searchsorted(in_sorted, t, side="left")
    return float(fp / len(s_in))


@dataclass(frozen=True)
class DetectionResult:
    auroc: float
    aupr_in: float
    aupr_out: float
    fpr_at_95_tpr: float


def detection_metrics(scores_in, scores_out) -> DetectionResult:
    """Outliers are the positive class and are expected to score higher."""
    s_in, s_out = _check_scores(scores_in, scores_out)
    return DetectionResult(
        auroc(s_in, s_out),
        average_precision(-s_in, -s_out),
        average_precision(s_out, s_in),
        fpr_at_tpr(s_in, s_out, 0.95),
    )
