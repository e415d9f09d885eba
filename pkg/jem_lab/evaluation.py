"""
Classification, calibration and out-of-distribution metrics for a trained model.
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np
from scipy.stats import rankdata

from .errors import DimensionError, EmptyInputError
from .rng import Rng
from .utils import chunked, parallel_map

logger = logging.getLogger(__name__)

DEFAULT_BINS = 20
SCORE_NAMES = ("logp", "maxprob", "approx_mass")


@dataclass
class ReliabilityTable:
    """Per-bucket counts, mean confidence and accuracy over (0, 1] split into equal widths."""
    counts: np.ndarray
    confidence: np.ndarray
    accuracy: np.ndarray
    ece: float

    @property
    def num_bins(self) -> int:
        return len(self.counts)

    @property
    def n(self) -> int:
        return int(self.counts.sum())

    def bin_centers(self) -> np.ndarray:
        return (np.arange(self.num_bins) + 0.5) / self.num_bins

    def to_dict(self) -> Dict:
        return {
            "ece": self.ece,
            "num_bins": self.num_bins,
            "counts": self.counts.tolist(),
            "confidence": self.confidence.tolist(),
            "accuracy": self.accuracy.tolist(),
        }


def ece(confidences, correct, num_bins: int = DEFAULT_BINS) -> ReliabilityTable:
    """
    Expected calibration error, sum_m |B_m|/n * |acc(B_m) - conf(B_m)|.

    Bucket m (1-based) holds confidences in ((m-1)/M, m/M]; a confidence of
    exactly 0 goes to bucket 1. Empty buckets contribute nothing.
    """
    confidences = np.asarray(confidences, dtype=np.float64)
    correct = np.asarray(correct, dtype=np.float64)
    if confidences.shape != correct.shape:
        raise DimensionError(f"{confidences.shape[0]} confidences but {correct.shape[0]} correctness flags")
    if confidences.size == 0:
        raise EmptyInputError("ECE needs at least one prediction")
    buckets = np.clip(np.ceil(confidences * num_bins).astype(np.int64), 1, num_bins) - 1
    counts = np.bincount(buckets, minlength=num_bins)
    conf_sum = np.bincount(buckets, weights=confidences, minlength=num_bins)
    acc_sum = np.bincount(buckets, weights=correct, minlength=num_bins)
    nonempty = counts > 0
    mean_conf = np.where(nonempty, conf_sum / np.maximum(counts, 1), 0.0)
    mean_acc = np.where(nonempty, acc_sum / np.maximum(counts, 1), 0.0)
    value = float(np.sum(counts / confidences.size * np.abs(mean_acc - mean_conf)))
    return ReliabilityTable(counts, mean_conf, mean_acc, value)


def auroc(pos_scores, neg_scores) -> float:
    """P(pos > neg) with ties counted one half, via the midrank rank-sum statistic."""
    pos = np.asarray(pos_scores, dtype=np.float64).ravel()
    neg = np.asarray(neg_scores, dtype=np.float64).ravel()
    if pos.size == 0 or neg.size == 0:
        raise EmptyInputError("AUROC needs non-empty positive and negative score sets")
    ranks = rankdata(np.concatenate([pos, neg]))
    u = ranks[:pos.size].sum() - pos.size * (pos.size + 1) / 2.0
    return float(u / (pos.size * neg.size))


def accuracy(m, x, y) -> float:
    y = np.asarray(y)
    if y.size == 0:
        raise EmptyInputError("accuracy of an empty set is undefined")
    return float(np.mean(m.predict(x) == y))


def calibration(m, x, y, num_bins: int = DEFAULT_BINS) -> ReliabilityTable:
    """Reliability table of max p(y|x) against correctness."""
    log_probs = m.log_p_y_given_x(x)
    confidence = np.exp(np.max(log_probs, axis=-1))
    return ece(confidence, np.argmax(log_probs, axis=-1) == np.asarray(y), num_bins)


# --- OOD scores -------------------------------------------------------------------

def score_logp(m, x):
    """Unnormalised log-likelihood, logsumexp of the logits."""
    return m.log_p_tilde(x)


def score_maxprob(m, x):
    values = np.exp(np.max(m.log_p_y_given_x(x), axis=-1))
    return float(values) if np.ndim(x) == 1 else values


def score_approx_mass(m, x):
    """-||d log p(x) / dx||; large gradients mark points off the typical set."""
    values = -np.linalg.norm(m.grad_logp_x(x), axis=-1)
    return float(values) if np.ndim(x) == 1 else values


SCORES = {
    "logp": score_logp,
    "maxprob": score_maxprob,
    "approx_mass": score_approx_mass,
}


def score_batch(m, score: str, x, threads: int = 1, chunk_size: int = 256) -> np.ndarray:
    """Score rows of x in fixed chunks; chunk results are joined in order."""
    fn = SCORES[score]
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    parts = parallel_map(lambda s: np.atleast_1d(fn(m, x[s])), chunked(len(x), chunk_size), threads)
    return np.concatenate(parts) if parts else np.empty(0)


@dataclass
class OodScoreReport:
    score: str
    in_scores: np.ndarray
    ood_scores: Dict[str, np.ndarray] = field(default_factory=dict)
    auroc: Dict[str, float] = field(default_factory=dict)
    histograms: Dict[str, Dict[str, np.ndarray]] = field(default_factory=dict)

    def to_dict(self) -> Dict:
        return {
            "score": self.score,
            "auroc": dict(self.auroc),
            "in_mean": float(np.mean(self.in_scores)),
            "ood_mean": {name: float(np.mean(s)) for name, s in self.ood_scores.items()},
            "histograms": {name: {k: v.tolist() for k, v in h.items()} for name, h in self.histograms.items()},
        }


def _histogram(in_scores: np.ndarray, ood_scores: np.ndarray, bins: int) -> Dict[str, np.ndarray]:
    both = np.concatenate([in_scores, ood_scores])
    both = both[np.isfinite(both)]
    edges = np.histogram_bin_edges(both, bins=bins) if both.size else np.linspace(0.0, 1.0, bins + 1)
    return {
        "edges": edges,
        "in_counts": np.histogram(in_scores, bins=edges)[0],
        "ood_counts": np.histogram(ood_scores, bins=edges)[0],
    }


def ood_report(m, in_x, ood_sets: Dict[str, np.ndarray], scores: Sequence[str] = SCORE_NAMES,
               bins: int = 30, threads: int = 1) -> List[OodScoreReport]:
    """
    AUROC and histograms of each score for in-distribution vs every OOD set.

    Args:
        m: Model exposing log_p_tilde, log_p_y_given_x and grad_logp_x.
        in_x: In-distribution inputs (model space).
        ood_sets: Named OOD input arrays.
        scores: Score names from SCORES; in-distribution should score higher.
        bins: Histogram bin count, shared edges per (score, set).
        threads: Worker threads for chunked scoring.

    Returns:
        One OodScoreReport per score.
    """
    unknown = [s for s in scores if s not in SCORES]
    if unknown:
        raise KeyError(f"unknown OOD scores {unknown}, expected a subset of {SCORE_NAMES}")
    if len(in_x) == 0:
        raise EmptyInputError("in-distribution set is empty")
    for name, ood_x in ood_sets.items():
        if len(ood_x) == 0:
            raise EmptyInputError(f"OOD set '{name}' is empty")

    reports = []
    for score in scores:
        in_scores = score_batch(m, score, in_x, threads)
        report = OodScoreReport(score, in_scores)
        for name, ood_x in ood_sets.items():
            ood_scores = score_batch(m, score, ood_x, threads)
            report.ood_scores[name] = ood_scores
            report.auroc[name] = auroc(in_scores, ood_scores)
            report.histograms[name] = _histogram(in_scores, ood_scores, bins)
            logger.info(f"OOD {score} vs {name}: AUROC={report.auroc[name]:.4f}")
        reports.append(report)
    return reports


def default_ood_sets(dim: int, n: int, rng: Rng, low: float = -1.0, high: float = 1.0,
                     extra: Optional[Dict[str, np.ndarray]] = None) -> Dict[str, np.ndarray]:
    """
    Reference OOD sets in model space.

    "constant" repeats one random value across every coordinate of a point;
    "uniform" fills the data box independently per coordinate.
    """
    levels = rng.substream("constant").uniform(low, high, n)
    sets = {
        "constant": np.repeat(levels[:, None], dim, axis=1),
        "uniform": rng.substream("uniform").uniform(low, high, (n, dim)),
    }
    sets.update(extra or {})
    return sets
