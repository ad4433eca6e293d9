"""Evaluation metrics for anomaly scores (label 1 = anomaly, higher score = more anomalous)."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.stats import rankdata

from .errors import UndefinedMetricError

N_FIELDS = 4


def _as_arrays(scores, labels):
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    y = np.asarray(labels).reshape(-1).astype(bool)
    if s.shape != y.shape:
        raise ValueError(f"{s.size} scores but {y.size} labels")
    return s, y


def auc_roc(scores, labels):
    """Area under the ROC curve via the Mann-Whitney U statistic.

    Equals P(s_anomaly > s_normal) + 0.5 * P(tie) over all cross-class pairs.
    """
    s, y = _as_arrays(scores, labels)
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUC-ROC needs both normal and anomalous samples")
    ranks = rankdata(s)  # average ranks handle ties
    u = ranks[y].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def auc_pr(scores, labels):
    """Average precision with step interpolation.

    Samples are ranked by descending score; among equal scores normals are
    placed before anomalies, which gives the lowest AP consistent with ties.
    """
    s, y = _as_arrays(scores, labels)
    n_pos = int(y.sum())
    if n_pos == 0:
        raise UndefinedMetricError("AUC-PR needs at least one anomaly")
    order = np.lexsort((y, -s))  # primary: -score ascending; secondary: normals first
    hits = y[order]
    tp = np.cumsum(hits)
    rank = np.arange(1, s.size + 1)
    return float(np.sum(tp[hits] / rank[hits]) / n_pos)


def ks_statistic(scores_normal, scores_abnormal):
    """Two-sample Kolmogorov-Smirnov statistic, exact over the pooled sample points."""
    a = np.sort(np.asarray(scores_normal, dtype=np.float64).reshape(-1))
    b = np.sort(np.asarray(scores_abnormal, dtype=np.float64).reshape(-1))
    if a.size == 0 or b.size == 0:
        raise UndefinedMetricError("KS statistic needs both samples non-empty")
    pooled = np.concatenate([a, b])
    cdf_a = np.searchsorted(a, pooled, side="right") / a.size
    cdf_b = np.searchsorted(b, pooled, side="right") / b.size
    return float(np.max(np.abs(cdf_a - cdf_b)))


def score_difference(scores, labels, field_id):
    """Per-field gap between mean anomaly score and mean normal score.

    Returns a 4-tuple; a field lacking either class yields ``None``.
    """
    s, y = _as_arrays(scores, labels)
    f = np.asarray(field_id).reshape(-1)
    out = []
    for k in range(N_FIELDS):
        in_field = f == k
        pos = s[in_field & y]
        neg = s[in_field & ~y]
        out.append(float(pos.mean() - neg.mean()) if pos.size and neg.size else None)
    return tuple(out)


@dataclass
class Histogram:
    edges: np.ndarray
    counts_normal: np.ndarray
    counts_abnormal: np.ndarray

    def rows(self):
        for k in range(self.counts_normal.size):
            yield (
                float(self.edges[k]),
                float(self.edges[k + 1]),
                int(self.counts_normal[k]),
                int(self.counts_abnormal[k]),
            )


def histogram(scores, labels, n_bins=20):
    if n_bins < 1:
        raise ValueError("n_bins must be >= 1")
    s, y = _as_arrays(scores, labels)
    lo, hi = (float(s.min()), float(s.max())) if s.size else (0.0, 1.0)
    edges = np.histogram_bin_edges(s, bins=n_bins, range=(lo, hi))
    counts_n, _ = np.histogram(s[~y], bins=edges)
    counts_a, _ = np.histogram(s[y], bins=edges)
    return Histogram(edges, counts_n, counts_a)


@dataclass
class EvalReport:
    auc_roc: float
    auc_pr: float
    ks: float
    score_diffs: Optional[tuple] = None
    histogram: Optional[Histogram] = field(default=None, repr=False)

    def to_dict(self):
        doc = {
            "auc_roc": self.auc_roc,
            "auc_pr": self.auc_pr,
            "ks": self.ks,
            "score_diffs": list(self.score_diffs) if self.score_diffs is not None else None,
            "histogram": None,
        }
        if self.histogram is not None:
            doc["histogram"] = {
                "edges": self.histogram.edges.tolist(),
                "normal": self.histogram.counts_normal.tolist(),
                "abnormal": self.histogram.counts_abnormal.tolist(),
            }
        return doc

    def to_text(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def evaluate_scores(scores, labels, field_id=None, n_bins=20):
    s, y = _as_arrays(scores, labels)
    return EvalReport(
        auc_roc=auc_roc(s, y),
        auc_pr=auc_pr(s, y),
        ks=ks_statistic(s[~y], s[y]),
        score_diffs=score_difference(s, y, field_id) if field_id is not None else None,
        histogram=histogram(s, y, n_bins),
    )
