"""Clustering and verification metrics."""

from __future__ import annotations

from collections.abc import Sequence
from dataclasses import asdict, dataclass
from itertools import combinations

import numpy as np
from scipy.optimize import linear_sum_assignment

from faceadapt.core import ValidationError


@dataclass(frozen=True)
class MetricReport:
    homogeneity: float
    completeness: float
    v_measure: float
    purity: float
    accuracy: float
    oci: float
    n_clusters: int = 0
    n_classes: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


def contingency(pred, truth) -> np.ndarray:
    """Class x cluster count table."""
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    if pred.shape != truth.shape or pred.ndim != 1:
        raise ValidationError(f"label length mismatch: {pred.shape} vs {truth.shape}")
    if pred.size == 0:
        raise ValidationError("empty labelings")
    _, ci = np.unique(truth, return_inverse=True)
    _, ki = np.unique(pred, return_inverse=True)
    table = np.zeros((ci.max() + 1, ki.max() + 1), dtype=np.int64)
    np.add.at(table, (ci.ravel(), ki.ravel()), 1)
    return table


def _entropy(counts: np.ndarray) -> float:
    p = counts[counts > 0] / counts.sum()
    return float(-np.sum(p * np.log(p)))


def _conditional_entropy(table: np.ndarray) -> float:
    """H(row variable | column variable) from a joint count table."""
    n = table.sum()
    col = table.sum(axis=0)
    nz = table > 0
    ratio = table[nz] / np.broadcast_to(col, table.shape)[nz]
    return float(-np.sum(table[nz] / n * np.log(ratio)))


def homogeneity_completeness_v(pred, truth) -> tuple[float, float, float]:
    table = contingency(pred, truth)
    h_c = _entropy(table.sum(axis=1))
    h_k = _entropy(table.sum(axis=0))
    h = 1.0 if h_c == 0 else 1.0 - _conditional_entropy(table) / h_c
    c = 1.0 if h_k == 0 else 1.0 - _conditional_entropy(table.T) / h_k
    v = 0.0 if h + c == 0 else 2.0 * h * c / (h + c)
    return h, c, v


def purity_accuracy(pred, truth) -> tuple[float, float]:
    """Purity and accuracy under the best one-to-one cluster/class matching."""
    table = contingency(pred, truth)
    n = table.sum()
    purity = table.max(axis=0).sum() / n
    rows, cols = linear_sum_assignment(-table)
    accuracy = table[rows, cols].sum() / n
    return float(purity), float(accuracy)


def over_clustering_index(pred, truth, variant: str = "any") -> float:
    """Mean number of predicted clusters per true class.

    ``any`` counts every cluster holding at least one member of the class;
    ``majority`` counts clusters whose plurality class it is (classes that
    win no cluster then count zero).
    """
    table = contingency(pred, truth)
    if variant == "any":
        per_class = (table > 0).sum(axis=1)
    elif variant == "majority":
        winners = np.argmax(table, axis=0)
        per_class = np.bincount(winners, minlength=table.shape[0])
    else:
        raise ValidationError(f"unknown OCI variant {variant!r}")
    return float(per_class.mean())


def evaluate(pred, truth) -> MetricReport:
    h, c, v = homogeneity_completeness_v(pred, truth)
    purity, acc = purity_accuracy(pred, truth)
    table = contingency(pred, truth)
    return MetricReport(h, c, v, purity, acc, over_clustering_index(pred, truth),
                        n_clusters=table.shape[1], n_classes=table.shape[0])


def verification_pairs(labels: Sequence, ids: Sequence | None = None) -> list[tuple]:
    """Every unordered pair of labelled tracks as (id_a, id_b, same_identity)."""
    labels = list(labels)
    if len(labels) < 2:
        raise ValidationError("need at least 2 labelled tracks")
    ids = list(range(len(labels))) if ids is None else list(ids)
    if len(ids) != len(labels):
        raise ValidationError("ids and labels differ in length")
    return [(ids[a], ids[b], labels[a] == labels[b]) for a, b in combinations(range(len(labels)), 2)]


def roc_points(scores, same) -> tuple[np.ndarray, np.ndarray]:
    """(FPR, TPR) at every distinct threshold, from (0, 0) to (1, 1).

    A pair is accepted when its score is >= the threshold.
    """
    scores = np.asarray(scores, dtype=np.float64)
    same = np.asarray(same, dtype=bool)
    if scores.shape != same.shape:
        raise ValidationError("scores and labels differ in length")
    n_pos = int(same.sum())
    n_neg = same.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValidationError("need both same and different pairs")
    order = np.argsort(-scores, kind="stable")
    s = scores[order]
    tp = np.cumsum(same[order])
    fp = np.cumsum(~same[order])
    # keep the last index of each run of equal scores
    last = np.r_[np.flatnonzero(np.diff(s) != 0), s.size - 1]
    fpr = np.r_[0.0, fp[last] / n_neg]
    tpr = np.r_[0.0, tp[last] / n_pos]
    return fpr, tpr


def tpr_at_fpr(scores, same, fpr_target: float = 0.1) -> float:
    """Step-function TPR at the loosest threshold whose FPR stays <= target."""
    fpr, tpr = roc_points(scores, same)
    ok = fpr <= fpr_target + 1e-12
    return float(tpr[ok].max())


def format_vmeasure_table(results: dict, videos: Sequence | None = None) -> str:
    """Text table of V-measure (x100): one row per method, one column per video,
    then the mean with mean OCI in parentheses.

    ``results`` maps method name -> {video_id: MetricReport}.
    """
    if not results:
        return ""
    if videos is None:
        videos = sorted({v for per in results.values() for v in per}, key=str)
    head = ["Method", *[str(v) for v in videos], "Mean (OCI)"]
    body = []
    for method, per in results.items():
        vals = [per[v].v_measure * 100 if v in per else float("nan") for v in videos]
        ocis = [per[v].oci for v in videos if v in per]
        cells = [f"{x:.1f}" for x in vals]
        cells.append(f"{np.nanmean(vals):.1f} ({np.mean(ocis):.1f})")
        body.append([method, *cells])
    widths = [max(len(r[i]) for r in [head, *body]) for i in range(len(head))]
    fmt = lambda r: "  ".join(c.ljust(w) if i == 0 else c.rjust(w) for i, (c, w) in enumerate(zip(r, widths)))
    lines = [fmt(head), "  ".join("-" * w for w in widths)]
    lines += [fmt(r) for r in body]
    return "\n".join(lines)
