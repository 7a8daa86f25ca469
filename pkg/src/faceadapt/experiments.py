"""Reusable synthetic experiments: corpus to clustering scores."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from faceadapt.cluster import hac
from faceadapt.core import normalize_columns, track_mean
from faceadapt.harvest import harvest
from faceadapt.metrics import evaluate
from faceadapt.mining import hard_distances, mine_corpus
from faceadapt.mvcorr import adapt_closed_form, fit_mvcorr
from faceadapt.synth import SyntheticSpec, generate


@dataclass
class ClosedFormRun:
    seed: int
    r: int
    v_baseline: float
    v_adapted: float
    pos_before: np.ndarray
    pos_after: np.ndarray
    neg_before: np.ndarray
    neg_after: np.ndarray


def prepare(spec: SyntheticSpec, P: int = 3):
    """Generate, harvest and mine a corpus; returns (corpus, kept tracks, samples)."""
    corpus = generate(spec)
    kept, graph, _ = harvest(corpus.tracks, spec.frames_min)
    samples, _ = mine_corpus(kept, corpus.embeddings, graph, P)
    return corpus, kept, samples


def hac_v_measure(corpus, tracks, transform=None, linkage: str = "average") -> float:
    """Mean per-video V-measure of HAC with the true identity count."""
    scores = []
    for vid in tracks.video_ids:
        members = tracks.by_video(vid)
        X = np.column_stack([track_mean(t, corpus.embeddings[vid]).vector for t in members])
        X = normalize_columns(X) if transform is None else transform(X)
        truth = [t.label for t in members]
        labels = hac(X, len(set(truth)), linkage).labels
        scores.append(evaluate(labels, truth).v_measure)
    return float(np.mean(scores))


def closed_form_run(spec: SyntheticSpec, min_corr: float | None = 0.9, r: int | None = None) -> ClosedFormRun:
    """Baseline versus closed-form MvCorr adaptation on one synthetic corpus."""
    corpus, kept, samples = prepare(spec)
    model = fit_mvcorr(samples, r, min_corr=None if r is not None else min_corr)
    adapt = lambda X: adapt_closed_form(model, X)
    pos_b, neg_b = hard_distances(samples)
    pos_a, neg_a = hard_distances(samples, transform=adapt)
    return ClosedFormRun(spec.seed, model.r, hac_v_measure(corpus, kept), hac_v_measure(corpus, kept, adapt),
                         pos_b, pos_a, neg_b, neg_a)
