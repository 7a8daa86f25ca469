"""Compare adaptation methods on synthetic corpora.

Methods: raw track means, closed-form MvCorr at full rank and with
correlation-based rank selection, a deep MvCorr network and an ImpTriplet
network.  Prints a V-measure table (per seed, mean and OCI) and the mean
verification TPR at 0.1 FPR.

    python3 scripts/benchmark.py --seeds 0 1 2 --identities 10 --tracks 20
"""

import argparse
import time

import numpy as np

from faceadapt.cluster import hac
from faceadapt.core import cross_distances, normalize_columns, track_mean
from faceadapt.experiments import prepare
from faceadapt.metrics import MetricReport, evaluate, format_vmeasure_table, tpr_at_fpr, verification_pairs
from faceadapt.mvcorr import adapt_closed_form, fit_mvcorr
from faceadapt.nn import NetworkConfig
from faceadapt.synth import SyntheticSpec
from faceadapt.train import TrainConfig, adapt_embeddings, split_by_video, train


def score(corpus, tracks, transform):
    reports, tprs = [], []
    for vid in tracks.video_ids:
        members = tracks.by_video(vid)
        X = np.column_stack([track_mean(t, corpus.embeddings[vid]).vector for t in members])
        Z = transform(X)
        truth = [t.label for t in members]
        reports.append(evaluate(hac(Z, len(set(truth)), "average").labels, truth))
        D = cross_distances(Z, Z)
        pairs = verification_pairs(truth)
        tprs.append(tpr_at_fpr([-D[a, b] for a, b, _ in pairs], [s for _, _, s in pairs], 0.1))
    fields = ("homogeneity", "completeness", "v_measure", "purity", "accuracy", "oci")
    mean = MetricReport(*(float(np.mean([getattr(r, k) for r in reports])) for k in fields))
    return mean, float(np.mean(tprs))


def methods(samples, tracks, args, seed):
    video_of = {t.track_id: t.video_id for t in tracks}
    tr, va = split_by_video(samples, video_of, 0.25, seed)
    d = samples[0].dim
    full = fit_mvcorr(samples)
    ranked = fit_mvcorr(samples, min_corr=args.min_corr)
    out = {
        "raw": normalize_columns,
        "mvcorr-full": lambda X: adapt_closed_form(full, X),
        f"mvcorr-r{ranked.r}": lambda X: adapt_closed_form(ranked, X),
    }
    if not args.skip_nets:
        deep = NetworkConfig((d, 2 * d, d), "sigmoid", 0.0, weight_sharing="independent")
        res = train(tr, va, deep, TrainConfig(batch_size=64, learning_rate=0.1, max_epochs=args.epochs, seed=seed),
                    "mvcorr")
        out["deep-mvcorr"] = lambda X, p=res.params[0]: adapt_embeddings(p, deep, X)
        trip = NetworkConfig((d, 2 * d, d), "relu", 0.0)
        res = train(tr, va, trip, TrainConfig(batch_size=64, learning_rate=0.01, max_epochs=args.epochs, seed=seed),
                    "imp_triplet")
        out["imp-triplet"] = lambda X, p=res.params[0]: adapt_embeddings(p, trip, X)
    return out


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--identities", type=int, default=10)
    ap.add_argument("--tracks", type=int, default=20)
    ap.add_argument("--videos", type=int, default=4)
    ap.add_argument("--dim", type=int, default=64)
    ap.add_argument("--min-corr", type=float, default=0.9)
    ap.add_argument("--epochs", type=int, default=100)
    ap.add_argument("--skip-nets", action="store_true", help="closed-form methods only")
    args = ap.parse_args()

    table: dict = {}
    tprs: dict = {}
    t0 = time.perf_counter()
    for seed in args.seeds:
        spec = SyntheticSpec(n_identities=args.identities, tracks_per_identity=args.tracks,
                             n_videos=args.videos, dim=args.dim, seed=seed)
        corpus, tracks, samples = prepare(spec)
        for name, fn in methods(samples, tracks, args, seed).items():
            key = name if not name.startswith("mvcorr-r") else "mvcorr-ranked"
            rep, tpr = score(corpus, tracks, fn)
            table.setdefault(key, {})[f"seed{seed}"] = rep
            tprs.setdefault(key, []).append(tpr)
    print(format_vmeasure_table(table))
    print()
    for name, vals in tprs.items():
        print(f"{name:<14} TPR@0.1FPR {100 * np.mean(vals):.1f}")
    print(f"\n{time.perf_counter() - t0:.1f}s")


if __name__ == "__main__":
    main()
