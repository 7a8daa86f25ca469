"""Command-line pipeline: synth, harvest, mine, fit-mvcorr, train, adapt,
cluster, eval, report.

Exit codes: 0 success, 2 bad parameters, 3 missing input, 4 malformed
file, 5 training failure.
"""

from __future__ import annotations

import argparse
import contextlib
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from faceadapt import formats
from faceadapt.cluster import affinity_propagation, hac, similarity_matrix
from faceadapt.core import (
    DEFAULT_FPS,
    METRICS,
    EmbeddingMatrix,
    FaceAdaptError,
    ValidationError,
    cross_distances,
    normalize_columns,
    track_mean,
)
from faceadapt.harvest import build_constraints, format_stats, harvest, min_frames_for
from faceadapt.metrics import evaluate, format_vmeasure_table, tpr_at_fpr, verification_pairs
from faceadapt.mining import hard_distances, mine_corpus
from faceadapt.mvcorr import adapt_closed_form, fit_mvcorr
from faceadapt.nn import NetworkConfig, architecture
from faceadapt.synth import SyntheticSpec, generate, write_corpus
from faceadapt.train import (
    TrainConfig,
    TrainingDiverged,
    adapt_embeddings,
    load_checkpoint,
    save_checkpoint,
    split_by_video,
    train,
    write_history,
)

log = logging.getLogger("faceadapt")

EXIT_OK, EXIT_PARAM, EXIT_MISSING, EXIT_FORMAT, EXIT_RUNTIME = 0, 2, 3, 4, 5
HIST_BIN = 0.02
DEFAULT_ARCH = {"imp_triplet": "C2", "mvcorr": "C1"}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise SystemExit(EXIT_PARAM) from ValidationError(message)


def _dump_json(path, obj) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _load_corpus(tracks_path, emb_dir):
    tracks = formats.read_tracks(tracks_path)
    embeddings = formats.load_video_embeddings(emb_dir, tracks.video_ids)
    tracks.validate_against(embeddings)
    return tracks, embeddings


def _features_sidecar(path) -> Path:
    return Path(str(path) + ".json")


# -- subcommands ----------------------------------------------------------------

def cmd_synth(args) -> dict:
    spec = SyntheticSpec(
        n_identities=args.n_identities,
        tracks_per_identity=args.tracks_per_identity,
        frames_min=args.frames_min,
        frames_max=args.frames_max,
        dim=args.dim,
        n_videos=args.n_videos,
        noise=args.noise,
        distortion=args.distortion,
        shift_prob=args.shift_prob,
        shift_scale=args.shift_scale,
        nuisance_rank=args.nuisance_rank,
        cooccur_density=args.cooccur_density,
        seed=args.seed,
    )
    return write_corpus(generate(spec), args.out)


def cmd_harvest(args) -> dict:
    tracks = formats.read_tracks(args.tracks)
    min_frames = args.min_frames or min_frames_for(args.min_seconds, args.fps)
    kept, _, stats = harvest(tracks, min_frames, args.min_overlap)
    formats.write_tracks(args.out, kept)
    _dump_json(args.stats or str(args.out) + ".stats.json", stats)
    if not args.json:
        print(format_stats(stats))
    return stats


def cmd_mine(args) -> dict:
    tracks, embeddings = _load_corpus(args.tracks, args.embeddings)
    graph = build_constraints(tracks, args.min_overlap)
    samples, report = mine_corpus(tracks, embeddings, graph, args.P, args.metric, args.anchor_mode,
                                  threads=args.threads)
    formats.write_samples(args.out, samples, report)
    if not args.json:
        print(f"mined {report['n_samples']} samples from {report['n_tracks']} tracks "
              f"({report['n_skipped']} skipped, {report['unused_frames']} frames unused)")
    return report


def cmd_fit(args) -> dict:
    samples = formats.load_samples(args.samples)
    if args.r is not None:
        model = fit_mvcorr(samples, args.r, args.epsilon)
    else:
        model = fit_mvcorr(samples, None, args.epsilon, min_corr=args.min_corr)
    formats.write_subspace(args.out, model)
    out = {"d": model.dim, "r": model.r, "M": model.M, "epsilon": model.epsilon,
           "top_eigenvalues": [float(x) for x in model.eigenvalues[:5]]}
    if not args.json:
        print(f"fitted {model.dim}x{model.r} subspace over {model.M} views, eps={model.epsilon:.3g}; "
              f"top correlations {np.round(model.eigenvalues[:5] / (model.M - 1), 4).tolist()}")
    return out


def _network_from_args(args, input_dim: int) -> NetworkConfig:
    kw = dict(activation=args.activation, dropout=args.dropout, batch_norm=args.batch_norm,
              weight_sharing="independent" if args.objective == "mvcorr" else "shared")
    if args.hidden:
        widths = tuple(int(x) for x in args.hidden.split(","))
        return NetworkConfig((input_dim, *widths), **kw)
    return architecture(args.arch or DEFAULT_ARCH[args.objective], input_dim, **kw)


def cmd_train(args) -> dict:
    samples = formats.load_samples(args.samples)
    tracks = formats.read_tracks(args.tracks)
    video_of = {t.track_id: t.video_id for t in tracks}
    missing = [s.track_id for s in samples if s.track_id not in video_of]
    if missing:
        raise ValidationError(f"{len(missing)} samples have no track metadata (e.g. {missing[0]!r})")
    tr, va = split_by_video(samples, video_of, args.val_fraction, args.seed)
    net = _network_from_args(args, samples[0].dim)
    tc = TrainConfig(batch_size=args.batch_size, learning_rate=args.lr, momentum=args.momentum,
                     decay=args.decay, decay_mode=args.decay_mode, early_stop_delta=args.delta,
                     patience=args.patience, max_epochs=args.max_epochs, seed=args.seed)
    result = train(tr, va, net, tc, args.objective)
    save_checkpoint(args.out, result, tc)
    write_history(args.history or str(args.out) + ".history.csv", result.history)
    out = {
        "objective": args.objective,
        "layer_sizes": list(net.layer_sizes),
        "n_train": len(tr),
        "n_val": len(va),
        "epochs": len(result.history),
        "best_epoch": result.best_epoch,
        "init_val_loss": result.init_val_loss,
        "best_val_loss": min([result.init_val_loss] + [h[2] for h in result.history]),
        "stopped_early": result.stopped_early,
    }
    if not args.json:
        print(f"trained {args.objective} {net.layer_sizes} for {out['epochs']} epochs; "
              f"val loss {out['init_val_loss']:.4f} -> {out['best_val_loss']:.4f} (best epoch {out['best_epoch']})")
    return out


def load_adapter(path):
    """Return a callable mapping d x n matrices to adapted unit columns."""
    if path is None:
        return None, "none"
    magic = formats.sniff(path)
    if magic == formats.SUBSPACE_MAGIC:
        model = formats.load_subspace(path)
        return (lambda X: adapt_closed_form(model, X)), "mvcorr-closed-form"
    if magic == formats.CHECKPOINT_MAGIC:
        net, params, header = load_checkpoint(path)
        return (lambda X: adapt_embeddings(params[0], net, X)), f"nn-{header.get('objective')}"
    raise formats.MagicMismatch(f"{path}: neither a subspace model nor a checkpoint")


def cmd_adapt(args) -> dict:
    tracks, embeddings = _load_corpus(args.tracks, args.embeddings)
    X = np.column_stack([track_mean(t, embeddings[t.video_id]).vector for t in tracks])
    adapter, kind = load_adapter(args.model)
    Z = normalize_columns(X) if adapter is None else adapter(X)
    formats.write_embeddings(args.out, EmbeddingMatrix(Z))
    _dump_json(_features_sidecar(args.out), {"track_ids": [t.track_id for t in tracks], "adapter": kind})
    if not args.json:
        print(f"wrote {Z.shape[1]} {Z.shape[0]}-d track features ({kind})")
    return {"n_tracks": Z.shape[1], "dim": Z.shape[0], "adapter": kind}


def _load_features(tracks, path) -> np.ndarray:
    F = formats.load_embeddings(path).data.astype(np.float64)
    side = _features_sidecar(path)
    if side.is_file():
        ids = json.loads(side.read_text())["track_ids"]
        if ids != [t.track_id for t in tracks]:
            raise ValidationError("feature columns do not match the track file order")
    if F.shape[1] != len(tracks):
        raise ValidationError(f"{F.shape[1]} feature columns for {len(tracks)} tracks")
    return F


def cmd_cluster(args) -> dict:
    tracks = formats.read_tracks(args.tracks)
    F = _load_features(tracks, args.features)
    col = {t.track_id: i for i, t in enumerate(tracks)}
    per_video = {}
    for vid in tracks.video_ids:
        members = tracks.by_video(vid)
        X = F[:, [col[t.track_id] for t in members]]
        ids = [t.track_id for t in members]
        if args.method == "hac":
            if args.n_clusters == "auto":
                labels = {t.label for t in members}
                if None in labels:
                    raise ValidationError("--n-clusters auto needs labelled tracks")
                k = len(labels)
            else:
                k = int(args.n_clusters)
            res = hac(X, min(k, X.shape[1]), args.linkage, args.metric)
        else:
            S = similarity_matrix(X, args.metric)
            pref = args.preference
            if pref is None and args.preference_quantile is not None:
                off = S[~np.eye(S.shape[0], dtype=bool)]
                pref = float(np.quantile(off, args.preference_quantile)) if off.size else 0.0
            res = affinity_propagation(S, pref, args.damping, args.max_iter, args.convergence_iter, args.seed)
        res = res.with_ids(ids)
        per_video[vid] = {
            "method": res.method,
            "n_clusters": res.n_clusters,
            "converged": res.converged,
            "exemplars": None if res.exemplars is None else [ids[e] for e in res.exemplars],
            "assignments": [[tid, int(c)] for tid, c in zip(ids, res.labels)],
        }
    out = {"method": args.method, "videos": per_video}
    _dump_json(args.out, out)
    if not args.json:
        for vid, r in per_video.items():
            print(f"{vid}: {r['n_clusters']} clusters ({r['method']}{'' if r['converged'] else ', unconverged'})")
    return {"method": args.method, "n_clusters": {v: r["n_clusters"] for v, r in per_video.items()}}


def cmd_eval(args) -> dict:
    tracks = formats.read_tracks(args.tracks)
    clusters = json.loads(Path(args.clusters).read_text())
    reports = {}
    for vid, r in clusters["videos"].items():
        members = {t.track_id: t for t in tracks.by_video(vid)}
        pairs = [(tid, c) for tid, c in r["assignments"] if tid in members]
        truth = [members[tid].label for tid, _ in pairs]
        if any(l is None for l in truth):
            raise ValidationError(f"video {vid!r}: evaluation needs labelled tracks")
        reports[vid] = evaluate([c for _, c in pairs], truth)
    out = {
        "name": args.name,
        "videos": {v: rep.to_dict() for v, rep in reports.items()},
        "mean": {k: float(np.mean([getattr(rep, k) for rep in reports.values()]))
                 for k in ("homogeneity", "completeness", "v_measure", "purity", "accuracy", "oci")},
    }
    if args.features:
        F = _load_features(tracks, args.features)
        col = {t.track_id: i for i, t in enumerate(tracks)}
        tprs = {}
        for vid in reports:
            members = [t for t in tracks.by_video(vid) if t.label is not None]
            X = F[:, [col[t.track_id] for t in members]]
            pairs = verification_pairs([t.label for t in members])
            D = cross_distances(X, X, args.metric)
            scores = [-D[a, b] for a, b, _ in pairs]
            tprs[vid] = tpr_at_fpr(scores, [s for _, _, s in pairs], args.fpr)
        out["tpr_at_fpr"] = {"fpr": args.fpr, "videos": tprs, "mean": float(np.mean(list(tprs.values())))}
    if args.out:
        _dump_json(args.out, out)
    if not args.json:
        print(format_vmeasure_table({args.name: reports}))
        if "tpr_at_fpr" in out:
            print(f"TPR @ {args.fpr} FPR: {out['tpr_at_fpr']['mean']:.3f}")
    return out


def histogram_rows(before, after=None, width: float = HIST_BIN):
    edges = np.round(np.arange(0.0, 2.0 + width / 2, width), 10)
    cols = {"pos_before": before[0], "neg_before": before[1]}
    if after is not None:
        cols.update(pos_after=after[0], neg_after=after[1])
    counts = {k: np.histogram(np.clip(v, 0.0, 2.0), bins=edges)[0] for k, v in cols.items()}
    return edges, counts


def cmd_report(args) -> dict:
    samples = formats.load_samples(args.samples)
    before = hard_distances(samples, args.metric)
    adapter, kind = load_adapter(args.model)
    after = hard_distances(samples, args.metric, adapter) if adapter is not None else None
    edges, counts = histogram_rows(before, after)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "distance_histogram.csv", "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["bin_lo", "bin_hi", *counts])
        for b in range(len(edges) - 1):
            w.writerow([f"{edges[b]:.2f}", f"{edges[b + 1]:.2f}", *(int(c[b]) for c in counts.values())])
    summary = {"n_samples": len(samples), "adapter": kind, "bin_width": HIST_BIN,
               "mean_pos_before": float(before[0].mean()), "mean_neg_before": float(before[1].mean())}
    if after is not None:
        summary.update(mean_pos_after=float(after[0].mean()), mean_neg_after=float(after[1].mean()))
    _dump_json(out_dir / "distance_summary.json", summary)
    if not args.json:
        line = f"hard-positive mean distance {summary['mean_pos_before']:.3f}"
        if after is not None:
            line += f" -> {summary['mean_pos_after']:.3f}"
        line += f"; hard-negative {summary['mean_neg_before']:.3f}"
        if after is not None:
            line += f" -> {summary['mean_neg_after']:.3f}"
        print(line)
    return summary


# -- parser -------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="faceadapt", description=__doc__.splitlines()[0])
    p.add_argument("--config", help="JSON file of option defaults (top level or per-command sections)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=int, default=1, help="1 = deterministic reference path")
    p.add_argument("--json", action="store_true", help="print a JSON summary on stdout")
    p.add_argument("-v", "--verbose", action="store_true")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS)
    common.add_argument("--threads", type=int, default=argparse.SUPPRESS)
    common.add_argument("--json", action="store_true", default=argparse.SUPPRESS)
    common.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    _add = sub.add_parser

    def add_parser(name, **kw):
        return _add(name, parents=[common], **kw)

    sub.add_parser = add_parser

    s = sub.add_parser("synth", help="generate a synthetic corpus")
    s.add_argument("--out", required=True)
    for name, typ, default in [
        ("n-identities", int, 5), ("tracks-per-identity", int, 10), ("frames-min", int, 24),
        ("frames-max", int, 96), ("dim", int, 64), ("n-videos", int, 1), ("noise", float, 0.05),
        ("distortion", float, 0.1), ("shift-prob", float, 0.7), ("shift-scale", float, 0.5),
        ("nuisance-rank", int, 6), ("cooccur-density", float, 0.3),
    ]:
        s.add_argument(f"--{name}", type=typ, default=default)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("harvest", help="filter tracks by length and co-occurrence")
    s.add_argument("--tracks", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--stats")
    s.add_argument("--min-seconds", type=float, default=1.0)
    s.add_argument("--fps", type=int, default=DEFAULT_FPS)
    s.add_argument("--min-frames", type=int, default=None, help="overrides --min-seconds")
    s.add_argument("--min-overlap", type=int, default=1)
    s.set_defaults(func=cmd_harvest)

    s = sub.add_parser("mine", help="mine hard-positive tracklets and hard negatives")
    s.add_argument("--tracks", required=True)
    s.add_argument("--embeddings", required=True, help="directory of <video_id>.tmeb files")
    s.add_argument("--out", required=True)
    s.add_argument("--P", type=int, default=3, help="views per track (anchor + positives)")
    s.add_argument("--metric", choices=sorted(METRICS), default="norm_euclidean")
    s.add_argument("--anchor-mode", choices=("tracklet", "track"), default="tracklet")
    s.add_argument("--min-overlap", type=int, default=1)
    s.set_defaults(func=cmd_mine)

    s = sub.add_parser("fit-mvcorr", help="closed-form multiview correlation subspace")
    s.add_argument("--samples", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--r", type=int, default=None, help="fixed subspace dimension; overrides --min-corr")
    s.add_argument("--min-corr", type=float, default=0.9,
                   help="keep components whose multiview correlation reaches this (default 0.9)")
    s.add_argument("--epsilon", type=float, default=None, help="ridge (default 1e-4 tr(R_W)/d)")
    s.set_defaults(func=cmd_fit)

    s = sub.add_parser("train", help="train an adaptation network")
    s.add_argument("--samples", required=True)
    s.add_argument("--tracks", required=True, help="track metadata, for the by-video split")
    s.add_argument("--out", required=True)
    s.add_argument("--history")
    s.add_argument("--objective", choices=("mvcorr", "imp_triplet"), default="mvcorr")
    s.add_argument("--arch", choices=("C1", "C2", "C3"), default=None)
    s.add_argument("--hidden", help="comma-separated layer widths, overrides --arch")
    s.add_argument("--activation", choices=("relu", "sigmoid"), default="relu")
    s.add_argument("--dropout", type=float, default=0.2)
    s.add_argument("--batch-norm", action="store_true")
    s.add_argument("--batch-size", type=int, default=1024)
    s.add_argument("--lr", type=float, default=None)
    s.add_argument("--momentum", type=float, default=0.9)
    s.add_argument("--decay", type=float, default=1e-6)
    s.add_argument("--decay-mode", choices=("weight", "time"), default="weight")
    s.add_argument("--delta", type=float, default=1e-3)
    s.add_argument("--patience", type=int, default=5)
    s.add_argument("--max-epochs", type=int, default=200)
    s.add_argument("--val-fraction", type=float, default=0.25)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("adapt", help="compute (adapted) track features")
    s.add_argument("--tracks", required=True)
    s.add_argument("--embeddings", required=True)
    s.add_argument("--model", default=None, help="subspace model or checkpoint; omit for raw means")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_adapt)

    s = sub.add_parser("cluster", help="cluster track features per video")
    s.add_argument("--tracks", required=True)
    s.add_argument("--features", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--method", choices=("hac", "ap"), default="hac")
    s.add_argument("--n-clusters", default="auto", help="int, or auto = number of labelled identities")
    s.add_argument("--linkage", choices=("average", "single", "complete", "ward"), default="average")
    s.add_argument("--metric", choices=sorted(METRICS), default="norm_euclidean")
    s.add_argument("--preference", type=float, default=None)
    s.add_argument("--preference-quantile", type=float, default=None,
                   help="set the AP preference to this quantile of similarities")
    s.add_argument("--damping", type=float, default=0.9)
    s.add_argument("--max-iter", type=int, default=1000)
    s.add_argument("--convergence-iter", type=int, default=50)
    s.set_defaults(func=cmd_cluster)

    s = sub.add_parser("eval", help="score clusters against track labels")
    s.add_argument("--tracks", required=True)
    s.add_argument("--clusters", required=True)
    s.add_argument("--features", help="also report verification TPR at fixed FPR")
    s.add_argument("--metric", choices=sorted(METRICS), default="norm_euclidean")
    s.add_argument("--fpr", type=float, default=0.1)
    s.add_argument("--name", default="method")
    s.add_argument("--out")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("report", help="hard-example distance histograms before/after adaptation")
    s.add_argument("--samples", required=True)
    s.add_argument("--model", default=None)
    s.add_argument("--metric", choices=sorted(METRICS), default="norm_euclidean")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_report)
    return p


GLOBAL_KEYS = {"seed", "threads", "json", "verbose"}


def _apply_config(parser: argparse.ArgumentParser, argv) -> None:
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    if not known.config:
        return
    path = Path(known.config)
    if not path.is_file():
        raise FileNotFoundError(f"no such config file: {path}")
    try:
        cfg = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise formats.FormatError(f"{path}: {e}") from None
    subs = next(a for a in parser._actions if isinstance(a, argparse._SubParsersAction)).choices
    top = {k.replace("-", "_"): v for k, v in cfg.items() if not isinstance(v, dict)}
    parser.set_defaults(**{k: v for k, v in top.items() if k in GLOBAL_KEYS})
    for name, sp in subs.items():
        section = {k.replace("-", "_"): v for k, v in cfg.get(name, {}).items()}
        dests = {a.dest for a in sp._actions} - GLOBAL_KEYS
        unknown = set(section) - dests
        if unknown:
            raise ValidationError(f"config section {name!r}: unknown keys {sorted(unknown)}")
        sp.set_defaults(**{k: v for k, v in top.items() if k in dests}, **section)


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    try:
        _apply_config(parser, argv)
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    except FileNotFoundError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_MISSING
    except formats.FormatError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_FORMAT
    except ValidationError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_PARAM
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.threads < 1:
        print("error: --threads must be >= 1", file=sys.stderr)
        return EXIT_PARAM
    try:
        with _thread_limit(args.threads):
            summary = args.func(args)
    except FileNotFoundError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_MISSING
    except formats.FormatError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_FORMAT
    except TrainingDiverged as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    except ValidationError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_PARAM
    except FaceAdaptError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    if args.json:
        print(json.dumps(summary, sort_keys=True, default=_json_default))
    return EXIT_OK


def _json_default(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(type(o))


def _thread_limit(n: int):
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:  # pragma: no cover
        return contextlib.nullcontext()
    return threadpool_limits(limits=n)


if __name__ == "__main__":
    sys.exit(main())
