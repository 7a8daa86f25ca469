import numpy as np
import pytest

from faceadapt.cluster import hac
from faceadapt.core import ValidationError, track_mean
from faceadapt.harvest import harvest
from faceadapt.metrics import evaluate
from faceadapt.mining import MultiviewSample, mine_corpus
from faceadapt.nn import NetworkConfig, forward, init_params
from faceadapt.synth import SyntheticSpec, generate
from faceadapt.train import (
    EarlyStopping,
    TrainConfig,
    TrainingDiverged,
    adapt_embeddings,
    evaluate_loss,
    load_checkpoint,
    save_checkpoint,
    split_by_video,
    train,
    write_history,
)


def planted_samples(seed, n=300, d=12, M=3, noise=0.5):
    r = np.random.default_rng(seed)
    ident = r.standard_normal((d, n))
    out = []
    for i in range(n):
        views = [ident[:, i] + noise * r.standard_normal(d) for _ in range(M)]
        out.append(MultiviewSample(i, views[0], tuple(views[1:]), r.standard_normal(d), -1))
    return out


def test_early_stopping_constructed_schedule():
    stop = EarlyStopping(1e-3, 5)
    flags = [stop.update(x) for x in [1.0, 0.9, 0.899, 0.8985, 0.898, 0.8978, 0.8977, 0.8976]]
    assert flags == [False] * 7 + [True]


def test_early_stopping_resets_on_progress():
    stop = EarlyStopping(0.1, 2)
    assert [stop.update(x) for x in [1.0, 0.95, 0.8, 0.79, 0.78]] == [False, False, False, False, True]


def test_train_config_defaults_and_validation():
    tc = TrainConfig()
    assert (tc.batch_size, tc.momentum, tc.decay, tc.early_stop_delta, tc.patience) == (1024, 0.9, 1e-6, 1e-3, 5)
    assert tc.lr_for("imp_triplet") == 0.001 and tc.lr_for("mvcorr") == 0.01
    for bad in [dict(batch_size=1), dict(patience=0), dict(momentum=1.0), dict(decay_mode="step")]:
        with pytest.raises(ValidationError):
            TrainConfig(**bad)


def test_zero_learning_rate_leaves_parameters_unchanged():
    samples = planted_samples(0, n=40)
    net = NetworkConfig((12, 8, 4), dropout=0.0)
    tc = TrainConfig(batch_size=16, learning_rate=0.0, max_epochs=4, patience=10, decay=0.0)
    init = [init_params(net, np.random.default_rng(i)) for i in range(3)]
    res = train(samples[:30], samples[30:], net, tc, "mvcorr", init)
    for p0, p1 in zip(init, res.params):
        for k in p0:
            np.testing.assert_array_equal(p0[k], p1[k])


@pytest.mark.parametrize("objective", ["mvcorr", "imp_triplet"])
def test_training_is_bit_reproducible(objective):
    samples = planted_samples(1, n=80)
    net = NetworkConfig((12, 16, 6), dropout=0.2, batch_norm=True)
    tc = TrainConfig(batch_size=32, max_epochs=5, seed=3)
    a = train(samples[:60], samples[60:], net, tc, objective)
    b = train(samples[:60], samples[60:], net, tc, objective)
    assert a.history == b.history
    for pa, pb in zip(a.params, b.params):
        for k in pa:
            assert pa[k].tobytes() == pb[k].tobytes()
    assert len(a.params) == (3 if objective == "mvcorr" else 1)


def test_mvcorr_training_lowers_validation_loss_and_returns_best():
    samples = planted_samples(2, n=400)
    net = NetworkConfig((12, 32, 6), dropout=0.0)
    tc = TrainConfig(batch_size=64, learning_rate=0.05, max_epochs=40)
    res = train(samples[:300], samples[300:], net, tc, "mvcorr")
    vals = [h[2] for h in res.history]
    assert min(vals) < res.init_val_loss
    assert evaluate_loss(res.params, net, tc, "mvcorr", samples[300:]) == pytest.approx(min(vals))
    assert res.history[res.best_epoch - 1][2] == min(vals)


def test_divergence_aborts_with_history():
    samples = planted_samples(3, n=60)
    net = NetworkConfig((12, 16, 6), dropout=0.0)
    tc = TrainConfig(batch_size=20, learning_rate=1e6, max_epochs=50)
    with pytest.raises(TrainingDiverged) as e:
        train(samples[:40], samples[40:], net, tc, "imp_triplet")
    assert isinstance(e.value.history, list)


def test_train_input_checks():
    samples = planted_samples(4, n=10)
    net = NetworkConfig((12, 4))
    with pytest.raises(ValidationError):
        train(samples[:1], samples[1:], net, TrainConfig())
    with pytest.raises(ValidationError):
        train(samples[:5], samples[5:], NetworkConfig((7, 4)), TrainConfig())
    with pytest.raises(ValidationError):
        train(samples[:5], samples[5:], net, TrainConfig(), "siamese")


def test_split_by_video_is_seeded_and_disjoint():
    samples = planted_samples(5, n=40)
    video_of = {s.track_id: f"v{s.track_id % 8}" for s in samples}
    tr, va = split_by_video(samples, video_of, 0.25, seed=1)
    tr2, va2 = split_by_video(samples, video_of, 0.25, seed=1)
    assert [s.track_id for s in va] == [s.track_id for s in va2]
    assert {video_of[s.track_id] for s in tr}.isdisjoint({video_of[s.track_id] for s in va})
    assert len({video_of[s.track_id] for s in va}) == 2
    with pytest.raises(ValidationError):
        split_by_video(samples, {s.track_id: "one" for s in samples})


def test_adapt_embeddings_identity_and_batch_consistency(rng):
    net = NetworkConfig((5, 5), dropout=0.0)
    X = rng.standard_normal((5, 9))
    ident = init_params(net, rng, init="identity")
    np.testing.assert_allclose(adapt_embeddings(ident, net, X), X / np.linalg.norm(X, axis=0), atol=1e-15)
    net2 = NetworkConfig((5, 7, 3), "sigmoid", dropout=0.5, batch_norm=True)
    p = init_params(net2, rng)
    batch = adapt_embeddings(p, net2, X)
    np.testing.assert_allclose(np.linalg.norm(batch, axis=0), 1, atol=1e-9)
    for i in range(9):
        np.testing.assert_allclose(batch[:, i], adapt_embeddings(p, net2, X[:, [i]])[:, 0], atol=1e-10)


def test_checkpoint_and_history_round_trip(tmp_path):
    samples = planted_samples(6, n=40)
    net = NetworkConfig((12, 8, 4), dropout=0.0, weight_sharing="independent")
    tc = TrainConfig(batch_size=16, max_epochs=2)
    res = train(samples[:30], samples[30:], net, tc, "mvcorr")
    save_checkpoint(tmp_path / "m.tmck", res, tc)
    net2, params, header = load_checkpoint(tmp_path / "m.tmck")
    assert net2 == net and header["objective"] == "mvcorr" and len(params) == 3
    X = np.column_stack([s.anchor for s in samples])
    a = forward(res.params[0], net, X)[0]
    b = forward(params[0], net2, X)[0]
    np.testing.assert_allclose(a, b, rtol=1e-5, atol=1e-5)
    write_history(tmp_path / "h.csv", res.history)
    lines = (tmp_path / "h.csv").read_text().splitlines()
    assert lines[0] == "epoch,train_loss,val_loss" and len(lines) == len(res.history) + 1


@pytest.mark.slow
def test_deep_mvcorr_improves_clustering_on_planted_corpus():
    corpus = generate(SyntheticSpec(n_identities=10, tracks_per_identity=20, n_videos=4, seed=0))
    kept, g, _ = harvest(corpus.tracks, 24)
    samples, _ = mine_corpus(kept, corpus.embeddings, g)
    video_of = {t.track_id: t.video_id for t in kept}
    tr, va = split_by_video(samples, video_of, 0.25, seed=0)
    # a few hundred samples need a larger step than the defaults tuned for ~1e5
    net = NetworkConfig((64, 128, 64), "sigmoid", dropout=0.0, weight_sharing="independent")
    res = train(tr, va, net, TrainConfig(batch_size=64, learning_rate=0.1, max_epochs=100), "mvcorr")
    assert min(h[2] for h in res.history) < res.init_val_loss
    base, adapted = [], []
    for vid in kept.video_ids:
        members = kept.by_video(vid)
        X = np.column_stack([track_mean(t, corpus.embeddings[vid]).vector for t in members])
        y = [t.label for t in members]
        base.append(evaluate(hac(X, 10).labels, y).v_measure)
        adapted.append(evaluate(hac(adapt_embeddings(res.params[0], net, X), 10).labels, y).v_measure)
    assert np.mean(adapted) > np.mean(base)
