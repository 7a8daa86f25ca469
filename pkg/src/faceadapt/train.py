"""SGD training of the adaptation networks with validation early stopping."""

from __future__ import annotations

import csv
from collections.abc import Sequence
from dataclasses import asdict, dataclass, field

import numpy as np

from faceadapt import formats
from faceadapt.core import FaceAdaptError, ValidationError, normalize_columns
from faceadapt.nn import (
    BN_MOMENTUM,
    NetworkConfig,
    NonFiniteActivation,
    backward,
    check_params,
    forward,
    imp_triplet_loss,
    init_params,
    mvcorr_batch_loss,
    trainable,
)

OBJECTIVES = ("imp_triplet", "mvcorr")
DEFAULT_LR = {"imp_triplet": 0.001, "mvcorr": 0.01}
FLOAT_SLACK = 1e-12


class TrainingDiverged(FaceAdaptError):
    def __init__(self, msg: str, history: list):
        super().__init__(msg)
        self.history = history


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 1024
    learning_rate: float | None = None  # None -> per-objective default
    momentum: float = 0.9
    decay: float = 1e-6
    decay_mode: str = "weight"  # "weight": L2 on weights; "time": lr / (1 + decay * step)
    early_stop_delta: float = 1e-3
    patience: int = 5
    max_epochs: int = 200
    seed: int = 0
    margin: float = 0.5
    margin2: float = 0.25
    pull_weight: float = 0.01

    def __post_init__(self):
        if self.batch_size < 2 or self.patience < 1 or self.max_epochs < 1:
            raise ValidationError("batch_size >= 2, patience >= 1 and max_epochs >= 1 required")
        if self.learning_rate is not None and self.learning_rate < 0:
            raise ValidationError("learning_rate must be >= 0")
        if not 0 <= self.momentum < 1 or self.decay < 0 or self.early_stop_delta < 0:
            raise ValidationError("momentum in [0, 1), decay >= 0, early_stop_delta >= 0 required")
        if self.decay_mode not in ("weight", "time"):
            raise ValidationError(f"unknown decay_mode {self.decay_mode!r}")

    def lr_for(self, objective: str) -> float:
        return DEFAULT_LR[objective] if self.learning_rate is None else self.learning_rate


class EarlyStopping:
    """Stop once the loss has failed to drop by ``delta`` from one epoch to the
    next for ``patience`` consecutive epochs.

    A drop of exactly ``delta`` counts as progress (up to float rounding of
    decimal losses).  ``prev`` may be seeded
    with the loss before the first epoch.
    """

    def __init__(self, delta: float = 1e-3, patience: int = 5, prev: float | None = None):
        self.delta = delta
        self.patience = patience
        self.prev = np.inf if prev is None else float(prev)
        self.wait = 0

    def update(self, loss: float) -> bool:
        if self.prev - loss >= self.delta - FLOAT_SLACK:
            self.wait = 0
        else:
            self.wait += 1
        self.prev = loss
        return self.wait >= self.patience


@dataclass
class TrainResult:
    params: list  # one dict per network; inference uses params[0]
    net: NetworkConfig
    objective: str
    history: list = field(default_factory=list)  # (epoch, train_loss, val_loss)
    init_val_loss: float = float("nan")
    best_epoch: int = 0
    stopped_early: bool = False


def _views(samples, objective: str) -> list[np.ndarray]:
    if objective == "mvcorr":
        n_views = len(samples[0].views)
        return [np.column_stack([s.views[l] for s in samples]) for l in range(n_views)]
    return [
        np.column_stack([s.anchor for s in samples]),
        np.column_stack([s.positives[0] for s in samples]),
        np.column_stack([s.hard_negative for s in samples]),
    ]


def _params_for(params: list, objective: str, view: int) -> dict:
    return params[view] if objective == "mvcorr" else params[0]


def _loss_and_grads(params, net, tc, objective, inputs, train: bool, rng):
    mode = "train" if train else "infer"
    outs, caches = [], []
    for l, X in enumerate(inputs):
        o, c = forward(_params_for(params, objective, l), net, X, mode, rng)
        outs.append(o)
        caches.append(c)
    if objective == "mvcorr":
        loss, gouts = mvcorr_batch_loss(outs)
    else:
        loss, gouts = imp_triplet_loss(*outs, margin=tc.margin, margin2=tc.margin2, lam=tc.pull_weight)
    if not train:
        return loss, None, caches
    grads = [dict() for _ in params]
    for l, (c, g) in enumerate(zip(caches, gouts)):
        idx = l if objective == "mvcorr" else 0
        gl, _ = backward(params[idx], net, c, g)
        for k, v in gl.items():
            grads[idx][k] = grads[idx].get(k, 0.0) + v
    return loss, grads, caches


def evaluate_loss(params, net: NetworkConfig, tc: TrainConfig, objective: str, samples) -> float:
    loss, _, _ = _loss_and_grads(params, net, tc, objective, _views(samples, objective), False, None)
    return float(loss)


def train(train_samples: Sequence, val_samples: Sequence, net: NetworkConfig, tc: TrainConfig,
          objective: str = "mvcorr", init_params_list: list | None = None) -> TrainResult:
    """Minibatch SGD with momentum; returns the lowest-validation-loss parameters.

    For "mvcorr" there is one independent network per view; for
    "imp_triplet" a single network is shared by anchor, positive and negative.
    """
    if objective not in OBJECTIVES:
        raise ValidationError(f"unknown objective {objective!r}")
    if len(train_samples) < 2 or len(val_samples) < 2:
        raise ValidationError("train and validation splits need >= 2 samples each")
    if train_samples[0].dim != net.input_dim:
        raise ValidationError(f"samples are {train_samples[0].dim}-D, network expects {net.input_dim}")
    n_nets = len(train_samples[0].views) if objective == "mvcorr" else 1
    init_rng = np.random.default_rng([tc.seed, 0])
    rng = np.random.default_rng([tc.seed, 1])
    if init_params_list is None:
        params = [init_params(net, init_rng) for _ in range(n_nets)]
    else:
        params = [{k: v.copy() for k, v in p.items()} for p in init_params_list]
    for p in params:
        check_params(p, net)

    inputs = _views(train_samples, objective)
    lr = tc.lr_for(objective)
    velocity = [{k: np.zeros_like(v) for k, v in p.items() if trainable(k)} for p in params]
    n = len(train_samples)
    n_batches = max(1, int(np.ceil(n / tc.batch_size)))
    if n // n_batches < 2:
        n_batches = max(1, n // 2)

    result = TrainResult(params=params, net=net, objective=objective)
    result.init_val_loss = evaluate_loss(params, net, tc, objective, val_samples)
    best_loss = result.init_val_loss
    best = [{k: v.copy() for k, v in p.items()} for p in params]
    stopper = EarlyStopping(tc.early_stop_delta, tc.patience, prev=result.init_val_loss)
    step = 0
    for epoch in range(1, tc.max_epochs + 1):
        order = rng.permutation(n)
        losses = []
        for batch in np.array_split(order, n_batches):
            try:
                loss, grads, caches = _loss_and_grads(
                    params, net, tc, objective, [X[:, batch] for X in inputs], True, rng
                )
            except (NonFiniteActivation, ValidationError) as e:
                raise TrainingDiverged(f"epoch {epoch}: {e}", result.history) from e
            if not np.isfinite(loss):
                raise TrainingDiverged(f"non-finite training loss at epoch {epoch}", result.history)
            losses.append(loss * len(batch))
            step_lr = lr / (1.0 + tc.decay * step) if tc.decay_mode == "time" else lr
            for idx, (p, g, v) in enumerate(zip(params, grads, velocity)):
                for k in v:
                    gk = g[k]
                    if tc.decay_mode == "weight" and k.startswith("W"):
                        gk = gk + tc.decay * p[k]
                    v[k] = tc.momentum * v[k] - step_lr * gk
                    p[k] = p[k] + v[k]
            if net.batch_norm:
                _update_running_stats(params, caches, objective, net)
            step += 1
        train_loss = float(np.sum(losses) / n)
        try:
            val_loss = evaluate_loss(params, net, tc, objective, val_samples)
        except (NonFiniteActivation, ValidationError) as e:
            raise TrainingDiverged(f"epoch {epoch}: {e}", result.history) from e
        if not np.isfinite(val_loss):
            raise TrainingDiverged(f"non-finite validation loss at epoch {epoch}", result.history)
        result.history.append((epoch, train_loss, val_loss))
        if val_loss < best_loss:
            best_loss = val_loss
            best = [{k: v.copy() for k, v in p.items()} for p in params]
            result.best_epoch = epoch
        if stopper.update(val_loss):
            result.stopped_early = True
            break
    result.params = best
    return result


def _update_running_stats(params, caches, objective, net):
    for l, c in enumerate(caches):
        p = _params_for(params, objective, l)
        for i, lc in enumerate(c["layers"][:-1]):
            p[f"mean{i}"] = BN_MOMENTUM * p[f"mean{i}"] + (1 - BN_MOMENTUM) * lc["bn_mu"]
            p[f"var{i}"] = BN_MOMENTUM * p[f"var{i}"] + (1 - BN_MOMENTUM) * lc["bn_var"]
        if objective != "mvcorr":
            break


def split_by_video(samples: Sequence, video_of: dict, val_fraction: float = 0.25, seed: int = 0):
    """Seeded shuffle of video ids; the last ``val_fraction`` of videos validate."""
    videos = sorted({video_of[s.track_id] for s in samples}, key=lambda v: (isinstance(v, str), v))
    if len(videos) < 2:
        raise ValidationError("need samples from at least 2 videos to split by video")
    rng = np.random.default_rng(seed)
    perm = [videos[i] for i in rng.permutation(len(videos))]
    n_val = min(len(videos) - 1, max(1, int(round(val_fraction * len(videos)))))
    val_videos = set(perm[len(perm) - n_val:])
    tr = [s for s in samples if video_of[s.track_id] not in val_videos]
    va = [s for s in samples if video_of[s.track_id] in val_videos]
    if not tr or not va:
        raise ValidationError("empty train or validation split")
    return tr, va


def adapt_embeddings(params: dict, net: NetworkConfig, X) -> np.ndarray:
    """Inference-mode forward pass, then unit-normalize every output column."""
    out, _ = forward(params, net, X, "infer")
    return normalize_columns(out)


def write_history(path, history) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["epoch", "train_loss", "val_loss"])
        for epoch, tl, vl in history:
            w.writerow([epoch, repr(float(tl)), repr(float(vl))])


def save_checkpoint(path, result: TrainResult, tc: TrainConfig | None = None) -> None:
    header = {"network": result.net.to_dict(), "objective": result.objective, "n_networks": len(result.params)}
    if tc is not None:
        header["train"] = asdict(tc)
    tensors = {}
    for m, p in enumerate(result.params):
        for k, v in p.items():
            tensors[f"net{m}.{k}"] = v
    formats.write_checkpoint(path, header, tensors)


def load_checkpoint(path) -> tuple[NetworkConfig, list, dict]:
    header, tensors = formats.load_checkpoint(path)
    try:
        net = NetworkConfig.from_dict(header["network"])
        n = int(header["n_networks"])
    except (KeyError, TypeError) as e:
        raise formats.FormatError(f"{path}: incomplete checkpoint header ({e})") from None
    params = [dict() for _ in range(n)]
    for name, v in tensors.items():
        m, k = name.split(".", 1)
        params[int(m[3:])][k] = v
    for p in params:
        check_params(p, net)
    return net, params, header
