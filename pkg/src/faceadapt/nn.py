"""Small fully-connected networks with hand-written backprop, plus the two
adaptation losses.

Batches are features x samples, matching the rest of the package.  Hidden
layers are Dense -> activation -> [batch norm] -> dropout; the output layer
is a plain Dense layer.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from faceadapt.core import FaceAdaptError, ValidationError

BN_EPS = 1e-5
BN_MOMENTUM = 0.9


class NonFiniteActivation(FaceAdaptError):
    def __init__(self, layer: int):
        super().__init__(f"non-finite activation at layer {layer}")
        self.layer = layer


@dataclass(frozen=True)
class NetworkConfig:
    layer_sizes: tuple[int, ...]
    activation: str = "relu"
    dropout: float = 0.2
    batch_norm: bool = False
    weight_sharing: str = "shared"

    def __post_init__(self):
        sizes = tuple(int(s) for s in self.layer_sizes)
        object.__setattr__(self, "layer_sizes", sizes)
        if len(sizes) < 2 or min(sizes) < 1:
            raise ValidationError(f"need an input and at least one layer of positive size, got {sizes}")
        if self.activation not in ACTIVATIONS:
            raise ValidationError(f"unknown activation {self.activation!r}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValidationError("dropout must lie in [0, 1)")
        if self.weight_sharing not in ("shared", "independent"):
            raise ValidationError(f"unknown weight_sharing {self.weight_sharing!r}")

    @property
    def n_layers(self) -> int:
        return len(self.layer_sizes) - 1

    @property
    def input_dim(self) -> int:
        return self.layer_sizes[0]

    @property
    def output_dim(self) -> int:
        return self.layer_sizes[-1]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["layer_sizes"] = list(self.layer_sizes)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> NetworkConfig:
        return cls(**{**d, "layer_sizes": tuple(d["layer_sizes"])})


# hidden widths of the three searched architectures (input width is the embedding size)
ARCHITECTURES = {
    "C1": (512, 256),
    "C2": (1024, 512),
    "C3": (1024, 512, 256),
}


def architecture(name: str, input_dim: int, **kw) -> NetworkConfig:
    try:
        widths = ARCHITECTURES[name]
    except KeyError:
        raise ValidationError(f"unknown architecture {name!r}; choose from {sorted(ARCHITECTURES)}") from None
    return NetworkConfig((input_dim, *widths), **kw)


def _relu(z):
    return np.maximum(z, 0.0)


def _relu_grad(z, a):
    return (z > 0).astype(z.dtype)


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def _sigmoid_grad(z, a):
    return a * (1.0 - a)


ACTIVATIONS = {"relu": (_relu, _relu_grad), "sigmoid": (_sigmoid, _sigmoid_grad)}


def init_params(config: NetworkConfig, rng: np.random.Generator, init: str = "uniform") -> dict:
    """Fresh parameters; ``init="identity"`` gives rectangular-identity weights."""
    params = {}
    sizes = config.layer_sizes
    for i in range(config.n_layers):
        fan_in, fan_out = sizes[i], sizes[i + 1]
        if init == "uniform":
            lim = np.sqrt(3.0 / fan_in)
            params[f"W{i}"] = rng.uniform(-lim, lim, size=(fan_out, fan_in))
        elif init == "identity":
            params[f"W{i}"] = np.eye(fan_out, fan_in)
        else:
            raise ValidationError(f"unknown init {init!r}")
        params[f"b{i}"] = np.zeros(fan_out)
        if config.batch_norm and i < config.n_layers - 1:
            params[f"gamma{i}"] = np.ones(fan_out)
            params[f"beta{i}"] = np.zeros(fan_out)
            params[f"mean{i}"] = np.zeros(fan_out)
            params[f"var{i}"] = np.ones(fan_out)
    return params


def trainable(name: str) -> bool:
    return not name.startswith(("mean", "var"))


def check_params(params: dict, config: NetworkConfig) -> None:
    sizes = config.layer_sizes
    for i in range(config.n_layers):
        W = params.get(f"W{i}")
        if W is None or W.shape != (sizes[i + 1], sizes[i]):
            raise ValidationError(f"layer {i}: weight shape does not match config")
    for k, v in params.items():
        if not np.all(np.isfinite(v)):
            raise ValidationError(f"parameter {k} is not finite")


def forward(params: dict, config: NetworkConfig, X, mode: str = "infer",
            rng: np.random.Generator | None = None, masks: dict | None = None):
    """Run the network on a features x batch matrix.

    Returns ``(output, cache)``; the cache holds what ``backward`` needs and,
    in train mode with batch norm, the batch statistics per layer.
    Dropout is drawn from ``rng`` unless explicit ``masks`` are given.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] != config.input_dim:
        raise ValidationError(f"input has shape {X.shape}, expected ({config.input_dim}, batch)")
    if mode not in ("train", "infer"):
        raise ValidationError(f"unknown mode {mode!r}")
    act, _ = ACTIVATIONS[config.activation]
    train = mode == "train"
    cache = {"X": X, "layers": [], "train": train}
    h = X
    last = config.n_layers - 1
    for i in range(config.n_layers):
        lc = {"in": h}
        with np.errstate(over="ignore", invalid="ignore"):
            # overflow is reported below as NonFiniteActivation
            z = params[f"W{i}"] @ h + params[f"b{i}"][:, None]
        lc["z"] = z
        if i < last:
            a = act(z)
            lc["a"] = a
            if config.batch_norm:
                if train:
                    mu = a.mean(axis=1)
                    var = a.var(axis=1)
                else:
                    mu, var = params[f"mean{i}"], params[f"var{i}"]
                inv = 1.0 / np.sqrt(var + BN_EPS)
                xhat = (a - mu[:, None]) * inv[:, None]
                a = params[f"gamma{i}"][:, None] * xhat + params[f"beta{i}"][:, None]
                lc.update(bn_mu=mu, bn_var=var, bn_inv=inv, bn_xhat=xhat)
            if train and config.dropout > 0:
                if masks is not None and i in masks:
                    m = masks[i]
                else:
                    if rng is None:
                        raise ValidationError("train mode with dropout needs an rng")
                    keep = 1.0 - config.dropout
                    m = (rng.random(a.shape) < keep) / keep
                lc["mask"] = m
                a = a * m
            h = a
        else:
            h = z
        if not np.all(np.isfinite(h)):
            raise NonFiniteActivation(i)
        cache["layers"].append(lc)
    return h, cache


def backward(params: dict, config: NetworkConfig, cache: dict, grad_out):
    """Gradients of a scalar loss given dLoss/dOutput; returns (grads, dLoss/dX)."""
    _, act_grad = ACTIVATIONS[config.activation]
    grads = {}
    g = np.asarray(grad_out, dtype=np.float64)
    last = config.n_layers - 1
    for i in range(last, -1, -1):
        lc = cache["layers"][i]
        if i < last:
            if "mask" in lc:
                g = g * lc["mask"]
            if config.batch_norm:
                xhat, inv = lc["bn_xhat"], lc["bn_inv"]
                grads[f"gamma{i}"] = np.sum(g * xhat, axis=1)
                grads[f"beta{i}"] = np.sum(g, axis=1)
                gx = g * params[f"gamma{i}"][:, None]
                if cache["train"]:
                    B = g.shape[1]
                    g = (inv[:, None] / B) * (
                        B * gx - gx.sum(axis=1, keepdims=True) - xhat * np.sum(gx * xhat, axis=1, keepdims=True)
                    )
                else:
                    g = gx * inv[:, None]
            g = g * act_grad(lc["z"], lc["a"])
        grads[f"W{i}"] = g @ lc["in"].T
        grads[f"b{i}"] = g.sum(axis=1)
        g = params[f"W{i}"].T @ g
    return grads, g


# -- losses ---------------------------------------------------------------------

def _check_finite(*arrays):
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise ValidationError("non-finite loss input")


def imp_triplet_loss(a, p, n, margin: float = 0.5, margin2: float = 0.25, lam: float = 0.01):
    """Improved triplet loss on column batches.

    mean[ max(0, |a-p|^2 - |a-n|^2 + m) + max(0, |a-p|^2 - |p-n|^2 + m2) ] + lam mean|a-p|^2

    The second hinge pushes the negative away from the positive as well as
    from the anchor.  Returns ``(loss, (grad_a, grad_p, grad_n))``.
    """
    a, p, n = (np.asarray(x, dtype=np.float64) for x in (a, p, n))
    if not (a.shape == p.shape == n.shape):
        raise ValidationError("anchor, positive and negative batches differ in shape")
    _check_finite(a, p, n)
    if a.ndim == 1:
        a, p, n = a[:, None], p[:, None], n[:, None]
    B = a.shape[1]
    ap, an, pn = a - p, a - n, p - n
    dap = np.sum(ap * ap, axis=0)
    dan = np.sum(an * an, axis=0)
    dpn = np.sum(pn * pn, axis=0)
    h1 = dap - dan + margin
    h2 = dap - dpn + margin2
    loss = float(np.mean(np.maximum(h1, 0.0) + np.maximum(h2, 0.0)) + lam * np.mean(dap))
    s1 = (h1 > 0).astype(np.float64)
    s2 = (h2 > 0).astype(np.float64)
    ga = (2.0 / B) * (s1 * (ap - an) + s2 * ap + lam * ap)
    gp = (2.0 / B) * (-s1 * ap - s2 * (ap + pn) - lam * ap)
    gn = (2.0 / B) * (s1 * an + s2 * pn)
    return loss, (ga, gp, gn)


def mvcorr_batch_loss(views, eps: float = 1e-8):
    """Negative trace ratio -tr(R_B) / (tr(R_W) + eps) of batch-centered views.

    Bounded below by -(M - 1), reached when all views coincide.
    Returns ``(loss, [grad per view])``.
    """
    Xs = [np.asarray(v, dtype=np.float64) for v in views]
    M = len(Xs)
    if M < 2:
        raise ValidationError("need at least 2 views")
    shape = Xs[0].shape
    if any(x.shape != shape for x in Xs):
        raise ValidationError("views differ in shape")
    if len(shape) != 2 or shape[1] < 2:
        raise ValidationError("need a batch of at least 2 samples")
    _check_finite(*Xs)
    C = [x - x.mean(axis=1, keepdims=True) for x in Xs]
    S = sum(C)
    T = float(sum(np.sum(c * c) for c in C))
    if T < 1e-12:
        raise ValidationError("degenerate batch: within-view scatter is ~0")
    SS = float(np.sum(S * S))
    num = SS - T
    den = T + eps
    loss = -num / den
    grads = []
    for c in C:
        g = -((2.0 * S - 2.0 * c) * den - num * 2.0 * c) / (den * den)
        grads.append(g - g.mean(axis=1, keepdims=True))
    return loss, grads
