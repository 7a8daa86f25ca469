import hypothesis.strategies as st
import numpy as np
import pytest
from hypothesis import given

from faceadapt.core import ValidationError
from faceadapt.nn import (
    BN_EPS,
    NetworkConfig,
    NonFiniteActivation,
    architecture,
    backward,
    forward,
    imp_triplet_loss,
    init_params,
    mvcorr_batch_loss,
)
from oracles import finite_difference, relative_error


def straight_line_forward(params, sizes, activation, batch_norm, X, masks=None, train=False):
    """Independent forward pass written out per column and per unit."""
    out = np.zeros((sizes[-1], X.shape[1]))
    L = len(sizes) - 1
    # batch statistics need the whole batch, so compute layer by layer
    H = X.copy()
    for i in range(L):
        W, b = params[f"W{i}"], params[f"b{i}"]
        Z = np.array([[sum(W[o, j] * H[j, c] for j in range(H.shape[0])) + b[o]
                       for c in range(H.shape[1])] for o in range(W.shape[0])])
        if i == L - 1:
            out = Z
            break
        A = np.maximum(Z, 0) if activation == "relu" else 1 / (1 + np.exp(-Z))
        if batch_norm:
            if train:
                mu = A.mean(axis=1)
                var = ((A - mu[:, None]) ** 2).mean(axis=1)
            else:
                mu, var = params[f"mean{i}"], params[f"var{i}"]
            A = params[f"gamma{i}"][:, None] * (A - mu[:, None]) / np.sqrt(var[:, None] + BN_EPS) + params[f"beta{i}"][:, None]
        if masks is not None:
            A = A * masks[i]
        H = A
    return out


# -- configuration ----------------------------------------------------------------

def test_architectures():
    assert architecture("C1", 512).layer_sizes == (512, 512, 256)
    assert architecture("C2", 64).layer_sizes == (64, 1024, 512)
    assert architecture("C3", 64).layer_sizes == (64, 1024, 512, 256)
    with pytest.raises(ValidationError):
        architecture("C9", 64)


@pytest.mark.parametrize("kw", [dict(layer_sizes=(4,)), dict(layer_sizes=(4, 0)),
                                dict(layer_sizes=(4, 2), activation="tanh"),
                                dict(layer_sizes=(4, 2), dropout=1.0)])
def test_config_validation(kw):
    with pytest.raises(ValidationError):
        NetworkConfig(**kw)


def test_config_dict_round_trip():
    c = NetworkConfig((8, 4, 2), "sigmoid", 0.1, True, "independent")
    assert NetworkConfig.from_dict(c.to_dict()) == c


# -- forward -------------------------------------------------------------------------

def test_identity_linear_layer_is_identity(rng):
    c = NetworkConfig((5, 5), dropout=0.0)
    p = init_params(c, rng, init="identity")
    X = rng.standard_normal((5, 7))
    out, _ = forward(p, c, X)
    np.testing.assert_array_equal(out, X)


def test_zero_dropout_train_equals_infer(rng):
    c = NetworkConfig((5, 6, 3), dropout=0.0)
    p = init_params(c, rng)
    X = rng.standard_normal((5, 7))
    np.testing.assert_array_equal(forward(p, c, X, "train", rng)[0], forward(p, c, X)[0])


@pytest.mark.parametrize("activation", ["relu", "sigmoid"])
@pytest.mark.parametrize("batch_norm", [False, True])
def test_forward_matches_straight_line_oracle(activation, batch_norm):
    r = np.random.default_rng(0)
    c = NetworkConfig((4, 6, 5, 3), activation, 0.0, batch_norm)
    p = init_params(c, r)
    if batch_norm:
        for i in range(2):
            p[f"gamma{i}"] = r.uniform(0.5, 1.5, 6 if i == 0 else 5)
            p[f"beta{i}"] = r.standard_normal(6 if i == 0 else 5)
            p[f"mean{i}"] = r.standard_normal(6 if i == 0 else 5)
            p[f"var{i}"] = r.uniform(0.5, 2, 6 if i == 0 else 5)
    X = r.standard_normal((4, 8))
    ref = straight_line_forward(p, c.layer_sizes, activation, batch_norm, X)
    np.testing.assert_allclose(forward(p, c, X)[0], ref, atol=1e-10)
    ref_t = straight_line_forward(p, c.layer_sizes, activation, batch_norm, X, train=True)
    np.testing.assert_allclose(forward(p, c, X, "train")[0], ref_t, atol=1e-10)


def test_dropout_masks_and_scaling(rng):
    c = NetworkConfig((3, 50, 2), dropout=0.5)
    p = init_params(c, rng)
    X = rng.standard_normal((3, 4))
    _, cache = forward(p, c, X, "train", np.random.default_rng(1))
    m = cache["layers"][0]["mask"]
    assert set(np.unique(m)) <= {0.0, 2.0}
    a, _ = forward(p, c, X, "train", np.random.default_rng(1))
    b, _ = forward(p, c, X, "train", np.random.default_rng(1))
    np.testing.assert_array_equal(a, b)
    with pytest.raises(ValidationError):
        forward(p, c, X, "train")


def test_forward_errors(rng):
    c = NetworkConfig((3, 2), dropout=0.0)
    p = init_params(c, rng)
    with pytest.raises(ValidationError):
        forward(p, c, np.ones((4, 2)))
    p["W0"][0, 0] = np.inf
    with pytest.raises(NonFiniteActivation) as e:
        forward(p, c, np.ones((3, 2)))
    assert e.value.layer == 0


# -- gradients -------------------------------------------------------------------------

LAYER_CASES = {
    "dense": dict(layer_sizes=(4, 3), activation="relu", dropout=0.0, batch_norm=False),
    "relu": dict(layer_sizes=(4, 6, 3), activation="relu", dropout=0.0, batch_norm=False),
    "sigmoid": dict(layer_sizes=(4, 6, 3), activation="sigmoid", dropout=0.0, batch_norm=False),
    "batchnorm": dict(layer_sizes=(4, 6, 3), activation="sigmoid", dropout=0.0, batch_norm=True),
    "dropout": dict(layer_sizes=(4, 6, 3), activation="sigmoid", dropout=0.3, batch_norm=False),
}


def layer_gradient_error(case, seed, mode="train"):
    r = np.random.default_rng(seed)
    c = NetworkConfig(**LAYER_CASES[case])
    p = init_params(c, r)
    if c.batch_norm:
        p["gamma0"] = r.uniform(0.5, 1.5, 6)
        p["beta0"] = r.standard_normal(6)
    X = r.standard_normal((4, 5))
    R = r.standard_normal((3, 5))
    masks = None
    if c.dropout > 0:
        masks = {0: (r.random((6, 5)) < 0.7) / 0.7}
    _, cache = forward(p, c, X, mode, masks=masks)
    grads, dX = backward(p, c, cache, R)

    def loss():
        return float(np.sum(forward(p, c, X, mode, masks=masks)[0] * R))

    errs = [relative_error(grads[k], finite_difference(loss, p[k])) for k in grads]
    errs.append(relative_error(dX, finite_difference(loss, X)))
    return max(errs)


@pytest.mark.parametrize("case", sorted(LAYER_CASES))
def test_layer_gradients(case):
    for seed in range(10):
        assert layer_gradient_error(case, seed) < 1e-4


def test_batchnorm_infer_mode_gradient():
    assert layer_gradient_error("batchnorm", 3, mode="infer") < 1e-4


def test_imp_triplet_examples():
    a = np.array([[1.0], [0.0]])
    far = np.array([[-10.0], [0.0]])
    loss, grads = imp_triplet_loss(a, a, far, lam=0.0)
    assert loss == 0
    assert all(np.all(g == 0) for g in grads)
    loss, _ = imp_triplet_loss(a, a, a, margin=0.5, margin2=0.25, lam=0.0)
    assert loss == pytest.approx(0.75)
    with pytest.raises(ValidationError):
        imp_triplet_loss(a, a, np.ones((3, 1)))
    with pytest.raises(ValidationError):
        imp_triplet_loss(a, a, np.full((2, 1), np.nan))


def imp_triplet_error(seed):
    r = np.random.default_rng(seed)
    a, p, n = (0.5 * r.standard_normal((4, 6)) for _ in range(3))
    _, grads = imp_triplet_loss(a, p, n, 0.5, 0.25, 0.05)
    f = lambda: imp_triplet_loss(a, p, n, 0.5, 0.25, 0.05)[0]
    return max(relative_error(g, finite_difference(f, x)) for g, x in zip(grads, (a, p, n)))


def mvcorr_error(seed):
    r = np.random.default_rng(seed)
    M = int(r.integers(2, 5))
    shared = r.standard_normal((3, 7))
    views = [shared + r.standard_normal((3, 7)) for _ in range(M)]
    _, grads = mvcorr_batch_loss(views)
    return max(relative_error(g, finite_difference(lambda: mvcorr_batch_loss(views)[0], v))
               for g, v in zip(grads, views))


def test_loss_gradients():
    for seed in range(10):
        assert imp_triplet_error(seed) < 1e-4
        assert mvcorr_error(seed) < 1e-4


@given(st.integers(0, 2**32 - 1))
def test_imp_triplet_rotation_invariant(seed):
    r = np.random.default_rng(seed)
    a, p, n = (r.standard_normal((3, 4)) for _ in range(3))
    Q = np.linalg.qr(r.standard_normal((3, 3)))[0]
    assert imp_triplet_loss(Q @ a, Q @ p, Q @ n)[0] == pytest.approx(imp_triplet_loss(a, p, n)[0], abs=1e-12)


def test_mvcorr_loss_examples():
    r = np.random.default_rng(0)
    X = r.standard_normal((4, 10))
    loss, _ = mvcorr_batch_loss([X, X, X])
    assert loss == pytest.approx(-2, abs=1e-7)
    big = [r.standard_normal((4, 20_000)) for _ in range(2)]
    assert abs(mvcorr_batch_loss(big)[0]) < 0.05
    with pytest.raises(ValidationError, match="degenerate"):
        mvcorr_batch_loss([np.ones((2, 5)), np.ones((2, 5))])
    with pytest.raises(ValidationError):
        mvcorr_batch_loss([X])


@given(st.integers(0, 2**32 - 1))
def test_mvcorr_loss_invariances(seed):
    r = np.random.default_rng(seed)
    views = [r.standard_normal((3, 6)) for _ in range(3)]
    base = mvcorr_batch_loss(views)[0]
    assert mvcorr_batch_loss(views[::-1])[0] == pytest.approx(base, abs=1e-12)
    Q = np.linalg.qr(r.standard_normal((3, 3)))[0]
    assert mvcorr_batch_loss([Q @ v for v in views])[0] == pytest.approx(base, abs=1e-12)
    assert base >= -(len(views) - 1) - 1e-12
