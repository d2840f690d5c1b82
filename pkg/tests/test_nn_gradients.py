"""Finite-difference checks for every layer kind (input and parameter gradients)."""
import numpy as np
import pytest

from archsim.nn import LayerSpec, Model, ModelSpec, init_weights, make_layer
from archsim.nn.model import run_backward, run_forward, softmax_xent

STEP = 1e-3
TOL = 1e-3


def rel_err(a, b):
    a = np.asarray(a, np.float64)
    b = np.asarray(b, np.float64)
    denom = max(np.linalg.norm(b), np.linalg.norm(a), 1e-12)
    return np.linalg.norm(a - b) / denom


def numeric_grad(f, x, step=STEP):
    """Central differences of scalar f with respect to every entry of x (float64)."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"], op_flags=["readwrite"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + step
        up = f()
        x[i] = old - step
        down = f()
        x[i] = old
        g[i] = (up - down) / (2 * step)
    return g


# (kind, params, per-example input shape) generators; each yields >= 5 shapes
def _spatial(rng, c_choices=(2, 3, 4)):
    return (int(rng.integers(4, 8)), int(rng.integers(4, 8)), int(rng.choice(c_choices)))


def layer_cases():
    rng = np.random.default_rng(0)
    cases = []
    for t in range(5):
        d = int(rng.integers(2, 7))
        cases.append(("dense", {"units": int(rng.integers(2, 6))}, (d,)))
        cases.append(("dense", {"units": 3}, (int(rng.integers(2, 5)), d)))  # token-wise
        s = _spatial(rng)
        cases.append(("conv2d", {"channels": int(rng.integers(2, 5)), "kernel": int(rng.choice([1, 2, 3])),
                                 "stride": int(rng.choice([1, 2])), "padding": int(rng.choice([0, 1]))}, s))
        s = _spatial(rng, (2, 4))
        cases.append(("conv2d", {"channels": 4, "kernel": 3, "padding": 1, "groups": 2}, s))
        cases.append(("conv2d", {"channels": s[2], "kernel": 3, "padding": 1, "groups": s[2]}, s))  # depthwise
        k = int(rng.choice([2, 3]))
        cases.append(("patchify", {"channels": int(rng.integers(2, 5)), "kernel": k}, (2 * k, 3 * k, 2)))
        cases.append(("batch-norm", {}, _spatial(rng)))
        cases.append(("batch-norm", {}, (int(rng.integers(2, 6)),)))
        cases.append(("layer-norm", {}, _spatial(rng)))
        cases.append(("layer-norm", {}, (int(rng.integers(2, 6)), int(rng.integers(3, 7)))))
        for act in ("relu", "gelu", "silu"):
            cases.append((act, {}, _spatial(rng)))
        cases.append(("leaky-relu", {"negative-slope": float(rng.uniform(0.01, 0.3))}, _spatial(rng)))
        cases.append(("max-pool", {"kernel": int(rng.choice([2, 3])), "stride": int(rng.choice([1, 2]))}, _spatial(rng)))
        cases.append(("avg-pool", {"kernel": int(rng.choice([2, 3])), "stride": int(rng.choice([1, 2]))}, _spatial(rng)))
        cases.append(("global-avg-pool", {}, _spatial(rng)))
        cases.append(("global-avg-pool", {}, (int(rng.integers(2, 5)), 3)))
        cases.append(("flatten", {}, _spatial(rng)))
        cases.append(("squeeze-excite", {"reduction-ratio": int(rng.choice([1, 2]))}, _spatial(rng, (4, 6, 8))))
        cases.append(("self-attention-1h", {"hidden-dim": int(rng.integers(2, 5))}, _spatial(rng)))
        cases.append(("self-attention-1h", {}, (int(rng.integers(2, 6)), int(rng.integers(2, 5)))))
    return cases


CASES = layer_cases()


def _perturb_norm_params(layer, p, rng):
    # Non-trivial affine params; running stats away from the identity.
    for k in ("gamma", "beta", "running_mean"):
        if k in p:
            p[k] = rng.normal(size=p[k].shape).astype(np.float32)
    if "running_var" in p:
        p["running_var"] = rng.uniform(0.5, 2.0, size=p["running_var"].shape).astype(np.float32)
    for k in ("b", "b1", "b2", "bq", "bk", "bv", "bo"):
        if k in p:
            p[k] = (0.1 * rng.normal(size=p[k].shape)).astype(np.float32)
    return p


# train mode only changes batch-norm (batch statistics instead of running ones)
MODES = [(i, False) for i in range(len(CASES))] + [(i, True) for i, c in enumerate(CASES) if c[0] == "batch-norm"]


@pytest.mark.parametrize("case,train", MODES, ids=[f"{CASES[i][0]}-{i}{'-train' if t else ''}" for i, t in MODES])
def test_layer_gradients(case, train):
    kind, params, shape = CASES[case]
    rng = np.random.default_rng(1000 + case)
    layer = make_layer(kind, params)
    out_shape = layer.out_shape(shape)
    p = _perturb_norm_params(layer, layer.init(rng, shape), rng)
    x = rng.normal(size=(3,) + shape).astype(np.float32)
    while kind == "squeeze-excite" and np.abs(x.mean((1, 2)) @ p["W1"] + p["b1"]).min() < 0.02:
        x = rng.normal(size=(3,) + shape).astype(np.float32)  # keep off the ReLU kink
    if kind in ("relu", "leaky-relu"):
        x[np.abs(x) < 0.01] += 0.05
    proj = rng.normal(size=(3,) + out_shape)

    # analytic gradient at float32
    y, cache = layer.forward(p, x, train)
    assert y.shape == (3,) + out_shape
    dx, grads = layer.backward(p, cache, proj.astype(np.float32))
    assert dx.shape == x.shape

    # float64 finite-difference oracle
    x64 = x.astype(np.float64)
    p64 = {k: v.astype(np.float64) for k, v in p.items()}
    loss = lambda: float((layer.forward(p64, x64, train)[0] * proj).sum())  # noqa: E731
    assert rel_err(dx, numeric_grad(loss, x64)) < TOL
    trainable = layer.param_shapes(shape)
    assert set(grads) == set(trainable)
    for name in trainable:
        assert rel_err(grads[name], numeric_grad(loss, p64[name])) < TOL, name


def test_every_kind_covered():
    from archsim.nn import LAYER_KINDS

    covered = {c[0] for c in CASES} | {"residual-begin", "residual-end"}
    assert covered == set(LAYER_KINDS)
    for kind in covered - {"residual-begin", "residual-end"}:
        assert sum(c[0] == kind for c in CASES) >= 5


def _residual_spec(seed):
    rng = np.random.default_rng(seed)
    c = int(rng.integers(2, 5))
    L = LayerSpec
    return ModelSpec(f"res{seed}", (
        L("conv2d", {"channels": c, "kernel": 3, "padding": 1}),
        L("residual-begin"),
        L("conv2d", {"channels": c, "kernel": 3, "padding": 1}),
        L("batch-norm"),
        L("gelu"),
        L("residual-begin"),
        L("self-attention-1h", {"hidden-dim": 3}),
        L("residual-end"),
        L("residual-end"),
        L("global-avg-pool"),
        L("dense", {"units": 3}),
    ), (int(rng.integers(3, 6)), int(rng.integers(3, 6)), 2), 3)


@pytest.mark.parametrize("seed", range(5))
def test_residual_model_gradients(seed):
    spec = _residual_spec(seed)
    model = Model(spec, init_weights(spec, seed))
    rng = np.random.default_rng(seed)
    x = rng.uniform(size=(2,) + spec.input_resolution)
    labels = rng.integers(0, 3, size=2)
    params = [{k: v.astype(np.float64) for k, v in p.items()} for p in model._params]

    def loss():
        return softmax_xent(run_forward(spec, params, x)[0], labels)[0]

    logits, caches = run_forward(spec, model._params, x.astype(np.float32))
    _, d = softmax_xent(logits, labels)
    dx, grads = run_backward(spec, model._params, caches, d)
    assert rel_err(dx, numeric_grad(loss, x)) < TOL
    for i, g in enumerate(grads):
        for name, arr in g.items():
            assert rel_err(arr, numeric_grad(loss, params[i][name])) < TOL, (i, name)
