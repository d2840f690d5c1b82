"""Layer kinds with exact forward and backward passes.

All spatial tensors are channels-last: ``(N, H, W, C)``.  Token tensors are
``(N, T, C)``.  Every layer is stateless; parameters are passed in as a dict
of arrays and gradients come back as a dict with the same keys.
"""
from __future__ import annotations

import math
from typing import Any

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

Shape = tuple[int, ...]

GELU_C = math.sqrt(2.0 / math.pi)
GELU_A = 0.044715
NORM_EPS = 1e-5
BN_MOMENTUM = 0.1


class ShapeError(ValueError):
    pass


class Layer:
    kind = ""
    defaults: dict[str, Any] = {}

    def __init__(self, **params):
        unknown = set(params) - set(self.defaults)
        if unknown:
            raise ValueError(f"{self.kind}: unknown params {sorted(unknown)}")
        self.params = {**self.defaults, **params}

    def __getattr__(self, name):
        try:
            return self.__dict__["params"][name.replace("_", "-")]
        except KeyError:
            raise AttributeError(name) from None

    def out_shape(self, in_shape: Shape) -> Shape:
        return in_shape

    def param_shapes(self, in_shape: Shape) -> dict[str, Shape]:
        return {}

    def buffer_shapes(self, in_shape: Shape) -> dict[str, Shape]:
        return {}

    def init(self, rng: np.random.Generator, in_shape: Shape) -> dict[str, np.ndarray]:
        return {}

    def forward(self, p, x, train=False):
        raise NotImplementedError

    def backward(self, p, cache, dy):
        raise NotImplementedError


def _kaiming(rng, shape, fan_in):
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(np.float32)


def _need_rank(kind, in_shape, ranks):
    if len(in_shape) not in ranks:
        raise ShapeError(f"{kind} expects input rank in {ranks}, got shape {in_shape}")


# ---------------------------------------------------------------- dense


class Dense(Layer):
    kind = "dense"
    defaults = {"units": None}

    def out_shape(self, in_shape):
        if self.units is None or self.units <= 0:
            raise ShapeError("dense needs positive units")
        return in_shape[:-1] + (self.units,)

    def param_shapes(self, in_shape):
        return {"W": (in_shape[-1], self.units), "b": (self.units,)}

    def init(self, rng, in_shape):
        return {"W": _kaiming(rng, (in_shape[-1], self.units), in_shape[-1]),
                "b": np.zeros(self.units, np.float32)}

    def forward(self, p, x, train=False):
        return x @ p["W"] + p["b"], x

    def backward(self, p, x, dy):
        x2 = x.reshape(-1, x.shape[-1])
        dy2 = dy.reshape(-1, dy.shape[-1])
        return dy @ p["W"].T, {"W": x2.T @ dy2, "b": dy2.sum(0)}


# ---------------------------------------------------------------- conv


def _out_len(n, k, s, pad):
    return (n + 2 * pad - k) // s + 1


class Conv2d(Layer):
    kind = "conv2d"
    defaults = {"channels": None, "kernel": 3, "stride": 1, "padding": 0, "groups": 1}

    def out_shape(self, in_shape):
        _need_rank(self.kind, in_shape, (3,))
        h, w, c = in_shape
        k, s, pad, g = self.kernel, self.stride, self.padding, self.groups
        if self.channels is None or self.channels <= 0:
            raise ShapeError(f"{self.kind} needs positive channels")
        if c % g or self.channels % g:
            raise ShapeError(f"{self.kind}: groups={g} must divide in={c} and out={self.channels}")
        ho, wo = _out_len(h, k, s, pad), _out_len(w, k, s, pad)
        if ho <= 0 or wo <= 0:
            raise ShapeError(f"{self.kind}: kernel {k} too large for {h}x{w}")
        return (ho, wo, self.channels)

    def param_shapes(self, in_shape):
        k = self.kernel
        return {"W": (k, k, in_shape[2] // self.groups, self.channels), "b": (self.channels,)}

    def init(self, rng, in_shape):
        shapes = self.param_shapes(in_shape)
        kh, kw, cg, _ = shapes["W"]
        return {"W": _kaiming(rng, shapes["W"], kh * kw * cg),
                "b": np.zeros(self.channels, np.float32)}

    def _cols(self, x):
        k, s, pad = self.kernel, self.stride, self.padding
        if pad:
            x = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
        n, h, w, c = x.shape
        ho, wo = _out_len(h, k, s, 0), _out_len(w, k, s, 0)
        win = sliding_window_view(x, (k, k), axis=(1, 2))[:, : s * (ho - 1) + 1 : s, : s * (wo - 1) + 1 : s]
        # (n, ho, wo, c, k, k) -> (n*ho*wo, k*k, c)
        cols = np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3)).reshape(n * ho * wo, k * k, c)
        return cols, (n, h, w, c, ho, wo)

    def _is_depthwise(self, c):
        return self.groups == c == self.channels

    def _depthwise_forward(self, p, x):
        k, s, pad = self.kernel, self.stride, self.padding
        xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0))) if pad else x
        n, h, w, c = xp.shape
        ho, wo = _out_len(h, k, s, 0), _out_len(w, k, s, 0)
        W = p["W"]
        y = np.zeros((n, ho, wo, c), x.dtype)
        for i in range(k):
            for j in range(k):
                y += xp[:, i : i + s * (ho - 1) + 1 : s, j : j + s * (wo - 1) + 1 : s] * W[i, j, 0]
        return y + p["b"], ("dw", xp, (n, h, w, c, ho, wo), x.dtype)

    def _depthwise_backward(self, p, cache, dy):
        _, xp, (n, h, w, c, ho, wo), dtype = cache
        k, s, pad = self.kernel, self.stride, self.padding
        W = p["W"]
        dW = np.zeros_like(W)
        dxp = np.zeros((n, h, w, c), dtype)
        for i in range(k):
            for j in range(k):
                sl = (slice(None), slice(i, i + s * (ho - 1) + 1, s), slice(j, j + s * (wo - 1) + 1, s))
                dW[i, j, 0] = (xp[sl] * dy).sum((0, 1, 2))
                dxp[sl] += dy * W[i, j, 0]
        if pad:
            dxp = dxp[:, pad:-pad, pad:-pad]
        return dxp, {"W": dW, "b": dy.sum((0, 1, 2))}

    def forward(self, p, x, train=False):
        g = self.groups
        if self._is_depthwise(x.shape[-1]):
            return self._depthwise_forward(p, x)
        cols, dims = self._cols(x)
        n, _, _, c, ho, wo = dims
        m, kk, _ = cols.shape
        W = p["W"]
        cout = W.shape[3]
        cg, og = c // g, cout // g
        if g == 1:
            y = cols.reshape(m, kk * c) @ W.reshape(kk * c, cout)
        else:
            cg_cols = cols.reshape(m, kk, g, cg).transpose(2, 0, 1, 3).reshape(g, m, kk * cg)
            Wg = W.reshape(kk, cg, g, og).transpose(2, 0, 1, 3).reshape(g, kk * cg, og)
            y = np.matmul(cg_cols, Wg).transpose(1, 0, 2).reshape(m, cout)
            cols = cg_cols
        y = y.reshape(n, ho, wo, cout) + p["b"]
        return y, (cols, dims, x.dtype)

    def backward(self, p, cache, dy):
        if isinstance(cache[0], str):
            return self._depthwise_backward(p, cache, dy)
        cols, (n, h, w, c, ho, wo), dtype = cache
        k, s, pad, g = self.kernel, self.stride, self.padding, self.groups
        W = p["W"]
        cout = W.shape[3]
        kk = k * k
        dy2 = dy.reshape(-1, cout)
        db = dy2.sum(0)
        if g == 1:
            dW = (cols.reshape(-1, kk * c).T @ dy2).reshape(W.shape)
            dcols = (dy2 @ W.reshape(kk * c, cout).T).reshape(n, ho, wo, k, k, c)
        else:
            cg, og = c // g, cout // g
            dyg = dy2.reshape(-1, g, og).transpose(1, 0, 2)
            dWg = np.matmul(cols.transpose(0, 2, 1), dyg)  # (g, kk*cg, og)
            dW = dWg.reshape(g, kk, cg, og).transpose(1, 2, 0, 3).reshape(W.shape)
            Wg = W.reshape(kk, cg, g, og).transpose(2, 0, 1, 3).reshape(g, kk * cg, og)
            dcg = np.matmul(dyg, Wg.transpose(0, 2, 1))  # (g, m, kk*cg)
            dcols = dcg.reshape(g, -1, kk, cg).transpose(1, 2, 0, 3).reshape(n, ho, wo, k, k, c)
        dxp = np.zeros((n, h, w, c), dtype)
        for i in range(k):
            for j in range(k):
                dxp[:, i : i + s * (ho - 1) + 1 : s, j : j + s * (wo - 1) + 1 : s] += dcols[:, :, :, i, j]
        if pad:
            dxp = dxp[:, pad:-pad, pad:-pad]
        return dxp, {"W": dW, "b": db}


class Patchify(Conv2d):
    """Non-overlapping patch embedding: a conv whose stride equals its kernel."""

    kind = "patchify"
    defaults = {"channels": None, "kernel": 4}

    def __init__(self, **params):
        super().__init__(**params)
        self.params.update(stride=self.params["kernel"], padding=0, groups=1)


# ---------------------------------------------------------------- norms


class BatchNorm(Layer):
    kind = "batch-norm"
    defaults = {}

    def param_shapes(self, in_shape):
        return {"gamma": (in_shape[-1],), "beta": (in_shape[-1],)}

    def buffer_shapes(self, in_shape):
        return {"running_mean": (in_shape[-1],), "running_var": (in_shape[-1],)}

    def init(self, rng, in_shape):
        c = in_shape[-1]
        return {"gamma": np.ones(c, np.float32), "beta": np.zeros(c, np.float32),
                "running_mean": np.zeros(c, np.float32), "running_var": np.ones(c, np.float32)}

    def forward(self, p, x, train=False):
        axes = tuple(range(x.ndim - 1))
        if train:
            mu = x.mean(axes)
            var = x.var(axes)
        else:
            mu, var = p["running_mean"], p["running_var"]
        inv = 1.0 / np.sqrt(var + NORM_EPS)
        xhat = (x - mu) * inv
        return p["gamma"] * xhat + p["beta"], (xhat, inv, train, mu, var)

    def backward(self, p, cache, dy):
        xhat, inv, train, _, _ = cache
        axes = tuple(range(dy.ndim - 1))
        grads = {"gamma": (dy * xhat).sum(axes), "beta": dy.sum(axes)}
        dxhat = dy * p["gamma"]
        if not train:
            return dxhat * inv, grads
        m = dy.size // dy.shape[-1]
        dx = inv / m * (m * dxhat - dxhat.sum(axes) - xhat * (dxhat * xhat).sum(axes))
        return dx, grads


class LayerNorm(Layer):
    kind = "layer-norm"
    defaults = {}

    def param_shapes(self, in_shape):
        return {"gamma": (in_shape[-1],), "beta": (in_shape[-1],)}

    def init(self, rng, in_shape):
        c = in_shape[-1]
        return {"gamma": np.ones(c, np.float32), "beta": np.zeros(c, np.float32)}

    def forward(self, p, x, train=False):
        mu = x.mean(-1, keepdims=True)
        var = x.var(-1, keepdims=True)
        inv = 1.0 / np.sqrt(var + NORM_EPS)
        xhat = (x - mu) * inv
        return p["gamma"] * xhat + p["beta"], (xhat, inv)

    def backward(self, p, cache, dy):
        xhat, inv = cache
        axes = tuple(range(dy.ndim - 1))
        grads = {"gamma": (dy * xhat).sum(axes), "beta": dy.sum(axes)}
        dxhat = dy * p["gamma"]
        d = dy.shape[-1]
        dx = inv / d * (d * dxhat - dxhat.sum(-1, keepdims=True)
                        - xhat * (dxhat * xhat).sum(-1, keepdims=True))
        return dx, grads


# ---------------------------------------------------------------- activations


class ReLU(Layer):
    kind = "relu"

    def forward(self, p, x, train=False):
        return np.maximum(x, 0), x > 0

    def backward(self, p, mask, dy):
        return dy * mask, {}


class LeakyReLU(Layer):
    kind = "leaky-relu"
    defaults = {"negative-slope": 0.01}

    def forward(self, p, x, train=False):
        slope = np.where(x > 0, 1.0, self.negative_slope).astype(x.dtype)
        return x * slope, slope

    def backward(self, p, slope, dy):
        return dy * slope, {}


class GeLU(Layer):
    """GeLU, tanh approximation."""

    kind = "gelu"

    def forward(self, p, x, train=False):
        t = np.tanh(GELU_C * (x + GELU_A * x**3))
        return 0.5 * x * (1 + t), (x, t)

    def backward(self, p, cache, dy):
        x, t = cache
        dt = (1 - t * t) * GELU_C * (1 + 3 * GELU_A * x * x)
        return dy * (0.5 * (1 + t) + 0.5 * x * dt), {}


def _sigmoid(x):
    return 0.5 * (1 + np.tanh(0.5 * x))


class SiLU(Layer):
    kind = "silu"

    def forward(self, p, x, train=False):
        s = _sigmoid(x)
        return x * s, (x, s)

    def backward(self, p, cache, dy):
        x, s = cache
        return dy * (s * (1 + x * (1 - s))), {}


# ---------------------------------------------------------------- pooling


class _Pool(Layer):
    defaults = {"kernel": 2, "stride": None}

    @property
    def _stride(self):
        return self.params["stride"] or self.params["kernel"]

    def out_shape(self, in_shape):
        _need_rank(self.kind, in_shape, (3,))
        h, w, c = in_shape
        k, s = self.kernel, self._stride
        ho, wo = _out_len(h, k, s, 0), _out_len(w, k, s, 0)
        if ho <= 0 or wo <= 0:
            raise ShapeError(f"{self.kind}: window {k} too large for {h}x{w}")
        return (ho, wo, c)

    def _windows(self, x):
        k, s = self.kernel, self._stride
        n, h, w, c = x.shape
        ho, wo = _out_len(h, k, s, 0), _out_len(w, k, s, 0)
        win = sliding_window_view(x, (k, k), axis=(1, 2))[:, : s * (ho - 1) + 1 : s, : s * (wo - 1) + 1 : s]
        return win.reshape(n, ho, wo, c, k * k), ho, wo

    def _scatter(self, shape, dtype, per_pos, ho, wo):
        k, s = self.kernel, self._stride
        dx = np.zeros(shape, dtype)
        for i in range(k):
            for j in range(k):
                dx[:, i : i + s * (ho - 1) + 1 : s, j : j + s * (wo - 1) + 1 : s] += per_pos(i * k + j)
        return dx


class MaxPool(_Pool):
    kind = "max-pool"

    def forward(self, p, x, train=False):
        win, ho, wo = self._windows(x)
        arg = win.argmax(-1)
        y = np.take_along_axis(win, arg[..., None], -1)[..., 0]
        return y, (x.shape, x.dtype, arg, ho, wo)

    def backward(self, p, cache, dy):
        shape, dtype, arg, ho, wo = cache
        return self._scatter(shape, dtype, lambda q: dy * (arg == q), ho, wo), {}


class AvgPool(_Pool):
    kind = "avg-pool"

    def forward(self, p, x, train=False):
        win, ho, wo = self._windows(x)
        return win.mean(-1), (x.shape, x.dtype, ho, wo)

    def backward(self, p, cache, dy):
        shape, dtype, ho, wo = cache
        scaled = dy / (self.kernel**2)
        return self._scatter(shape, dtype, lambda q: scaled, ho, wo), {}


class GlobalAvgPool(Layer):
    kind = "global-avg-pool"

    def out_shape(self, in_shape):
        _need_rank(self.kind, in_shape, (2, 3))
        return (in_shape[-1],)

    def forward(self, p, x, train=False):
        axes = tuple(range(1, x.ndim - 1))
        return x.mean(axes), x.shape

    def backward(self, p, shape, dy):
        count = int(np.prod(shape[1:-1]))
        expand = dy.reshape((shape[0],) + (1,) * (len(shape) - 2) + (shape[-1],))
        return np.broadcast_to(expand / count, shape).copy(), {}


class Flatten(Layer):
    kind = "flatten"

    def out_shape(self, in_shape):
        return (int(np.prod(in_shape)),)

    def forward(self, p, x, train=False):
        return x.reshape(x.shape[0], -1), x.shape

    def backward(self, p, shape, dy):
        return dy.reshape(shape), {}


# ---------------------------------------------------------------- attention blocks


class SqueezeExcite(Layer):
    kind = "squeeze-excite"
    defaults = {"reduction-ratio": 4}

    def _hidden(self, c):
        return max(1, c // self.reduction_ratio)

    def out_shape(self, in_shape):
        _need_rank(self.kind, in_shape, (3,))
        return in_shape

    def param_shapes(self, in_shape):
        c = in_shape[-1]
        r = self._hidden(c)
        return {"W1": (c, r), "b1": (r,), "W2": (r, c), "b2": (c,)}

    def init(self, rng, in_shape):
        c = in_shape[-1]
        r = self._hidden(c)
        return {"W1": _kaiming(rng, (c, r), c), "b1": np.zeros(r, np.float32),
                "W2": _kaiming(rng, (r, c), r), "b2": np.zeros(c, np.float32)}

    def forward(self, p, x, train=False):
        s = x.mean((1, 2))
        z1 = s @ p["W1"] + p["b1"]
        h = np.maximum(z1, 0)
        a = _sigmoid(h @ p["W2"] + p["b2"])
        return x * a[:, None, None, :], (x, s, z1, h, a)

    def backward(self, p, cache, dy):
        x, s, z1, h, a = cache
        hw = x.shape[1] * x.shape[2]
        da = (dy * x).sum((1, 2))
        dz2 = da * a * (1 - a)
        dh = dz2 @ p["W2"].T
        dz1 = dh * (z1 > 0)
        ds = dz1 @ p["W1"].T
        dx = dy * a[:, None, None, :] + ds[:, None, None, :] / hw
        return dx, {"W1": s.T @ dz1, "b1": dz1.sum(0), "W2": h.T @ dz2, "b2": dz2.sum(0)}


class SelfAttention1h(Layer):
    """Single-head self-attention over spatial positions (or tokens)."""

    kind = "self-attention-1h"
    defaults = {"hidden-dim": None}

    def _d(self, c):
        return self.hidden_dim or c

    def out_shape(self, in_shape):
        _need_rank(self.kind, in_shape, (2, 3))
        return in_shape

    def param_shapes(self, in_shape):
        c = in_shape[-1]
        d = self._d(c)
        # no key bias: it shifts every score in a row equally and has zero gradient
        return {"Wq": (c, d), "bq": (d,), "Wk": (c, d),
                "Wv": (c, d), "bv": (d,), "Wo": (d, c), "bo": (c,)}

    def init(self, rng, in_shape):
        c = in_shape[-1]
        d = self._d(c)
        p = {}
        for name in ("q", "k", "v"):
            p["W" + name] = _kaiming(rng, (c, d), c)
        p["bq"] = np.zeros(d, np.float32)
        p["bv"] = np.zeros(d, np.float32)
        p["Wo"] = _kaiming(rng, (d, c), d) * np.float32(0.5)
        p["bo"] = np.zeros(c, np.float32)
        return p

    def forward(self, p, x, train=False):
        shape = x.shape
        X = x.reshape(shape[0], -1, shape[-1])
        q = X @ p["Wq"] + p["bq"]
        k = X @ p["Wk"]
        v = X @ p["Wv"] + p["bv"]
        scale = 1.0 / math.sqrt(q.shape[-1])
        s = (q @ k.transpose(0, 2, 1)) * scale
        s = s - s.max(-1, keepdims=True)
        a = np.exp(s)
        a /= a.sum(-1, keepdims=True)
        o = a @ v
        y = o @ p["Wo"] + p["bo"]
        return y.reshape(shape), (shape, X, q, k, v, a, o, scale)

    def backward(self, p, cache, dy):
        shape, X, q, k, v, a, o, scale = cache
        dY = dy.reshape(X.shape)
        flat = lambda t: t.reshape(-1, t.shape[-1])  # noqa: E731
        grads = {"Wo": flat(o).T @ flat(dY), "bo": flat(dY).sum(0)}
        do = dY @ p["Wo"].T
        da = do @ v.transpose(0, 2, 1)
        dv = a.transpose(0, 2, 1) @ do
        ds = a * (da - (da * a).sum(-1, keepdims=True)) * scale
        dq = ds @ k
        dk = ds.transpose(0, 2, 1) @ q
        dX = dq @ p["Wq"].T + dk @ p["Wk"].T + dv @ p["Wv"].T
        Xf = flat(X)
        for name, d in (("q", dq), ("k", dk), ("v", dv)):
            grads["W" + name] = Xf.T @ flat(d)
        grads["bq"] = flat(dq).sum(0)
        grads["bv"] = flat(dv).sum(0)
        return dX.reshape(shape), grads


class ResidualBegin(Layer):
    kind = "residual-begin"


class ResidualEnd(Layer):
    kind = "residual-end"


LAYER_KINDS: dict[str, type[Layer]] = {
    cls.kind: cls
    for cls in (Dense, Conv2d, Patchify, BatchNorm, LayerNorm, ReLU, GeLU, SiLU, LeakyReLU,
                MaxPool, AvgPool, GlobalAvgPool, ResidualBegin, ResidualEnd,
                SelfAttention1h, SqueezeExcite, Flatten)
}


def make_layer(kind: str, params: dict | None = None) -> Layer:
    try:
        cls = LAYER_KINDS[kind]
    except KeyError:
        raise ValueError(f"unknown layer kind {kind!r}") from None
    return cls(**(params or {}))
