"""Neural building blocks on top of the autograd tensor.

Everything here is a pure function of its tensor/param arguments; models
in backbones.py are thin containers of Params that call into these.
"""
from __future__ import annotations

import math

import numpy as np

from .errors import ConfigError, NumericError, ShapeError
from .rng import RngStream
from .tensor import Param, ParamSet, Tensor, layer_norm  # noqa: F401  (re-export)


def _value(p) -> Tensor:
    return p.value if isinstance(p, Param) else p


def linear(x: Tensor, w, bias=None) -> Tensor:
    """y[..., o] = sum_k x[..., k] * w[k, o] (+ bias[o])."""
    wt = _value(w)
    if x.shape[-1] != wt.shape[0]:
        raise ShapeError(f"linear: x {x.shape} incompatible with w {wt.shape}")
    y = x @ wt
    if bias is not None:
        y = y + _value(bias)
    return y


def sigmoid(x: Tensor) -> Tensor:
    return x.sigmoid()


def mean_pool_seq(h: Tensor) -> Tensor:
    """Mean over the sequence axis of a B x L x D tensor, keeping the axis."""
    if h.ndim != 3:
        raise ShapeError(f"mean_pool_seq expects B x L x D, got {h.shape}")
    if h.shape[1] == 0:
        raise ShapeError("mean_pool_seq: empty sequence")
    return h.mean(axis=1, keepdims=True)


def expand_seq(s: Tensor, n: int) -> Tensor:
    """Broadcast a B x 1 x D context to B x n x D (gradient sums back)."""
    ones = Tensor(np.ones((1, n, 1)))
    return s * ones


def cross_attention(q: Tensor, kv: Tensor, wq, wk, wv, wo, heads: int) -> Tensor:
    """Scaled-dot-product multi-head attention of q over kv.

    q: B x Lq x D, kv: B x Lk x Dkv; wk/wv map Dkv -> D so the kv source
    may live in a different width than the query stream.
    """
    d = _value(wq).shape[1]
    if d % heads != 0:
        raise ConfigError(f"model dim {d} not divisible by {heads} heads")
    hd = d // heads
    b, lq = q.shape[0], q.shape[1]
    lk = kv.shape[1]

    def split(t, length):
        return t.reshape(b, length, heads, hd).transpose(0, 2, 1, 3)

    qh = split(linear(q, wq), lq)            # B x h x Lq x hd
    kh = split(linear(kv, wk), lk)
    vh = split(linear(kv, wv), lk)
    scores = (qh @ kh.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(hd))
    attn = scores.softmax()
    out = (attn @ vh).transpose(0, 2, 1, 3).reshape(b, lq, d)
    return linear(out, wo)


def mlp(x: Tensor, w1, w2) -> Tensor:
    return linear(linear(x, w1).gelu(), w2)


def mse(pred: Tensor, target: Tensor) -> Tensor:
    if pred.shape != target.shape:
        raise ShapeError(f"mse: {pred.shape} vs {target.shape}")
    diff = pred - target
    return (diff * diff).mean()


def cosine_rows(a: Tensor, b: Tensor, eps: float = 1e-8) -> Tensor:
    """Cosine similarity along the last axis, shape-preserving up to it."""
    num = (a * b).sum(axis=-1)
    na = (a * a).sum(axis=-1).sqrt()
    nb = (b * b).sum(axis=-1).sqrt()
    return num * _recip(na * nb + eps)


def _recip(t: Tensor) -> Tensor:
    y = 1.0 / t.data

    def bwd(g):
        t._maybe(g, -g * y * y)

    return Tensor._make(y, (t,), bwd)


# ------------------------------------------------------------------ init

def init_matrix(rng: RngStream, fan_in: int, fan_out: int) -> np.ndarray:
    scale = 1.0 / math.sqrt(fan_in)
    return rng.uniform((fan_in, fan_out), -scale, scale)


def attention_params(store: ParamSet, rng: RngStream, prefix: str, d: int, d_kv=None):
    d_kv = d if d_kv is None else d_kv
    return {
        "wq": store.new(f"{prefix}.wq", init_matrix(rng, d, d)),
        "wk": store.new(f"{prefix}.wk", init_matrix(rng, d_kv, d)),
        "wv": store.new(f"{prefix}.wv", init_matrix(rng, d_kv, d)),
        "wo": store.new(f"{prefix}.wo", init_matrix(rng, d, d)),
    }


def norm_params(store: ParamSet, prefix: str, d: int):
    return {
        "gain": store.new(f"{prefix}.gain", np.ones(d)),
        "bias": store.new(f"{prefix}.bias", np.zeros(d)),
    }


# ------------------------------------------------------------------ grad check

def grad_check(loss_fn, params, rng: RngStream, n_coords: int = 50, h: float = 1e-4) -> float:
    """Max relative error between analytic and central-difference gradients.

    loss_fn must be a deterministic closure returning a scalar Tensor.
    Coordinates are sampled across all trainable params; frozen params are
    asserted to receive no gradient.
    """
    params = list(params)
    for p in params:
        p.value.grad = None
    loss = loss_fn()
    if not np.isfinite(loss.data):
        raise NumericError("grad_check: non-finite loss")
    loss.backward()

    trainables = [p for p in params if p.trainable]
    for p in params:
        if not p.trainable and p.value.grad is not None:
            raise NumericError(f"frozen param {p.id} received a gradient")

    coords = []
    for p in trainables:
        g = p.value.grad
        if g is None:
            g = np.zeros_like(p.value.data)
            p.value.grad = g
        coords.extend((p, i) for i in range(p.value.data.size))
    if len(coords) > n_coords:
        pick = rng.generator.choice(len(coords), size=n_coords, replace=False)
        coords = [coords[i] for i in sorted(pick)]

    worst = 0.0
    for p, flat_i in coords:
        buf = p.value.data.reshape(-1)
        orig = buf[flat_i]
        buf[flat_i] = orig + h
        lp = loss_fn().item()
        buf[flat_i] = orig - h
        lm = loss_fn().item()
        buf[flat_i] = orig
        cd = (lp - lm) / (2 * h)
        an = p.value.grad.reshape(-1)[flat_i]
        rel = abs(an - cd) / (abs(an) + abs(cd) + 1e-8)
        worst = max(worst, rel)
    return worst
