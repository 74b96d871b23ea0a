"""Minimal dense-layer kit with hand-derived gradients.

Everything is float64 and deterministic: reproducibility and finite-difference
verification matter more than speed at the scales this package targets.
Forward functions return (output, cache); the matching backward consumes the
upstream gradient plus the cache and returns exact input/parameter gradients.

Checkpoints are a self-describing container: a JSON header naming each tensor
and its shape, followed by raw little-endian float64 payloads.  The format
round-trips bit-exactly and writes identical bytes for identical stores.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
from scipy.special import expit as sigmoid

CHECKPOINT_MAGIC = "NTC1"


class DimensionError(ValueError):
    pass


class NumericError(RuntimeError):
    """Raised when NaN/Inf is detected where finite values are required."""


def check_finite(x, what="tensor"):
    if not np.all(np.isfinite(x)):
        raise NumericError(f"{what} contains NaN or Inf")
    return x


def init_uniform(rng, shape, fan_in):
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)), the kit-wide weight init."""
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


# ---------------------------------------------------------------------------
# parameter store + optimizer


class ParamStore:
    """Named parameters with matching gradient and Adam moment buffers."""

    def __init__(self):
        self.params = {}
        self.grads = {}
        self._m = {}
        self._v = {}
        self.step = 0

    def add(self, name, array):
        if name in self.params:
            raise KeyError(f"parameter {name!r} already registered")
        arr = np.asarray(array, dtype=np.float64)
        self.params[name] = arr
        self.grads[name] = np.zeros_like(arr)
        self._m[name] = np.zeros_like(arr)
        self._v[name] = np.zeros_like(arr)
        return arr

    def __getitem__(self, name):
        return self.params[name]

    def names(self):
        return sorted(self.params)

    def zero_grads(self):
        for g in self.grads.values():
            g[...] = 0.0

    def accumulate(self, grads, scale=1.0):
        for name, g in grads.items():
            self.grads[name] += scale * g

    def global_grad_norm(self):
        total = 0.0
        for g in self.grads.values():
            total += float(np.sum(g * g))
        return float(np.sqrt(total))

    def clip_global_norm(self, max_norm):
        norm = self.global_grad_norm()
        if norm > max_norm:
            scale = max_norm / norm
            for g in self.grads.values():
                g *= scale
        return norm

    def adam_step(self, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        """Bias-corrected Adam update from the accumulated gradients."""
        self.step += 1
        t = self.step
        for name, p in self.params.items():
            g = self.grads[name]
            m = self._m[name]
            v = self._v[name]
            m[...] = beta1 * m + (1.0 - beta1) * g
            v[...] = beta2 * v + (1.0 - beta2) * g * g
            m_hat = m / (1.0 - beta1 ** t)
            v_hat = v / (1.0 - beta2 ** t)
            p -= lr * m_hat / (np.sqrt(v_hat) + eps)

    def copy(self):
        other = ParamStore()
        for name, p in self.params.items():
            other.add(name, p.copy())
            other.grads[name][...] = self.grads[name]
            other._m[name][...] = self._m[name]
            other._v[name][...] = self._v[name]
        other.step = self.step
        return other

    # -- checkpoint container ------------------------------------------------

    def save(self, path, meta=None):
        names = self.names()
        header = {
            "format_version": 1,
            "meta": meta or {},
            "tensors": [{"name": n, "shape": list(self.params[n].shape)} for n in names],
        }
        blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
        with open(path, "wb") as fh:
            fh.write(CHECKPOINT_MAGIC.encode("ascii") + b"\n")
            fh.write(blob + b"\n")
            for n in names:
                fh.write(np.ascontiguousarray(self.params[n], dtype="<f8").tobytes())

    @classmethod
    def load(cls, path):
        raw = Path(path).read_bytes()
        magic, rest = raw.split(b"\n", 1)
        if magic.decode("ascii", errors="replace") != CHECKPOINT_MAGIC:
            raise ValueError(f"{path} is not a checkpoint file")
        header_blob, payload = rest.split(b"\n", 1)
        header = json.loads(header_blob.decode("utf-8"))
        store = cls()
        offset = 0
        for entry in header["tensors"]:
            shape = tuple(entry["shape"])
            size = int(np.prod(shape)) if shape else 1
            arr = np.frombuffer(payload, dtype="<f8", count=size, offset=offset)
            store.add(entry["name"], arr.reshape(shape).astype(np.float64))
            offset += size * 8
        return store, header["meta"]


# ---------------------------------------------------------------------------
# layers


def affine_forward(x, W, b):
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != W.shape[0]:
        raise DimensionError(f"affine: x has {x.shape[-1]} cols, W expects {W.shape[0]}")
    return x @ W + b, (x, W)


def affine_backward(dy, cache):
    x, W = cache
    dx = dy @ W.T
    dW = x.T @ dy
    db = dy.sum(axis=0)
    return dx, dW, db


def relu_forward(x):
    return np.maximum(x, 0.0), (x > 0.0)


def relu_backward(dy, cache):
    return dy * cache


def layer_norm_forward(x, gain, bias, eps=1e-8):
    """Row-wise layer normalization with learned gain/bias."""
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x - mu) * inv
    return gain * xhat + bias, (xhat, inv, gain)


def layer_norm_backward(dy, cache):
    xhat, inv, gain = cache
    d = xhat.shape[-1]
    dgain = (dy * xhat).sum(axis=tuple(range(dy.ndim - 1)))
    dbias = dy.sum(axis=tuple(range(dy.ndim - 1)))
    dxhat = dy * gain
    dx = inv / d * (d * dxhat - dxhat.sum(axis=-1, keepdims=True)
                    - xhat * (dxhat * xhat).sum(axis=-1, keepdims=True))
    return dx, dgain, dbias


GRU_PARAM_NAMES = ("W_xr", "W_hr", "b_r", "W_xz", "W_hz", "b_z", "W_xn", "W_hn", "b_n")


def gru_init(rng, in_dim, hidden):
    p = {}
    for name in ("W_xr", "W_xz", "W_xn"):
        p[name] = init_uniform(rng, (in_dim, hidden), in_dim)
    for name in ("W_hr", "W_hz", "W_hn"):
        p[name] = init_uniform(rng, (hidden, hidden), hidden)
    for name in ("b_r", "b_z", "b_n"):
        p[name] = np.zeros(hidden)
    return p


def gru_cell_forward(x, h_prev, p):
    """One GRU step; h = z * h_prev + (1 - z) * n.

    Gates: r = sig(x W_xr + h W_hr + b_r), z likewise; candidate
    n = tanh(x W_xn + (r * h_prev) W_hn + b_n).
    """
    if x.shape[-1] != p["W_xr"].shape[0] or h_prev.shape[-1] != p["W_hr"].shape[0]:
        raise DimensionError("gru: input/hidden dims do not match parameters")
    r = sigmoid(x @ p["W_xr"] + h_prev @ p["W_hr"] + p["b_r"])
    z = sigmoid(x @ p["W_xz"] + h_prev @ p["W_hz"] + p["b_z"])
    rh = r * h_prev
    n = np.tanh(x @ p["W_xn"] + rh @ p["W_hn"] + p["b_n"])
    h = z * h_prev + (1.0 - z) * n
    return h, (x, h_prev, r, z, rh, n, p)


def gru_cell_backward(dh, cache):
    x, h_prev, r, z, rh, n, p = cache
    grads = {}
    dz = dh * (h_prev - n)
    dn = dh * (1.0 - z)
    dh_prev = dh * z

    dpre_n = dn * (1.0 - n * n)
    grads["W_xn"] = x.T @ dpre_n
    grads["W_hn"] = rh.T @ dpre_n
    grads["b_n"] = dpre_n.sum(axis=0)
    drh = dpre_n @ p["W_hn"].T
    dr = drh * h_prev
    dh_prev = dh_prev + drh * r
    dx = dpre_n @ p["W_xn"].T

    dpre_z = dz * z * (1.0 - z)
    grads["W_xz"] = x.T @ dpre_z
    grads["W_hz"] = h_prev.T @ dpre_z
    grads["b_z"] = dpre_z.sum(axis=0)
    dx += dpre_z @ p["W_xz"].T
    dh_prev = dh_prev + dpre_z @ p["W_hz"].T

    dpre_r = dr * r * (1.0 - r)
    grads["W_xr"] = x.T @ dpre_r
    grads["W_hr"] = h_prev.T @ dpre_r
    grads["b_r"] = dpre_r.sum(axis=0)
    dx += dpre_r @ p["W_xr"].T
    dh_prev = dh_prev + dpre_r @ p["W_hr"].T
    return dx, dh_prev, grads


def causal_attention_forward(H, Wq, Wk, Wv):
    """Single-head scaled dot-product attention with a causal mask.

    Position t attends to positions <= t only; the attended value is added
    back to the input (residual).
    """
    k, d = H.shape
    if Wq.shape[0] != d:
        raise DimensionError(f"attention: H has {d} cols, Wq expects {Wq.shape[0]}")
    Q = H @ Wq
    K = H @ Wk
    V = H @ Wv
    S = (Q @ K.T) / np.sqrt(d)
    mask = np.tril(np.ones((k, k), dtype=bool))
    S = np.where(mask, S, -np.inf)
    S_max = S.max(axis=1, keepdims=True)
    expS = np.exp(S - S_max)
    A = expS / expS.sum(axis=1, keepdims=True)
    O = A @ V
    out = H + O
    return out, (H, Q, K, V, A, mask, Wq, Wk, Wv)


def causal_attention_backward(dout, cache):
    H, Q, K, V, A, mask, Wq, Wk, Wv = cache
    d = H.shape[1]
    dO = dout
    dA = dO @ V.T
    dV = A.T @ dO
    # softmax rows: dS = A * (dA - rowsum(dA * A)); masked entries carry A = 0
    dS = A * (dA - (dA * A).sum(axis=1, keepdims=True))
    dS = np.where(mask, dS, 0.0)
    dQ = (dS @ K) / np.sqrt(d)
    dK = (dS.T @ Q) / np.sqrt(d)
    dH = dout + dQ @ Wq.T + dK @ Wk.T + dV @ Wv.T
    dWq = H.T @ dQ
    dWk = H.T @ dK
    dWv = H.T @ dV
    return dH, dWq, dWk, dWv


def softmax(x, axis=-1):
    """Numerically stable softmax; -inf entries get probability zero."""
    x = np.asarray(x, dtype=np.float64)
    m = np.max(x, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    e = np.exp(x - m)
    e = np.where(np.isfinite(x), e, 0.0)
    return e / e.sum(axis=axis, keepdims=True)


def softmax_xent(logits, target):
    """Cross-entropy of softmax(logits) against one target index."""
    logits = np.asarray(logits, dtype=np.float64)
    n = logits.shape[-1]
    if not (0 <= target < n):
        raise IndexError(f"target {target} outside [0, {n})")
    m = logits.max()
    shifted = logits - m
    logsumexp = np.log(np.exp(shifted).sum())
    loss = logsumexp - shifted[target]
    grad = softmax(logits)
    grad[target] -= 1.0
    return float(loss), grad


def softmax_xent_rows(logits, targets):
    """Row-wise cross-entropy; returns (mean loss, gradient of mean)."""
    logits = np.asarray(logits, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.int64)
    n_rows, n_cls = logits.shape
    if targets.min() < 0 or targets.max() >= n_cls:
        raise IndexError("target index outside logit range")
    m = logits.max(axis=1, keepdims=True)
    shifted = logits - m
    logsumexp = np.log(np.exp(shifted).sum(axis=1))
    losses = logsumexp - shifted[np.arange(n_rows), targets]
    grad = softmax(logits)
    grad[np.arange(n_rows), targets] -= 1.0
    return float(losses.mean()), grad / n_rows


def numeric_grad(f, x, h=1e-5):
    """Central finite differences of scalar f at x, for gradient checks."""
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    while not it.finished:
        idx = it.multi_index
        orig = x[idx]
        x[idx] = orig + h
        f_plus = f(x)
        x[idx] = orig - h
        f_minus = f(x)
        x[idx] = orig
        grad[idx] = (f_plus - f_minus) / (2.0 * h)
        it.iternext()
    return grad


def rel_error(a, b, floor=1e-6):
    """Max elementwise relative discrepancy between gradient arrays."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(np.abs(a) + np.abs(b), floor)
    return float(np.max(np.abs(a - b) / denom))
