"""Transformer-encoder window classifier in plain numpy (float64).

Architecture: linear input projection, fixed sinusoidal positional
encoding, ``n_layers`` pre-norm blocks (multi-head self-attention and a
GELU feed-forward, each with a residual), final LayerNorm, mean-pool over
time and a linear head. Gradients are derived by hand; see
:func:`grad_check` for the finite-difference gate.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

LN_EPS = 1e-5
_GELU_C = math.sqrt(2.0 / math.pi)


@dataclass(frozen=True)
class ModelConfig:
    n_channels: int
    n_classes: int
    n_steps: int = 130
    d_model: int = 64
    n_heads: int = 4
    n_layers: int = 2
    ffn_dim: int = 128
    dropout: float = 0.1

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")
        if self.n_classes < 1 or self.n_channels < 1 or self.n_steps < 1:
            raise ValueError("channels, classes and steps must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")

    def to_dict(self) -> dict:
        return asdict(self)


def positional_encoding(n_steps: int, d_model: int) -> np.ndarray:
    pos = np.arange(n_steps)[:, None]
    i = np.arange(0, d_model, 2)[None, :]
    angle = pos / np.power(10000.0, i / d_model)
    pe = np.zeros((n_steps, d_model))
    pe[:, 0::2] = np.sin(angle)
    pe[:, 1::2] = np.cos(angle[:, : d_model // 2])
    return pe


def init_params(cfg: ModelConfig, seed: int = 0) -> dict[str, np.ndarray]:
    """Xavier-uniform matrices, zero biases, unit LayerNorm gains."""
    rng = np.random.default_rng(seed)

    def xavier(n_in, n_out):
        lim = math.sqrt(6.0 / (n_in + n_out))
        return rng.uniform(-lim, lim, size=(n_in, n_out))

    d, f = cfg.d_model, cfg.ffn_dim
    p = {"W_in": xavier(cfg.n_channels, d), "b_in": np.zeros(d)}
    for l in range(cfg.n_layers):
        p[f"l{l}.ln1_g"] = np.ones(d)
        p[f"l{l}.ln1_b"] = np.zeros(d)
        for m in "qkvo":
            p[f"l{l}.W{m}"] = xavier(d, d)
            p[f"l{l}.b{m}"] = np.zeros(d)
        p[f"l{l}.ln2_g"] = np.ones(d)
        p[f"l{l}.ln2_b"] = np.zeros(d)
        p[f"l{l}.W1"] = xavier(d, f)
        p[f"l{l}.b1"] = np.zeros(f)
        p[f"l{l}.W2"] = xavier(f, d)
        p[f"l{l}.b2"] = np.zeros(d)
    p["lnf_g"] = np.ones(d)
    p["lnf_b"] = np.zeros(d)
    p["W_out"] = xavier(d, cfg.n_classes)
    p["b_out"] = np.zeros(cfg.n_classes)
    return p


# ---------------------------------------------------------------- primitives


def softmax(z: np.ndarray, axis: int = -1) -> np.ndarray:
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def _ln_fwd(x, g, b):
    mu = x.mean(-1, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(-1, keepdims=True) + LN_EPS)
    xh = xc * inv
    return xh * g + b, (xh, inv, g)


def _ln_bwd(dy, cache):
    xh, inv, g = cache
    dg = (dy * xh).reshape(-1, xh.shape[-1]).sum(0)
    db = dy.reshape(-1, xh.shape[-1]).sum(0)
    dxh = dy * g
    dx = inv * (dxh - dxh.mean(-1, keepdims=True) - xh * (dxh * xh).mean(-1, keepdims=True))
    return dx, dg, db


def _gelu(x):
    t = np.tanh(_GELU_C * (x + 0.044715 * (x * x * x)))
    return 0.5 * x * (1.0 + t), t


def _gelu_grad(x, t):
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * _GELU_C * (1.0 + 3 * 0.044715 * x * x)


def _linear(x, W, b):
    return x @ W + b


def _linear_bwd(dy, x, W):
    x2 = x.reshape(-1, x.shape[-1])
    dy2 = dy.reshape(-1, dy.shape[-1])
    return dy @ W.T, x2.T @ dy2, dy2.sum(0)


def _dropout_mask(rng, shape, rate):
    if rng is None or rate <= 0.0:
        return None
    return (rng.random(shape) >= rate) / (1.0 - rate)


# ------------------------------------------------------------ forward/backward


def forward(params: dict, x: np.ndarray, cfg: ModelConfig, *, rng: np.random.Generator | None = None,
            return_cache: bool = False):
    """Logits (N, K) for a standardized batch (N, T, C).

    Dropout is active only when ``rng`` is given (training mode).
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 3 or x.shape[2] != cfg.n_channels:
        raise ValueError(f"expected input (N, T, {cfg.n_channels}), got {x.shape}")
    N, T, _ = x.shape
    h_, d = cfg.n_heads, cfg.d_model
    dh = d // h_
    cache: dict = {"x": x, "layers": []}
    z = _linear(x, params["W_in"], params["b_in"]) + positional_encoding(T, d)
    m = _dropout_mask(rng, z.shape, cfg.dropout)
    cache["drop_in"] = m
    if m is not None:
        z = z * m
    for l in range(cfg.n_layers):
        P = lambda k: params[f"l{l}.{k}"]  # noqa: E731
        c: dict = {}
        c["z_in"] = z
        u, c["ln1"] = _ln_fwd(z, P("ln1_g"), P("ln1_b"))
        c["u"] = u
        q = _linear(u, P("Wq"), P("bq")).reshape(N, T, h_, dh).transpose(0, 2, 1, 3)
        k = _linear(u, P("Wk"), P("bk")).reshape(N, T, h_, dh).transpose(0, 2, 1, 3)
        v = _linear(u, P("Wv"), P("bv")).reshape(N, T, h_, dh).transpose(0, 2, 1, 3)
        A = softmax(q @ k.transpose(0, 1, 3, 2) / math.sqrt(dh))
        ctx = (A @ v).transpose(0, 2, 1, 3).reshape(N, T, d)
        att = _linear(ctx, P("Wo"), P("bo"))
        c.update(q=q, k=k, v=v, A=A, ctx=ctx)
        c["drop_att"] = m = _dropout_mask(rng, att.shape, cfg.dropout)
        z = z + (att * m if m is not None else att)
        c["z_mid"] = z
        u2, c["ln2"] = _ln_fwd(z, P("ln2_g"), P("ln2_b"))
        pre = _linear(u2, P("W1"), P("b1"))
        act, tanh_ = _gelu(pre)
        ff = _linear(act, P("W2"), P("b2"))
        c.update(u2=u2, pre=pre, tanh=tanh_, act=act)
        c["drop_ff"] = m = _dropout_mask(rng, ff.shape, cfg.dropout)
        z = z + (ff * m if m is not None else ff)
        cache["layers"].append(c)
    hf, cache["lnf"] = _ln_fwd(z, params["lnf_g"], params["lnf_b"])
    pooled = hf.mean(axis=1)
    logits = _linear(pooled, params["W_out"], params["b_out"])
    cache["pooled"] = pooled
    cache["T"] = T
    return (logits, cache) if return_cache else logits


def cross_entropy(logits: np.ndarray, y: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean cross-entropy and its gradient with respect to the logits."""
    N = len(y)
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    loss = -float(logp[np.arange(N), y].mean())
    d = np.exp(logp)
    d[np.arange(N), y] -= 1.0
    return loss, d / N


def backward(params: dict, cache: dict, dlogits: np.ndarray, cfg: ModelConfig) -> dict[str, np.ndarray]:
    grads: dict[str, np.ndarray] = {}
    N, T = dlogits.shape[0], cache["T"]
    h_, d = cfg.n_heads, cfg.d_model
    dh = d // h_
    dpooled, grads["W_out"], grads["b_out"] = _linear_bwd(dlogits, cache["pooled"], params["W_out"])
    dhf = np.repeat(dpooled[:, None, :] / T, T, axis=1)
    dz, grads["lnf_g"], grads["lnf_b"] = _ln_bwd(dhf, cache["lnf"])
    for l in reversed(range(cfg.n_layers)):
        c = cache["layers"][l]
        P = lambda k: params[f"l{l}.{k}"]  # noqa: E731
        # feed-forward branch
        dff = dz * c["drop_ff"] if c["drop_ff"] is not None else dz
        dact, grads[f"l{l}.W2"], grads[f"l{l}.b2"] = _linear_bwd(dff, c["act"], P("W2"))
        dpre = dact * _gelu_grad(c["pre"], c["tanh"])
        du2, grads[f"l{l}.W1"], grads[f"l{l}.b1"] = _linear_bwd(dpre, c["u2"], P("W1"))
        dzm, grads[f"l{l}.ln2_g"], grads[f"l{l}.ln2_b"] = _ln_bwd(du2, c["ln2"])
        dz = dz + dzm
        # attention branch
        datt = dz * c["drop_att"] if c["drop_att"] is not None else dz
        dctx, grads[f"l{l}.Wo"], grads[f"l{l}.bo"] = _linear_bwd(datt, c["ctx"], P("Wo"))
        dctx = dctx.reshape(N, T, h_, dh).transpose(0, 2, 1, 3)
        A = c["A"]
        dA = dctx @ c["v"].transpose(0, 1, 3, 2)
        dv = A.transpose(0, 1, 3, 2) @ dctx
        dS = A * (dA - (dA * A).sum(-1, keepdims=True)) / math.sqrt(dh)
        dq = dS @ c["k"]
        dk = dS.transpose(0, 1, 3, 2) @ c["q"]
        du = np.zeros_like(c["u"])
        for name, dt in (("q", dq), ("k", dk), ("v", dv)):
            dt = dt.transpose(0, 2, 1, 3).reshape(N, T, d)
            dx_, grads[f"l{l}.W{name}"], grads[f"l{l}.b{name}"] = _linear_bwd(dt, c["u"], P(f"W{name}"))
            du += dx_
        dzi, grads[f"l{l}.ln1_g"], grads[f"l{l}.ln1_b"] = _ln_bwd(du, c["ln1"])
        dz = dz + dzi
    if cache["drop_in"] is not None:
        dz = dz * cache["drop_in"]
    _, grads["W_in"], grads["b_in"] = _linear_bwd(dz, cache["x"], params["W_in"])
    return grads


def loss_and_grads(params, x, y, cfg, rng=None):
    logits, cache = forward(params, x, cfg, rng=rng, return_cache=True)
    loss, dlogits = cross_entropy(logits, y)
    return loss, backward(params, cache, dlogits, cfg)


def grad_check(params: dict, x: np.ndarray, y: np.ndarray, cfg: ModelConfig, *, n_checks: int = 200,
               h: float = 1e-5, seed: int = 0, names=None, floor: float = 1e-6) -> float:
    """Max relative error between analytic and central-difference gradients
    over ``n_checks`` random parameter entries (dropout off).

    The error is ``|a - n| / max(|a|, |n|, floor)``. The floor keeps
    entries whose true gradient is zero (the key biases: softmax ignores a
    per-row shift) from dividing round-off by round-off.
    """
    _, grads = loss_and_grads(params, x, y, cfg)
    rng = np.random.default_rng(seed)
    names = sorted(params) if names is None else list(names)
    sizes = np.array([params[n].size for n in names], dtype=np.float64)
    worst = 0.0
    for _ in range(n_checks):
        name = names[rng.choice(len(names), p=sizes / sizes.sum())]
        arr = params[name]
        i = int(rng.integers(arr.size))
        old = arr.flat[i]
        arr.flat[i] = old + h
        lp, _ = cross_entropy(forward(params, x, cfg), y)
        arr.flat[i] = old - h
        lm, _ = cross_entropy(forward(params, x, cfg), y)
        arr.flat[i] = old
        num = (lp - lm) / (2 * h)
        ana = grads[name].flat[i]
        denom = max(abs(num), abs(ana), floor)
        worst = max(worst, abs(num - ana) / denom)
    return worst


# ------------------------------------------------------------------ optimizer


class Adam:
    def __init__(self, params: dict, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params: dict, grads: dict):
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for k in sorted(params):
            g = grads[k]
            self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * g * g
            params[k] -= self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)


def clip_global_norm(grads: dict, max_norm: float) -> float:
    norm = math.sqrt(sum(float(np.sum(grads[k] * grads[k])) for k in sorted(grads)))
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / norm
        for k in grads:
            grads[k] *= scale
    return norm


def train(params: dict, X: np.ndarray, y: np.ndarray, cfg: ModelConfig, *, epochs: int, lr=1e-3,
          batch_size: int = 32, clip: float = 1.0, seed: int = 0, callback=None) -> list[float]:
    """Mini-batch Adam on cross-entropy, updating ``params`` in place.

    Returns the mean training loss per epoch. Shuffling and dropout draw
    from one generator seeded with ``seed``.
    """
    rng = np.random.default_rng(seed)
    opt = Adam(params, lr=lr)
    curve = []
    for epoch in range(epochs):
        order = rng.permutation(len(y))
        total = 0.0
        for s in range(0, len(y), batch_size):
            idx = order[s : s + batch_size]
            loss, grads = loss_and_grads(params, X[idx], y[idx], cfg, rng=rng)
            clip_global_norm(grads, clip)
            opt.step(params, grads)
            total += loss * len(idx)
        curve.append(total / len(y))
        if callback is not None:
            callback(epoch, curve[-1])
    return curve


# ----------------------------------------------------------------- estimators


class ChannelStandardizer(BaseEstimator, TransformerMixin):
    """Per-channel z-scoring of (N, T, C) windows with statistics from
    ``fit`` only; channels with zero variance are dropped."""

    def __init__(self, min_std=1e-12):
        self.min_std = min_std

    def fit(self, X, y=None):
        X = check_array(X, allow_nd=True, dtype=np.float64)
        if X.ndim != 3:
            raise ValueError(f"expected (N, T, C) windows, got shape {X.shape}")
        flat = X.reshape(-1, X.shape[2])
        self.mean_ = flat.mean(axis=0)
        self.std_ = flat.std(axis=0)
        self.keep_ = self.std_ > self.min_std
        self.n_features_in_ = X.shape[2]
        return self

    def transform(self, X):
        check_is_fitted(self, "keep_")
        X = check_array(X, allow_nd=True, dtype=np.float64)
        if X.ndim != 3 or X.shape[2] != self.n_features_in_:
            raise ValueError(f"expected (N, T, {self.n_features_in_}) windows, got shape {X.shape}")
        k = self.keep_
        return (X[:, :, k] - self.mean_[k]) / self.std_[k]


class TransformerClassifier(ClassifierMixin, BaseEstimator):
    """Window classifier: standardize, then the numpy Transformer.

    ``X`` is (N, T, C); ``y`` holds class labels of any hashable type.
    ``classes`` fixes the vocabulary (and its order) up front; otherwise it
    is the sorted set of training labels.
    """

    def __init__(self, d_model=64, n_heads=4, n_layers=2, ffn_dim=128, dropout=0.1, lr=1e-3, batch_size=32,
                 epochs=30, clip=1.0, seed=42, classes=None):
        self.d_model = d_model
        self.n_heads = n_heads
        self.n_layers = n_layers
        self.ffn_dim = ffn_dim
        self.dropout = dropout
        self.lr = lr
        self.batch_size = batch_size
        self.epochs = epochs
        self.clip = clip
        self.seed = seed
        self.classes = classes

    def fit(self, X, y):
        X = check_array(X, allow_nd=True, dtype=np.float64)
        y = np.asarray(y)
        if X.ndim != 3 or len(X) != len(y):
            raise ValueError("X must be (N, T, C) with one label per window")
        self.classes_ = np.array(sorted(set(y.tolist()))) if self.classes is None else np.asarray(self.classes)
        if len(set(y.tolist())) < 2:
            raise ValueError("training data holds a single class; need at least two")
        yi = self._encode(y)
        self.standardizer_ = ChannelStandardizer().fit(X)
        Xs = self.standardizer_.transform(X)
        self.config_ = ModelConfig(Xs.shape[2], len(self.classes_), X.shape[1], self.d_model, self.n_heads,
                                   self.n_layers, self.ffn_dim, self.dropout)
        self.params_ = init_params(self.config_, self.seed)
        self.loss_curve_ = train(self.params_, Xs, yi, self.config_, epochs=self.epochs, lr=self.lr,
                                 batch_size=self.batch_size, clip=self.clip, seed=self.seed)
        self.n_features_in_ = X.shape[2]
        return self

    def _encode(self, y):
        pos = {c: i for i, c in enumerate(self.classes_.tolist())}
        bad = sorted({str(v) for v in y.tolist() if v not in pos})
        if bad:
            raise ValueError(f"labels {bad} are not in the vocabulary {self.classes_.tolist()}")
        return np.array([pos[v] for v in y.tolist()], dtype=np.int64)

    def decision_function(self, X, batch_size: int = 256):
        check_is_fitted(self, "params_")
        Xs = self.standardizer_.transform(X)
        out = [forward(self.params_, Xs[s : s + batch_size], self.config_) for s in range(0, len(Xs), batch_size)]
        return np.concatenate(out) if out else np.zeros((0, len(self.classes_)))

    def predict_proba(self, X):
        return softmax(self.decision_function(X))

    def predict(self, X):
        return self.classes_[np.argmax(self.decision_function(X), axis=1)]
