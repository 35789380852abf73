"""Residual MLP classifier in numpy with hand-written backprop, Adam and training callbacks.

Layer stack (widths configurable, defaults 256/128)::

    BN -> Dense(256) -> BN -> LeakyReLU -> Dropout(0.3)
       -> Dense(128) -> BN -> LeakyReLU -> Dropout(0.2)            = skip
       -> Dense(128) -> BN -> LeakyReLU -> Dropout(0.2)
       -> Dense(128) -> BN -> LeakyReLU -> (+ skip) -> Dropout(0.2)
       -> Dense(C) -> softmax

Hidden dense kernels carry an L2 penalty; biases, BN parameters and the
output layer do not.
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import rng as rng_mod

WEIGHTS_MAGIC = b"GZNNW\x00"
WEIGHTS_VERSION = 1
N_HIDDEN_DENSE = 4


class LayoutError(ValueError):
    """Weights do not fit the model (different shapes or parameter names)."""


@dataclass(frozen=True)
class NetConfig:
    input_dim: int
    num_classes: int
    hidden: tuple[int, int] = (256, 128)
    dropout: tuple[float, float, float, float] = (0.3, 0.2, 0.2, 0.2)
    l2: float = 0.001
    leaky_alpha: float = 0.1
    bn_momentum: float = 0.99
    bn_eps: float = 1e-3
    seed: int = 42

    def __post_init__(self):
        if self.input_dim < 1:
            raise ValueError("input_dim must be >= 1")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if len(self.hidden) != 2 or min(self.hidden) < 1:
            raise ValueError("hidden must be two positive widths")
        if len(self.dropout) != 4 or not all(0 <= p < 1 for p in self.dropout):
            raise ValueError("dropout must be four rates in [0, 1)")


def _dense_shapes(cfg: NetConfig) -> list[tuple[str, int, int]]:
    w1, w2 = cfg.hidden
    return [("dense_1", cfg.input_dim, w1), ("dense_2", w1, w2), ("dense_3", w2, w2),
            ("dense_4", w2, w2), ("dense_out", w2, cfg.num_classes)]


def _bn_widths(cfg: NetConfig) -> list[tuple[str, int]]:
    w1, w2 = cfg.hidden
    return [("bn_in", cfg.input_dim), ("bn_1", w1), ("bn_2", w2), ("bn_3", w2), ("bn_4", w2)]


def param_layout(cfg: NetConfig) -> tuple[tuple[str, tuple[int, ...]], ...]:
    """Ordered (name, shape) of every tensor, BN running statistics included."""
    bn = dict(_bn_widths(cfg))
    out = []
    for bn_name in ("bn_in",):
        out += [(f"{bn_name}.{p}", (bn[bn_name],)) for p in ("gamma", "beta", "moving_mean", "moving_var")]
    for i, (name, fan_in, fan_out) in enumerate(_dense_shapes(cfg)):
        out += [(f"{name}.kernel", (fan_in, fan_out)), (f"{name}.bias", (fan_out,))]
        if i < N_HIDDEN_DENSE:
            b = f"bn_{i + 1}"
            out += [(f"{b}.{p}", (bn[b],)) for p in ("gamma", "beta", "moving_mean", "moving_var")]
    return tuple(out)


def is_trainable(name: str) -> bool:
    return not name.endswith(("moving_mean", "moving_var"))


def is_penalized(name: str) -> bool:
    return name.endswith(".kernel") and not name.startswith("dense_out")


@dataclass(frozen=True, eq=False)
class ModelWeights:
    layout: tuple[tuple[str, tuple[int, ...]], ...]
    arrays: tuple[np.ndarray, ...]

    def __post_init__(self):
        if len(self.layout) != len(self.arrays):
            raise LayoutError("layout and arrays differ in length")
        for (name, shape), a in zip(self.layout, self.arrays):
            if tuple(a.shape) != tuple(shape):
                raise LayoutError(f"{name}: shape {a.shape} does not match layout {shape}")

    def as_dict(self) -> dict[str, np.ndarray]:
        return {name: a for (name, _), a in zip(self.layout, self.arrays)}

    def to_bytes(self, meta: dict | None = None) -> bytes:
        header = json.dumps({"layout": [[n, list(s)] for n, s in self.layout], "meta": meta or {}},
                            sort_keys=True).encode("utf-8")
        body = b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes() for a in self.arrays)
        return WEIGHTS_MAGIC + struct.pack("<HI", WEIGHTS_VERSION, len(header)) + header + body

    @classmethod
    def from_bytes(cls, blob: bytes) -> ModelWeights:
        if not blob.startswith(WEIGHTS_MAGIC):
            raise LayoutError("not a weights container")
        off = len(WEIGHTS_MAGIC)
        version, hlen = struct.unpack_from("<HI", blob, off)
        if version != WEIGHTS_VERSION:
            raise LayoutError(f"unsupported weights version {version}")
        off += struct.calcsize("<HI")
        header = json.loads(blob[off:off + hlen].decode("utf-8"))
        off += hlen
        layout, arrays = [], []
        for name, shape in header["layout"]:
            n = int(np.prod(shape, dtype=np.int64))
            arrays.append(np.frombuffer(blob, dtype="<f8", count=n, offset=off).reshape(shape).astype(np.float64))
            layout.append((name, tuple(shape)))
            off += 8 * n
        if off != len(blob):
            raise LayoutError("trailing bytes after weights payload")
        return cls(tuple(layout), tuple(arrays))

    def sha256(self) -> str:
        return hashlib.sha256(self.to_bytes()).hexdigest()

    def save(self, path, meta: dict | None = None) -> None:
        Path(path).write_bytes(self.to_bytes(meta))

    @classmethod
    def load(cls, path) -> ModelWeights:
        return cls.from_bytes(Path(path).read_bytes())


class NeuralNetModel:
    def __init__(self, config: NetConfig, params: dict[str, np.ndarray]):
        self.config = config
        self.layout = param_layout(config)
        self.params = params
        self.rng = rng_mod.stream(config.seed, "dropout")

    @property
    def n_params(self) -> int:
        return int(sum(int(np.prod(s)) for _, s in self.layout))

    @property
    def n_trainable(self) -> int:
        return int(sum(int(np.prod(s)) for n, s in self.layout if is_trainable(n)))

    def copy(self) -> NeuralNetModel:
        return NeuralNetModel(self.config, {k: v.copy() for k, v in self.params.items()})


def build_model(input_dim: int, num_classes: int, seed: int = 42, **overrides) -> NeuralNetModel:
    """Glorot-uniform kernels keyed by (seed, layer), zero biases, identity BN."""
    cfg = NetConfig(input_dim, num_classes, seed=seed, **overrides)
    params = {}
    for name, shape in param_layout(cfg):
        layer, kind = name.split(".")
        if kind == "kernel":
            limit = math.sqrt(6.0 / (shape[0] + shape[1]))
            params[name] = rng_mod.stream(seed, "init", layer).uniform(-limit, limit, size=shape)
        elif kind in ("gamma", "moving_var"):
            params[name] = np.ones(shape)
        else:
            params[name] = np.zeros(shape)
    return NeuralNetModel(cfg, params)


def get_weights(model: NeuralNetModel) -> ModelWeights:
    return ModelWeights(model.layout, tuple(model.params[n].copy() for n, _ in model.layout))


def set_weights(model: NeuralNetModel, weights: ModelWeights) -> None:
    if tuple((n, tuple(s)) for n, s in weights.layout) != tuple((n, tuple(s)) for n, s in model.layout):
        raise LayoutError("weights layout does not match the model architecture")
    for (name, _), a in zip(weights.layout, weights.arrays):
        model.params[name] = np.array(a, dtype=np.float64, copy=True)


# forward / backward


def _bn_forward(x, p, prefix, cfg, use_batch, update_stats):
    gamma, beta = p[f"{prefix}.gamma"], p[f"{prefix}.beta"]
    if use_batch:
        mu, var = x.mean(axis=0), x.var(axis=0)
        if update_stats:
            m = cfg.bn_momentum
            p[f"{prefix}.moving_mean"] = m * p[f"{prefix}.moving_mean"] + (1 - m) * mu
            p[f"{prefix}.moving_var"] = m * p[f"{prefix}.moving_var"] + (1 - m) * var
    else:
        mu, var = p[f"{prefix}.moving_mean"], p[f"{prefix}.moving_var"]
    inv = 1.0 / np.sqrt(var + cfg.bn_eps)
    xhat = (x - mu) * inv
    return gamma * xhat + beta, (xhat, inv, gamma, use_batch)


def _bn_backward(dy, cache):
    xhat, inv, gamma, use_batch = cache
    dgamma = (dy * xhat).sum(axis=0)
    dbeta = dy.sum(axis=0)
    dxhat = dy * gamma
    if not use_batch:
        return dxhat * inv, dgamma, dbeta
    n = dy.shape[0]
    dx = inv / n * (n * dxhat - dxhat.sum(axis=0) - xhat * (dxhat * xhat).sum(axis=0))
    return dx, dgamma, dbeta


def _softmax(z):
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def forward(model: NeuralNetModel, X, mode: str = "infer", rng: np.random.Generator | None = None,
            freeze_bn: bool = False, update_stats: bool = True, dropout: bool = True,
            return_cache: bool = False):
    """N x C class probabilities.

    ``train`` mode normalises with batch statistics (updating the running
    averages unless ``update_stats`` is False) and applies dropout drawn from
    ``rng`` (default: the model's own stream).  ``freeze_bn`` uses running
    statistics even in train mode; ``dropout=False`` disables the masks.
    """
    if mode not in ("train", "infer"):
        raise ValueError(f"mode must be 'train' or 'infer', got {mode!r}")
    cfg, p = model.config, model.params
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != cfg.input_dim:
        raise ValueError(f"expected N x {cfg.input_dim} input, got shape {X.shape}")
    train = mode == "train"
    use_batch = train and not freeze_bn
    upd = use_batch and update_stats
    rng = model.rng if rng is None else rng
    alpha = cfg.leaky_alpha
    cache: dict = {"x": X}

    h, cache["bn_in"] = _bn_forward(X, p, "bn_in", cfg, use_batch, upd)
    skip = None
    for i in range(N_HIDDEN_DENSE):
        layer, bn = f"dense_{i + 1}", f"bn_{i + 1}"
        cache[f"{layer}.in"] = h
        z = h @ p[f"{layer}.kernel"] + p[f"{layer}.bias"]
        a, cache[bn] = _bn_forward(z, p, bn, cfg, use_batch, upd)
        cache[f"{bn}.out"] = a
        h = np.where(a > 0, a, alpha * a)
        if i == 3:
            cache["residual_branch"] = h
            h = h + skip
            cache["residual_sum"] = h
        rate = cfg.dropout[i]
        if train and dropout and rate > 0:
            mask = (rng.random(h.shape) >= rate) / (1.0 - rate)
            h = h * mask
            cache[f"drop_{i + 1}"] = mask
        if i == 1:
            skip = h
            cache["skip"] = skip
    cache["dense_out.in"] = h
    logits = h @ p["dense_out.kernel"] + p["dense_out.bias"]
    probs = _softmax(logits)
    cache["logits"] = logits
    return (probs, cache) if return_cache else probs


def l2_penalty(model: NeuralNetModel) -> float:
    return model.config.l2 * sum(float((model.params[n] ** 2).sum()) for n, _ in model.layout if is_penalized(n))


def data_loss(probs: np.ndarray, logits: np.ndarray, y: np.ndarray) -> float:
    # log-softmax from logits keeps the loss finite and consistent with the gradient
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    return float(-logp[np.arange(len(y)), y].mean())


def loss_and_grads(model: NeuralNetModel, X, y, mode: str = "train", rng=None, freeze_bn: bool = False,
                   update_stats: bool = True, dropout: bool = True):
    """(total loss, gradient dict over trainable params, probabilities)."""
    y = np.asarray(y, dtype=np.int64)
    probs, c = forward(model, X, mode, rng, freeze_bn, update_stats, dropout, return_cache=True)
    p, cfg = model.params, model.config
    n = len(y)
    loss = data_loss(probs, c["logits"], y) + l2_penalty(model)
    g: dict[str, np.ndarray] = {}
    d = probs.copy()
    d[np.arange(n), y] -= 1.0
    d /= n
    g["dense_out.kernel"] = c["dense_out.in"].T @ d
    g["dense_out.bias"] = d.sum(axis=0)
    dh = d @ p["dense_out.kernel"].T
    dskip = None
    for i in reversed(range(N_HIDDEN_DENSE)):
        layer, bn = f"dense_{i + 1}", f"bn_{i + 1}"
        if i == 1:
            dh = dh + dskip  # skip feeds both dense_3 and the residual add
        if f"drop_{i + 1}" in c:
            dh = dh * c[f"drop_{i + 1}"]
        if i == 3:
            dskip = dh  # gradient through the identity branch
        a = c[f"{bn}.out"]
        da = np.where(a > 0, dh, cfg.leaky_alpha * dh)
        dz, g[f"{bn}.gamma"], g[f"{bn}.beta"] = _bn_backward(da, c[bn])
        g[f"{layer}.kernel"] = c[f"{layer}.in"].T @ dz + 2.0 * cfg.l2 * p[f"{layer}.kernel"]
        g[f"{layer}.bias"] = dz.sum(axis=0)
        dh = dz @ p[f"{layer}.kernel"].T
    _, g["bn_in.gamma"], g["bn_in.beta"] = _bn_backward(dh, c["bn_in"])
    return loss, g, probs


def predict_proba(model: NeuralNetModel, X, batch_size: int = 4096) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    return np.vstack([forward(model, X[i:i + batch_size]) for i in range(0, max(len(X), 1), batch_size)])


def predict(model: NeuralNetModel, X) -> np.ndarray:
    return predict_proba(model, X).argmax(axis=1)


def evaluate_loss(model: NeuralNetModel, X, y) -> tuple[float, float]:
    """(loss incl. L2, accuracy) in inference mode."""
    y = np.asarray(y, dtype=np.int64)
    probs, c = forward(model, X, "infer", return_cache=True)
    return data_loss(probs, c["logits"], y) + l2_penalty(model), float(np.mean(probs.argmax(axis=1) == y))


def gradient_check(model: NeuralNetModel, X, y, n_checks: int = 200, h: float = 1e-4, seed: int = 0) -> float:
    """Max relative error of analytic vs central-difference gradients.

    Runs with batch statistics (no running-stat updates) and dropout off, on
    a random subsample of trainable entries.
    """
    kw = dict(mode="train", update_stats=False, dropout=False)
    _, grads, _ = loss_and_grads(model, X, y, **kw)
    rng = rng_mod.stream(seed, "gradcheck")
    names = [n for n, _ in model.layout if is_trainable(n)]
    sizes = np.array([model.params[n].size for n in names])
    worst = 0.0
    for _ in range(n_checks):
        k = int(rng.choice(len(names), p=sizes / sizes.sum()))
        arr = model.params[names[k]]
        j = int(rng.integers(arr.size))
        old = arr.flat[j]
        arr.flat[j] = old + h
        up = loss_and_grads(model, X, y, **kw)[0]
        arr.flat[j] = old - h
        down = loss_and_grads(model, X, y, **kw)[0]
        arr.flat[j] = old
        num = (up - down) / (2 * h)
        ana = grads[names[k]].flat[j]
        worst = max(worst, abs(ana - num) / max(abs(ana), abs(num), 1e-6))
    return worst


# training


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 25
    batch_size: int = 64
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    early_stopping_patience: int | None = 10
    lr_patience: int | None = 5
    lr_factor: float = 0.5
    min_lr: float = 1e-6
    seed: int = 42


class EarlyStopping:
    """Stop after ``patience`` epochs without a strictly lower validation loss."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best = math.inf
        self.best_epoch = -1
        self.wait = 0

    def update(self, epoch: int, val_loss: float) -> bool:
        """Record one epoch; True when training should stop."""
        if val_loss < self.best:
            self.best, self.best_epoch, self.wait = val_loss, epoch, 0
            return False
        self.wait += 1
        return self.wait >= self.patience


class PlateauScheduler:
    """Multiply the learning rate by ``factor`` after ``patience`` flat epochs, floored at ``min_lr``."""

    def __init__(self, lr: float, patience: int, factor: float = 0.5, min_lr: float = 1e-6):
        self.lr, self.patience, self.factor, self.min_lr = lr, patience, factor, min_lr
        self.best = math.inf
        self.wait = 0

    def update(self, val_loss: float) -> float:
        if val_loss < self.best:
            self.best, self.wait = val_loss, 0
        else:
            self.wait += 1
            if self.wait >= self.patience:
                self.lr = max(self.lr * self.factor, self.min_lr)
                self.wait = 0
        return self.lr


class Adam:
    def __init__(self, names, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.names = list(names)

    def step(self, params: dict, grads: dict) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        step = self.lr * math.sqrt(1 - b2 ** self.t) / (1 - b1 ** self.t)
        for n in self.names:
            g = grads[n]
            m = self.m[n] = b1 * self.m.get(n, 0.0) + (1 - b1) * g
            v = self.v[n] = b2 * self.v.get(n, 0.0) + (1 - b2) * g * g
            params[n] = params[n] - step * m / (np.sqrt(v) + self.eps)


@dataclass
class TrainHistory:
    epochs: list[dict] = field(default_factory=list)
    best_epoch: int = -1
    best_val_loss: float = math.inf
    stopped_early: bool = False
    config: dict = field(default_factory=dict)

    def column(self, key: str) -> list[float]:
        return [e[key] for e in self.epochs]

    def to_dict(self) -> dict:
        return {"epochs": self.epochs, "best_epoch": self.best_epoch, "best_val_loss": self.best_val_loss,
                "stopped_early": self.stopped_early, "config": self.config}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)


def train(model: NeuralNetModel, train_X, train_y, val_X, val_y, config: TrainConfig | None = None) -> TrainHistory:
    """Mini-batch Adam with early stopping and plateau LR; ends on the best-val-loss weights."""
    config = config or TrainConfig()
    X = np.asarray(train_X, dtype=np.float64)
    y = np.asarray(train_y, dtype=np.int64)
    vX = np.asarray(val_X, dtype=np.float64)
    vy = np.asarray(val_y, dtype=np.int64)
    if len(X) == 0 or len(vX) == 0:
        raise ValueError("train and validation sets must be non-empty")
    rng = rng_mod.stream(config.seed, "train")
    trainable = [n for n, _ in model.layout if is_trainable(n)]
    opt = Adam(trainable, config.lr, config.beta1, config.beta2, config.adam_eps)
    stopper = EarlyStopping(config.early_stopping_patience) if config.early_stopping_patience else None
    sched = PlateauScheduler(config.lr, config.lr_patience, config.lr_factor, config.min_lr) if config.lr_patience else None
    hist = TrainHistory(config=asdict(config))
    best_weights = get_weights(model)
    for epoch in range(config.epochs):
        order = rng.permutation(len(X))
        tot_loss, correct = 0.0, 0
        for start in range(0, len(X), config.batch_size):
            idx = order[start:start + config.batch_size]
            loss, grads, probs = loss_and_grads(model, X[idx], y[idx], "train", rng)
            opt.step(model.params, grads)
            tot_loss += loss * len(idx)
            correct += int((probs.argmax(axis=1) == y[idx]).sum())
        val_loss, val_acc = evaluate_loss(model, vX, vy)
        hist.epochs.append({"epoch": epoch + 1, "train_loss": tot_loss / len(X), "train_acc": correct / len(X),
                            "val_loss": val_loss, "val_acc": val_acc, "lr": opt.lr})
        if val_loss < hist.best_val_loss:
            hist.best_val_loss, hist.best_epoch = val_loss, epoch + 1
            best_weights = get_weights(model)
        if sched is not None:
            opt.lr = sched.update(val_loss)
        if stopper is not None and stopper.update(epoch + 1, val_loss):
            hist.stopped_early = True
            break
    set_weights(model, best_weights)
    return hist
