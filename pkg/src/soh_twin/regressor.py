"""Stacked LSTM regressor from one-hot encoded cycles to capacity.

Everything is plain numpy in float64: forward pass, backpropagation through
time, Adam, early stopping, finite-difference gradient checking and a
versioned binary model file.

Gate blocks inside every ``(., 4H)`` weight matrix are ordered input,
forget, output, candidate.
"""

from __future__ import annotations

import json
import struct
import warnings
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from scipy.special import expit

from .errors import (
    DegenerateDataError,
    GridMismatchWarning,
    ModelFormatError,
    ModelInputError,
    TrainingError,
)
from .importance import EncodedCycle

FORMAT_MAGIC = b"SOHTWIN\x00"
FORMAT_VERSION = 1


@dataclass
class ModelParameters:
    weights: dict
    label_norm: tuple
    input_dim: int
    hidden: int = 100
    n_layers: int = 2
    interval: Optional[tuple] = None
    grid: Optional[dict] = None
    grid_digest: str = ""
    nominal_capacity: float = 1.1

    def __post_init__(self):
        lo, hi = self.label_norm
        if not lo < hi:
            raise ModelInputError("label_norm must satisfy min < max")
        for name, shape in self.expected_shapes().items():
            w = self.weights.get(name)
            if w is None or w.shape != shape:
                raise ModelInputError(f"weight {name} missing or not of shape {shape}")
            if not np.all(np.isfinite(w)):
                raise ModelInputError(f"weight {name} is not finite")

    def expected_shapes(self):
        H = self.hidden
        shapes = {}
        for l in range(self.n_layers):
            fan_in = self.input_dim if l == 0 else H
            shapes[f"W{l}"] = (fan_in, 4 * H)
            shapes[f"U{l}"] = (H, 4 * H)
            shapes[f"b{l}"] = (4 * H,)
        shapes["head_w"] = (H,)
        shapes["head_b"] = (1,)
        return shapes

    def normalize(self, capacity):
        lo, hi = self.label_norm
        return (np.asarray(capacity, dtype=float) - lo) / (hi - lo)

    def denormalize(self, y):
        lo, hi = self.label_norm
        return np.asarray(y, dtype=float) * (hi - lo) + lo

    def copy(self) -> "ModelParameters":
        return ModelParameters(
            {k: v.copy() for k, v in self.weights.items()},
            tuple(self.label_norm),
            self.input_dim,
            self.hidden,
            self.n_layers,
            self.interval,
            self.grid,
            self.grid_digest,
            self.nominal_capacity,
        )


def init_parameters(
    input_dim, label_norm, hidden=100, n_layers=2, seed=0, forget_bias=1.0, input_bias=0.0, **meta
) -> ModelParameters:
    """Uniform(+-1/sqrt(fan_in)) weights, zero biases except the forget gate."""
    rng = np.random.default_rng(seed)
    H = hidden
    weights = {}
    for l in range(n_layers):
        fan_in = input_dim if l == 0 else H
        a = 1.0 / np.sqrt(fan_in)
        weights[f"W{l}"] = rng.uniform(-a, a, (fan_in, 4 * H))
        a = 1.0 / np.sqrt(H)
        weights[f"U{l}"] = rng.uniform(-a, a, (H, 4 * H))
        b = np.zeros(4 * H)
        b[:H] = input_bias
        b[H : 2 * H] = forget_bias
        weights[f"b{l}"] = b
    a = 1.0 / np.sqrt(H)
    weights["head_w"] = rng.uniform(-a, a, H)
    weights["head_b"] = np.zeros(1)
    return ModelParameters(weights, tuple(label_norm), input_dim, H, n_layers, **meta)


# --------------------------------------------------------------------------
# Forward / backward


def _layer_forward(x, W, U, b):
    """One LSTM layer over a batch; ``x`` is ``(B, T, D)``."""
    B, T, _ = x.shape
    H = U.shape[0]
    zx = (x.reshape(B * T, -1) @ W).reshape(B, T, 4 * H) + b
    h = np.zeros((B, H))
    c = np.zeros((B, H))
    hs = np.empty((B, T, H))
    cache = np.empty((T, 5, B, H))  # i, f, o, g, tanh(c)
    cs = np.empty((T + 1, B, H))
    cs[0] = c
    for t in range(T):
        z = zx[:, t] + h @ U
        i = expit(z[:, :H])
        f = expit(z[:, H : 2 * H])
        o = expit(z[:, 2 * H : 3 * H])
        g = np.tanh(z[:, 3 * H :])
        c = f * c + i * g
        tc = np.tanh(c)
        h = o * tc
        hs[:, t] = h
        cs[t + 1] = c
        cache[t, 0], cache[t, 1], cache[t, 2], cache[t, 3], cache[t, 4] = i, f, o, g, tc
    return hs, (x, cache, cs, hs)


def _layer_backward(dhs, store, W, U, need_dx=True, fault=None):
    x, cache, cs, hs = store
    B, T, _ = x.shape
    H = U.shape[0]
    dz = np.empty((B, T, 4 * H))
    dh_next = np.zeros((B, H))
    dc_next = np.zeros((B, H))
    dU = np.zeros_like(U)
    for t in range(T - 1, -1, -1):
        i, f, o, g, tc = cache[t]
        dh = dhs[:, t] + dh_next
        do = dh * tc
        dc = dc_next + dh * o * (1.0 - tc * tc)
        di = dc * g
        df = dc * cs[t]
        if fault is not None:
            df = fault(df)
        dg = dc * i
        dzt = dz[:, t]
        dzt[:, :H] = di * i * (1.0 - i)
        dzt[:, H : 2 * H] = df * f * (1.0 - f)
        dzt[:, 2 * H : 3 * H] = do * o * (1.0 - o)
        dzt[:, 3 * H :] = dg * (1.0 - g * g)
        dc_next = dc * f
        dh_next = dzt @ U.T
        if t > 0:
            dU += hs[:, t - 1].T @ dzt
    flat = dz.reshape(B * T, 4 * H)
    dW = x.reshape(B * T, -1).T @ flat
    db = flat.sum(axis=0)
    dx = (flat @ W.T).reshape(B, T, -1) if need_dx else None
    return dW, dU, db, dx


def forward_batch(params: ModelParameters, x, keep=False):
    """Normalized predictions for ``x`` of shape ``(B, T, input_dim)``."""
    w = params.weights
    stores = []
    h = x
    for l in range(params.n_layers):
        h, store = _layer_forward(h, w[f"W{l}"], w[f"U{l}"], w[f"b{l}"])
        stores.append(store)
    last = h[:, -1]
    y = last @ w["head_w"] + w["head_b"][0]
    return (y, stores, last) if keep else y


def backward_batch(params: ModelParameters, stores, last, dy, fault=None):
    """Gradients of a loss whose derivative w.r.t. the normalized outputs is ``dy``."""
    w = params.weights
    grads = {"head_w": last.T @ dy, "head_b": np.array([dy.sum()])}
    B, T, _ = stores[-1][0].shape
    dhs = np.zeros((B, T, params.hidden))
    dhs[:, -1] = dy[:, None] * w["head_w"][None, :]
    for l in range(params.n_layers - 1, -1, -1):
        dW, dU, db, dx = _layer_backward(
            dhs, stores[l], w[f"W{l}"], w[f"U{l}"], need_dx=l > 0, fault=fault
        )
        grads[f"W{l}"], grads[f"U{l}"], grads[f"b{l}"] = dW, dU, db
        dhs = dx
    return grads


def _as_input(params, encoded) -> np.ndarray:
    m = encoded.matrix if isinstance(encoded, EncodedCycle) else np.asarray(encoded, dtype=float)
    if m.ndim != 2 or m.shape[0] != params.input_dim:
        raise ModelInputError(
            f"encoded cycle has {m.shape[0] if m.ndim == 2 else '?'} rows, model expects {params.input_dim}"
        )
    if m.shape[1] < 1:
        raise ModelInputError("encoded cycle has no time steps")
    return np.ascontiguousarray(m.T[None, :, :], dtype=np.float64)


def forward(params: ModelParameters, encoded) -> float:
    """Capacity estimate (Ah) for one encoded cycle."""
    y = forward_batch(params, _as_input(params, encoded))
    return float(params.denormalize(y[0]))


def predict(params: ModelParameters, encoded_cycles) -> np.ndarray:
    """Capacity for every cycle, computed one cycle at a time."""
    return np.array([forward(params, e) for e in encoded_cycles])


# --------------------------------------------------------------------------
# Training


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    max_epochs: int = 200
    batch_size: int = 16
    early_stop_patience: int = 20
    validation_fraction: float = 0.1
    seed: int = 0
    hidden: int = 100
    n_layers: int = 2
    grad_clip: float = 5.0
    forget_bias: float = 1.0
    input_bias: float = 0.0

    def validate(self):
        if not (self.learning_rate > 0 and self.max_epochs > 0 and self.batch_size > 0):
            raise TrainingError("learning_rate, max_epochs and batch_size must be positive")
        if self.early_stop_patience <= 0 or self.hidden <= 0 or self.n_layers <= 0:
            raise TrainingError("patience, hidden and n_layers must be positive")
        if not (0 <= self.validation_fraction <= 0.5):
            raise TrainingError("validation_fraction must be in [0, 0.5]")


@dataclass
class TrainHistory:
    train_rmse: list = field(default_factory=list)
    val_rmse: list = field(default_factory=list)
    best_rmse: list = field(default_factory=list)
    best_epoch: int = 0

    @property
    def epochs(self) -> int:
        return len(self.train_rmse)


class _Adam:
    def __init__(self, params, lr, b1=0.9, b2=0.999, eps=1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, b1, b2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params, grads):
        self.t += 1
        c1 = 1 - self.b1**self.t
        c2 = 1 - self.b2**self.t
        for k, g in grads.items():
            m, v = self.m[k], self.v[k]
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            params[k] -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def _stack(encoded_cycles, input_dim):
    shapes = {e.matrix.shape for e in encoded_cycles}
    if len(shapes) != 1:
        raise ModelInputError("all encoded cycles must share one shape")
    (rows, _), = shapes
    if rows != input_dim:
        raise ModelInputError("encoded cycles do not match the model input size")
    return np.stack([e.matrix.T for e in encoded_cycles])


def _rmse(params, x, t_norm):
    if len(x) == 0:
        return float("nan")
    y = forward_batch(params, x)
    return float(np.sqrt(np.mean((y - t_norm) ** 2)))


def train(train_set, config: TrainConfig = TrainConfig(), **meta):
    """Fit a fresh model to ``[(EncodedCycle, capacity), ...]``.

    Targets are min-max normalized with the training capacities.  The last
    ``validation_fraction`` of the cycles (in the given order) are held out
    for early stopping and the best-validation weights are returned.  With no
    validation cycles the best training RMSE is tracked instead.

    Returns ``(params, history)``.
    """
    config.validate()
    if not train_set:
        raise TrainingError("empty training set")
    encs = [e for e, _ in train_set]
    caps = np.array([c for _, c in train_set], dtype=float)
    lo, hi = float(caps.min()), float(caps.max())
    if not lo < hi:
        raise TrainingError("training capacities have zero range; cannot normalize targets")
    input_dim = encs[0].matrix.shape[0]
    x_all = _stack(encs, input_dim)

    n = len(encs)
    n_val = int(np.floor(config.validation_fraction * n))
    if n - n_val < 1:
        raise TrainingError("no cycles left for training after the validation hold-out")
    meta.setdefault("interval", encs[0].interval)
    params = init_parameters(
        input_dim, (lo, hi), config.hidden, config.n_layers, config.seed, config.forget_bias, config.input_bias, **meta
    )
    t_all = params.normalize(caps)
    x_tr, t_tr = x_all[: n - n_val], t_all[: n - n_val]
    x_val, t_val = x_all[n - n_val :], t_all[n - n_val :]

    rng = np.random.default_rng(config.seed + 1)
    opt = _Adam(params.weights, config.learning_rate)
    history = TrainHistory()
    best = (np.inf, params.copy())
    stale = 0
    for epoch in range(1, config.max_epochs + 1):
        order = rng.permutation(len(x_tr))
        sq_sum = 0.0
        for s in range(0, len(order), config.batch_size):
            idx = np.sort(order[s : s + config.batch_size])
            y, stores, last = forward_batch(params, x_tr[idx], keep=True)
            err = y - t_tr[idx]
            rmse = np.sqrt(np.mean(err**2))
            sq_sum += float(np.sum(err**2))
            if not np.isfinite(rmse):
                raise TrainingError(f"loss diverged at epoch {epoch}", epoch=epoch)
            dy = err / (len(idx) * rmse) if rmse > 0 else np.zeros_like(err)
            grads = backward_batch(params, stores, last, dy)
            norm = np.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
            if not np.isfinite(norm):
                raise TrainingError(f"gradient diverged at epoch {epoch}", epoch=epoch)
            if norm > config.grad_clip:
                for g in grads.values():
                    g *= config.grad_clip / norm
            opt.step(params.weights, grads)
        train_rmse = float(np.sqrt(sq_sum / len(x_tr)))
        val_rmse = _rmse(params, x_val, t_val) if n_val else train_rmse
        if not np.isfinite(val_rmse):
            raise TrainingError(f"loss diverged at epoch {epoch}", epoch=epoch)
        history.train_rmse.append(train_rmse)
        history.val_rmse.append(val_rmse if n_val else float("nan"))
        if val_rmse < best[0]:
            best = (val_rmse, params.copy())
            history.best_epoch = epoch
            stale = 0
        else:
            stale += 1
        history.best_rmse.append(best[0])
        if stale >= config.early_stop_patience:
            break
    return best[1], history


# --------------------------------------------------------------------------
# Metrics


def evaluate(params: ModelParameters, test_set, nominal_capacity=None):
    """``(rmse_percent, r_squared)`` over ``[(EncodedCycle, capacity), ...]``.

    RMSE is expressed in percent of the nominal capacity; R^2 is a fraction.
    """
    if not test_set:
        raise ModelInputError("empty test set")
    pred = predict(params, [e for e, _ in test_set])
    truth = np.array([c for _, c in test_set], dtype=float)
    return metrics(pred, truth, nominal_capacity or params.nominal_capacity)


def metrics(pred, truth, nominal_capacity):
    pred = np.asarray(pred, dtype=float)
    truth = np.asarray(truth, dtype=float)
    rmse = 100.0 * np.sqrt(np.mean((pred / nominal_capacity - truth / nominal_capacity) ** 2))
    ss_tot = np.sum((truth - truth.mean()) ** 2)
    if ss_tot == 0:
        raise DegenerateDataError("R^2 undefined: test capacities have zero variance")
    r2 = 1.0 - np.sum((truth - pred) ** 2) / ss_tot
    return float(rmse), float(r2)


# --------------------------------------------------------------------------
# Gradient check


def squared_error_loss(params, x, target_norm, fault=None):
    """``0.5 * sum((y - t)^2)`` on normalized outputs with its gradients."""
    y, stores, last = forward_batch(params, x, keep=True)
    err = y - target_norm
    grads = backward_batch(params, stores, last, err, fault=fault)
    return 0.5 * float(np.sum(err**2)), grads


def gradient_check(params, encoded, capacity, epsilon=1e-5, n_coords=200, seed=0, fault=None, floor=1e-6):
    """Largest relative error between analytic and central-difference gradients.

    Coordinates are drawn at random, spread evenly over the weight blocks.
    The relative error of a coordinate is ``|a - n| / max(|a|, |n|, floor)``.
    Rounding in the two loss evaluations leaves the difference quotient with
    an absolute error of order ``1e-16 * loss / epsilon``, around 1e-11 here,
    so below roughly 1e-7 a relative comparison measures only that noise;
    ``floor`` keeps those coordinates on an absolute scale.
    ``fault`` lets tests corrupt the forget-gate gradient.
    """
    if not (1e-7 <= epsilon <= 1e-3):
        raise ValueError("epsilon must be in [1e-7, 1e-3]")
    x = _as_input(params, encoded)
    t = params.normalize(np.atleast_1d(capacity))
    _, grads = squared_error_loss(params, x, t, fault=fault)
    rng = np.random.default_rng(seed)
    names = list(params.weights)
    per_block = np.full(len(names), n_coords // len(names))
    per_block[: n_coords % len(names)] += 1
    worst = 0.0
    for name, k in zip(names, per_block):
        w = params.weights[name]
        flat = w.reshape(-1)
        for pos in rng.choice(flat.size, size=min(k, flat.size), replace=False):
            old = flat[pos]
            flat[pos] = old + epsilon
            lp, _ = squared_error_loss(params, x, t)
            flat[pos] = old - epsilon
            lm, _ = squared_error_loss(params, x, t)
            flat[pos] = old
            num = (lp - lm) / (2 * epsilon)
            ana = grads[name].reshape(-1)[pos]
            rel = abs(ana - num) / max(abs(ana), abs(num), floor)
            worst = max(worst, rel)
    return worst


# --------------------------------------------------------------------------
# Persistence


def save(params: ModelParameters, path) -> None:
    """Write the model container.

    Layout: 8-byte magic, 1-byte format version, little-endian uint32 header
    length, UTF-8 JSON header, then every weight block as little-endian
    float64 in header order.  The header carries a CRC32 of the payload.
    """
    names = list(params.expected_shapes())
    payload = b"".join(params.weights[n].astype("<f8").tobytes() for n in names)
    header = {
        "arch": {"layers": params.n_layers, "hidden": params.hidden, "input_dim": params.input_dim},
        "label_norm": [float(v) for v in params.label_norm],
        "interval": list(params.interval) if params.interval is not None else None,
        "grid": params.grid,
        "grid_digest": params.grid_digest,
        "nominal_capacity": params.nominal_capacity,
        "blocks": [{"name": n, "shape": list(params.weights[n].shape)} for n in names],
        "payload_crc32": zlib.crc32(payload),
    }
    hbytes = json.dumps(header, sort_keys=True).encode()
    path = Path(path)
    tmp = path.with_name(f".{path.name}.tmp")
    with open(tmp, "wb") as fh:
        fh.write(FORMAT_MAGIC)
        fh.write(struct.pack("<BI", FORMAT_VERSION, len(hbytes)))
        fh.write(hbytes)
        fh.write(payload)
    tmp.replace(path)


def load(path, expected_grid_digest: Optional[str] = None) -> ModelParameters:
    """Read a model written by :func:`save`.

    Emits :class:`GridMismatchWarning` when ``expected_grid_digest`` is given
    and differs from the digest stored in the file.
    """
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise ModelFormatError(f"cannot read model file: {exc}") from None
    if len(raw) < 13 or raw[:8] != FORMAT_MAGIC:
        raise ModelFormatError("not a model file (bad magic)")
    version, hlen = struct.unpack("<BI", raw[8:13])
    if version != FORMAT_VERSION:
        raise ModelFormatError(f"unsupported model format version {version}")
    try:
        header = json.loads(raw[13 : 13 + hlen].decode())
        payload = raw[13 + hlen :]
        if zlib.crc32(payload) != header["payload_crc32"]:
            raise ModelFormatError("model payload checksum mismatch")
        weights = {}
        off = 0
        for block in header["blocks"]:
            shape = tuple(block["shape"])
            n = int(np.prod(shape)) * 8
            if off + n > len(payload):
                raise ModelFormatError("model payload truncated")
            weights[block["name"]] = np.frombuffer(payload[off : off + n], dtype="<f8").reshape(shape).astype(np.float64)
            off += n
        if off != len(payload):
            raise ModelFormatError("trailing bytes after model payload")
        arch = header["arch"]
        params = ModelParameters(
            weights,
            tuple(header["label_norm"]),
            arch["input_dim"],
            arch["hidden"],
            arch["layers"],
            tuple(header["interval"]) if header["interval"] is not None else None,
            header["grid"],
            header["grid_digest"],
            header["nominal_capacity"],
        )
    except ModelFormatError:
        raise
    except (ValueError, KeyError, TypeError, UnicodeDecodeError, ModelInputError) as exc:
        raise ModelFormatError(f"corrupt model file: {exc}") from None
    if expected_grid_digest is not None and expected_grid_digest != params.grid_digest:
        warnings.warn(
            f"model grid {params.grid_digest} differs from encoder grid {expected_grid_digest}",
            GridMismatchWarning,
            stacklevel=2,
        )
    return params
