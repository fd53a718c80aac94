"""Three-class 1D convolutional profile classifier written directly in numpy.

Architecture: three blocks of (conv k=5 'same' -> ReLU -> max-pool 2) with
16, 32 and 64 channels, global average pooling and a dense layer to three
logits.  Class order is true_airway, parenchyma, obstruction.
"""

from __future__ import annotations

import struct
from dataclasses import asdict, dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .errors import ContractError, DivergenceError, FormatError, UnsupportedVersionError
from .profiles import CLASSES, PROFILE_LENGTH

CHANNELS = (16, 32, 64)
KERNEL = 5
PARAM_NAMES = ("conv1.w", "conv1.b", "conv2.w", "conv2.b", "conv3.w", "conv3.b", "dense.w", "dense.b")

MAGIC = b"RPAR"
FORMAT_VERSION = 1


@dataclass
class TrainingConfig:
    lr: float = 0.01
    momentum: float = 0.9
    batch_size: int = 32
    epochs: int = 50
    seed: int = 0
    validation_fraction: float = 0.1
    length: int = PROFILE_LENGTH


def param_shapes(n_classes=3):
    shapes = {}
    c_in = 1
    for i, c in enumerate(CHANNELS, 1):
        shapes[f"conv{i}.w"] = (c, c_in, KERNEL)
        shapes[f"conv{i}.b"] = (c,)
        c_in = c
    shapes["dense.w"] = (n_classes, c_in)
    shapes["dense.b"] = (n_classes,)
    return shapes


def init_params(rng, dtype=np.float64) -> dict:
    """He-normal weights, zero biases."""
    params = {}
    for name, shape in param_shapes().items():
        if name.endswith(".b"):
            params[name] = np.zeros(shape, dtype=dtype)
        else:
            fan_in = int(np.prod(shape[1:]))
            params[name] = (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)
    return params


def zero_params() -> dict:
    return {name: np.zeros(shape, dtype=np.float32) for name, shape in param_shapes().items()}


# ---- layers -------------------------------------------------------------


def _conv_forward(x, w, b):
    n, c, length = x.shape
    pad = KERNEL // 2
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad)))
    cols = sliding_window_view(xp, KERNEL, axis=2).transpose(0, 2, 1, 3).reshape(n * length, c * KERNEL)
    out = cols @ w.reshape(w.shape[0], -1).T + b
    return out.reshape(n, length, -1).transpose(0, 2, 1), cols


def _conv_backward(dout, cols, x_shape, w):
    n, c, length = x_shape
    o = w.shape[0]
    d2 = dout.transpose(0, 2, 1).reshape(n * length, o)
    dw = (d2.T @ cols).reshape(w.shape)
    db = d2.sum(axis=0)
    dcols = (d2 @ w.reshape(o, -1)).reshape(n, length, c, KERNEL)
    pad = KERNEL // 2
    dxp = np.zeros((n, c, length + 2 * pad))
    for k in range(KERNEL):
        dxp[:, :, k : k + length] += dcols[:, :, :, k].transpose(0, 2, 1)
    return dxp[:, :, pad : pad + length], dw, db


def _pool_forward(x):
    n, c, length = x.shape
    pairs = x.reshape(n, c, length // 2, 2)
    idx = pairs.argmax(axis=3)  # first of equal values
    out = np.take_along_axis(pairs, idx[..., None], axis=3)[..., 0]
    return out, idx


def _pool_backward(dout, idx):
    n, c, half = dout.shape
    dx = np.zeros((n, c, half, 2))
    np.put_along_axis(dx, idx[..., None], dout[..., None], axis=3)
    return dx.reshape(n, c, 2 * half)


def forward(params, X, keep=False):
    """Logits of shape (n, 3) for profiles X of shape (n, L)."""
    h = np.asarray(X, dtype=np.float64)[:, None, :]
    cache = []
    for i in range(1, 4):
        w = np.asarray(params[f"conv{i}.w"], dtype=np.float64)
        b = np.asarray(params[f"conv{i}.b"], dtype=np.float64)
        z, cols = _conv_forward(h, w, b)
        a = np.maximum(z, 0.0)
        p, idx = _pool_forward(a)
        if keep:
            cache.append((h.shape, cols, w, z > 0, idx))
        h = p
    g = h.mean(axis=2)
    logits = g @ np.asarray(params["dense.w"], dtype=np.float64).T + np.asarray(params["dense.b"], dtype=np.float64)
    if keep:
        return logits, (cache, h.shape, g)
    return logits


def softmax(logits):
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def cross_entropy(logits, y):
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    return float(-logp[np.arange(len(y)), y].mean())


def loss_and_grads(params, X, y):
    """Mean cross-entropy and its gradient with respect to every parameter."""
    y = np.asarray(y, dtype=np.int64)
    logits, (cache, pooled_shape, g) = forward(params, X, keep=True)
    loss = cross_entropy(logits, y)
    n = len(y)
    dlogits = softmax(logits)
    dlogits[np.arange(n), y] -= 1.0
    dlogits /= n
    grads = {
        "dense.w": dlogits.T @ g,
        "dense.b": dlogits.sum(axis=0),
    }
    dg = dlogits @ np.asarray(params["dense.w"], dtype=np.float64)
    dh = np.repeat(dg[:, :, None], pooled_shape[2], axis=2) / pooled_shape[2]
    for i in range(3, 0, -1):
        x_shape, cols, w, active, idx = cache[i - 1]
        da = _pool_backward(dh, idx)
        dz = da * active
        dh, grads[f"conv{i}.w"], grads[f"conv{i}.b"] = _conv_backward(dz, cols, x_shape, w)
    return loss, grads


def relative_error(a, b, floor=1e-6):
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def _pattern(params, X) -> bytes:
    """ReLU on/off states and pooling choices; the network is smooth while these hold."""
    _, (cache, _, _) = forward(params, X, keep=True)
    return b"".join(active.tobytes() + idx.tobytes() for _, _, _, active, idx in cache)


def numerical_gradient(params, X, y, name, index, eps=1e-4, with_smooth=False):
    """Central finite difference of the loss along one parameter coordinate.

    With ``with_smooth`` also report whether the activation pattern stayed
    fixed over [-eps, +eps], i.e. whether the difference quotient is valid.
    """
    p = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
    orig = p[name][index]
    base = _pattern(p, X) if with_smooth else None
    p[name][index] = orig + eps
    up = cross_entropy(forward(p, X), y)
    smooth = not with_smooth or _pattern(p, X) == base
    p[name][index] = orig - eps
    down = cross_entropy(forward(p, X), y)
    if with_smooth:
        smooth = smooth and _pattern(p, X) == base
    num = (up - down) / (2 * eps)
    return (num, smooth) if with_smooth else num


@dataclass(frozen=True)
class GradientCheck:
    max_rel_error: float
    checked: int
    skipped: int  # coordinates whose eps-interval crosses a ReLU or pooling switch


def gradient_check(params, X, y, eps=1e-4, per_param=None, rng=None) -> GradientCheck:
    """Compare analytic and central finite-difference gradients.

    With ``per_param`` set, that many random coordinates are checked per
    parameter array instead of all of them.  Coordinates whose perturbation
    flips a ReLU or a max-pool choice are not differentiable there and are
    counted as skipped.
    """
    p64 = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
    _, grads = loss_and_grads(p64, X, y)
    worst, checked, skipped = 0.0, 0, 0
    for name in PARAM_NAMES:
        size = p64[name].size
        if per_param is None or per_param >= size:
            flat = np.arange(size)
        else:
            flat = (rng or np.random.default_rng(0)).choice(size, per_param, replace=False)
        for f in flat:
            index = np.unravel_index(int(f), p64[name].shape)
            num, smooth = numerical_gradient(p64, X, y, name, index, eps, with_smooth=True)
            if not smooth:
                skipped += 1
                continue
            checked += 1
            worst = max(worst, float(relative_error(grads[name][index], num)))
    return GradientCheck(worst, checked, skipped)


# ---- model --------------------------------------------------------------


@dataclass(eq=False)
class ClassifierModel:
    params: dict
    hyper: TrainingConfig = field(default_factory=TrainingConfig)
    loss_curve: list = field(default_factory=list)
    validation_loss_curve: list = field(default_factory=list)

    def logits(self, X):
        return forward(self.params, np.atleast_2d(X))

    def predict_proba(self, X):
        return softmax(self.logits(X))

    def __eq__(self, other):
        if not isinstance(other, ClassifierModel):
            return NotImplemented
        if asdict(self.hyper) != asdict(other.hyper) or set(self.params) != set(other.params):
            return False
        return all(
            self.params[k].dtype == other.params[k].dtype
            and self.params[k].shape == other.params[k].shape
            and self.params[k].tobytes() == other.params[k].tobytes()
            for k in self.params
        )


def train(X, y, hyper: TrainingConfig | None = None, callback=None) -> ClassifierModel:
    """Mini-batch SGD with momentum on mean cross-entropy.

    Computation is float64; the returned weights are rounded to float32 so
    that they survive serialization exactly.  ``callback(epoch, params)`` is
    invoked after each epoch when given.
    """
    hyper = hyper or TrainingConfig()
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    if X.ndim != 2 or X.shape[1] % 8:
        raise ContractError(f"profiles must be (n, L) with L divisible by 8, got {X.shape}")
    if len(np.unique(y)) < 3 or y.min() < 0 or y.max() > 2:
        raise ContractError("training needs at least one sample of each of the three classes")
    rng = np.random.default_rng(hyper.seed)
    params = init_params(rng)
    velocity = {k: np.zeros_like(v) for k, v in params.items()}

    order = rng.permutation(len(y))
    n_val = int(round(hyper.validation_fraction * len(y))) if len(y) >= 10 else 0
    val_idx, tr_idx = order[:n_val], order[n_val:]
    losses, val_losses = [], []
    for epoch in range(hyper.epochs):
        perm = tr_idx[rng.permutation(len(tr_idx))]
        total = 0.0
        for start in range(0, len(perm), hyper.batch_size):
            batch = perm[start : start + hyper.batch_size]
            loss, grads = loss_and_grads(params, X[batch], y[batch])
            if not np.isfinite(loss):
                raise DivergenceError(epoch, loss)
            total += loss * len(batch)
            for k in params:
                velocity[k] = hyper.momentum * velocity[k] - hyper.lr * grads[k]
                params[k] += velocity[k]
        losses.append(total / len(perm))
        if not np.isfinite(losses[-1]) or not all(np.isfinite(v).all() for v in params.values()):
            raise DivergenceError(epoch, losses[-1])
        if n_val:
            val_losses.append(cross_entropy(forward(params, X[val_idx]), y[val_idx]))
        if callback is not None:
            callback(epoch, params)
    final = {k: v.astype(np.float32) for k, v in params.items()}
    if not all(np.isfinite(v).all() for v in final.values()):
        raise DivergenceError(hyper.epochs - 1, losses[-1] if losses else float("nan"))
    return ClassifierModel(final, hyper, losses, val_losses)


def train_steps(X, y, steps, hyper: TrainingConfig | None = None):
    """Full-batch momentum SGD for ``steps`` updates; returns (params, losses)."""
    hyper = hyper or TrainingConfig()
    rng = np.random.default_rng(hyper.seed)
    params = init_params(rng)
    velocity = {k: np.zeros_like(v) for k, v in params.items()}
    losses = []
    for step in range(steps):
        loss, grads = loss_and_grads(params, X, y)
        if not np.isfinite(loss):
            raise DivergenceError(step, loss)
        losses.append(loss)
        for k in params:
            velocity[k] = hyper.momentum * velocity[k] - hyper.lr * grads[k]
            params[k] += velocity[k]
    return params, losses


def classify(model, profile) -> dict:
    """Label and class probabilities for one profile; ties go to the earlier class."""
    samples = getattr(profile, "samples", profile)
    samples = np.asarray(samples, dtype=np.float64)
    length = model.hyper.length if isinstance(model, ClassifierModel) else getattr(model, "n_features_in_", PROFILE_LENGTH)
    if samples.ndim != 1 or len(samples) != length:
        raise ContractError(f"profile length {samples.shape} does not match model input {length}")
    proba = model.predict_proba(samples[None, :])[0]
    return {"label": CLASSES[int(np.argmax(proba))], "probabilities": proba}


# ---- serialization ------------------------------------------------------

_HYPER = struct.Struct("<ddIIQdI")


def save_model(model: ClassifierModel, path) -> None:
    h = model.hyper
    out = [MAGIC, struct.pack("<HH", FORMAT_VERSION, 0)]
    out.append(_HYPER.pack(h.lr, h.momentum, h.batch_size, h.epochs, h.seed, h.validation_fraction, h.length))
    out.append(struct.pack("<I", len(PARAM_NAMES)))
    for name in PARAM_NAMES:
        arr = np.asarray(model.params[name], dtype="<f4")
        key = name.encode("ascii")
        out.append(struct.pack("<B", len(key)) + key)
        out.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(arr.tobytes(order="C"))
    with open(path, "wb") as f:
        f.write(b"".join(out))


class _Reader:
    def __init__(self, raw):
        self.raw = raw
        self.pos = 0

    def take(self, n, what):
        if self.pos + n > len(self.raw):
            raise FormatError(f"model file truncated while reading {what}")
        chunk = self.raw[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt, what):
        s = struct.Struct(fmt)
        return s.unpack(self.take(s.size, what))


def load_model(path) -> ClassifierModel:
    with open(path, "rb") as f:
        r = _Reader(f.read())
    if r.take(4, "magic") != MAGIC:
        raise FormatError("bad magic: not an RPAR model file")
    version, _ = r.unpack("<HH", "version")
    if version != FORMAT_VERSION:
        raise UnsupportedVersionError(f"unsupported model format version {version} (expected {FORMAT_VERSION})")
    lr, mom, batch, epochs, seed, vf, length = r.unpack(_HYPER.format, "hyperparameters")
    hyper = TrainingConfig(lr, mom, batch, epochs, seed, vf, length)
    (count,) = r.unpack("<I", "layer count")
    expected = param_shapes()
    params = {}
    for _ in range(count):
        (klen,) = r.unpack("<B", "layer name")
        name = r.take(klen, "layer name").decode("ascii", errors="replace")
        (ndim,) = r.unpack("<B", f"{name} rank")
        shape = r.unpack(f"<{ndim}I", f"{name} shape")
        n = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(r.take(4 * n, f"{name} weights"), dtype="<f4").reshape(shape)
        params[name] = arr.astype(np.float32)
    if set(params) != set(expected) or any(params[k].shape != expected[k] for k in expected):
        raise FormatError("model layers do not match the expected architecture")
    if r.pos != len(r.raw):
        raise FormatError(f"{len(r.raw) - r.pos} trailing bytes after model weights")
    return ClassifierModel(params, hyper)


# ---- estimator ----------------------------------------------------------


class ProfileClassifier(ClassifierMixin, BaseEstimator):
    """Estimator wrapper: ``fit(X, y)`` on (n, L) profiles, labels as names or 0/1/2."""

    def __init__(self, lr=0.01, momentum=0.9, batch_size=32, epochs=50, seed=0, validation_fraction=0.1):
        self.lr = lr
        self.momentum = momentum
        self.batch_size = batch_size
        self.epochs = epochs
        self.seed = seed
        self.validation_fraction = validation_fraction

    def _encode(self, y):
        y = np.asarray(y)
        if y.dtype.kind in "USO":
            lookup = {c: i for i, c in enumerate(CLASSES)}
            unknown = set(y.tolist()) - set(lookup)
            if unknown:
                raise ContractError(f"unknown labels {sorted(unknown)}")
            return np.array([lookup[v] for v in y.tolist()], dtype=np.int64), np.array(CLASSES)
        return y.astype(np.int64), np.arange(3)

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=np.float64, y_numeric=False)
        codes, self.classes_ = self._encode(y)
        hyper = TrainingConfig(
            lr=self.lr,
            momentum=self.momentum,
            batch_size=self.batch_size,
            epochs=self.epochs,
            seed=self.seed,
            validation_fraction=self.validation_fraction,
            length=X.shape[1],
        )
        self.model_ = train(X, codes, hyper)
        self.n_features_in_ = X.shape[1]
        self.loss_curve_ = self.model_.loss_curve
        self.validation_loss_curve_ = self.model_.validation_loss_curve
        return self

    @classmethod
    def from_model(cls, model: ClassifierModel, label_names=True):
        h = model.hyper
        est = cls(h.lr, h.momentum, h.batch_size, h.epochs, h.seed, h.validation_fraction)
        est.model_ = model
        est.classes_ = np.array(CLASSES) if label_names else np.arange(3)
        est.n_features_in_ = h.length
        est.loss_curve_ = model.loss_curve
        est.validation_loss_curve_ = model.validation_loss_curve
        return est

    def predict_proba(self, X):
        check_is_fitted(self, "model_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise ContractError(f"expected {self.n_features_in_} samples per profile, got {X.shape[1]}")
        return self.model_.predict_proba(X)

    def predict(self, X):
        check_is_fitted(self, "model_")
        return self.classes_[np.argmax(self.predict_proba(X), axis=1)]
