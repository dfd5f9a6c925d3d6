"""Small VGG-style CNN: forward pass with feature-map capture, SGD training, weights I/O."""

import hashlib
import logging
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from .binio import pack, unpack
from .errors import ConfigurationError, DimensionError, FormatError, TrainingError
from .tensor import (
    conv2d_backward,
    conv2d_batch,
    maxpool2_backward,
    maxpool2_batch,
    softmax,
)

logger = logging.getLogger(__name__)

WEIGHTS_MAGIC = b"AMFCW1"


@dataclass(frozen=True)
class ConvLayer:
    out_channels: int
    kernel: int = 3
    pool_after: bool = False


@dataclass(frozen=True)
class ArchitectureSpec:
    """Single-channel input, conv stack (stride 1, same padding), then fc stack."""

    input_h: int
    conv_layers: tuple
    fc_layers: tuple

    def __post_init__(self):
        convs = tuple(c if isinstance(c, ConvLayer) else ConvLayer(**c) for c in self.conv_layers)
        object.__setattr__(self, "conv_layers", convs)
        object.__setattr__(self, "fc_layers", tuple(int(u) for u in self.fc_layers))
        if not convs or not self.fc_layers:
            raise ConfigurationError("need at least one conv layer and one fc layer")
        if self.input_h < 1:
            raise ConfigurationError("input_h must be positive")
        h = self.input_h
        for i, c in enumerate(convs):
            if c.out_channels < 1 or c.kernel < 1 or c.kernel % 2 == 0:
                raise ConfigurationError(f"conv layer {i}: need positive channels and an odd kernel")
            if c.pool_after:
                if h % 2:
                    raise ConfigurationError(f"conv layer {i}: cannot pool odd map size {h}")
                h //= 2
        if h < 1:
            raise ConfigurationError("spatial size collapses below 1")
        if any(u < 1 for u in self.fc_layers):
            raise ConfigurationError("fc unit counts must be positive")

    @property
    def n_classes(self):
        return self.fc_layers[-1]

    def map_sizes(self):
        """Side length of each conv layer's (pre-pool) output map."""
        sizes, h = [], self.input_h
        for c in self.conv_layers:
            sizes.append(h)
            if c.pool_after:
                h //= 2
        return sizes

    def flat_size(self):
        h = self.input_h
        for c in self.conv_layers:
            if c.pool_after:
                h //= 2
        return self.conv_layers[-1].out_channels * h * h

    def param_shapes(self):
        """Ordered ``(name, shape)`` for every parameter array."""
        shapes, c_in = [], 1
        for i, c in enumerate(self.conv_layers):
            shapes.append((f"conv{i}.weight", (c.out_channels, c_in, c.kernel, c.kernel)))
            shapes.append((f"conv{i}.bias", (c.out_channels,)))
            c_in = c.out_channels
        fan_in = self.flat_size()
        for i, units in enumerate(self.fc_layers):
            shapes.append((f"fc{i}.weight", (fan_in, units)))
            shapes.append((f"fc{i}.bias", (units,)))
            fan_in = units
        return shapes

    def to_dict(self):
        return {
            "input_h": self.input_h,
            "conv_layers": [
                {"out_channels": c.out_channels, "kernel": c.kernel, "pool_after": c.pool_after}
                for c in self.conv_layers
            ],
            "fc_layers": list(self.fc_layers),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(d["input_h"], tuple(ConvLayer(**c) for c in d["conv_layers"]), tuple(d["fc_layers"]))


def mini_vgg(n_classes, input_h=32, channels=(8, 16, 16, 32), pool_after=(1, 3), hidden=(64,)):
    """The desk-scale default: four 3x3 conv layers, pooling after the 2nd and 4th."""
    convs = tuple(ConvLayer(k, 3, i in pool_after) for i, k in enumerate(channels))
    return ArchitectureSpec(input_h, convs, tuple(hidden) + (n_classes,))


@dataclass
class TrainedModel:
    spec: ArchitectureSpec
    params: dict
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        for name, shape in self.spec.param_shapes():
            if name not in self.params:
                raise DimensionError(f"missing parameter {name}")
            arr = self.params[name]
            if arr.shape != shape:
                raise DimensionError(f"{name} has shape {arr.shape}, spec requires {shape}")
            if not np.all(np.isfinite(arr)):
                raise TrainingError(f"{name} contains non-finite values")

    def copy(self):
        return TrainedModel(self.spec, {k: v.copy() for k, v in self.params.items()}, dict(self.meta))

    def digest(self):
        """SHA-256 of the serialized weights; identifies the model in bank provenance."""
        return hashlib.sha256(model_to_bytes(self)).hexdigest()


def init_model(spec, seed=0):
    """Glorot-uniform weights, zero biases."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in spec.param_shapes():
        if name.endswith(".bias"):
            params[name] = np.zeros(shape)
        elif len(shape) == 4:
            receptive = shape[2] * shape[3]
            bound = np.sqrt(6.0 / (shape[1] * receptive + shape[0] * receptive))
            params[name] = rng.uniform(-bound, bound, size=shape)
        else:
            bound = np.sqrt(6.0 / (shape[0] + shape[1]))
            params[name] = rng.uniform(-bound, bound, size=shape)
    return TrainedModel(spec, params, {"epochs_run": 0, "best_val_accuracy": None, "seed": seed})


# -- forward / backward ---------------------------------------------------------

def _as_batch(images, spec):
    x = np.asarray(images, dtype=np.float64)
    if x.ndim == 3:
        x = x[:, None]
    if x.ndim != 4 or x.shape[1] != 1 or x.shape[2:] != (spec.input_h, spec.input_h):
        raise DimensionError(
            f"expected images of shape (N, {spec.input_h}, {spec.input_h}), got {np.shape(images)}"
        )
    return x


def _forward_batch(model, x, capture=False, keep_cache=False, conv_only=False):
    spec, params = model.spec, model.params
    trace, caches = [], []
    for i, layer in enumerate(spec.conv_layers):
        pad = layer.kernel // 2
        z, conv_cache = conv2d_batch(x, params[f"conv{i}.weight"], params[f"conv{i}.bias"], 1, pad)
        a = np.maximum(z, 0.0)
        if capture:
            trace.append(a)
        mask = None
        if layer.pool_after:
            x, mask = maxpool2_batch(a)
        else:
            x = a
        if keep_cache:
            caches.append((conv_cache, z, mask))
    if conv_only:
        return None, trace, caches
    h = x.reshape(len(x), -1)
    n_fc = len(spec.fc_layers)
    for i in range(n_fc):
        pre = h @ params[f"fc{i}.weight"] + params[f"fc{i}.bias"]
        if keep_cache:
            caches.append((h, pre))
        h = np.maximum(pre, 0.0) if i < n_fc - 1 else pre
    return h, trace, caches


def forward(model, image):
    """Classify one ``(H, H)`` (or ``(1, H, H)``) image.

    Returns ``(probs, trace)`` where trace lists, for every conv layer, the
    post-ReLU pre-pool feature maps ``(K_l, H_l, H_l)``.
    """
    x = np.asarray(image, dtype=np.float64)
    if x.ndim == 3 and x.shape[0] == 1:
        x = x[0]
    logits, trace, _ = _forward_batch(model, _as_batch(x[None], model.spec), capture=True)
    return softmax(logits[0]), [t[0] for t in trace]


def predict_one(model, image):
    """Class probabilities for one image, without capturing feature maps."""
    logits, _, _ = _forward_batch(model, _as_batch(np.asarray(image)[None], model.spec))
    return softmax(logits[0])


def predict_proba_batch(model, images, batch_size=256):
    x = _as_batch(images, model.spec)
    out = []
    for start in range(0, len(x), batch_size):
        logits, _, _ = _forward_batch(model, x[start:start + batch_size])
        out.append(softmax(logits, axis=1))
    return np.concatenate(out) if out else np.zeros((0, model.spec.n_classes))


def capture_maps(model, images, batch_size=64):
    """Post-ReLU pre-pool maps of every conv layer for a batch of images.

    Returns a list with one ``(N, K_l, H_l, H_l)`` array per conv layer.
    """
    x = _as_batch(images, model.spec)
    chunks = []
    for start in range(0, len(x), batch_size):
        _, trace, _ = _forward_batch(model, x[start:start + batch_size], capture=True, conv_only=True)
        chunks.append(trace)
    return [np.concatenate([c[i] for c in chunks]) for i in range(len(model.spec.conv_layers))]


def loss_and_grads(model, images, labels):
    """Mean cross-entropy over the batch and its gradient for every parameter."""
    spec, params = model.spec, model.params
    x = _as_batch(images, spec)
    labels = np.asarray(labels, dtype=np.int64)
    logits, _, caches = _forward_batch(model, x, keep_cache=True)
    n = len(x)
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_probs = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    loss = -log_probs[np.arange(n), labels].mean()

    grads = {}
    delta = np.exp(log_probs)
    delta[np.arange(n), labels] -= 1.0
    delta /= n
    n_conv, n_fc = len(spec.conv_layers), len(spec.fc_layers)
    for i in reversed(range(n_fc)):
        h_in, pre = caches[n_conv + i]
        if i < n_fc - 1:
            delta = delta * (pre > 0)
        grads[f"fc{i}.weight"] = h_in.T @ delta
        grads[f"fc{i}.bias"] = delta.sum(axis=0)
        delta = delta @ params[f"fc{i}.weight"].T

    h_last = spec.map_sizes()[-1] // (2 if spec.conv_layers[-1].pool_after else 1)
    delta = delta.reshape(n, spec.conv_layers[-1].out_channels, h_last, h_last)
    for i in reversed(range(n_conv)):
        conv_cache, z, mask = caches[i]
        if mask is not None:
            delta = maxpool2_backward(delta, mask)
        delta = delta * (z > 0)
        delta, dw, db = conv2d_backward(delta, conv_cache)
        grads[f"conv{i}.weight"] = dw
        grads[f"conv{i}.bias"] = db
    return loss, grads


def accuracy(model, ds):
    if len(ds) == 0:
        return float("nan")
    pred = predict_proba_batch(model, ds.images).argmax(axis=1)
    return float(np.mean(pred == ds.labels))


def train(spec, train_ds, val_ds, lr=0.05, batch=20, max_epochs=30, patience=5, seed=0):
    """Minibatch SGD on cross-entropy with early stopping on validation accuracy.

    Returns the snapshot with the best validation accuracy seen.  Training
    stops after ``patience`` epochs without improvement or at ``max_epochs``.
    """
    if len(train_ds) == 0 or len(val_ds) == 0:
        raise ConfigurationError("training and validation sets must be non-empty")
    if train_ds.size != spec.input_h or val_ds.size != spec.input_h:
        raise DimensionError(f"dataset image size does not match input_h={spec.input_h}")
    if train_ds.n_classes > spec.n_classes:
        raise DimensionError(f"{train_ds.n_classes} classes but the network outputs {spec.n_classes}")
    model = init_model(spec, seed)
    rng = np.random.default_rng(seed)
    best = model.copy()
    best_acc = accuracy(model, val_ds)
    stale = 0
    epochs_run = 0
    for epoch in range(1, max_epochs + 1):
        order = rng.permutation(len(train_ds))
        for start in range(0, len(order), batch):
            idx = order[start:start + batch]
            loss, grads = loss_and_grads(model, train_ds.images[idx], train_ds.labels[idx])
            if not np.isfinite(loss):
                raise TrainingError(f"loss became non-finite at epoch {epoch}", epoch)
            for name, g in grads.items():
                model.params[name] -= lr * g
        epochs_run = epoch
        acc = accuracy(model, val_ds)
        logger.debug("epoch %d loss %.4f val_acc %.4f", epoch, loss, acc)
        if acc > best_acc:
            best_acc, best, stale = acc, model.copy(), 0
        else:
            stale += 1
            if stale >= patience:
                break
    best.meta = {"epochs_run": epochs_run, "best_val_accuracy": best_acc, "seed": seed}
    return best


# -- serialization ----------------------------------------------------------------

def model_to_bytes(model):
    manifest, arrays, offset = [], [], 0
    for name, shape in model.spec.param_shapes():
        arr = model.params[name]
        manifest.append({"name": name, "shape": list(shape), "offset": offset, "length": arr.size})
        arrays.append(arr)
        offset += arr.size * 8
    header = {"spec": model.spec.to_dict(), "arrays": manifest, "meta": model.meta}
    return pack(WEIGHTS_MAGIC, header, arrays)


def model_from_bytes(data, what="weights file"):
    header, payload = unpack(data, WEIGHTS_MAGIC, what)
    try:
        spec = ArchitectureSpec.from_dict(header["spec"])
        manifest = header["arrays"]
        meta = header.get("meta", {})
    except (KeyError, TypeError, ConfigurationError) as exc:
        raise FormatError(f"{what}: invalid header ({exc})") from None
    expected = dict(spec.param_shapes())
    if [m.get("name") for m in manifest] != list(expected):
        raise FormatError(f"{what}: array manifest does not match the architecture")
    params, offset = {}, 0
    for m in manifest:
        name, shape = m["name"], tuple(m["shape"])
        if shape != expected[name]:
            raise FormatError(f"{what}: array {name} declares shape {shape}, architecture needs {expected[name]}")
        if m["length"] != int(np.prod(shape)):
            raise FormatError(f"{what}: array {name} declares length {m['length']}, shape implies {int(np.prod(shape))}")
        if m["offset"] != offset:
            raise FormatError(f"{what}: array {name} has offset {m['offset']}, expected {offset}")
        nbytes = m["length"] * 8
        if offset + nbytes > len(payload):
            raise FormatError(f"{what}: payload truncated inside array {name}")
        params[name] = np.frombuffer(payload[offset:offset + nbytes], dtype="<f8").astype(np.float64).reshape(shape)
        offset += nbytes
    if offset != len(payload):
        raise FormatError(f"{what}: {len(payload) - offset} trailing payload bytes")
    try:
        return TrainedModel(spec, params, meta)
    except (DimensionError, TrainingError) as exc:
        raise FormatError(f"{what}: {exc}") from None


def save_model(model, path):
    with open(path, "wb") as fh:
        fh.write(model_to_bytes(model))


def load_model(path):
    with open(path, "rb") as fh:
        return model_from_bytes(fh.read(), str(path))


# -- estimator ----------------------------------------------------------------------

class CNNClassifier(ClassifierMixin, BaseEstimator):
    """Scikit-learn style wrapper around :func:`train`.

    ``X`` is an array of square grayscale images ``(N, H, H)``.  A stratified
    ``validation_fraction`` of the training data drives early stopping.
    """

    def __init__(self, channels=(8, 16, 16, 32), pool_after=(1, 3), hidden=(64,), lr=0.05,
                 batch_size=20, max_epochs=30, patience=5, validation_fraction=0.1,
                 random_state=0):
        self.channels = channels
        self.pool_after = pool_after
        self.hidden = hidden
        self.lr = lr
        self.batch_size = batch_size
        self.max_epochs = max_epochs
        self.patience = patience
        self.validation_fraction = validation_fraction
        self.random_state = random_state

    def fit(self, X, y):
        from .data import Dataset, stratified_holdout

        X = np.asarray(X, dtype=np.float64)
        self.classes_, y_idx = np.unique(y, return_inverse=True)
        ds = Dataset(X, y_idx, [str(c) for c in self.classes_])
        fit_ds, val_ds = stratified_holdout(ds, self.validation_fraction, self.random_state)
        spec = mini_vgg(len(self.classes_), X.shape[1], self.channels, self.pool_after, self.hidden)
        self.model_ = train(spec, fit_ds, val_ds, self.lr, self.batch_size, self.max_epochs,
                            self.patience, self.random_state)
        return self

    def predict_proba(self, X):
        check_is_fitted(self, "model_")
        return predict_proba_batch(self.model_, X)

    def predict(self, X):
        return self.classes_[self.predict_proba(X).argmax(axis=1)]
