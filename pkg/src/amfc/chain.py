"""Projection chain through a layer-space bank, and the AMFC classifier built on it."""

import os
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from .binio import pack, unpack
from .errors import ConfigurationError, DimensionError, FormatError
from .featurespace import LayerSpaceBank, bank_from_bytes, bank_to_bytes, build_bank, load_bank
from .heads import make_head

MODEL_MAGIC = b"AMFCM1"


@dataclass(frozen=True)
class LowDimSample:
    z: np.ndarray
    label: int = None


def project_chain(bank, image):
    """Project one image through every layer space of ``bank``.

    The image is flattened row-major; each layer subtracts its mean and
    multiplies by the transposed basis.  Reshaping an intermediate vector to
    sqrt(p) x sqrt(p) and flattening it again is the identity, so the chain
    is a plain sequence of affine maps.
    """
    x = np.asarray(image, dtype=np.float64).ravel()
    if x.size != bank.spaces[0].n:
        raise ConfigurationError(f"image has {x.size} pixels, bank expects {bank.spaces[0].n}")
    z = x
    for space in bank.spaces:
        z = (z - space.mean) @ space.basis.T
    return LowDimSample(z)


def project_batch(bank, images):
    """``(N, H, H)`` images -> ``(N, p_L)`` projections."""
    x = np.asarray(images, dtype=np.float64)
    x = x.reshape(len(x), -1)
    if x.shape[1] != bank.spaces[0].n:
        raise ConfigurationError(f"images have {x.shape[1]} pixels, bank expects {bank.spaces[0].n}")
    z = x
    for space in bank.spaces:
        z = (z - space.mean) @ space.basis.T
    return z


def project_dataset(bank, ds):
    if len(ds) == 0:
        return []
    z = project_batch(bank, ds.images)
    return [LowDimSample(row, int(lab)) for row, lab in zip(z, ds.labels)]


def _stack(samples):
    z = np.array([s.z for s in samples], dtype=np.float64)
    y = np.array([s.label for s in samples], dtype=np.int64)
    return z, y


def fit_head(kind, train, val=None, hyper=None, n_classes=None):
    """Fit a classifier head on projected samples (lists of LowDimSample)."""
    hyper = dict(hyper or {})
    hyper.setdefault("n_classes", n_classes)
    head = make_head(kind, **hyper)
    z, y = _stack(train)
    if val:
        zv, yv = _stack(val)
        head.fit(z, y, zv, yv)
    else:
        head.fit(z, y)
    return head


@dataclass
class AmfcModel:
    bank: LayerSpaceBank
    head: object
    input_h: int

    def __post_init__(self):
        if self.head.n_features_in_ != self.bank.output_dim:
            raise DimensionError(
                f"head expects {self.head.n_features_in_} inputs, bank produces {self.bank.output_dim}"
            )


def classify(model, image):
    """Returns ``(class index, per-class scores)`` for one preprocessed image."""
    img = np.asarray(image, dtype=np.float64)
    if img.shape[-2:] != (model.input_h, model.input_h):
        raise DimensionError(f"image shape {img.shape} does not match input size {model.input_h}")
    z = project_chain(model.bank, img).z
    scores = model.head.scores(z[None])[0]
    return int(np.argmax(scores)), scores


# -- AMFCM1 ------------------------------------------------------------------------------

def amfc_model_to_bytes(model, bank_path=None):
    """Serialize head arrays; the bank is stored inline unless ``bank_path`` is given."""
    head = model.head
    arrays = head.get_arrays()
    manifest = [{"name": k, "shape": list(v.shape)} for k, v in arrays.items()]
    bank_bytes = b"" if bank_path else bank_to_bytes(model.bank)
    params = {k: (list(v) if isinstance(v, tuple) else v) for k, v in head.get_params().items()}
    header = {
        "head": head.kind,
        "hyper": params,
        "n_classes": len(head.classes_),
        "n_features": head.n_features_in_,
        "input_h": model.input_h,
        "arrays": manifest,
        "bank": {"path": os.fspath(bank_path)} if bank_path else {"inline_bytes": len(bank_bytes)},
    }
    container = pack(MODEL_MAGIC, header, list(arrays.values()))
    # inline bank goes after the head arrays
    return container + bank_bytes


def amfc_model_from_bytes(data, bank=None, what="model file", base_dir="."):
    header, payload = unpack(data, MODEL_MAGIC, what)
    try:
        kind = header["head"]
        hyper = dict(header["hyper"])
        n_classes = int(header["n_classes"])
        n_features = int(header["n_features"])
        input_h = int(header["input_h"])
        manifest = header["arrays"]
        bank_ref = header["bank"]
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"{what}: invalid header ({exc})") from None
    arrays, offset = {}, 0
    for m in manifest:
        shape = tuple(m["shape"])
        nbytes = int(np.prod(shape)) * 8
        if offset + nbytes > len(payload):
            raise FormatError(f"{what}: payload truncated inside array {m['name']}")
        arrays[m["name"]] = np.frombuffer(payload[offset:offset + nbytes], dtype="<f8").astype(np.float64).reshape(shape)
        offset += nbytes
    rest = payload[offset:]
    if "inline_bytes" in bank_ref:
        if len(rest) != bank_ref["inline_bytes"]:
            raise FormatError(f"{what}: inline bank has {len(rest)} bytes, header declares {bank_ref['inline_bytes']}")
        if bank is None:
            bank = bank_from_bytes(bytes(rest), f"{what} (inline bank)")
    else:
        if len(rest):
            raise FormatError(f"{what}: {len(rest)} trailing bytes")
        if bank is None:
            path = bank_ref["path"]
            if not os.path.isabs(path):
                path = os.path.join(base_dir, path)
            bank = load_bank(path)
    try:
        head = make_head(kind, **hyper)
        head.set_arrays(arrays, n_classes, n_features)
        return AmfcModel(bank, head, input_h)
    except (ConfigurationError, DimensionError, KeyError, ValueError) as exc:
        raise FormatError(f"{what}: {exc}") from None


def save_amfc_model(model, path, bank_path=None):
    with open(path, "wb") as fh:
        fh.write(amfc_model_to_bytes(model, bank_path))


def load_amfc_model(path, bank=None):
    with open(path, "rb") as fh:
        data = fh.read()
    return amfc_model_from_bytes(data, bank, str(path), os.path.dirname(os.path.abspath(path)))


# -- estimator ---------------------------------------------------------------------------

class AmfcClassifier(ClassifierMixin, BaseEstimator):
    """CNN-free classifier: projection chain plus a lightweight head.

    ``cnn`` is the trained network whose feature maps define the layer
    spaces (a :class:`~amfc.cnn.TrainedModel` or fitted
    :class:`~amfc.cnn.CNNClassifier`).  Only the bank and head are used at
    prediction time.
    """

    def __init__(self, cnn=None, n_samples=200, p_schedule=(196, 144, 100, 64),
                 selection="first_ranked", head="mlp", head_params=None,
                 validation_fraction=0.1, random_state=0):
        self.cnn = cnn
        self.n_samples = n_samples
        self.p_schedule = p_schedule
        self.selection = selection
        self.head = head
        self.head_params = head_params
        self.validation_fraction = validation_fraction
        self.random_state = random_state

    def fit(self, X, y):
        from .data import Dataset, stratified_holdout

        model = getattr(self.cnn, "model_", self.cnn)
        if model is None:
            raise ConfigurationError("AmfcClassifier needs a trained CNN")
        X = np.asarray(X, dtype=np.float64)
        self.classes_, y_idx = np.unique(y, return_inverse=True)
        bank = build_bank(model, X, min(self.n_samples, len(X)), list(self.p_schedule),
                          self.selection, self.random_state)
        ds = Dataset(X, y_idx, [str(c) for c in self.classes_])
        fit_ds, val_ds = stratified_holdout(ds, self.validation_fraction, self.random_state)
        hyper = dict(self.head_params or {})
        if self.head == "mlp":
            hyper.setdefault("random_state", self.random_state)
        head = fit_head(self.head, project_dataset(bank, fit_ds), project_dataset(bank, val_ds),
                        hyper, n_classes=len(self.classes_))
        self.model_ = AmfcModel(bank, head, X.shape[1])
        return self

    def transform(self, X):
        check_is_fitted(self, "model_")
        return project_batch(self.model_.bank, X)

    def predict_proba(self, X):
        check_is_fitted(self, "model_")
        return self.model_.head.predict_proba(project_batch(self.model_.bank, X))

    def predict(self, X):
        return self.classes_[self.predict_proba(X).argmax(axis=1)]
