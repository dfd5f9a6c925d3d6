"""Per-layer PCA feature spaces built from captured CNN feature maps.

For every conv layer the maps of M training images are flattened into the
rows of a matrix X (V = M * K_l rows).  The layer space keeps the row mean
and a ranked selection of covariance eigenvectors.  From the second layer
on, maps are first resized to sqrt(p) x sqrt(p), where p is the previous
layer's selected dimension, so that the spaces chain.
"""

import math
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .binio import pack, unpack
from .cnn import capture_maps
from .errors import ConfigurationError, DimensionError, FormatError
from .tensor import resize_bilinear

BANK_MAGIC = b"AMFCB1"
SELECTION_MODES = ("first_ranked", "last_ranked", "random")
EPS_VALID = 1e-12


def isqrt_exact(n):
    """Integer square root of ``n`` or None when ``n`` is not a perfect square."""
    r = math.isqrt(int(n))
    return r if r * r == n else None


@dataclass(frozen=True)
class FeatureMatrix:
    layer: int
    data: np.ndarray

    @property
    def shape(self):
        return self.data.shape


@dataclass(frozen=True)
class EigRanking:
    """Indices of valid eigenpairs by descending eigenvalue, plus the validity mask."""

    order: np.ndarray
    valid: np.ndarray


@dataclass(frozen=True)
class Eigensystem:
    values: np.ndarray
    vectors: np.ndarray  # one eigenvector per row
    ranking: EigRanking

    @property
    def n_valid(self):
        return len(self.ranking.order)


@dataclass(frozen=True)
class LayerSpace:
    mean: np.ndarray
    basis: np.ndarray  # (p, n), orthonormal rows
    eigenvalues: np.ndarray

    @property
    def n(self):
        return self.basis.shape[1]

    @property
    def p(self):
        return self.basis.shape[0]

    @property
    def h_in(self):
        return isqrt_exact(self.n)


@dataclass
class LayerSpaceBank:
    spaces: list
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        for i in range(1, len(self.spaces)):
            if self.spaces[i].n != self.spaces[i - 1].p:
                raise DimensionError(
                    f"layer {i + 1} expects n={self.spaces[i].n} but layer {i} provides p={self.spaces[i - 1].p}"
                )

    def __len__(self):
        return len(self.spaces)

    @property
    def input_h(self):
        return self.spaces[0].h_in

    @property
    def output_dim(self):
        return self.spaces[-1].p

    def truncated(self, layers):
        """A bank holding only the first ``layers`` spaces."""
        return LayerSpaceBank(self.spaces[:layers], dict(self.provenance))


# -- phase 3 -------------------------------------------------------------------------

def maps_to_matrix(maps, layer, prev_p=None):
    """Stack ``(M, K, H, H)`` maps into a V x n matrix, resizing for layers >= 2.

    Rows are sample-major, kernel-minor.
    """
    maps = np.asarray(maps, dtype=np.float64)
    if maps.ndim != 4:
        raise DimensionError(f"maps must be (M, K, H, H), got {maps.shape}")
    if layer >= 2:
        if prev_p is None:
            raise ConfigurationError(f"layer {layer} needs the previous layer's p")
        side = isqrt_exact(prev_p)
        if side is None:
            raise ConfigurationError(f"previous p={prev_p} is not a perfect square")
        maps = resize_bilinear(maps, side, side)
    m, k = maps.shape[:2]
    return FeatureMatrix(layer, maps.reshape(m * k, -1))


def collect_feature_matrix(model, samples, layer, prev_p=None):
    """Capture layer ``layer`` (1-based) maps for M samples and stack them."""
    if not 1 <= layer <= len(model.spec.conv_layers):
        raise ConfigurationError(f"layer {layer} outside 1..{len(model.spec.conv_layers)}")
    maps = capture_maps(model, samples)[layer - 1]
    return maps_to_matrix(maps, layer, prev_p)


def mean_vector(X):
    data = X.data if isinstance(X, FeatureMatrix) else np.asarray(X, dtype=np.float64)
    if len(data) < 1:
        raise DimensionError("mean of an empty matrix")
    return data.sum(axis=0) / len(data)


def _fix_signs(vectors):
    """Make the largest-magnitude component of each row positive."""
    idx = np.abs(vectors).argmax(axis=1)
    signs = np.sign(vectors[np.arange(len(vectors)), idx])
    signs[signs == 0] = 1.0
    return vectors * signs[:, None]


def eigendecompose(X, method="auto"):
    """Eigenpairs of the 1/V covariance of X's rows.

    With fewer rows than columns (or ``method="snapshot"``) the V x V Gram
    matrix is diagonalized and its eigenvectors are mapped back through the
    centred data.  At most ``min(V - 1, n)`` pairs with eigenvalue above
    ``EPS_VALID * max`` are ranked as valid (the threshold never drops below
    ``EPS_VALID`` times the mean squared row norm).
    """
    data = X.data if isinstance(X, FeatureMatrix) else np.asarray(X, dtype=np.float64)
    v, n = data.shape
    if v < 2:
        raise DimensionError("eigendecomposition needs at least 2 rows")
    centred = data - mean_vector(data)
    if method == "auto":
        method = "snapshot" if v < n else "direct"
    if method == "snapshot":
        gram = centred @ centred.T / v
        values, u = np.linalg.eigh((gram + gram.T) / 2)
        vectors = (centred.T @ u).T
        norms = np.linalg.norm(vectors, axis=1)
        norms[norms == 0] = 1.0
        vectors = vectors / norms[:, None]
    elif method == "direct":
        cov = centred.T @ centred / v
        values, w = np.linalg.eigh((cov + cov.T) / 2)
        vectors = w.T
    else:
        raise ConfigurationError(f"unknown method {method!r}")

    top = values.max() if len(values) else 0.0
    # the energy floor discards roundoff left over from centring near-identical rows
    energy = float(np.einsum("ij,ij->", data, data)) / v
    valid = np.isfinite(values) & (values > EPS_VALID * max(top, energy))
    order = np.flatnonzero(valid)
    order = order[np.argsort(-values[order], kind="stable")][: min(v - 1, n)]
    valid = np.zeros(len(values), dtype=bool)
    valid[order] = True
    return Eigensystem(values, _fix_signs(vectors), EigRanking(order, valid))


def select_basis(eig, p, mode="first_ranked", seed=0, mean=None, feeds_successor=False):
    """Choose ``p`` eigenvectors from a ranked eigensystem.

    ``first_ranked`` takes the largest eigenvalues in descending order,
    ``last_ranked`` the smallest valid ones in ascending order and ``random``
    a seeded draw without replacement, kept in draw order.
    """
    if mode not in SELECTION_MODES:
        raise ConfigurationError(f"unknown selection mode {mode!r}")
    if p < 1 or p > eig.n_valid:
        raise ConfigurationError(f"p={p} but only {eig.n_valid} valid eigenpairs are available")
    if feeds_successor and isqrt_exact(p) is None:
        raise ConfigurationError(f"p={p} must be a perfect square to feed the next layer")
    order = eig.ranking.order
    if mode == "first_ranked":
        chosen = order[:p]
    elif mode == "last_ranked":
        chosen = order[::-1][:p]
    else:
        chosen = np.random.default_rng(seed).choice(order, size=p, replace=False)
    if mean is None:
        mean = np.zeros(eig.vectors.shape[1])
    return LayerSpace(np.asarray(mean, dtype=np.float64), eig.vectors[chosen].copy(), eig.values[chosen].copy())


def build_bank(model, train_samples, m, p_schedule, mode="first_ranked", seed=0, scenario=None,
               spectra=None):
    """Build the chained layer spaces for the first ``len(p_schedule)`` conv layers.

    ``m`` samples are drawn (seeded, without replacement) from
    ``train_samples``.  Interior schedule entries must be perfect squares.
    If ``spectra`` is a list, each layer's valid eigenvalues (ranked) are
    appended to it.
    """
    p_schedule = [int(p) for p in p_schedule]
    n_layers = len(model.spec.conv_layers)
    if not 1 <= len(p_schedule) <= n_layers:
        raise ConfigurationError(f"p_schedule needs 1..{n_layers} entries, got {len(p_schedule)}")
    bad = [p for p in p_schedule[:-1] if isqrt_exact(p) is None]
    if bad:
        raise ConfigurationError(f"interior p_schedule entries must be perfect squares: {bad}")
    samples = np.asarray(train_samples, dtype=np.float64)
    if not 1 <= m <= len(samples):
        raise ConfigurationError(f"M={m} but {len(samples)} training samples are available")
    rng = np.random.default_rng(seed)
    chosen = np.sort(rng.choice(len(samples), size=m, replace=False))
    maps = capture_maps(model, samples[chosen])

    spaces, prev_p = [], None
    for l, p in enumerate(p_schedule, start=1):
        X = maps_to_matrix(maps[l - 1], l, prev_p)
        maps[l - 1] = None
        mean = mean_vector(X)
        eig = eigendecompose(X)
        if spectra is not None:
            spectra.append(eig.values[eig.ranking.order].copy())
        if p > eig.n_valid:
            raise ConfigurationError(
                f"layer {l}: p={p} exceeds the {eig.n_valid} valid eigenpairs (V={X.shape[0]}, n={X.shape[1]})"
            )
        spaces.append(select_basis(eig, p, mode, seed=[seed, l], mean=mean,
                                   feeds_successor=l < len(p_schedule)))
        prev_p = p
    provenance = {"M": m, "seed": seed, "mode": mode, "scenario": scenario, "model_hash": model.digest()}
    return LayerSpaceBank(spaces, provenance)


# -- serialization ----------------------------------------------------------------------

def bank_to_bytes(bank):
    header = {
        "layer_count": len(bank.spaces),
        "layers": [{"n": s.n, "p": s.p, "H_in": s.h_in} for s in bank.spaces],
        "provenance": bank.provenance,
    }
    arrays = []
    for s in bank.spaces:
        arrays += [s.mean, s.basis, s.eigenvalues]
    return pack(BANK_MAGIC, header, arrays)


def bank_from_bytes(data, what="bank file"):
    header, payload = unpack(data, BANK_MAGIC, what)
    try:
        layers = header["layers"]
        count = header["layer_count"]
        provenance = header.get("provenance", {})
        dims = [(int(d["n"]), int(d["p"])) for d in layers]
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"{what}: invalid header ({exc})") from None
    if count != len(layers):
        raise FormatError(f"{what}: header declares {count} layers but describes {len(layers)}")
    need = sum(n + p * n + p for n, p in dims) * 8
    if len(payload) != need:
        raise FormatError(f"{what}: payload has {len(payload)} bytes, header implies {need}")
    values = np.frombuffer(payload, dtype="<f8").astype(np.float64)
    spaces, pos = [], 0
    for n, p in dims:
        mean = values[pos:pos + n]
        basis = values[pos + n:pos + n + p * n].reshape(p, n)
        eigenvalues = values[pos + n + p * n:pos + n + p * n + p]
        pos += n + p * n + p
        spaces.append(LayerSpace(mean.copy(), basis.copy(), eigenvalues.copy()))
    try:
        return LayerSpaceBank(spaces, provenance)
    except DimensionError as exc:
        raise FormatError(f"{what}: {exc}") from None


def save_bank(bank, path):
    with open(path, "wb") as fh:
        fh.write(bank_to_bytes(bank))


def load_bank(path):
    with open(path, "rb") as fh:
        return bank_from_bytes(fh.read(), str(path))


# -- estimator ---------------------------------------------------------------------------

class FeatureSpaceTransformer(TransformerMixin, BaseEstimator):
    """Fit a layer-space bank on images and project images through its chain.

    ``model`` is a trained CNN (:class:`~amfc.cnn.TrainedModel` or a fitted
    :class:`~amfc.cnn.CNNClassifier`).  ``transform`` maps ``(N, H, H)``
    images to ``(N, p_L)`` low-dimensional samples.
    """

    def __init__(self, model=None, n_samples=200, p_schedule=(196, 144, 100, 64),
                 selection="first_ranked", random_state=0):
        self.model = model
        self.n_samples = n_samples
        self.p_schedule = p_schedule
        self.selection = selection
        self.random_state = random_state

    def _trained_model(self):
        model = getattr(self.model, "model_", self.model)
        if model is None:
            raise ConfigurationError("FeatureSpaceTransformer needs a trained CNN")
        return model

    def fit(self, X, y=None):
        X = np.asarray(X, dtype=np.float64)
        self.bank_ = build_bank(self._trained_model(), X, min(self.n_samples, len(X)),
                                list(self.p_schedule), self.selection, self.random_state)
        self.n_features_out_ = self.bank_.output_dim
        return self

    def transform(self, X):
        from .chain import project_batch

        check_is_fitted(self, "bank_")
        return project_batch(self.bank_, X)
