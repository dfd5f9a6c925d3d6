"""Lightweight classifiers applied to the low-dimensional projections.

All heads take integer labels ``0..C-1`` and return an ``(N, C)`` score
matrix from ``predict_proba``; the predicted class is the first argmax, so
ties go to the lowest class index.
"""

import logging

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .errors import ConfigurationError, TrainingError
from .tensor import softmax

logger = logging.getLogger(__name__)

HEAD_KINDS = ("mlp", "knn", "gnb")


class _Head(ClassifierMixin, BaseEstimator):
    kind = None

    def _setup_classes(self, y):
        n = self.n_classes if self.n_classes is not None else int(y.max()) + 1
        if y.min() < 0 or y.max() >= n:
            raise ConfigurationError(f"labels must lie in [0, {n})")
        self.classes_ = np.arange(n)

    def predict(self, X):
        return self.classes_[self.predict_proba(X).argmax(axis=1)]

    def predict_proba(self, X):
        check_is_fitted(self)
        return self.scores(check_array(X, dtype=np.float64))

    def scores(self, X):
        """``predict_proba`` without input validation, for the timed path."""
        raise NotImplementedError

    # arrays/hyper round-trip used by the AMFCM1 container
    def get_arrays(self):
        raise NotImplementedError

    def set_arrays(self, arrays, n_classes, n_features):
        raise NotImplementedError


class MLPHead(_Head):
    """ReLU multilayer perceptron with softmax output.

    Trained by minibatch SGD on cross-entropy; keeps the parameters of the
    epoch with the best validation accuracy and stops after ``patience``
    epochs without improvement.  With ``standardize`` the inputs are z-scored
    with training-set statistics before entering the network.
    """

    kind = "mlp"

    def __init__(self, hidden=(64,), lr=1e-2, batch_size=20, max_epochs=200, patience=10,
                 standardize=True, validation_fraction=0.1, n_classes=None, random_state=0):
        self.hidden = hidden
        self.lr = lr
        self.batch_size = batch_size
        self.max_epochs = max_epochs
        self.patience = patience
        self.standardize = standardize
        self.validation_fraction = validation_fraction
        self.n_classes = n_classes
        self.random_state = random_state

    def _init_params(self, sizes, rng):
        params = []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            bound = np.sqrt(6.0 / (fan_in + fan_out))
            params.append([rng.uniform(-bound, bound, size=(fan_in, fan_out)), np.zeros(fan_out)])
        return params

    def _scale(self, X):
        return (X - self.input_mean_) / self.input_scale_

    def _logits(self, X, params=None, keep=False):
        params = self.coefs_ if params is None else params
        h, cache = X, []
        for i, (w, b) in enumerate(params):
            pre = h @ w + b
            cache.append((h, pre))
            h = np.maximum(pre, 0.0) if i < len(params) - 1 else pre
        return (h, cache) if keep else h

    def loss_and_grads(self, X, y, params=None):
        """Mean cross-entropy and per-layer ``[dW, db]`` gradients."""
        params = self.coefs_ if params is None else params
        logits, cache = self._logits(X, params, keep=True)
        n = len(X)
        shifted = logits - logits.max(axis=1, keepdims=True)
        log_probs = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
        loss = -log_probs[np.arange(n), y].mean()
        delta = np.exp(log_probs)
        delta[np.arange(n), y] -= 1.0
        delta /= n
        grads = [None] * len(params)
        for i in reversed(range(len(params))):
            h, pre = cache[i]
            if i < len(params) - 1:
                delta = delta * (pre > 0)
            grads[i] = [h.T @ delta, delta.sum(axis=0)]
            delta = delta @ params[i][0].T
        return loss, grads

    def fit(self, X, y, X_val=None, y_val=None):
        X, y = check_X_y(X, y, dtype=np.float64)
        y = y.astype(np.int64)
        self._setup_classes(y)
        rng = np.random.default_rng(self.random_state)
        if X_val is None:
            perm = rng.permutation(len(X))
            n_val = max(1, int(round(self.validation_fraction * len(X)))) if len(X) > 1 else 0
            val_idx, fit_idx = perm[:n_val], perm[n_val:]
            X_val, y_val, X, y = X[val_idx], y[val_idx], X[fit_idx], y[fit_idx]
        else:
            X_val, y_val = check_X_y(X_val, y_val, dtype=np.float64)
            y_val = y_val.astype(np.int64)
        self.input_mean_ = np.zeros(X.shape[1])
        self.input_scale_ = np.ones(X.shape[1])
        if self.standardize:
            self.input_mean_ = X.mean(axis=0)
            std = X.std(axis=0)
            self.input_scale_ = np.where(std > 0, std, 1.0)
        X = self._scale(X)
        X_val = self._scale(X_val)
        sizes = [X.shape[1], *self.hidden, len(self.classes_)]
        params = self._init_params(sizes, rng)

        def val_accuracy(p):
            if len(X_val) == 0:
                return 0.0
            return float(np.mean(self._logits(X_val, p).argmax(axis=1) == y_val))

        best_acc = val_accuracy(params)
        best = [[w.copy(), b.copy()] for w, b in params]
        stale, epochs = 0, 0
        for epoch in range(1, self.max_epochs + 1):
            order = rng.permutation(len(X))
            for start in range(0, len(order), self.batch_size):
                idx = order[start:start + self.batch_size]
                loss, grads = self.loss_and_grads(X[idx], y[idx], params)
                if not np.isfinite(loss):
                    raise TrainingError(f"MLP head loss became non-finite at epoch {epoch}", epoch)
                for (w, b), (dw, db) in zip(params, grads):
                    w -= self.lr * dw
                    b -= self.lr * db
            epochs = epoch
            acc = val_accuracy(params)
            if acc > best_acc:
                best_acc, stale = acc, 0
                best = [[w.copy(), b.copy()] for w, b in params]
            else:
                stale += 1
                if stale >= self.patience:
                    break
        logger.debug("mlp head stopped after %d epochs, best val acc %.4f", epochs, best_acc)
        self.coefs_ = best
        self.n_epochs_ = epochs
        self.best_val_accuracy_ = best_acc
        self.n_features_in_ = X.shape[1]
        return self

    def scores(self, X):
        return softmax(self._logits(self._scale(X)), axis=1)

    def get_arrays(self):
        arrays = {"input_mean": self.input_mean_, "input_scale": self.input_scale_}
        for i, (w, b) in enumerate(self.coefs_):
            arrays[f"layer{i}.weight"] = w
            arrays[f"layer{i}.bias"] = b
        return arrays

    def set_arrays(self, arrays, n_classes, n_features):
        self.input_mean_ = arrays["input_mean"]
        self.input_scale_ = arrays["input_scale"]
        n_layers = (len(arrays) - 2) // 2
        self.coefs_ = [[arrays[f"layer{i}.weight"], arrays[f"layer{i}.bias"]] for i in range(n_layers)]
        self.classes_ = np.arange(n_classes)
        self.n_features_in_ = n_features
        return self


class KNNHead(_Head):
    """k-nearest neighbours under Euclidean distance.

    Scores are neighbour vote fractions.  Equidistant neighbours are taken
    in training order.
    """

    kind = "knn"

    def __init__(self, n_neighbors=1, n_classes=None):
        self.n_neighbors = n_neighbors
        self.n_classes = n_classes

    def fit(self, X, y, X_val=None, y_val=None):
        X, y = check_X_y(X, y, dtype=np.float64)
        y = y.astype(np.int64)
        if not 1 <= self.n_neighbors <= len(X):
            raise ConfigurationError(f"n_neighbors={self.n_neighbors} needs 1..{len(X)} training points")
        self._setup_classes(y)
        self.X_ = X.copy()
        self.y_ = y.copy()
        self.n_features_in_ = X.shape[1]
        return self

    def scores(self, X):
        # explicit differences keep exact duplicates at distance 0
        nearest = np.empty((len(X), self.n_neighbors), dtype=np.int64)
        step = max(1, 2_000_000 // max(1, self.X_.size))
        for start in range(0, len(X), step):
            diff = X[start:start + step, None, :] - self.X_[None]
            d2 = np.einsum("qnd,qnd->qn", diff, diff)
            nearest[start:start + step] = np.argsort(d2, axis=1, kind="stable")[:, : self.n_neighbors]
        votes = np.zeros((len(X), len(self.classes_)))
        np.add.at(votes, (np.repeat(np.arange(len(X)), self.n_neighbors), self.y_[nearest].ravel()), 1.0)
        return votes / self.n_neighbors

    def get_arrays(self):
        return {"points": self.X_, "labels": self.y_.astype(np.float64)}

    def set_arrays(self, arrays, n_classes, n_features):
        self.X_ = arrays["points"].reshape(-1, n_features)
        self.y_ = arrays["labels"].astype(np.int64)
        self.classes_ = np.arange(n_classes)
        self.n_features_in_ = n_features
        return self


class GaussianNBHead(_Head):
    """Gaussian naive Bayes with a variance floor.

    The floor is ``var_smoothing`` times the largest feature variance, plus
    ``min_variance``, added to every per-class variance.
    """

    kind = "gnb"

    def __init__(self, var_smoothing=1e-9, min_variance=1e-12, n_classes=None):
        self.var_smoothing = var_smoothing
        self.min_variance = min_variance
        self.n_classes = n_classes

    def fit(self, X, y, X_val=None, y_val=None):
        X, y = check_X_y(X, y, dtype=np.float64)
        y = y.astype(np.int64)
        self._setup_classes(y)
        n_c, d = len(self.classes_), X.shape[1]
        floor = self.var_smoothing * float(np.var(X, axis=0).max()) + self.min_variance
        self.theta_ = np.zeros((n_c, d))
        self.var_ = np.full((n_c, d), floor)
        counts = np.bincount(y, minlength=n_c).astype(np.float64)
        for c in range(n_c):
            rows = X[y == c]
            if len(rows):
                self.theta_[c] = rows.mean(axis=0)
                self.var_[c] = rows.var(axis=0) + floor
        self.class_prior_ = counts / counts.sum()
        self.n_features_in_ = d
        return self

    def _joint_log_likelihood(self, X):
        with np.errstate(divide="ignore"):
            log_prior = np.log(self.class_prior_)
        ll = -0.5 * np.sum(np.log(2.0 * np.pi * self.var_), axis=1)[None, :]
        ll = ll - 0.5 * np.sum((X[:, None, :] - self.theta_[None]) ** 2 / self.var_[None], axis=2)
        return ll + log_prior

    def scores(self, X):
        jll = self._joint_log_likelihood(X)
        jll = np.where(np.isfinite(jll), jll, -np.inf)
        top = jll.max(axis=1, keepdims=True)
        e = np.exp(jll - top)
        return e / e.sum(axis=1, keepdims=True)

    def get_arrays(self):
        return {"theta": self.theta_, "var": self.var_, "prior": self.class_prior_}

    def set_arrays(self, arrays, n_classes, n_features):
        self.theta_ = arrays["theta"].reshape(n_classes, n_features)
        self.var_ = arrays["var"].reshape(n_classes, n_features)
        self.class_prior_ = arrays["prior"]
        self.classes_ = np.arange(n_classes)
        self.n_features_in_ = n_features
        return self


def make_head(kind, **hyper):
    try:
        cls = {"mlp": MLPHead, "knn": KNNHead, "gnb": GaussianNBHead}[kind]
    except KeyError:
        raise ConfigurationError(f"unknown head kind {kind!r}; choose from {HEAD_KINDS}") from None
    if "k" in hyper and kind == "knn":
        hyper["n_neighbors"] = hyper.pop("k")
    if "batch" in hyper and kind == "mlp":
        hyper["batch_size"] = hyper.pop("batch")
    if "hidden" in hyper:
        hyper["hidden"] = tuple(hyper["hidden"])
    valid = cls().get_params()
    unknown = sorted(set(hyper) - set(valid))
    if unknown:
        raise ConfigurationError(f"unknown {kind} head parameters: {unknown}")
    return cls(**hyper)
