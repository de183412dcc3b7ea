"""scikit-learn style wrappers around the engine.

``NetClassifier`` trains an ``mlp`` or ``smallcnn`` with plain SGD.
``UNSIR`` is a meta-estimator: ``fit`` receives only retain-class data and
a fitted ``NetClassifier``, and produces an unlearned copy. Both expose
``get_params``/``set_params`` through ``BaseEstimator`` so they clone and
grid-search like any other estimator.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, clone
from sklearn.utils.validation import check_array, check_is_fitted

from .data import ClassPartition, LabeledDataset, RetainSubset, check_forget_classes
from .errors import ShapeError, ZeroGlanceViolation
from .models import Model, ModelSpec, build_model, logits_of, predict, train
from .noise import NoiseConfig
from .tensor import log_softmax
from .unlearn import UnsirConfig, unsir_unlearn


def check_samples(X, input_shape=None) -> np.ndarray:
    """Validate ``X`` and reshape it to ``(n, *input_shape)`` float32.

    Flat 2-D input is accepted when its width equals ``prod(input_shape)``.
    """
    X = check_array(X, allow_nd=True, dtype=np.float32, ensure_min_samples=1)
    if input_shape is None:
        return X
    input_shape = tuple(input_shape)
    if X.shape[1:] == input_shape:
        return X
    if X.ndim == 2 and X.shape[1] == int(np.prod(input_shape)):
        return X.reshape((X.shape[0], *input_shape))
    raise ShapeError(f"samples of shape {X.shape[1:]} do not match input shape {input_shape}")


def check_labels(y, n_samples: int, num_classes: int | None = None) -> np.ndarray:
    """Dense non-negative integer labels, one per sample."""
    y = np.asarray(y)
    if y.ndim != 1 or y.shape[0] != n_samples:
        raise ShapeError(f"expected {n_samples} labels, got shape {y.shape}")
    if y.size and not np.issubdtype(y.dtype, np.integer):
        if not np.all(np.equal(np.mod(y, 1), 0)):
            raise ValueError("labels must be integer class indices")
    y = y.astype(np.int64)
    if y.size and y.min() < 0:
        raise ValueError("labels must be non-negative")
    if num_classes is not None and y.size and y.max() >= num_classes:
        raise ValueError(f"label {int(y.max())} outside [0, {num_classes})")
    return y


class NetClassifier(ClassifierMixin, BaseEstimator):
    """Small neural classifier trained with cross-entropy SGD.

    Classes are the dense integers ``0..num_classes-1``; when ``num_classes``
    is None it is inferred as ``max(y) + 1``.
    """

    def __init__(self, arch="smallcnn", input_shape=None, num_classes=None, hidden=(), channels=(32, 64),
                 epochs=10, batch_size=8, lr=0.02, init_seed=0, seed=0):
        self.arch = arch
        self.input_shape = input_shape
        self.num_classes = num_classes
        self.hidden = hidden
        self.channels = channels
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.init_seed = init_seed
        self.seed = seed

    def _spec(self, X, k) -> ModelSpec:
        return ModelSpec(self.arch, X.shape[1:], k, tuple(self.hidden), tuple(self.channels), self.init_seed)

    def fit(self, X, y):
        X = check_samples(X, self.input_shape)
        y = check_labels(y, X.shape[0], self.num_classes)
        k = self.num_classes if self.num_classes is not None else int(y.max()) + 1
        model = build_model(self._spec(X, k))
        self.history_ = train(model, LabeledDataset(X, y, k, "fit"), self.epochs, self.batch_size, self.lr, self.seed)
        self._set_model(model)
        return self

    def _set_model(self, model: Model):
        self.model_ = model
        self.classes_ = np.arange(model.spec.num_classes)
        self.n_features_in_ = int(np.prod(model.spec.input_shape))
        return self

    @classmethod
    def from_model(cls, model: Model, **params) -> "NetClassifier":
        """Wrap an already trained model."""
        s = model.spec
        est = cls(arch=s.arch, input_shape=s.input_shape, num_classes=s.num_classes, hidden=s.hidden,
                  channels=s.channels, init_seed=s.init_seed, **params)
        return est._set_model(model)

    def _inputs(self, X):
        check_is_fitted(self, "model_")
        return check_samples(X, self.model_.spec.input_shape)

    def decision_function(self, X) -> np.ndarray:
        X = self._inputs(X)
        return logits_of(self.model_, X)

    def predict_log_proba(self, X) -> np.ndarray:
        return log_softmax(self.decision_function(X).astype(np.float64))

    def predict_proba(self, X) -> np.ndarray:
        return np.exp(self.predict_log_proba(X))

    def predict(self, X) -> np.ndarray:
        X = self._inputs(X)
        return predict(self.model_, X)[0]


class UNSIR(BaseEstimator):
    """Forget ``forget_classes`` of a fitted ``NetClassifier`` without seeing them.

    ``fit(X_retain, y_retain)`` takes retain-class data only; any forget
    label raises :class:`ZeroGlanceViolation`. With ``retain_per_class`` or
    ``retain_fraction`` set, a seeded per-class subset is drawn from it,
    otherwise all of it is used as the retain subset. The input estimator is
    never modified; the result lives in ``estimator_``.
    """

    def __init__(self, estimator=None, forget_classes=(0,), impair_lr=0.02, repair_lr=0.01, impair_epochs=1,
                 repair_epochs=1, cycles=1, batch_size=8, noise_steps=40, noise_lr=0.1, lam=0.1, noise_batch=64,
                 copies=20, retain_per_class=None, retain_fraction=None, seed=0):
        self.estimator = estimator
        self.forget_classes = forget_classes
        self.impair_lr = impair_lr
        self.repair_lr = repair_lr
        self.impair_epochs = impair_epochs
        self.repair_epochs = repair_epochs
        self.cycles = cycles
        self.batch_size = batch_size
        self.noise_steps = noise_steps
        self.noise_lr = noise_lr
        self.lam = lam
        self.noise_batch = noise_batch
        self.copies = copies
        self.retain_per_class = retain_per_class
        self.retain_fraction = retain_fraction
        self.seed = seed

    def config(self) -> UnsirConfig:
        noise = NoiseConfig(self.noise_steps, self.noise_lr, self.lam, self.noise_batch, self.copies)
        per_class = self.retain_per_class
        if per_class is None and self.retain_fraction is None:
            per_class = np.iinfo(np.int32).max
        return UnsirConfig(self.impair_lr, self.repair_lr, self.impair_epochs, self.repair_epochs, self.cycles,
                           self.batch_size, noise, per_class, self.retain_fraction, self.seed)

    def fit(self, X_retain, y_retain):
        if self.estimator is None:
            raise ValueError("UNSIR needs a fitted NetClassifier as `estimator`")
        check_is_fitted(self.estimator, "model_")
        model = self.estimator.model_
        k = model.spec.num_classes
        X = check_samples(X_retain, model.spec.input_shape)
        y = check_labels(y_retain, X.shape[0], k)
        forget = check_forget_classes(self.forget_classes, k)
        if np.isin(y, sorted(forget)).any():
            raise ZeroGlanceViolation("retain data passed to UNSIR.fit contains forget-class labels")
        retain = LabeledDataset(X, y, k, "retain")
        empty = LabeledDataset(np.zeros((0, *X.shape[1:]), np.float32), np.zeros(0, np.int64), k, "forget")
        part = ClassPartition(forget, empty, retain)
        cfg = self.config()
        subset = None
        if self.retain_per_class is None and self.retain_fraction is None:
            subset = RetainSubset(retain, None, 0, forget)
        unlearned, self.record_, self.noises_ = unsir_unlearn(model, part, cfg, retain_subset=subset,
                                                              return_noises=True)
        self.estimator_ = clone(self.estimator)._set_model(unlearned)
        self.classes_ = self.estimator_.classes_
        return self

    def predict(self, X):
        check_is_fitted(self, "estimator_")
        return self.estimator_.predict(X)

    def predict_proba(self, X):
        check_is_fitted(self, "estimator_")
        return self.estimator_.predict_proba(X)

    def score(self, X, y):
        check_is_fitted(self, "estimator_")
        return self.estimator_.score(X, y)
