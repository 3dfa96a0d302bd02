"""scikit-learn style wrappers around the functional API.

>>> clf = CNNClassifier(arch="tiny", epochs=5).fit(X, y)
>>> WeightPrunedClassifier(clf, levels=(0.5,)).fit(X, y).score(X, y)
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, clone
from sklearn.exceptions import NotFittedError
from sklearn.utils.validation import check_is_fitted

from .compression import (CompressionState, channel_prune, iterative_prune, to_sparse_format,
                          ttq_train)
from .engine import ExecConfig, forward, softmax
from .errors import ShapeError
from .graph import build_network
from .io.datasets import Dataset
from .train import TrainSchedule, train


def check_images(X, dtype=np.float32, input_shape=None):
    """Return ``X`` as a C-contiguous ``(N, C, H, W)`` array of ``dtype``."""
    X = np.asarray(X)
    if X.ndim == 3:
        X = X[None]
    if X.ndim != 4:
        raise ShapeError(f"images must have shape (N, C, H, W), got {X.shape}")
    if X.shape[0] == 0:
        raise ValueError("no images given")
    if not np.issubdtype(X.dtype, np.number):
        raise ValueError("images must be numeric")
    X = np.ascontiguousarray(X, dtype=dtype)
    if not np.all(np.isfinite(X)):
        raise ValueError("images contain NaN or infinite values")
    if input_shape is not None and tuple(X.shape[1:]) != tuple(input_shape):
        raise ShapeError(f"images have shape {X.shape[1:]}, estimator expects "
                         f"{tuple(input_shape)}")
    return X


def check_labels(y, n_samples):
    y = np.asarray(y)
    if y.ndim != 1 or len(y) != n_samples:
        raise ValueError(f"y must be a vector of {n_samples} labels, got shape {y.shape}")
    return y


class CNNClassifier(ClassifierMixin, BaseEstimator):
    """Convolutional classifier trained from scratch with stepped-rate SGD.

    Parameters
    ----------
    arch : str
        ``vgg16_cifar``, ``resnet18``, ``mobilenet`` or ``tiny``.
    width_scale : float
        Channel multiplier for desk-scale variants.
    epochs, lr, decay_every, batch_size, momentum : training schedule.
    conv_algo, threads : inference execution settings for ``predict``.
    random_state : int
        Seeds initial weights and minibatch order.
    """

    def __init__(self, arch="tiny", width_scale=1.0, epochs=10, lr=0.05, decay_every=50,
                 batch_size=32, momentum=0.0, conv_algo="direct", threads=1, random_state=0):
        self.arch = arch
        self.width_scale = width_scale
        self.epochs = epochs
        self.lr = lr
        self.decay_every = decay_every
        self.batch_size = batch_size
        self.momentum = momentum
        self.conv_algo = conv_algo
        self.threads = threads
        self.random_state = random_state

    def _schedule(self, epochs=None):
        return TrainSchedule(base_lr=self.lr, decay_every=self.decay_every,
                             epochs=self.epochs if epochs is None else epochs,
                             batch_size=self.batch_size, seed=self.random_state,
                             momentum=self.momentum)

    def _dataset(self, X, y):
        X = check_images(X)
        y = check_labels(y, len(X))
        self.classes_, encoded = np.unique(y, return_inverse=True)
        return Dataset(X, encoded.astype(np.int64), "train", len(self.classes_))

    def fit(self, X, y):
        data = self._dataset(X, y)
        net = build_network(self.arch, self.width_scale, max(len(self.classes_), 1),
                            data.images.shape[1:], self.random_state)
        self.network_, self.history_ = train(net, data, self._schedule())
        self.state_ = CompressionState("plain", 0.0)
        return self

    def _cfg(self):
        algo = self.conv_algo
        if algo == "sparse_csr" and any(l.weight_format == "dense"
                                        for l in self.network_.layers
                                        if l.kind in ("conv2d", "depthwise_conv2d")):
            algo = "direct"
        return ExecConfig(threads=self.threads, conv_algo=algo)

    def decision_function(self, X):
        check_is_fitted(self, "network_")
        X = check_images(X, self.network_.dtype, self.network_.input_shape)
        return forward(self.network_, X, self._cfg())

    def predict_proba(self, X):
        return softmax(self.decision_function(X))

    def predict(self, X):
        scores = self.decision_function(X)
        return self.classes_[np.argmax(scores, axis=1)]


class _CompressedClassifier(CNNClassifier):
    """Shared plumbing: fit the base estimator if needed, then compress it."""

    def _base_fitted(self, X, y):
        base = self.estimator if self.estimator is not None else CNNClassifier()
        try:
            check_is_fitted(base, "network_")
            fitted = base
        except NotFittedError:
            fitted = clone(base).fit(X, y)
        return fitted

    def _adopt(self, fitted):
        self.estimator_ = fitted
        self.classes_ = fitted.classes_

    def _data(self, fitted, X, y):
        X = check_images(X, fitted.network_.dtype, fitted.network_.input_shape)
        y = check_labels(y, len(X))
        lookup = {c: i for i, c in enumerate(fitted.classes_.tolist())}
        idx = np.array([lookup.get(v, -1) for v in y.tolist()])
        if np.any(idx < 0):
            raise ValueError("y holds labels the base estimator was not fitted on")
        return Dataset(X, idx.astype(np.int64), "train", len(fitted.classes_))


class WeightPrunedClassifier(_CompressedClassifier):
    """Magnitude-prune a fitted :class:`CNNClassifier` and fine-tune with the mask."""

    def __init__(self, estimator=None, levels=(0.5,), finetune_epochs=5, finetune_lr=0.01,
                 conv_algo="sparse_csr", threads=1):
        self.estimator = estimator
        self.levels = levels
        self.finetune_epochs = finetune_epochs
        self.finetune_lr = finetune_lr
        self.conv_algo = conv_algo
        self.threads = threads

    def fit(self, X, y):
        fitted = self._base_fitted(X, y)
        data = self._data(fitted, X, y)
        sched = TrainSchedule(base_lr=self.finetune_lr, epochs=self.finetune_epochs,
                              batch_size=fitted.batch_size, seed=fitted.random_state,
                              decay_every=max(self.finetune_epochs, 1))
        results = iterative_prune(fitted.network_, data, list(self.levels),
                                  self.finetune_epochs, sched)
        self._adopt(fitted)
        self.levels_ = results
        self.network_ = to_sparse_format(results[-1].net)
        self.state_ = CompressionState("weight_prune", results[-1].level, mask=results[-1].mask)
        return self


class ChannelPrunedClassifier(_CompressedClassifier):
    """Fisher channel pruning of a fitted :class:`CNNClassifier`."""

    def __init__(self, estimator=None, target_rate=None, removals=None, beta=1e-6,
                 finetune_lr=0.01, prune_every=100, conv_algo="direct", threads=1):
        self.estimator = estimator
        self.target_rate = target_rate
        self.removals = removals
        self.beta = beta
        self.finetune_lr = finetune_lr
        self.prune_every = prune_every
        self.conv_algo = conv_algo
        self.threads = threads

    def fit(self, X, y):
        fitted = self._base_fitted(X, y)
        data = self._data(fitted, X, y)
        removals = self.removals if self.removals is not None or self.target_rate else 1
        net, record = channel_prune(fitted.network_, data, removals=removals,
                                    beta=self.beta, lr=self.finetune_lr,
                                    prune_every=self.prune_every,
                                    batch_size=fitted.batch_size, seed=fitted.random_state,
                                    target_rate=self.target_rate)
        self._adopt(fitted)
        self.network_ = net
        self.record_ = record
        self.state_ = CompressionState("channel_prune", record.compression_rate, channels=record)
        return self


class TernaryClassifier(_CompressedClassifier):
    """Trained ternary quantisation of a fitted :class:`CNNClassifier`."""

    def __init__(self, estimator=None, threshold=0.1, finetune_epochs=10, finetune_lr=0.01,
                 conv_algo="sparse_csr", threads=1):
        self.estimator = estimator
        self.threshold = threshold
        self.finetune_epochs = finetune_epochs
        self.finetune_lr = finetune_lr
        self.conv_algo = conv_algo
        self.threads = threads

    def fit(self, X, y):
        fitted = self._base_fitted(X, y)
        data = self._data(fitted, X, y)
        sched = TrainSchedule(base_lr=self.finetune_lr, epochs=self.finetune_epochs,
                              batch_size=fitted.batch_size, seed=fitted.random_state,
                              decay_every=max(self.finetune_epochs, 1))
        net, params = ttq_train(fitted.network_, data, self.threshold, sched)
        self._adopt(fitted)
        self.network_ = to_sparse_format(net)
        self.ternary_ = params
        self.state_ = CompressionState("ttq", self.threshold, ternary=params)
        return self
