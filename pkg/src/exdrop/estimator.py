"""scikit-learn compatible classifier wrapping the training harness."""

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.preprocessing import LabelEncoder
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from . import harness as H
from .excitation import excitation_backprop_batch, priors_from_labels
from .network import ARCHITECTURES, forward
from .tensor import Rng


def _as_images(X, input_shape=None):
    """``n x d`` tables become ``n x d x 1 x 1``; 4-D arrays pass through."""
    X = np.asarray(X, dtype=np.float32)
    if X.ndim == 2:
        X = X.reshape(X.shape[0], X.shape[1], 1, 1)
    if input_shape is not None and tuple(X.shape[1:]) != tuple(input_shape):
        raise ValueError(f"X has sample shape {X.shape[1:]}, estimator was fit on {input_shape}")
    return X


class ExcitationDropoutClassifier(ClassifierMixin, BaseEstimator):
    """Neural-network classifier trained with a choice of dropout strategy.

    Parameters
    ----------
    strategy : {"none", "standard", "standard-per-image", "curriculum", "excitation"}
    base_p : float
        Retaining probability when saliency is uniform (excitation) or the
        fixed / asymptotic keep rate (standard, curriculum).
    gamma : float
        Curriculum decay rate.
    arch : {"auto", "mlp", "cnn2", "cnn2-mini"}
        ``auto`` picks ``mlp`` for 2-D input and ``cnn2`` for image batches.
    hidden : int
        Hidden width of the ``mlp`` architecture.
    """

    def __init__(self, strategy="excitation", base_p=0.5, gamma=5e-4, arch="auto", hidden=64,
                 lr=1e-3, lr_drop_iter=2500, batch_size=100, iters=5000, seed=0):
        self.strategy = strategy
        self.base_p = base_p
        self.gamma = gamma
        self.arch = arch
        self.hidden = hidden
        self.lr = lr
        self.lr_drop_iter = lr_drop_iter
        self.batch_size = batch_size
        self.iters = iters
        self.seed = seed

    def fit(self, X, y):
        X, y = check_X_y(X, y, allow_nd=True, dtype=np.float32)
        self._le = LabelEncoder().fit(y)
        self.classes_ = self._le.classes_
        if len(self.classes_) < 2:
            raise ValueError("need at least two classes")
        X = _as_images(X)
        self.input_shape_ = tuple(X.shape[1:])
        self.n_features_in_ = int(np.prod(self.input_shape_))
        arch = self.arch
        if arch == "auto":
            arch = "mlp" if self.input_shape_[1:] == (1, 1) else "cnn2"
        rng = Rng(self.seed)
        kw = {"hidden": self.hidden} if arch == "mlp" else {}
        self.net_ = ARCHITECTURES[arch](len(self.classes_), self.input_shape_, rng.spawn(0), **kw)
        cfg = H.TrainConfig(
            strategy=self.strategy, base_p=self.base_p, gamma=self.gamma, lr=self.lr,
            lr_drop_iter=self.lr_drop_iter, batch_size=min(self.batch_size, len(y)),
            iters=self.iters, seed=self.seed, eval_every=0,
        )
        data = H.Dataset(X, self._le.transform(y), "train", len(self.classes_))
        self.train_log_ = H.train(self.net_, data, cfg, rng)
        return self

    def _dataset(self, X, y=None):
        check_is_fitted(self, "net_")
        X = _as_images(check_array(X, allow_nd=True, dtype=np.float32), self.input_shape_)
        labels = np.zeros(len(X), np.int64) if y is None else self._le.transform(y)
        return H.Dataset(X, labels, "test", len(self.classes_))

    def predict_proba(self, X):
        data = self._dataset(X)
        return np.concatenate([forward(self.net_, x).probs for x, _ in data.batches(H.EVAL_BATCH)])

    def predict(self, X):
        check_is_fitted(self, "net_")
        return self.classes_[self.predict_proba(X).argmax(axis=1)]

    def saliency(self, X, y=None):
        """Per-sample excitation saliency at the dropout layer.

        The output prior is the true class when ``y`` is given, else the
        predicted class.
        """
        data = self._dataset(X, y)
        layer = self.net_.dropout_layer()
        out = []
        for x, labels in data.batches(H.EVAL_BATCH):
            trace = forward(self.net_, x)
            if y is None:
                labels = trace.probs.argmax(axis=1)
            out.append(excitation_backprop_batch(
                self.net_, trace, priors_from_labels(labels, self.net_.num_classes), layer))
        return np.concatenate(out)

    def utilization(self, X, y, delta=0.25):
        return H.utilization(self.net_, self._dataset(X, y), delta=delta)
