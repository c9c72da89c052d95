"""scikit-learn style front end for the tree models.

``X`` is a list of :class:`~diffusion_lstm.batching.EncodedTree`; targets are
carried by the trees themselves, so ``y`` is ignored like in unsupervised
estimators.
"""
import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .evaluation import (GenerationConfig, ap_result, calibrate_thresholds,
                         generate_trees, predict_nodes)
from .model import VARIANTS, init_params
from .training import TrainConfig, TrainResult, class_weights, train


def _check_trees(X, need_targets=True):
    X = list(X)
    if not X:
        raise ValueError("expected a non-empty list of encoded trees")
    if need_targets and any(t.targets is None for t in X):
        raise ValueError("trees carry no targets; encode them with a prototype map")
    return X


class DiffusionLSTM(BaseEstimator):
    """Top-down tree LSTM (or one of its baselines) predicting, for every node,
    which prototypes re-share next and whether the node is terminal.

    ``variant`` is one of ``full``, ``social_only``, ``image_only``,
    ``random_weights`` (never trained) and ``fc`` (memoryless).
    """

    def __init__(self, variant="full", hidden_size=256, head_size=128, dropout_rate=0.5,
                 lr_initial=0.2, lr_reduced=0.02, plateau_patience=3, min_delta=1e-4,
                 max_epochs=60, batch_size=32, clip_threshold=5.0, random_state=0):
        self.variant = variant
        self.hidden_size = hidden_size
        self.head_size = head_size
        self.dropout_rate = dropout_rate
        self.lr_initial = lr_initial
        self.lr_reduced = lr_reduced
        self.plateau_patience = plateau_patience
        self.min_delta = min_delta
        self.max_epochs = max_epochs
        self.batch_size = batch_size
        self.clip_threshold = clip_threshold
        self.random_state = random_state

    def train_config(self):
        return TrainConfig(self.lr_initial, self.lr_reduced, self.plateau_patience,
                           self.min_delta, self.max_epochs, self.batch_size,
                           self.dropout_rate, self.random_state, self.clip_threshold)

    def fit(self, X, y=None, X_val=None, checkpoint_path=None, log_path=None):
        if self.variant not in VARIANTS:
            raise ValueError("unknown variant {!r}".format(self.variant))
        X = _check_trees(X)
        X_val = X if X_val is None else _check_trees(X_val)
        k = X[0].targets.shape[1] - 1
        emb_dim = X[0].embedding.shape[0]
        params = init_params(self.variant, self.hidden_size, self.head_size, emb_dim, k,
                             seed=self.random_state)
        self.class_weights_ = class_weights(np.concatenate([t.targets for t in X]))
        if self.variant == "random_weights":
            self.training_result_ = TrainResult(params, stop_reason="untrained variant")
        else:
            self.training_result_ = train(params, X, X_val, self.class_weights_,
                                          self.train_config(), checkpoint_path, log_path)
        self.params_ = self.training_result_.params
        self.n_prototypes_ = k
        return self

    @classmethod
    def from_params(cls, params, **kw):
        est = cls(variant=params.variant, hidden_size=params.hidden, head_size=params.head, **kw)
        est.params_ = params
        est.n_prototypes_ = params.k
        return est

    def predict_proba(self, X):
        """Teacher-forced ``(n_nodes, k + 1)`` probabilities per tree."""
        check_is_fitted(self, "params_")
        X = _check_trees(X, need_targets=False)
        scores, _ = predict_nodes(self.params_, X)
        sizes = np.cumsum([t.size for t in X])[:-1]
        return np.split(scores, sizes)

    def predict(self, X, threshold=0.5):
        return [(p >= threshold).astype(np.uint8) for p in self.predict_proba(X)]

    def evaluate(self, X):
        check_is_fitted(self, "params_")
        scores, targets = predict_nodes(self.params_, _check_trees(X))
        return ap_result(scores, targets)

    def score(self, X, y=None):
        """Mean AP over all classes with positives."""
        return self.evaluate(X).map_all

    def calibrate(self, X_val, centroids, **kw):
        check_is_fitted(self, "params_")
        self.generation_config_, self.calibration_scores_ = calibrate_thresholds(
            self.params_, _check_trees(X_val), centroids, **kw)
        return self.generation_config_

    def generate(self, root_features, embeddings, centroids, config=None):
        check_is_fitted(self, "params_")
        config = config or getattr(self, "generation_config_", None) or GenerationConfig()
        return generate_trees(self.params_, root_features, embeddings, centroids, config)
