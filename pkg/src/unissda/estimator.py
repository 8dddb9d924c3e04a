"""scikit-learn style wrapper around the training loop."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .datagen import LabelSpaceConfig, infer_setting
from .exceptions import ConfigError, DataError
from .train import AugmentConfig, OptimizerConfig, TrainConfig, TrainingData, run

UNLABELED = -1
_DOMAIN_CODES = {"source": 0, "target": 1, 0: 0, 1: 1}


def _domain_codes(domain, n):
    if domain is None:
        raise DataError("fit needs a per-sample domain array ('source' / 'target')")
    domain = np.asarray(domain).ravel()
    if domain.shape != (n,):
        raise DataError(f"domain has {domain.size} entries for {n} samples")
    try:
        return np.array([_DOMAIN_CODES[d.item() if hasattr(d, "item") else d] for d in domain])
    except KeyError as exc:
        raise DataError(f"unknown domain value {exc.args[0]!r}") from exc


class UniSSDAClassifier(ClassifierMixin, BaseEstimator):
    """Semi-supervised domain adaptation classifier over fixed feature vectors.

    ``fit`` takes source and target samples together. ``domain`` says which is
    which; ``y == -1`` marks unlabeled target samples. The label space is
    either given explicitly or inferred from the labeled classes of each
    domain (which misses target-private classes that have no labeled sample).

    Predictions are restricted to the target label set, since the estimator
    is meant to classify target-domain data.
    """

    def __init__(
        self,
        method="pgpr",
        iterations=1500,
        batch_labeled=24,
        batch_unlabeled=24,
        tau=0.9,
        warmup_T=500,
        learning_rate=0.01,
        momentum=0.9,
        weight_decay=5e-4,
        schedule="constant",
        weak_noise_sigma=0.1,
        strong_noise_sigma=1.0,
        strong_dropout_rate=0.0,
        target_fraction=0.05,
        logit_interpolation=False,
        group_reweight=True,
        classifier_aggregate=True,
        naive_threshold=0.9,
        hidden_width=0,
        cosine_mode=False,
        temperature=1.0,
        log_every=50,
        random_state=0,
    ):
        self.method = method
        self.iterations = iterations
        self.batch_labeled = batch_labeled
        self.batch_unlabeled = batch_unlabeled
        self.tau = tau
        self.warmup_T = warmup_T
        self.learning_rate = learning_rate
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.schedule = schedule
        self.weak_noise_sigma = weak_noise_sigma
        self.strong_noise_sigma = strong_noise_sigma
        self.strong_dropout_rate = strong_dropout_rate
        self.target_fraction = target_fraction
        self.logit_interpolation = logit_interpolation
        self.group_reweight = group_reweight
        self.classifier_aggregate = classifier_aggregate
        self.naive_threshold = naive_threshold
        self.hidden_width = hidden_width
        self.cosine_mode = cosine_mode
        self.temperature = temperature
        self.log_every = log_every
        self.random_state = random_state

    def _train_config(self) -> TrainConfig:
        if not isinstance(self.random_state, (int, np.integer)):
            raise ConfigError("random_state must be an integer seed")
        opt = OptimizerConfig(self.learning_rate, self.momentum, self.weight_decay, self.schedule)
        return TrainConfig(
            method=self.method,
            iterations=self.iterations,
            batch_labeled=self.batch_labeled,
            batch_unlabeled=self.batch_unlabeled,
            tau=self.tau,
            warmup_T=self.warmup_T,
            head_optimizer=opt,
            prior_optimizer=OptimizerConfig(**vars(opt)),
            augmentation=AugmentConfig(
                self.weak_noise_sigma, self.strong_noise_sigma, self.strong_dropout_rate
            ),
            logit_interpolation=self.logit_interpolation,
            seed=int(self.random_state),
            target_fraction=self.target_fraction,
            group_reweight=self.group_reweight,
            classifier_aggregate=self.classifier_aggregate,
            naive_threshold=self.naive_threshold,
            hidden_width=self.hidden_width,
            cosine_mode=self.cosine_mode,
            temperature=self.temperature,
            log_every=self.log_every,
        )

    def fit(self, X, y, domain=None, label_space=None):
        """Train on mixed source/target data.

        Parameters
        ----------
        X : array of shape (n_samples, n_features)
        y : array of shape (n_samples,)
            Class ids; -1 for unlabeled target samples.
        domain : array of shape (n_samples,)
            ``"source"``/``"target"`` (or 0/1) per sample.
        label_space : LabelSpaceConfig or dict, optional
        """
        config = self._train_config()
        X, y = check_X_y(X, y, dtype=np.float64)
        y = y.astype(np.int64)
        codes = _domain_codes(domain, len(y))
        src, trg = codes == 0, codes == 1
        if np.any(y[src] == UNLABELED):
            raise DataError("source samples must all be labeled")
        if np.any(y[y != UNLABELED] < 0):
            raise DataError("class ids must be nonnegative (-1 marks unlabeled)")
        lab_t = trg & (y != UNLABELED)
        unl = trg & (y == UNLABELED)

        if label_space is None:
            s_cls = tuple(np.unique(y[src]).tolist())
            t_cls = tuple(np.unique(y[lab_t]).tolist())
            label_space = LabelSpaceConfig(s_cls, t_cls, infer_setting(s_cls, t_cls))
        elif isinstance(label_space, dict):
            label_space = LabelSpaceConfig.from_dict(label_space)

        data = TrainingData(X[src], y[src], X[lab_t], y[lab_t], X[unl], label_space)
        self.model_, self.history_ = run(config, data)
        self.label_space_ = label_space
        self.classes_ = np.array(label_space.target_classes, dtype=np.int64)
        self.n_features_in_ = X.shape[1]
        return self

    def _check(self, X):
        check_is_fitted(self, "model_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise DataError(f"X has {X.shape[1]} features, expected {self.n_features_in_}")
        return X

    def predict_classes(self, X, mask=None):
        X = self._check(X)
        return self.model_.predict_classes(X, mask)

    def predict(self, X):
        return self.predict_classes(X)

    def predict_proba(self, X):
        """Probabilities over ``classes_`` (the target label set)."""
        X = self._check(X)
        proba = self.model_.predict_proba(X)
        cols = np.searchsorted(self.model_.classes, self.classes_)
        return proba[:, cols]
