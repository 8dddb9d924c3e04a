"""Dual-head training loop for S+T, naive pseudo-labelling and PGPR.

The semi-supervised head ``h`` minimises ``L_l + mu(t) * L_u``. For PGPR a
second, supervised head is trained on labeled samples only and supplies the
per-sample prior used to refine pseudo-labels; it is dropped from the model
returned by :func:`run`.

All randomness comes from the config seed through named streams:
``init`` (parameter initialisation), ``batch`` (batch sampling),
``augment`` (feature noise and dropout) and ``interp`` (logit interpolation
weights).
"""

from __future__ import annotations

import json
import logging
import math
import zlib
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import model as M
from .datagen import FeatureDataset, LabelSpaceConfig, class_groups
from .exceptions import ConfigError, DataError, NumericalAbort
from .metrics import report_from_predictions
from .pgpr import ConfidenceThreshold, refine_batch, results_from_batch, write_refinements_jsonl

log = logging.getLogger(__name__)

METHODS = ("s_plus_t", "naive_pseudo_label", "pgpr")
STREAMS = ("init", "batch", "augment", "interp")


def stream(seed: int, label: str) -> np.random.Generator:
    """Independent generator for one named stream of a run."""
    if label not in STREAMS:
        raise ValueError(f"unknown stream {label!r}")
    return np.random.default_rng([int(seed), zlib.crc32(label.encode())])


def warmup_weight(t, T) -> float:
    """Cosine ramp from 0 at t=0 to 1 at t=T, constant afterwards."""
    return 0.5 - 0.5 * math.cos(min(math.pi, math.pi * t / T))


@dataclass
class AugmentConfig:
    weak_noise_sigma: float = 0.1
    strong_noise_sigma: float = 1.0
    strong_dropout_rate: float = 0.0

    def __post_init__(self):
        if self.weak_noise_sigma < 0 or self.strong_noise_sigma < self.weak_noise_sigma:
            raise ConfigError("need 0 <= weak_noise_sigma <= strong_noise_sigma")
        if not 0 <= self.strong_dropout_rate < 1:
            raise ConfigError("strong_dropout_rate must lie in [0, 1)")


def augment(features, kind, rng, cfg: AugmentConfig) -> np.ndarray:
    """Feature-space weak/strong views: Gaussian noise, plus dropout for strong."""
    X = np.asarray(features, dtype=np.float64)
    if kind == "weak":
        if cfg.weak_noise_sigma == 0:
            return X.copy()
        return X + cfg.weak_noise_sigma * rng.standard_normal(X.shape)
    if kind != "strong":
        raise ValueError(f"unknown augmentation kind {kind!r}")
    out = X + cfg.strong_noise_sigma * rng.standard_normal(X.shape) if cfg.strong_noise_sigma else X.copy()
    rate = cfg.strong_dropout_rate
    if rate:
        keep = rng.random(X.shape) >= rate
        out = np.where(keep, out / (1.0 - rate), 0.0)
    return out


@dataclass
class OptimizerConfig:
    learning_rate: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 5e-4
    schedule: str = "constant"
    warmup_steps: int = 50

    def state(self, total_steps) -> M.OptimizerState:
        return M.OptimizerState(
            self.learning_rate, self.momentum, self.weight_decay, self.schedule,
            self.warmup_steps, total_steps,
        )


_NESTED = {"head_optimizer": OptimizerConfig, "prior_optimizer": OptimizerConfig,
           "extractor_optimizer": OptimizerConfig, "augmentation": AugmentConfig}


@dataclass
class TrainConfig:
    method: str = "pgpr"
    iterations: int = 1500
    batch_labeled: int = 24
    batch_unlabeled: int = 24
    tau: float = 0.9
    warmup_T: int = 500
    head_optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    prior_optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    extractor_optimizer: OptimizerConfig = field(
        default_factory=lambda: OptimizerConfig(learning_rate=0.001)
    )
    augmentation: AugmentConfig = field(default_factory=AugmentConfig)
    logit_interpolation: bool = False
    seed: int = 0
    # fraction of each labeled batch drawn from labeled target samples
    # (rounded to whole samples); None draws uniformly from the pooled set
    target_fraction: float | None = 0.05
    group_reweight: bool = True
    classifier_aggregate: bool = True
    naive_threshold: float = 0.9
    threshold_ema: float | None = None
    hidden_width: int = 0
    cosine_mode: bool = False
    temperature: float = 1.0
    log_every: int = 50
    debug_refinements: str | None = None

    def __post_init__(self):
        for name, cls in _NESTED.items():
            value = getattr(self, name)
            if isinstance(value, dict):
                setattr(self, name, cls(**value))
        if self.method not in METHODS:
            raise ConfigError(f"unknown method {self.method!r}; choose from {METHODS}")
        if self.iterations < 0 or self.batch_labeled < 1 or self.batch_unlabeled < 1:
            raise ConfigError("iterations must be >= 0 and batch sizes positive")
        if not 0 < self.tau <= 1:
            raise ConfigError(f"tau must lie in (0, 1], got {self.tau}")
        if self.warmup_T < 1:
            raise ConfigError("warmup_T must be positive")
        if self.target_fraction is not None and not 0 <= self.target_fraction <= 1:
            raise ConfigError("target_fraction must lie in [0, 1]")
        if self.log_every < 1:
            raise ConfigError("log_every must be positive")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown train config fields: {sorted(unknown)}")
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc


@dataclass
class TrainingData:
    """Arrays for one run. Class ids are mapped to head indices on construction.

    ``y_unl`` holds the hidden truth of the unlabeled pool when it is known
    (synthetic benchmarks); it is used only for logging, never for training.
    """

    X_src: np.ndarray
    y_src: np.ndarray
    X_lab_t: np.ndarray
    y_lab_t: np.ndarray
    X_unl: np.ndarray
    label_space: LabelSpaceConfig
    y_unl: np.ndarray | None = None
    test: FeatureDataset | None = None

    def __post_init__(self):
        self.classes = np.array(self.label_space.all_classes, dtype=np.int64)
        self.index_of = {int(c): i for i, c in enumerate(self.classes)}
        C = len(self.classes)
        self.source_mask = M.make_mask(C, [self.index_of[c] for c in self.label_space.source_classes])
        self.target_mask = M.make_mask(C, [self.index_of[c] for c in self.label_space.target_classes])
        self.groups = class_groups(self.label_space)
        self.index_groups = [
            frozenset(self.index_of[c] for c in g)
            for g in (self.groups.common, self.groups.source_private, self.groups.target_private)
        ]
        self.X_src = np.asarray(self.X_src, dtype=np.float64)
        self.X_lab_t = np.asarray(self.X_lab_t, dtype=np.float64).reshape(-1, self.X_src.shape[1])
        self.X_unl = np.asarray(self.X_unl, dtype=np.float64)
        self.i_src = self._indices(self.y_src, self.label_space.source_classes, "source")
        self.i_lab_t = self._indices(self.y_lab_t, self.label_space.target_classes, "target")
        if len(self.X_unl) == 0:
            raise DataError("no unlabeled target training samples")
        if len(self.X_src) == 0:
            raise DataError("no labeled source samples")
        if self.y_unl is not None:
            self.y_unl = np.asarray(self.y_unl, dtype=np.int64)

    def _indices(self, class_ids, allowed, domain):
        class_ids = np.asarray(class_ids, dtype=np.int64)
        bad = sorted(set(class_ids.tolist()) - set(allowed))
        if bad:
            raise DataError(f"{domain} labels {bad} are outside the {domain} label set")
        return np.array([self.index_of[int(c)] for c in class_ids], dtype=np.int64)

    @classmethod
    def from_datasets(cls, source: FeatureDataset, target: FeatureDataset, label_space):
        """Labeled pool = source + labeled target train; unlabeled = the rest of target train."""
        train = target.split == "train"
        lab = train & target.labeled_mask
        unl = train & ~target.labeled_mask
        return cls(
            source.features, source.class_ids,
            target.features[lab], target.class_ids[lab],
            target.features[unl], label_space,
            y_unl=target.class_ids[unl], test=target.select(split="test"),
        )

    def unlabeled_dataset(self) -> FeatureDataset | None:
        if self.y_unl is None:
            return None
        return FeatureDataset(
            self.X_unl, self.y_unl, "target", np.zeros(len(self.y_unl), bool),
            None, self.label_space.target_classes,
        )


@dataclass
class TrainedModel:
    """Inference model: optional hidden layer plus the semi-supervised head."""

    head: M.ClassifierParams
    classes: np.ndarray
    source_mask: np.ndarray
    target_mask: np.ndarray
    hidden: M.HiddenLayer | None = None

    def features(self, X):
        X = np.asarray(X, dtype=np.float64)
        return X if self.hidden is None else self.hidden.forward(X)

    def logits(self, X, mask=None):
        return M.forward(self.head, self.features(X), self.target_mask if mask is None else mask)

    def predict_proba(self, X, mask=None):
        return M.softmax(self.logits(X, mask))

    def predict_classes(self, X, mask=None):
        return self.classes[M.predict_from_logits(self.logits(X, mask))]

    def arrays(self):
        out = dict(self.head.arrays())
        if self.hidden is not None:
            out.update(self.hidden.arrays())
        return out


@dataclass
class TrainHistory:
    records: list = field(default_factory=list)

    def column(self, name):
        return [r[name] for r in self.records]

    def to_jsonl(self, path) -> None:
        with open(path, "w") as fh:
            for r in self.records:
                fh.write(json.dumps(r, sort_keys=True) + "\n")

    @classmethod
    def from_jsonl(cls, path) -> "TrainHistory":
        with open(path) as fh:
            return cls([json.loads(line) for line in fh if line.strip()])


class _Cycler:
    """Endless shuffled pass over ``n`` indices; reshuffles when exhausted."""

    def __init__(self, n, rng):
        if n < 1:
            raise DataError("cannot sample batches from an empty pool")
        self.n, self.rng = n, rng
        self.order, self.pos = rng.permutation(n), 0

    def take(self, k):
        out = []
        while k > 0:
            if self.pos == self.n:
                self.order, self.pos = self.rng.permutation(self.n), 0
            step = min(k, self.n - self.pos)
            out.append(self.order[self.pos : self.pos + step])
            self.pos += step
            k -= step
        return np.concatenate(out) if out else np.empty(0, dtype=np.int64)


def _restandardize(X, ref):
    """Map ``X`` from ``ref``'s batch statistics to ``X``-plus-``ref`` statistics."""
    lab_m, lab_s = X.mean(axis=0), np.maximum(X.std(axis=0), 1e-6)
    both = np.vstack([X, ref])
    all_m, all_s = both.mean(axis=0), np.maximum(both.std(axis=0), 1e-6)
    return (X - lab_m) / lab_s * all_s + all_m


def _nan_to_none(record):
    return {k: (None if isinstance(v, float) and math.isnan(v) else v) for k, v in record.items()}


def unlabeled_loss_and_grad(head, Z_strong, labels, confidence, threshold, mask):
    """Pseudo-label cross-entropy on the strong view.

    Samples at or above ``threshold`` count fully, the rest at weight 1/2.
    """
    weights = np.where(confidence >= threshold, 1.0, 0.5)
    return M.ce_loss_and_grad(head, Z_strong, labels, mask, weights, return_input_grad=True)


def composite_grads(grads_l, grads_u, mu):
    if grads_u is None:
        return dict(grads_l)
    return {k: grads_l[k] + mu * grads_u[k] for k in grads_l}


class Trainer:
    """Holds parameters, optimiser state and RNG streams for one run."""

    def __init__(self, config: TrainConfig, data: TrainingData):
        self.cfg, self.data = config, data
        seed = config.seed
        self.rng_init = stream(seed, "init")
        self.rng_batch = stream(seed, "batch")
        self.rng_aug = stream(seed, "augment")
        self.rng_interp = stream(seed, "interp")

        C = len(data.classes)
        d = data.X_src.shape[1]
        self.hidden = None
        if config.hidden_width:
            self.hidden = M.init_hidden(d, config.hidden_width, self.rng_init)
            d = config.hidden_width
        # both heads are always initialised, in a fixed order, so every method
        # consumes the init stream identically
        self.head = M.init_params(C, d, self.rng_init, config.temperature, config.cosine_mode)
        self.prior = M.init_params(C, d, self.rng_init, config.temperature, config.cosine_mode)

        total = max(config.iterations, 1)
        self.opt_head = config.head_optimizer.state(total)
        self.opt_prior = config.prior_optimizer.state(total)
        self.opt_hidden = config.extractor_optimizer.state(total)
        self.threshold = ConfidenceThreshold(config.tau, C, config.threshold_ema)

        n_src, n_lt = len(data.i_src), len(data.i_lab_t)
        if config.target_fraction is None or n_lt == 0:
            self._pool_cycler = _Cycler(n_src + n_lt, self.rng_batch)
            self._src_cycler = self._trg_cycler = None
        else:
            self._pool_cycler = None
            self._src_cycler = _Cycler(n_src, self.rng_batch)
            self._trg_cycler = _Cycler(n_lt, self.rng_batch)
        self._unl_cycler = _Cycler(len(data.X_unl), self.rng_batch)
        self.t = 0
        self.history = TrainHistory()
        self.last = {}

    # -- batches ---------------------------------------------------------
    def next_labeled(self):
        d, B = self.data, self.cfg.batch_labeled
        if self._pool_cycler is not None:
            idx = self._pool_cycler.take(B)
            X = np.vstack([d.X_src, d.X_lab_t])[idx]
            y = np.concatenate([d.i_src, d.i_lab_t])[idx]
            is_src = idx < len(d.i_src)
        else:
            n_t = int(round(self.cfg.target_fraction * B))
            si, ti = self._src_cycler.take(B - n_t), self._trg_cycler.take(n_t)
            X = np.vstack([d.X_src[si], d.X_lab_t[ti]])
            y = np.concatenate([d.i_src[si], d.i_lab_t[ti]])
            is_src = np.arange(B) < B - n_t
        masks = np.where(is_src[:, None], d.source_mask, d.target_mask)
        return X, y, masks

    def next_unlabeled(self):
        idx = self._unl_cycler.take(self.cfg.batch_unlabeled)
        return self.data.X_unl[idx], idx

    # -- pseudo-labels ---------------------------------------------------
    def pseudo_labels(self, Z_u, threshold):
        """Pseudo-labels, confidences and refinement outputs for features ``Z_u``."""
        tmask = self.data.target_mask
        p_u = M.softmax(M.forward(self.head, Z_u, tmask))
        if self.cfg.method == "pgpr":
            prior = M.softmax(M.forward(self.prior, Z_u, tmask))
            rew, refined, labels, conf, flags = refine_batch(
                p_u, prior, self.data.index_groups,
                self.cfg.group_reweight, self.cfg.classifier_aggregate,
            )
        else:
            rew = refined = p_u
            labels = np.argmax(p_u, axis=1)
            conf = p_u[np.arange(len(labels)), labels]
            flags = np.zeros(len(labels), dtype=np.int64)
        return labels, conf, (rew, refined, labels, conf, flags)

    def current_threshold(self):
        if self.cfg.method == "naive_pseudo_label":
            return self.cfg.naive_threshold
        return self.threshold.value

    # -- one update ------------------------------------------------------
    def train_step(self, batch_labeled=None, batch_unlabeled=None):
        """Apply one update to ``h`` (and the hidden layer) and one to the prior head."""
        cfg, data, t = self.cfg, self.data, self.t
        X_l, y_l, masks_l = batch_labeled if batch_labeled is not None else self.next_labeled()
        X_u = batch_unlabeled if batch_unlabeled is not None else self.next_unlabeled()[0]
        aug = cfg.augmentation
        X_lw = augment(X_l, "weak", self.rng_aug, aug)
        X_uw = augment(X_u, "weak", self.rng_aug, aug)
        X_us = augment(X_u, "strong", self.rng_aug, aug)
        lam = float(self.rng_interp.random()) if cfg.logit_interpolation else None

        hid = self.hidden
        Z_lw = X_lw if hid is None else hid.forward(X_lw)
        Z_uw = X_uw if hid is None else hid.forward(X_uw)
        Z_us = X_us if hid is None else hid.forward(X_us)

        # labeled loss on h
        if lam is None:
            loss_l, g_l, dZ_l = M.ce_loss_and_grad(
                self.head, Z_lw, y_l, masks_l, return_input_grad=True
            )
            p_l = M.softmax(M.forward(self.head, Z_lw, masks_l))
            dZ_lp = X_lp = Z_lp = None
        else:
            X_lp = _restandardize(X_lw, X_uw)
            Z_lp = X_lp if hid is None else hid.forward(X_lp)
            loss_l, g_l, dZ_l, dZ_lp = M.interpolated_ce_loss_and_grad(
                self.head, Z_lw, Z_lp, y_l, lam, masks_l
            )
            p_l = M.interpolate_logits(
                M.forward(self.head, Z_lw, masks_l), M.forward(self.head, Z_lp, masks_l), lam
            )

        if cfg.method == "naive_pseudo_label":
            c_tau = cfg.naive_threshold
        else:
            c_tau = self.threshold.update(p_l.max(axis=1))

        mu = warmup_weight(t, cfg.warmup_T)
        loss_u, g_u, dZ_u, frac_above = 0.0, None, None, float("nan")
        if cfg.method != "s_plus_t":
            labels, conf, _ = self.pseudo_labels(Z_uw, c_tau)
            frac_above = float((conf >= c_tau).mean())
            loss_u, g_u, dZ_u = unlabeled_loss_and_grad(
                self.head, Z_us, labels, conf, c_tau, data.target_mask
            )
        g_head = composite_grads(g_l, g_u, mu)

        # supervised prior head: labeled samples only, features held constant
        loss_p, g_prior = M.ce_loss_and_grad(self.prior, Z_lw, y_l, masks_l)

        if not (np.isfinite(loss_l) and np.isfinite(loss_u) and np.isfinite(loss_p)):
            raise NumericalAbort(
                f"non-finite loss at iteration {t}",
                {"iteration": t, "labeled_loss": loss_l, "unlabeled_loss": loss_u,
                 "prior_loss": loss_p, "mu": mu, "c_tau": c_tau},
            )

        if hid is not None:
            g_hid = hid.backward(X_lw, Z_lw, dZ_l)
            if dZ_lp is not None:
                g_hid = composite_grads(g_hid, hid.backward(X_lp, Z_lp, dZ_lp), 1.0)
            if dZ_u is not None:
                g_hid = composite_grads(g_hid, hid.backward(X_us, Z_us, dZ_u), mu)
            new_hidden, _ = M.sgd_step(hid.arrays(), g_hid, self.opt_hidden, t)
            self.hidden = hid.with_arrays(new_hidden)

        new_head, _ = M.sgd_step(self.head.arrays(), g_head, self.opt_head, t)
        self.head = self.head.with_arrays(new_head)
        if cfg.method == "pgpr":
            new_prior, _ = M.sgd_step(self.prior.arrays(), g_prior, self.opt_prior, t)
            self.prior = self.prior.with_arrays(new_prior)

        self.last = {
            "iteration": t,
            "labeled_loss": loss_l,
            "unlabeled_loss": loss_u,
            "prior_loss": loss_p if cfg.method == "pgpr" else float("nan"),
            "mu": mu,
            "c_tau": c_tau,
            "batch_fraction_above_threshold": frac_above,
            "lambda": lam,
        }
        self.t += 1
        return self

    # -- logging ---------------------------------------------------------
    def inference_model(self) -> TrainedModel:
        d = self.data
        return TrainedModel(
            self.head.copy(), d.classes, d.source_mask, d.target_mask,
            None if self.hidden is None else self.hidden.copy(),
        )

    def prior_model(self) -> TrainedModel:
        d = self.data
        return TrainedModel(
            self.prior.copy(), d.classes, d.source_mask, d.target_mask,
            None if self.hidden is None else self.hidden.copy(),
        )

    def snapshot(self):
        """Pseudo-label and transductive metrics on the unlabeled pool (clean features)."""
        d = self.data
        X = d.X_unl
        Z = X if self.hidden is None else self.hidden.forward(X)
        c_tau = self.current_threshold()
        labels, conf, parts = self.pseudo_labels(Z, c_tau)
        record = dict(self.last)
        record.update(
            fraction_above_threshold=float((conf >= c_tau).mean()),
            threshold_for_snapshot=c_tau,
        )
        truth = d.y_unl
        if truth is None:
            return _nan_to_none(record), results_from_batch(*parts, threshold=c_tau)
        pl_report = report_from_predictions(
            d.classes[labels], truth, d.groups, "transductive_unlabeled_train"
        )
        model_report = report_from_predictions(
            self.inference_model().predict_classes(X), truth, d.groups,
            "transductive_unlabeled_train",
        )
        record.update(
            pseudo_label_accuracy=pl_report.overall_accuracy,
            overall_accuracy=model_report.overall_accuracy,
            common_accuracy=model_report.common_accuracy,
            target_private_accuracy=model_report.target_private_accuracy,
            private_as_common_rate=model_report.private_as_common_rate,
            predicted_private_fraction=model_report.predicted_private_fraction,
        )
        if self.cfg.method == "pgpr":
            prior_report = report_from_predictions(
                self.prior_model().predict_classes(X), truth, d.groups,
                "transductive_unlabeled_train",
            )
            record.update(
                prior_target_private_accuracy=prior_report.target_private_accuracy,
                prior_private_as_common_rate=prior_report.private_as_common_rate,
                prior_predicted_private_fraction=prior_report.predicted_private_fraction,
            )
        return _nan_to_none(record), results_from_batch(*parts, threshold=c_tau)

    def log_step(self):
        record, results = self.snapshot()
        self.history.records.append(record)
        if self.cfg.debug_refinements:
            write_refinements_jsonl(
                results, self.cfg.debug_refinements, append=True, iteration=record["iteration"]
            )
        return record


def run(config: TrainConfig, data: TrainingData, return_trainer=False):
    """Train for ``config.iterations`` steps; returns (model, history).

    The prior head is not part of the returned model. ``return_trainer``
    additionally returns the :class:`Trainer` for inspection.
    """
    if config.debug_refinements:
        Path(config.debug_refinements).write_text("")
    trainer = Trainer(config, data)
    n = config.iterations
    for t in range(n):
        trainer.train_step()
        if (t + 1) % config.log_every == 0 or t + 1 == n:
            trainer.log_step()
    model = trainer.inference_model()
    if return_trainer:
        return model, trainer.history, trainer
    return model, trainer.history
