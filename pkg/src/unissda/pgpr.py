"""Prior-guided pseudo-label refinement.

The semi-supervised head's distribution ``p_u`` is first rescaled group by
group (common / source-private / target-private) so that each group's mass
matches the supervised head's prior, then averaged with that prior. The
argmax of the result is the pseudo-label.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np

from .exceptions import ConfigError, DataError

EPS = 1e-12


@dataclass
class RefinementResult:
    reweighted: np.ndarray
    refined: np.ndarray
    pseudo_label: int
    confidence: float
    above_threshold: bool | None = None
    degenerate_groups: int = 0

    def to_record(self) -> dict:
        rec = asdict(self)
        rec["reweighted"] = self.reweighted.tolist()
        rec["refined"] = self.refined.tolist()
        return rec


def group_index_lists(groups, n_classes=None):
    """Turn a ClassGroups (or any iterable of class-index sets) into index arrays."""
    if hasattr(groups, "nonempty"):
        groups = groups.nonempty()
    out = [np.array(sorted(g), dtype=np.int64) for g in groups if len(g)]
    if n_classes is not None:
        for idx in out:
            if idx.min() < 0 or idx.max() >= n_classes:
                raise ConfigError("group contains a class index outside the distribution")
    return out


def group_reweight(p_u, prior, groups, return_flags=False):
    """Rescale ``p_u`` so every class group carries the prior's group mass.

    Works row-wise on (N, C) arrays as well as single vectors. Masses are
    taken relative to each vector's total, so a single group covering every
    class leaves ``p_u`` untouched bit for bit. A group with (near) zero mass
    under ``p_u`` but positive prior mass receives the prior mass spread
    uniformly; groups empty under both stay zero.
    """
    p_u = np.asarray(p_u, dtype=np.float64)
    prior = np.asarray(prior, dtype=np.float64)
    if p_u.shape != prior.shape:
        raise DataError(f"p_u {p_u.shape} and prior {prior.shape} differ in shape")
    single = p_u.ndim == 1
    P, Q = np.atleast_2d(p_u), np.atleast_2d(prior)
    idx_lists = group_index_lists(groups, P.shape[1])
    p_total = P.sum(axis=1)
    q_total = Q.sum(axis=1)
    out = P.copy()
    degenerate = np.zeros(P.shape[0], dtype=np.int64)
    for idx in idx_lists:
        p_mass = P[:, idx].sum(axis=1) / p_total
        q_mass = Q[:, idx].sum(axis=1) / q_total
        ok = p_mass > EPS
        scale = np.where(ok, q_mass / np.where(ok, p_mass, 1.0), 0.0)
        out[:, idx] = P[:, idx] * scale[:, None]
        fill = ~ok & (q_mass > EPS)
        if fill.any():
            out[np.ix_(fill, idx)] = (q_mass[fill] / len(idx))[:, None]
            degenerate += fill
        dead = ~ok & ~fill
        if dead.any():
            out[np.ix_(dead, idx)] = 0.0
    if single:
        out, degenerate = out[0], degenerate[0]
    return (out, degenerate) if return_flags else out


def aggregate(reweighted, prior):
    """Average the two heads' distributions."""
    reweighted = np.asarray(reweighted, dtype=np.float64)
    prior = np.asarray(prior, dtype=np.float64)
    if reweighted.shape != prior.shape:
        raise DataError("aggregate needs distributions of equal shape")
    return (reweighted + prior) / 2.0


def refine_batch(p_u, prior, groups, use_reweight=True, use_aggregate=True):
    """Vectorised refinement; returns (reweighted, refined, labels, confidence, flags).

    The two switches exist for ablations; with both off the refined
    distribution is ``p_u`` itself.
    """
    P = np.atleast_2d(np.asarray(p_u, dtype=np.float64))
    Q = np.atleast_2d(np.asarray(prior, dtype=np.float64))
    if use_reweight:
        rew, flags = group_reweight(P, Q, groups, return_flags=True)
    else:
        rew, flags = P, np.zeros(P.shape[0], dtype=np.int64)
    refined = aggregate(rew, Q) if use_aggregate else rew
    labels = np.argmax(refined, axis=1)
    conf = refined[np.arange(refined.shape[0]), labels]
    return rew, refined, labels, conf, flags


def refine(p_u, prior, groups) -> RefinementResult:
    rew, refined, labels, conf, flags = refine_batch(p_u, prior, groups)
    return RefinementResult(rew[0], refined[0], int(labels[0]), float(conf[0]), None, int(flags[0]))


def results_from_batch(rew, refined, labels, conf, flags, threshold=None):
    above = [None] * len(labels) if threshold is None else (conf >= threshold).tolist()
    return [
        RefinementResult(rew[i], refined[i], int(labels[i]), float(conf[i]), above[i], int(flags[i]))
        for i in range(len(labels))
    ]


class ConfidenceThreshold:
    """Adaptive threshold ``tau * mean(max labeled probability)``.

    By default the mean is taken over the current labeled batch. With
    ``ema_decay`` set, an exponential moving average of the batch means is
    used instead. An empty batch keeps the previous value; before any batch
    is seen the value is ``tau / n_classes``.
    """

    def __init__(self, tau=0.9, n_classes=2, ema_decay=None):
        if not 0 < tau <= 1:
            raise ConfigError(f"tau must lie in (0, 1], got {tau}")
        self.tau = tau
        self.ema_decay = ema_decay
        self._mean = None
        self.value = tau / n_classes

    def update(self, labeled_max_probs) -> float:
        probs = np.asarray(labeled_max_probs, dtype=np.float64)
        if probs.size == 0:
            return self.value
        batch_mean = float(probs.mean())
        if self.ema_decay is None or self._mean is None:
            self._mean = batch_mean
        else:
            self._mean = self.ema_decay * self._mean + (1.0 - self.ema_decay) * batch_mean
        self.value = self.tau * self._mean
        return self.value


def confidence_threshold(labeled_max_probs, tau=0.9, previous=None, n_classes=None) -> float:
    """Stateless form of :class:`ConfidenceThreshold` for one batch."""
    if not 0 < tau <= 1:
        raise ConfigError(f"tau must lie in (0, 1], got {tau}")
    probs = np.asarray(labeled_max_probs, dtype=np.float64)
    if probs.size == 0:
        if previous is not None:
            return previous
        if n_classes is None:
            raise DataError("empty labeled batch with no previous threshold or class count")
        return tau / n_classes
    return tau * float(probs.mean())


def write_refinements_jsonl(results, path, append=False, iteration=None) -> None:
    with open(path, "a" if append else "w") as fh:
        for r in results:
            rec = r.to_record()
            if iteration is not None:
                rec["iteration"] = iteration
            fh.write(json.dumps(rec) + "\n")
