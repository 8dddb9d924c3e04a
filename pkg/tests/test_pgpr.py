import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import refine_direct, simplex_grid
from unissda.datagen import ClassGroups
from unissda.exceptions import ConfigError, DataError
from unissda.pgpr import (
    ConfidenceThreshold,
    aggregate,
    confidence_threshold,
    group_reweight,
    refine,
    refine_batch,
    write_refinements_jsonl,
)

GROUPS = [{0, 1}, {2, 3}]


def test_worked_example():
    p_u = np.array([0.5, 0.3, 0.1, 0.1])
    prior = np.array([0.2, 0.2, 0.3, 0.3])
    rew = group_reweight(p_u, prior, GROUPS)
    assert np.allclose(rew, [0.25, 0.15, 0.3, 0.3], atol=1e-15)
    assert np.allclose(aggregate(rew, prior), [0.225, 0.175, 0.3, 0.3], atol=1e-15)
    r = refine(p_u, prior, GROUPS)
    assert np.allclose(r.refined, [0.225, 0.175, 0.3, 0.3], atol=1e-15)
    assert r.pseudo_label == 2
    assert r.confidence == r.refined[2]


def test_accepts_class_groups():
    g = ClassGroups(frozenset({0, 1}), frozenset(), frozenset({2, 3}))
    p_u, prior = np.array([0.5, 0.3, 0.1, 0.1]), np.array([0.2, 0.2, 0.3, 0.3])
    assert np.array_equal(group_reweight(p_u, prior, g), group_reweight(p_u, prior, GROUPS))


def test_prior_equal_p_u_fixed_point():
    p = np.array([0.1, 0.2, 0.3, 0.4])
    assert np.allclose(group_reweight(p, p, GROUPS), p, atol=1e-15)
    assert np.allclose(refine(p, p, GROUPS).refined, p, atol=1e-15)


def test_aggregate_of_equal_inputs():
    p = np.array([0.25, 0.25, 0.5])
    assert np.array_equal(aggregate(p, p), p)


def test_onehot_agreement():
    for c in range(4):
        e = np.eye(4)[c]
        r = refine(e, e, GROUPS)
        assert r.pseudo_label == c and r.confidence == 1.0


def test_closed_set_identity_exact():
    rng = np.random.default_rng(0)
    P = rng.dirichlet(np.ones(6), size=200)
    Q = rng.dirichlet(np.ones(6), size=200)
    assert np.array_equal(group_reweight(P, Q, [set(range(6))]), P)


def test_zero_mass_group_gets_uniform_prior_mass():
    p_u = np.array([0.6, 0.4, 0.0, 0.0])
    prior = np.array([0.3, 0.3, 0.2, 0.2])
    rew, flags = group_reweight(p_u, prior, GROUPS, return_flags=True)
    assert np.allclose(rew, [0.36, 0.24, 0.2, 0.2], atol=1e-15)
    assert flags == 1


def test_source_private_stays_zero():
    # class 4 is source-private and masked out of both target distributions
    p_u = np.array([0.4, 0.2, 0.2, 0.2, 0.0])
    prior = np.array([0.1, 0.1, 0.4, 0.4, 0.0])
    rew = group_reweight(p_u, prior, [{0, 1}, {4}, {2, 3}])
    assert rew[4] == 0.0
    assert abs(rew.sum() - 1) < 1e-12


def test_shape_mismatch_and_bad_groups():
    with pytest.raises(DataError):
        group_reweight(np.ones(3) / 3, np.ones(4) / 4, [{0}])
    with pytest.raises(ConfigError):
        group_reweight(np.ones(3) / 3, np.ones(3) / 3, [{0, 5}])


def test_flip_grid_matches_direct_evaluation():
    # common {0, 1}, target-private {2}; p_u leans common, prior leans private
    groups = [{0, 1}, {2}]
    grid = simplex_grid(0.1)
    rng = np.random.default_rng(1)
    pairs = [(grid[i], grid[j]) for i, j in rng.integers(0, len(grid), (100, 2))]
    flips = 0
    for p_u, prior in pairs:
        _, refined, label = refine_direct(p_u, prior, groups)
        r = refine(np.array(p_u), np.array(prior), groups)
        assert r.pseudo_label == label
        assert (label == 2) == (refined[2] > max(refined[0], refined[1]))
        flips += (np.argmax(p_u) != 2) and label == 2
    assert flips > 0


@st.composite
def instances(draw):
    C = draw(st.integers(2, 8))
    seed = draw(st.integers(0, 2**32 - 1))
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, draw(st.integers(1, C)), C)
    groups = [set(np.flatnonzero(labels == g).tolist()) for g in np.unique(labels)]
    return rng.dirichlet(np.full(C, 0.5)), rng.dirichlet(np.full(C, 0.5)), groups


@settings(max_examples=300, deadline=None)
@given(instances())
def test_mass_alignment_and_argmax_invariance(inst):
    p_u, prior, groups = inst
    rew = group_reweight(p_u, prior, groups)
    for g in groups:
        idx = sorted(g)
        if p_u[idx].sum() > 1e-12:
            assert abs(rew[idx].sum() - prior[idx].sum()) < 1e-9
            assert idx[int(np.argmax(rew[idx]))] == idx[int(np.argmax(p_u[idx]))]
    r = refine(p_u, prior, groups)
    for dist in (r.reweighted, r.refined):
        assert np.all(dist >= 0) and abs(dist.sum() - 1) < 1e-9


@settings(max_examples=100, deadline=None)
@given(instances())
def test_idempotent_on_agreement(inst):
    p, _, groups = inst
    assert np.allclose(refine(p, p, groups).refined, p, atol=1e-12, rtol=0)


def test_batch_matches_single():
    rng = np.random.default_rng(2)
    P, Q = rng.dirichlet(np.ones(5), 50), rng.dirichlet(np.ones(5), 50)
    groups = [{0, 1}, {2}, {3, 4}]
    _, refined, labels, conf, _ = refine_batch(P, Q, groups)
    for i in range(50):
        r = refine(P[i], Q[i], groups)
        assert np.array_equal(r.refined, refined[i]) and r.pseudo_label == labels[i]


def test_switches_off_returns_p_u():
    rng = np.random.default_rng(3)
    P, Q = rng.dirichlet(np.ones(4), 5), rng.dirichlet(np.ones(4), 5)
    _, refined, labels, _, _ = refine_batch(P, Q, GROUPS, False, False)
    assert np.array_equal(refined, P)
    assert np.array_equal(labels, P.argmax(1))


# -- threshold ---------------------------------------------------------------

def test_threshold_examples():
    assert confidence_threshold([1.0, 1.0, 1.0], 0.9) == 0.9
    assert abs(confidence_threshold([0.5, 1.0], 0.8) - 0.6) < 1e-15
    assert ConfidenceThreshold(n_classes=3).tau == 0.9


def test_threshold_empty_batch():
    assert confidence_threshold([], 0.9, previous=0.4) == 0.4
    assert confidence_threshold([], 0.9, n_classes=3) == 0.3
    with pytest.raises(DataError):
        confidence_threshold([], 0.9)
    th = ConfidenceThreshold(0.9, n_classes=3)
    assert th.value == 0.3
    th.update([0.8])
    assert th.update([]) == th.value


def test_threshold_ema():
    th = ConfidenceThreshold(1.0, 2, ema_decay=0.5)
    th.update([1.0])
    assert th.update([0.0]) == 0.5


def test_invalid_tau():
    with pytest.raises(ConfigError):
        ConfidenceThreshold(0.0)
    with pytest.raises(ConfigError):
        confidence_threshold([0.5], tau=1.5)


def test_debug_jsonl(tmp_path):
    rng = np.random.default_rng(4)
    P, Q = rng.dirichlet(np.ones(4), 3), rng.dirichlet(np.ones(4), 3)
    from unissda.pgpr import results_from_batch

    results = results_from_batch(*refine_batch(P, Q, GROUPS), threshold=0.4)
    write_refinements_jsonl(results, tmp_path / "r.jsonl", iteration=7)
    recs = [json.loads(x) for x in (tmp_path / "r.jsonl").read_text().splitlines()]
    assert len(recs) == 3 and all(r["iteration"] == 7 for r in recs)
    assert recs[0]["above_threshold"] == (recs[0]["confidence"] >= 0.4)
