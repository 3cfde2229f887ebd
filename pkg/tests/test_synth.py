import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.stats import binom

from vpl.synth import ConfigError, SynthConfig, generate, prior_shift, prior_table
from vpl.training import baseline_predict

from conftest import default_dataset


def small(**kw):
    base = dict(train_size=2000, test_size=500)
    base.update(kw)
    return SynthConfig(**base)


def test_uniform_kappa_gives_uniform_prior():
    cfg = small(kappa=1 / 8, train_size=6000)
    ds = generate(cfg)
    table = prior_table(ds.train, cfg.num_question_types, cfg.answers_per_type)
    assert np.abs(table - 1 / 8).max() < 0.05


def test_full_kappa_noiseless_annotators_single_answer_per_type():
    cfg = small(kappa=1.0, annotator_accuracy=1.0)
    ds = generate(cfg)
    tr = ds.train
    for q in range(cfg.num_question_types):
        answers = np.unique(tr.majority[tr.question_types == q])
        assert answers.tolist() == [q * cfg.answers_per_type]
    table = prior_table(tr, cfg.num_question_types, cfg.answers_per_type)
    np.testing.assert_array_equal(table, np.eye(cfg.answers_per_type)[[0] * cfg.num_question_types])


def test_prior_table_rows_sum_to_one():
    cfg = small()
    table = prior_table(generate(cfg).train, cfg.num_question_types, cfg.answers_per_type)
    np.testing.assert_allclose(table.sum(axis=1), 1.0)


def test_default_train_head_rate_near_kappa():
    ds = default_dataset(0)
    table = prior_table(ds.train, 6, 8)
    assert np.abs(table[:, 0] - 0.8).max() < 0.05


def _prior_only_expectation(kappa, A, annotators=10, acc=0.9):
    """Expected vote accuracy of always answering the train head on the shifted test split.

    With probability (1-kappa)/(A-1) the head is the true answer (score ~1);
    otherwise it only collects stray votes, each annotator erring onto it
    with probability (1-acc)/(A-1).
    """
    v = np.arange(annotators + 1)
    score = np.minimum(1.0, v / 3.0)
    hit = (1 - kappa) / (A - 1)
    e_true = (binom.pmf(v, annotators, acc) * score).sum()
    e_stray = (binom.pmf(v, annotators, (1 - acc) / (A - 1)) * score).sum()
    return hit * e_true + (1 - hit) * e_stray, kappa * e_true + (1 - kappa) * e_stray


def test_prior_only_baseline_matches_analytic_oracle():
    ds = default_dataset(0)
    test_expect, train_expect = _prior_only_expectation(0.8, 8)
    tr = baseline_predict("prior-only", ds, "train").overall
    te = baseline_predict("prior-only", ds, "test").overall
    assert tr == pytest.approx(train_expect, abs=0.02)
    assert tr == pytest.approx(0.8, abs=0.03)
    assert te == pytest.approx(test_expect, abs=0.015)
    # the label-free part of the expectation is the plain (1-kappa)/(A-1) hit rate
    assert (1 - 0.8) / 7 < te < 0.1


def test_determinism_bit_identical():
    a, b = generate(small(seed=9)), generate(small(seed=9))
    for name in ("train", "test"):
        sa, sb = a.split(name), b.split(name)
        for f in ("features", "question_types", "tokens", "scores", "region_classes", "salient"):
            assert np.array_equal(getattr(sa, f), getattr(sb, f))
    assert not np.array_equal(generate(small(seed=10)).train.features, a.train.features)


def test_oracle_learnability():
    ds = default_dataset(0)
    for split in ("train", "test"):
        assert baseline_predict("oracle", ds, split).overall >= 0.95


def test_prior_shift_magnitude():
    ds = default_dataset(0)
    assert prior_shift(ds) >= 0.8 - 1 / 8 - 0.05


def test_salient_region_encodes_answer():
    ds = generate(small(annotator_accuracy=1.0))
    for s in (ds.train, ds.test):
        cls = s.region_classes[np.arange(len(s)), s.salient]
        np.testing.assert_array_equal(cls, s.majority)
        # exactly one region of the question type's own classes
        own = (s.region_classes // 8 == s.question_types[:, None]) & (s.region_classes < 48)
        assert np.all(own.sum(axis=1) == 1)


def test_shifted_head_is_offset_by_one():
    ds = default_dataset(0)
    te = prior_table(ds.test, 6, 8)
    assert np.all(te.argmax(axis=1) == 1)


@settings(max_examples=15)
@given(st.integers(0, 10_000), st.floats(0.125, 1.0), st.floats(0.5, 1.0))
def test_scores_and_ground_truth_invariants(seed, kappa, acc):
    cfg = SynthConfig(train_size=50, test_size=20, kappa=kappa, annotator_accuracy=acc, seed=seed)
    ds = generate(cfg)
    for s in (ds.train, ds.test):
        assert np.all((s.scores >= 0) & (s.scores <= 1))
        assert np.all(s.scores.max(axis=1) > 0)
        np.testing.assert_allclose(s.scores.sum(axis=1), 1.0, rtol=1e-6)
        rec = s[0]
        v = s.votes[0]
        assert rec.answers == frozenset(np.flatnonzero(v == v.max()).tolist())
        np.testing.assert_array_equal(s.ground_truth_mask()[0], v == v.max())


def test_soft_scores_are_votes_over_annotators():
    s = generate(small()).train
    np.testing.assert_allclose(s.scores, s.votes / 10, atol=1e-7)
    assert set(np.unique(s.scores)) <= {np.float32(k / 10) for k in range(11)}


@pytest.mark.parametrize("kw", [dict(num_region_classes=40), dict(regions_per_image=1), dict(answers_per_type=1),
                                dict(kappa=0.05), dict(kappa=1.1), dict(train_size=0),
                                dict(num_question_types=1, answers_per_type=8, num_region_classes=8)])
def test_invalid_configs(kw):
    with pytest.raises(ConfigError):
        SynthConfig(**kw)


def test_prior_table_empty_split_rejected():
    s = generate(small()).train.subset(np.array([], dtype=int))
    with pytest.raises(ValueError):
        prior_table(s, 6, 8)
