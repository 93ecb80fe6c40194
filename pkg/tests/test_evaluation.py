from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats as sps

from lsslnode.evaluation import (
    FinetuneConfig,
    SplitLeakage,
    auc,
    auc_triplet,
    evaluate_node_cls,
    finetune_age_regression,
    finetune_predict_next_visit,
    norm_groups,
    tail_scores,
    trajectory_norm_analysis,
    welch_ttest,
)
from lsslnode.models import init_bundle
from lsslnode.synthdata import PairDataset, SequenceDataset, generate_cohort, make_pair_dataset, make_sequence_dataset


def brute_auc(scores, labels):
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    wins = sum(1.0 if p > n else 0.5 if p == n else 0.0 for p in pos for n in neg)
    return wins / (len(pos) * len(neg))


def test_auc_worked_example():
    assert auc([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1]) == 0.75


def test_auc_separable_flipped_and_tied():
    assert auc([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1]) == 1.0
    s, y = [0.3, 0.1, 0.7, 0.5, 0.2], [1, 0, 1, 0, 0]
    assert auc(s, 1 - np.array(y)) == pytest.approx(1.0 - auc(s, y))
    assert auc([0.5] * 4, [0, 1, 0, 1]) == 0.5


def test_auc_single_class_is_undefined():
    with pytest.raises(ValueError, match="undefined"):
        auc([0.1, 0.2], [1, 1])
    with pytest.raises(ValueError):
        auc([0.1, 0.2], [0, 2])


score_lists = st.lists(st.integers(-5, 5).map(float), min_size=2, max_size=40)


@settings(max_examples=200, deadline=None)
@given(score_lists, st.data())
def test_auc_matches_pair_counting(scores, data):
    labels = data.draw(st.lists(st.integers(0, 1), min_size=len(scores), max_size=len(scores)))
    if len(set(labels)) < 2:
        return
    assert auc(scores, labels) == pytest.approx(brute_auc(scores, labels), abs=1e-12)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-10, 10, allow_nan=False), min_size=4, max_size=30), st.randoms())
def test_auc_invariant_under_monotone_transform(scores, rnd):
    labels = [i % 2 for i in range(len(scores))]
    rnd.shuffle(labels)
    transformed = [math.atan(3.0 * s) + s**3 for s in scores]
    assert auc(transformed, labels) == pytest.approx(auc(scores, labels), abs=1e-12)


def test_random_scores_give_half():
    rng = np.random.default_rng(0)
    vals = [auc(rng.random(2000), rng.permutation(np.repeat([0, 1], 1000))) for _ in range(5)]
    assert all(abs(v - 0.5) < 0.05 for v in vals)


def _welch_longhand(a, b):
    ma, mb = np.mean(a), np.mean(b)
    va, vb = np.var(a, ddof=1), np.var(b, ddof=1)
    na, nb = len(a), len(b)
    se = math.sqrt(va / na + vb / nb)
    t = (ma - mb) / se
    df = (va / na + vb / nb) ** 2 / ((va / na) ** 2 / (na - 1) + (vb / nb) ** 2 / (nb - 1))
    return t, df, sps.t.sf(t, df)


@pytest.mark.parametrize("seed", range(5))
def test_welch_matches_reference(seed):
    rng = np.random.default_rng(seed)
    a = rng.normal(0.3, 1.0, size=37)
    b = rng.normal(0.0, 2.5, size=120)
    t, df, p = welch_ttest(a, b)
    lt, ldf, lp = _welch_longhand(a, b)
    assert t == pytest.approx(lt, abs=1e-10) and df == pytest.approx(ldf, abs=1e-10)
    assert p == pytest.approx(lp, abs=1e-10)
    ref = sps.ttest_ind(a, b, equal_var=False, alternative="greater")
    assert p == pytest.approx(ref.pvalue, abs=1e-10)
    assert t == pytest.approx(ref.statistic, abs=1e-10)


def test_welch_identical_and_separated_groups():
    a = np.random.default_rng(1).normal(size=50)
    t, _, p = welch_ttest(a, a.copy())
    assert t == 0.0 and p == pytest.approx(0.5)
    rng = np.random.default_rng(2)
    fast, slow = rng.normal(2.0, 0.1, 300), rng.normal(1.0, 0.1, 300)
    assert welch_ttest(fast, slow)[2] < 1e-10
    assert welch_ttest(slow, fast)[2] > 1 - 1e-10
    with pytest.raises(ValueError):
        welch_ttest([1.0], [1.0, 2.0])


def test_tail_scores_and_triplet():
    probs = np.array([[0.5, 0.2, 0.1, 0.1, 0.1], [0.0, 0.0, 0.0, 0.5, 0.5]])
    tails = tail_scores(probs)
    np.testing.assert_allclose(tails["mild+"], [0.5, 1.0])
    np.testing.assert_allclose(tails["moderate+"], [0.3, 1.0])
    np.testing.assert_allclose(tails["severe+"], [0.2, 1.0])
    out = auc_triplet(probs, [0, 4])
    assert out == {"auc_mild+": 1.0, "auc_moderate+": 1.0, "auc_severe+": 1.0}
    assert math.isnan(auc_triplet(probs, [0, 0])["auc_mild+"])


# ---------------------------------------------------------------- task runners on a small cohort


@pytest.fixture(scope="module")
def small():
    c = generate_cohort(300, 5)
    return c, make_sequence_dataset(c), make_pair_dataset(c)


FAST = FinetuneConfig(epochs=2, seed=0)


def test_age_regression_reports_years_and_beats_zero_predictor(small):
    c, seqs, _ = small
    rep = finetune_age_regression(None, seqs, FinetuneConfig(epochs=8, seed=0))
    art = rep.artifacts
    assert rep.metrics["mse"] == pytest.approx(np.mean((art["pred"] - art["age"]) ** 2))
    test_ages = [v.age for s in seqs.split("test").sequences() for v in s.visits]
    np.testing.assert_array_equal(np.sort(art["age"]), np.sort(test_ages))
    assert rep.metrics["mse"] < np.mean(np.square(test_ages))


def test_age_regression_detects_split_leakage(small):
    c, seqs, _ = small
    test_ids = [s.subject_id for s in seqs.split("test").sequences()]
    bad = SequenceDataset(c, seqs.subject_ids + test_ids[:1], seqs.split_tags + ["train"])
    with pytest.raises(SplitLeakage):
        finetune_age_regression(None, bad, FAST)


def test_pretrained_encoder_is_not_mutated(small):
    _, seqs, _ = small
    b = init_bundle("LSSL", 0)
    before = [p.data.copy() for p in b.encoder.parameters()]
    finetune_age_regression(b, seqs, FAST, "LSSL")
    assert all(np.array_equal(a, p.data) for a, p in zip(before, b.encoder.parameters()))


def test_next_visit_windows_and_aucs(small):
    _, seqs, _ = small
    rep = finetune_predict_next_visit(None, seqs, FAST)
    n_windows = sum(len(s.visits) - 3 for s in seqs.split("test").sequences())
    assert rep.artifacts["probs"].shape == (n_windows, 5)
    np.testing.assert_allclose(rep.artifacts["probs"].sum(axis=1), 1.0)
    for v in rep.metrics.values():
        assert math.isnan(v) or 0.0 <= v <= 1.0
    sev = tail_scores(rep.artifacts["probs"])["severe+"]
    assert rep.metrics["auc_severe+"] == auc(sev, (rep.artifacts["grades"] >= 3).astype(int))


def test_next_visit_rejects_short_sequences(small):
    c, _, _ = small
    short = [s for s in c.subjects if len(s.visits) == 3 and s.split == "train"][:1]
    bad = SequenceDataset(c, [s.subject_id for s in short], ["train"])
    with pytest.raises(ValueError, match="visits"):
        finetune_predict_next_visit(None, bad, FAST)


def test_node_cls_requires_node_weights_and_exports_scores(small):
    _, _, pairs = small
    with pytest.raises(ValueError, match="NODE"):
        evaluate_node_cls(init_bundle("LSSL", 0), pairs, FAST)
    rep = evaluate_node_cls(init_bundle("S_LSSL_NODE", 0), pairs, FAST, "S_LSSL_NODE")
    tails = tail_scores(rep.artifacts["probs"])
    for name, k in (("mild+", 1), ("moderate+", 2), ("severe+", 3)):
        labels = (rep.artifacts["grades"] >= k).astype(int)
        if 0 < labels.sum() < len(labels):
            assert rep.metrics[f"auc_{name}"] == auc(tails[name], labels)


def test_norm_groups_are_held_out_and_one_pair_each(small):
    c, _, _ = small
    groups = norm_groups(c, 30, seed=0)
    for speed, g in groups.items():
        assert len(g) == len({p.subject_id for p in g.pairs})
        assert all(p.split != "train" for p in g.pairs)
        subj = {s.subject_id: s for s in c.subjects}
        assert all(subj[p.subject_id].speed == speed for p in g.pairs)
    again = norm_groups(c, 30, seed=0)
    assert [p for p in again["fast"].pairs] == [p for p in groups["fast"].pairs]


def test_norm_analysis_outputs(small):
    c, _, _ = small
    groups = norm_groups(c, 30, seed=0)
    plain = trajectory_norm_analysis(init_bundle("AE", 0), groups, "AE")
    assert set(plain) == {"dz"}
    node = trajectory_norm_analysis(init_bundle("LSSL_NODE", 0), groups, "LSSL_NODE")
    assert set(node) == {"dz", "dz_node"}
    fast, slow = node["dz"]
    assert fast.group == "fast" and slow.group == "slow" and fast.n == len(groups["fast"])
    assert 0.0 <= fast.p_value <= 1.0 and fast.std >= 0.0
    # zero-initialised flow: every predicted displacement vanishes
    assert node["dz_node"][0].mean == 0.0


def test_norm_analysis_guards(small):
    c, _, _ = small
    train_pairs = make_pair_dataset(c, require_grade_change=False).split("train")
    with pytest.raises(SplitLeakage):
        trajectory_norm_analysis(None, {"fast": train_pairs, "slow": train_pairs})
    one = PairDataset(c, norm_groups(c, 30)["fast"].pairs[:1])
    with pytest.raises(ValueError, match="fewer than two"):
        trajectory_norm_analysis(None, {"fast": one, "slow": one})
