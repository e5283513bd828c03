import csv
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from timnet.diffcore import RngStream
from timnet.eval import (
    EvalReport, FoldResult, confusion, cross_eval, export_embeddings, kfold_split, per_class_recall,
    run_cv, run_cv_protocols, uar_war,
)
from timnet.model import ModelConfig, forward, init_timnet
from timnet.train import Dataset, TrainConfig


def tally(preds, labels, K):
    M = [[0] * K for _ in range(K)]
    for p, t in zip(preds, labels):
        M[t][p] += 1
    return np.array(M)


def exact_metrics(M):
    """UAR and WAR as exact fractions, then rounded once."""
    recalls = [Fraction(int(M[i][i]), int(sum(M[i]))) for i in range(len(M)) if sum(M[i]) > 0]
    total = sum(int(v) for row in M for v in row)
    war = Fraction(sum(int(M[i][i]) for i in range(len(M))), total)
    return float(sum(recalls) / len(recalls)), float(war)


confusions = st.integers(2, 6).flatmap(
    lambda K: st.lists(st.lists(st.integers(0, 50), min_size=K, max_size=K), min_size=K, max_size=K)
).filter(lambda M: sum(map(sum, M)) > 0)


# --- confusion and metrics ----------------------------------------------------------


def test_confusion_matches_tally(rng):
    preds, labels = rng.integers(0, 5, 1000), rng.integers(0, 5, 1000)
    np.testing.assert_array_equal(confusion(preds, labels, 5), tally(preds, labels, 5))


def test_confusion_edge_cases():
    np.testing.assert_array_equal(confusion([], [], 3), np.zeros((3, 3)))
    np.testing.assert_array_equal(confusion([0, 1, 1], [0, 1, 1], 2), [[1, 0], [0, 2]])
    with pytest.raises(ValueError):
        confusion([3], [0], 3)


def test_worked_example():
    assert uar_war([[10, 0], [15, 15]]) == (0.75, 0.625)


def test_perfect_and_balanced():
    assert uar_war(np.diag([3, 4, 5])) == (1.0, 1.0)
    uar, war = uar_war([[3, 1, 0], [2, 2, 0], [0, 1, 3]])
    assert uar == war


def test_empty_matrix_rejected():
    with pytest.raises(ValueError):
        uar_war(np.zeros((3, 3)))


def test_absent_class_excluded_from_uar():
    assert uar_war([[4, 0, 0], [0, 0, 0], [1, 0, 1]])[0] == pytest.approx(0.75)


@settings(max_examples=200, deadline=None)
@given(M=confusions)
def test_metrics_match_exact_oracle(M):
    uar, war = uar_war(M)
    want_uar, want_war = exact_metrics(M)
    assert abs(uar - want_uar) <= 1e-12 and abs(war - want_war) <= 1e-12
    recalls = per_class_recall(M)
    assert recalls.min() - 1e-12 <= uar <= recalls.max() + 1e-12
    assert 0 <= war <= 1


@settings(max_examples=100, deadline=None)
@given(M=confusions, seed=st.integers(0, 2**32 - 1))
def test_metrics_permutation_invariant(M, seed):
    M = np.array(M)
    perm = np.random.default_rng(seed).permutation(len(M))
    a, b = uar_war(M), uar_war(M[np.ix_(perm, perm)])
    assert a[0] == pytest.approx(b[0], abs=1e-12) and a[1] == pytest.approx(b[1], abs=1e-12)


# --- fold plans --------------------------------------------------------------------------


def test_kfold_even_split():
    plan = kfold_split(100, 10, seed=1)
    assert [len(f) for f in plan.folds] == [10] * 10
    np.testing.assert_array_equal(np.sort(np.concatenate(plan.folds)), np.arange(100))


def test_kfold_uneven_split():
    sizes = sorted(len(f) for f in kfold_split(103, 10).folds)
    assert sizes == [10] * 7 + [11] * 3


def test_kfold_is_deterministic_per_seed():
    a, b, c = kfold_split(50, 5, 3), kfold_split(50, 5, 3), kfold_split(50, 5, 4)
    assert all(np.array_equal(x, y) for x, y in zip(a.folds, b.folds))
    assert not all(np.array_equal(x, y) for x, y in zip(a.folds, c.folds))


@settings(max_examples=100, deadline=None)
@given(n=st.integers(2, 300), data=st.data())
def test_kfold_partitions(n, data):
    k = data.draw(st.integers(2, min(n, 20)))
    plan = kfold_split(n, k, seed=data.draw(st.integers(0, 1000)))
    allidx = np.concatenate(plan.folds)
    assert len(allidx) == n and len(set(allidx.tolist())) == n
    sizes = [len(f) for f in plan.folds]
    assert max(sizes) - min(sizes) <= 1 and min(sizes) >= 1
    for i in range(k):
        assert not set(plan.train_indices(i)) & set(plan.folds[i].tolist())


def test_kfold_errors():
    with pytest.raises(ValueError):
        kfold_split(5, 6)
    with pytest.raises(ValueError):
        kfold_split(10, 2, protocol="median")


def test_grouped_folds_keep_groups_together():
    groups = [f"spk{i % 4}" for i in range(40)]
    plan = kfold_split(40, 4, groups=groups)
    for fold in plan.folds:
        assert len({groups[i] for i in fold}) == 1
    with pytest.raises(ValueError):
        kfold_split(40, 5, groups=groups)


# --- cross-validation -------------------------------------------------------------------------


def toy(rng, n=12, K=3, T=8, F=3):
    labels = np.arange(n) % K
    return Dataset(rng.normal(size=(n, T, F)) + 2 * labels[:, None, None], labels, [f"k{i}" for i in range(K)])


def cfg_for(data, **kw):
    base = dict(n_classes=len(data.vocab), input_T=data.features.shape[1], n_tabs=2, channels=4,
                n_features=data.features.shape[2])
    base.update(kw)
    return ModelConfig(**base)


def test_two_fold_report_aggregates(rng):
    data = toy(rng)
    reports = run_cv_protocols(data, cfg_for(data), TrainConfig(epochs=3), kfold_split(len(data), 2))
    for r in reports.values():
        assert len(r.folds) == 2
        assert r.war == pytest.approx(np.mean([f.war for f in r.folds]))
        assert r.uar == pytest.approx(np.mean([f.uar for f in r.folds]))
        assert r.total_confusion.sum() == len(data)
    for last, best in zip(reports["last"].folds, reports["best"].folds):
        assert best.war >= last.war


def test_run_cv_single_protocol_matches_pair(rng):
    data = toy(rng)
    plan = kfold_split(len(data), 2, protocol="last")
    single = run_cv(data, cfg_for(data), TrainConfig(epochs=2), plan)
    both = run_cv_protocols(data, cfg_for(data), TrainConfig(epochs=2), plan)
    assert single.war == both["last"].war


def test_missing_class_warns_and_proceeds(rng):
    data = toy(rng, n=12)
    labels = data.labels.copy()
    labels[labels == 2] = 0
    labels[0] = 2
    data = Dataset(data.features, labels, data.vocab)
    reports = run_cv_protocols(data, cfg_for(data), TrainConfig(epochs=1), kfold_split(12, 3))
    assert any("k2" in w for w in reports["best"].warnings)
    assert len(reports["best"].folds) == 3


def test_report_csv(tmp_path):
    rep = EvalReport([FoldResult(0, np.diag([2, 2]), 1.0, 1.0, 7), FoldResult(1, np.array([[1, 1], [0, 2]]), 0.75, 0.75, 3)],
                     "best", ["a", "b"])
    rep.to_csv(tmp_path / "r.csv")
    rows = list(csv.reader(open(tmp_path / "r.csv")))
    assert rows[0] == ["fold", "protocol", "epoch", "n_items", "uar", "war"]
    assert rows[-1][:2] == ["mean", "**"] and float(rows[-1][5]) == 0.875


# --- cross-corpus and embeddings ---------------------------------------------------------------


def test_cross_eval_on_source_matches_in_domain(rng):
    data = toy(rng)
    cfg = cfg_for(data)
    params = init_timnet(cfg, RngStream(0))
    params.labels = list(data.vocab)
    rep = cross_eval(params, cfg, data)
    preds = forward(data.features, params, cfg).probs.value.argmax(1)
    assert (rep.uar, rep.war) == uar_war(confusion(preds, data.labels, 3))


def test_cross_eval_filters_to_shared_classes(rng):
    src_labels = ["angry", "calm", "fear", "happy", "sad"]
    cfg = ModelConfig(n_classes=5, input_T=8, n_tabs=2, channels=4, n_features=3)
    params = init_timnet(cfg, RngStream(1))
    params.labels = src_labels
    tgt_vocab = ["angry", "bored", "calm", "happy", "sad"]
    labels = np.arange(25) % 5
    target = Dataset(rng.normal(size=(25, 8, 3)), labels, tgt_vocab)
    rep = cross_eval(params, cfg, target)

    # manual filter: drop "bored", restrict columns to the four shared classes
    probs = forward(target.features, params, cfg).probs.value
    shared = ["angry", "calm", "happy", "sad"]
    M = np.zeros((4, 4), dtype=int)
    for p, lab in zip(probs, labels):
        name = tgt_vocab[lab]
        if name not in shared:
            continue
        cols = [p[src_labels.index(c)] for c in shared]
        M[shared.index(name), int(np.argmax(cols))] += 1
    np.testing.assert_array_equal(rep.total_confusion, M)
    assert rep.labels == shared
    assert M.sum() == 20 and rep.warnings


def test_cross_eval_without_shared_classes(rng):
    cfg = ModelConfig(n_classes=2, input_T=8, n_tabs=1, channels=2, n_features=3)
    params = init_timnet(cfg, RngStream(0))
    params.labels = ["a", "b"]
    with pytest.raises(ValueError, match="share no classes"):
        cross_eval(params, cfg, Dataset(rng.normal(size=(2, 8, 3)), [0, 1], ["x", "y"]))


def test_embedding_export(tmp_path, rng):
    data = toy(rng, n=9)
    cfg = cfg_for(data)
    export_embeddings(init_timnet(cfg, RngStream(0)), cfg, data, tmp_path / "e.csv")
    rows = list(csv.reader(open(tmp_path / "e.csv")))
    assert rows[0] == ["utterance_id", "c0", "c1", "c2", "c3"]
    assert len(rows) == 10 and all(len(r) == 5 for r in rows)
    assert [r[0] for r in rows[1:]] == data.ids
