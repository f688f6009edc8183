import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from wpfs import harness
from wpfs.harness import (DataError, Dataset, RunConfig, RunResult, TrainingDiverged, aggregate, balanced_accuracy,
                          load_csv, stratified_cv, synth_dataset, train_run, write_csv, zscore_fit_apply)


def recall_oracle(y, y_pred, C):
    recalls = []
    for c in range(C):
        idx = [i for i in range(len(y)) if y[i] == c]
        if idx:
            recalls.append(sum(1 for i in idx if y_pred[i] == c) / len(idx))
    return sum(recalls) / len(recalls)


def test_balanced_accuracy_examples():
    assert balanced_accuracy([0, 0, 1, 1], [0, 1, 1, 1], 2) == 0.75
    assert balanced_accuracy([0, 1, 2], [0, 1, 2], 3) == 1.0
    assert balanced_accuracy([0, 0, 1, 1, 2, 2], [1] * 6, 3) == pytest.approx(1 / 3)


def test_balanced_accuracy_warns_on_absent_class_and_rejects_bad_labels():
    with pytest.warns(UserWarning, match="absent"):
        assert balanced_accuracy([0, 0], [0, 1], 2) == 0.5
    with pytest.raises(ValueError):
        balanced_accuracy([0, 3], [0, 1], 2)
    with pytest.raises(ValueError):
        balanced_accuracy([], [], 2)


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 5).flatmap(lambda C: st.tuples(
    st.just(C), st.lists(st.tuples(st.integers(0, C - 1), st.integers(0, C - 1)), min_size=1, max_size=30))))
def test_balanced_accuracy_matches_oracle(case):
    C, pairs = case
    y, yp = [p[0] for p in pairs], [p[1] for p in pairs]
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        assert balanced_accuracy(y, yp, C) == recall_oracle(y, yp, C)


def check_plan(y, plan, k, repeats):
    y = np.asarray(y)
    n = len(y)
    assert len(plan.splits) == k * repeats
    classes, counts = np.unique(y, return_counts=True)
    for r in range(repeats):
        folds = [s for s in plan.splits if s.repeat == r]
        tests = np.concatenate([s.test for s in folds])
        assert np.array_equal(np.sort(tests), np.arange(n))
        for s in folds:
            parts = np.concatenate([s.train, s.val, s.test])
            assert np.array_equal(np.sort(parts), np.arange(n))
            for c, cnt in zip(classes, counts):
                in_test = np.sum(y[s.test] == c)
                assert cnt // k <= in_test <= -(-cnt // k)
                if np.sum(y[np.concatenate([s.train, s.val])] == c) >= 2:
                    assert np.sum(y[s.val] == c) >= 1
                    assert np.sum(y[s.train] == c) >= 1


@settings(max_examples=100, deadline=None)
@given(st.lists(st.integers(0, 3), min_size=10, max_size=60), st.integers(2, 5), st.integers(0, 1000))
def test_stratified_cv_invariants(labels, k, seed):
    y = np.array(labels)
    _, counts = np.unique(y, return_counts=True)
    if counts.min() < k:
        with pytest.raises(ValueError, match="class"):
            stratified_cv(y, k, 2, seed=seed)
        return
    check_plan(y, stratified_cv(y, k, 2, seed=seed), k, 2)


def test_stratified_cv_examples():
    y = np.array([0] * 5 + [1] * 5)
    plan = stratified_cv(y, 5, 1)
    for s in plan.splits:
        assert sorted(y[s.test].tolist()) == [0, 1]
    assert len(stratified_cv(np.arange(50) % 2, 5, 5).splits) == 25
    a, b = stratified_cv(y, 5, 2, seed=3), stratified_cv(y, 5, 2, seed=3)
    assert a.plan_id() == b.plan_id()
    with pytest.raises(ValueError, match="class 1"):
        stratified_cv([0] * 6 + [1] * 2, 5)


def test_zscore_examples():
    (tr, te), stats = zscore_fit_apply(np.array([[1.0, 4.0], [3.0, 4.0]]), np.array([[5.0, 9.0]]))
    np.testing.assert_array_equal(tr, [[-1, 0], [1, 0]])
    np.testing.assert_array_equal(te, [[3, 0]])


def test_synth_dataset_properties():
    a = synth_dataset(seed=7)
    b = synth_dataset(seed=7)
    assert a.X.shape == (150, 2000) and len(a.informative) == 10
    assert a.digest() == b.digest()
    assert np.bincount(a.y).tolist() == [75, 75]
    full = synth_dataset(n_samples=20, n_features=6, n_informative=6, seed=1)
    assert full.informative.tolist() == list(range(6))
    with pytest.raises(ValueError):
        synth_dataset(sigma=2.0)


def test_synth_three_classes_have_distinct_means():
    ds = synth_dataset(n_samples=90, n_features=30, n_informative=4, n_classes=3, sigma=0.0, seed=2)
    means = np.array([ds.X[ds.y == c][:, ds.informative].mean(axis=0) for c in range(3)])
    for i in range(3):
        for j in range(i + 1, 3):
            assert np.linalg.norm(means[i] - means[j]) >= 2.0


def test_csv_round_trip_and_label_mapping(tmp_path):
    ds = synth_dataset(n_samples=12, n_features=3, n_informative=1, seed=0)
    write_csv(ds, tmp_path / "d.csv")
    back = load_csv(tmp_path / "d.csv", "label")
    np.testing.assert_array_equal(back.X, ds.X)
    np.testing.assert_array_equal(back.y, ds.y)
    (tmp_path / "s.csv").write_text("a,cls\n1,dog\n2,cat\n3,dog\n")
    s = load_csv(tmp_path / "s.csv", "cls")
    assert s.class_names == ["dog", "cat"] and s.y.tolist() == [0, 1, 0]
    (tmp_path / "i.csv").write_text("a,cls\n1,5\n2,-1\n3,5\n")
    assert load_csv(tmp_path / "i.csv", "cls").y.tolist() == [1, 0, 1]


@pytest.mark.parametrize("text, match", [
    ("a,b\n1,0\n", "'y'"),
    ("a,y\n1,0\nx,1\n", "row 3, column 'a'"),
    ("a,y\n1,0\n2\n", "row 3"),
    ("a,y\n,0\n", "row 2"),
])
def test_csv_errors_name_the_location(tmp_path, text, match):
    (tmp_path / "bad.csv").write_text(text)
    with pytest.raises(DataError, match=match):
        load_csv(tmp_path / "bad.csv", "y")


def test_run_config_round_trip_and_validation():
    cfg = RunConfig.for_method("wpfs-nospn", sparsity_lambda=1e-3)
    assert cfg.method == "wpfs-nospn"
    assert RunConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ValueError):
        RunConfig.from_dict({"bogus": 1})
    with pytest.raises(ValueError):
        RunConfig(sparsity_lambda=-1)
    with pytest.raises(ValueError):
        RunConfig.for_method("svm")


def _result(acc, repeat=0, fold=0, plan="p"):
    return RunResult(repeat, fold, 0, acc, acc, 0.1, 0, 1, 1, "patience", [], np.zeros(1), None, None, {}, 0.0, plan)


def test_aggregate_ranks():
    one = aggregate({"d": {"A": [_result(0.9)]}})
    assert one["average_rank"] == {"A": 1.0}
    two = aggregate({"d1": {"A": [_result(0.9)], "B": [_result(0.8)]},
                     "d2": {"A": [_result(0.7)], "B": [_result(0.7)], "C": [_result(0.9)]}})
    assert two["datasets"]["d1"]["A"]["rank"] == 1 and two["datasets"]["d1"]["B"]["rank"] == 2
    assert two["datasets"]["d2"]["A"]["rank"] == 2.5
    assert two["average_rank"] == {"A": 1.75, "B": 2.25, "C": 1.0}


def test_aggregate_rejects_mismatched_plans():
    with pytest.raises(RuntimeError, match="fold plan"):
        aggregate({"d": {"A": [_result(0.9, plan="p")], "B": [_result(0.9, plan="q")]}})


SMALL = dict(n_samples=40, n_features=30, n_informative=3, seed=0)
FAST = dict(max_iterations=40, patience=3, nmf_iters=30, embedding_size=5, hidden=(8, 8, 4), aux_hidden=(8, 8))


def test_patience_returns_the_first_snapshot(monkeypatch):
    ds = synth_dataset(**SMALL)
    split = stratified_cv(ds.y, 5, 1).splits[0]
    losses = iter(range(1, 100))
    monkeypatch.setattr(harness, "_eval_loss", lambda *a: float(next(losses)))
    snaps = []
    orig = harness.fit

    def spy(model, *a, **kw):
        orig_snapshot = model.store.snapshot

        def snapshot():
            snaps.append(orig_snapshot())
            return snaps[-1]

        model.store.snapshot = snapshot
        return orig(model, *a, **kw)

    monkeypatch.setattr(harness, "fit", spy)
    res = train_run(ds, split, RunConfig(**{**FAST, "patience": 1, "max_iterations": 1000}), keep_model=True)
    assert res.epochs == 2 and res.best_epoch == 0 and res.stop_reason == "patience"
    assert len(snaps) == 1
    for k, v in snaps[0]["values"].items():
        np.testing.assert_array_equal(res.model.store.values[k], v)
    assert [c[2] for c in res.curves] == [1.0, 2.0]


def test_divergence_raises_with_curves(monkeypatch):
    ds = synth_dataset(**SMALL)
    split = stratified_cv(ds.y, 5, 1).splits[0]
    vals = iter([0.5, float("nan")])
    monkeypatch.setattr(harness, "_eval_loss", lambda *a: next(vals))
    with pytest.raises(TrainingDiverged) as e:
        train_run(ds, split, RunConfig(**FAST))
    assert len(e.value.curves) == 1


def test_run_is_deterministic_and_embeds_on_train_only(monkeypatch):
    ds = synth_dataset(**SMALL)
    split = stratified_cv(ds.y, 5, 1).splits[0]
    seen = []
    orig = harness.compute_embedding
    monkeypatch.setattr(harness, "compute_embedding", lambda X, *a, **k: (seen.append(X.shape), orig(X, *a, **k))[1])
    a = train_run(ds, split, RunConfig(**FAST))
    b = train_run(ds, split, RunConfig(**FAST))
    assert seen == [(len(split.train), ds.n_features)] * 2
    np.testing.assert_array_equal(a.step_losses, b.step_losses)
    assert a.to_dict() == b.to_dict()
    assert a.iterations == 40 and a.stop_reason == "max_iterations"


def test_noise_free_classes_are_learned():
    ds = synth_dataset(n_samples=60, n_features=40, n_informative=4, sigma=0.0, seed=3)
    split = stratified_cv(ds.y, 5, 1).splits[0]
    cfg = RunConfig(max_iterations=300, patience=30, nmf_iters=100, embedding_size=10)
    assert train_run(ds, split, cfg).test_balanced_accuracy == 1.0


def test_dataset_validation():
    with pytest.raises(DataError, match="class 1"):
        Dataset(np.ones((3, 2)), [0, 0, 2], 3, ["a", "b"])
    with pytest.raises(DataError):
        Dataset(np.ones((3, 2)), [0, 1], 2, ["a", "b"])
