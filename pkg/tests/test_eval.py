from collections import Counter

import numpy as np
import pytest

import gaitlrp.eval as ev
from conftest import make_dataset
from gaitlrp import nn
from gaitlrp.data import AgeGroup
from gaitlrp.errors import DivergenceError, EmptyDataset, EmptyMatrix, FoldError
from gaitlrp.eval import ConfusionMatrix, accuracy, zero_rule
from gaitlrp.lrp import read_relevance_csv

FAST = nn.TrainConfig(learning_rate=0.05, batch_size=8, epochs=15)


def majority_fraction(labels):
    counts = Counter(int(l) for l in labels)
    return max(counts.values()) / len(labels)


class TestZeroRule:
    def test_balanced(self):
        assert zero_rule(make_dataset([4, 4, 4])) == 1 / 3

    def test_counts_6_3_1(self):
        assert zero_rule([0] * 6 + [1] * 3 + [2]) == 0.6

    def test_minority_first_tie(self):
        assert zero_rule([2, 2, 1, 1]) == 0.5

    def test_matches_counting_oracle(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            per_class = rng.integers(0, 6, size=3)
            if per_class.sum() == 0:
                continue
            ds = make_dataset(per_class.tolist(), int(rng.integers(1, 4)))
            assert zero_rule(ds) == majority_fraction(ds.labels)

    def test_empty(self):
        with pytest.raises(EmptyDataset):
            zero_rule([])


class TestAccuracy:
    def test_identity(self):
        assert accuracy(ConfusionMatrix(np.eye(3, dtype=np.int64) * 4)) == 1.0

    def test_off_diagonal(self):
        assert accuracy(ConfusionMatrix(np.ones((3, 3), np.int64) - np.eye(3, dtype=np.int64))) == 0.0

    def test_diag_5_3_2(self):
        m = np.diag([5, 3, 2]).astype(np.int64)
        m[0, 1], m[1, 2], m[2, 0] = 4, 3, 3
        assert m.sum() == 20
        assert accuracy(ConfusionMatrix(m)) == 0.5

    def test_empty(self):
        with pytest.raises(EmptyMatrix):
            accuracy(ConfusionMatrix())

    def test_from_labels(self):
        cm = ConfusionMatrix.from_labels([0, 0, 1, 2, 2], [0, 1, 1, 2, 0])
        assert cm.counts.tolist() == [[1, 1, 0], [0, 1, 0], [1, 0, 1]]
        assert cm.total == 5


def test_subject_vote():
    ds = make_dataset([1, 1, 0], trials_per_subject=3)
    preds = np.array([0, 0, 1, 2, 1, 1])
    assert ev.subject_vote_accuracy(ds, preds) == 1.0
    assert ev.subject_vote_accuracy(ds, np.array([1, 1, 0, 0, 0, 1])) == 0.0


@pytest.fixture(scope="module")
def cv_small(small_cohort):
    return ev.run_cross_validation(small_cohort, k=5, train_cfg=FAST, seed=3, workers=1)


class TestCrossValidation:
    def test_bookkeeping(self, small_cohort, cv_small):
        r = cv_small
        assert r.confusion.total == len(small_cohort) == 90
        assert r.confusion.counts.sum(axis=1).tolist() == [30, 30, 30]
        assert np.all(r.predictions >= 0)
        assert sorted(Counter(r.fold_of_trial.tolist()).values()) == [18] * 5
        for sid, idx in small_cohort.subjects.items():
            assert len({int(r.fold_of_trial[i]) for i in idx}) == 1

    def test_mean_sd_recomputed(self, cv_small):
        acc = cv_small.fold_accuracies
        mean = sum(acc) / len(acc)
        sd = (sum((a - mean) ** 2 for a in acc) / len(acc)) ** 0.5
        assert abs(cv_small.accuracy_mean - mean) < 1e-12
        assert abs(cv_small.accuracy_sd - sd) < 1e-12

    def test_pooled_accuracy_consistent(self, small_cohort, cv_small):
        labels = small_cohort.label_array()
        assert accuracy(cv_small.confusion) == np.mean(cv_small.predictions == labels)

    def test_profiles_cover_every_trial(self, cv_small):
        assert sum(p.n_trials for p in cv_small.profiles.values()) == 90
        assert cv_small.total_relevance.shape == (6, 40)
        assert cv_small.zero_rule == 1 / 3

    def test_deterministic_and_worker_independent(self, small_cohort, cv_small):
        again = ev.run_cross_validation(small_cohort, k=5, train_cfg=FAST, seed=3, workers=2)
        assert again.fold_accuracies == cv_small.fold_accuracies
        assert np.array_equal(again.confusion.counts, cv_small.confusion.counts)
        for g in AgeGroup:
            assert (again.profiles[g].mean_relevance.tobytes()
                    == cv_small.profiles[g].mean_relevance.tobytes())

    def test_normalization_fitted_on_training_subjects(self, small_cohort, monkeypatch):
        seen = []
        real = ev.fit_norm_params

        def spy(dataset, subject_ids):
            seen.append(frozenset(subject_ids))
            return real(dataset, subject_ids)

        monkeypatch.setattr(ev, "fit_norm_params", spy)
        cfg = nn.TrainConfig(epochs=1)
        ev.run_cross_validation(small_cohort, k=5, train_cfg=cfg, seed=3, workers=1)
        split = ev.stratified_subject_kfold(small_cohort, 5, 3)
        assert seen == [split.train_subjects(f) for f in range(5)]
        assert all(not (s & split.test_subjects(f)) for f, s in enumerate(seen))

    def test_flat_and_averaged_layouts(self, small_cohort):
        cfg = nn.TrainConfig(epochs=1)
        flat = ev.run_cross_validation(small_cohort, 3, cfg, seed=0, layout="flat", workers=1)
        avg = ev.run_cross_validation(small_cohort, 3, cfg, seed=0, sides="average", workers=1)
        assert flat.total_relevance.shape == (6, 40)
        assert avg.total_relevance.shape == (3, 40)
        assert avg.channels == (("avg", "AP"), ("avg", "ML"), ("avg", "V"))

    def test_divergence_reports_fold(self, small_cohort):
        with pytest.raises(FoldError) as err:
            ev.run_cross_validation(small_cohort, 5, nn.TrainConfig(1e300, 8, 3), seed=0, workers=1)
        assert err.value.fold == 0
        assert isinstance(err.value.cause, DivergenceError)


def test_fold_workers_env(monkeypatch):
    monkeypatch.setenv("GAITLRP_THREADS", "3")
    assert ev.fold_workers() == 3
    monkeypatch.delenv("GAITLRP_THREADS")
    assert ev.fold_workers() >= 1


def test_export_report(tmp_path, cv_small):
    paths = ev.export_report(cv_small, tmp_path / "rep")
    names = {p.name for p in paths}
    assert {"metrics.txt", "relevance.csv", "total_relevance.svg",
            "class_Young_L_AP.svg", "class_Older_R_V.svg"} <= names
    assert len(names) == 2 + 18 + 1
    metrics = ev.read_metrics(tmp_path / "rep" / "metrics.txt")
    assert metrics["accuracy_mean"] == cv_small.accuracy_mean
    assert metrics["accuracy_sd"] == cv_small.accuracy_sd
    assert metrics["zero_rule"] == cv_small.zero_rule
    assert metrics["fold_accuracies"] == cv_small.fold_accuracies
    assert metrics["n_trials"] == 90
    np.testing.assert_array_equal(metrics["confusion_matrix"], cv_small.confusion.counts)
    profiles, total = read_relevance_csv(tmp_path / "rep" / "relevance.csv")
    np.testing.assert_array_equal(total, cv_small.total_relevance)
    for g in AgeGroup:
        np.testing.assert_array_equal(profiles[g].mean_signal, cv_small.profiles[g].mean_signal)


def test_export_unwritable(tmp_path, cv_small):
    (tmp_path / "f").write_text("")
    with pytest.raises(OSError):
        ev.export_report(cv_small, tmp_path / "f" / "rep")
