import numpy as np
import pytest

from neurodesk import classify, dbn, rbm, synth
from neurodesk.data import DimensionMismatchError


class TestFolds:
    def test_every_sample_in_one_fold(self):
        labels = np.repeat([0, 1], 10)
        plan = classify.kfold_split(labels, folds=5, seed=1)
        seen = np.concatenate([plan.split(f)[1] for f in range(5)])
        np.testing.assert_array_equal(np.sort(seen), np.arange(20))
        for f in range(5):
            _, test = plan.split(f)
            assert np.bincount(labels[test], minlength=2).tolist() == [2, 2]

    def test_class_counts_differ_by_at_most_one(self):
        labels = np.array([0] * 10 + [1] * 7 + [2] * 4)
        plan = classify.kfold_split(labels, folds=3, seed=5)
        for cls in range(3):
            counts = np.bincount(plan.assignment[labels == cls], minlength=3)
            assert counts.max() - counts.min() <= 1
        sizes = np.bincount(plan.assignment, minlength=3)
        assert sizes.max() - sizes.min() <= 1

    def test_seeded(self):
        labels = np.repeat([0, 1], 15)
        a = classify.kfold_split(labels, 4, seed=9).assignment
        b = classify.kfold_split(labels, 4, seed=9).assignment
        np.testing.assert_array_equal(a, b)

    def test_too_many_folds(self):
        with pytest.raises(ValueError):
            classify.kfold_split([0, 1, 0], folds=4)

    def test_holdout_per_class(self):
        flag = classify.holdout_split(np.repeat([0, 1], 10), fraction=0.2, seed=3)
        assert flag[:10].sum() == 2 and flag[10:].sum() == 2


class TestScores:
    def test_macro_f_by_hand(self):
        assert classify.macro_f_score([0, 0, 1, 1], [0, 1, 1, 1]) == pytest.approx((2 / 3 + 0.8) / 2, abs=1e-10)

    def test_missing_class_scores_zero(self):
        assert classify.per_class_f_scores([0, 0], [0, 1]) == {0: pytest.approx(2 / 3), 1: 0.0}
        assert classify.macro_f_score([0, 0], [0, 1]) == pytest.approx(1 / 3)

    def test_perfect_and_symmetric(self):
        assert classify.macro_f_score([1, 0, 1], [1, 0, 1]) == 1.0
        # one error per class on balanced data: macro F equals accuracy
        assert classify.macro_f_score([0, 0, 1, 1, 1, 0], [0, 0, 0, 1, 1, 1]) == pytest.approx(4 / 6)

    def test_length_mismatch(self):
        with pytest.raises(DimensionMismatchError):
            classify.macro_f_score([0, 1], [0])


class TestKnn:
    def test_majority_vote(self):
        train = np.array([[0.0], [1.0], [10.0], [11.0]])
        pred = classify.knn_classify(train, [0, 0, 1, 1], np.array([[0.4], [10.6]]), k=3)
        np.testing.assert_array_equal(pred, [0, 1])

    def test_vote_tie_goes_to_lower_class(self):
        train = np.array([[0.0], [2.0]])
        pred = classify.knn_classify(train, [1, 0], np.array([[1.0]]), k=2)
        np.testing.assert_array_equal(pred, [0])

    def test_duplicate_rows_same_prediction(self, rng):
        train = rng.normal(size=(12, 3))
        labels = np.repeat([0, 1, 2], 4)
        test = np.repeat(rng.normal(size=(1, 3)), 3, axis=0)
        pred = classify.knn_classify(train, labels, test, k=5)
        assert len(set(pred.tolist())) == 1

    def test_k_out_of_range(self):
        with pytest.raises(ValueError):
            classify.knn_classify(np.zeros((2, 1)), [0, 1], np.zeros((1, 1)), k=3)


class TestLogReg:
    def test_gradient_matches_finite_differences(self, rng):
        model = classify.LogRegModel(rng.normal(size=(3, 2)), rng.normal(size=2))
        x = rng.normal(size=(4, 3))
        y = np.array([0, 1, 1, 0])
        _, gW, gb = classify.logreg_loss_and_gradient(model, x, y, l2=1e-4)
        analytic = np.concatenate([gW.ravel(), gb])

        numeric = np.zeros_like(analytic)
        step = 1e-6
        for k, (arr, idx) in enumerate([(model.W, i) for i in np.ndindex(3, 2)] + [(model.b, (i,)) for i in range(2)]):
            keep = arr[idx]
            arr[idx] = keep + step
            up, _, _ = classify.logreg_loss_and_gradient(model, x, y, l2=1e-4)
            arr[idx] = keep - step
            down, _, _ = classify.logreg_loss_and_gradient(model, x, y, l2=1e-4)
            arr[idx] = keep
            numeric[k] = (up - down) / (2 * step)
        assert np.linalg.norm(analytic - numeric) / np.linalg.norm(analytic) < 1e-5

    def test_separable_one_dimensional(self):
        x = np.array([[-3.0], [-2.0], [-1.0], [1.0], [2.0], [3.0]])
        y = np.array([0, 0, 0, 1, 1, 1])
        model, losses = classify.logreg_train(x, y)
        np.testing.assert_array_equal(classify.logreg_predict(model, x), y)
        assert np.all(np.diff(losses) <= 1e-12)

    def test_zero_model_predicts_class_zero(self):
        model = classify.LogRegModel(np.zeros((2, 3)), np.zeros(3))
        np.testing.assert_array_equal(classify.logreg_predict(model, np.ones((4, 2))), 0)

    def test_width_checked(self):
        model = classify.LogRegModel(np.zeros((2, 2)), np.zeros(2))
        with pytest.raises(DimensionMismatchError):
            classify.logreg_predict(model, np.zeros((1, 3)))


def test_standardize_uses_training_statistics():
    train = np.array([[0.0, 5.0], [2.0, 5.0]])
    test = np.array([[4.0, 7.0]])
    z_train, z_test = classify.standardize(train, test)
    np.testing.assert_allclose(z_train, [[-1.0, 0.0], [1.0, 0.0]])
    # constant training column maps to 0 everywhere
    np.testing.assert_allclose(z_test, [[3.0, 0.0]])


def _small_experiment(labels_shuffle_seed=None, folds=3, n_per_class=12, protocol="cv"):
    spec = synth.SynthSpec(grid=(8, 8), R=2, widths=1.5, seed=4)
    data, labels = synth.generate_labeled(spec, n_per_class=n_per_class, effect=2.0)
    if labels_shuffle_seed is not None:
        labels = np.random.default_rng(labels_shuffle_seed).permutation(labels)
    return classify.depth_experiment(
        data, labels, [6, 4],
        rbm.RbmTrainConfig(epochs=2, l1=0.0, batch_size=5),
        dbn.FineTuneConfig(epochs=5, learning_rate=0.05),
        folds=folds, seed=1, knn_k=3, protocol=protocol,
    )


class TestDepthExperiment:
    def test_table_layout(self):
        table = _small_experiment()
        assert list(table.columns) == ["depth", "classifier", "mean_f", "sd_f", "folds", "f_class_0", "f_class_1"]
        assert sorted(set(table["depth"])) == ["1", "2", "raw"]
        assert len(table) == 6
        assert (table["folds"] == 3).all()
        assert table["mean_f"].between(0.0, 1.0).all()

    def test_deterministic(self):
        a = _small_experiment()
        b = _small_experiment()
        assert a.equals(b)

    def test_all_protocol_scores_every_row_once(self):
        table = _small_experiment(protocol="all")
        assert list(table.columns) == ["depth", "classifier", "mean_f", "sd_f", "folds", "f_class_0", "f_class_1"]
        assert len(table) == 6
        assert (table["folds"] == 1).all()
        assert (table["sd_f"] == 0.0).all()
        raw = table.set_index(["depth", "classifier"]).loc[("raw", "KNN"), "mean_f"]
        assert raw > 0.5

    def test_unknown_protocol(self):
        with pytest.raises(ValueError, match="protocol"):
            classify.depth_experiment(np.zeros((4, 2)), [0, 1, 0, 1], [2], rbm.RbmTrainConfig(),
                                      dbn.FineTuneConfig(), protocol="loo")

    def test_label_count_checked(self):
        with pytest.raises(DimensionMismatchError):
            classify.depth_experiment(np.zeros((4, 2)), [0, 1], [2], rbm.RbmTrainConfig(), dbn.FineTuneConfig())


@pytest.mark.slow
def test_depth_beats_raw_on_labeled_defaults(shipped_config):
    from neurodesk.config import SynthRunConfig

    cohort = SynthRunConfig.model_validate(shipped_config("synth_cohort"))
    data, labels = synth.generate_labeled(
        cohort.spec, cohort.n_per_class, cohort.effect, cohort.noise, cohort.amplitude_sd)
    run = shipped_config("eval_depth", "rbm", "finetune")
    table = classify.depth_experiment(
        data, labels, run["layer_sizes"],
        rbm.RbmTrainConfig.model_validate(run["rbm"]),
        dbn.FineTuneConfig.model_validate(run["finetune"]),
        folds=run["folds"], seed=run["seed"], knn_k=run["knn_k"],
    ).set_index(["depth", "classifier"])
    for clf in ("KNN", "LR"):
        assert table.loc[("3", clf), "mean_f"] > table.loc[("raw", clf), "mean_f"]


@pytest.mark.slow
def test_shuffled_labels_stay_near_chance():
    table = _small_experiment(labels_shuffle_seed=7, folds=5, n_per_class=50)
    assert (np.abs(table["mean_f"] - 0.5) <= 0.15).all()
