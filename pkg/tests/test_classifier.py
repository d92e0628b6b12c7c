import numpy as np
import pytest

from gspcanet.classifier import (
	SvmConfig,
	SvmModel,
	class_weights,
	dual_objective,
	predict_labels,
	primal_objective,
	svm_decision,
	svm_train,
	weighted_centre,
)
from gspcanet.util import DataError, ModelCompatibilityError, UsageError

SEPARABLE_X = np.array([[2., 0.], [3., 1.], [2.5, -1.], [-2., 0.], [-3., -1.], [-2.5, 1.]])
SEPARABLE_Y = np.array([1, 1, 1, -1, -1, -1])


class TestTraining:
	def test_separable_margins(self):
		model = svm_train(SEPARABLE_X, SEPARABLE_Y, SvmConfig(C=100., max_epochs=2000))
		assert model.converged
		margins = SEPARABLE_Y * svm_decision(model, SEPARABLE_X)
		assert margins.min() >= 1 - 1e-4
		np.testing.assert_array_equal(predict_labels(svm_decision(model, SEPARABLE_X)), SEPARABLE_Y)

	def test_dual_history_non_increasing(self, rng):
		X = rng.normal(size=(40, 5))
		y = np.where(X[:, 0] + 0.3 * rng.normal(size=40) > 0, 1, -1)
		model = svm_train(X, y, SvmConfig(C=1., max_epochs=500))
		assert np.all(np.diff(model.dual_history) <= 1e-12)

	def test_zero_duality_gap(self, rng):
		X = rng.normal(size=(40, 5))
		y = np.where(X[:, 0] + 0.3 * rng.normal(size=40) > 0, 1, -1)
		model = svm_train(X, y, SvmConfig(C=1., max_epochs=2000, tol=1e-8))
		primal = primal_objective(model, X, y)
		assert primal == pytest.approx(-model.dual_history[-1], rel=1e-4)

	def test_deterministic(self, rng):
		X = rng.normal(size=(30, 4))
		y = np.where(X[:, 1] > 0, 1, -1)
		cfg = SvmConfig(shuffle=True)
		a, b = svm_train(X, y, cfg, seed=3), svm_train(X, y, cfg, seed=3)
		np.testing.assert_array_equal(a.w, b.w)
		assert a.b == b.b

	def test_single_class(self):
		with pytest.raises(DataError, match='each class'):
			svm_train(np.ones((3, 2)), np.ones(3))

	def test_nan_features(self):
		X = SEPARABLE_X.copy()
		X[0, 0] = np.nan
		with pytest.raises(DataError):
			svm_train(X, SEPARABLE_Y)

	def test_bad_config(self):
		with pytest.raises(UsageError):
			SvmConfig(C=0.)


class TestWeights:
	def test_balanced(self):
		assert class_weights(np.array([1, -1, -1, -1])) == (0.5, pytest.approx(1 / 6))

	def test_unbalanced(self):
		assert class_weights(np.array([1, -1, -1]), balanced=False) == (pytest.approx(1 / 3), pytest.approx(1 / 3))

	@pytest.mark.parametrize('balanced', [True, False])
	def test_weights_sum_to_one(self, rng, balanced):
		y = np.where(rng.random(17) < 0.3, 1, -1)
		y[:2] = [1, -1]
		cw = class_weights(y, balanced)
		assert np.where(y > 0, cw[0], cw[1]).sum() == pytest.approx(1.)

	def test_balanced_centre_is_class_midpoint(self):
		X = np.array([[2., 0.], [4., 0.], [0., 0.], [0., 3.], [0., 6.]])
		y = np.array([1, 1, -1, -1, -1])
		np.testing.assert_allclose(weighted_centre(X, y), [1.5, 1.5])

	@pytest.mark.parametrize('balanced', [True, False])
	def test_duplication_invariance(self, rng, balanced):
		X = rng.normal(size=(30, 4))
		y = np.where(X[:, 0] - 0.5 * X[:, 2] + 0.5 * rng.normal(size=30) > 0, 1, -1)
		cfg = SvmConfig(balanced=balanced, max_epochs=5000, tol=1e-10)
		single = svm_train(X, y, cfg)
		double = svm_train(np.concatenate([X, X]), np.concatenate([y, y]), cfg)
		np.testing.assert_allclose(double.w, single.w, atol=1e-6)
		assert double.b == pytest.approx(single.b, abs=1e-6)

	def test_positive_weight_never_lowers_recall(self):
		# overlapping classes on a line: one point of each class sits on the wrong side
		X = np.array([3., 2., 1., 0.2, -0.6, -3., -2., -1., -0.2, 0.6])[:, None]
		y = np.array([1] * 5 + [-1] * 5)
		recalls = []
		for pos_weight in (0.25, 0.5, 1., 2., 4., 8.):
			model = svm_train(X, y, SvmConfig(pos_weight=pos_weight, max_epochs=5000, tol=1e-9))
			predicted = predict_labels(svm_decision(model, X))
			recalls.append(np.mean(predicted[y == 1] == 1))
		assert np.all(np.diff(recalls) >= 0)


class TestDegenerate:
	def test_identical_features_predict_majority(self):
		# every score is the bias; unweighted hinge pulls it toward the larger class
		X = np.ones((7, 3))
		y = np.array([1, 1, -1, -1, -1, -1, -1])
		model = svm_train(X, y, SvmConfig(balanced=False, max_epochs=1000, tol=1e-9))
		accuracy = np.mean(predict_labels(svm_decision(model, X)) == y)
		assert accuracy == pytest.approx(5 / 7)
		assert model.b == pytest.approx(-3 / 7, abs=1e-6)

	def test_identical_features_balanced_is_a_tie(self):
		X = np.ones((7, 3))
		y = np.array([1, 1, -1, -1, -1, -1, -1])
		model = svm_train(X, y, SvmConfig(max_epochs=1000, tol=1e-9))
		assert np.all(np.isfinite(model.w))
		np.testing.assert_allclose(svm_decision(model, X), 0., atol=1e-6)

	def test_dual_objective(self):
		assert dual_objective(np.array([0.5, 0.25]), np.array([1., 2., 2.])) == pytest.approx(3.75)



class TestDecision:
	def test_linear_score(self):
		model = SvmModel(np.array([1., 0.]), 0., 1.)
		assert svm_decision(model, np.array([[3., 7.]]))[0] == 3.

	def test_zero_is_positive(self):
		np.testing.assert_array_equal(predict_labels([0., -1e-12, 2.]), [1, -1, 1])

	def test_dimension_mismatch(self):
		model = SvmModel(np.array([1., 0.]), 0., 1.)
		with pytest.raises(ModelCompatibilityError):
			svm_decision(model, np.ones((1, 3)))
