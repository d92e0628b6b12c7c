"""Tile- and tumor-level metrics, ROC/FROC curves and the experiment harnesses."""

import numpy as np
import pandas as pd
import pytest
from scipy.stats import norm

from gspcanet.evaluation import (
	ConfusionCounts,
	TumorMatch,
	confusion,
	confusion_matrix_percent,
	connected_components,
	detection_accuracy,
	f_beta,
	fp_rate,
	froc,
	gaussian_fit,
	hanley_mcneil_ci,
	metrics_report,
	pr_auc,
	precision_recall,
	roc_auc,
	selection_bias,
	table_row,
	tanimoto,
	training_size_curve,
	tumor_burden,
	tumor_match,
	tumor_tanimoto,
	write_report,
)
from gspcanet.util import DataError, UsageError


def _accuracy_of_seed(seed):
	return 0.8 + 0.01 * seed


def _mann_whitney(scores, labels):
	pos, neg = scores[labels == 1], scores[labels == -1]
	diff = pos[:, None] - neg[None, :]
	return ((diff > 0).sum() + 0.5 * (diff == 0).sum()) / diff.size


class TestTileMetrics:
	def test_confusion(self):
		counts = confusion([1, 1, -1, -1], [1, -1, -1, 1])
		assert counts == ConfusionCounts(1, 1, 1, 1)
		assert detection_accuracy(counts).value == 0.5

	def test_precision_without_positive_predictions(self):
		P, R = precision_recall(confusion([-1, -1], [1, -1]))
		assert P.degenerate and P.value == 0.
		assert R.value == 0. and not R.degenerate

	def test_f1(self):
		assert f_beta(0.872, 0.955).value == pytest.approx(0.912, abs=5e-4)

	def test_f_beta_weights_recall(self):
		assert f_beta(0.5, 1.0, beta=2.).value > f_beta(0.5, 1.0, beta=1.).value

	def test_fp_rate(self):
		assert fp_rate(ConfusionCounts(TP=3, FP=1, TN=3, FN=0)).value == 0.25

	def test_tanimoto(self):
		assert tanimoto(5, 6, 7).value == pytest.approx(5 / 8)
		assert tanimoto(0, 0, 0).degenerate
		with pytest.raises(DataError):
			tanimoto(4, 3, 5)

	def test_length_mismatch(self):
		with pytest.raises(DataError):
			confusion([1], [1, -1])

	def test_confusion_percent(self):
		pct, degenerate = confusion_matrix_percent(ConfusionCounts(TP=3, FP=1, TN=3, FN=1))
		np.testing.assert_allclose(pct, [[75., 25.], [25., 75.]])
		assert not degenerate
		_, degenerate = confusion_matrix_percent(ConfusionCounts(TP=0, FP=1, TN=3, FN=0))
		assert degenerate


class TestRoc:
	def test_constant_scores(self):
		_, area, _ = roc_auc(np.zeros(6), np.array([1, 1, 1, -1, -1, -1]))
		assert area == pytest.approx(0.5)

	def test_perfect(self):
		curve, area, ci = roc_auc(np.array([3., 2., -1., -2.]), np.array([1, 1, -1, -1]))
		assert area == 1.
		assert curve.x[0] == 0. and curve.y[-1] == 1.
		assert ci[1] == 1.

	@pytest.mark.parametrize('seed', range(100))
	def test_mann_whitney(self, seed):
		gen = np.random.default_rng(seed)
		n = int(gen.integers(2, 201))
		scores = np.round(gen.normal(size=n), 1)
		labels = np.where(gen.random(n) < 0.4, 1, -1)
		labels[:2] = [1, -1]
		_, area, (lo, hi) = roc_auc(scores, labels)
		assert area == pytest.approx(_mann_whitney(scores, labels), abs=1e-12)
		assert lo <= area <= hi

	def test_hanley_mcneil(self):
		# A = 0.8 with ten of each class: variance 0.0104
		lo, hi = hanley_mcneil_ci(0.8, 10, 10)
		assert (lo + hi) / 2 == pytest.approx(0.8)
		assert hi - lo == pytest.approx(2 * norm.ppf(0.975) * np.sqrt(0.0104))
		assert hanley_mcneil_ci(1., 10, 10) == (1., 1.)
		assert hanley_mcneil_ci(0.99, 2, 2)[1] == 1.

	def test_single_class(self):
		with pytest.raises(DataError):
			roc_auc(np.array([0.1, 0.2]), np.array([1, 1]))

	def test_pr_auc_perfect(self):
		assert pr_auc(np.array([2., 1., 0.]), np.array([1, 1, -1])) == 1.


class TestComponents:
	def test_diagonal_is_two(self):
		assert connected_components(np.eye(2)).count == 2

	def test_plus(self):
		grid = np.zeros((3, 3), dtype=int)
		grid[1, :] = grid[:, 1] = 1
		comps = connected_components(grid)
		assert comps.count == 1 and list(comps.sizes) == [5]

	def test_merge(self):
		truth = np.array([[1, 0, 1]])
		match = tumor_match(np.array([[1, 1, 1]]), truth)
		assert match == TumorMatch(tp=2, M=1, N=2, fp=0, merges=1)
		assert tumor_tanimoto(match).value == pytest.approx(0.5)

	def test_false_positive(self):
		match = tumor_match(np.array([[1, 0, 0, 1]]), np.array([[1, 0, 0, 0]]))
		assert (match.tp, match.M, match.N, match.fp) == (1, 2, 1, 1)

	def test_coverage(self):
		truth = np.zeros((4, 4), dtype=int)
		truth[:2, :2] = 1
		hit = np.zeros((4, 4), dtype=int)
		hit[0, 0] = 1
		assert tumor_match(hit, truth, coverage=0.25).tp == 1
		assert tumor_match(hit, truth, coverage=0.5).tp == 0

	def test_burden(self):
		assert tumor_burden(np.array([[1, 0], [0, 0]])).value == 0.25

	def test_froc(self):
		truth = [np.array([[1, 0, 0], [0, 0, 1]]), np.array([[0, 0, 0], [0, 1, 0]])]
		scores = [np.array([[0.9, 0.1, 0.2], [0.3, 0.0, 0.8]]), np.array([[0.5, 0.4, 0.1], [0.2, 0.7, 0.6]])]
		curve = froc(scores, truth)
		assert np.isneginf(curve.thresholds[-1])
		assert np.all(np.diff(curve.thresholds[:-1]) < 0)
		assert np.all(np.diff(curve.y) >= 0)
		assert curve.y[-1] == 1.
		# at the top score only the first image's corner tile is detected
		assert curve.y[0] == pytest.approx(1 / 3) and curve.x[0] == 0.


class TestExperiments:
	def test_gaussian_fit(self):
		fit = gaussian_fit([0.9, 0.8])
		assert fit.mean == pytest.approx(0.85)
		assert fit.std == pytest.approx(0.0707, abs=1e-4)
		assert fit.pdf(0.85) == pytest.approx(1 / (fit.std * np.sqrt(2 * np.pi)))

	def test_gaussian_fit_needs_two(self):
		with pytest.raises(UsageError):
			gaussian_fit([0.9])

	def test_selection_bias(self):
		acc, fit = selection_bias(_accuracy_of_seed, [0, 1, 2])
		np.testing.assert_allclose(acc, [0.8, 0.81, 0.82])
		assert fit.mean == pytest.approx(0.81)

	def test_selection_bias_one_run(self):
		with pytest.raises(UsageError):
			selection_bias(_accuracy_of_seed, [0])

	def test_training_size(self):
		assert training_size_curve(_accuracy_of_seed, [1, 2]) == [(1, pytest.approx(0.81)), (2, pytest.approx(0.82))]


def _table():
	rows = []
	for image, scores in (('a.pgm', [2., -1., 0.5, -2.]), ('b.pgm', [-1., -3., -0.5, 1.])):
		for i, s in enumerate(scores):
			rows.append({'image': image, 'row': 10 * (i // 2), 'col': 10 * (i % 2), 'score': s})
	return pd.DataFrame(rows)


class TestReport:
	truth = {'a.pgm': np.array([[1, 0], [1, 0]]), 'b.pgm': np.array([[0, 0], [0, 0]])}

	def test_counts_and_row(self):
		report = metrics_report(_table(), self.truth, tile=10)
		assert report.counts == ConfusionCounts(TP=2, FP=1, TN=5, FN=0)
		assert report.tumors.N == 1 and report.tumors.tp == 1
		row = table_row(report)
		assert row.startswith('P=0.667 R=1.000 F1=0.800')
		assert 'ACC=0.875' in row and 'AUC=' in row

	def test_missing_truth(self):
		with pytest.raises(DataError):
			metrics_report(_table(), {'a.pgm': self.truth['a.pgm']}, tile=10)

	def test_write(self, tmp_path):
		write_report(metrics_report(_table(), self.truth, tile=10), tmp_path)
		for name in ('metrics.csv', 'roc.csv', 'froc.csv', 'per_image.csv'):
			assert (tmp_path / name).is_file()
		per_image = pd.read_csv(tmp_path / 'per_image.csv')
		assert list(per_image['image']) == ['a.pgm', 'b.pgm']


class TestRocProperties:
	def test_monotone_curve(self, rng):
		curve, _, _ = roc_auc(rng.normal(size=50), np.where(rng.random(50) < 0.5, 1, -1))
		assert np.all(np.diff(curve.x) >= 0) and np.all(np.diff(curve.y) >= 0)

	def test_label_swap(self, rng):
		scores = rng.normal(size=60)
		labels = np.where(rng.random(60) < 0.3, 1, -1)
		_, area, _ = roc_auc(scores, labels)
		_, swapped, _ = roc_auc(-scores, -labels)
		assert swapped == pytest.approx(area, abs=1e-12)
		_, flipped, _ = roc_auc(-scores, labels)
		assert flipped == pytest.approx(1 - area, abs=1e-12)

	def test_f1_closed_form(self):
		P, R = 0.61, 0.83
		assert f_beta(P, R).value == pytest.approx(2 * P * R / (P + R), abs=1e-12)


class TestReportExtremes:
	truth = {'a.pgm': np.array([[1, 0], [1, 0]]), 'b.pgm': np.array([[0, 1], [0, 0]])}

	def _table(self, sign):
		rows = []
		for image, grid in self.truth.items():
			for r in range(2):
				for c in range(2):
					rows.append({'image': image, 'row': 10 * r, 'col': 10 * c,
								 'score': sign * (1. if grid[r, c] else -1.) * (1 + r + 2 * c)})
		return pd.DataFrame(rows)

	def test_perfect(self):
		report = metrics_report(self._table(1.), self.truth, tile=10)
		assert table_row(report).startswith('P=1.000 R=1.000 F1=1.000 T=1.000 ACC=1.000 AUC=1.000')

	def test_inverted(self):
		assert metrics_report(self._table(-1.), self.truth, tile=10).auc < 0.5
