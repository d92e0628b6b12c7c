import logging
from collections import namedtuple
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Tuple

import numpy as np
import pandas as pd
from scipy import ndimage
from scipy.stats import norm
from sklearn.metrics import auc, average_precision_score, roc_curve

try:
	from .util import DataError, UsageError, atomic_write_text, parallel_map
except ImportError:
	from util import DataError, UsageError, atomic_write_text, parallel_map

logger = logging.getLogger(__name__)

Score = namedtuple('Score', ['value', 'degenerate'])
Components = namedtuple('Components', ['labels', 'count', 'sizes'])

# 4-connectivity
_CROSS = ndimage.generate_binary_structure(2, 1)


@dataclass
class ConfusionCounts:
	TP: int = 0
	FP: int = 0
	TN: int = 0
	FN: int = 0

	@property
	def total(self):
		return self.TP + self.FP + self.TN + self.FN

	def __add__(self, other):
		return ConfusionCounts(self.TP + other.TP, self.FP + other.FP, self.TN + other.TN, self.FN + other.FN)


@dataclass
class CurveData:
	x: np.ndarray
	y: np.ndarray
	thresholds: np.ndarray
	kind: str = 'ROC'

	def to_frame(self):
		return pd.DataFrame({'threshold': self.thresholds, 'x': self.x, 'y': self.y})


@dataclass
class TumorMatch:
	tp: int
	M: int
	N: int
	fp: int
	merges: int = 0


@dataclass
class MetricsReport:
	counts: ConfusionCounts
	precision: Score
	recall: Score
	f_beta: Score
	beta: float
	accuracy: Score
	fp_rate: Score
	tanimoto: Score
	auc: float
	auc_ci: Tuple[float, float]
	pr_auc: float
	roc: CurveData
	froc: Optional[CurveData]
	tumors: TumorMatch
	confusion_percent: np.ndarray
	per_image: pd.DataFrame = field(default_factory=pd.DataFrame)


def _binary(labels):
	labels = np.asarray(labels)
	return (labels == 1).astype(np.int8)


def confusion(predicted, truth):
	"""Counts with +1 as the positive (cancerous) class; anything else is negative."""
	predicted, truth = np.asarray(predicted), np.asarray(truth)
	if len(predicted) != len(truth):
		raise DataError(f"{len(predicted)} predictions but {len(truth)} true labels")
	if len(truth) == 0:
		raise DataError("confusion needs at least one prediction")
	p, t = _binary(predicted), _binary(truth)
	return ConfusionCounts(int((p & t).sum()), int((p & (1 - t)).sum()),
						   int(((1 - p) & (1 - t)).sum()), int(((1 - p) & t).sum()))


def _ratio(num, den):
	if den == 0: return Score(0.0, True)
	return Score(num / den, False)


def precision_recall(counts):
	return _ratio(counts.TP, counts.TP + counts.FP), _ratio(counts.TP, counts.TP + counts.FN)


def detection_accuracy(counts):
	return _ratio(counts.TP + counts.TN, counts.total)


def fp_rate(counts):
	return _ratio(counts.FP, counts.FP + counts.TN)


def f_beta(P, R, beta=1.0):
	P, R = float(getattr(P, 'value', P)), float(getattr(R, 'value', R))
	den = beta ** 2 * P + R
	if den == 0: return Score(0.0, True)
	return Score((1 + beta ** 2) * P * R / den, False)


def tanimoto(tp, M, N):
	if min(tp, M, N) < 0:
		raise DataError("tumor counts must be non-negative")
	if tp > min(M, N):
		raise DataError(f"tumor TP={tp} exceeds min(M={M}, N={N})")
	return _ratio(tp, M + N - tp)


def confusion_matrix_percent(counts):
	"""Row-normalized percentages; rows true (cancerous, healthy), columns predicted."""
	mat = np.array([[counts.TP, counts.FN], [counts.FP, counts.TN]], dtype=np.float64)
	rows = mat.sum(axis=1, keepdims=True)
	degenerate = bool((rows == 0).any())
	out = np.divide(100. * mat, rows, out=np.zeros_like(mat), where=rows > 0)
	return out, degenerate


def _check_scores(scores, labels):
	scores = np.asarray(scores, dtype=np.float64)
	y = _binary(labels)
	if len(scores) != len(y):
		raise DataError(f"{len(scores)} scores but {len(y)} labels")
	if not np.isfinite(scores).all():
		raise DataError("scores must be finite")
	if y.sum() == 0 or y.sum() == len(y):
		raise DataError("ROC analysis needs both classes present")
	return scores, y


def hanley_mcneil_ci(area, n_pos, n_neg, level=0.95):
	q1 = area / (2 - area)
	q2 = 2 * area ** 2 / (1 + area)
	var = (area * (1 - area) + (n_pos - 1) * (q1 - area ** 2) + (n_neg - 1) * (q2 - area ** 2)) / (n_pos * n_neg)
	z = norm.ppf(0.5 + level / 2)
	half = z * np.sqrt(max(var, 0.))
	return float(np.clip(area - half, 0, 1)), float(np.clip(area + half, 0, 1))


def roc_auc(scores, labels):
	"""TPR-vs-FPR curve over every distinct score (descending), trapezoidal AUC, Hanley-McNeil 95% CI."""
	scores, y = _check_scores(scores, labels)
	fpr, tpr, thresholds = roc_curve(y, scores, pos_label=1, drop_intermediate=False)
	area = float(auc(fpr, tpr))
	ci = hanley_mcneil_ci(area, int(y.sum()), int(len(y) - y.sum()))
	return CurveData(fpr, tpr, thresholds, 'ROC'), area, ci


def pr_auc(scores, labels):
	scores, y = _check_scores(scores, labels)
	return float(average_precision_score(y, scores))


def connected_components(grid):
	grid = np.asarray(grid) > 0
	labels, count = ndimage.label(grid, structure=_CROSS)
	sizes = np.bincount(labels.ravel(), minlength=count + 1)[1:]
	return Components(labels, int(count), sizes)


def tumor_match(detected, truth, coverage=0.25):
	"""Tumor-level matching of detected components against truth tumors on a tile grid.

	A truth tumor is detected when one component covers at least `coverage`
	of its tiles. Pairs are taken greedily by overlap (ties: lower component
	index, then lower truth index); each truth is matched once, a component
	may absorb several truths and each extra one counts as a merge. A
	component that overlaps no truth tumor is a false positive.
	"""
	detected, truth = np.asarray(detected), np.asarray(truth)
	if detected.shape != truth.shape:
		raise DataError(f"detection grid {detected.shape} and truth grid {truth.shape} differ")
	det, tru = connected_components(detected), connected_components(truth)
	overlap = np.zeros((det.count + 1, tru.count + 1), dtype=np.int64)
	np.add.at(overlap, (det.labels.ravel(), tru.labels.ravel()), 1)
	overlap = overlap[1:, 1:]

	pairs = [(-overlap[d, t], d, t) for d in range(det.count) for t in range(tru.count)
			 if overlap[d, t] > 0 and overlap[d, t] >= coverage * tru.sizes[t]]
	matched_truth, per_component = set(), np.zeros(det.count, dtype=np.int64)
	for _, d, t in sorted(pairs):
		if t in matched_truth: continue
		matched_truth.add(t)
		per_component[d] += 1
	merges = int(np.maximum(per_component - 1, 0).sum())
	fp = int((overlap.sum(axis=1) == 0).sum())
	if merges: logger.debug(f"{merges} truth tumors merged into shared detections")
	return TumorMatch(len(matched_truth), det.count, tru.count, fp, merges)


def tumor_tanimoto(match):
	# merged detections can give TP > M
	return tanimoto(min(match.tp, match.M, match.N), match.M, match.N)


def tumor_burden(grid):
	grid = np.asarray(grid)
	if grid.size == 0: return Score(0.0, True)
	return Score(float((grid > 0).mean()), False)


def froc(score_grids, truth_grids, coverage=0.25):
	"""Tumor sensitivity vs mean false-positive tumors per image, thresholds descending then -inf.

	A tile is detected at threshold h when its score >= h.
	"""
	if len(score_grids) != len(truth_grids) or len(score_grids) == 0:
		raise DataError("froc needs one score grid per truth grid, at least one image")
	n_truth = sum(connected_components(g).count for g in truth_grids)
	if n_truth == 0:
		raise DataError("froc needs at least one truth tumor in the dataset")
	values = np.unique(np.concatenate([np.asarray(s, dtype=np.float64).ravel() for s in score_grids]))
	values = values[np.isfinite(values)]
	thresholds = np.append(values[::-1], -np.inf)
	xs, ys = [], []
	for h in thresholds:
		matches = [tumor_match(np.asarray(s) >= h, t, coverage) for s, t in zip(score_grids, truth_grids)]
		ys.append(sum(m.tp for m in matches) / n_truth)
		xs.append(sum(m.fp for m in matches) / len(matches))
	return CurveData(np.array(xs), np.array(ys), thresholds, 'FROC')


@dataclass
class GaussianFit:
	mean: float
	std: float

	def pdf(self, x):
		x = np.asarray(x, dtype=np.float64)
		if self.std == 0:
			return np.where(x == self.mean, np.inf, 0.)
		return norm.pdf(x, loc=self.mean, scale=self.std)


def gaussian_fit(values):
	"""Sample mean and unbiased standard deviation."""
	values = np.asarray(values, dtype=np.float64)
	if len(values) < 2:
		raise UsageError("a Gaussian fit needs at least 2 values")
	return GaussianFit(float(values.mean()), float(values.std(ddof=1)))


def selection_bias(run_fn, seeds, threads=1, **kwargs):
	"""Run run_fn(seed, **kwargs) -> accuracy for every seed; returns (accuracies, GaussianFit)."""
	seeds = list(seeds)
	if len(seeds) < 2:
		raise UsageError(f"selection bias needs at least 2 runs, got {len(seeds)}")
	accuracies = np.array(parallel_map(run_fn, seeds, threads, desc='selection bias', **kwargs), dtype=np.float64)
	fit = gaussian_fit(accuracies)
	logger.info(f"selection bias over {len(seeds)} runs: mean {fit.mean:.4f}, std {fit.std:.4f}")
	return accuracies, fit


def training_size_curve(run_fn, sizes, threads=1, **kwargs):
	"""[(images per class, accuracy)] with run_fn(size, **kwargs) -> accuracy."""
	sizes = [int(s) for s in sizes]
	if not sizes or min(sizes) < 1:
		raise UsageError("training sizes must be >= 1")
	accuracies = parallel_map(run_fn, sizes, threads, desc='training size', **kwargs)
	return list(zip(sizes, [float(a) for a in accuracies]))


def metrics_report(table, truth_grids, tile, beta=1.0, coverage=0.25):
	"""Full report from a per-tile score table (image,row,col,score) and 0/1 truth grids keyed by image.

	A tile is predicted cancerous when its score >= 0.
	"""
	table = table.sort_values(['image', 'row', 'col'], kind='stable')
	missing = sorted(set(table['image']) - set(truth_grids))
	if missing:
		raise DataError(f"no true labels for images: {', '.join(map(str, missing[:5]))}")

	score_grids, truths, matches, rows = [], [], [], []
	scores, labels = [], []
	for image, grp in table.groupby('image', sort=True):
		truth = np.asarray(truth_grids[image])
		r, c = grp['row'].to_numpy() // tile, grp['col'].to_numpy() // tile
		s = grp['score'].to_numpy(dtype=np.float64)
		grid = np.full(truth.shape, -np.inf)
		grid[r, c] = s
		scores.append(s)
		labels.append(np.where(truth[r, c] > 0, 1, -1))
		score_grids.append(grid)
		truths.append(truth)
		m = tumor_match(grid >= 0, truth, coverage)
		matches.append(m)
		rows.append({'image': image, 'tiles': len(grp), 'burden': tumor_burden(grid >= 0).value,
					 'true_burden': tumor_burden(truth).value, 'tumor_tp': m.tp, 'M': m.M, 'N': m.N,
					 'tumor_fp': m.fp, 'merges': m.merges})

	scores, labels = np.concatenate(scores), np.concatenate(labels)
	counts = confusion(np.where(scores >= 0, 1, -1), labels)
	P, R = precision_recall(counts)
	roc, area, ci = roc_auc(scores, labels)
	percent, _ = confusion_matrix_percent(counts)

	total = TumorMatch(*(sum(getattr(m, f) for m in matches) for f in ('tp', 'M', 'N', 'fp', 'merges')))
	froc_curve = froc(score_grids, truths, coverage) if total.N > 0 else None
	return MetricsReport(counts, P, R, f_beta(P, R, beta), beta, detection_accuracy(counts), fp_rate(counts),
						 tumor_tanimoto(total), area, ci, pr_auc(scores, labels), roc, froc_curve, total,
						 percent, pd.DataFrame(rows))


def table_row(report):
	"""Precision, recall, F, Tanimoto, accuracy and AUC with its CI half-width, three decimals."""
	half = (report.auc_ci[1] - report.auc_ci[0]) / 2
	return ' '.join([
		f"P={report.precision.value:.3f}", f"R={report.recall.value:.3f}",
		f"F{report.beta:g}={report.f_beta.value:.3f}", f"T={report.tanimoto.value:.3f}",
		f"ACC={report.accuracy.value:.3f}", f"AUC={report.auc:.3f} ± {half:.3f}"])


def metrics_frame(report):
	c = report.counts
	row = {
		'TP': c.TP, 'FP': c.FP, 'TN': c.TN, 'FN': c.FN,
		'precision': report.precision.value, 'recall': report.recall.value,
		'f_beta': report.f_beta.value, 'beta': report.beta, 'accuracy': report.accuracy.value,
		'fp_rate': report.fp_rate.value, 'tanimoto': report.tanimoto.value,
		'auc': report.auc, 'auc_lo': report.auc_ci[0], 'auc_hi': report.auc_ci[1], 'pr_auc': report.pr_auc,
		'tumor_tp': report.tumors.tp, 'M': report.tumors.M, 'N': report.tumors.N,
		'tumor_fp': report.tumors.fp, 'merges': report.tumors.merges,
		'degenerate': ';'.join(name for name in ('precision', 'recall', 'f_beta', 'tanimoto')
							   if getattr(report, name).degenerate),
	}
	return pd.DataFrame([row])


def write_report(report, out_dir):
	"""metrics.csv, roc.csv, froc.csv and per_image.csv under out_dir."""
	out_dir = Path(out_dir)
	atomic_write_text(out_dir / 'metrics.csv', metrics_frame(report).to_csv(index=False))
	atomic_write_text(out_dir / 'roc.csv', report.roc.to_frame().to_csv(index=False))
	froc_frame = report.froc.to_frame() if report.froc is not None else pd.DataFrame(columns=['threshold', 'x', 'y'])
	atomic_write_text(out_dir / 'froc.csv', froc_frame.to_csv(index=False))
	atomic_write_text(out_dir / 'per_image.csv', report.per_image.to_csv(index=False))
	return out_dir
