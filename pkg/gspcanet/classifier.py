import logging
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np
from tqdm.auto import trange

try:
	from .util import DataError, ModelCompatibilityError, UsageError, make_rng
except ImportError:
	from util import DataError, ModelCompatibilityError, UsageError, make_rng

logger = logging.getLogger(__name__)


@dataclass
class SvmConfig:
	C: float = 1.0
	balanced: bool = True
	pos_weight: float = 1.0
	center: bool = True
	max_epochs: int = 200
	tol: float = 1e-6
	shuffle: bool = False

	def __post_init__(self):
		if self.C <= 0: raise UsageError(f"C must be > 0, got {self.C}")
		if self.pos_weight <= 0: raise UsageError(f"pos_weight must be > 0, got {self.pos_weight}")
		if self.max_epochs < 1: raise UsageError("max_epochs must be >= 1")
		if self.tol <= 0: raise UsageError("tol must be > 0")


@dataclass
class SvmModel:
	"""Linear max-margin classifier, score = w.x + b.

	offset = w.mu for the centre mu the solver worked around, so the
	regularized bias is b + offset.
	"""
	w: np.ndarray
	b: float
	C: float
	class_weight: Tuple[float, float] = (1.0, 1.0)
	n_iter: int = 0
	converged: bool = True
	dual_history: List[float] = field(default_factory=list)
	offset: float = 0.0

	@property
	def n_features(self):
		return len(self.w)


def class_weights(labels, balanced=True, pos_weight=1.0):
	"""(positive, negative) per-example weights.

	Balanced: 1/(2 n_y), each class carries half the loss. Otherwise 1/n.
	With pos_weight = 1 the weights sum to 1 over the examples.
	"""
	labels = np.asarray(labels)
	n = len(labels)
	if balanced:
		n_pos, n_neg = int((labels == 1).sum()), int((labels == -1).sum())
		return pos_weight / (2. * n_pos), 1. / (2. * n_neg)
	return pos_weight / n, 1. / n


def _check_xy(X, y):
	X = np.asarray(X, dtype=np.float64)
	y = np.asarray(y)
	if X.ndim != 2:
		raise DataError(f"features must be an n x d matrix, got shape {X.shape}")
	if len(y) != len(X):
		raise DataError(f"{len(X)} feature rows but {len(y)} labels")
	if not np.isin(y, (-1, 1)).all():
		raise DataError("labels must be -1 or +1")
	if not np.isfinite(X).all():
		raise DataError("features contain NaN or inf")
	if (y == 1).sum() == 0 or (y == -1).sum() == 0:
		raise DataError("svm training needs at least one example of each class")
	return X, y.astype(np.float64)


def _augment(X):
	# constant column carries the bias
	return np.concatenate([X, np.ones((len(X), 1))], axis=1)


def weighted_centre(X, y, balanced=True):
	"""Class-weighted feature mean; the midpoint of the two class means when balanced."""
	cw = class_weights(y, balanced)
	c = np.where(y > 0, cw[0], cw[1])
	return c @ X / c.sum()


def primal_objective(model, X, y):
	X, y = _check_xy(X, y)
	cw = np.where(y > 0, model.class_weight[0], model.class_weight[1])
	hinge = np.maximum(0., 1. - y * (X @ model.w + model.b))
	return float(0.5 * (model.w @ model.w + (model.b + model.offset) ** 2) + model.C * (cw * hinge).sum())


def dual_objective(alpha, wb):
	"""1/2 ||w||^2 - sum(alpha), minimized by the solver."""
	return float(0.5 * wb @ wb - alpha.sum())


def svm_train(X, y, config=None, seed=0, verbose=False):
	"""Dual coordinate descent for the L1-loss linear SVM.

	Minimizes 1/2 (||w||^2 + b_c^2) + C sum_i c_i hinge_i, where b_c is the
	bias measured at the class-weighted centre of the features (config.center)
	or at the origin. Examples are visited in index order unless
	config.shuffle, in which case each epoch uses a permutation drawn from
	make_rng(seed, epoch).
	"""
	config = config or SvmConfig()
	X, y = _check_xy(X, y)
	mu = weighted_centre(X, y, config.balanced) if config.center else np.zeros(X.shape[1])
	Xa = _augment(X - mu)
	n = len(Xa)
	cw = class_weights(y, config.balanced, config.pos_weight)
	upper = config.C * np.where(y > 0, cw[0], cw[1])
	qdiag = np.einsum('ij,ij->i', Xa, Xa)

	alpha = np.zeros(n)
	wb = np.zeros(Xa.shape[1])
	history = []
	converged = False

	if verbose: pbar = trange(config.max_epochs, desc='svm', leave=False)
	else: pbar = range(config.max_epochs)

	epoch = 0
	for epoch in pbar:
		order = make_rng(seed, epoch).permutation(n) if config.shuffle else range(n)
		max_pg = 0.
		for i in order:
			g = y[i] * (wb @ Xa[i]) - 1.
			if alpha[i] <= 0.: pg = min(g, 0.)
			elif alpha[i] >= upper[i]: pg = max(g, 0.)
			else: pg = g
			max_pg = max(max_pg, abs(pg))
			if pg != 0.:
				old = alpha[i]
				alpha[i] = min(max(old - g / qdiag[i], 0.), upper[i])
				wb += (alpha[i] - old) * y[i] * Xa[i]
		history.append(dual_objective(alpha, wb))
		if verbose: pbar.set_description(f"dual:{history[-1]:.4e} pg:{max_pg:.2e}")
		if max_pg < config.tol:
			converged = True
			break

	if not converged:
		logger.warning(f"svm stopped at the {config.max_epochs} epoch cap (max violation {max_pg:.2e})")
	logger.debug(f"svm: {epoch + 1} epochs, {int((alpha > 0).sum())} support vectors")
	w = wb[:-1].copy()
	offset = float(w @ mu)
	return SvmModel(w, float(wb[-1]) - offset, config.C, cw, epoch + 1, converged, history, offset)


def svm_decision(model, X):
	X = np.asarray(X, dtype=np.float64)
	if X.shape[-1] != model.n_features:
		raise ModelCompatibilityError(f"feature length {X.shape[-1]} does not match the model's {model.n_features}")
	return X @ model.w + model.b


def predict_labels(scores):
	# a score of exactly 0 is a positive
	return np.where(np.asarray(scores) >= 0, 1, -1)
