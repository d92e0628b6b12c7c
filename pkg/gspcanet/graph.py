import logging
from dataclasses import dataclass

import numpy as np
import scipy.sparse
from scipy.sparse import csr_matrix, diags
from scipy.spatial.distance import cdist
from sklearn.cluster import KMeans
from opt_einsum import contract

try:
	from .util import DataError, UsageError, make_rng
except ImportError:
	from util import DataError, UsageError, make_rng

logger = logging.getLogger(__name__)


@dataclass
class KnnGraph:
	n: int
	E: csr_matrix
	k: int


@dataclass
class Laplacian:
	L: csr_matrix
	C: csr_matrix

	@property
	def n(self):
		return self.L.shape[0]


def knn_indices(points, k, chunk=1024):
	"""k nearest neighbours of every column (self excluded, ties to the lower index)."""
	X = np.asarray(points, dtype=np.float64).T
	n = len(X)
	nbrs = np.empty((n, k), dtype=np.int64)
	for start in range(0, n, chunk):
		stop = min(start + chunk, n)
		d = cdist(X[start:stop], X, metric='sqeuclidean')
		d[np.arange(stop - start), np.arange(start, stop)] = np.inf
		# stable sort keeps index order among equal distances
		nbrs[start:stop] = np.argsort(d, axis=1, kind='stable')[:, :k]
	return nbrs


def build_knn(points, k=5):
	"""Symmetrized 0/1 kNN graph over the columns of a p x n matrix."""
	points = np.asarray(points, dtype=np.float64)
	if points.ndim != 2:
		raise DataError(f"points must be a p x n matrix, got shape {points.shape}")
	n = points.shape[1]
	if k < 1:
		raise UsageError(f"k must be >= 1, got {k}")
	if n <= k:
		raise DataError(f"kNN graph needs more than k={k} nodes, got {n}")
	nbrs = knn_indices(points, k)
	rows = np.repeat(np.arange(n), k)
	A = csr_matrix((np.ones(n * k), (rows, nbrs.ravel())), shape=(n, n))
	# self is never a neighbour, so the diagonal stays empty
	E = A.maximum(A.T).tocsr()
	return KnnGraph(n, E, k)


def laplacian(graph):
	E = graph.E if isinstance(graph, KnnGraph) else csr_matrix(graph)
	C = diags(np.asarray(E.sum(axis=1)).ravel()).tocsr()
	return Laplacian((C - E).tocsr(), C)


def graph_energy(X, L):
	"""Tr(X L X^T) = 1/2 sum_lm e_lm ||x_l - x_m||^2."""
	X = np.asarray(X, dtype=np.float64)
	L = L.L if isinstance(L, Laplacian) else L
	if X.ndim == 1: X = X[None, :]
	if X.shape[1] != L.shape[0]:
		raise DataError(f"X has {X.shape[1]} columns but the graph has {L.shape[0]} nodes")
	LXt = L @ X.T
	return float(contract('ij,ji->', X, LXt))


def graph_quadratic(X, L):
	"""X L X^T, the p x p matrix of the projected-smoothness penalty."""
	X = np.asarray(X, dtype=np.float64)
	L = L.L if isinstance(L, Laplacian) else L
	M = X @ (L @ X.T)
	return (M + M.T) / 2


def subsample(points, max_nodes=2000, seed=0, pool=None):
	"""Cluster centres standing in for the full point set.

	Returns (centres p x m, index map n) where index map[i] is the centre
	that point i belongs to. Identity when n <= max_nodes. pool, if set,
	caps the number of points handed to k-means (uniformly sampled).
	"""
	points = np.asarray(points, dtype=np.float64)
	if max_nodes < 2:
		raise UsageError(f"max_nodes must be >= 2, got {max_nodes}")
	n = points.shape[1]
	if n <= max_nodes:
		return points, np.arange(n)

	rng = make_rng(seed, 0x6B6D)
	X = points.T
	fit_X = X
	if pool is not None and n > pool:
		fit_X = X[np.sort(rng.choice(n, size=pool, replace=False))]
	init = fit_X[np.sort(rng.choice(len(fit_X), size=max_nodes, replace=False))]
	km = KMeans(n_clusters=max_nodes, init=init, n_init=1, max_iter=50, algorithm='lloyd', random_state=0)
	km.fit(fit_X)
	centers = km.cluster_centers_
	index_map = km.predict(X) if fit_X is not X else km.labels_
	logger.debug(f"subsampled {n} points to {max_nodes} centres in {km.n_iter_} Lloyd iterations")
	return centers.T.copy(), np.asarray(index_map, dtype=np.int64)


def graph_for_points(points, k=5, max_nodes=2000, seed=0, pool=None, groups=None):
	"""Subsample, build the kNN graph and its Laplacian.

	With groups (one label per column) a separate graph is built per group and
	the Laplacians are stacked block-diagonally. Returns (X_graph, Laplacian).
	"""
	points = np.asarray(points, dtype=np.float64)
	if groups is None:
		Xg, _ = subsample(points, max_nodes, seed, pool)
		return Xg, laplacian(build_knn(Xg, k))

	groups = np.asarray(groups)
	uniq = np.unique(groups)
	per_group = max(2, max_nodes // len(uniq))
	Xs, Ls = [], []
	for gi, g in enumerate(uniq):
		Xg, _ = subsample(points[:, groups == g], per_group, seed + gi, pool)
		Xs.append(Xg)
		Ls.append(laplacian(build_knn(Xg, k)).L)
	L = scipy.sparse.block_diag(Ls, format='csr')
	C = diags(np.asarray(L.diagonal())).tocsr()
	return np.concatenate(Xs, axis=1), Laplacian(L, C)
