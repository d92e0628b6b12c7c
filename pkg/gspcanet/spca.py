import logging
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np
from opt_einsum import contract
from tqdm.auto import tqdm, trange

try:
	from .numerics import fix_signs, project2orthogonal, sym_eigen
	from .graph import graph_quadratic
	from .util import SolverError, UsageError
except ImportError:
	from numerics import fix_signs, project2orthogonal, sym_eigen
	from graph import graph_quadratic
	from util import SolverError, UsageError

logger = logging.getLogger(__name__)

## shapes: X (p, n) columns are centered samples, G = X X^T (p, p)
## A, B, V (p, q); M = X_g L X_g^T (p, p) is the graph quadratic


@dataclass
class GsPcaConfig:
	q: int = 8
	lam: float = 1e-4
	lam1: float = 1e-3
	rho: float = 1e-2
	max_iter: int = 100
	tol: float = 1e-6
	enet_max_iter: int = 1000
	enet_tol: float = 1e-8
	lam1_per_component: Optional[Sequence[float]] = None

	def __post_init__(self):
		if self.q < 1: raise UsageError(f"q must be >= 1, got {self.q}")
		if min(self.lam, self.lam1, self.rho) < 0:
			raise UsageError("lam, lam1 and rho must be >= 0")
		if self.tol <= 0 or self.enet_tol <= 0:
			raise UsageError("tolerances must be > 0")
		if self.max_iter < 1 or self.enet_max_iter < 1:
			raise UsageError("iteration caps must be >= 1")
		if self.lam1_per_component is not None:
			self.lam1_per_component = [float(v) for v in self.lam1_per_component]
			if len(self.lam1_per_component) != self.q or min(self.lam1_per_component) < 0:
				raise UsageError(f"lam1_per_component needs {self.q} non-negative values")

	def lam1_vector(self):
		if self.lam1_per_component is not None:
			return np.asarray(self.lam1_per_component, dtype=np.float64)
		return np.full(self.q, self.lam1)


@dataclass
class Basis:
	V: np.ndarray
	sparsity: np.ndarray
	objective: float
	n_iter: int
	converged: bool
	history: List[float] = field(default_factory=list)
	variances: Optional[np.ndarray] = None
	rank_deficient: bool = False

	@property
	def q(self):
		return self.V.shape[1]


def _sparsity(V, eps=1e-8):
	return (np.abs(V) < eps).sum(axis=0)


def pca_svd(X, q):
	"""Top-q loadings of X (eigenvectors of X X^T), sign-fixed, descending."""
	X = np.asarray(X, dtype=np.float64)
	p, n = X.shape
	if not 1 <= q <= min(p, n):
		raise UsageError(f"q={q} must lie in [1, min(p, n)={min(p, n)}]")
	G = X @ X.T
	eigvals, V = sym_eigen((G + G.T) / 2, q)
	top = max(eigvals[0], 0.)
	if top <= 1e-300:
		raise SolverError("degenerate data: X is constant (zero variance), no basis exists")
	keep = eigvals > 1e-12 * top
	rank_deficient = not keep.all()
	if rank_deficient:
		logger.warning(f"X has rank {keep.sum()} < q={q}, returning {keep.sum()} components")
		eigvals, V = eigvals[keep], V[:, keep]
	return Basis(V, _sparsity(V), float(np.trace(G) - eigvals.sum()), 0, True,
				 variances=eigvals, rank_deficient=rank_deficient)


def soft_threshold(z, t):
	return np.sign(z) * np.maximum(np.abs(z) - t, 0.)


def _check_orthonormal(A, atol=1e-8):
	err = np.abs(A.T @ A - np.eye(A.shape[1])).max()
	if err > atol:
		raise SolverError(f"A must have orthonormal columns (max |A^T A - I| = {err:.2e})")


def _support_solve(Q, c, beta, t):
	"""Exact minimizer on the support of beta, or None if it flips a sign or breaks KKT off the support."""
	active = beta != 0
	if not active.any(): return None
	s = np.sign(beta[active])
	try:
		sol = np.linalg.solve(Q[np.ix_(active, active)], c[active] - t * s)
	except np.linalg.LinAlgError:
		return None
	if np.any(np.sign(sol) != s): return None
	cand = np.zeros_like(beta)
	cand[active] = sol
	slack = np.abs(c - Q @ cand)[~active]
	if slack.size and slack.max() > t + 1e-12 * max(1., np.abs(c).max()): return None
	return cand


def _enet_solve(G, M, A, lam, lam1, rho, B0=None, max_iter=1000, tol=1e-8):
	p, q = A.shape
	Q = G + lam * np.eye(p)
	if rho > 0 and M is not None: Q = Q + rho * M
	diag = np.diag(Q).copy()
	C = G @ A
	B = A.copy() if B0 is None else np.array(B0, dtype=np.float64, copy=True)
	n_sweeps = np.zeros(q, dtype=int)

	for j in range(q):
		c = C[:, j]
		# zero is optimal iff |2c|_inf <= lam1 (KKT of the l1 term at 0)
		if 2 * np.abs(c).max() <= lam1[j]:
			B[:, j] = 0.
			continue
		beta = B[:, j]
		g = Q @ beta
		for sweep in range(max_iter):
			max_delta, max_beta = 0., 0.
			for k in range(p):
				if diag[k] <= 0:
					new = 0.
				else:
					z = c[k] - (g[k] - diag[k] * beta[k])
					new = soft_threshold(z, lam1[j] / 2) / diag[k]
				delta = new - beta[k]
				if delta != 0.:
					g += delta * Q[:, k]
					beta[k] = new
				max_delta = max(max_delta, abs(delta))
				max_beta = max(max_beta, abs(new))
			n_sweeps[j] = sweep + 1
			if max_delta <= tol * max(1., max_beta): break
			# once the support settles, finish with one linear solve
			if (diag > 0).all():
				exact = _support_solve(Q, c, beta, lam1[j] / 2)
				if exact is not None:
					beta = exact
					break
		B[:, j] = beta
	return B, n_sweeps


def _graph_M(L_graph, X_graph):
	if L_graph is None or X_graph is None: return None
	return graph_quadratic(X_graph, L_graph)


def elastic_net_bstep(X, A, lam, lam1, rho=0., L_graph=None, X_graph=None, B0=None, max_iter=1000, tol=1e-8):
	"""Per-component elastic net with the graph quadratic, by cyclic coordinate descent.

	beta_j = argmin ||X^T a_j - X^T b||^2 + lam ||b||^2 + lam1_j ||b||_1 + rho b^T X_g L X_g^T b
	"""
	X = np.asarray(X, dtype=np.float64)
	A = np.asarray(A, dtype=np.float64)
	_check_orthonormal(A)
	lam1 = np.broadcast_to(np.asarray(lam1, dtype=np.float64), (A.shape[1],))
	if rho > 0 and (L_graph is None or X_graph is None):
		raise UsageError("rho > 0 needs a graph (L_graph and X_graph)")
	M = _graph_M(L_graph, X_graph) if rho > 0 else None
	B, _ = _enet_solve(X @ X.T, M, A, lam, lam1, rho, B0, max_iter, tol)
	return B


def a_step(X, B):
	"""Procrustes update: A = U V^T from the SVD of (X X^T) B."""
	X = np.asarray(X, dtype=np.float64)
	return _a_step(X @ X.T, B)


def _a_step(G, B):
	if not np.any(B):
		raise SolverError("a_step needs a nonzero B")
	A, _ = project2orthogonal(G @ B)
	return A


def gs_pca_objective(G, A, B, lam, lam1, rho=0., M=None):
	"""||X - A B^T X||_F^2 + lam ||B||^2 + sum_j lam1_j ||b_j||_1 + rho Tr(B^T M B), with G = X X^T."""
	lam1 = np.broadcast_to(np.asarray(lam1, dtype=np.float64), (B.shape[1],))
	GB = G @ B
	loss = np.trace(G) - 2 * contract('ij,ij->', A, GB) + contract('ij,ij->', B, GB)
	loss += lam * np.square(B).sum() + float(lam1 @ np.abs(B).sum(axis=0))
	if rho > 0 and M is not None:
		loss += rho * contract('ij,ik,kj->', B, M, B)
	return float(loss)


def gs_pca_fit(X, config, graph=None, verbose=False):
	"""Alternate B (elastic net) and A (Procrustes) steps from the PCA solution.

	graph is (X_graph, Laplacian) and is required when config.rho > 0.
	Returns a Basis with column-normalized V = b_j / ||b_j||.
	"""
	X = np.asarray(X, dtype=np.float64)
	q = config.q
	init = pca_svd(X, q)
	if init.rank_deficient:
		raise SolverError(f"data rank {init.q} is below the requested {q} components")

	M = None
	if config.rho > 0:
		if graph is None:
			raise UsageError("rho > 0 needs a graph; pass (X_graph, Laplacian)")
		X_graph, L_graph = graph
		if X_graph.shape[0] != X.shape[0]:
			raise SolverError(f"graph points have {X_graph.shape[0]} rows, X has {X.shape[0]}")
		M = _graph_M(L_graph, X_graph)

	G = X @ X.T
	lam1 = config.lam1_vector()
	A = init.V.copy()
	B = A.copy()
	history = [gs_pca_objective(G, A, B, config.lam, lam1, config.rho, M)]

	if verbose: pbar = trange(config.max_iter, desc='gs-pca', leave=False)
	else: pbar = range(config.max_iter)

	converged, iiter, rel = False, 0, np.nan
	for iiter in pbar:
		iiter += 1
		B_new, _ = _enet_solve(G, M, A, config.lam, lam1, config.rho, B, config.enet_max_iter, config.enet_tol)
		if not np.isfinite(B_new).all():
			raise SolverError(f"gs-pca diverged (non-finite B) at iteration {iiter}")
		if not np.any(B_new):
			raise SolverError(f"all loadings are zero at iteration {iiter}; use a smaller lam1")
		A = _a_step(G, B_new)
		loss = gs_pca_objective(G, A, B_new, config.lam, lam1, config.rho, M)
		if not np.isfinite(loss):
			raise SolverError(f"gs-pca diverged (non-finite objective) at iteration {iiter}")
		history.append(loss)

		rel = np.linalg.norm(B_new - B) / max(np.linalg.norm(B), 1e-300)
		B = B_new
		if isinstance(pbar, tqdm):
			pbar.set_description(f"loss:{loss:.4e} %diff:{rel:.2e}")
		if rel < config.tol:
			converged = True
			break

	norms = np.linalg.norm(B, axis=0)
	zero = np.where(norms <= 1e-300)[0]
	if len(zero):
		raise SolverError(f"components {zero.tolist()} are all-zero at convergence; use a smaller lam1")
	V = fix_signs(B / norms[None, :])
	logger.debug(f"gs-pca: {iiter} iterations, objective {history[-1]:.6e}, relative change {rel:.2e}")
	return Basis(V, _sparsity(V), history[-1], iiter, converged, history, init.variances)
