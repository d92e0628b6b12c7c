import logging

import numpy as np
import torch

try:
	from .util import SolverError, UsageError
except ImportError:
	from util import SolverError, UsageError

logger = logging.getLogger(__name__)

## all kernels run in float64 on cpu; inputs/outputs are numpy arrays
context = dict(device='cpu', dtype=torch.float64)


def _as_tensor(matrix):
	return torch.as_tensor(np.ascontiguousarray(matrix, dtype=np.float64)).to(**context)


def fix_signs(V, U=None):
	"""Flip columns so the largest-magnitude entry of each column of V is positive.

	Ties on magnitude resolve to the lowest row index. U (if given) is flipped
	alongside so U @ diag(S) @ V.T is unchanged.
	"""
	V = np.array(V, dtype=np.float64, copy=True)
	if V.size == 0: return V if U is None else (V, U)
	idx = np.argmax(np.abs(V), axis=0)
	sgn = np.sign(V[idx, np.arange(V.shape[1])])
	sgn[sgn == 0] = 1.
	V *= sgn[None, :]
	if U is None: return V
	U = np.array(U, dtype=np.float64, copy=True) * sgn[None, :]
	return V, U


@torch.no_grad()
def sym_eigen(S, k=None):
	"""Top-k eigenpairs of a symmetric matrix, eigenvalues descending."""
	S = np.asarray(S, dtype=np.float64)
	if S.ndim != 2 or S.shape[0] != S.shape[1]:
		raise UsageError(f"sym_eigen needs a square matrix, got shape {S.shape}")
	n = S.shape[0]
	if k is None: k = n
	if not 1 <= k <= n:
		raise UsageError(f"k={k} outside [1, {n}]")
	scale = np.abs(S).max() if S.size else 0.
	if np.abs(S - S.T).max() > 1e-10 * max(scale, 1e-300):
		raise UsageError("sym_eigen input is not symmetric")
	if not np.isfinite(S).all():
		raise SolverError("sym_eigen input has non-finite entries")

	eigvals, eigvecs = torch.linalg.eigh(_as_tensor((S + S.T) / 2))
	eigvals = eigvals.flip(-1)[:k].numpy()
	eigvecs = eigvecs.flip(-1)[:, :k].numpy()
	return eigvals.copy(), fix_signs(eigvecs)


@torch.no_grad()
def thin_svd(X):
	"""X = U diag(S) V.T with singular values descending."""
	X = np.asarray(X, dtype=np.float64)
	if X.ndim != 2 or min(X.shape) < 1:
		raise UsageError(f"thin_svd needs a non-empty matrix, got shape {X.shape}")
	U, S, Vh = torch.linalg.svd(_as_tensor(X), full_matrices=False)
	V, U = fix_signs(Vh.transpose(-1, -2).numpy(), U.numpy())
	return U, S.numpy().copy(), V


@torch.no_grad()
def project2orthogonal(matrix, rank=None):
	"""Nearest matrix with orthonormal columns: U @ Vh from the thin SVD.

	This is the Procrustes solution argmax_A Tr(A^T M) s.t. A^T A = I.
	"""
	matrix = _as_tensor(matrix)
	if rank is None: rank = min(matrix.shape[-2:])
	try:
		U, S, Vh = torch.linalg.svd(matrix, full_matrices=False)
		final = U[..., :rank] @ Vh[..., :rank, :]
		if torch.any(torch.isnan(final)) or torch.any(torch.isinf(final)):
			raise RuntimeError("svd produced non-finite factors")
	except RuntimeError as e:
		logger.warning(f'svd failed ({e}), falling back to eigh, shape = {tuple(matrix.shape)}')
		# M = U S Vh  =>  M^T M = V S^2 Vh ; U = M V S^-1
		eigvals, V = torch.linalg.eigh(matrix.transpose(-1, -2) @ matrix)
		V = V[..., -rank:].flip(-1)
		U = matrix @ V
		U, R = torch.linalg.qr(U)
		U = U.mul_(R.diagonal(dim1=-1, dim2=-2).sign()[..., None, :])
		final = U @ V.transpose(-1, -2)
		S = eigvals[..., -rank:].flip(-1).clamp(min=0).sqrt()
	final = final.numpy().copy()
	assert np.abs(final.T @ final - np.eye(final.shape[1])).max() < 1e-8
	return final, S[..., :rank].numpy().copy()
