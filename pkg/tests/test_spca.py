"""PCA baseline, the elastic-net B-step, the Procrustes A-step and the alternating fit."""

import numpy as np
import pytest

from gspcanet.graph import build_knn, graph_energy, graph_for_points, laplacian
from gspcanet.numerics import fix_signs, thin_svd
from gspcanet.spca import (
	GsPcaConfig,
	a_step,
	elastic_net_bstep,
	gs_pca_fit,
	pca_svd,
	soft_threshold,
)
from gspcanet.util import SolverError, UsageError


def _enet_value(G, a, b, lam, lam1):
	# ||X^T a - X^T b||^2 + lam ||b||^2 + lam1 ||b||_1 with G = X X^T
	d = a - b
	return float(d @ G @ d + lam * b @ b + lam1 * np.abs(b).sum())


def _projected_gradient(G, a, lam, lam1, n_iter=20000):
	"""Independent solver: b = u - v with u, v >= 0, projected gradient steps."""
	Q = G + lam * np.eye(len(a))
	c = G @ a
	step = 1. / (4 * np.linalg.eigvalsh(Q).max())
	u, v = np.maximum(a, 0), np.maximum(-a, 0)
	for _ in range(n_iter):
		g = 2 * (Q @ (u - v)) - 2 * c
		u = np.maximum(u - step * (g + lam1), 0)
		v = np.maximum(v - step * (-g + lam1), 0)
	return u - v


class TestPca:
	def test_axis_aligned(self):
		row1 = 10 * np.tile([1., -1., 1., -1.], 10)
		row2 = np.tile([1., 1., -1., -1.], 10)
		basis = pca_svd(np.stack([row1, row2]), 1)
		np.testing.assert_allclose(basis.V[:, 0], [1., 0.], atol=1e-6)

	def test_identical_rows(self, rng):
		r, s = rng.normal(size=40), rng.normal(size=40)
		basis = pca_svd(np.stack([r, r, s]), 2)
		assert abs(basis.V[0, 0] - basis.V[1, 0]) <= 1e-8

	def test_eigen_residual(self, rng):
		X = rng.normal(size=(6, 40))
		basis = pca_svd(X, 6)
		G = X @ X.T
		for k in range(6):
			v = basis.V[:, k]
			assert np.linalg.norm(G @ v - basis.variances[k] * v) <= 1e-8 * basis.variances[0]

	def test_q_out_of_range(self, rng):
		with pytest.raises(UsageError):
			pca_svd(rng.normal(size=(3, 10)), 4)

	def test_constant_data(self):
		with pytest.raises(SolverError, match='constant'):
			pca_svd(np.zeros((3, 10)), 2)

	def test_rank_deficient(self, rng):
		r = rng.normal(size=30)
		basis = pca_svd(np.stack([r, 2 * r, -r]), 2)
		assert basis.rank_deficient and basis.q == 1


class TestElasticNet:
	def test_soft_threshold(self):
		np.testing.assert_array_equal(soft_threshold(np.array([-3., -1., 0.5, 2.]), 1.), [-2., 0., 0., 1.])

	def test_unpenalized_reproduces_a(self, rng):
		X = rng.normal(size=(5, 50))
		A = pca_svd(X, 2).V
		B = elastic_net_bstep(X, A, lam=0., lam1=0.)
		G = X @ X.T
		assert np.abs(G @ B - G @ A).max() <= 1e-8 * np.abs(G).max()

	def test_all_zero_threshold(self, rng):
		X = rng.normal(size=(5, 50))
		A = pca_svd(X, 2).V
		lam1_max = 2 * np.abs(X @ X.T @ A).max()
		B = elastic_net_bstep(X, A, lam=1e-3, lam1=lam1_max)
		assert not B.any()

	@pytest.mark.parametrize('lam1', [0., 0.01, 0.1, 1.])
	@pytest.mark.parametrize('seed', range(5))
	def test_matches_projected_gradient(self, seed, lam1):
		gen = np.random.default_rng(seed)
		X = gen.normal(size=(5, 12))
		A = pca_svd(X, 1).V
		G = X @ X.T
		lam = 0.01
		b = elastic_net_bstep(X, A, lam=lam, lam1=lam1)[:, 0]
		oracle = _projected_gradient(G, A[:, 0], lam, lam1)
		assert _enet_value(G, A[:, 0], b, lam, lam1) == pytest.approx(
			_enet_value(G, A[:, 0], oracle, lam, lam1), abs=1e-6)

	def test_l1_norm_shrinks_with_lam1(self, rng):
		X = rng.normal(size=(8, 60))
		A = pca_svd(X, 3).V
		lam1_max = 2 * np.abs(X @ X.T @ A).max()
		norms = [np.abs(elastic_net_bstep(X, A, 1e-3, f * lam1_max)).sum() for f in (0., 0.2, 0.6)]
		assert norms[0] >= norms[1] >= norms[2]

	def test_column_killed_at_its_own_threshold(self, rng):
		X = rng.normal(size=(8, 60))
		A = pca_svd(X, 3).V
		thresholds = 2 * np.abs(X @ X.T @ A).max(axis=0)
		weakest = int(np.argmin(thresholds))
		B = elastic_net_bstep(X, A, 1e-3, thresholds[weakest])
		assert not B[:, weakest].any()
		for j in np.where(thresholds > thresholds[weakest])[0]:
			assert B[:, j].any()

	def test_rejects_non_orthonormal(self, rng):
		X = rng.normal(size=(4, 20))
		with pytest.raises(SolverError):
			elastic_net_bstep(X, 2 * np.eye(4)[:, :2], 0., 0.)

	def test_graph_needed(self, rng):
		X = rng.normal(size=(4, 20))
		with pytest.raises(UsageError):
			elastic_net_bstep(X, np.eye(4)[:, :2], 0., 0., rho=1.)


class TestAStep:
	def test_fixed_point(self, rng):
		X = rng.normal(size=(5, 40))
		V = pca_svd(X, 3).V
		np.testing.assert_allclose(a_step(X, V), V, atol=1e-8)

	def test_orthonormal(self, rng):
		A = a_step(rng.normal(size=(6, 30)), rng.normal(size=(6, 3)))
		np.testing.assert_allclose(A.T @ A, np.eye(3), atol=1e-10)

	def test_zero_b(self, rng):
		with pytest.raises(SolverError):
			a_step(rng.normal(size=(3, 10)), np.zeros((3, 2)))


class TestFit:
	def test_unpenalized_is_pca(self, rng):
		X = rng.normal(size=(6, 80))
		cfg = GsPcaConfig(q=3, lam=0., lam1=0., rho=0.)
		basis = gs_pca_fit(X, cfg)
		np.testing.assert_allclose(basis.V, pca_svd(X, 3).V, atol=1e-6)
		assert basis.converged

	@pytest.mark.parametrize('seed', range(20))
	def test_unpenalized_matches_svd(self, seed):
		gen = np.random.default_rng(seed)
		p = int(gen.integers(2, 26))
		n = int(gen.integers(2 * p, 501))
		X = gen.normal(size=(p, n))
		q = min(3, p)
		basis = gs_pca_fit(X, GsPcaConfig(q=q, lam=0., lam1=0., rho=0.))
		U, _, _ = thin_svd(X)
		np.testing.assert_allclose(basis.V, fix_signs(U[:, :q]), atol=1e-6)

	def test_graph_over_duplicated_columns(self, rng):
		X0 = rng.normal(size=(4, 25))
		X = np.concatenate([X0, X0], axis=1)
		g = build_knn(X, k=1)
		assert {(int(i), int(j)) for i, j in zip(*g.E.nonzero()) if i < j} == {(j, j + 25) for j in range(25)}
		L = laplacian(g)
		plain = gs_pca_fit(X, GsPcaConfig(q=2, lam=1e-3, lam1=0.1, rho=0.))
		smooth = gs_pca_fit(X, GsPcaConfig(q=2, lam=1e-3, lam1=0.1, rho=1.), (X, L))
		assert graph_energy(smooth.V.T @ X, L) <= graph_energy(plain.V.T @ X, L) + 1e-9

	def test_objective_non_increasing(self, rng):
		X = rng.normal(size=(9, 300))
		X -= X.mean(axis=0, keepdims=True)
		graph = graph_for_points(X, k=4, max_nodes=60)
		cfg = GsPcaConfig(q=3, lam=1e-3, lam1=5., rho=1e-2, max_iter=40)
		basis = gs_pca_fit(X, cfg, graph)
		h = np.array(basis.history)
		assert len(h) == basis.n_iter + 1
		assert np.all(np.diff(h) <= 1e-9 * np.abs(h).max())
		np.testing.assert_allclose(np.linalg.norm(basis.V, axis=0), 1., atol=1e-12)

	def test_unit_columns_and_signs(self, rng):
		X = rng.normal(size=(6, 60))
		basis = gs_pca_fit(X, GsPcaConfig(q=2, lam1=1., rho=0.))
		idx = np.argmax(np.abs(basis.V), axis=0)
		assert np.all(basis.V[idx, [0, 1]] > 0)

	def test_huge_lam1(self, rng):
		X = rng.normal(size=(4, 30))
		with pytest.raises(SolverError, match='smaller lam1'):
			gs_pca_fit(X, GsPcaConfig(q=2, lam1=1e9, rho=0.))

	def test_rho_needs_graph(self, rng):
		with pytest.raises(UsageError):
			gs_pca_fit(rng.normal(size=(4, 30)), GsPcaConfig(q=2, rho=1.))

	def test_rank_below_q(self, rng):
		r = rng.normal(size=30)
		with pytest.raises(SolverError, match='rank'):
			gs_pca_fit(np.stack([r, r, r]), GsPcaConfig(q=2, rho=0.))

	def test_per_component_lam1(self):
		cfg = GsPcaConfig(q=2, lam1_per_component=[0., 1.])
		np.testing.assert_array_equal(cfg.lam1_vector(), [0., 1.])
		with pytest.raises(UsageError):
			GsPcaConfig(q=2, lam1_per_component=[1.])


class TestSparsity:
	def test_soft_threshold_is_the_scalar_minimizer(self):
		# argmin_b (b - z)^2 + 2 t |b| over a fine grid
		grid = np.linspace(-4, 4, 80001)
		for z, t in ((2.5, 1.), (-0.3, 0.5), (1.2, 1.2)):
			best = grid[np.argmin((grid - z) ** 2 + 2 * t * np.abs(grid))]
			assert soft_threshold(z, t) == pytest.approx(best, abs=1e-4)

	def test_zero_count_non_decreasing(self, rng):
		X = rng.normal(size=(10, 200))
		counts = []
		for lam1 in (0., 1e-3, 1e-2, 1e-1):
			basis = gs_pca_fit(X, GsPcaConfig(q=3, lam=1e-4, lam1=lam1, rho=0.))
			counts.append(int((np.abs(basis.V) < 1e-8).sum()))
		assert counts == sorted(counts)
