"""Seeded streams, ordered parallel map, atomic writes and error exit codes."""

import numpy as np
import pytest

from gspcanet.util import (
	DataError,
	ImagIOError,
	ModelCompatibilityError,
	SolverError,
	UsageError,
	atomic_write_text,
	format_float,
	make_rng,
	parallel_map,
	sha256_files,
)


def _square(x, offset=0):
	return x * x + offset


class TestMakeRng:
	def test_same_key_same_draws(self):
		a = make_rng(7, 1, 2).random(5)
		b = make_rng(7, 1, 2).random(5)
		np.testing.assert_array_equal(a, b)

	def test_streams_are_independent_of_consumption_order(self):
		first = make_rng(7, 3).random(4)
		make_rng(7, 1).random(1000)
		np.testing.assert_array_equal(make_rng(7, 3).random(4), first)

	def test_different_streams_differ(self):
		assert not np.array_equal(make_rng(7, 0).random(4), make_rng(7, 1).random(4))


class TestParallelMap:
	def test_inline_keeps_order(self):
		assert parallel_map(_square, [3, 1, 2], threads=1, offset=1) == [10, 2, 5]

	def test_pool_keeps_order(self):
		items = list(range(12))
		assert parallel_map(_square, items, threads=3) == [i * i for i in items]


class TestExitCodes:
	def test_codes(self):
		assert UsageError.exit_code == 2
		assert DataError.exit_code == 3
		assert ImagIOError.exit_code == 4
		assert ModelCompatibilityError.exit_code == 5

	def test_solver_error_is_a_data_error(self):
		assert issubclass(SolverError, DataError)
		assert SolverError.exit_code == 3


class TestFiles:
	def test_atomic_write_and_digest(self, tmp_path):
		path = tmp_path / 'sub' / 'a.txt'
		atomic_write_text(path, 'hello\n')
		assert path.read_text() == 'hello\n'
		assert sha256_files([path]) == sha256_files([path])
		assert not [p for p in path.parent.iterdir() if p.name.startswith('.tmp_')]

	def test_digest_missing_file(self, tmp_path):
		with pytest.raises(ImagIOError):
			sha256_files([tmp_path / 'missing'])

	def test_format_float_round_trips(self):
		x = 0.1 + 0.2
		assert float(format_float(x)) == x
