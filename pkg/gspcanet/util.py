import hashlib, logging, os, tempfile
import multiprocessing as mpl
from concurrent.futures import ProcessPoolExecutor, as_completed

import numpy as np
import torch
from tqdm.auto import tqdm

__version__ = '0.1.0'

logger = logging.getLogger(__name__)


class GsPcaNetError(Exception):
	exit_code = 1


class UsageError(GsPcaNetError):
	exit_code = 2


class DataError(GsPcaNetError):
	exit_code = 3


class SolverError(DataError):
	pass


class ImagIOError(GsPcaNetError):
	exit_code = 4


class ModelCompatibilityError(GsPcaNetError):
	exit_code = 5


def make_rng(seed, *stream):
	"""Counter-based generator keyed by (seed, stream...).

	Draws for a given stream never depend on how many other streams were
	consumed before it, so worker count and scheduling order do not matter.
	"""
	ss = np.random.SeedSequence(entropy=int(seed) & 0xFFFFFFFFFFFFFFFF, spawn_key=tuple(int(s) for s in stream))
	return np.random.Generator(np.random.Philox(ss))


def cpu_count():
	return max(mpl.cpu_count(), 1)


def _init_worker():
	# one BLAS/intra-op thread per worker keeps results independent of --threads
	torch.set_num_threads(1)


def parallel_map(fn, items, threads=1, desc=None, **kwargs):
	"""Apply fn to every item, returning results in input order."""
	items = list(items)
	if threads is None: threads = cpu_count()
	if threads <= 1 or len(items) <= 1:
		prev = torch.get_num_threads()
		torch.set_num_threads(1)
		try:
			return [fn(it, **kwargs) for it in tqdm(items, desc=desc, disable=desc is None, leave=False)]
		finally:
			torch.set_num_threads(prev)

	results = [None] * len(items)
	bar = tqdm(total=len(items), desc=desc, disable=desc is None, leave=False)
	with ProcessPoolExecutor(max_workers=min(threads, len(items)), initializer=_init_worker) as pool:
		p_list = {pool.submit(fn, it, **kwargs): i for i, it in enumerate(items)}
		for p in as_completed(p_list):
			results[p_list[p]] = p.result()
			bar.update(1)
	bar.close()
	return results


def atomic_write_bytes(path, payload):
	path = os.fspath(path)
	dirname = os.path.dirname(os.path.abspath(path))
	try:
		os.makedirs(dirname, exist_ok=True)
		fd, tmp = tempfile.mkstemp(dir=dirname, prefix='.tmp_')
		with os.fdopen(fd, 'wb') as f:
			f.write(payload)
		os.replace(tmp, path)
	except OSError as e:
		raise ImagIOError(f"cannot write {path}: {e}") from e


def atomic_write_text(path, text):
	atomic_write_bytes(path, text.encode('utf-8'))


def sha256_files(paths):
	h = hashlib.sha256()
	for p in paths:
		try:
			with open(p, 'rb') as f:
				h.update(f.read())
		except OSError as e:
			raise ImagIOError(f"cannot read {p}: {e}") from e
	return h.hexdigest()


def format_float(x):
	# shortest repr that round-trips; keeps CSV bytes stable
	return repr(float(x))
