import numpy as np
import pytest

from gspcanet.imagio import SynthSpec, generate_synthetic, load_manifest
from gspcanet.network import NetConfig


def pytest_configure(config):
	config.addinivalue_line('markers', 'slow: full-size training runs (minutes)')


@pytest.fixture
def rng():
	return np.random.default_rng(12345)


@pytest.fixture
def tiny_config():
	"""3x3 filters, 2 + 3 filters, 12-pixel tiles: seconds per training run."""
	return NetConfig(t1=3, t2=3, L1=2, L2=3, block=4, stride=2, tile=12, max_nodes=200, max_iter=30)


@pytest.fixture
def tiny_dataset(tmp_path):
	"""4 images per class, 36x36 pixels, 3x3 tumor grid; returns the manifest path."""
	spec = SynthSpec(seed=3, per_class=4, size=36, tumor_block=12)
	_, path = generate_synthetic(spec, tmp_path / 'data')
	return path


@pytest.fixture
def tiny_split(tiny_dataset):
	return load_manifest(tiny_dataset, split='train'), load_manifest(tiny_dataset, split='test')
