import json, logging, struct, time, zlib
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np
import torch
import torch.nn.functional as F
from numpy.lib.stride_tricks import sliding_window_view

try:
	from .classifier import SvmModel
	from .graph import graph_for_points
	from .patches import concat_training
	from .spca import GsPcaConfig, gs_pca_fit
	from .util import DataError, ModelCompatibilityError, UsageError, atomic_write_bytes, ImagIOError, make_rng
except ImportError:
	from classifier import SvmModel
	from graph import graph_for_points
	from patches import concat_training
	from spca import GsPcaConfig, gs_pca_fit
	from util import DataError, ModelCompatibilityError, UsageError, atomic_write_bytes, ImagIOError, make_rng

logger = logging.getLogger(__name__)

MAGIC = b'GSPN'
FORMAT_VERSION = 1
MAX_L2 = 16


@dataclass
class NetConfig:
	t1: int = 5
	t2: int = 5
	L1: int = 9
	L2: int = 8
	block: int = 8
	stride: int = 4
	tile: int = 20
	theta_pos: float = 0.5
	# gs-pca, shared by both stages
	lam: float = 1e-4
	lam1: float = 1e-3
	rho: float = 1e-2
	max_iter: int = 100
	tol: float = 1e-6
	enet_max_iter: int = 1000
	enet_tol: float = 1e-8
	# graph
	k: int = 5
	max_nodes: int = 2000
	cluster_pool: Optional[int] = None
	graph_per_class: bool = False
	patches_per_image: Optional[int] = None

	def __post_init__(self):
		if self.t1 % 2 == 0 or self.t2 % 2 == 0 or min(self.t1, self.t2) < 1:
			raise UsageError(f"filter size must be odd, got {self.t1}x{self.t2}")
		if not 1 <= self.L2 <= MAX_L2:
			raise UsageError(f"L2 must lie in [1, {MAX_L2}], got {self.L2}")
		if not 1 <= self.L1 <= self.t1 * self.t2:
			raise UsageError(f"L1 must lie in [1, {self.t1 * self.t2}], got {self.L1}")
		if self.L2 > self.t1 * self.t2:
			raise UsageError(f"L2 must not exceed {self.t1 * self.t2} for {self.t1}x{self.t2} filters")
		if self.block < 1 or self.stride < 1:
			raise UsageError("block and stride must be >= 1")
		if self.block > self.tile:
			raise UsageError(f"block {self.block} larger than tile {self.tile}")
		if max(self.t1, self.t2) > self.tile:
			raise UsageError(f"filter {self.t1}x{self.t2} larger than tile {self.tile}")
		if not 0 < self.theta_pos <= 1:
			raise UsageError(f"theta_pos must lie in (0, 1], got {self.theta_pos}")
		if self.patches_per_image is not None and self.patches_per_image < 1:
			raise UsageError("patches_per_image must be >= 1")
		if self.cluster_pool is None:
			self.cluster_pool = 10 * self.max_nodes

	def stage_config(self, stage):
		return GsPcaConfig(q=self.L1 if stage == 1 else self.L2, lam=self.lam, lam1=self.lam1, rho=self.rho,
						   max_iter=self.max_iter, tol=self.tol,
						   enet_max_iter=self.enet_max_iter, enet_tol=self.enet_tol)

	@property
	def n_blocks(self):
		return len(block_positions(self.tile, self.block, self.stride)) ** 2

	def feature_length(self, channels=1):
		return channels * (2 ** self.L2) * self.L1 * self.n_blocks


@dataclass
class StageFilters:
	"""L filters of shape t1 x t2, row-major reshapes of unit-norm basis columns."""
	filters: np.ndarray
	stage: int
	geometry: Tuple[int, int]
	history: List[float] = field(default_factory=list)

	def __post_init__(self):
		self.filters = np.asarray(self.filters, dtype=np.float64)
		if self.filters.ndim != 3 or self.filters.shape[1:] != tuple(self.geometry):
			raise DataError(f"filters must be (L, {self.geometry[0]}, {self.geometry[1]}), got {self.filters.shape}")

	def __len__(self):
		return len(self.filters)


@dataclass
class GsPcaNetModel:
	config: NetConfig
	channels: int
	stages: List[Tuple[StageFilters, StageFilters]] = field(default_factory=list)
	svm: Optional[SvmModel] = None
	version: int = FORMAT_VERSION
	provenance: Dict = field(default_factory=dict)

	@property
	def trained(self):
		return len(self.stages) == self.channels and self.channels > 0

	def feature_length(self):
		return self.config.feature_length(self.channels)


@torch.no_grad()
def _conv(maps, filters):
	# maps (N, u, v), filters (L, t1, t2) -> (N, L, u, v), cross-correlation with zero padding
	x = torch.as_tensor(np.ascontiguousarray(maps, dtype=np.float64))[:, None]
	w = torch.as_tensor(np.ascontiguousarray(filters, dtype=np.float64))[:, None]
	pad = ((w.shape[-2] - 1) // 2, (w.shape[-1] - 1) // 2)
	return F.conv2d(x, w, padding=pad).numpy()


def convolve_bank(image, filters):
	"""'Same' zero-padded responses of one single-channel image to every filter, (L, u, v)."""
	bank = filters.filters if isinstance(filters, StageFilters) else np.asarray(filters, dtype=np.float64)
	if bank.shape[-1] % 2 == 0 or bank.shape[-2] % 2 == 0:
		raise UsageError(f"filters must be odd-sized, got {bank.shape[-2]}x{bank.shape[-1]}")
	image = np.asarray(image, dtype=np.float64)
	if image.ndim != 2:
		raise DataError(f"convolve_bank needs a 2-D image, got shape {image.shape}")
	return _conv(image[None], bank)[0]


def forward_stage2(stage1_maps, stage2):
	"""(L1, u, v) stage-1 maps -> (L1, L2, u, v); map (l1, l2) is map l1 filtered by stage-2 filter l2."""
	stage1_maps = np.asarray(stage1_maps, dtype=np.float64)
	if stage1_maps.ndim != 3:
		raise DataError(f"stage-1 maps must be (L1, u, v), got shape {stage1_maps.shape}")
	if min(stage1_maps.shape[1:]) < 1:
		raise DataError("stage-1 maps are empty")
	return _conv(stage1_maps, stage2.filters)


def binary_hash(maps):
	"""Pack the L2 maps along axis -3 into one integer per pixel; bit l is set iff map l > 0."""
	maps = np.asarray(maps)
	if maps.ndim < 3:
		raise DataError(f"binary_hash needs (..., L2, u, v) maps, got shape {maps.shape}")
	L2 = maps.shape[-3]
	if L2 > MAX_L2:
		raise DataError(f"cannot hash {L2} maps (at most {MAX_L2})")
	weights = 2 ** np.arange(L2, dtype=np.int64)
	return np.einsum('...lij,l->...ij', (maps > 0).astype(np.int64), weights)


def block_positions(size, block, stride):
	"""Block starts every stride pixels, with the last block aligned to the boundary."""
	if block > size:
		raise DataError(f"block {block} larger than map size {size}")
	starts = list(range(0, size - block + 1, stride))
	if starts[-1] != size - block:
		starts.append(size - block)
	return starts


def block_histograms(T, block=8, stride=4, L2=8):
	"""Histograms with 2^L2 bins over every block of the hash map(s).

	T is (..., u, v); the result is (..., G, 2^L2) with blocks in row-major scan order.
	"""
	T = np.asarray(T, dtype=np.int64)
	n_bins = 2 ** L2
	if T.size and (T.min() < 0 or T.max() >= n_bins):
		raise DataError(f"hash values must lie in [0, {n_bins - 1}]")
	u, v = T.shape[-2:]
	rows = block_positions(u, block, stride)
	cols = block_positions(v, block, stride)
	lead = T.shape[:-2]

	windows = sliding_window_view(T, (block, block), axis=(-2, -1))
	windows = windows[..., rows, :, :, :][..., cols, :, :]
	n_groups = int(np.prod(lead, dtype=np.int64)) * len(rows) * len(cols)
	flat = windows.reshape(n_groups, block * block)
	offsets = np.arange(n_groups, dtype=np.int64)[:, None] * n_bins
	counts = np.bincount((flat + offsets).ravel(), minlength=n_groups * n_bins)
	return counts.reshape(lead + (len(rows) * len(cols), n_bins)).astype(np.float64)


def _stage_seed(seed, channel, stage):
	return int(make_rng(seed, channel, stage, 1).integers(2 ** 62))


def _learn_stage(images, stage, config, seed=0, channel=0, groups=None, verbose=False):
	pm = concat_training(images, config.t1, config.t2, sample=config.patches_per_image,
						 rng=make_rng(seed, channel, stage))
	q = config.L1 if stage == 1 else config.L2
	if pm.n_patches < q:
		raise DataError(f"stage {stage} has {pm.n_patches} patches, fewer than the {q} filters requested")

	graph = None
	if config.rho > 0:
		col_groups = None if groups is None else np.asarray(groups)[pm.origins[:, 0]]
		graph = graph_for_points(pm.data, config.k, config.max_nodes, _stage_seed(seed, channel, stage),
								 config.cluster_pool, col_groups)
	basis = gs_pca_fit(pm.data, config.stage_config(stage), graph, verbose=verbose)
	if not basis.converged:
		logger.warning(f"stage {stage} gs-pca stopped at the iteration cap ({basis.n_iter})")
	logger.info(f"stage {stage} objective trace: " + ' '.join(f"{v:.6e}" for v in basis.history))
	filters = basis.V.T.reshape(q, config.t1, config.t2)
	return StageFilters(filters, stage, (config.t1, config.t2), basis.history)


def learn_stage1(images, config, seed=0, channel=0, labels=None, verbose=False):
	"""Stage-1 filters from the centered overlapping patches of single-channel training images."""
	images = [np.asarray(im, dtype=np.float64) for im in images]
	if len(images) == 0:
		raise DataError("learn_stage1 needs at least one training image")
	groups = labels if config.graph_per_class else None
	return _learn_stage(images, 1, config, seed, channel, groups, verbose)


def learn_stage2(stage1_maps, config, seed=0, channel=0, labels=None, verbose=False):
	"""Stage-2 filters over all L1 * N stage-1 output maps, stage1_maps shaped (N, L1, u, v)."""
	stage1_maps = np.asarray(stage1_maps, dtype=np.float64)
	if stage1_maps.ndim != 4:
		raise DataError(f"stage-1 maps must be (N, L1, u, v), got shape {stage1_maps.shape}")
	n, L1 = stage1_maps.shape[:2]
	images = list(stage1_maps.reshape(n * L1, *stage1_maps.shape[2:]))
	groups = None
	if config.graph_per_class and labels is not None:
		groups = np.repeat(np.asarray(labels), L1)
	return _learn_stage(images, 2, config, seed, channel, groups, verbose)


def learn_filters(tiles, labels, config, seed=0, verbose=False):
	"""Per-channel (stage-1, stage-2) filter banks from training tiles shaped (N, h, w, c)."""
	tiles = np.asarray(tiles, dtype=np.float64)
	if tiles.ndim != 4:
		raise DataError(f"training tiles must be (N, h, w, c), got shape {tiles.shape}")
	stages = []
	for c in range(tiles.shape[-1]):
		channel = tiles[..., c]
		start_time = time.perf_counter()
		s1 = learn_stage1(list(channel), config, seed, c, labels, verbose)
		logger.info(f"channel {c} stage 1 filters: {time.perf_counter() - start_time:.2f} s")
		start_time = time.perf_counter()
		maps = _conv(channel, s1.filters)
		s2 = learn_stage2(maps, config, seed, c, labels, verbose)
		logger.info(f"channel {c} stage 2 filters: {time.perf_counter() - start_time:.2f} s")
		stages.append((s1, s2))
	return stages


def _channel_features(channel_tiles, s1, s2, config):
	# (N, u, v) -> (N, L1 * G * 2^L2)
	n, u, v = channel_tiles.shape
	maps1 = _conv(channel_tiles, s1.filters)
	L1 = maps1.shape[1]
	maps2 = _conv(maps1.reshape(n * L1, u, v), s2.filters).reshape(n, L1, len(s2), u, v)
	T = binary_hash(maps2)
	hist = block_histograms(T, config.block, config.stride, config.L2)
	return hist.reshape(n, -1)


def extract_features_batch(tiles, model, batch_size=64):
	"""Feature rows for tiles shaped (N, h, w, c), channels concatenated."""
	if not model.trained:
		raise UsageError("model has no trained filter banks")
	tiles = np.asarray(tiles, dtype=np.float64)
	if tiles.ndim == 3: tiles = tiles[..., None]
	if tiles.shape[-1] != model.channels:
		raise ModelCompatibilityError(f"input has {tiles.shape[-1]} channels, the model was trained on {model.channels}")
	if tiles.shape[1:3] != (model.config.tile, model.config.tile):
		raise ModelCompatibilityError(f"tiles are {tiles.shape[1]}x{tiles.shape[2]}, the model expects {model.config.tile}x{model.config.tile}")
	out = np.empty((len(tiles), model.feature_length()))
	for start in range(0, len(tiles), batch_size):
		stop = min(start + batch_size, len(tiles))
		out[start:stop] = np.concatenate([
			_channel_features(tiles[start:stop, :, :, c], s1, s2, model.config)
			for c, (s1, s2) in enumerate(model.stages)], axis=1)
	return out


def extract_features(image, model):
	"""Feature vector of one tile, (h, w) or (h, w, c)."""
	image = np.asarray(getattr(image, 'pixels', image), dtype=np.float64)
	if image.ndim == 2: image = image[:, :, None]
	return extract_features_batch(image[None], model)[0]


## model file: MAGIC | u16 version | u32 header length | json header | float64 payload | u32 crc32

def _header(model):
	svm = model.svm
	return {
		'config': asdict(model.config),
		'channels': model.channels,
		'filters': [[len(s1), len(s2)] for s1, s2 in model.stages],
		'svm': None if svm is None else {
			'C': svm.C, 'class_weight': list(svm.class_weight), 'n_iter': svm.n_iter,
			'converged': svm.converged, 'n_features': svm.n_features, 'offset': svm.offset},
		'provenance': model.provenance,
	}


def serialize_model(model):
	if not model.trained:
		raise UsageError("cannot save a model without trained filter banks")
	header = json.dumps(_header(model), sort_keys=True, separators=(',', ':')).encode('utf-8')
	parts = [MAGIC, struct.pack('<HI', model.version, len(header)), header]
	for s1, s2 in model.stages:
		parts.append(s1.filters.astype('<f8').tobytes())
		parts.append(s2.filters.astype('<f8').tobytes())
	if model.svm is not None:
		parts.append(np.asarray(model.svm.w, dtype='<f8').tobytes())
		parts.append(struct.pack('<d', model.svm.b))
	body = b''.join(parts)
	return body + struct.pack('<I', zlib.crc32(body) & 0xFFFFFFFF)


def save_model(model, path):
	atomic_write_bytes(path, serialize_model(model))
	logger.info(f"saved model to {path}")


def deserialize_model(buf, path='<bytes>'):
	if len(buf) < 14 or buf[:4] != MAGIC:
		raise ModelCompatibilityError(f"{path}: not a GS-PCANet model file (bad magic or truncated)")
	version, header_len = struct.unpack_from('<HI', buf, 4)
	if version != FORMAT_VERSION:
		raise ModelCompatibilityError(f"{path}: unsupported model format version {version} (this build reads {FORMAT_VERSION})")
	body, crc = buf[:-4], struct.unpack('<I', buf[-4:])[0]
	if zlib.crc32(body) & 0xFFFFFFFF != crc:
		raise ModelCompatibilityError(f"{path}: checksum mismatch, the model file is corrupt or truncated")

	pos = 10
	try:
		header = json.loads(body[pos:pos + header_len].decode('utf-8'))
		pos += header_len
		config = NetConfig(**header['config'])
		t1, t2 = config.t1, config.t2

		def take(count):
			nonlocal pos
			arr = np.frombuffer(body, dtype='<f8', count=count, offset=pos).astype(np.float64)
			pos += 8 * count
			return arr

		stages = []
		for n1, n2 in header['filters']:
			s1 = StageFilters(take(n1 * t1 * t2).reshape(n1, t1, t2), 1, (t1, t2))
			s2 = StageFilters(take(n2 * t1 * t2).reshape(n2, t1, t2), 2, (t1, t2))
			stages.append((s1, s2))
		svm = None
		if header['svm'] is not None:
			meta = header['svm']
			w = take(meta['n_features'])
			b = float(take(1)[0])
			svm = SvmModel(w, b, meta['C'], tuple(meta['class_weight']), meta['n_iter'], meta['converged'],
						   offset=meta['offset'])
	except (ValueError, KeyError, TypeError, UnicodeDecodeError, UsageError, DataError) as e:
		raise ModelCompatibilityError(f"{path}: malformed model file ({e})") from e
	if pos != len(body):
		raise ModelCompatibilityError(f"{path}: {len(body) - pos} unexpected trailing bytes")
	return GsPcaNetModel(config, header['channels'], stages, svm, version, header['provenance'])


def load_model(path):
	try:
		with open(path, 'rb') as f:
			buf = f.read()
	except OSError as e:
		raise ImagIOError(f"cannot read model {path}: {e}") from e
	return deserialize_model(buf, path)
