import logging, os, time
from dataclasses import dataclass, field, fields, replace
from typing import Dict

import numpy as np
import pandas as pd

try:
	from .classifier import SvmConfig, predict_labels, svm_decision, svm_train
	from .evaluation import confusion, detection_accuracy, roc_auc
	from .imagio import dataset_digest, read_mask, read_pnm
	from .network import GsPcaNetModel, NetConfig, extract_features_batch, learn_filters
	from .patches import crop_tile, tile_image
	from .util import __version__, DataError, UsageError, format_float, make_rng, parallel_map
except ImportError:
	from classifier import SvmConfig, predict_labels, svm_decision, svm_train
	from evaluation import confusion, detection_accuracy, roc_auc
	from imagio import dataset_digest, read_mask, read_pnm
	from network import GsPcaNetModel, NetConfig, extract_features_batch, learn_filters
	from patches import crop_tile, tile_image
	from util import __version__, DataError, UsageError, format_float, make_rng, parallel_map

logger = logging.getLogger(__name__)

SCORE_COLUMNS = ['image', 'row', 'col', 'score', 'label']
NET_FIELDS = {f.name for f in fields(NetConfig)}
SVM_FIELDS = {f.name for f in fields(SvmConfig)}


@dataclass
class TileSet:
	"""All tiles of a manifest; grids maps image key -> 0/1 truth label grid."""
	pixels: np.ndarray
	labels: np.ndarray
	image: np.ndarray
	rows: np.ndarray
	cols: np.ndarray
	grids: Dict[str, np.ndarray] = field(default_factory=dict)

	def __len__(self):
		return len(self.labels)


def image_key(entry, manifest):
	if manifest.source is None: return str(entry.path)
	return os.path.relpath(entry.path, os.path.dirname(os.path.abspath(manifest.source))).replace(os.sep, '/')


def _load_one(entry, tile, theta_pos):
	image = read_pnm(entry.path)
	mask = read_mask(entry.mask) if entry.mask is not None else None
	grid = tile_image(image, mask, tile, theta_pos, default_label=int(entry.is_cancerous))
	tiles = np.stack([crop_tile(image.pixels, t, tile) for t in grid.tiles])
	labels = np.array([1 if t.label else -1 for t in grid.tiles])
	rows = np.array([t.row for t in grid.tiles])
	cols = np.array([t.col for t in grid.tiles])
	return tiles, labels, rows, cols, grid.label_grid()


def load_truth(manifest, tile=20, theta_pos=0.5):
	"""0/1 tile label grid per image key, from masks (or the image class when there is no mask)."""
	grids = {}
	for entry in manifest.entries:
		image = read_pnm(entry.path)
		mask = read_mask(entry.mask) if entry.mask is not None else None
		grids[image_key(entry, manifest)] = tile_image(image, mask, tile, theta_pos,
													   default_label=int(entry.is_cancerous)).label_grid()
	return grids


def split_images(manifest, fraction, seed, stream=0x5E1):
	"""Stratified split of image indices; fraction of each class goes to the second part."""
	labels = manifest.labels
	first, second = [], []
	rng = make_rng(seed, stream)
	for cls in (1, -1):
		idx = np.where(labels == cls)[0]
		if len(idx) < 2:
			raise DataError(f"need at least 2 images per class to split, class {cls:+d} has {len(idx)}")
		idx = idx[rng.permutation(len(idx))]
		n_second = min(max(1, int(round(fraction * len(idx)))), len(idx) - 1)
		second.extend(idx[:n_second].tolist())
		first.extend(idx[n_second:].tolist())
	return sorted(first), sorted(second)


def _features_chunk(pixels, model):
	start = time.perf_counter()
	return extract_features_batch(pixels, model), time.perf_counter() - start


class GsPcaNet():
	def __init__(self, net_config=None, svm_config=None, seed=0, threads=1, verbose=False):
		super().__init__()
		self.net_config = net_config or NetConfig()
		self.svm_config = svm_config or SvmConfig()
		self.seed = seed
		self.threads = threads
		self.verbose = verbose
		self.model = None

	def prep_dataset(self, manifest):
		if len(manifest) == 0:
			raise DataError("manifest has no images")
		cfg = self.net_config
		parts = parallel_map(_load_one, manifest.entries, self.threads, desc='tiling' if self.verbose else None,
							 tile=cfg.tile, theta_pos=cfg.theta_pos)
		channels = {p[0].shape[-1] for p in parts}
		if len(channels) > 1:
			raise DataError(f"manifest mixes channel counts {sorted(channels)}")
		keys = [image_key(e, manifest) for e in manifest.entries]
		return TileSet(
			np.concatenate([p[0] for p in parts]),
			np.concatenate([p[1] for p in parts]),
			np.concatenate([np.full(len(p[1]), k, dtype=object) for k, p in zip(keys, parts)]),
			np.concatenate([p[2] for p in parts]),
			np.concatenate([p[3] for p in parts]),
			{k: p[4] for k, p in zip(keys, parts)})

	def extract(self, tiles, model=None, chunk=256):
		"""Feature rows for every tile, computed in chunks across workers."""
		model = model or self.model
		chunks = [tiles.pixels[i:i + chunk] for i in range(0, len(tiles), chunk)]
		out = parallel_map(_features_chunk, chunks, self.threads,
						   desc='features' if self.verbose else None, model=model)
		return np.concatenate([o[0] for o in out]), [o[1] for o in out]

	def _configs(self, params):
		"""(NetConfig, SvmConfig) with params applied to whichever config owns each name."""
		net = {k: v for k, v in params.items() if k in NET_FIELDS}
		svm = {k: v for k, v in params.items() if k in SVM_FIELDS and k not in net}
		unknown = set(params) - set(net) - set(svm)
		if unknown:
			raise UsageError(f"cannot tune unknown parameter(s) {', '.join(map(repr, sorted(unknown)))}")
		return replace(self.net_config, **net), replace(self.svm_config, **svm)

	def _fit(self, tiles, net_config, svm_config=None):
		svm_config = svm_config or self.svm_config
		if len(np.unique(tiles.labels)) < 2:
			raise DataError("training tiles are all one class; both cancerous and healthy tiles are needed")
		model = GsPcaNetModel(net_config, int(tiles.pixels.shape[-1]))
		model.stages = learn_filters(tiles.pixels, tiles.labels, net_config, self.seed, self.verbose)
		for c, (s1, s2) in enumerate(model.stages):
			logger.info(f"channel {c}: {len(s1)} stage-1 and {len(s2)} stage-2 filters")
		features, _ = self.extract(tiles, model)
		start = time.perf_counter()
		model.svm = svm_train(features, tiles.labels, svm_config, self.seed, self.verbose)
		logger.info(f"svm: {model.svm.n_iter} epochs, {time.perf_counter() - start:.2f} s")
		return model

	def train(self, manifest, tune_grid=None, val_fraction=0.25):
		start = time.perf_counter()
		chosen = {}
		if tune_grid:
			chosen = self.tune(manifest, tune_grid, val_fraction)
			self.net_config, self.svm_config = self._configs(chosen)
		tiles = self.prep_dataset(manifest)
		self.model = self._fit(tiles, self.net_config)
		self.model.provenance = {
			'seed': self.seed, 'dataset_digest': dataset_digest(manifest), 'n_images': len(manifest),
			'n_tiles': len(tiles), 'svm': {'C': self.svm_config.C, 'balanced': self.svm_config.balanced},
			'tuned': chosen, 'version': __version__}
		logger.info(f"training took {time.perf_counter() - start:.2f} s")
		return self.model

	def tune(self, manifest, grid, val_fraction=0.25):
		"""Vary one parameter at a time over its grid, keep the value with the best validation AUC.

		Network parameters (lam1, L1, block, ...) and classifier parameters (C, ...)
		may be mixed. Ties keep the earlier grid value. Returns {parameter: chosen value}.
		"""
		# unknown names fail before any training
		self._configs({name: values[0] for name, values in grid.items() if len(values)})
		fit_idx, val_idx = split_images(manifest, val_fraction, self.seed, stream=0x7E57)
		fit_tiles = self.prep_dataset(manifest.subset(fit_idx, 'train'))
		val_tiles = self.prep_dataset(manifest.subset(val_idx, 'validation'))
		chosen = {}
		for name, values in grid.items():
			best, best_auc = None, -np.inf
			for value in values:
				net_config, svm_config = self._configs({**chosen, name: value})
				model = self._fit(fit_tiles, net_config, svm_config)
				features, _ = self.extract(val_tiles, model)
				_, area, _ = roc_auc(svm_decision(model.svm, features), val_tiles.labels)
				logger.info(f"tune {name}={value}: validation AUC {area:.4f}")
				if area > best_auc:
					best, best_auc = value, area
			chosen[name] = best
			logger.info(f"tune {name}: chose {best} (AUC {best_auc:.4f})")
		return chosen

	def score(self, manifest, model=None):
		"""Per-tile scores table (image, row, col, score, label), sorted by image then position."""
		model = model or self.model
		if model is None or model.svm is None:
			raise UsageError("no trained model to score with")
		tiles = self.prep_dataset(manifest)
		features, seconds = self.extract(tiles, model, chunk=max(1, len(tiles) // max(len(manifest), 1)))
		if len(seconds) > 1:
			logger.info(f"inference time per chunk: mean {np.mean(seconds):.3f} s, std {np.std(seconds, ddof=1):.3f} s")
		scores = svm_decision(model.svm, features)
		table = pd.DataFrame({'image': tiles.image, 'row': tiles.rows, 'col': tiles.cols,
							  'score': scores, 'label': tiles.labels})
		return table.sort_values(['image', 'row', 'col'], kind='stable').reset_index(drop=True)

	def train_and_score(self, train_manifest, test_manifest):
		"""Patch-level detection accuracy on test_manifest after training on train_manifest."""
		self.train(train_manifest)
		table = self.score(test_manifest)
		counts = confusion(predict_labels(table['score'].to_numpy()), table['label'].to_numpy())
		return detection_accuracy(counts).value


def scores_to_csv(table):
	out = table[SCORE_COLUMNS].copy()
	out['score'] = [format_float(s) for s in out['score']]
	return out.to_csv(index=False, lineterminator='\n')


def bias_run(seed, manifest, net_config, svm_config, test_fraction=0.5):
	"""One reseeded train/test split; image counts per class stay fixed across seeds."""
	train_idx, test_idx = split_images(manifest, test_fraction, seed, stream=0xB1A5)
	net = GsPcaNet(net_config, svm_config, seed=seed, threads=1)
	return net.train_and_score(manifest.subset(train_idx, 'train'), manifest.subset(test_idx, 'test'))


def size_run(size, manifest, net_config, svm_config, seed=0):
	"""Accuracy after training on `size` images per class; the test images never change."""
	splits = {e.split for e in manifest.entries}
	if 'test' in splits:
		pool = [i for i, e in enumerate(manifest.entries) if e.split != 'test']
		test = [i for i, e in enumerate(manifest.entries) if e.split == 'test']
	else:
		pool, test = split_images(manifest, 0.5, seed, stream=0x5123)
	labels = manifest.labels
	rng = make_rng(seed, 0x5124)
	train = []
	for cls in (1, -1):
		idx = np.array([i for i in pool if labels[i] == cls])
		if size > len(idx):
			raise DataError(f"training size {size} exceeds the {len(idx)} available images of class {cls:+d}")
		# nested subsets: a larger size always contains the smaller ones
		train.extend(idx[rng.permutation(len(idx))][:size].tolist())
	net = GsPcaNet(net_config, svm_config, seed=seed, threads=1)
	return net.train_and_score(manifest.subset(sorted(train), 'train'), manifest.subset(test, 'test'))
