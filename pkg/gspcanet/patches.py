import logging
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

try:
	from .imagio import Image
	from .util import DataError
except ImportError:
	from imagio import Image
	from util import DataError

logger = logging.getLogger(__name__)


@dataclass
class PatchMatrix:
	"""Vectorized patches as columns (t1*t2 rows), with the origin of each column.

	origins[j] = (image index, row, col) of the top-left pixel of column j.
	means is set once the matrix has been centered (per-column scalar means).
	"""
	data: np.ndarray
	geometry: Tuple[int, int]
	origins: np.ndarray
	means: Optional[np.ndarray] = None

	def __post_init__(self):
		t1, t2 = self.geometry
		if self.data.ndim != 2 or self.data.shape[0] != t1 * t2:
			raise DataError(f"patch matrix must have {t1 * t2} rows, got shape {self.data.shape}")
		if len(self.origins) != self.data.shape[1]:
			raise DataError("origin map length must equal the column count")

	@property
	def n_patches(self):
		return self.data.shape[1]


@dataclass
class Tile:
	image: int
	row: int
	col: int
	label: int


@dataclass
class TileGrid:
	tile_size: int
	tiles: List[Tile] = field(default_factory=list)
	theta_pos: float = 0.5
	shape: Tuple[int, int] = (0, 0)

	def label_grid(self):
		grid = np.zeros(self.shape, dtype=np.int8)
		for t in self.tiles:
			grid[t.row // self.tile_size, t.col // self.tile_size] = t.label
		return grid


def _as_channel(channel):
	if isinstance(channel, Image):
		if channel.channels != 1:
			raise DataError("expected a single-channel image")
		channel = channel.pixels[:, :, 0]
	channel = np.asarray(channel, dtype=np.float64)
	if channel.ndim != 2:
		raise DataError(f"expected a 2-D image channel, got shape {channel.shape}")
	return channel


def extract_overlapping(channel, t1, t2, image_index=0):
	channel = _as_channel(channel)
	u, v = channel.shape
	if u < t1 or v < t2:
		raise DataError(f"image {u}x{v} smaller than patch {t1}x{t2}")
	# (u~, v~, t1, t2) in row-major scan order
	windows = sliding_window_view(channel, (t1, t2))
	uu, vv = windows.shape[:2]
	data = windows.reshape(uu * vv, t1 * t2).T.copy()
	rows, cols = np.divmod(np.arange(uu * vv), vv)
	origins = np.stack([np.full(uu * vv, image_index), rows, cols], axis=1)
	return PatchMatrix(data, (t1, t2), origins)


def center(patches):
	"""Subtract each patch's own scalar mean."""
	if patches.n_patches == 0:
		raise DataError("cannot center an empty patch matrix")
	means = patches.data.mean(axis=0)
	data = patches.data - means[None, :]
	# second pass removes the rounding residue of the first
	residue = data.mean(axis=0)
	data -= residue[None, :]
	return PatchMatrix(data, patches.geometry, patches.origins, means + residue)


def concat_training(images, t1, t2, sample=None, rng=None):
	"""Centered patch matrix over N same-sized single-channel images.

	sample, if given, keeps at most that many columns per image (uniform,
	without replacement, drawn from rng).
	"""
	images = [_as_channel(im) for im in images]
	if len(images) == 0:
		raise DataError("concat_training needs at least one image")
	shape = images[0].shape
	for i, im in enumerate(images):
		if im.shape != shape:
			raise DataError(f"image {i} has shape {im.shape}, expected {shape}")

	blocks = []
	for i, im in enumerate(images):
		pm = center(extract_overlapping(im, t1, t2, image_index=i))
		if sample is not None and pm.n_patches > sample:
			keep = np.sort(rng.choice(pm.n_patches, size=sample, replace=False))
			pm = PatchMatrix(pm.data[:, keep], pm.geometry, pm.origins[keep], pm.means[keep])
		blocks.append(pm)
	return PatchMatrix(
		np.concatenate([b.data for b in blocks], axis=1),
		(t1, t2),
		np.concatenate([b.origins for b in blocks], axis=0),
		np.concatenate([b.means for b in blocks], axis=0))


def tile_image(image, mask=None, tile_size=20, theta_pos=0.5, image_index=0, default_label=0):
	"""Non-overlapping tile_size tiles; remainder pixels at right/bottom edges are dropped.

	With a mask, a tile is positive iff its mask coverage fraction >= theta_pos;
	without one every tile gets default_label.
	"""
	if isinstance(image, Image):
		h, w = image.height, image.width
	else:
		h, w = np.asarray(image).shape[:2]
	if tile_size > h or tile_size > w:
		raise DataError(f"tile size {tile_size} larger than image {h}x{w}")
	if mask is not None:
		mask = np.asarray(mask, dtype=bool)
		if mask.shape != (h, w):
			raise DataError(f"mask shape {mask.shape} does not match image {(h, w)}")
	gh, gw = h // tile_size, w // tile_size
	grid = TileGrid(tile_size, [], theta_pos, (gh, gw))
	for r in range(gh):
		for c in range(gw):
			row, col = r * tile_size, c * tile_size
			if mask is None:
				label = default_label
			else:
				coverage = mask[row:row + tile_size, col:col + tile_size].mean()
				label = int(coverage >= theta_pos)
			grid.tiles.append(Tile(image_index, row, col, label))
	return grid


def crop_tile(pixels, tile, tile_size):
	return pixels[tile.row:tile.row + tile_size, tile.col:tile.col + tile_size]


def split_channels(image):
	if image.channels not in (1, 3):
		raise DataError(f"unsupported channel count {image.channels}")
	return [image.pixels[:, :, c].copy() for c in range(image.channels)]


def merge_channels(channels):
	return Image(np.stack(channels, axis=2))
