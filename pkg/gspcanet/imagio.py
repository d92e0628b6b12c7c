import logging, math, os
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional

import numpy as np
import pandas as pd
from scipy.ndimage import gaussian_filter
from tqdm.auto import trange

try:
	from .util import DataError, ImagIOError, UsageError, atomic_write_bytes, atomic_write_text, make_rng, sha256_files
except ImportError:
	from util import DataError, ImagIOError, UsageError, atomic_write_bytes, atomic_write_text, make_rng, sha256_files

logger = logging.getLogger(__name__)

LABELS = ('cancerous', 'healthy')
MANIFEST_COLUMNS = ['path', 'label', 'mask']
SPLITS = ('train', 'test')
_WHITESPACE = b' \t\n\r\v\f'


@dataclass
class Image:
	"""Intensity image, pixels shaped (height, width, channels) with values in [0, 1]."""
	pixels: np.ndarray

	def __post_init__(self):
		p = np.asarray(self.pixels, dtype=np.float64)
		if p.ndim == 2: p = p[:, :, None]
		if p.ndim != 3 or p.shape[2] not in (1, 3):
			raise DataError(f"image must be (h, w, 1|3), got shape {p.shape}")
		if p.shape[0] < 1 or p.shape[1] < 1:
			raise DataError(f"image has a zero dimension: {p.shape}")
		if not np.isfinite(p).all() or p.min() < 0 or p.max() > 1:
			raise DataError("image values must be finite and inside [0, 1]")
		self.pixels = p

	@property
	def height(self): return self.pixels.shape[0]

	@property
	def width(self): return self.pixels.shape[1]

	@property
	def channels(self): return self.pixels.shape[2]

	@property
	def samples(self):
		return self.pixels.reshape(-1)


@dataclass
class ManifestEntry:
	path: Path
	label: str
	mask: Optional[Path] = None
	split: Optional[str] = None

	@property
	def is_cancerous(self):
		return self.label == 'cancerous'


@dataclass
class DatasetManifest:
	entries: List[ManifestEntry]
	split: Optional[str] = None
	source: Optional[Path] = None

	def __len__(self):
		return len(self.entries)

	def subset(self, indices, split=None):
		return DatasetManifest([self.entries[i] for i in indices], split=split, source=self.source)

	@property
	def labels(self):
		return np.array([1 if e.is_cancerous else -1 for e in self.entries])


@dataclass
class SynthSpec:
	seed: int = 7
	per_class: int = 20
	size: int = 64
	freq_min: float = 0.18
	freq_max: float = 0.32
	blob_sigma: float = 5.0
	blob_density: float = 0.015
	noise_std: float = 0.02
	tumor_block: int = 20
	channels: int = 1

	def __post_init__(self):
		if self.per_class < 1: raise UsageError(f"per_class must be >= 1, got {self.per_class}")
		if self.size < 1: raise UsageError(f"size must be >= 1, got {self.size}")
		if self.noise_std < 0: raise UsageError(f"noise_std must be >= 0, got {self.noise_std}")
		if not 0 < self.freq_min <= self.freq_max <= 0.5:
			raise UsageError("grating frequencies must satisfy 0 < freq_min <= freq_max <= 0.5")
		if self.blob_density < 0 or self.blob_sigma <= 0:
			raise UsageError("blob_density must be >= 0 and blob_sigma > 0")
		if self.tumor_block < 1: raise UsageError("tumor_block must be >= 1")
		if self.channels not in (1, 3): raise UsageError("channels must be 1 or 3")


def _skip_space(buf, pos):
	while pos < len(buf):
		c = buf[pos:pos + 1]
		if c == b'#':
			while pos < len(buf) and buf[pos:pos + 1] not in (b'\n', b'\r'):
				pos += 1
		elif c in _WHITESPACE:
			pos += 1
		else:
			break
	return pos


def _read_int(buf, pos, name, path):
	pos = _skip_space(buf, pos)
	start = pos
	while pos < len(buf) and buf[pos:pos + 1].isdigit():
		pos += 1
	if pos == start:
		raise ImagIOError(f"{path}: expected {name} at byte offset {start}")
	return int(buf[start:pos]), pos


def parse_pnm(buf, path='<bytes>'):
	magic = buf[:2]
	if magic not in (b'P5', b'P6'):
		raise ImagIOError(f"{path}: unsupported magic {magic!r} at byte offset 0 (need P5 or P6)")
	channels = 1 if magic == b'P5' else 3
	pos = 2
	width, pos = _read_int(buf, pos, 'width', path)
	w_end = pos
	height, pos = _read_int(buf, pos, 'height', path)
	h_end = pos
	maxval, pos = _read_int(buf, pos, 'maxval', path)
	if width < 1: raise ImagIOError(f"{path}: zero width at byte offset {w_end}")
	if height < 1: raise ImagIOError(f"{path}: zero height at byte offset {h_end}")
	if maxval != 255:
		raise ImagIOError(f"{path}: unsupported maxval {maxval} at byte offset {pos} (only 255)")
	if pos >= len(buf) or buf[pos:pos + 1] not in _WHITESPACE:
		raise ImagIOError(f"{path}: missing separator after header at byte offset {pos}")
	pos += 1
	n = width * height * channels
	if len(buf) - pos < n:
		raise ImagIOError(f"{path}: truncated payload at byte offset {len(buf)}, expected {n} bytes from offset {pos}")
	data = np.frombuffer(buf, dtype=np.uint8, count=n, offset=pos)
	return Image(data.reshape(height, width, channels).astype(np.float64) / 255.)


def read_pnm(path):
	try:
		with open(path, 'rb') as f:
			buf = f.read()
	except OSError as e:
		raise ImagIOError(f"cannot read {path}: {e}") from e
	return parse_pnm(buf, path)


def quantize(values):
	# round half up, 0.5 -> 128
	return np.clip(np.floor(np.asarray(values) * 255. + 0.5), 0, 255).astype(np.uint8)


def encode_pnm(image):
	magic = b'P5' if image.channels == 1 else b'P6'
	header = b'%s\n%d %d\n255\n' % (magic, image.width, image.height)
	return header + quantize(image.pixels).tobytes()


def write_pnm(image, path):
	atomic_write_bytes(path, encode_pnm(image))


def read_mask(path):
	"""Binary mask, pixel > 127 means inside a tumor."""
	img = read_pnm(path)
	if img.channels != 1:
		raise DataError(f"mask {path} must be a single-channel PGM")
	return quantize(img.pixels[:, :, 0]) > 127


def _header_dims(path):
	try:
		with open(path, 'rb') as f:
			head = f.read(512)
	except OSError as e:
		raise ImagIOError(f"cannot read {path}: {e}") from e
	if head[:2] not in (b'P5', b'P6'):
		raise ImagIOError(f"{path}: unsupported magic {head[:2]!r} at byte offset 0 (need P5 or P6)")
	width, pos = _read_int(head, 2, 'width', path)
	height, pos = _read_int(head, pos, 'height', path)
	return height, width


def load_manifest(path, split=None):
	path = Path(path)
	if not path.is_file():
		raise ImagIOError(f"manifest not found: {path}")
	try:
		tab = pd.read_csv(path, dtype=str, keep_default_na=False)
	except (OSError, pd.errors.ParserError, pd.errors.EmptyDataError) as e:
		raise DataError(f"cannot parse manifest {path}: {e}") from e
	cols = list(tab.columns)
	if cols[:3] != MANIFEST_COLUMNS or not set(cols[3:]) <= {'split'}:
		raise DataError(f"manifest header must be {','.join(MANIFEST_COLUMNS)}[,split], got {','.join(cols)}")

	root = path.parent
	entries = []
	for i, row in enumerate(tab.itertuples(index=False), start=1):
		label = row.label.strip()
		if label not in LABELS:
			raise DataError(f"manifest row {i}: unknown label {label!r}; allowed: {', '.join(LABELS)}")
		img_path = root / row.path
		if not img_path.is_file():
			raise ImagIOError(f"manifest row {i}: image not found: {img_path}")
		mask_path = None
		if row.mask.strip():
			mask_path = root / row.mask.strip()
			if not mask_path.is_file():
				raise ImagIOError(f"manifest row {i}: mask not found: {mask_path}")
			if _header_dims(mask_path) != _header_dims(img_path):
				raise DataError(f"manifest row {i}: mask dimension mismatch, image {_header_dims(img_path)} vs mask {_header_dims(mask_path)}")
		entry_split = getattr(row, 'split', '').strip() or None
		if entry_split is not None and entry_split not in SPLITS:
			raise DataError(f"manifest row {i}: unknown split {entry_split!r}; allowed: {', '.join(SPLITS)}")
		entries.append(ManifestEntry(img_path, label, mask_path, entry_split))

	if split is not None:
		if any(e.split is not None for e in entries):
			entries = [e for e in entries if e.split == split]
		else:
			logger.info(f"manifest {path} has no split column, using all {len(entries)} entries for {split}")
	return DatasetManifest(entries, split=split, source=path)


def write_manifest(manifest, path):
	path = Path(path)
	root = path.parent.resolve()
	rel = lambda p: '' if p is None else os.path.relpath(Path(p).resolve(), root).replace(os.sep, '/')
	columns = MANIFEST_COLUMNS + (['split'] if any(e.split is not None for e in manifest.entries) else [])
	rows = [[rel(e.path), e.label, rel(e.mask), e.split or ''][:len(columns)] for e in manifest.entries]
	table = pd.DataFrame(rows, columns=columns, dtype=str)
	atomic_write_text(path, table.to_csv(index=False, lineterminator='\n'))


def dataset_digest(manifest):
	paths = []
	for e in manifest.entries:
		paths.append(e.path)
		if e.mask is not None: paths.append(e.mask)
	return sha256_files(paths)


def _place_tumors(rng, grid, max_tumors=2):
	# tile-aligned rectangles, never 4-adjacent to each other
	occupied = np.zeros((grid, grid), dtype=bool)
	rects = []
	n_tumor = int(rng.integers(1, max_tumors + 1))
	max_side = max(1, (grid + 1) // 2)
	for _ in range(20 * n_tumor):
		if len(rects) == n_tumor: break
		h, w = (int(v) for v in rng.integers(1, max_side + 1, size=2))
		r, c = int(rng.integers(0, grid - h + 1)), int(rng.integers(0, grid - w + 1))
		halo = occupied[max(r - 1, 0):r + h + 1, max(c - 1, 0):c + w + 1]
		if halo.any(): continue
		occupied[r:r + h, c:c + w] = True
		rects.append((r, c, h, w))
	return rects


def healthy_texture(rng, size, spec):
	# smooth low-frequency blobs around a bright background
	n_blob = max(1, int(round(spec.blob_density * size * size)))
	field_ = np.zeros((size, size))
	field_[rng.integers(0, size, n_blob), rng.integers(0, size, n_blob)] = rng.uniform(0.5, 1.0, n_blob)
	field_ = gaussian_filter(field_, spec.blob_sigma, mode='wrap')
	field_ = field_ / (field_.max() + 1e-12)
	return 0.62 + 0.15 * field_


def cancerous_texture(rng, size, spec):
	# dense oriented grating, random phase, darker mean
	freq = rng.uniform(spec.freq_min, spec.freq_max)
	theta = rng.uniform(0, np.pi)
	phase = rng.uniform(0, 2 * np.pi)
	yy, xx = np.mgrid[0:size, 0:size]
	return 0.35 + 0.2 * np.sin(2 * np.pi * freq * (xx * np.cos(theta) + yy * np.sin(theta)) + phase)


def synth_one(spec, index, cancerous):
	rng = make_rng(spec.seed, index)
	size = spec.size
	gray = healthy_texture(rng, size, spec)
	mask = np.zeros((size, size), dtype=bool)
	if cancerous:
		tumor = cancerous_texture(rng, size, spec)
		grid = size // spec.tumor_block
		if grid >= 1:
			b = spec.tumor_block
			for r, c, h, w in _place_tumors(rng, grid):
				mask[r * b:(r + h) * b, c * b:(c + w) * b] = True
		else:
			mask[:] = True
		gray = np.where(mask, tumor, gray)
	pixels = np.repeat(gray[:, :, None], spec.channels, axis=2)
	if spec.channels == 3:
		# mild stain-like tint per channel
		pixels = pixels * np.array([1.0, 0.85, 0.95])[None, None, :]
	if spec.noise_std > 0:
		pixels = pixels + rng.normal(0, spec.noise_std, size=pixels.shape)
	return Image(np.clip(pixels, 0, 1)), Image(mask.astype(np.float64))


def generate_synthetic(spec, out_dir):
	"""Write a two-class texture dataset under out_dir, return (manifest, manifest path)."""
	out_dir = Path(out_dir)
	for d in (out_dir, out_dir / 'images', out_dir / 'masks'):
		try:
			d.mkdir(parents=True, exist_ok=True)
		except OSError as e:
			raise ImagIOError(f"cannot create {d}: {e}") from e

	ext = 'pgm' if spec.channels == 1 else 'ppm'
	entries = []
	n_train = int(math.ceil(spec.per_class / 2))
	index = 0
	for label in LABELS:
		for i in trange(spec.per_class, desc=f'synth {label}', leave=False):
			image, mask = synth_one(spec, index, label == 'cancerous')
			img_path = out_dir / 'images' / f'{label}_{i:04d}.{ext}'
			mask_path = out_dir / 'masks' / f'{label}_{i:04d}_mask.pgm'
			write_pnm(image, img_path)
			write_pnm(mask, mask_path)
			split = 'train' if i < n_train or spec.per_class == 1 else 'test'
			entries.append(ManifestEntry(img_path, label, mask_path, split))
			index += 1

	manifest = DatasetManifest(entries, source=out_dir / 'manifest.csv')
	write_manifest(manifest, manifest.source)
	logger.info(f"wrote {len(entries)} images to {out_dir}")
	return manifest, manifest.source
