import argparse, json, logging, sys
from dataclasses import MISSING, dataclass, field, fields
from pathlib import Path
from typing import List, Optional

import pandas as pd

try:
	from .classifier import SvmConfig
	from .evaluation import metrics_report, selection_bias, table_row, training_size_curve, write_report
	from .GsPcaNet_Wrapper import GsPcaNet, bias_run, load_truth, scores_to_csv, size_run
	from .imagio import SynthSpec, dataset_digest, generate_synthetic, load_manifest
	from .network import NetConfig, load_model, save_model
	from .util import __version__, DataError, GsPcaNetError, ImagIOError, UsageError, atomic_write_text, cpu_count, format_float
except ImportError:
	from classifier import SvmConfig
	from evaluation import metrics_report, selection_bias, table_row, training_size_curve, write_report
	from GsPcaNet_Wrapper import GsPcaNet, bias_run, load_truth, scores_to_csv, size_run
	from imagio import SynthSpec, dataset_digest, generate_synthetic, load_manifest
	from network import NetConfig, load_model, save_model
	from util import __version__, DataError, GsPcaNetError, ImagIOError, UsageError, atomic_write_text, cpu_count, format_float

logger = logging.getLogger(__name__)

SYNTH, TRAIN, PREDICT, EVALUATE, BIAS, SIZE = 'synth', 'train', 'predict', 'evaluate', 'experiment-bias', 'experiment-size'
ALL = (SYNTH, TRAIN, PREDICT, EVALUATE, BIAS, SIZE)
LEARN = (TRAIN, BIAS, SIZE)


def _parse_bool(text):
	value = str(text).strip().lower()
	if value in ('1', 'true', 'yes', 'on'): return True
	if value in ('0', 'false', 'no', 'off'): return False
	raise ValueError(f"not a boolean: {text!r}")


def _optional(parse):
	def inner(text):
		return None if str(text).strip().lower() in ('', 'none') else parse(text)
	inner.__name__ = parse.__name__
	return inner


def opt(default, doc, commands, parse=None, many=False):
	"""A RunConfig field; metadata drives the flags, the help text and config-file parsing."""
	parse = parse or type(default)
	meta = dict(doc=doc, commands=commands, parse=parse, many=many)
	if isinstance(default, list):
		return field(default_factory=lambda: list(default), metadata=meta)
	return field(default=default, metadata=meta)


@dataclass
class RunConfig:
	seed: int = opt(0, "64-bit seed for every random draw", ALL)
	threads: Optional[int] = opt(None, "worker processes (default: all cores)", ALL, _optional(int))
	# paths
	manifest: str = opt('manifest.csv', "dataset manifest (path,label,mask[,split])", (TRAIN, PREDICT, EVALUATE, BIAS, SIZE))
	model: str = opt('model.gspn', "model file", (TRAIN, PREDICT))
	scores: str = opt('scores.csv', "per-tile score table", (PREDICT, EVALUATE))
	out: Optional[str] = opt(None, "output directory (synth, evaluate) or CSV (experiments)", (SYNTH, EVALUATE, BIAS, SIZE), _optional(str))
	train_split: str = opt('train', "manifest split used for training", (TRAIN,))
	test_split: str = opt('test', "manifest split scored and evaluated", (PREDICT, EVALUATE))
	# synthetic data
	per_class: int = opt(20, "images per class", (SYNTH,))
	size: int = opt(64, "image side in pixels", (SYNTH,))
	noise_std: float = opt(0.02, "additive Gaussian noise std", (SYNTH,))
	channels: int = opt(1, "1 (PGM) or 3 (PPM)", (SYNTH,))
	tumor_block: int = opt(20, "tumor grid cell in pixels", (SYNTH,))
	# network
	t: int = opt(5, "filter side t1 = t2 (odd)", LEARN)
	L1: int = opt(9, "stage-1 filter count", LEARN)
	L2: int = opt(8, "stage-2 filter count (at most 16)", LEARN)
	block: int = opt(8, "histogram block side", LEARN)
	stride: int = opt(4, "histogram block stride", LEARN)
	tile: int = opt(20, "tile side in pixels", LEARN + (EVALUATE,))
	theta_pos: float = opt(0.5, "mask coverage for a positive tile", LEARN + (EVALUATE,))
	lam: float = opt(1e-4, "ridge penalty", LEARN)
	lam1: float = opt(1e-3, "l1 penalty", LEARN)
	rho: float = opt(1e-2, "graph penalty", LEARN)
	max_iter: int = opt(100, "gs-pca outer iteration cap", LEARN)
	tol: float = opt(1e-6, "gs-pca relative change tolerance", LEARN)
	k: int = opt(5, "kNN graph neighbours", LEARN)
	max_nodes: int = opt(2000, "graph node cap (k-means centres above it)", LEARN)
	cluster_pool: Optional[int] = opt(None, "points handed to k-means (default: 10 x max_nodes)", LEARN, _optional(int))
	graph_per_class: bool = opt(False, "separate graph per tile class", LEARN, _parse_bool)
	patches_per_image: Optional[int] = opt(None, "patch columns kept per image (default: all)", LEARN, _optional(int))
	# svm
	C: float = opt(1.0, "svm regularization", LEARN)
	balanced: bool = opt(True, "inverse-frequency class weights", LEARN, _parse_bool)
	pos_weight: float = opt(1.0, "multiplier on the cancerous-class weight", LEARN)
	max_epochs: int = opt(200, "svm epoch cap", LEARN)
	# tuning
	tune: bool = opt(False, "select parameters on a validation split", (TRAIN,), _parse_bool)
	val_fraction: float = opt(0.25, "validation share of training images per class", (TRAIN,))
	tune_lambda1: List[float] = opt([0.0, 1e-3, 1e-2], "lam1 grid", (TRAIN,), float, many=True)
	tune_L1: List[int] = opt([], "L1 grid (empty: not tuned)", (TRAIN,), int, many=True)
	tune_block: List[int] = opt([], "block grid (empty: not tuned)", (TRAIN,), int, many=True)
	tune_C: List[float] = opt([], "svm C grid (empty: not tuned)", (TRAIN,), float, many=True)
	# evaluation
	beta: float = opt(1.0, "F-beta weight", (EVALUATE,))
	coverage: float = opt(0.25, "truth-tumor coverage for a tumor-level hit", (EVALUATE,))
	# experiments
	runs: int = opt(10, "selection-bias runs", (BIAS,))
	seeds: List[int] = opt([], "explicit seeds per run (overrides runs)", (BIAS,), int, many=True)
	test_fraction: float = opt(0.5, "test share of images per class", (BIAS,))
	sizes: List[int] = opt([1, 2, 4, 6, 8, 10], "training images per class", (SIZE,), int, many=True)

	def __post_init__(self):
		if self.threads is not None and self.threads < 1:
			raise UsageError(f"threads must be >= 1, got {self.threads}")
		if not 0 < self.val_fraction < 1 or not 0 < self.test_fraction < 1:
			raise UsageError("val_fraction and test_fraction must lie in (0, 1)")

	def net_config(self):
		return NetConfig(t1=self.t, t2=self.t, L1=self.L1, L2=self.L2, block=self.block, stride=self.stride,
						 tile=self.tile, theta_pos=self.theta_pos, lam=self.lam, lam1=self.lam1, rho=self.rho,
						 max_iter=self.max_iter, tol=self.tol, k=self.k, max_nodes=self.max_nodes,
						 cluster_pool=self.cluster_pool, graph_per_class=self.graph_per_class,
						 patches_per_image=self.patches_per_image)

	def svm_config(self):
		return SvmConfig(C=self.C, balanced=self.balanced, pos_weight=self.pos_weight, max_epochs=self.max_epochs)

	def tune_grid(self):
		grid = {'lam1': self.tune_lambda1, 'L1': self.tune_L1, 'block': self.tune_block, 'C': self.tune_C}
		return {k: v for k, v in grid.items() if v}

	@property
	def n_threads(self):
		return self.threads or cpu_count()


_FIELDS = {f.name: f for f in fields(RunConfig)}


def _coerce(name, value):
	f = _FIELDS.get(name)
	if f is None:
		raise UsageError(f"unknown config key {name!r}")
	parse, many = f.metadata['parse'], f.metadata['many']
	try:
		if many:
			items = value if isinstance(value, list) else str(value).replace(',', ' ').split()
			return [parse(v) for v in items]
		if isinstance(value, str) or parse is _parse_bool:
			return parse(value)
		return value if value is None else parse(value)
	except (TypeError, ValueError) as e:
		raise UsageError(f"bad value for {name}: {value!r} ({e})") from e


def load_config(path):
	"""Flat key=value lines ('#' comments) or, for *.json, a flat JSON object."""
	path = Path(path)
	try:
		text = path.read_text()
	except OSError as e:
		raise ImagIOError(f"cannot read config {path}: {e}") from e
	if path.suffix.lower() == '.json':
		try:
			raw = json.loads(text)
		except ValueError as e:
			raise UsageError(f"config {path} is not valid JSON: {e}") from e
		if not isinstance(raw, dict):
			raise UsageError(f"config {path} must hold a flat JSON object")
		items = raw.items()
	else:
		items = []
		for n, line in enumerate(text.splitlines(), start=1):
			line = line.split('#', 1)[0].strip()
			if not line: continue
			if '=' not in line:
				raise UsageError(f"config {path} line {n}: expected key=value")
			key, value = line.split('=', 1)
			items.append((key.strip(), value.strip()))
	return {k: _coerce(k, v) for k, v in items}


def resolve_config(args):
	"""defaults < config file < flags."""
	values = {}
	if getattr(args, 'config', None) is not None:
		values.update(load_config(args.config))
	values.update({k: v for k, v in vars(args).items() if k in _FIELDS})
	return RunConfig(**values)


def _flag_default(f):
	return f.default_factory() if f.default is MISSING else f.default


def _add_run_flags(sub, command):
	for f in fields(RunConfig):
		meta = f.metadata
		if command not in meta['commands']: continue
		flag = '--' + f.name.replace('_', '-')
		help = f"{meta['doc']} (default: {_flag_default(f)})"
		if meta['parse'] is _parse_bool:
			sub.add_argument(flag, dest=f.name, action=argparse.BooleanOptionalAction,
							 default=argparse.SUPPRESS, help=help)
		elif meta['many']:
			sub.add_argument(flag, dest=f.name, type=meta['parse'], nargs='*', default=argparse.SUPPRESS, help=help)
		else:
			sub.add_argument(flag, dest=f.name, type=meta['parse'], default=argparse.SUPPRESS, help=help)


def build_parser():
	logs = argparse.ArgumentParser(add_help=False)
	logs.add_argument('-v', '--verbose', action='count', default=argparse.SUPPRESS, help="more logging (repeatable)")
	logs.add_argument('-q', '--quiet', action='store_true', default=argparse.SUPPRESS, help="warnings and errors only")

	parser = argparse.ArgumentParser(prog='gspcanet', parents=[logs],
									 description="GS-PCANet: graph-regularized sparse PCA filter networks for tissue tile classification")
	parser.add_argument('--version', action='version', version=f'%(prog)s {__version__}')
	subparsers = parser.add_subparsers(dest='command')
	helps = {
		SYNTH: "write a synthetic two-class texture dataset",
		TRAIN: "learn filter banks and the classifier, write a model file",
		PREDICT: "score every tile of a manifest",
		EVALUATE: "metrics, ROC and FROC curves from a score table",
		BIAS: "accuracy spread over reseeded train/test splits",
		SIZE: "accuracy versus training images per class",
	}
	for command in ALL:
		sub = subparsers.add_parser(command, parents=[logs], help=helps[command], description=helps[command])
		sub.add_argument('-c', '--config', type=Path, default=argparse.SUPPRESS,
						 help="key=value or .json config file; flags override it")
		_add_run_flags(sub, command)
	return parser


def configure_logging(verbose=0, quiet=False):
	level = logging.WARNING if quiet else logging.DEBUG if verbose else logging.INFO
	logging.basicConfig(level=level, format='%(asctime)s %(name)s %(levelname)s: %(message)s',
						stream=sys.stderr, force=True)


def cmd_synth(config, verbose=False):
	spec = SynthSpec(seed=config.seed, per_class=config.per_class, size=config.size, noise_std=config.noise_std,
					 tumor_block=config.tumor_block, channels=config.channels)
	manifest, path = generate_synthetic(spec, config.out or 'data')
	print(path)
	print(f"digest {dataset_digest(manifest)}")
	return 0


def _net(config, verbose=False):
	return GsPcaNet(config.net_config(), config.svm_config(), config.seed, config.n_threads, verbose)


def cmd_train(config, verbose=False):
	manifest = load_manifest(config.manifest, split=config.train_split)
	net = _net(config, verbose)
	model = net.train(manifest, config.tune_grid() if config.tune else None, config.val_fraction)
	save_model(model, config.model)
	print(config.model)
	return 0


def cmd_predict(config, verbose=False):
	model = load_model(config.model)
	manifest = load_manifest(config.manifest, split=config.test_split)
	net = GsPcaNet(model.config, seed=config.seed, threads=config.n_threads, verbose=verbose)
	table = net.score(manifest, model)
	atomic_write_text(config.scores, scores_to_csv(table))
	logger.info(f"wrote {len(table)} tile scores to {config.scores}")
	print(config.scores)
	return 0


def read_scores(path):
	try:
		table = pd.read_csv(path, dtype={'image': str})
	except FileNotFoundError as e:
		raise ImagIOError(f"score table not found: {path}") from e
	except (OSError, pd.errors.ParserError, pd.errors.EmptyDataError) as e:
		raise DataError(f"cannot parse score table {path}: {e}") from e
	missing = {'image', 'row', 'col', 'score'} - set(table.columns)
	if missing:
		raise DataError(f"score table {path} lacks columns {', '.join(sorted(missing))}")
	return table


def cmd_evaluate(config, verbose=False):
	table = read_scores(config.scores)
	manifest = load_manifest(config.manifest, split=config.test_split)
	truth = load_truth(manifest, config.tile, config.theta_pos)
	report = metrics_report(table, truth, config.tile, config.beta, config.coverage)
	out = write_report(report, config.out or '.')
	logger.info(f"wrote metrics.csv, roc.csv, froc.csv, per_image.csv to {out}")
	print(table_row(report))
	return 0


def cmd_experiment_bias(config, verbose=False):
	manifest = load_manifest(config.manifest)
	seeds = config.seeds or [config.seed + i for i in range(config.runs)]
	accuracies, fit = selection_bias(bias_run, seeds, config.n_threads, manifest=manifest,
									 net_config=config.net_config(), svm_config=config.svm_config(),
									 test_fraction=config.test_fraction)
	rows = [[i, s, format_float(a)] for i, (s, a) in enumerate(zip(seeds, accuracies))]
	rows += [['mean', '', format_float(fit.mean)], ['std', '', format_float(fit.std)]]
	out = config.out or 'bias.csv'
	table = pd.DataFrame(rows, columns=['run', 'seed', 'accuracy'], dtype=object)
	atomic_write_text(out, table.to_csv(index=False, lineterminator='\n'))
	print(f"mean {fit.mean:.3f} std {fit.std:.3f} over {len(seeds)} runs -> {out}")
	return 0


def cmd_experiment_size(config, verbose=False):
	manifest = load_manifest(config.manifest)
	curve = training_size_curve(size_run, config.sizes, config.n_threads, manifest=manifest,
								net_config=config.net_config(), svm_config=config.svm_config(), seed=config.seed)
	out = config.out or 'size.csv'
	table = pd.DataFrame({'size': [s for s, _ in curve], 'accuracy': [format_float(a) for _, a in curve]})
	atomic_write_text(out, table.to_csv(index=False, lineterminator='\n'))
	for s, a in curve:
		print(f"{s}\t{a:.3f}")
	return 0


COMMANDS = {
	SYNTH: cmd_synth,
	TRAIN: cmd_train,
	PREDICT: cmd_predict,
	EVALUATE: cmd_evaluate,
	BIAS: cmd_experiment_bias,
	SIZE: cmd_experiment_size,
}


def main(argv=None):
	parser = build_parser()
	try:
		args = parser.parse_args(argv)
	except SystemExit as e:
		return e.code if isinstance(e.code, int) else 2
	verbose = getattr(args, 'verbose', 0)
	configure_logging(verbose, getattr(args, 'quiet', False))
	if args.command is None:
		parser.print_help(sys.stderr)
		return UsageError.exit_code
	try:
		config = resolve_config(args)
		return COMMANDS[args.command](config, verbose=bool(verbose))
	except GsPcaNetError as e:
		logger.error(str(e))
		return e.exit_code
	except KeyboardInterrupt:
		logger.error("interrupted")
		return 130


if __name__ == '__main__':
	sys.exit(main())
