# config.py
import dataclasses
import logging
import os
from dataclasses import dataclass, field

import utils
from errors import ConfigError
from evaluation import DEFAULT_OOD_RATIOS, EvalSpec
from losses import LossConfig
from milmodel import ModelSpec
from training import TrainConfig

logger = logging.getLogger(__name__)

# --- DIRECTORY PATHS ---
DATA_DIR = os.environ.get('EVIMIL_DATA_DIR', utils.get_asset_path('data'))
RUNS_DIR = os.environ.get('EVIMIL_RUNS_DIR', utils.get_asset_path('runs'))
CACHE_SUBDIR = 'cache'
CONFIG_SNAPSHOT = 'config.txt'
CHECKPOINT_FILE = 'checkpoint.evim'
HISTORY_FILE = 'history.jsonl'
REPORT_FILE = 'report.json'

# --- DATASET CONFIG ---
IDX_FILES = {
    'train_images': 'train-images-idx3-ubyte.gz',
    'train_labels': 'train-labels-idx1-ubyte.gz',
    'test_images': 't10k-images-idx3-ubyte.gz',
    'test_labels': 't10k-labels-idx1-ubyte.gz',
}
IDX_SOURCES = {
    'mnist': {'name': 'MNIST', 'mirror': 'https://ossci-datasets.s3.amazonaws.com/mnist/'},
    'fmnist': {'name': 'Fashion-MNIST', 'mirror': 'http://fashion-mnist.s3-website.eu-central-1.amazonaws.com/'},
    'kmnist': {'name': 'Kuzushiji-MNIST', 'mirror': 'http://codh.rois.ac.jp/kmnist/dataset/kmnist/'},
}
DATASETS = {
    'synth2d': {
        'name': 'Synthetic 2D Gaussians', 'kind': 'synthetic',
        'n_train': 2000, 'n_val': 500, 'n_test': 500,
    },
    'mnist-bags': {
        'name': 'MNIST-bags', 'kind': 'idx', 'source': 'mnist', 'positive_class': 9,
        'n_train': 500, 'n_val': 100, 'n_test': 1000, 'train_split': 50000,
    },
}
DATASET_ALIASES = {'mnist_bags': 'mnist-bags', 'mnist': 'mnist-bags'}
OOD_SOURCES = {
    'far_field': {'name': 'Far-field ring (radius 4-6)', 'kind': 'synthetic', 'n_bags': None},
    'fmnist': {'name': 'Fashion-MNIST test images', 'kind': 'idx', 'n_bags': 1000},
    'kmnist': {'name': 'Kuzushiji-MNIST test images', 'kind': 'idx', 'n_bags': 1000},
}
BAG_LENGTH_MEAN = 10.0
BAG_LENGTH_SD = 2.0

# --- MODEL & SWEEP CONFIG ---
ENCODER_SIZES = {
    'synth2d': (128, 128),
    'mnist-bags': (500, 256),
}
LAMBDA1_GRID = (0.1, 0.05, 0.01, 0.005, 0.001)
OOD_RATIOS = DEFAULT_OOD_RATIOS

# Applied between the dataclass defaults and the config file.
DATASET_PRESETS = {
    'synth2d': {
        'model.encoder_sizes': ENCODER_SIZES['synth2d'],
        'model.head_bias_init': 3.0,
        'loss.lambda1': 0.4,
        'train.lr': 5e-5,
        'train.lr_patience': 5,
        'train.early_stop_patience': 10,
        'eval.ood_sources': ('far_field',),
    },
    'mnist-bags': {
        'model.encoder_sizes': ENCODER_SIZES['mnist-bags'],
        'eval.ood_sources': ('fmnist', 'kmnist'),
    },
}

SECTIONS = {
    'model': ModelSpec,
    'loss': LossConfig,
    'train': TrainConfig,
    'eval': EvalSpec,
}
# Fields mirrored from the top level rather than set directly.
_DERIVED_FIELDS = {('train', 'seed'), ('train', 'loss')}
# train.batch_bags is an alias factor: bags are always run one at a time and an optimiser
# step averages train.batch_bags * train.grad_accum_steps of them.
_TOP_LEVEL = {'dataset': str, 'seed': int, 'output_dir': str}
_TRUE, _FALSE = {'true', 'yes', 'on', '1'}, {'false', 'no', 'off', '0'}


@dataclass
class ExperimentConfig:
    dataset: str = 'synth2d'
    seed: int = 0
    output_dir: str = ''
    model: ModelSpec = field(default_factory=ModelSpec)
    loss: LossConfig = field(default_factory=LossConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalSpec = field(default_factory=EvalSpec)

    def __post_init__(self):
        self.dataset = DATASET_ALIASES.get(self.dataset, self.dataset)
        if self.dataset not in DATASETS and not os.path.isdir(self.dataset):
            raise ConfigError(f"Unknown dataset '{self.dataset}'. Use one of {sorted(DATASETS)} or a cache directory.")
        for source in self.eval.ood_sources:
            if source not in OOD_SOURCES:
                raise ConfigError(f"Unknown OOD source '{source}'. Use one of {sorted(OOD_SOURCES)}.")
        # one LossConfig and one seed drive the whole run
        self.train.loss = self.loss
        self.train.seed = self.seed

    @property
    def is_builtin_dataset(self):
        return self.dataset in DATASETS

    def cache_dir(self, data_dir=None):
        """Where gen-data writes and train/eval read the bag sets of this config."""
        if not self.is_builtin_dataset:
            return self.dataset
        return os.path.join(data_dir or DATA_DIR, CACHE_SUBDIR, self.dataset, f"seed-{self.seed}")

    def run_name(self):
        return (f"{self.dataset}-{self.model.variant}-{self.model.pooling}-{self.loss.strategy}"
                f"-l1_{self.loss.lambda1:g}-seed{self.seed}")

    def run_dir(self):
        return self.output_dir or os.path.join(RUNS_DIR, self.run_name())


# --- KEY=VALUE LAYER ---
def settable_keys():
    keys = dict(_TOP_LEVEL)
    for section, cls in SECTIONS.items():
        for f in dataclasses.fields(cls):
            if (section, f.name) not in _DERIVED_FIELDS:
                keys[f"{section}.{f.name}"] = f.type
    return keys


def _parse_scalar(text):
    for cast in (int, float):
        try:
            return cast(text)
        except ValueError:
            pass
    return text


def parse_value(key, raw, kind):
    """Text from a file or flag -> typed value. Values that are already typed pass through."""
    if not isinstance(raw, str):
        return tuple(raw) if kind is tuple else raw
    text = raw.strip()
    try:
        if kind is bool:
            lowered = text.lower()
            if lowered not in _TRUE | _FALSE:
                raise ValueError(f"expected true/false, got '{text}'")
            return lowered in _TRUE
        if kind is int:
            return int(text)
        if kind is float:
            return float(text)
        if kind is tuple:
            return tuple(_parse_scalar(part.strip()) for part in text.split(',') if part.strip())
        return text
    except ValueError as e:
        raise ConfigError(f"Bad value for '{key}': {e}") from None


def parse_assignments(lines, origin='<flags>'):
    """'key=value' strings -> {key: raw text}. Blank lines and '#' comments are skipped."""
    values = {}
    for number, line in enumerate(lines, 1):
        line = line.strip()
        if not line or line.startswith('#'):
            continue
        key, sep, value = line.partition('=')
        if not sep:
            raise ConfigError(f"{origin}:{number}: expected key=value, got '{line}'")
        values[key.strip()] = value.strip()
    return values


def load_config_file(path):
    try:
        with open(path, 'r', encoding='utf-8') as f:
            return parse_assignments(f.read().splitlines(), origin=path)
    except FileNotFoundError:
        logger.error("CRITICAL: Could not load config file. Path: '%s'", path)
        raise ConfigError(f"Config file not found: {path}") from None


def build_config(values):
    """{dotted key: raw or typed value} -> ExperimentConfig. Unknown keys are a ConfigError."""
    keys = settable_keys()
    unknown = sorted(set(values) - set(keys))
    if unknown:
        raise ConfigError(f"Unknown config key(s): {', '.join(unknown)}")
    top, sections = {}, {name: {} for name in SECTIONS}
    for key, raw in values.items():
        value = parse_value(key, raw, keys[key])
        if '.' in key:
            section, name = key.split('.', 1)
            sections[section][name] = value
        else:
            top[key] = value
    try:
        built = {name: SECTIONS[name](**kwargs) for name, kwargs in sections.items()}
    except TypeError as e:
        raise ConfigError(f"Invalid configuration: {e}") from e
    return ExperimentConfig(**top, **built)


def resolve_config(config_file=None, overrides=None, flags=None):
    """
    Precedence, lowest first: dataclass defaults, dataset preset, config file,
    --set overrides, dedicated flags. Flags with a None value are ignored.
    """
    from_file = load_config_file(config_file) if config_file else {}
    from_set = parse_assignments(overrides or [], origin='--set')
    from_flags = {k: v for k, v in (flags or {}).items() if v is not None}
    layered = {**from_file, **from_set, **from_flags}
    dataset = str(layered.get('dataset', ExperimentConfig.dataset)).strip()
    dataset = DATASET_ALIASES.get(dataset, dataset)
    values = {**DATASET_PRESETS.get(dataset, {}), **layered}
    return build_config(values)


def _format_value(value):
    if isinstance(value, bool):
        return 'true' if value else 'false'
    if isinstance(value, (tuple, list)):
        return ','.join(_format_value(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def dump_config(cfg):
    """The resolved config in key=value form; resolve_config on it reproduces cfg."""
    lines = ['# evimil resolved configuration']
    for key in _TOP_LEVEL:
        lines.append(f"{key}={_format_value(getattr(cfg, key))}")
    for section in SECTIONS:
        lines.append('')
        obj = getattr(cfg, section)
        for f in dataclasses.fields(obj):
            if (section, f.name) not in _DERIVED_FIELDS:
                lines.append(f"{section}.{f.name}={_format_value(getattr(obj, f.name))}")
    return '\n'.join(lines) + '\n'


def write_snapshot(cfg, directory):
    path = os.path.join(utils.ensure_dir(directory), CONFIG_SNAPSHOT)
    with open(path, 'w', encoding='utf-8') as f:
        f.write(dump_config(cfg))
    return path
