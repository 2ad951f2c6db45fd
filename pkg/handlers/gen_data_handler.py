# handlers/gen_data_handler.py
import logging
import os

import numpy as np

import config
import services
import utils
from data import (NO_POSITIVE_CLASS, far_field_pool, generate_bags, generate_ood_bags,
                  load_idx, synth2d_pool)
from errors import ConfigError, DataError

logger = logging.getLogger(__name__)

SPLIT_SETS = ('train', 'val', 'test')


def ood_set_name(source):
    return f"ood-{source}"


# --- INSTANCE POOLS ---
def _idx_paths(source, data_dir, download):
    meta = config.IDX_SOURCES[source]
    directory = os.path.join(data_dir, source)
    return services.ensure_idx_files(config.IDX_FILES, directory, meta['mirror'] if download else None)


def split_pools(cfg, data_dir=None, download=False):
    """train / val / test instance pools of a built-in dataset; the splits never share instances."""
    data_dir = data_dir or config.DATA_DIR
    meta = config.DATASETS[cfg.dataset]
    if meta['kind'] == 'synthetic':
        return {split: synth2d_pool(utils.substream(cfg.seed, f'pool/{split}'), split=split)
                for split in SPLIT_SETS}
    paths = _idx_paths(meta['source'], data_dir, download)
    full = load_idx(paths['train_images'], paths['train_labels'], meta['positive_class'], 'train', meta['source'])
    cut = meta['train_split']
    return {
        'train': full.subset(np.arange(cut), 'train'),
        'val': full.subset(np.arange(cut, len(full)), 'val'),
        'test': load_idx(paths['test_images'], paths['test_labels'], meta['positive_class'], 'test',
                         meta['source']),
    }


def ood_pool(cfg, source, data_dir=None, download=False):
    meta = config.OOD_SOURCES.get(source)
    if meta is None:
        raise ConfigError(f"Unknown OOD source '{source}'")
    if meta['kind'] == 'synthetic':
        return far_field_pool(utils.substream(cfg.seed, f'pool/{source}'))
    paths = _idx_paths(source, data_dir or config.DATA_DIR, download)
    return load_idx(paths['test_images'], paths['test_labels'], NO_POSITIVE_CLASS, 'ood', source)


# --- BAG SETS ---
def build_datasets(cfg, data_dir=None, download=False):
    """Every bag set a run needs: train / val / test plus one pure-OOD set per configured source."""
    meta = config.DATASETS[cfg.dataset]
    pools = split_pools(cfg, data_dir, download)
    datasets = {}
    for split in SPLIT_SETS:
        datasets[split] = generate_bags(pools[split], meta[f'n_{split}'], config.BAG_LENGTH_MEAN,
                                        config.BAG_LENGTH_SD, seed=utils.substream(cfg.seed, f'data/{split}'))
    for source in cfg.eval.ood_sources:
        n_bags = cfg.eval.n_ood_bags or config.OOD_SOURCES[source]['n_bags'] or meta['n_test']
        pool = ood_pool(cfg, source, data_dir, download)
        if pool.dim != pools['test'].dim:
            raise DataError(f"OOD source '{source}' has {pool.dim} features, {cfg.dataset} has {pools['test'].dim}")
        datasets[ood_set_name(source)] = generate_ood_bags(pool, n_bags, config.BAG_LENGTH_MEAN, config.BAG_LENGTH_SD,
                                                           seed=utils.substream(cfg.seed, f'data/ood/{source}'))
    return datasets


def _is_cached(directory, expected):
    manifest = services.cached_manifest(directory)
    if manifest is None:
        return False
    return all(manifest.get(key) == value for key, value in expected.items())


def generate(cfg, data_dir=None, download=False):
    """Writes the bag sets of cfg under its cache directory. A rerun with the same seed is a no-op."""
    if not cfg.is_builtin_dataset:
        logger.info("Dataset '%s' is a prebuilt cache directory; nothing to generate", cfg.dataset)
        return cfg.cache_dir()
    root = cfg.cache_dir(data_dir)
    meta = config.DATASETS[cfg.dataset]
    expected = {split: {'n_bags': meta[f'n_{split}'], 'seed': utils.substream(cfg.seed, f'data/{split}')}
                for split in SPLIT_SETS}
    for source in cfg.eval.ood_sources:
        expected[ood_set_name(source)] = {'source': source, 'seed': utils.substream(cfg.seed, f'data/ood/{source}')}
    if all(_is_cached(os.path.join(root, name), keys) for name, keys in expected.items()):
        logger.info("Cache hit for %s (seed %d): %s", cfg.dataset, cfg.seed, root)
        return root

    for name, dataset in build_datasets(cfg, data_dir, download).items():
        services.save_bag_dataset(os.path.join(root, name), dataset)
        logger.info("Wrote %d bags to %s", len(dataset), os.path.join(root, name))
    return root


def load_split(cfg, name, data_dir=None):
    directory = os.path.join(cfg.cache_dir(data_dir), name)
    if services.cached_manifest(directory) is None:
        raise DataError(f"No cached '{name}' bags in {directory}. Run gen-data first.")
    return services.load_bag_dataset(directory)


def handle_gen_data(cfg, args):
    """Manages the gen-data command."""
    root = generate(cfg, download=getattr(args, 'download', False))
    print(f"Dataset cache ready: {root}")
    return root
