# handlers/train_handler.py
import dataclasses
import logging
import os

import numpy as np

import config
import services
import utils
from errors import DataError
from handlers.gen_data_handler import load_split
from milmodel import init_params
from training import train

logger = logging.getLogger(__name__)


def resolve_model_spec(cfg, in_dim):
    """Fill in_dim from the data, or check that a configured one matches it."""
    if cfg.model.in_dim and cfg.model.in_dim != in_dim:
        raise DataError(f"model.in_dim={cfg.model.in_dim} but the cached bags have {in_dim} features")
    return dataclasses.replace(cfg.model, in_dim=in_dim)


def run_training(cfg, data_dir=None):
    """Trains one run and writes checkpoint, history and config snapshot. Returns the run directory."""
    train_set = load_split(cfg, 'train', data_dir)
    val_set = load_split(cfg, 'val', data_dir)
    cfg.model = resolve_model_spec(cfg, train_set.dim)
    run_dir = utils.ensure_dir(cfg.run_dir())
    config.write_snapshot(cfg, run_dir)

    model = init_params(cfg.model, np.random.default_rng(utils.substream(cfg.seed, 'init')))
    params, history = train(model, train_set, val_set, cfg.train)

    services.save_checkpoint(os.path.join(run_dir, config.CHECKPOINT_FILE), params)
    services.write_jsonl(os.path.join(run_dir, config.HISTORY_FILE), history.records)
    services.write_json(os.path.join(run_dir, 'train_summary.json'), history.summary())
    logger.info("Run %s finished at epoch %s (best %s)", run_dir, history.stop_epoch, history.best_epoch)
    return run_dir, history


def handle_train(cfg, args):
    """Manages the train command."""
    run_dir, history = run_training(cfg)
    best = history.records[history.best_epoch]
    print(f"Trained {cfg.run_name()}: best epoch {history.best_epoch}, "
          f"val loss {best['val_loss']:.4f}, val error {best['val_error']:.3f}")
    print(f"Run directory: {run_dir}")
    return run_dir
