# handlers/eval_handler.py
import logging
import os

import numpy as np

import config
import services
from dirichlet import confidence_score
from errors import DataError
from evaluation import evaluate, histogram_export, instance_estimators, ood_ratio_sweep, shared_range
from handlers.gen_data_handler import load_split, ood_pool, ood_set_name

logger = logging.getLogger(__name__)


def _load_ood_sets(cfg, data_dir):
    sets = {}
    for source in cfg.eval.ood_sources:
        try:
            sets[source] = load_split(cfg, ood_set_name(source), data_dir)
        except DataError:
            logger.error("CRITICAL: OOD source '%s' has no cached bags", source)
            raise
    return sets


def _export_histograms(cfg, run_dir, predictions, ood_predictions):
    """ID and OOD histograms of each measure share one bin range so their rows line up."""
    written = []
    level_alphas = [('bag', lambda p: p.bag_alpha)]
    level_alphas += [(f'instance_{e}', lambda p, e=e: p.instance_alpha(e))
                     for e in instance_estimators(cfg.model) if e != 'attention']
    for measure in cfg.eval.histogram_measures:
        for level, pick in level_alphas:
            id_values = np.atleast_1d(confidence_score(pick(predictions), measure))
            groups = {'id': id_values}
            for source, ood in ood_predictions.items():
                groups[source] = np.atleast_1d(confidence_score(pick(ood), measure))
            value_range = shared_range(*groups.values())
            for name, values in groups.items():
                path = os.path.join(run_dir, 'histograms', f"{level}_{measure}_{name}.csv")
                histogram_export(values, cfg.eval.histogram_bins, path, value_range)
                written.append(path)
    return written


def run_evaluation(cfg, run_dir, checkpoint=None, data_dir=None):
    """Bag and instance reports, histograms and OOD-ratio tables for one trained run."""
    params = services.load_checkpoint(checkpoint or os.path.join(run_dir, config.CHECKPOINT_FILE))
    test_set = load_split(cfg, 'test', data_dir)
    if test_set.dim != params.spec.in_dim:
        raise DataError(f"Test bags have {test_set.dim} features, the checkpoint expects {params.spec.in_dim}")
    cfg.model = params.spec
    ood_sets = _load_ood_sets(cfg, data_dir)

    reports, predictions, ood_predictions = evaluate(params, test_set, ood_sets, cfg.eval)
    histograms = _export_histograms(cfg, run_dir, predictions, ood_predictions)

    sweeps = {}
    if cfg.eval.ood_ratios:
        for source in cfg.eval.ood_sources:
            pool = ood_pool(cfg, source, data_dir)
            sweep = ood_ratio_sweep(params, test_set, pool, cfg.eval.ood_ratios, cfg.eval.ratio_measure,
                                    seed=cfg.seed)
            services.write_csv(os.path.join(run_dir, f"ood_ratio_{source}.csv"), sweep.rows,
                               ('ratio', 'mean_confidence', 'sd_confidence', 'n_bags'))
            sweeps[source] = sweep.to_dict()

    payload = {
        'run': os.path.basename(os.path.normpath(run_dir)),
        'dataset': cfg.dataset,
        'seed': cfg.seed,
        'variant': params.spec.variant,
        'pooling': params.spec.pooling,
        'strategy': cfg.loss.strategy,
        'lambda1': cfg.loss.lambda1,
        'reports': [r.to_dict() for r in reports],
        'ood_ratio_sweeps': sweeps,
        'histograms': [os.path.relpath(p, run_dir) for p in histograms],
    }
    services.write_json(os.path.join(run_dir, config.REPORT_FILE), payload)
    return payload


def _fmt(value):
    return '-' if value is None else f"{value:.4f}"


def handle_eval(cfg, args):
    """Manages the eval command."""
    run_dir = getattr(args, 'run_dir', None) or cfg.run_dir()
    payload = run_evaluation(cfg, run_dir, checkpoint=getattr(args, 'checkpoint', None))
    for report in payload['reports']:
        ood = ', '.join(f"{k} {_fmt(v)}" for k, v in report['ood_auroc'].items())
        print(f"{report['level']:>8} {report['estimator']:<9} acc {_fmt(report['accuracy'])} "
              f"conf {_fmt(report['conf_auroc'])} label {_fmt(report['label_auroc'])} ood [{ood}]")
    for source, sweep in payload['ood_ratio_sweeps'].items():
        means = ' '.join(f"{row['ratio']:g}:{row['mean_confidence']:.4f}" for row in sweep['rows'])
        print(f"OOD ratio sweep ({source}): {means} | spearman {sweep['spearman']:.3f}")
    print(f"Report written to {os.path.join(run_dir, config.REPORT_FILE)}")
    return payload
