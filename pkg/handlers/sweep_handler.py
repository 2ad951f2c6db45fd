# handlers/sweep_handler.py
import itertools
import logging
import os
from concurrent.futures import ProcessPoolExecutor

import config
import services
import utils
from errors import ConfigError
from handlers.eval_handler import run_evaluation
from handlers.gen_data_handler import generate
from handlers.train_handler import run_training

logger = logging.getLogger(__name__)

SUMMARY_FILE = 'summary.csv'
RUNS_FILE = 'runs.csv'


def parse_grid(specs, lambda1_grid=False):
    """['loss.strategy=s1,s2,s3', ...] -> {key: [values]}. Use '|' between values of tuple-valued keys."""
    grid = {}
    for spec in specs or []:
        key, sep, values = spec.partition('=')
        separator = '|' if '|' in values else ','
        items = [v.strip() for v in values.split(separator) if v.strip()]
        if not sep or not items:
            raise ConfigError(f"Bad --grid entry '{spec}'. Expected key=v1,v2,...")
        grid[key.strip()] = items
    if lambda1_grid:
        grid['loss.lambda1'] = [repr(v) for v in config.LAMBDA1_GRID]
    unknown = sorted(set(grid) - set(config.settable_keys()))
    if unknown:
        raise ConfigError(f"Unknown grid key(s): {', '.join(unknown)}")
    if 'seed' in grid:
        raise ConfigError("Use --seeds instead of a seed grid")
    return grid


def grid_cells(grid):
    keys = list(grid)
    return [dict(zip(keys, values)) for values in itertools.product(*(grid[k] for k in keys))] or [{}]


def cell_name(cell):
    if not cell:
        return 'base'
    return '__'.join(f"{k.split('.')[-1]}-{v}" for k, v in cell.items()).replace('|', '_').replace(',', '_')


def _cell_config(task):
    cell, seed, base = task
    overrides = list(base['overrides']) + [f"{k}={v}" for k, v in cell.items()]
    cfg = config.resolve_config(base['config_file'], overrides, dict(base['flags'], seed=seed))
    cfg.output_dir = os.path.join(base['sweep_dir'], cell_name(cell), f"seed{seed}")
    return cfg


def flatten_metrics(payload, history):
    row = {}
    for report in payload['reports']:
        prefix = f"{report['level']}_{report['estimator']}"
        for metric in ('accuracy', 'conf_auroc', 'label_auroc'):
            if report[metric] is not None:
                row[f"{prefix}_{metric}"] = report[metric]
        for source, value in report['ood_auroc'].items():
            row[f"{prefix}_ood_{source}"] = value
    best = history.records[history.best_epoch]
    row['val_criterion'] = best['criterion']
    row['val_accuracy'] = 1.0 - best['val_error']
    row['best_epoch'] = history.best_epoch
    return row


def run_cell(task):
    """One (grid cell, seed): train then evaluate. Runs in a worker process when --workers > 1."""
    cfg = _cell_config(task)
    run_dir, history = run_training(cfg)
    payload = run_evaluation(cfg, run_dir)
    return flatten_metrics(payload, history)


def summarise(grid, results):
    """One row per cell: counts plus mean and sd of every metric over the seeds that finished."""
    rows, metrics = [], sorted({m for r in results if r['status'] == 'ok' for m in r['metrics']})
    for cell in grid_cells(grid):
        runs = [r for r in results if r['cell'] == cell]
        done = [r for r in runs if r['status'] == 'ok']
        row = dict(cell, n_runs=len(runs), n_failed=len(runs) - len(done))
        for metric in metrics:
            mean, sd = utils.mean_sd([r['metrics'].get(metric) for r in done])
            row[f"{metric}_mean"], row[f"{metric}_sd"] = mean, sd
        rows.append(row)
    return rows, metrics


def run_sweep(base, grid, seeds, workers=1):
    tasks = [(cell, seed, base) for cell in grid_cells(grid) for seed in seeds]
    results = []

    # caches are written up front so worker processes never race on them
    runnable = []
    for task in tasks:
        try:
            generate(_cell_config(task), download=base['download'])
            runnable.append(task)
        except Exception as e:
            logger.error("Cell %s seed %s failed during data generation: %s", cell_name(task[0]), task[1], e)
            results.append({'cell': task[0], 'seed': task[1], 'status': 'failed', 'error': str(e), 'metrics': {}})

    def record(task, outcome=None, error=None):
        cell, seed, _ = task
        status = 'ok' if error is None else 'failed'
        if error is not None:
            logger.error("Cell %s seed %s failed: %s", cell_name(cell), seed, error)
        else:
            logger.info("Cell %s seed %s done", cell_name(cell), seed)
        results.append({'cell': cell, 'seed': seed, 'status': status,
                        'error': None if error is None else str(error), 'metrics': outcome or {}})

    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = [(task, pool.submit(run_cell, task)) for task in runnable]
            for task, future in futures:
                error = future.exception()
                record(task, None if error else future.result(), error)
    else:
        for task in runnable:
            try:
                record(task, run_cell(task))
            except Exception as e:
                record(task, error=e)
    return results


def handle_sweep(cfg, args):
    """Manages the sweep command: every grid cell x seed, then a mean ± sd summary per cell."""
    grid = parse_grid(getattr(args, 'grid', None), getattr(args, 'lambda1_grid', False))
    seeds = [int(s) for s in str(args.seeds).split(',') if s.strip()] if getattr(args, 'seeds', None) else [cfg.seed]
    sweep_dir = utils.ensure_dir(cfg.output_dir or os.path.join(config.RUNS_DIR, f"sweep-{cfg.dataset}"))
    base = {
        'config_file': getattr(args, 'config', None),
        'overrides': list(getattr(args, 'set', None) or []),
        'flags': {k: v for k, v in getattr(args, 'flags', {}).items() if k not in ('seed', 'output_dir')},
        'sweep_dir': sweep_dir,
        'download': getattr(args, 'download', False),
    }
    results = run_sweep(base, grid, seeds, workers=getattr(args, 'workers', 1) or 1)

    rows, metrics = summarise(grid, results)
    fieldnames = list(grid) + ['n_runs', 'n_failed'] + [f"{m}_{s}" for m in metrics for s in ('mean', 'sd')]
    services.write_csv(os.path.join(sweep_dir, SUMMARY_FILE), rows, fieldnames)
    run_rows = [dict(r['cell'], seed=r['seed'], status=r['status'], error=r['error'], **r['metrics'])
                for r in results]
    services.write_csv(os.path.join(sweep_dir, RUNS_FILE), run_rows,
                       list(grid) + ['seed', 'status', 'error'] + metrics)

    failed = sum(r['status'] != 'ok' for r in results)
    print(f"Sweep finished: {len(results)} runs, {failed} failed, {len(rows)} summary rows")
    for row in rows:
        label = ', '.join(f"{k}={row[k]}" for k in grid) or 'base'
        mean, sd = row.get('bag_S_accuracy_mean'), row.get('bag_S_accuracy_sd')
        accuracy = 'n/a' if mean is None else f"{mean * 100:.2f} ± {sd * 100:.2f}"
        print(f"  {label}: bag accuracy {accuracy} ({row['n_runs'] - row['n_failed']}/{row['n_runs']} runs)")
    print(f"Summary written to {os.path.join(sweep_dir, SUMMARY_FILE)}")
    return rows
