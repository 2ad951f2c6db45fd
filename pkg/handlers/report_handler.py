# handlers/report_handler.py
import glob
import logging
import os

import config
import services
import utils
from errors import DataError

logger = logging.getLogger(__name__)

RUN_FIELDS = ('run', 'dataset', 'seed', 'variant', 'pooling', 'strategy', 'lambda1')
METRIC_FIELDS = ('level', 'estimator', 'accuracy', 'conf_auroc', 'label_auroc', 'conf_measure', 'ood_measure',
                 'n_samples')


def find_reports(runs_dir):
    return sorted(glob.glob(os.path.join(runs_dir, '**', config.REPORT_FILE), recursive=True))


def report_rows(payload):
    """One row per level x estimator, OOD AUROCs spread into ood_auroc_<source> columns."""
    rows = []
    for report in payload.get('reports', []):
        row = {key: payload.get(key) for key in RUN_FIELDS}
        row.update({key: report.get(key) for key in METRIC_FIELDS})
        for source, value in report.get('ood_auroc', {}).items():
            row[f"ood_auroc_{source}"] = value
        rows.append(row)
    return rows


def collect(runs_dir):
    rows = []
    for path in find_reports(runs_dir):
        try:
            rows.extend(report_rows(utils.load_json_file(path)))
        except DataError:
            logger.warning("Skipping unreadable report %s", path)
    return rows


def handle_report(cfg, args):
    """Manages the report command: every report.json under a directory into one CSV table."""
    runs_dir = getattr(args, 'runs_dir', None) or config.RUNS_DIR
    rows = collect(runs_dir)
    if not rows:
        raise DataError(f"No {config.REPORT_FILE} files found under {runs_dir}")
    ood_fields = sorted({k for row in rows for k in row if k.startswith('ood_auroc_')})
    out = getattr(args, 'out', None) or os.path.join(runs_dir, 'report.csv')
    services.write_csv(out, rows, RUN_FIELDS + METRIC_FIELDS + tuple(ood_fields))
    print(f"Collected {len(rows)} rows from {len(find_reports(runs_dir))} runs into {out}")
    return out
