# app.py
import argparse
import logging
import os
import sys

import config
from errors import ConfigError, DataError, EvimilError, NumericError
from milmodel import POOLING_KINDS, VARIANTS
from handlers import (
    gen_data_handler,
    train_handler,
    eval_handler,
    sweep_handler,
    report_handler,
)

logger = logging.getLogger('evimil')

# --- HANDLER ROUTING ---
COMMAND_HANDLERS = {
    'gen-data': gen_data_handler.handle_gen_data,
    'train': train_handler.handle_train,
    'eval': eval_handler.handle_eval,
    'sweep': sweep_handler.handle_sweep,
    'report': report_handler.handle_report,
}

EXIT_CODES = {
    ConfigError: 2,
    DataError: 3,
    NumericError: 4,
}

# Dedicated flags and the config keys they set.
FLAG_KEYS = {
    'dataset': 'dataset',
    'seed': 'seed',
    'output_dir': 'output_dir',
    'strategy': 'loss.strategy',
    'pooling': 'model.pooling',
    'variant': 'model.variant',
    'lambda1': 'loss.lambda1',
    'ood_ratios': 'eval.ood_ratios',
}


# --- ARGUMENT PARSING ---
def _common_options():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--config', help='key=value config file')
    common.add_argument('--set', action='append', metavar='KEY=VALUE', help='override one config key (repeatable)')
    common.add_argument('--dataset', help='synth2d, mnist-bags or a dataset cache directory')
    common.add_argument('--seed', type=int)
    common.add_argument('--output-dir', dest='output_dir')
    common.add_argument('--download', action='store_true', help='fetch missing IDX files')
    common.add_argument('-v', '--verbose', action='store_true')
    return common


def _model_options(parser):
    parser.add_argument('--strategy', help='s1 (naive), s2 (weighted loss) or s3 (weighted evidence)')
    parser.add_argument('--pooling', choices=POOLING_KINDS)
    parser.add_argument('--variant', choices=VARIANTS, help='bce (plain baseline), edl (bag only) or mirel')
    parser.add_argument('--lambda1', type=float)


def build_parser():
    common = _common_options()
    parser = argparse.ArgumentParser(prog='evimil', description='Evidential multiple instance learning experiments.')
    commands = parser.add_subparsers(dest='command', required=True)

    commands.add_parser('gen-data', parents=[common], help='generate and cache bag datasets')

    train = commands.add_parser('train', parents=[common], help='train one model')
    _model_options(train)

    evaluate = commands.add_parser('eval', parents=[common], help='evaluate a trained run')
    evaluate.add_argument('--run-dir', dest='run_dir', help='run directory (defaults to the configured one)')
    evaluate.add_argument('--checkpoint', help='checkpoint file (defaults to <run-dir>/checkpoint.evim)')
    evaluate.add_argument('--ood-ratios', dest='ood_ratios', help='comma separated, e.g. 0,0.25,0.5,0.75,1')

    sweep = commands.add_parser('sweep', parents=[common], help='grid x seeds, summarised as mean ± sd')
    _model_options(sweep)
    sweep.add_argument('--grid', action='append', metavar='KEY=V1,V2', help='grid axis (repeatable)')
    sweep.add_argument('--seeds', help='comma separated seeds, e.g. 0,1,2,3,4')
    sweep.add_argument('--lambda1-grid', dest='lambda1_grid', action='store_true',
                       help=f'sweep loss.lambda1 over {config.LAMBDA1_GRID}')
    sweep.add_argument('--workers', type=int, default=1, help='parallel worker processes')

    report = commands.add_parser('report', parents=[common], help='collect report.json files into a CSV')
    report.add_argument('--runs-dir', dest='runs_dir')
    report.add_argument('--out')
    return parser


def _flags(args):
    return {key: getattr(args, name) for name, key in FLAG_KEYS.items() if getattr(args, name, None) is not None}


def _config_file(args):
    """eval falls back on the snapshot stored in the run directory."""
    if args.config:
        return args.config
    run_dir = getattr(args, 'run_dir', None)
    if args.command == 'eval' and run_dir:
        snapshot = os.path.join(run_dir, config.CONFIG_SNAPSHOT)
        if os.path.exists(snapshot):
            return snapshot
    return None


def exit_code(error):
    for kind, code in EXIT_CODES.items():
        if isinstance(error, kind):
            return code
    return 1


# --- MAIN ---
def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format='%(asctime)s %(levelname)s %(name)s: %(message)s')
    try:
        args.flags = _flags(args)
        args.config = _config_file(args)
        cfg = config.resolve_config(args.config, args.set, args.flags)
        COMMAND_HANDLERS[args.command](cfg, args)
    except EvimilError as e:
        logger.error("%s failed: %s", args.command, e)
        return exit_code(e)
    return 0


if __name__ == '__main__':
    sys.exit(main())
