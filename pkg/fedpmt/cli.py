#!/usr/bin/env python
"""FedPMT simulator command line.

Subcommands:

`run` - simulate a federated training experiment described by a YAML config
        and save the per-round metrics (CSV) and a summary (JSON).

`cost` - print the per-width FP/BP complexity table of an architecture.

`convex-lab` - check the O(1/T) loss gap rate of block-masked federated
               descent on a strongly convex quadratic task.
"""
from __future__ import print_function

import argparse
import json
import logging
import os
import sys

import numpy as np
import pandas as pd

from fedpmt import __version__
from fedpmt.config import load_config, parse_override
from fedpmt.convex_lab import (build_quadratic_task, check_bound, compute_lambda,
                               run_convex_sweep)
from fedpmt.cost_model import CONV_SCALINGS, REFERENCE_BATCH, complexity_report
from fedpmt.exceptions import FedPMTError
from fedpmt.extra import timed
from fedpmt.masking import build_width_menu
from fedpmt.simulation import (records_to_frame, run_experiment, summarize,
                               write_metrics, write_summary)

BANNER = '-------------------------------------------------------------------'


def parse_arguments(argv=None):
    """Parse input arguments."""
    parser = argparse.ArgumentParser(description='FedPMT federated partial '
                                                 'model training simulator.')
    parser.add_argument('--version', action='version', version=__version__)
    parser.add_argument('-v', '--verbose', action='store_true',
                        help='Log every round (default=False).')
    sub = parser.add_subparsers(dest='command')
    sub.required = True

    run = sub.add_parser('run', help='Run an experiment.')
    run.add_argument('-c', '--config', type=str, default=None,
                     help='YAML experiment config (default=built-in defaults).')
    run.add_argument('-s', '--seed', type=int, default=None,
                     help='Override the config seed.')
    run.add_argument('-o', '--out-dir', type=str, default=None,
                     help='Output folder (default=./results).')
    run.add_argument('--set', action='append', default=[], metavar='KEY=VALUE',
                     help='Override one config key, e.g. training.rounds=10.')
    run.add_argument('-p', '--plot', action='store_true',
                     help='Save learning curves as PNG (default=False).')

    cost = sub.add_parser('cost', help='Per-width complexity table.')
    cost.add_argument('-a', '--arch', type=str, default='fcnn_mnist',
                      choices=sorted(REFERENCE_BATCH),
                      help='Architecture (default=fcnn_mnist).')
    cost.add_argument('-b', '--batch', type=int, default=None,
                      help='Batch size (default=the reference batch).')
    cost.add_argument('-w', '--widths', type=int, default=None,
                      help='Menu size (default=one width per trainable layer).')
    cost.add_argument('--conv-scaling', type=str, default='per_sample',
                      choices=CONV_SCALINGS, help='Convolution FLOP convention.')
    cost.add_argument('--no-activation', action='store_true',
                      help='Leave dense activation FLOPs out of FP.')
    cost.add_argument('--no-feddrop', action='store_true',
                      help='Skip the FedDrop keep-rate matching.')
    cost.add_argument('-o', '--out-dir', type=str, default=None,
                      help='Also save the table as CSV in this folder.')

    lab = sub.add_parser('convex-lab', help='Convex rate check.')
    lab.add_argument('--dim', type=int, default=30, help='Parameter size (default=30).')
    lab.add_argument('--blocks', type=int, default=3, help='Layer blocks (default=3).')
    lab.add_argument('--devices', type=int, default=5, help='|K| (default=5).')
    lab.add_argument('--per-round', type=int, default=3, help='|S| (default=3).')
    lab.add_argument('--widths', type=int, default=3, help='|I| (default=3).')
    lab.add_argument('--assignment', type=str, default=None,
                     help='Comma separated widths of the |S| sampled devices '
                          '(default=cycle over the menu).')
    lab.add_argument('--epsilon', type=float, default=0.5, help='(default=0.5).')
    lab.add_argument('--lambda', dest='lam', type=float, default=None,
                     help='Step offset (default=max(4L/(mu eps), tau)).')
    lab.add_argument('--tau', type=int, default=1, help='Local steps (default=1).')
    lab.add_argument('--rounds', type=int, default=10000, help='T (default=10000).')
    lab.add_argument('--seeds', type=int, default=10, help='Number of seeds (default=10).')
    lab.add_argument('--heterogeneity', type=float, default=1.,
                     help='Spread of the device optima (default=1).')
    lab.add_argument('--noise', type=float, default=0.,
                     help='Gradient noise std (default=0).')
    lab.add_argument('-s', '--seed', type=int, default=0,
                     help='Task seed; runs use seed..seed+seeds-1 (default=0).')
    lab.add_argument('-o', '--out-dir', type=str, default=None,
                     help='Output folder (default=./results).')
    lab.add_argument('-j', '--n-jobs', type=int, default=1, help='(default=1).')
    lab.add_argument('-p', '--plot', action='store_true',
                     help='Save the gap curve with its bound as PNG (default=False).')
    return parser.parse_args(argv)


def init_main(argv=None):
    """Initialize the main routine."""
    args = parse_arguments(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format='%(asctime)s %(name)s %(levelname)s: %(message)s')
    if args.command != 'cost' and args.out_dir is None:
        args.out_dir = os.path.join('.', 'results')
    if args.out_dir is not None and not os.path.exists(args.out_dir):
        os.makedirs(args.out_dir)
    return args


@timed
def run(args):
    overrides = {}
    for text in args.set:
        section = parse_override(text)
        for key, value in section.items():
            if isinstance(value, dict) and isinstance(overrides.get(key), dict):
                overrides[key].update(value)
            else:
                overrides[key] = value
    if args.seed is not None:
        overrides['seed'] = args.seed
    config = load_config(args.config, overrides)

    print('* Config: {}'.format(args.config or 'defaults'))
    print('* Strategy: {} on {}'.format(config.strategy['name'], config.model['name']))
    print('* Seed: {}'.format(config.seed))
    print('* Output folder: {}'.format(args.out_dir))
    print(BANNER)

    print('* Running {} rounds...'.format(config.training['rounds']))
    records, _ = run_experiment(config, progress=True)
    print(u'\u2713')

    metrics = os.path.join(args.out_dir, 'metrics.csv')
    print('* Saving {}...'.format(metrics), end=' ')
    write_metrics(records, metrics)
    print(u'\u2713')

    summary = os.path.join(args.out_dir, 'summary.json')
    print('* Saving {}...'.format(summary), end=' ')
    write_summary(records, config, summary)
    print(u'\u2713')

    digest = summarize(records, config)
    print('* Final accuracy: {}'.format(digest['final_accuracy']))
    print('* Simulated time: {:.1f} s'.format(digest['total_seconds']))
    for target, seconds in sorted(digest['time_to_accuracy'].items()):
        print('* Time to {}: {}'.format(target, 'never' if seconds is None
                                        else '{:.1f} s'.format(seconds)))

    if args.plot:
        from fedpmt.plotting import plot_learning_curves
        frame = records_to_frame(records)
        for x in ('round', 'cumulative_seconds'):
            filename = os.path.join(args.out_dir, 'curves_{}.png'.format(x))
            print('* Saving {}...'.format(filename), end=' ')
            plt = plot_learning_curves({config.strategy['name']: frame}, x=x)
            plt.savefig(filename)
            plt.close()
            print(u'\u2713')


@timed
def cost(args):
    print('* Architecture: {}'.format(args.arch))
    print(BANNER)
    report = complexity_report(args.arch, batch=args.batch, num_widths=args.widths,
                               match_feddrop=not args.no_feddrop,
                               conv_scaling=args.conv_scaling,
                               dense_activation=not args.no_activation)
    with pd.option_context('display.width', 120):
        print(report.to_string(index=False))
    if args.out_dir is not None:
        filename = os.path.join(args.out_dir, 'cost_{}.csv'.format(args.arch))
        print('* Saving {}...'.format(filename), end=' ')
        report.to_csv(filename, index=False)
        print(u'\u2713')


def _assignment(text, num_widths, per_round):
    if text is None:
        return [1 + (i % num_widths) for i in range(per_round)][::-1]
    return [int(w) for w in text.split(',')]


@timed
def convex_lab(args):
    assignment = _assignment(args.assignment, args.widths, args.per_round)
    print('* Task: dim {}, {} blocks, {} devices, {} per round'.format(
        args.dim, args.blocks, args.devices, len(assignment)))
    print('* Widths per round: {}'.format(assignment))
    print(BANNER)

    print('* Building the quadratic task...', end=' ')
    task = build_quadratic_task(args.devices, args.dim, args.blocks,
                                args.heterogeneity, args.seed)
    menu = build_width_menu(args.blocks, args.widths)
    print(u'\u2713')

    print('* Running {} seeds x {} rounds...'.format(args.seeds, args.rounds))
    seeds = range(args.seed, args.seed + args.seeds)
    _, fit = run_convex_sweep(task, menu, assignment, seeds, n_jobs=args.n_jobs,
                              epsilon=args.epsilon, lam=args.lam, tau=args.tau,
                              rounds=args.rounds, noise_std=args.noise)
    print(u'\u2713')
    bound, violations = check_bound(task, fit, menu, assignment, args.tau, args.noise)

    gaps = os.path.join(args.out_dir, 'convex_gaps.csv')
    print('* Saving {}...'.format(gaps), end=' ')
    pd.DataFrame({'round': fit.rounds, 'gap': fit.gaps, 'bound': bound},
                 columns=['round', 'gap', 'bound']).to_csv(
                     gaps, index=False, float_format='%.6e')
    print(u'\u2713')

    summary = {'slope': fit.slope, 'intercept': fit.intercept,
               'window': list(fit.window), 'lambda': fit.lam,
               'epsilon': fit.epsilon, 'terminal_gap': fit.terminal_gap,
               'bound_violations': violations, 'Lambda': compute_lambda(task),
               'assignment': assignment, 'seeds': list(seeds)}
    filename = os.path.join(args.out_dir, 'convex_fit.json')
    print('* Saving {}...'.format(filename), end=' ')
    with open(filename, 'w') as f:
        json.dump(summary, f, indent=2, sort_keys=True)
    print(u'\u2713')
    print('* Log-log slope: {:.3f} (terminal gap {:.3e})'.format(
        fit.slope, fit.terminal_gap))
    if not np.isfinite(fit.slope):
        print('* Too few rounds inside the fit window {}'.format(fit.window))

    if args.plot:
        from fedpmt.plotting import plot_gap
        filename = os.path.join(args.out_dir, 'convex_gap.png')
        print('* Saving {}...'.format(filename), end=' ')
        plt = plot_gap({'widths {}'.format(args.widths): fit}, bound=bound)
        plt.savefig(filename)
        plt.close()
        print(u'\u2713')


COMMANDS = {'run': run, 'cost': cost, 'convex-lab': convex_lab}


def main(argv=None):
    """Main fedpmt routine."""
    print(BANNER)
    print('>> fedpmt {}'.format(__version__))
    print(BANNER)
    args = init_main(argv)
    try:
        COMMANDS[args.command](args)
    except FedPMTError as e:
        print('error: {}'.format(e), file=sys.stderr)
        return 2
    print(BANNER)
    return 0


if __name__ == '__main__':
    sys.exit(main())
