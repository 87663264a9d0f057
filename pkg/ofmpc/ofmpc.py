#!/usr/bin/env python3
"""
Command-line interface: closed-loop runs, certificate checks, seed sweeps
and the packaged quadrotor comparison.

    ofmpc run configs/double_integrator.cfg --estimator setmember -v
    ofmpc verify configs/quadrotor.cfg
    ofmpc sweep configs/double_integrator.cfg 0-19 --workers 4 --output sweep.csv
    ofmpc demo-quadrotor --output-dir out/
"""
import argparse
import logging
import os
import sys
import time
from functools import partial
from typing import Dict, List

from . import registry
from .config import AUTO, SimConfig, expand_seed_range
from .context import Trace, merge_rows, write_summaries
from .core import OfmpcError
from .simulation import build_context, compare_traces, compute_metrics, run_closed_loop, run_sweep, \
    verify_certificates
from .version import __version__

LOGGER = logging.getLogger('ofmpc')

DEFAULT_VERIFY_SAMPLES = 10000

# (estimator, controller) pairs of the quadrotor comparison
DEMO_RUNS = [
    ('apriori', 'homothetic'),
    ('setmember', 'homothetic'),
    ('combined', 'homothetic'),
    ('combined', 'mhe-mpc'),
    ('apriori', 'rigid'),
]
DEMO_REFERENCE = 'apriori-homothetic'

# logging templates
LOG_FORMAT_DEFAULT = '{message}'
LOG_FORMAT_DEBUG = '{asctime}.{msecs:03.0f}: {name}: {message}'
LOG_DATE_FORMAT = '%y/%m/%d %H:%M:%S'
LOG_STREAM = sys.stderr


class ExitCode:
    """ Exit codes namespace """
    success = 0
    fail = 1
    unable_to_run = 2


class UnableToRun(Exception):
    """ If raised, will return ExitCode.unable_to_run"""

    def __init__(self, message: str, log_traceback: bool = False) -> None:
        self.log_traceback = log_traceback
        super().__init__(message)


# the entry point for command-line use
def run_from_command_line(argv: List[str] = None) -> int:
    """ Run the program from the command line, returning an exit code."""
    try:
        return _run_from_command_line(argv)
    except UnableToRun as e:
        LOGGER.critical('ERROR: {}'.format(e), exc_info=e.log_traceback)
        return ExitCode.unable_to_run
    except (KeyboardInterrupt, SystemExit):
        return ExitCode.unable_to_run


def _run_from_command_line(argv: List[str] = None) -> int:
    """
    Load plugins, process command-line arguments, and return an exit code.

    :raises: UnableToRun on input or system error.
    """
    # plugins are loaded first for the --estimator / --controller help
    registry.load_plugins()
    parser = get_argument_parser()
    options = parser.parse_args(argv)
    configure_logging(options)
    runner = Runner(options, callbacks=Output())
    return ExitCode.fail if runner.run() else ExitCode.success


class Runner(object):
    """ Runs one subcommand based on the parsed options. """

    def __init__(self, options, callbacks: 'Output' = None):
        """
        :param options: Object with options set as attributes
                        (such as from argparse or a namedtuple).
        :param callbacks: methods to call on events, such as run start/ end
        """
        self.callbacks = callbacks or Output()
        self.options = options
        self.command = options.command
        self.failed_count = 0
        """ runs or checks whose soundness flags failed """

    def run(self) -> int:
        """
        :returns: the number of failed runs or checks
        :raises: UnableToRun on error
        """
        handler = getattr(self, 'run_' + self.command.replace('-', '_'))
        try:
            handler()
        except UnableToRun:
            raise
        except OfmpcError as e:
            raise UnableToRun('{}: {}'.format(type(e).__name__, e))
        except OSError as e:
            raise UnableToRun('I/O error: {}'.format(e))
        return self.failed_count

    def load_config(self, **overrides) -> SimConfig:
        """ Configuration file plus the command-line overrides. """
        options = self.options
        explicit = overrides
        overrides = dict(
            seed=getattr(options, 'seed', None),
            steps=getattr(options, 'steps', None),
            estimator=getattr(options, 'estimator', None),
            controller=getattr(options, 'controller', None),
            solver_trace=getattr(options, 'solver_trace', None),
            workers=getattr(options, 'workers', None),
        )
        if getattr(options, 'full_scale', False):
            overrides.update(full_scale=True, N=40, steps=overrides['steps'] or 300)
        if getattr(options, 'strict', False):
            overrides['strict'] = True
        overrides.update(explicit)
        path = getattr(options, 'config', None)
        if path:
            return SimConfig.from_file(path, **overrides)
        return SimConfig(**overrides)

    def run_run(self):
        cfg = self.load_config()
        context = build_context(cfg)
        self.callbacks.run_start(cfg)
        start_time = time.monotonic()
        trace = run_closed_loop(context)
        summary = compute_metrics(trace)
        self.callbacks.run_end(summary, duration=time.monotonic() - start_time)
        self._write_outputs(trace, [summary], cfg.trace_path, cfg.summary_path)
        self._count(summary)

    def run_verify(self):
        cfg = self.load_config()
        context = build_context(cfg)
        reports = verify_certificates(context, samples=self.options.samples, seed=cfg.seed,
                                      max_workers=cfg.workers)
        self.callbacks.verify_end(reports)
        self.failed_count += sum(1 for report in reports if not report.passed)

    def run_sweep(self):
        try:
            seeds = list(expand_seed_range(self.options.seeds))
        except ValueError as e:
            raise UnableToRun('Invalid seed range {!r}: {}'.format(self.options.seeds, e))
        cfg = self.load_config()
        context = build_context(cfg)
        self.callbacks.sweep_start(cfg, seeds)
        start_time = time.monotonic()
        summaries = merge_rows(run_sweep(context, seeds, trace_pattern=self.options.trace_pattern))
        self.callbacks.sweep_end(summaries, duration=time.monotonic() - start_time)
        self._write_outputs(None, summaries, None, self.options.output or cfg.summary_path)
        for summary in summaries:
            self._count(summary)

    def run_demo_quadrotor(self):
        output_dir = self.options.output_dir
        if output_dir:
            os.makedirs(output_dir, exist_ok=True)
        traces = {}  # type: Dict[str, Trace]
        summaries = []
        # without a config file the bound is derived, as in configs/quadrotor.cfg
        defaults = {} if getattr(self.options, 'config', None) else dict(w_bar=AUTO)
        for estimator, controller in DEMO_RUNS:
            label = '{}-{}'.format(estimator, controller)
            cfg = self.load_config(model='quadrotor', estimator=estimator, controller=controller, **defaults)
            self.callbacks.run_start(cfg)
            start_time = time.monotonic()
            trace = run_closed_loop(build_context(cfg))
            summary = dict(compute_metrics(trace), label=label)
            self.callbacks.run_end(summary, duration=time.monotonic() - start_time)
            traces[label] = trace
            summaries.append(summary)
            self._count(summary)
            if output_dir:
                trace.to_csv(os.path.join(output_dir, label + '.csv'), timing=False)
        self.callbacks.comparison(compare_traces(traces, DEMO_REFERENCE))
        if output_dir:
            write_summaries(summaries, os.path.join(output_dir, 'summary.csv'))

    @staticmethod
    def _write_outputs(trace, summaries, trace_path, summary_path):
        if trace is not None and trace_path:
            trace.to_csv(trace_path, timing=False)
            LOGGER.info('Wrote trace to {}'.format(trace_path))
        if summary_path:
            write_summaries(summaries, summary_path)
            LOGGER.info('Wrote summary to {}'.format(summary_path))

    def _count(self, summary: dict):
        if not summary['sound']:
            self.failed_count += 1


def _non_negative_argument(value: int, cls: type):
    """ argparse type= argument for numeric types that cannot be negative."""
    try:
        value = cls(value or 0)  # None same as zero
    except (TypeError, ValueError):
        raise argparse.ArgumentTypeError('Expected an {}, got {}'.format(cls.__name__, value))
    if value < 0:
        raise argparse.ArgumentTypeError('Expected positive {}, got {}'.format(cls.__name__, value))
    return value


integer_argument = partial(_non_negative_argument, cls=int)


def _add_run_options(parser: argparse.ArgumentParser, config_required: bool = True):
    """ Options shared by the subcommands that run closed loops. """
    if config_required:
        parser.add_argument('config', metavar='CONFIG', type=str,
                            help='Configuration file with "key = value" lines, such as configs/quadrotor.cfg.')
    parser.add_argument('--seed', '-s', dest='seed', type=integer_argument,
                        help='Disturbance seed. Overrides run.seed.')
    parser.add_argument('--steps', '-T', dest='steps', type=integer_argument,
                        help='Run length. Overrides run.steps.')
    parser.add_argument('--estimator', '-e', dest='estimator', type=str,
                        help='Estimator plugin. {}'.format(registry.get_recommendation(registry.ESTIMATORS)))
    parser.add_argument('--controller', '-c', dest='controller', type=str,
                        help='Controller plugin. {}'.format(registry.get_recommendation(registry.CONTROLLERS)))
    parser.add_argument('--full-scale', dest='full_scale', action='store_true',
                        help='Prediction horizon 40 and 300 steps instead of 20 and 150.')
    parser.add_argument('--strict', dest='strict', action='store_true',
                        help='Verify the certificates by sampling before running.')
    parser.add_argument('--solver-trace', dest='solver_trace', type=str, metavar='PATH',
                        help='Write the iterations of the latest NLP solve to this CSV file.')
    parser.add_argument('--workers', '-j', dest='workers', type=integer_argument,
                        help='Worker threads for sampling and sweeps. (0: one per item)')


def _add_output_options(parser: argparse.ArgumentParser):
    group = parser.add_argument_group('output')
    group.add_argument('--quiet', '-q', dest='quiet', action='store_true',
                       help='Suppress logging. Overrides --debug and --verbose.')
    group.add_argument('--debug', '-d', dest='debug', action='store_true',
                       help='Enable debug logging to stderr. Overrides --verbose.')
    group.add_argument('--verbose', '-v', dest='verbose', action='store_true',
                       help='Enable verbose logging to stderr. ')


def get_argument_parser() -> argparse.ArgumentParser:
    """
    Parse command-line options.

    The plugins should be loaded already (for the help text of --estimator and --controller).
    """
    description = 'Robust output-feedback MPC with online-validated estimation error bounds.'
    epilog = 'Return status: 0 if every run kept its error bounds and constraints (or every certificate check ' \
             'passed), 1 if any failed, or 2 if an error prevented a run from starting or finishing.'
    parser = argparse.ArgumentParser('ofmpc', description=description, epilog=epilog)
    parser.add_argument('--version', action='version', version='%(prog)s {}'.format(__version__))
    commands = parser.add_subparsers(dest='command', metavar='COMMAND')
    commands.required = True

    run = commands.add_parser('run', help='Simulate one closed loop.', description='Simulate one closed loop.')
    _add_run_options(run)
    _add_output_options(run)

    verify = commands.add_parser('verify', help='Falsify the certificates by sampling.',
                                 description='Falsify the certificates by sampling.')
    _add_run_options(verify)
    verify.add_argument('--samples', '-n', dest='samples', type=integer_argument, default=DEFAULT_VERIFY_SAMPLES,
                        help='Samples per certificate. (default: {})'.format(DEFAULT_VERIFY_SAMPLES))
    _add_output_options(verify)

    sweep = commands.add_parser('sweep', help='One closed loop per seed.', description='One closed loop per seed.')
    _add_run_options(sweep)
    sweep.add_argument('seeds', metavar='FIRST[-LAST]', type=str,
                       help='Seeds, such as "7", "0-19" or "1,4-6".')
    sweep.add_argument('--output', '-o', dest='output', type=str,
                       help='Write one summary row per seed to this CSV file.')
    sweep.add_argument('--trace-pattern', dest='trace_pattern', type=str,
                       help='Write each trace to this path; "{seed}" is replaced by the seed.')
    _add_output_options(sweep)

    demo = commands.add_parser('demo-quadrotor', help='Compare estimators and tubes on the quadrotor.',
                               description='Compare estimators and tubes on the quadrotor.')
    _add_run_options(demo, config_required=False)
    demo.add_argument('--output-dir', '-o', dest='output_dir', type=str,
                      help='Write the traces and a summary into this directory.')
    _add_output_options(demo)
    return parser


class ANSIIColors:
    """
    ANSII terminal colors

    Source: https://misc.flogisoft.com/bash/tip_colors_and_formatting
    """
    GREY_DARK = '\033[90m'
    RED_LIGHT = '\033[91m'
    YELLOW_LIGHT = '\033[93m'
    DEFAULT = '\033[39m'
    END = '\033[0m'


class ColorLogFormatter(logging.Formatter):
    """ Simple colorization of log output. """

    def formatMessage(self, record: logging.LogRecord) -> str:
        """ Format and colorize the log record. """
        formatted = self._style.format(record)
        if LOG_STREAM.isatty():
            formatted = self._colorize(formatted, level=record.levelno)
        return formatted

    def _colorize(self, message, level: int):
        if level < logging.INFO:
            color = ANSIIColors.GREY_DARK
        elif level < logging.WARNING:
            color = ANSIIColors.DEFAULT
        elif level < logging.ERROR:
            color = ANSIIColors.YELLOW_LIGHT
        else:
            color = ANSIIColors.RED_LIGHT
        return color + message + ANSIIColors.END


def configure_logging(options):
    """ configure logging to stream output """
    handler = logging.StreamHandler(LOG_STREAM)
    log_format = LOG_FORMAT_DEFAULT
    log_level = logging.WARNING
    if options.quiet:
        handler = logging.NullHandler()
    elif options.debug:
        log_level = logging.DEBUG
        log_format = LOG_FORMAT_DEBUG
    elif options.verbose:
        log_level = logging.INFO

    root = logging.getLogger()
    root.setLevel(log_level)
    handler.formatter = ColorLogFormatter(fmt=log_format, datefmt=LOG_DATE_FORMAT, style='{')
    root.handlers += [handler]


class Output:
    """ A namespace to keep all of the output logic in one place and easy to extend."""

    @staticmethod
    def run_start(cfg: SimConfig):
        LOGGER.info('Running {!r}'.format(cfg))

    @staticmethod
    def run_end(summary: dict, duration: float):
        """ One closed loop finished. """
        message = ('{label}: mean e_bar {mean_e_bar:.4g}, mean true error {mean_true_error:.4g}, '
                   'min margin {min_margin:.4g}, mean stage cost {mean_stage_cost:.4g} (bound {stage_bound:.4g})'
                   .format(**summary))
        LOGGER.info('{} in {:.2f}s'.format(message, duration))
        if not summary['bound_valid']:
            LOGGER.warning('{label}: {bound_violations} steps exceeded the certified error bound '
                           '(first at t={first_violation})'.format(**summary))
        if not summary['constraints_ok']:
            LOGGER.warning('{label}: constraints violated (min margin {min_margin:.4g})'.format(**summary))
        if summary['infeasible_steps']:
            LOGGER.warning('{label}: {infeasible_steps} infeasible MPC solves'.format(**summary))
        if summary['candidate_steps']:
            LOGGER.info('{label}: shifted candidate used at {candidate_steps} steps'.format(**summary))

    @staticmethod
    def verify_end(reports):
        for report in reports:
            if report.passed:
                LOGGER.info('PASSED: {!r}'.format(report))
            else:
                LOGGER.warning('FAILED: {!r} witness={}'.format(report, report.witness))

    @staticmethod
    def sweep_start(cfg: SimConfig, seeds: List[int]):
        LOGGER.info('Sweeping {} seeds of {!r}'.format(len(seeds), cfg))

    @staticmethod
    def sweep_end(summaries: List[dict], duration: float):
        failed = [s['seed'] for s in summaries if not s['sound']]
        if failed:
            LOGGER.info('{}/{} FAILED in {:.2f}s'.format(len(failed), len(summaries), duration))
            LOGGER.warning('FAILED seeds: {}'.format(' '.join(str(seed) for seed in failed)))
        else:
            LOGGER.info('SOUND: all {} seeds in {:.2f}s'.format(len(summaries), duration))

    @staticmethod
    def comparison(ratios: Dict[str, Dict[str, float]]):
        for label, values in sorted(ratios.items()):
            LOGGER.info('{}: e_bar x{e_bar_ratio:.3f}, true error x{true_error_ratio:.3f}, '
                        'estimator time x{estimator_time_ratio:.3f}'.format(label, **values))
