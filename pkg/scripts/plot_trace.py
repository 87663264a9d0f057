#!/usr/bin/env python3
"""
Plot trace CSV files written by "ofmpc run" or "ofmpc demo-quadrotor".

    python3 scripts/plot_trace.py out/*.csv --output comparison.pdf

Top: certified error bound and true error (log scale).
Bottom: first state component.
"""
import argparse
import math
import os
import sys

import matplotlib
import matplotlib.pyplot as plt

from ofmpc.context import read_csv

matplotlib.rcParams.update({
    'font.size': 9,
    'axes.labelsize': 9,
    'legend.fontsize': 8,
    'xtick.labelsize': 8,
    'ytick.labelsize': 8,
})


def figure_size(width_pt: float = 412.0, scale: float = 1.0):
    """ golden-ratio figure size in inches """
    width = width_pt / 72.27 * scale
    return [width, width * (math.sqrt(5.0) - 1.0) / 2.0 * 1.6]


def plot(paths, output=None, limit=None):
    fig, (ax_error, ax_state) = plt.subplots(2, 1, sharex=True, figsize=figure_size())
    for path in paths:
        data = read_csv(path)
        label = os.path.splitext(os.path.basename(path))[0]
        line, = ax_error.semilogy(data['t'], data['e_bar'], label=label)
        ax_error.semilogy(data['t'], data['true_error'], linestyle=':', color=line.get_color())
        ax_state.plot(data['t'], data['x1'], color=line.get_color(), label=label)
    ax_error.set_ylabel('error bound (solid), true (dotted)')
    ax_state.set_ylabel('x1')
    ax_state.set_xlabel('t')
    if limit is not None:
        ax_state.axhline(limit, color='k', linewidth=0.8, linestyle='--')
    for ax in (ax_error, ax_state):
        ax.spines['right'].set_visible(False)
        ax.spines['top'].set_visible(False)
    ax_error.legend(loc='best')
    fig.tight_layout()
    if output:
        fig.savefig(output)
    else:
        plt.show()


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description='Plot ofmpc trace files.')
    parser.add_argument('traces', nargs='+', help='Trace CSV files.')
    parser.add_argument('--output', '-o', help='Save the figure here instead of showing it.')
    parser.add_argument('--limit', type=float, help='Draw a constraint line on the x1 axis, e.g. 4.')
    options = parser.parse_args(argv)
    plot(options.traces, options.output, options.limit)
    return 0


if __name__ == '__main__':
    sys.exit(main())
