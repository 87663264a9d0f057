#!/usr/bin/env python3
"""
Synthesize the quadrotor gains and certificates and write them to the
package data file loaded by the "quadrotor" model.

    python3 scripts/synthesize_quadrotor.py -v
"""
import argparse
import logging
import sys

from ofmpc.models import QUADROTOR_CERTIFICATES, synthesize_quadrotor


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description=__doc__.strip().splitlines()[0])
    parser.add_argument('--output', '-o', default=QUADROTOR_CERTIFICATES,
                        help='Output JSON file. (default: {})'.format(QUADROTOR_CERTIFICATES))
    parser.add_argument('--verbose', '-v', action='store_true', help='Enable verbose logging.')
    options = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if options.verbose else logging.WARNING, format='{message}', style='{')
    bundle = synthesize_quadrotor()
    bundle.save(options.output)
    print('{!r} -> {}'.format(bundle, options.output))
    return 0


if __name__ == '__main__':
    sys.exit(main())
