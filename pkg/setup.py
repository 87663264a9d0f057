#!/usr/bin/env python3
"""
The packaging script.

Example:

    python3 setup.py sdist bdist_wheel
"""
import os
import sys
import warnings
from pathlib import Path

from setuptools import setup

import ofmpc

if sys.version_info < (3, 6):
    warnings.warn('Python 3.6 or above is recommended!')

base_path = str(Path(__file__).parent.absolute())

# use README as the long description (not the right markup, but good enough)
with open(os.path.join(base_path, 'README.md'), "r") as fh:
    long_description = fh.read()

# minor versions should be backwards-compatible, but major version may not be
install_requires = [
    'numpy>=1.16,<2.0',
    'scipy>=1.2,<2.0',
    'quadprog>=0.1.7,<1.0',
    'cvxpy>=1.1,<2.0',
]

# optional extras, e.g. pip install ofmpc[plot]
extras_require = {
    'plot': ['matplotlib>=3.0,<4.0'],
}

# install all extras: pip install ofmpc[all]
all_extra_requires = [name for requires in extras_require.values()
                      for name in requires]
extras_require['all'] = sorted(set(all_extra_requires))

setup(
    name='ofmpc',
    version=ofmpc.__version__,
    description='Robust output-feedback model predictive control with '
                'online-validated estimation error bounds.',
    long_description=long_description,
    classifiers=[
        "Environment :: Console",
        "Programming Language :: Python :: 3.6",
        "Programming Language :: Python :: 3.7",
        "Programming Language :: Python :: 3.8",
        "Topic :: Scientific/Engineering :: Mathematics",
    ],
    keywords='model predictive control moving horizon estimation tube observer',
    license='MIT',
    packages=[
        'ofmpc',
        'ofmpc.plugins',
    ],
    package_data={
        'ofmpc': ['data/*.json'],
    },
    entry_points={
        'console_scripts': [
            'ofmpc = ofmpc.ofmpc:run_from_command_line',
        ]
    },
    install_requires=install_requires,
    extras_require=extras_require,
)
