from setuptools import setup

import ofmpc

setup(
        name="ofmpc-demo-extension",
        version=ofmpc.__version__,
        # package name MUST be "ofmpc.plugins" for the namespace package to work
        packages=['ofmpc.plugins'],
)
