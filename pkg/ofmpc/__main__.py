""" Entry point for calling with python -m ofmpc ... """

import sys

from . import run_from_command_line

sys.exit(run_from_command_line())
