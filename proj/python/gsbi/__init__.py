"""Python bindings for the gsbi grasp planner."""

from ._core import *  # noqa: F401,F403
from ._core import GsbiError, __doc__  # noqa: F401
