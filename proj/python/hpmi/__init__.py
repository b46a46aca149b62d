"""HPMI transformer model-surgery laboratory."""

from hpmi._core import *  # noqa: F401,F403
