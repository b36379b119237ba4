"""
Error types raised across the toolkit.

The command line maps each family to its exit code.
"""
from typing import Optional

import numpy as np


class OpasegError(Exception):
    """Base class for all toolkit errors."""

    kind = "error"
    exit_code = 1


class InvalidInputError(OpasegError, ValueError):
    """An input violates a documented pre-condition."""

    kind = "validation"
    exit_code = 1


class VolumeIOError(OpasegError, OSError):
    """A file is missing, unreadable or inconsistent with its header."""

    kind = "io"
    exit_code = 2


class NumericalError(OpasegError, ArithmeticError):
    """
    A computation produced non-finite values.

    Attributes:
        checkpoint: Last good flat parameter vector, when one exists
        epoch: Epoch the checkpoint belongs to
    """

    kind = "numerical"
    exit_code = 3

    def __init__(
        self,
        message: str,
        checkpoint: Optional[np.ndarray] = None,
        epoch: Optional[int] = None
    ):
        super().__init__(message)
        self.checkpoint = checkpoint
        self.epoch = epoch


class PipelineStateError(OpasegError, RuntimeError):
    """An operation was called out of order (e.g. backward before forward)."""

    kind = "state"
    exit_code = 1
