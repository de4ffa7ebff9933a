"""Utility functions and helpers for the DVM framework."""

from dvm_marl.utils.logger import get_logger

__all__ = [
    "get_logger",
]
