"""Bundled environments used by tests, docs and the CLI fixture command."""

from . import corporate_travel

__all__ = ["corporate_travel"]
