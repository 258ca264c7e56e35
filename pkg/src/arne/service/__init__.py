"""Job service exposing dataset generation, training, and evaluation over HTTP."""

from .app import create_app

__all__ = ["create_app"]
