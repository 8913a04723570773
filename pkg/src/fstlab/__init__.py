"""Fused speech-text translation on a synthetic corpus."""
from importlib.metadata import PackageNotFoundError, version

try:
    __version__ = version("fstlab")
except PackageNotFoundError:  # running from a source tree without install
    __version__ = "0.0.0"
