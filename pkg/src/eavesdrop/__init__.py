"""eavesdrop: agentic eavesdropping simulator for MIMO semantic image transmission."""

from importlib.metadata import PackageNotFoundError, version

try:
    __version__ = version("eavesdrop-sim")
except PackageNotFoundError:
    # Running from a source checkout without an install
    __version__ = "0.0.0+src"
