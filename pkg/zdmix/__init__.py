"""zdmix - mixing-rate expansions for Z^d-extensions of hyperbolic systems."""

from importlib.metadata import version

__version__ = version("zdmix")
