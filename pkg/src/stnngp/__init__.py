"""Multivariate hierarchical space-time NNGP model for monthly climate records."""
import os as _os

# allow --threads to raise the pool size later; must precede the first numba import
_os.environ.setdefault("NUMBA_NUM_THREADS", str(max(8, _os.cpu_count() or 1)))

__version__ = "0.1.0"
