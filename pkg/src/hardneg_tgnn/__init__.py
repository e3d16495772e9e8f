"""Temporal graph link prediction with hard negative sampling.

Modules: ``autodiff`` (reverse-mode engine), ``graph`` (event log, neighbor
index, splits, I/O), ``model`` (memory-based message-passing encoder),
``sampling`` (negative strategies), ``training``, ``evaluation`` and the
``config``/``cli`` harness.
"""

__version__ = "0.1.0"
