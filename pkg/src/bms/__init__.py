"""Behavioral molecular structures.

Tabular behavior records become graphs over an attribute space; the same
graphs feed detection, next-interaction prediction and generation pipelines.
"""

__version__ = "0.1.0"
