"""Discriminative-clipping DP-SGD toolkit."""

from dcdpsgd.tail_dist import SubWeibullParams

__all__ = ["SubWeibullParams"]
__version__ = "0.1.0"
