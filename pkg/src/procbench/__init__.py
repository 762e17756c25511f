"""Toolchain for semantics-aware process-mining tasks: derive task datasets from
process trees, compile instruction datasets, build leave-one-group-out folds,
run inference and score the answers."""

__version__ = "0.1.0"
