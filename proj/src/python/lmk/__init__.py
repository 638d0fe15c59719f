# Copyright 2026 The lmk Authors
# SPDX-License-Identifier: Apache-2.0

"""Python bindings for the lmk LoRA merging toolkit."""

from ._core import (
    ContainerError,
    DivergenceError,
    ToyRun,
    coverage,
    effective_rank,
    evaluate,
    isotonic_increasing,
    kappa,
    load,
    merge,
    method_names,
    singular_values,
    spearman,
    stch_gradient,
    stch_objective,
    svd,
    sweep,
    train_toy,
    xi,
)

__all__ = [
    "ContainerError",
    "DivergenceError",
    "ToyRun",
    "coverage",
    "effective_rank",
    "evaluate",
    "isotonic_increasing",
    "kappa",
    "load",
    "merge",
    "method_names",
    "singular_values",
    "spearman",
    "stch_gradient",
    "stch_objective",
    "svd",
    "sweep",
    "train_toy",
    "xi",
]

__version__ = "0.1.0"
