"""Two small regression problems with interval-style output constraints."""

from __future__ import annotations

import numpy as np

from ..constraints import ConstraintSpec, ConvexOutputSet, InputRegion
from ..netcore import DenseNetSpec
from ..training import Dataset

DOMAIN_1D = InputRegion.box((-2.0, 2.0))
DOMAIN_2D = InputRegion.box((0.0, 1.0), (0.0, 1.0))


def truth_1d(x):
    return np.tanh(2.0 * np.asarray(x, dtype=np.float64))


def truth_2d(x):
    x = np.atleast_2d(x)
    return np.clip(0.5 + 0.4 * np.sin(2 * np.pi * x[:, 0]) * np.sin(2 * np.pi * x[:, 1]), 0.0, 1.0)


def constraints_1d() -> list[ConstraintSpec]:
    # x > 0 => y > 0
    return [ConstraintSpec(InputRegion.box((0.0, 2.0)), ConvexOutputSet.above(0.0), "positive")]


def constraints_2d() -> list[ConstraintSpec]:
    return [
        ConstraintSpec(InputRegion.box((0.1, 0.45), (0.3, 0.7)), ConvexOutputSet.interval(0.7, 1.0), "A1"),
        ConstraintSpec(InputRegion.box((0.35, 0.7), (0.3, 0.7)), ConvexOutputSet.interval(0.5, 0.8), "A2"),
    ]


def gen_synthetic_1d(n: int = 200, seed: int = 0) -> tuple[Dataset, list[ConstraintSpec]]:
    if n < 2:
        raise ValueError("n must be at least 2")
    rng = np.random.default_rng(seed)
    x = rng.uniform(-2.0, 2.0, size=(n, 1))
    y = truth_1d(x[:, 0]) + 0.05 * rng.standard_normal(n)
    return Dataset(x, y[:, None], None, ["x"], ["y"]), constraints_1d()


def gen_synthetic_2d(n: int = 400, seed: int = 0) -> tuple[Dataset, list[ConstraintSpec]]:
    if n < 4:
        raise ValueError("n must be at least 4")
    rng = np.random.default_rng(seed)
    x = rng.uniform(0.0, 1.0, size=(n, 2))
    y = truth_2d(x) + 0.02 * rng.standard_normal(n)
    return Dataset(x, y[:, None], None, ["x1", "x2"], ["y"]), constraints_2d()


# architectures: trunk shared by all heads, per-head layers, and the unconstrained baseline
ARCH_1D = {
    "trunk": DenseNetSpec((1, 10), relu_output=True),
    "head": DenseNetSpec((10, 1)),
    "standard": DenseNetSpec((1, 10, 1)),
}
ARCH_2D = {
    "trunk": DenseNetSpec((2, 20, 20), relu_output=True),
    "head": DenseNetSpec((20, 20, 1)),
    "standard": DenseNetSpec((2, 20, 20, 1)),
}
