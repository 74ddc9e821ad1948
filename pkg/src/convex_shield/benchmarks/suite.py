"""Per-benchmark wiring: data generation, architectures, training defaults and probe sets."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..constraints import ConstraintSpec, InputRegion
from ..netcore import StandardNetwork
from ..safepredictor import SafePredictorModel
from ..training import Dataset, TrainConfig
from ..verifier import boundary_probes, probe_grid, random_probes, restrict
from . import caslite, synthetic

BENCHMARK_NAMES = ("synthetic1d", "synthetic2d", "caslite")
MODEL_KINDS = ("safe", "standard")


@dataclass(frozen=True)
class Benchmark:
    name: str
    arch: dict
    train: dict  # TrainConfig overrides
    probe_resolution: int

    def train_config(self, **overrides) -> TrainConfig:
        return TrainConfig(**{**self.train, **overrides})


SUITE = {
    "synthetic1d": Benchmark(
        "synthetic1d", synthetic.ARCH_1D, {"batch_size": 32, "learning_rate": 3e-3, "epochs": 500}, 100_000
    ),
    "synthetic2d": Benchmark(
        "synthetic2d", synthetic.ARCH_2D, {"batch_size": 32, "learning_rate": 3e-3, "epochs": 500}, 400
    ),
    "caslite": Benchmark(
        "caslite",
        caslite.ARCH,
        {"batch_size": 256, "learning_rate": 1e-3, "epochs": 150, "loss": "asymmetric"},
        100_000,
    ),
}


def get_benchmark(name: str) -> Benchmark:
    if name not in SUITE:
        raise ValueError(f"unknown benchmark {name!r}; choose from {BENCHMARK_NAMES}")
    return SUITE[name]


def generate(name: str, seed: int = 0, a_prev: str | None = None):
    """Returns (dataset, constraints, domain, description)."""
    get_benchmark(name)
    if name == "caslite":
        if a_prev is None:
            raise ValueError("caslite needs a previous advisory (coc or cl1500)")
        grid = caslite.CasLiteGrid()
        tables = caslite.caslite_tables(grid)
        ds, cons = caslite.caslite_dataset(tables, a_prev)
        desc = {"grid": grid.describe(), "a_prev": a_prev.lower(), "params": tables.params.__dict__}
        return ds, cons, caslite.caslite_domain(grid), desc
    if a_prev is not None:
        raise ValueError("a_prev only applies to caslite")
    if name == "synthetic1d":
        ds, cons = synthetic.gen_synthetic_1d(seed=seed)
        return ds, cons, synthetic.DOMAIN_1D, {"n": len(ds)}
    ds, cons = synthetic.gen_synthetic_2d(seed=seed)
    return ds, cons, synthetic.DOMAIN_2D, {"n": len(ds)}


def build_model(name: str, kind: str, constraints, domain: InputRegion, seed: int = 0):
    bench = get_benchmark(name)
    if kind == "standard":
        return StandardNetwork.for_domain(bench.arch["standard"], domain, seed)
    if kind != "safe":
        raise ValueError(f"model must be one of {MODEL_KINDS}")
    scale = caslite.distance_scale() if name == "caslite" else None
    return SafePredictorModel(
        constraints, domain, bench.arch["trunk"], bench.arch["head"], seed=seed, distance_scale=scale
    )


def probe_set(
    name: str,
    constraints: list[ConstraintSpec],
    domain: InputRegion,
    dataset: Dataset | None = None,
    resolution: int | None = None,
    seed: int = 0,
) -> tuple[np.ndarray, dict]:
    """Verification probes and a description of how they were drawn.

    Synthetic: a uniform grid over the bounding box of the constrained regions
    (``resolution`` points per axis) kept only where some region applies, plus
    every box corner and face centre. CAS-lite: every grid cell, ``resolution``
    uniform random points in the domain, plus box corners and face centres.
    """
    bench = get_benchmark(name)
    res = bench.probe_resolution if resolution is None else int(resolution)
    regions = [c.region for c in constraints]
    edges = boundary_probes(constraints)
    if name == "caslite":
        if dataset is None:
            raise ValueError("caslite probes need the dataset grid")
        pts = np.concatenate([dataset.inputs, random_probes(domain, res, seed), edges])
        spec = {"grid_cells": len(dataset), "random": res, "boundary": len(edges), "seed": seed}
    else:
        union = InputRegion(
            np.concatenate([r.lo for r in regions]), np.concatenate([r.hi for r in regions])
        )
        grid = restrict(probe_grid(union, res), regions)
        pts = np.concatenate([grid, edges])
        spec = {"grid_per_axis": res, "grid_in_regions": len(grid), "boundary": len(edges)}
    spec["total"] = len(pts)
    return pts, spec
