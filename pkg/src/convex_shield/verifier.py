"""Empirical certification of constraint satisfaction, accuracy and continuity."""

from __future__ import annotations

import csv
import io
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from .constraints import ConstraintSpec, InputRegion, region_contains

INTERVAL_TOL = 1e-9


def worker_count() -> int:
    raw = os.environ.get("CONVEX_SHIELD_THREADS")
    if raw:
        try:
            return max(1, int(raw))
        except ValueError:
            pass
    return max(1, min(8, os.cpu_count() or 1))


def evaluate(predictor: Callable, points: np.ndarray, chunk: int = 20000) -> np.ndarray:
    """Run ``predictor`` over ``points`` in chunks; results are concatenated in order."""
    points = np.atleast_2d(points)
    chunks = [points[i : i + chunk] for i in range(0, len(points), chunk)] or [points]
    workers = min(worker_count(), len(chunks))
    if workers == 1:
        parts = [np.atleast_2d(np.asarray(predictor(c))) for c in chunks]
    else:
        with ThreadPoolExecutor(workers) as pool:
            parts = [np.atleast_2d(np.asarray(p)) for p in pool.map(predictor, chunks)]
    return np.concatenate(parts, axis=0)


@dataclass
class ConstraintViolations:
    name: str
    probes_in_region: int
    count: int
    percentage: float
    worst_margin: float


@dataclass
class ViolationReport:
    total_probes: int
    violating_probes: int
    percentage: float
    worst_margin: float
    per_constraint: list[ConstraintViolations] = field(default_factory=list)
    probe_spec: dict = field(default_factory=dict)

    @property
    def count(self) -> int:
        return self.violating_probes

    def to_json(self) -> dict:
        out = asdict(self)
        for key in ("worst_margin",):
            out[key] = _finite(out[key])
        for item in out["per_constraint"]:
            item["worst_margin"] = _finite(item["worst_margin"])
        return out


def _finite(x):
    return x if np.isfinite(x) else None


def violation_mask(constraint: ConstraintSpec, y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Violation flags and signed margins for outputs ``y`` of probes inside the region.

    A NaN anywhere in an output row counts as a violation with margin -inf.
    """
    s = constraint.output_set
    broken = np.isnan(y).any(axis=1)
    if s.variant == "score":
        # a violation is an unsafe score that is (jointly) the highest
        others = np.delete(y, list(s.unsafe), axis=1)
        top_other = others.max(axis=1) if others.shape[1] else np.full(len(y), -np.inf)
        unsafe_top = y[:, list(s.unsafe)].max(axis=1)
        bad, margin = unsafe_top >= top_other, top_other - unsafe_top
    else:
        margin = s.margin(y)
        bad = margin < -INTERVAL_TOL
    return bad | broken, np.where(broken, -np.inf, margin)


def check_violations(
    predictor: Callable,
    constraints: Sequence[ConstraintSpec],
    probes: np.ndarray,
    probe_spec: dict | None = None,
    outputs: np.ndarray | None = None,
) -> ViolationReport:
    probes = np.atleast_2d(np.asarray(probes, dtype=np.float64))
    y = evaluate(predictor, probes) if outputs is None else np.atleast_2d(outputs)
    any_bad = np.zeros(len(probes), dtype=bool)
    worst = np.inf
    per = []
    for con in constraints:
        inside = region_contains(con.region, probes)
        bad, margin = violation_mask(con, y[inside])
        n_in = int(inside.sum())
        w = float(margin.min()) if n_in else np.inf
        worst = min(worst, w)
        any_bad[np.flatnonzero(inside)[bad]] = True
        per.append(
            ConstraintViolations(
                con.name, n_in, int(bad.sum()), 100.0 * int(bad.sum()) / max(len(probes), 1), w
            )
        )
    count = int(any_bad.sum())
    return ViolationReport(
        len(probes), count, 100.0 * count / max(len(probes), 1), worst, per, dict(probe_spec or {})
    )


def count_violations_bruteforce(predictor: Callable, constraints: Sequence[ConstraintSpec], probes) -> int:
    """Point-by-point re-count, written independently of :func:`check_violations`."""
    total = 0
    for x in np.atleast_2d(probes):
        y = np.asarray(predictor(x[None, :]))[0]
        bad = False
        for con in constraints:
            lo, hi = con.region.lo, con.region.hi
            if not any(all(l <= xi <= h for xi, l, h in zip(x, bl, bh)) for bl, bh in zip(lo, hi)):
                continue
            s = con.output_set
            if any(v != v for v in y):
                bad = True
            elif s.variant == "score":
                best_other = max(v for j, v in enumerate(y) if j not in s.unsafe)
                bad |= any(y[u] >= best_other for u in s.unsafe)
            elif s.variant != "unconstrained":
                bad |= any(v < s.lo - INTERVAL_TOL or v > s.hi + INTERVAL_TOL for v in y)
        total += bad
    return total


# -- probes -------------------------------------------------------------------


def probe_grid(region: InputRegion, resolution: int) -> np.ndarray:
    """Uniform tensor grid over the bounding box of ``region``, ``resolution`` points per axis."""
    bb = region.bounding_box()
    axes = [np.linspace(l, h, resolution) for l, h in zip(bb.lo[0], bb.hi[0])]
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.stack([m.ravel() for m in mesh], axis=1)


def random_probes(region: InputRegion, n: int, seed: int = 0) -> np.ndarray:
    bb = region.bounding_box()
    rng = np.random.default_rng(seed)
    return rng.uniform(bb.lo[0], bb.hi[0], size=(n, region.dim))


def boundary_probes(constraints: Sequence[ConstraintSpec], max_boxes: int = 2000) -> np.ndarray:
    """Corners and face centres of every constraint box."""
    pts = []
    for con in constraints:
        for lo, hi in list(zip(con.region.lo, con.region.hi))[:max_boxes]:
            mid = (lo + hi) / 2
            for corner in np.array(np.meshgrid(*zip(lo, hi), indexing="ij")).reshape(len(lo), -1).T:
                pts.append(corner)
            for d in range(len(lo)):
                for end in (lo[d], hi[d]):
                    p = mid.copy()
                    p[d] = end
                    pts.append(p)
    if not pts:
        return np.zeros((0, 0))
    return np.unique(np.array(pts), axis=0)


def restrict(points: np.ndarray, regions: Sequence[InputRegion]) -> np.ndarray:
    keep = np.zeros(len(points), dtype=bool)
    for r in regions:
        keep |= region_contains(r, points)
    return points[keep]


# -- accuracy -----------------------------------------------------------------


def accuracy(predictor: Callable, ds) -> float:
    """Percentage of samples whose highest predicted score matches the stratum label."""
    if len(ds) == 0:
        raise ValueError("empty dataset")
    labels = ds.strata if ds.strata is not None else np.argmax(ds.targets, axis=1)
    pred = evaluate(predictor, ds.inputs)
    return 100.0 * float(np.mean(np.argmax(pred, axis=1) == labels))


def r2_score(predictor: Callable, ds) -> float:
    if len(ds) == 0:
        raise ValueError("empty dataset")
    pred = evaluate(predictor, ds.inputs)
    resid = np.sum((pred - ds.targets) ** 2)
    total = np.sum((ds.targets - ds.targets.mean(axis=0)) ** 2)
    return float(1.0 - resid / total) if total > 0 else float("nan")


def fit_metric(predictor: Callable, ds) -> tuple[str, float]:
    """Accuracy for labelled (classification-style) data, R^2 otherwise."""
    if ds.strata is not None:
        return "accuracy_pct", accuracy(predictor, ds)
    return "r2", r2_score(predictor, ds)


# -- continuity ---------------------------------------------------------------


@dataclass
class ContinuityProbe:
    max_jump: float
    argmax_position: np.ndarray
    profile: np.ndarray


def continuity_probe(predictor: Callable, segment, steps: int) -> ContinuityProbe:
    """Largest change between adjacent points of a uniform walk along ``segment``."""
    if steps < 2:
        raise ValueError("steps must be at least 2")
    xa, xb = (np.atleast_1d(np.asarray(p, dtype=np.float64)) for p in segment)
    t = np.linspace(0.0, 1.0, steps)[:, None]
    pts = xa + t * (xb - xa)
    y = evaluate(predictor, pts)
    jumps = np.max(np.abs(np.diff(y, axis=0)), axis=1)
    i = int(np.argmax(jumps))
    return ContinuityProbe(float(jumps[i]), (pts[i] + pts[i + 1]) / 2, jumps)


@dataclass
class HalvingResult:
    coarse: ContinuityProbe
    fine: ContinuityProbe
    ratio: float
    continuous: bool


def halving_check(predictor: Callable, segment, steps: int, band=(0.25, 0.75)) -> HalvingResult:
    """Compare max jumps at ``steps`` and at doubled resolution (``2*steps - 1`` points).

    For a Lipschitz function the maximum adjacent jump halves when the spacing
    halves; a jump discontinuity keeps the ratio near 1 and is flagged.
    """
    coarse = continuity_probe(predictor, segment, steps)
    fine = continuity_probe(predictor, segment, 2 * steps - 1)
    ratio = fine.max_jump / coarse.max_jump if coarse.max_jump > 0 else 0.0
    ok = coarse.max_jump == 0 or band[0] <= ratio <= band[1]
    return HalvingResult(coarse, fine, ratio, ok)


# -- table --------------------------------------------------------------------


@dataclass
class RunSummary:
    network: str
    dataset: str
    accuracy: float
    violations: float


def report_table(runs: Sequence[RunSummary]) -> tuple[str, str]:
    """Accuracy/violation summary as aligned text and CSV, one row per network."""
    datasets = list(dict.fromkeys(r.dataset for r in runs))
    networks = list(dict.fromkeys(r.network for r in runs))
    header = ["Network"]
    for d in datasets:
        header += [f"Acc ({d})", f"Violations ({d})"]
    rows = []
    for net in networks:
        row = [net]
        for d in datasets:
            match = [r for r in runs if r.network == net and r.dataset == d]
            row += [f"{match[0].accuracy:.2f}", f"{match[0].violations:.2f}"] if match else ["", ""]
        rows.append(row)
    buf = io.StringIO()
    csv.writer(buf, lineterminator="\n").writerows([header] + rows)
    widths = [max(len(r[i]) for r in [header] + rows) for i in range(len(header))]
    lines = ["  ".join(cell.ljust(w) for cell, w in zip(r, widths)).rstrip() for r in [header] + rows]
    return "\n".join(lines) + "\n", buf.getvalue()
