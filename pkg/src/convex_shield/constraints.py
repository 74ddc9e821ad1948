"""Input regions, convex output sets and the overlap partition they induce.

Input regions are finite unions of closed axis-aligned boxes. Output sets are
a small family of convex sets, each paired with a differentiable map from an
unconstrained latent vector into the set.
"""

from __future__ import annotations

import hashlib
import itertools
import json
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from . import autodiff as ad

FORMAT_VERSION = 1


class SpecificationError(ValueError):
    """Malformed region, output set or constraint file."""


class UnsatisfiableConstraintError(SpecificationError):
    """An output set with no feasible point."""


class InfeasibleOverlapError(SpecificationError):
    """Output sets whose intersection is empty."""

    def __init__(self, message, keys=()):
        super().__init__(message)
        self.keys = tuple(keys)


# -- input regions -------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class InputRegion:
    """Union of closed boxes. ``lo`` and ``hi`` have shape (n_boxes, dim)."""

    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        lo = np.atleast_2d(np.asarray(self.lo, dtype=np.float64))
        hi = np.atleast_2d(np.asarray(self.hi, dtype=np.float64))
        if lo.shape != hi.shape:
            raise SpecificationError(f"box bounds disagree in shape: {lo.shape} vs {hi.shape}")
        if lo.shape[0] == 0:
            raise SpecificationError("region has no boxes")
        if not (np.all(np.isfinite(lo)) and np.all(np.isfinite(hi))):
            raise SpecificationError("box bounds must be finite")
        if np.any(lo > hi):
            raise SpecificationError("every interval needs lo <= hi")
        lo.setflags(write=False)
        hi.setflags(write=False)
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    def __eq__(self, other):
        if not isinstance(other, InputRegion):
            return NotImplemented
        return np.array_equal(self.lo, other.lo) and np.array_equal(self.hi, other.hi)

    def __hash__(self):
        return hash((self.lo.tobytes(), self.hi.tobytes(), self.lo.shape))

    @classmethod
    def box(cls, *intervals: Sequence[float]) -> "InputRegion":
        """``InputRegion.box((0, 1), (2, 3))`` is the single box [0,1]x[2,3]."""
        arr = np.asarray(intervals, dtype=np.float64)
        return cls(arr[:, 0][None, :], arr[:, 1][None, :])

    @classmethod
    def from_boxes(cls, boxes: Iterable[Sequence[Sequence[float]]]) -> "InputRegion":
        arr = np.asarray(list(boxes), dtype=np.float64)
        if arr.ndim != 3 or arr.shape[2] != 2:
            raise SpecificationError("boxes must be a list of [[lo, hi], ...] per dimension")
        return cls(arr[:, :, 0], arr[:, :, 1])

    @property
    def dim(self) -> int:
        return self.lo.shape[1]

    @property
    def n_boxes(self) -> int:
        return self.lo.shape[0]

    def bounding_box(self) -> "InputRegion":
        return InputRegion(self.lo.min(axis=0), self.hi.max(axis=0))

    def boxes(self) -> list:
        return [
            [[float(l), float(h)] for l, h in zip(lo, hi)] for lo, hi in zip(self.lo, self.hi)
        ]

    def diagonal(self, scale=None) -> float:
        bb = self.bounding_box()
        span = bb.hi[0] - bb.lo[0]
        if scale is not None:
            span = span * np.asarray(scale, dtype=np.float64)
        return float(np.sqrt(np.sum(span**2)))

    def to_json(self) -> dict:
        return {"boxes": self.boxes()}

    @classmethod
    def from_json(cls, obj: dict, path: str = "region") -> "InputRegion":
        try:
            return cls.from_boxes(obj["boxes"])
        except (KeyError, TypeError) as exc:
            raise SpecificationError(f"{path}.boxes: {exc}") from exc


def _points(region: InputRegion, x) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    x2 = np.atleast_2d(x)
    if region.dim == 1 and x.ndim == 1 and x.shape[0] != 1:
        # a flat batch of scalars for a one-dimensional region
        x2, single = x[:, None], False
    if x2.shape[1] != region.dim:
        raise SpecificationError(
            f"point dimension {x2.shape[1]} does not match region dimension {region.dim}"
        )
    return x2, single


def region_contains(region: InputRegion, x, chunk: int = 4096):
    """Closed-set membership. Accepts one point or a batch of shape (n, dim)."""
    pts, single = _points(region, x)
    out = np.zeros(len(pts), dtype=bool)
    for start in range(0, len(pts), chunk):
        p = pts[start : start + chunk, None, :]
        inside = np.all((p >= region.lo) & (p <= region.hi), axis=2)
        out[start : start + chunk] = inside.any(axis=1)
    return bool(out[0]) if single else out


def region_distance(region: InputRegion, x, scale=None, chunk: int = 2048):
    """Scaled Euclidean distance to the nearest box; exactly 0 on the region."""
    pts, single = _points(region, x)
    if scale is None:
        scale = np.ones(region.dim)
    scale = np.asarray(scale, dtype=np.float64)
    if scale.shape != (region.dim,) or np.any(scale <= 0):
        raise SpecificationError("scale must hold one positive weight per dimension")
    out = np.empty(len(pts))
    for start in range(0, len(pts), chunk):
        p = pts[start : start + chunk, None, :]
        gap = np.maximum(np.maximum(region.lo - p, p - region.hi), 0.0) * scale
        # factor out the largest gap so tiny distances do not underflow when squared
        top = gap.max(axis=2, keepdims=True)
        unit = np.divide(gap, top, out=np.zeros_like(gap), where=top > 0)
        dist = top[..., 0] * np.sqrt(np.sum(unit * unit, axis=2))
        out[start : start + chunk] = dist.min(axis=1)
    return float(out[0]) if single else out


def merge_cells(mask: np.ndarray) -> list[tuple[tuple[int, int], ...]]:
    """Cover the True cells of an n-d boolean grid with disjoint index boxes.

    Greedy: grow each box along axis 0, then 1, and so on, while every cell of
    the next slab is True and unclaimed. Returns inclusive index ranges.
    """
    mask = np.asarray(mask, dtype=bool)
    free = mask.copy()
    boxes = []
    for idx in zip(*np.nonzero(mask)):
        if not free[idx]:
            continue
        lo = list(idx)
        hi = list(idx)
        for axis in range(mask.ndim):
            while hi[axis] + 1 < mask.shape[axis]:
                probe = tuple(
                    slice(hi[a] + 1, hi[a] + 2) if a == axis else slice(lo[a], hi[a] + 1)
                    for a in range(mask.ndim)
                )
                if free[probe].all():
                    hi[axis] += 1
                else:
                    break
        free[tuple(slice(l, h + 1) for l, h in zip(lo, hi))] = False
        boxes.append(tuple(zip(lo, hi)))
    return boxes


def region_from_cells(mask: np.ndarray, edges: Sequence[np.ndarray], inset=0.0):
    """Union of the closed grid cells flagged in ``mask``.

    ``edges[d]`` holds the ``mask.shape[d] + 1`` cell boundaries along axis
    ``d``; neighbouring cells share boundary values bit for bit. Each merged
    box is pulled in by ``inset`` (scalar or per axis) on every side, so that
    regions built from disjoint cells no longer touch.
    """
    boxes = merge_cells(mask)
    if not boxes:
        return None
    lo = np.empty((len(boxes), mask.ndim))
    hi = np.empty((len(boxes), mask.ndim))
    for b, ranges in enumerate(boxes):
        for d, (i0, i1) in enumerate(ranges):
            lo[b, d] = edges[d][i0]
            hi[b, d] = edges[d][i1 + 1]
    inset = np.broadcast_to(np.asarray(inset, dtype=np.float64), (mask.ndim,))
    return InputRegion(lo + inset, hi - inset)


# -- output sets ---------------------------------------------------------------


@dataclass(frozen=True)
class ConvexOutputSet:
    """Tagged convex subset of the output space.

    ``interval``/``above``/``below`` bound every output coordinate. ``score``
    is the polyhedron {y : y_u <= mean_{j != u} y_j - epsilon for u in unsafe}:
    each unsafe score sits at least ``epsilon`` below the average of the other
    scores, so it can never be the highest. The family is closed under
    intersection (unsafe index sets unite) and is empty only when every
    coordinate is unsafe.
    """

    variant: str
    lo: float = -np.inf
    hi: float = np.inf
    unsafe: tuple[int, ...] = ()
    epsilon: float = 0.0

    VARIANTS = ("interval", "above", "below", "score", "unconstrained")

    def __post_init__(self):
        if self.variant not in self.VARIANTS:
            raise SpecificationError(f"unknown output-set variant {self.variant!r}")
        if self.variant == "interval" and not (np.isfinite(self.lo) and np.isfinite(self.hi)):
            raise SpecificationError("interval needs finite bounds")
        if self.variant == "interval" and not self.lo < self.hi:
            raise UnsatisfiableConstraintError(f"empty interval ({self.lo}, {self.hi})")
        if self.variant == "above" and not np.isfinite(self.lo):
            raise SpecificationError("half-line above needs a finite lower bound")
        if self.variant == "below" and not np.isfinite(self.hi):
            raise SpecificationError("half-line below needs a finite upper bound")
        if self.variant == "score":
            object.__setattr__(self, "unsafe", tuple(sorted(set(int(i) for i in self.unsafe))))
            if not self.unsafe or min(self.unsafe) < 0:
                raise SpecificationError("score constraint needs non-negative unsafe indices")
            if not self.epsilon > 0:
                raise SpecificationError("score constraint needs epsilon > 0")

    @classmethod
    def interval(cls, lo, hi):
        return cls("interval", lo=float(lo), hi=float(hi))

    @classmethod
    def above(cls, lo):
        return cls("above", lo=float(lo))

    @classmethod
    def below(cls, hi):
        return cls("below", hi=float(hi))

    @classmethod
    def score_not_highest(cls, unsafe, epsilon=1e-4):
        return cls("score", unsafe=tuple(unsafe), epsilon=float(epsilon))

    @classmethod
    def unconstrained(cls):
        return cls("unconstrained")

    def check_arity(self, m: int):
        """Raise if the set cannot hold a point of ``R^m``."""
        if self.variant != "score":
            return
        if max(self.unsafe) >= m:
            raise SpecificationError(f"unsafe index {max(self.unsafe)} out of range for {m} outputs")
        if len(self.unsafe) >= m:
            raise UnsatisfiableConstraintError(
                "every output coordinate is marked unsafe; no score can stay below the others"
            )

    def margin(self, y) -> np.ndarray:
        """Signed slack per row of ``y`` (shape (n, m)); negative means outside."""
        y = np.atleast_2d(np.asarray(y, dtype=np.float64))
        if self.variant == "unconstrained":
            return np.full(len(y), np.inf)
        if self.variant == "score":
            m = y.shape[1]
            self.check_arity(m)
            u = list(self.unsafe)
            others_mean = (y.sum(axis=1, keepdims=True) - y[:, u]) / (m - 1)
            return (others_mean - self.epsilon - y[:, u]).min(axis=1)
        return np.minimum(y - self.lo, self.hi - y).min(axis=1)

    def contains(self, y, tol: float = 0.0) -> np.ndarray:
        return self.margin(y) >= -tol

    def to_json(self) -> dict:
        if self.variant == "interval":
            params = {"lo": self.lo, "hi": self.hi}
        elif self.variant == "above":
            params = {"lo": self.lo}
        elif self.variant == "below":
            params = {"hi": self.hi}
        elif self.variant == "score":
            params = {"unsafe": list(self.unsafe), "epsilon": self.epsilon}
        else:
            params = {}
        return {"variant": self.variant, "params": params}

    @classmethod
    def from_json(cls, obj: dict, path: str = "output") -> "ConvexOutputSet":
        try:
            variant = obj["variant"]
            params = dict(obj.get("params", {}))
        except (KeyError, TypeError, AttributeError) as exc:
            raise SpecificationError(f"{path}: missing variant ({exc})") from exc
        try:
            if variant == "score":
                params["unsafe"] = tuple(params.get("unsafe", ()))
            return cls(variant, **params)
        except TypeError as exc:
            raise SpecificationError(f"{path}.params: {exc}") from exc


def project_output(out_set: ConvexOutputSet, raw):
    """Differentiable map from an unconstrained ``raw`` batch (n, m) into ``out_set``."""
    v = out_set.variant
    if v == "unconstrained":
        return raw
    if v == "interval":
        return out_set.lo + (out_set.hi - out_set.lo) * ad.logistic(raw)
    if v == "above":
        return out_set.lo + ad.softplus(raw)
    if v == "below":
        return out_set.hi - ad.softplus(-raw)
    # score: every unsafe coordinate becomes (min over the safe ones) - offset.
    # The offset grows with the number of unsafe coordinates so that each one
    # also clears the average of the others; it equals epsilon for one.
    m = ad.value_of(raw).shape[-1]
    out_set.check_arity(m)
    keep = [j for j in range(m) if j not in out_set.unsafe]
    offset = out_set.epsilon * (m - 1) / len(keep)
    floor = ad.min(raw[:, keep], axis=1) - offset
    cols = [floor if j in out_set.unsafe else raw[:, j] for j in range(m)]
    return ad.stack(cols, axis=1)


def intersect_output_sets(sets: Sequence[ConvexOutputSet]) -> ConvexOutputSet:
    """Intersection within the family; raises :class:`InfeasibleOverlapError` when empty.

    Score sets with unequal epsilons intersect to the (smaller) set using the
    largest epsilon.
    """
    active = [s for s in sets if s.variant != "unconstrained"]
    if not active:
        return ConvexOutputSet.unconstrained()
    kinds = {"score" if s.variant == "score" else "bound" for s in active}
    if kinds == {"score", "bound"}:
        raise SpecificationError("cannot intersect score constraints with bound constraints")
    if kinds == {"score"}:
        unsafe = sorted(set().union(*(s.unsafe for s in active)))
        return ConvexOutputSet.score_not_highest(unsafe, max(s.epsilon for s in active))
    lo = max(s.lo for s in active)
    hi = min(s.hi for s in active)
    if not lo < hi:
        raise InfeasibleOverlapError(f"bounds intersect to an empty set ({lo}, {hi})")
    if np.isfinite(lo) and np.isfinite(hi):
        return ConvexOutputSet.interval(lo, hi)
    return ConvexOutputSet.above(lo) if np.isfinite(lo) else ConvexOutputSet.below(hi)


# -- constraints and the overlap partition ------------------------------------


@dataclass(frozen=True)
class ConstraintSpec:
    region: InputRegion
    output_set: ConvexOutputSet
    name: str = ""

    def to_json(self) -> dict:
        return {"name": self.name, "region": self.region.to_json(), "output": self.output_set.to_json()}

    @classmethod
    def from_json(cls, obj: dict, path: str = "constraint") -> "ConstraintSpec":
        if not isinstance(obj, dict):
            raise SpecificationError(f"{path}: expected an object")
        for key in ("region", "output"):
            if key not in obj:
                raise SpecificationError(f"{path}.{key}: missing")
        return cls(
            InputRegion.from_json(obj["region"], f"{path}.region"),
            ConvexOutputSet.from_json(obj["output"], f"{path}.output"),
            str(obj.get("name", "")),
        )


@dataclass(frozen=True)
class OverlapKey:
    bits: tuple[int, ...]

    def __post_init__(self):
        bits = tuple(int(b) for b in self.bits)
        if any(b not in (0, 1) for b in bits):
            raise ValueError(f"overlap key bits must be 0 or 1, got {bits}")
        object.__setattr__(self, "bits", bits)

    @classmethod
    def parse(cls, text: str) -> "OverlapKey":
        return cls(tuple(int(ch) for ch in text))

    def __str__(self):
        return "".join(str(b) for b in self.bits) or "-"

    def __len__(self):
        return len(self.bits)


@dataclass(frozen=True)
class OverlapPartition:
    keys: tuple[OverlapKey, ...]
    n_constraints: int
    _index: dict = field(default_factory=dict, compare=False, repr=False)

    def __post_init__(self):
        self._index.update({k.bits: i for i, k in enumerate(self.keys)})

    @property
    def k(self) -> int:
        return len(self.keys)

    def bit_matrix(self) -> np.ndarray:
        return np.array([k.bits for k in self.keys], dtype=bool).reshape(self.k, self.n_constraints)

    def index_of(self, bits) -> int | None:
        return self._index.get(tuple(int(b) for b in bits))

    def __contains__(self, key) -> bool:
        bits = key.bits if isinstance(key, OverlapKey) else tuple(key)
        return tuple(bits) in self._index


def _check_dims(constraints: Sequence[ConstraintSpec], dim: int):
    for c in constraints:
        if c.region.dim != dim:
            raise SpecificationError(
                f"constraint {c.name!r} has dimension {c.region.dim}, expected {dim}"
            )


def overlap_key_of(constraints: Sequence[ConstraintSpec], x) -> OverlapKey:
    return OverlapKey(tuple(int(region_contains(c.region, x)) for c in constraints))


def membership_bits(constraints: Sequence[ConstraintSpec], x) -> np.ndarray:
    """Bit matrix (n, c) for a batch of points."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if not constraints:
        return np.zeros((len(x), 0), dtype=bool)
    return np.stack([region_contains(c.region, x) for c in constraints], axis=1)


def enumerate_overlaps(
    constraints: Sequence[ConstraintSpec], domain: InputRegion, include_faces: bool = True
) -> OverlapPartition:
    """Exact set of membership patterns realised in ``domain``.

    Every box bound is a breakpoint; the arrangement of breakpoints cuts the
    domain into cells on whose relative interiors membership is constant.
    With ``include_faces`` the lower-dimensional faces (points lying on
    breakpoints) are sampled as well, so that regions touching only along a
    boundary contribute their shared pattern. Without it only full-dimensional
    cells count.
    """
    dim = domain.dim
    _check_dims(constraints, dim)
    c = len(constraints)
    if c == 0:
        return OverlapPartition((OverlapKey(()),), 0)
    axes = []
    for d in range(dim):
        bps = [domain.lo[:, d], domain.hi[:, d]] + [
            np.concatenate([con.region.lo[:, d], con.region.hi[:, d]]) for con in constraints
        ]
        bp = np.unique(np.concatenate(bps))
        mids = (bp[:-1] + bp[1:]) / 2
        coords = np.sort(np.concatenate([bp, mids])) if include_faces else mids
        if len(coords) == 0:  # degenerate domain along this axis
            coords = bp
        axes.append(coords)
    shape = tuple(len(a) for a in axes)
    # paint each box onto the coordinate grid: a box covers a contiguous index range per axis
    in_domain = np.zeros(shape, dtype=bool)
    _paint(in_domain, domain, axes)
    patterns = np.zeros(shape + (c,), dtype=bool)
    for i, con in enumerate(constraints):
        layer = np.zeros(shape, dtype=bool)
        _paint(layer, con.region, axes)
        patterns[..., i] = layer
    seen = patterns[in_domain]
    if len(seen) == 0:
        raise SpecificationError("domain is empty")
    codes = np.unique(np.packbits(seen, axis=1, bitorder="little"), axis=0)
    bits = np.unpackbits(codes, axis=1, bitorder="little", count=c).astype(int)
    keys = sorted((tuple(row) for row in bits), key=lambda b: (sum(b), tuple(-x for x in b)))
    return OverlapPartition(tuple(OverlapKey(k) for k in keys), c)


def _paint(grid: np.ndarray, region: InputRegion, axes: list[np.ndarray]):
    for lo, hi in zip(region.lo, region.hi):
        sl = []
        for d, coords in enumerate(axes):
            i0 = np.searchsorted(coords, lo[d], side="left")
            i1 = np.searchsorted(coords, hi[d], side="right")
            sl.append(slice(i0, i1))
        grid[tuple(sl)] = True


def all_keys(c: int) -> list[OverlapKey]:
    return [OverlapKey(bits) for bits in itertools.product((0, 1), repeat=c)]


# -- constraint files ----------------------------------------------------------


def dump_constraints(constraints: Sequence[ConstraintSpec], domain: InputRegion) -> dict:
    return {
        "format_version": FORMAT_VERSION,
        "domain": domain.to_json(),
        "constraints": [c.to_json() for c in constraints],
    }


def load_constraints(obj: dict) -> tuple[list[ConstraintSpec], InputRegion]:
    if not isinstance(obj, dict):
        raise SpecificationError("constraint file: expected a JSON object")
    version = obj.get("format_version")
    if version != FORMAT_VERSION:
        raise SpecificationError(
            f"format_version: expected {FORMAT_VERSION}, found {version!r}"
        )
    if "domain" not in obj or "constraints" not in obj:
        raise SpecificationError("constraint file needs 'domain' and 'constraints'")
    domain = InputRegion.from_json(obj["domain"], "domain")
    items = obj["constraints"]
    if not isinstance(items, list):
        raise SpecificationError("constraints: expected a list")
    cons = [ConstraintSpec.from_json(c, f"constraints[{i}]") for i, c in enumerate(items)]
    _check_dims(cons, domain.dim)
    return cons, domain


def spec_hash(constraints: Sequence[ConstraintSpec], domain: InputRegion) -> str:
    payload = json.dumps(dump_constraints(constraints, domain), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(payload.encode()).hexdigest()
