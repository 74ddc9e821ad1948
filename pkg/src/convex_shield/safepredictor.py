"""Safe predictor: proximity-weighted blend of per-overlap constrained heads.

For every membership pattern ``b`` that occurs in the input domain there is a
head whose output is projected into the intersection of the output sets of the
constraints active in ``b``. The heads share a trunk. Their outputs are
averaged with weights

    w_b(x) = prod_{i: b_i = 0} s_i(x) * prod_{i: b_i = 1} (1 - s_i(x)),

where ``s_i`` is the proximity to region ``i``. Inside region ``i`` the
proximity is exactly zero, so every head that ignores constraint ``i`` gets
exactly zero weight and the blend stays inside that constraint's convex set,
whatever the parameter values.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from . import constraints as cs
from .constraints import (
    ConstraintSpec,
    ConvexOutputSet,
    InputRegion,
    OverlapKey,
    OverlapPartition,
)
from .netcore import (
    MODEL_FORMAT_VERSION,
    DenseNetSpec,
    domain_normalisation,
    ModelFormatError,
    ParamStore,
    _field,
    _float_array,
    forward,
    glorot_init,
)
from .proximity import ProximityParams, default_params, proximity

UNDERFLOW = 1e-300


class BuildError(cs.InfeasibleOverlapError):
    """Some overlap region has no feasible output."""


class PartitionIntegrityError(RuntimeError):
    """An input whose membership pattern has no head."""


@dataclass(frozen=True)
class ConstrainedPredictor:
    key: OverlapKey
    spec: DenseNetSpec
    codomain: ConvexOutputSet

    @property
    def prefix(self) -> str:
        return f"head/{self.key}/"


def weight_eval(prox, keys) -> np.ndarray:
    """Weights (n, k) from proximities (n, c) and a boolean key matrix (k, c)."""
    return _weights(np.atleast_2d(np.asarray(prox, dtype=np.float64)), np.asarray(keys, dtype=bool))


def _weights(prox, bits: np.ndarray):
    pv = ad.value_of(prox)
    n, c = pv.shape
    k = bits.shape[0]
    if c == 0:
        return ad.custom(np.ones((n, k)), (prox,), (lambda g: np.zeros((n, 0)),))
    factors = np.where(bits[None, :, :], 1.0 - pv[:, None, :], pv[:, None, :])
    value = factors.prod(axis=2)

    def vjp(g):
        # product of all factors except the i-th, via prefix and suffix products
        ones = np.ones((n, k, 1))
        before = np.cumprod(np.concatenate([ones, factors[:, :, :-1]], axis=2), axis=2)
        after = np.cumprod(np.concatenate([ones, factors[:, :, :0:-1]], axis=2), axis=2)[:, :, ::-1]
        sign = np.where(bits, -1.0, 1.0)[None, :, :]
        return np.einsum("nk,nkc->nc", g, sign * before * after)

    return ad.custom(value, (prox,), (vjp,))


class SafePredictorModel:
    kind = "safe"

    def __init__(
        self,
        constraints: Sequence[ConstraintSpec],
        domain: InputRegion,
        trunk_spec: DenseNetSpec,
        head_spec: DenseNetSpec,
        seed: int = 0,
        distance_scale=None,
        input_shift=None,
        input_scale=None,
        include_faces: bool = True,
    ):
        self.constraints = _named(constraints)
        self.domain = domain
        dim = domain.dim
        if trunk_spec.n_in != dim:
            raise ValueError(f"trunk expects {trunk_spec.n_in} inputs, domain has {dim}")
        if head_spec.n_in != trunk_spec.n_out:
            raise ValueError("head input width must equal trunk output width")
        self.trunk_spec = trunk_spec
        self.head_spec = head_spec
        self.include_faces = include_faces
        self.distance_scale = np.ones(dim) if distance_scale is None else np.asarray(distance_scale, float)
        shift, scale = domain_normalisation(domain)
        self.input_shift = shift if input_shift is None else np.asarray(input_shift, float)
        self.input_scale = scale if input_scale is None else np.asarray(input_scale, float)
        self.partition: OverlapPartition = cs.enumerate_overlaps(self.constraints, domain, include_faces)
        self.heads = self._make_heads()
        c = len(self.constraints)
        entries = trunk_spec.layout("trunk/")
        for head in self.heads:
            entries += head.spec.layout(head.prefix)
        entries += [("prox/a", (c,)), ("prox/b", (c,))]
        self.params = ParamStore(entries)
        rng = np.random.default_rng(seed)
        glorot_init(trunk_spec, self.params, rng, "trunk/")
        for head in self.heads:
            glorot_init(head.spec, self.params, rng, head.prefix)
        init = default_params(domain.diagonal(self.distance_scale))
        self.params.set("prox/a", np.full(c, init.a))
        self.params.set("prox/b", np.full(c, init.b))
        self._bits = self.partition.bit_matrix()
        self._codes = {_code(k.bits): i for i, k in enumerate(self.partition.keys)}

    def _make_heads(self) -> list[ConstrainedPredictor]:
        heads, bad = [], []
        for key in self.partition.keys:
            active = [con.output_set for con, bit in zip(self.constraints, key.bits) if bit]
            try:
                codomain = cs.intersect_output_sets(active)
                codomain.check_arity(self.head_spec.n_out)
            except cs.SpecificationError as exc:
                bad.append((str(key), str(exc)))
                continue
            heads.append(ConstrainedPredictor(key, self.head_spec, codomain))
        if bad:
            detail = "; ".join(f"{k}: {msg}" for k, msg in bad)
            raise BuildError(f"infeasible overlap regions: {detail}", [k for k, _ in bad])
        return heads

    # -- accessors ---------------------------------------------------------

    @property
    def c(self) -> int:
        return len(self.constraints)

    @property
    def k(self) -> int:
        return self.partition.k

    @property
    def n_out(self) -> int:
        return self.head_spec.n_out

    def proximity_params(self) -> dict[str, ProximityParams]:
        a, b = self.params.get("prox/a"), self.params.get("prox/b")
        return {con.name: ProximityParams(float(a[i]), float(b[i])) for i, con in enumerate(self.constraints)}

    def set_proximity(self, name: str, params: ProximityParams):
        i = [con.name for con in self.constraints].index(name)
        self.params.get("prox/a")[i] = params.a
        self.params.get("prox/b")[i] = params.b

    # -- evaluation --------------------------------------------------------

    def precompute(self, x) -> np.ndarray:
        """Parameter-free part of the forward pass: scaled region distances (n, c)."""
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        if not self.constraints:
            return np.zeros((len(x), 0))
        return np.stack(
            [cs.region_distance(con.region, x, self.distance_scale) for con in self.constraints], axis=1
        )

    def proximities(self, dist, source=None):
        return proximity(dist, self.params.get("prox/a", source), self.params.get("prox/b", source))

    def key_indices(self, dist: np.ndarray) -> np.ndarray:
        """Index into the partition of each point's membership pattern."""
        member = dist == 0.0
        codes, inverse = np.unique(_codes_of(member), return_inverse=True)
        lookup = np.array([self._codes.get(int(code), -1) for code in codes], dtype=int)
        idx = lookup[inverse.reshape(-1)]
        if np.any(idx < 0):
            bad = member[idx < 0][0].astype(int)
            raise PartitionIntegrityError(
                f"membership pattern {''.join(map(str, bad))} has no constrained predictor"
            )
        return idx

    def _latent(self, x, source):
        z = (np.atleast_2d(np.asarray(x, dtype=np.float64)) - self.input_shift) * self.input_scale
        return forward(self.trunk_spec, self.params, z, source, "trunk/")

    def _head(self, head: ConstrainedPredictor, latent, source):
        raw = forward(head.spec, self.params, latent, source, head.prefix)
        return cs.project_output(head.codomain, raw)

    def head_outputs(self, x, source=None) -> list:
        latent = self._latent(x, source)
        return [self._head(h, latent, source) for h in self.heads]

    def constrained_forward(self, key, x, source=None):
        """G_b(x) for one key of the partition."""
        bits = key.bits if isinstance(key, OverlapKey) else tuple(key)
        i = self.partition.index_of(bits)
        if i is None:
            raise KeyError(f"key {bits} is not in the partition")
        return self._head(self.heads[i], self._latent(x, source), source)

    def weights(self, x=None, dist=None, source=None):
        if dist is None:
            dist = self.precompute(x)
        return _weights(self.proximities(dist, source), self._bits)

    def forward(self, x, source=None, cache=None):
        """F(x) for a batch; ``cache`` is the output of :meth:`precompute` for ``x``."""
        dist = self.precompute(x) if cache is None else cache
        key_idx = self.key_indices(dist)
        heads = self.head_outputs(x, source)
        if self.k == 1:
            return heads[0]
        g = ad.stack(heads, axis=1)  # (n, k, m)
        w = _weights(self.proximities(dist, source), self._bits)  # (n, k)
        n, k = ad.value_of(w).shape
        num = ad.sum(ad.reshape(w, (n, k, 1)) * g, axis=1)
        den = ad.sum(w, axis=1)
        under = ad.value_of(den) < UNDERFLOW
        blended = num / ad.reshape(ad.where(under, 1.0, den), (n, 1))
        if not under.any():
            return blended
        own = g[np.arange(n), key_idx]
        return ad.where(under[:, None], own, blended)

    def __call__(self, x) -> np.ndarray:
        return self.forward(x)

    # -- reporting and persistence -----------------------------------------

    def describe(self) -> dict:
        head_params = self.head_spec.n_params
        return {
            "n_constraints": self.c,
            "k": self.k,
            "keys": [str(h.key) for h in self.heads],
            "codomains": {str(h.key): h.codomain.to_json() for h in self.heads},
            "parameters": {
                "trunk": self.trunk_spec.n_params,
                "per_head": head_params,
                "heads": head_params * self.k,
                "proximity": 2 * self.c,
                "total": self.params.size,
            },
            "hidden_nodes": self.trunk_spec.hidden_nodes + self.k * self.head_spec.hidden_nodes,
        }

    def spec_hash(self) -> str:
        return cs.spec_hash(self.constraints, self.domain)

    def to_json(self) -> dict:
        return {
            "format_version": MODEL_FORMAT_VERSION,
            "kind": self.kind,
            "trunk_spec": self.trunk_spec.to_json(),
            "head_specs": [
                {"key": str(h.key), "spec": h.spec.to_json(), "codomain": h.codomain.to_json()}
                for h in self.heads
            ],
            "constraint_spec": cs.dump_constraints(self.constraints, self.domain),
            "constraint_spec_hash": self.spec_hash(),
            "include_faces": self.include_faces,
            "distance_scale": self.distance_scale.tolist(),
            "input_shift": self.input_shift.tolist(),
            "input_scale": self.input_scale.tolist(),
            "proximity_params": {
                name: {"a": p.a, "b": p.b} for name, p in self.proximity_params().items()
            },
            "params": self.params.values.tolist(),
        }

    @classmethod
    def from_json(cls, obj: dict) -> "SafePredictorModel":
        trunk = DenseNetSpec.from_json(_field(obj, "trunk_spec", dict), "trunk_spec")
        heads = _field(obj, "head_specs", list)
        if not heads:
            raise ModelFormatError("head_specs", "empty")
        try:
            head = DenseNetSpec.from_json(heads[0]["spec"], "head_specs[0].spec")
        except (KeyError, TypeError) as exc:
            raise ModelFormatError("head_specs[0]", str(exc)) from exc
        try:
            constraints, domain = cs.load_constraints(_field(obj, "constraint_spec", dict))
        except cs.SpecificationError as exc:
            raise ModelFormatError("constraint_spec", str(exc)) from exc
        if cs.spec_hash(constraints, domain) != obj.get("constraint_spec_hash"):
            raise ModelFormatError("constraint_spec_hash", "does not match the embedded constraints")
        dim = domain.dim
        model = cls(
            constraints,
            domain,
            trunk,
            head,
            distance_scale=_float_array(obj, "distance_scale", (dim,)),
            input_shift=_float_array(obj, "input_shift", (dim,)),
            input_scale=_float_array(obj, "input_scale", (dim,)),
            include_faces=bool(obj.get("include_faces", True)),
        )
        stored_keys = [h.get("key") if isinstance(h, dict) else None for h in heads]
        if stored_keys != [str(h.key) for h in model.heads]:
            raise ModelFormatError("head_specs", "keys do not match the enumerated partition")
        model.params.values[:] = _float_array(obj, "params", (model.params.size,))
        prox = _field(obj, "proximity_params", dict)
        for name, p in model.proximity_params().items():
            entry = prox.get(name)
            if not isinstance(entry, dict) or "a" not in entry or "b" not in entry:
                raise ModelFormatError(f"proximity_params.{name}", "missing a/b")
            if float(entry["a"]) != p.a or float(entry["b"]) != p.b:
                raise ModelFormatError(f"proximity_params.{name}", "disagrees with params")
        return model


def build_safe_predictor(
    constraints: Sequence[ConstraintSpec],
    domain: InputRegion,
    trunk_spec: DenseNetSpec,
    head_spec: DenseNetSpec,
    seed: int = 0,
    **kwargs,
) -> SafePredictorModel:
    return SafePredictorModel(constraints, domain, trunk_spec, head_spec, seed, **kwargs)


def safe_forward(model: SafePredictorModel, x) -> np.ndarray:
    return model.forward(x)


def constrained_forward(model: SafePredictorModel, key, x) -> np.ndarray:
    return model.constrained_forward(key, x)


def _named(constraints: Sequence[ConstraintSpec]) -> list[ConstraintSpec]:
    out, seen = [], set()
    for i, con in enumerate(constraints):
        name = con.name or f"c{i}"
        if name in seen:
            raise cs.SpecificationError(f"duplicate constraint name {name!r}")
        seen.add(name)
        out.append(con if con.name == name else ConstraintSpec(con.region, con.output_set, name))
    return out


def _code(bits) -> int:
    return int(sum(int(b) << i for i, b in enumerate(bits)))


def _codes_of(bits: np.ndarray) -> np.ndarray:
    if bits.shape[1] > 62:
        raise ValueError("at most 62 constraints are supported")
    weights = np.left_shift(np.int64(1), np.arange(bits.shape[1], dtype=np.int64))
    return bits.astype(np.int64) @ weights if bits.shape[1] else np.zeros(len(bits), dtype=np.int64)
