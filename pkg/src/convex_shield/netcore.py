"""Dense ReLU networks over a flat parameter vector, plus model files."""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tape

MODEL_FORMAT_VERSION = 1


class ModelFormatError(ValueError):
    """A model file that cannot be decoded; ``path`` names the offending field."""

    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}")
        self.path = path


@dataclass(frozen=True)
class DenseNetSpec:
    """Affine layers with ReLU between them.

    ``relu_output`` also rectifies the last layer, which is what a shared trunk
    wants; heads and standalone networks leave it off.
    """

    layer_dims: tuple[int, ...]
    relu_output: bool = False

    def __post_init__(self):
        dims = tuple(int(d) for d in self.layer_dims)
        if len(dims) < 2 or any(d <= 0 for d in dims):
            raise ValueError(f"layer_dims needs >= 2 positive entries, got {self.layer_dims}")
        object.__setattr__(self, "layer_dims", dims)

    @property
    def n_in(self) -> int:
        return self.layer_dims[0]

    @property
    def n_out(self) -> int:
        return self.layer_dims[-1]

    @property
    def n_params(self) -> int:
        return sum((i + 1) * o for i, o in zip(self.layer_dims[:-1], self.layer_dims[1:]))

    @property
    def hidden_nodes(self) -> int:
        inner = list(self.layer_dims[1:-1])
        if self.relu_output:
            inner.append(self.layer_dims[-1])
        return sum(inner)

    def layout(self, prefix: str = "") -> list[tuple[str, tuple[int, ...]]]:
        out = []
        for l, (i, o) in enumerate(zip(self.layer_dims[:-1], self.layer_dims[1:])):
            out.append((f"{prefix}{l}/W", (i, o)))
            out.append((f"{prefix}{l}/b", (o,)))
        return out

    def to_json(self) -> dict:
        return {"layer_dims": list(self.layer_dims), "relu_output": self.relu_output}

    @classmethod
    def from_json(cls, obj, path="spec") -> "DenseNetSpec":
        try:
            return cls(tuple(obj["layer_dims"]), bool(obj.get("relu_output", False)))
        except (KeyError, TypeError, ValueError) as exc:
            raise ModelFormatError(path, str(exc)) from exc


class ParamStore:
    """Flat float64 vector with named, shaped slices (weights are (fan_in, fan_out), row-major)."""

    def __init__(self, entries: Sequence[tuple[str, tuple[int, ...]]], values=None):
        self.offsets: dict[str, tuple[int, tuple[int, ...]]] = {}
        pos = 0
        for name, shape in entries:
            if name in self.offsets:
                raise ValueError(f"duplicate parameter name {name!r}")
            self.offsets[name] = (pos, tuple(shape))
            pos += int(np.prod(shape, dtype=int))
        self.size = pos
        if values is None:
            values = np.zeros(pos)
        values = np.asarray(values, dtype=np.float64)
        if values.shape != (pos,):
            raise ValueError(f"expected {pos} parameters, got {values.shape}")
        self.values = values.copy()

    def entries(self):
        return [(name, shape) for name, (_, shape) in self.offsets.items()]

    def get(self, name: str, source=None):
        """Shaped parameter ``name``; from ``source`` (leaves from :meth:`watch`) if given."""
        if source is not None:
            return source[name]
        off, shape = self.offsets[name]
        size = int(np.prod(shape, dtype=int))
        return self.values[off : off + size].reshape(shape)

    def watch(self, tape: Tape) -> dict:
        """One tape leaf per named entry."""
        return {name: tape.watch(self.get(name)) for name in self.offsets}

    def flat_gradient(self, grads: dict, leaves: dict) -> np.ndarray:
        out = np.zeros(self.size)
        for name, (off, shape) in self.offsets.items():
            g = grads.get(leaves[name].index)
            if g is not None:
                out[off : off + g.size] = g.reshape(-1)
        return out

    def set(self, name: str, value):
        off, shape = self.offsets[name]
        size = int(np.prod(shape, dtype=int))
        self.values[off : off + size] = np.asarray(value, dtype=np.float64).reshape(size)

    def copy(self) -> "ParamStore":
        return ParamStore(self.entries(), self.values)


def glorot_init(spec: DenseNetSpec, store: ParamStore, rng: np.random.Generator, prefix=""):
    for l, (i, o) in enumerate(zip(spec.layer_dims[:-1], spec.layer_dims[1:])):
        limit = np.sqrt(6.0 / (i + o))
        store.set(f"{prefix}{l}/W", rng.uniform(-limit, limit, size=(i, o)))
        store.set(f"{prefix}{l}/b", np.zeros(o))


def forward(spec: DenseNetSpec, params: ParamStore, x, source=None, prefix=""):
    """Evaluate the network on a batch ``x`` of shape (n, n_in).

    Pass the leaves from ``params.watch(tape)`` as ``source`` to record the
    computation; otherwise plain arrays flow through.
    """
    xv = ad.value_of(x)
    if xv.ndim != 2 or xv.shape[1] != spec.n_in:
        raise ValueError(f"input shape {xv.shape} does not match n_in={spec.n_in}")
    h = x
    n_layers = len(spec.layer_dims) - 1
    for l in range(n_layers):
        h = ad.affine(h, params.get(f"{prefix}{l}/W", source), params.get(f"{prefix}{l}/b", source))
        if l < n_layers - 1 or spec.relu_output:
            h = ad.relu(h)
    return h


def backward(tape: Tape, output, params: ParamStore, leaves: dict, seed=None) -> np.ndarray:
    """Gradient of ``output`` as a vector aligned with ``params.values``."""
    return params.flat_gradient(tape.backward(output, seed), leaves)


def domain_normalisation(domain) -> tuple[np.ndarray, np.ndarray]:
    """Shift and scale taking the domain's bounding box onto [-1, 1] per axis."""
    bb = domain.bounding_box()
    lo, hi = bb.lo[0], bb.hi[0]
    return (lo + hi) / 2, 2.0 / np.where(hi > lo, hi - lo, 1.0)


class StandardNetwork:
    """Unconstrained baseline: one dense network with fixed input normalisation."""

    kind = "standard"

    def __init__(self, spec: DenseNetSpec, input_shift=None, input_scale=None, seed: int = 0):
        self.spec = spec
        self.input_shift = np.zeros(spec.n_in) if input_shift is None else np.asarray(input_shift, float)
        self.input_scale = np.ones(spec.n_in) if input_scale is None else np.asarray(input_scale, float)
        self.params = ParamStore(spec.layout())
        glorot_init(spec, self.params, np.random.default_rng(seed))

    @classmethod
    def for_domain(cls, spec: DenseNetSpec, domain, seed: int = 0) -> "StandardNetwork":
        """Network whose inputs are mapped from the domain's bounding box onto [-1, 1]."""
        shift, scale = domain_normalisation(domain)
        return cls(spec, shift, scale, seed)

    def normalise(self, x):
        return (np.atleast_2d(np.asarray(x, dtype=np.float64)) - self.input_shift) * self.input_scale

    def forward(self, x, source=None, cache=None):
        return forward(self.spec, self.params, self.normalise(x), source)

    def __call__(self, x) -> np.ndarray:
        return self.forward(x)

    def precompute(self, x):
        return None

    def to_json(self) -> dict:
        return {
            "format_version": MODEL_FORMAT_VERSION,
            "kind": self.kind,
            "trunk_spec": self.spec.to_json(),
            "head_specs": [],
            "input_shift": self.input_shift.tolist(),
            "input_scale": self.input_scale.tolist(),
            "params": self.params.values.tolist(),
        }

    @classmethod
    def from_json(cls, obj: dict) -> "StandardNetwork":
        spec = DenseNetSpec.from_json(_field(obj, "trunk_spec", dict), "trunk_spec")
        net = cls(
            spec,
            _float_array(obj, "input_shift", (spec.n_in,)),
            _float_array(obj, "input_scale", (spec.n_in,)),
        )
        net.params.values[:] = _float_array(obj, "params", (net.params.size,))
        return net


def _field(obj, name, kind):
    if name not in obj:
        raise ModelFormatError(name, "missing")
    if not isinstance(obj[name], kind):
        raise ModelFormatError(name, f"expected {kind.__name__}")
    return obj[name]


def _float_array(obj, name, shape):
    raw = _field(obj, name, list)
    try:
        arr = np.asarray(raw, dtype=np.float64)
    except (TypeError, ValueError) as exc:
        raise ModelFormatError(name, f"not numeric ({exc})") from exc
    if arr.shape != tuple(shape):
        raise ModelFormatError(name, f"expected shape {tuple(shape)}, got {arr.shape}")
    return arr


def serialize_model(model) -> bytes:
    # json writes floats with repr(), which round-trips float64 exactly
    return json.dumps(model.to_json(), indent=1, sort_keys=True).encode()


def deserialize_model(data: bytes | str):
    from .safepredictor import SafePredictorModel

    try:
        obj = json.loads(data)
    except json.JSONDecodeError as exc:
        raise ModelFormatError("$", f"invalid JSON ({exc.msg})") from exc
    if not isinstance(obj, dict):
        raise ModelFormatError("$", "expected an object")
    version = obj.get("format_version")
    if version != MODEL_FORMAT_VERSION:
        raise ModelFormatError("format_version", f"expected {MODEL_FORMAT_VERSION}, found {version!r}")
    kind = obj.get("kind")
    if kind == "standard":
        return StandardNetwork.from_json(obj)
    if kind == "safe":
        return SafePredictorModel.from_json(obj)
    raise ModelFormatError("kind", f"unknown model kind {kind!r}")
