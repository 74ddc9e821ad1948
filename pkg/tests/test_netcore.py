import json

import numpy as np
import pytest

from convex_shield import autodiff as ad
from convex_shield.autodiff import Tape
from convex_shield.constraints import InputRegion
from convex_shield.netcore import (
    DenseNetSpec,
    ModelFormatError,
    ParamStore,
    StandardNetwork,
    backward,
    deserialize_model,
    forward,
    glorot_init,
    serialize_model,
)
from helpers import central_difference, rel_error


def store_for(spec, seed=0):
    p = ParamStore(spec.layout())
    glorot_init(spec, p, np.random.default_rng(seed))
    return p


def test_param_count_and_layout():
    spec = DenseNetSpec((3, 45, 45, 9))
    assert spec.n_params == 4 * 45 + 46 * 45 + 46 * 9
    assert ParamStore(spec.layout()).size == spec.n_params
    assert spec.hidden_nodes == 90
    with pytest.raises(ValueError):
        DenseNetSpec((3,))


def test_zero_params_give_zero_output():
    spec = DenseNetSpec((4, 7, 2))
    out = forward(spec, ParamStore(spec.layout()), np.random.default_rng(0).normal(size=(5, 4)))
    assert np.array_equal(out, np.zeros((5, 2)))


def test_hand_computed_outputs():
    spec = DenseNetSpec((1, 1))
    p = ParamStore(spec.layout(), [2.0, -1.0])
    assert forward(spec, p, np.array([[3.0]]))[0, 0] == 5.0
    deep = DenseNetSpec((1, 1, 1))
    q = ParamStore(deep.layout(), [1.0, 0.0, 1.0, 0.0])
    assert forward(deep, q, np.array([[-4.0]]))[0, 0] == 0.0


def test_input_dimension_checked():
    spec = DenseNetSpec((2, 3))
    with pytest.raises(ValueError):
        forward(spec, ParamStore(spec.layout()), np.zeros((4, 3)))


def test_glorot_bounds():
    spec = DenseNetSpec((10, 30, 5))
    p = store_for(spec)
    w = p.get("0/W")
    assert np.abs(w).max() <= np.sqrt(6 / 40) and np.abs(w).max() > 0.8 * np.sqrt(6 / 40)
    assert np.all(p.get("0/b") == 0)


def test_gradients_match_finite_differences():
    rng = np.random.default_rng(3)
    spec = DenseNetSpec((3, 6, 2))
    for trial in range(100):
        p = store_for(spec, trial)
        p.values += rng.normal(scale=0.1, size=p.size)  # non-zero biases
        x = rng.normal(size=(4, 3))
        target = rng.normal(size=(4, 2))

        def loss(v):
            q = ParamStore(spec.layout(), v)
            return float(np.mean((forward(spec, q, x) - target) ** 2))

        tape = Tape()
        leaves = p.watch(tape)
        out = ad.mean(ad.square(forward(spec, p, x, leaves) - target))
        g = backward(tape, out, p, leaves)
        assert rel_error(g, central_difference(loss, p.values, 1e-5)) <= 1e-4


def test_gradient_through_logistic_head(rng):
    spec = DenseNetSpec((2, 5, 1))
    p = store_for(spec, 1)
    x = rng.normal(size=(6, 2))

    def f(v, source=None):
        q = ParamStore(spec.layout(), v) if source is None else p
        return 0.7 + 0.3 * ad.logistic(forward(spec, q, x, source))

    tape = Tape()
    leaves = p.watch(tape)
    g = backward(tape, ad.sum(f(None, leaves)), p, leaves)
    fd = central_difference(lambda v: float(np.sum(f(v))), p.values, 1e-5)
    assert rel_error(g, fd) <= 1e-4


def test_backward_seed_arity():
    spec = DenseNetSpec((2, 2))
    p = store_for(spec)
    tape = Tape()
    leaves = p.watch(tape)
    out = forward(spec, p, np.ones((3, 2)), leaves)
    with pytest.raises(ValueError):
        backward(tape, out, p, leaves, seed=np.ones((3, 5)))
    g = backward(tape, out, p, leaves, seed=np.ones((3, 2)))
    assert g.shape == (p.size,)


def test_deterministic_and_tape_independent(rng):
    spec = DenseNetSpec((3, 8, 8, 2))
    p = store_for(spec, 5)
    x = rng.normal(size=(10, 3))
    a = forward(spec, p, x)
    b = forward(spec, p, x)
    tape = Tape()
    c = forward(spec, p, x, p.watch(tape)).value
    assert np.array_equal(a, b) and np.array_equal(a, c)


def test_standard_round_trip_is_bit_exact(rng):
    domain = InputRegion.box((-2, 2), (0, 5))
    net = StandardNetwork.for_domain(DenseNetSpec((2, 9, 3)), domain, seed=4)
    net.params.values += rng.normal(scale=1e-3, size=net.params.size)
    back = deserialize_model(serialize_model(net))
    assert np.array_equal(back.params.values, net.params.values)
    x = rng.uniform(-2, 2, size=(20, 2))
    assert np.array_equal(back(x), net(x))
    assert serialize_model(back) == serialize_model(net)


@pytest.mark.parametrize(
    "mutate,path",
    [
        (lambda o: o.update(format_version=7), "format_version"),
        (lambda o: o.update(kind="mystery"), "kind"),
        (lambda o: o.pop("params"), "params"),
        (lambda o: o.update(params=o["params"][:-1]), "params"),
        (lambda o: o.update(params=["x"] * len(o["params"])), "params"),
        (lambda o: o.update(trunk_spec={"layer_dims": "abc"}), "trunk_spec"),
        (lambda o: o.update(input_scale=[1.0]), "input_scale"),
    ],
)
def test_corrupt_model_names_the_field(mutate, path):
    net = StandardNetwork(DenseNetSpec((2, 3, 1)))
    obj = json.loads(serialize_model(net))
    mutate(obj)
    with pytest.raises(ModelFormatError) as err:
        deserialize_model(json.dumps(obj))
    assert err.value.path == path


def test_garbage_bytes_rejected():
    with pytest.raises(ModelFormatError):
        deserialize_model(b"{not json")
