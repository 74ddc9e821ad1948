import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from convex_shield.constraints import (
    ConstraintSpec,
    ConvexOutputSet,
    InputRegion,
    OverlapKey,
    overlap_key_of,
    region_contains,
)
from convex_shield.netcore import DenseNetSpec, ModelFormatError, StandardNetwork, deserialize_model, serialize_model
from convex_shield.proximity import ProximityParams
from convex_shield.safepredictor import (
    BuildError,
    SafePredictorModel,
    build_safe_predictor,
    constrained_forward,
    safe_forward,
    weight_eval,
)

TRUNK_1D = DenseNetSpec((1, 6), relu_output=True)
HEAD_1D = DenseNetSpec((6, 1))


def const_head(model, key, raw):
    """Make head ``key`` emit the constant pre-projection value ``raw``."""
    prefix = f"head/{key}/"
    model.params.set(prefix + "0/W", np.zeros(model.params.get(prefix + "0/W").shape))
    model.params.set(prefix + "0/b", [raw])


def test_weight_examples():
    prox = [[0.0, 0.5]]
    assert weight_eval(prox, [[1, 0]])[0, 0] == 0.5
    assert weight_eval(prox, [[0, 1]])[0, 0] == 0.0
    assert weight_eval([[0.0, 0.0, 0.0]], [[1, 1, 1]])[0, 0] == 1.0


@given(st.lists(st.floats(0, 1), min_size=1, max_size=5))
def test_weights_over_all_keys_sum_to_one(prox):
    import itertools

    c = len(prox)
    keys = np.array(list(itertools.product((0, 1), repeat=c)))
    w = weight_eval([prox], keys)
    assert np.all((w >= 0) & (w <= 1))
    assert w.sum() == pytest.approx(1.0, abs=1e-12)


def one_constraint_model(out_set=None):
    cons = [ConstraintSpec(InputRegion.box((0.0, 1.0)), out_set or ConvexOutputSet.above(0.0), "A1")]
    return SafePredictorModel(cons, InputRegion.box((-3.0, 3.0)), TRUNK_1D, HEAD_1D, seed=2)


def test_deep_inside_gives_the_constrained_head_exactly(rng):
    m = one_constraint_model()
    x = rng.uniform(0.0, 1.0, size=(50, 1))
    assert np.array_equal(m(x), m.constrained_forward("1", x) if False else m.constrained_forward(OverlapKey((1,)), x))


def test_half_proximity_blends_evenly():
    m = one_constraint_model()
    d = 0.8
    m.set_proximity("A1", ProximityParams.from_sigmas(d / np.sqrt(np.log(2.0)), 2.0))
    const_head(m, "0", 0.2)
    const_head(m, "1", np.log(np.expm1(0.4)))  # softplus^-1(0.4)
    x = np.array([[1.0 + d]])
    assert m.weights(x)[0] == pytest.approx([0.5, 0.5], abs=1e-12)
    assert m(x)[0, 0] == pytest.approx(0.3, abs=1e-12)


def test_blend_inside_a_constrained_region():
    cons = [
        ConstraintSpec(InputRegion.box((0.0, 1.0)), ConvexOutputSet.interval(0.7, 1.0), "A1"),
        ConstraintSpec(InputRegion.box((1.5, 2.0)), ConvexOutputSet.interval(0.5, 0.8), "A2"),
        ConstraintSpec(InputRegion.box((0.9, 1.6)), ConvexOutputSet.unconstrained(), "wide"),
    ]
    m = SafePredictorModel(cons, InputRegion.box((-1.0, 3.0)), TRUNK_1D, HEAD_1D)
    x = np.array([[0.5]])  # in A1 only; wide is 0.4 away, A2 is 1.0 away
    m.set_proximity("A2", ProximityParams.from_sigmas(100.0, 2.0))  # far: proximity ~ 1e-4
    m.set_proximity("A2", ProximityParams(np.log(1.0 / np.sqrt(-np.log(1e-300 + 0.0) * 0 + 1e30)), 0.0))
    # make the wide region's proximity exactly one half at x
    m.set_proximity("wide", ProximityParams.from_sigmas(0.4 / np.sqrt(np.log(2.0)), 2.0))
    w = dict(zip((str(k) for k in m.partition.keys), m.weights(x)[0]))
    assert w["100"] == pytest.approx(0.5, abs=1e-12) and w["101"] == pytest.approx(0.5, abs=1e-12)
    # heads 100 and 101 map into (0.7, 1): 0.8 and 0.75
    const_head(m, "100", np.log(0.1 / 0.2))  # 0.7 + 0.3 * logistic(raw) = 0.8
    const_head(m, "101", np.log(0.05 / 0.25))  # = 0.75
    out = m(x)[0, 0]
    assert out == pytest.approx(0.775, abs=1e-12)
    assert 0.7 < out < 1.0


def test_constrained_forward_codomains(rng):
    m = one_constraint_model(ConvexOutputSet.interval(0.7, 1.0))
    m.params.values[:] = rng.normal(scale=50, size=m.params.size)
    x = rng.uniform(-3, 3, size=(200, 1))
    g1 = constrained_forward(m, OverlapKey((1,)), x)
    assert np.all((g1 >= 0.7) & (g1 <= 1.0))  # saturation may round onto the edge
    raw = m._head(m.heads[0], m._latent(x, None), None)
    assert np.array_equal(constrained_forward(m, OverlapKey((0,)), x), raw)


def test_score_head_rule(rng):
    cons = [ConstraintSpec(InputRegion.box((0, 1), (0, 1)), ConvexOutputSet.score_not_highest((3,), 1e-4), "u")]
    m = SafePredictorModel(cons, InputRegion.box((0, 2), (0, 2)), DenseNetSpec((2, 8), True), DenseNetSpec((8, 5)))
    x = rng.uniform(0, 2, size=(100, 2))
    g = m.constrained_forward(OverlapKey((1,)), x)
    safe = np.delete(g, 3, axis=1)
    assert np.array_equal(g[:, 3], safe.min(axis=1) - 1e-4)


def test_fig3_layout_has_four_heads():
    cons = [
        ConstraintSpec(InputRegion.box((0.1, 0.45), (0.3, 0.7)), ConvexOutputSet.interval(0.7, 1.0), "A1"),
        ConstraintSpec(InputRegion.box((0.35, 0.7), (0.3, 0.7)), ConvexOutputSet.interval(0.5, 0.8), "A2"),
    ]
    m = build_safe_predictor(cons, InputRegion.box((0, 1), (0, 1)), DenseNetSpec((2, 20, 20), True), DenseNetSpec((20, 20, 1)))
    assert m.k == 4
    assert [str(h.key) for h in m.heads] == ["00", "10", "01", "11"]
    assert m.heads[3].codomain == ConvexOutputSet.interval(0.7, 0.8)
    d = m.describe()
    assert d["k"] == 4 and d["parameters"]["total"] == m.params.size
    assert d["hidden_nodes"] == 40 + 4 * 20


def test_no_constraints_is_a_plain_network(rng):
    domain = InputRegion.box((-1, 1), (0, 4))
    trunk, head = DenseNetSpec((2, 7, 5), True), DenseNetSpec((5, 6, 3))
    m = SafePredictorModel([], domain, trunk, head, seed=3)
    assert m.k == 1
    net = StandardNetwork.for_domain(DenseNetSpec((2, 7, 5, 6, 3)), domain)
    flat = np.concatenate([m.params.get(n).ravel() for n, _ in m.params.entries() if not n.startswith("prox")])
    net.params.values[:] = flat
    x = rng.uniform([-1, 0], [1, 4], size=(40, 2))
    assert np.array_equal(m(x), net(x))


def test_infeasible_overlap_lists_keys():
    cons = [
        ConstraintSpec(InputRegion.box((0, 2)), ConvexOutputSet.interval(0, 0.2), "lo"),
        ConstraintSpec(InputRegion.box((1, 3)), ConvexOutputSet.interval(0.5, 1), "hi"),
    ]
    with pytest.raises(BuildError) as err:
        SafePredictorModel(cons, InputRegion.box((0, 3)), TRUNK_1D, HEAD_1D)
    assert err.value.keys == ("11",)


def test_underflowing_denominator_falls_back_to_own_head():
    gap = 1e-160
    cons = [
        ConstraintSpec(InputRegion.box((-1.0, 0.0)), ConvexOutputSet.interval(0.0, 0.1), "A1"),
        ConstraintSpec(InputRegion.box((gap, 1.0)), ConvexOutputSet.interval(0.9, 1.0), "A2"),
    ]
    m = SafePredictorModel(cons, InputRegion.box((-2.0, 2.0)), TRUNK_1D, HEAD_1D)
    x = np.array([[0.0]])
    assert m.weights(x).sum() < 1e-300
    assert np.array_equal(m(x), m.constrained_forward(OverlapKey((1, 0)), x))


# -- the safety property under arbitrary parameters ---------------------------

box_1d = st.tuples(st.floats(-2, 2), st.floats(0.01, 1.5)).map(lambda t: (t[0], t[0] + t[1]))


@given(
    st.lists(box_1d, min_size=1, max_size=3),
    st.integers(0, 2**31),
    st.floats(0.1, 30.0),
)
def test_safe_for_any_parameters(boxes, seed, scale):
    lo = 0.05 * np.arange(len(boxes))
    cons = [
        ConstraintSpec(InputRegion.box(b), ConvexOutputSet.interval(l, 1.0 - l), f"c{i}")
        for i, (b, l) in enumerate(zip(boxes, lo))
    ]
    m = SafePredictorModel(cons, InputRegion.box((-3.0, 4.0)), TRUNK_1D, HEAD_1D, seed=seed)
    rng = np.random.default_rng(seed)
    m.params.values[:] = rng.normal(scale=scale, size=m.params.size)
    edges = np.array([v for b in boxes for v in b] + [np.nextafter(v, np.inf) for b in boxes for v in b])
    x = np.concatenate([np.linspace(-3, 4, 701), edges])[:, None]
    y = m(x)[:, 0]
    for con in cons:
        inside = region_contains(con.region, x)
        assert np.all(con.output_set.contains(y[inside][:, None], 1e-9))
    # every head that carries weight covers all constraints applying at x
    w = m.weights(x)
    bits = m.partition.bit_matrix().astype(bool)
    applies = np.stack([region_contains(c.region, x) for c in cons], axis=1)
    for wi, ai in zip(w, applies):
        assert np.all(bits[wi > 0][:, ai])


def test_output_stays_within_heads_with_weight(rng):
    cons = [
        ConstraintSpec(InputRegion.box((0, 1), (0, 1)), ConvexOutputSet.unconstrained(), "a"),
        ConstraintSpec(InputRegion.box((0.5, 2), (0.5, 2)), ConvexOutputSet.unconstrained(), "b"),
    ]
    m = SafePredictorModel(cons, InputRegion.box((-1, 3), (-1, 3)), DenseNetSpec((2, 5), True), DenseNetSpec((5, 2)))
    x = rng.uniform(-1, 3, size=(300, 2))
    g = np.stack(m.head_outputs(x), axis=1)
    w = m.weights(x)
    f = m(x)
    for i in range(len(x)):
        live = g[i, w[i] > 0]
        assert np.all(f[i] >= live.min(axis=0) - 1e-12) and np.all(f[i] <= live.max(axis=0) + 1e-12)


# -- persistence -------------------------------------------------------------------


def fig3_model():
    cons = [
        ConstraintSpec(InputRegion.box((0.1, 0.45), (0.3, 0.7)), ConvexOutputSet.interval(0.7, 1.0), "A1"),
        ConstraintSpec(InputRegion.box((0.35, 0.7), (0.3, 0.7)), ConvexOutputSet.interval(0.5, 0.8), "A2"),
    ]
    return SafePredictorModel(cons, InputRegion.box((0, 1), (0, 1)), DenseNetSpec((2, 4), True), DenseNetSpec((4, 1)), seed=9)


def test_round_trip_is_bit_exact(rng):
    m = fig3_model()
    m.params.values += rng.normal(scale=0.01, size=m.params.size)
    back = deserialize_model(serialize_model(m))
    assert isinstance(back, SafePredictorModel)
    assert np.array_equal(back.params.values, m.params.values)
    x = rng.uniform(0, 1, size=(100, 2))
    assert np.array_equal(back(x), m(x))
    assert back.proximity_params() == m.proximity_params()


@pytest.mark.parametrize(
    "mutate,path",
    [
        (lambda o: o.update(constraint_spec_hash="0" * 64), "constraint_spec_hash"),
        (lambda o: o["proximity_params"]["A1"].update(a=123.0), "proximity_params.A1"),
        (lambda o: o["head_specs"].reverse(), "head_specs"),
        (lambda o: o["constraint_spec"].update(format_version=3), "constraint_spec"),
    ],
)
def test_corrupt_safe_model(mutate, path):
    obj = json.loads(serialize_model(fig3_model()))
    mutate(obj)
    with pytest.raises(ModelFormatError) as err:
        deserialize_model(json.dumps(obj))
    assert err.value.path == path


def test_safe_forward_wrapper_matches_call(rng):
    m = fig3_model()
    x = rng.uniform(0, 1, size=(10, 2))
    assert np.array_equal(safe_forward(m, x), m(x))
    assert str(overlap_key_of(m.constraints, x[0])) in {str(k) for k in m.partition.keys}
