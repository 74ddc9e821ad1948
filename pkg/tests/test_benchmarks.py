import hashlib
import io
from fractions import Fraction

import numpy as np
import pytest

from convex_shield.benchmarks import (
    ADVISORIES,
    CasLiteGrid,
    CasLiteParams,
    caslite_dataset,
    caslite_domain,
    caslite_solve,
    caslite_tables,
    caslite_unsafeable,
    gen_synthetic_1d,
    gen_synthetic_2d,
    generate,
    probe_set,
)
from convex_shield.benchmarks.caslite import distance_scale
from convex_shield.benchmarks.synthetic import DOMAIN_2D, truth_1d
from convex_shield.constraints import (
    ConvexOutputSet,
    enumerate_overlaps,
    intersect_output_sets,
    overlap_key_of,
    region_contains,
    region_distance,
)

GRID = CasLiteGrid()
FT = Fraction(25, 3)  # one lattice unit in ft (or ft/s)


@pytest.fixture(scope="module")
def tables():
    return caslite_tables()


# -- synthetic ---------------------------------------------------------------------


def test_synthetic_1d():
    ds, cons = gen_synthetic_1d(100, seed=0)
    assert len(ds) == 100 and np.all(np.abs(ds.inputs) <= 2)
    assert region_contains(cons[0].region, [0.001]) and not region_contains(cons[0].region, [-0.001])
    assert cons[0].output_set == ConvexOutputSet.above(0.0)
    assert truth_1d(0.0) == 0.0
    with pytest.raises(ValueError):
        gen_synthetic_1d(1)


def csv_digest(ds):
    buf = io.StringIO()
    np.savetxt(buf, np.hstack([ds.inputs, ds.targets]), fmt="%r")
    return hashlib.sha256(buf.getvalue().encode()).hexdigest()


@pytest.mark.parametrize("gen", [gen_synthetic_1d, gen_synthetic_2d])
def test_synthetic_is_seeded(gen):
    assert csv_digest(gen(100, seed=0)[0]) == csv_digest(gen(100, seed=0)[0])
    assert csv_digest(gen(100, seed=0)[0]) != csv_digest(gen(100, seed=1)[0])


def test_synthetic_2d_layout():
    ds, cons = gen_synthetic_2d(400)
    assert np.all((ds.inputs >= 0) & (ds.inputs <= 1))
    part = enumerate_overlaps(cons, DOMAIN_2D)
    assert [str(k) for k in part.keys] == ["00", "10", "01", "11"]
    both = intersect_output_sets([c.output_set for c in cons])
    assert both == ConvexOutputSet.interval(0.7, 0.8)
    assert str(overlap_key_of(cons, [0.4, 0.5])) == "11"
    with pytest.raises(ValueError):
        gen_synthetic_2d(3)


# -- the CAS-lite oracle -------------------------------------------------------------
# Written straight from the model description: whole-number lattice, rates in
# units of 500 ft/min, exact rational rewards and full forward enumeration.

LIMITS = {  # compliant rate range in lattice units (500 ft/min each)
    "COC": (None, None), "DNC": (None, 0), "DND": (0, None),
    "DES1500": (None, -3), "CL1500": (3, None), "SDES1500": (None, -3),
    "SCL1500": (3, None), "SDES2500": (None, -5), "SCL2500": (5, None),
}
H_MAX, V_MAX = 240, 5


def choices(adv, v, response):
    lo, hi = LIMITS[ADVISORIES[adv]]
    if lo is not None and v < lo:
        return [1]
    if hi is not None and v > hi:
        return [-1]
    if response == "hold":
        return [0]
    ok = lambda w: (lo is None or w >= lo) and (hi is None or w <= hi)  # noqa: E731
    return [a for a in (-1, 0, 1) if ok(max(-V_MAX, min(V_MAX, v + a)))]


def step(h, v, a):
    return max(-H_MAX, min(H_MAX, h - v)), max(-V_MAX, min(V_MAX, v + a))


def reward(prev, adv):
    r = Fraction(0)
    if adv != 0:
        r -= Fraction(1, 100)
    if adv != prev:
        r -= Fraction(2, 100)
    return r


def best_future(prev, h, v, tau, response):
    """Best total reward from a state where the next advisory is still to be chosen."""
    return max(score(prev, h, v, tau, i, response) for i in range(9))


def score(prev, h, v, tau, adv, response):
    if tau == 0:
        return reward(prev, adv) + (Fraction(-1) if abs(h) * FT < 100 else 0)
    return reward(prev, adv) + max(
        best_future(adv, *step(h, v, a), tau - 1, response) for a in choices(adv, v, response)
    )


def safeable(adv, h, v, tau, response):
    if tau == 0:
        return abs(h) * FT >= 100
    for a in choices(adv, v, response):
        h2, v2 = step(h, v, a)
        if tau == 1:
            if abs(h2) * FT >= 100:
                return True
        elif any(safeable(j, h2, v2, tau - 1, response) for j in range(9)):
            return True
    return False


def random_states(seed, n, max_tau):
    rng = np.random.default_rng(seed)
    # altitude rows within 600 ft of co-altitude, where the NMAC band matters
    for _ in range(n):
        yield int(rng.integers(-6, 7)), int(rng.integers(0, 11)), int(rng.integers(0, max_tau + 1)), int(rng.integers(0, 9))


@pytest.mark.parametrize("response,max_tau", [("hold", 5), ("free", 3)])
def test_scores_match_forward_enumeration(response, max_tau):
    params = CasLiteParams(response=response)
    small = CasLiteGrid(tau_max=max_tau)
    table = caslite_solve(small, params)
    for hi, vi, tau, prev in random_states(1, 10, max_tau):
        h, v = hi * 12, vi - 5  # lattice units; table row is hi + 20
        for adv in range(9):
            want = score(prev, h, v, tau, adv, response)
            assert abs(table[prev, vi, hi + 20, tau, adv] - float(want)) <= 1e-12


@pytest.mark.parametrize("response,max_tau", [("hold", 5), ("free", 3)])
def test_unsafeable_matches_forward_enumeration(response, max_tau):
    params = CasLiteParams(response=response)
    small = CasLiteGrid(tau_max=max_tau)
    unsafe = caslite_unsafeable(small, params)
    rng = np.random.default_rng(2)
    for _ in range(10):
        hi, vi = int(rng.integers(17, 24)), int(rng.integers(0, 11))
        h, v = hi * 12 - 240, vi - 5
        for tau in range(max_tau + 1):
            for adv in range(9):
                assert unsafe[adv, vi, hi, tau] == (not safeable(adv, h, v, tau, response))


def test_nmac_threshold(tables):
    h0, h100 = 20, 21  # rows for 0 ft and 100 ft
    coc = tables.scores[0, :, :, 0, 0]
    assert np.all(coc[:, h0] == -1.0)
    assert np.all(coc[:, h100] == 0.0)


def test_hand_cases(tables):
    # one second is not enough to leave the NMAC band from level flight
    assert tables.safeable_none[5, 20, 1]
    assert not tables.unsafeable[:, 5, 40, 20].any()


def test_dataset_shape_and_labels(tables):
    for prev in ("coc", "cl1500", 0, 4):
        ds, cons = caslite_dataset(tables, prev)
        assert len(ds) == 41 * 11 * 21 == 9471
        assert ds.targets.shape == (9471, 9)
        assert np.array_equal(ds.strata, np.argmax(ds.targets, axis=1))
        assert 1 <= len(cons) <= 9
        assert all(c.output_set.epsilon == 1e-4 for c in cons)
    with pytest.raises(ValueError):
        caslite_dataset(tables, "dnc")


def test_label_ties_go_to_lowest_index(tables):
    ds, _ = caslite_dataset(tables, "coc")
    tied = np.sum(ds.targets == ds.targets.max(axis=1, keepdims=True), axis=1) > 1
    assert tied.any()
    first = np.argmax(ds.targets == ds.targets.max(axis=1, keepdims=True), axis=1)
    assert np.array_equal(ds.strata[tied], first[tied])


def test_targets_avoid_unsafeable_advisories(tables):
    # a statistic the tables happen to satisfy, not something the model relies on
    for prev in ("coc", "cl1500"):
        ds, cons = caslite_dataset(tables, prev)
        for con in cons:
            (i,) = con.output_set.unsafe
            inside = region_contains(con.region, ds.inputs)
            assert not np.any(ds.strata[inside] == i)


def test_regions_are_exactly_their_cells(tables):
    ds, cons = caslite_dataset(tables, "coc")
    mask = (tables.unsafeable & ~tables.safeable_none[None]).reshape(9, -1)
    for con in cons:
        (i,) = con.output_set.unsafe
        d = region_distance(con.region, ds.inputs, distance_scale())
        assert np.array_equal(d == 0, mask[i])
        assert np.all(d[~mask[i]] > 0.4)  # at least a half cell away


def test_no_cell_makes_every_advisory_unsafe(tables):
    ds, cons = caslite_dataset(tables, "coc")
    part = enumerate_overlaps(cons, caslite_domain())
    assert part.k <= 2 ** len(cons)
    assert all(sum(k.bits) < 9 for k in part.keys)


def test_cl1500_monotone_in_rate_below_intruder(tables):
    # a faster climb never hurts when the intruder is at least 200 ft above
    # (h is intruder minus ownship, so h <= -200 means the ownship is above).
    # Near co-altitude a fast descent can sweep through the NMAC band, so the
    # property is only claimed away from it.
    h_rows = np.flatnonzero(GRID.h_values <= -200 + 1e-9)
    safe = ~tables.unsafeable[4]
    for hi in h_rows:
        for tau in range(GRID.tau_max + 1):
            col = safe[:, hi, tau]
            first = np.argmax(col) if col.any() else len(col)
            assert col[first:].all()


def test_unsafeable_shrinks_with_tau_beyond_horizon(tables):
    u = tables.unsafeable
    for tau in range(5, GRID.tau_max):
        assert not np.any(u[..., tau + 1] & ~u[..., tau])


def test_tables_are_deterministic(tables):
    again = caslite_tables()
    assert np.array_equal(again.scores, tables.scores)
    assert np.array_equal(again.unsafeable, tables.unsafeable)
    assert np.all(np.isfinite(tables.scores))


def test_pilot_model_option():
    with pytest.raises(ValueError):
        CasLiteParams(response="lazy")


# -- suite wiring ------------------------------------------------------------------


def test_generate_arguments():
    with pytest.raises(ValueError):
        generate("caslite")
    with pytest.raises(ValueError):
        generate("synthetic1d", a_prev="coc")
    with pytest.raises(ValueError):
        generate("bogus")


def test_probe_sets():
    ds, cons, dom, _ = generate("synthetic1d")
    pts, spec = probe_set("synthetic1d", cons, dom, ds)
    assert spec["grid_in_regions"] == 100_000 and np.all((pts >= 0) & (pts <= 2))
    ds, cons, dom, _ = generate("synthetic2d")
    pts, spec = probe_set("synthetic2d", cons, dom, ds)
    assert spec["grid_per_axis"] == 400
    inside = np.zeros(len(pts), bool)
    for c in cons:
        inside |= region_contains(c.region, pts)
    assert inside.all()
