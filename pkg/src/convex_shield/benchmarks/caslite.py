"""Desk-scale vertical collision avoidance: advisory score tables and unsafeable regions.

The ownship climbs or descends relative to a level intruder. State is the
relative altitude ``h`` (intruder minus ownship, ft), the ownship vertical rate
``vO`` (ft/s) and the time to loss of horizontal separation ``tau`` (s). Each
second ``h`` moves by ``-vO`` and ``vO`` changes by one acceleration step.

All arithmetic runs on an integer lattice: altitude in units of 25/3 ft and
rate in units of 25/3 ft/s (500 ft/min), so one second at any grid rate moves
``h`` by a whole number of units and no state ever needs snapping. The
published tables are sampled from this lattice at 100 ft altitude spacing.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..constraints import ConstraintSpec, ConvexOutputSet, InputRegion, region_from_cells
from ..netcore import DenseNetSpec
from ..training import Dataset

UNIT_FT = 25.0 / 3.0  # lattice unit: ft for altitude, ft/s for rate


def _to_ft(units):
    # multiply before dividing so whole-foot values such as the altitude rows come out exact
    return np.asarray(units, dtype=np.float64) * 25.0 / 3.0

ADVISORIES = ("COC", "DNC", "DND", "DES1500", "CL1500", "SDES1500", "SCL1500", "SDES2500", "SCL2500")
# compliant vertical rate ranges, ft/min
RATE_LIMITS_FPM = {
    "COC": (-np.inf, np.inf),
    "DNC": (-np.inf, 0.0),
    "DND": (0.0, np.inf),
    "DES1500": (-np.inf, -1500.0),
    "CL1500": (1500.0, np.inf),
    "SDES1500": (-np.inf, -1500.0),
    "SCL1500": (1500.0, np.inf),
    "SDES2500": (-np.inf, -2500.0),
    "SCL2500": (2500.0, np.inf),
}
A_PREV = {"coc": 0, "cl1500": 4}


@dataclass(frozen=True)
class CasLiteGrid:
    """Table grid. Altitudes and rates are whole multiples of the lattice unit."""

    h_max_units: int = 240  # 2000 ft
    h_step_units: int = 12  # 100 ft
    v_max_units: int = 5  # 41.67 ft/s = 2500 ft/min
    tau_max: int = 20
    v_intruder: float = 0.0

    @property
    def h_values(self) -> np.ndarray:
        return _to_ft(np.arange(-self.h_max_units, self.h_max_units + 1, self.h_step_units))

    @property
    def v_values(self) -> np.ndarray:
        return _to_ft(np.arange(-self.v_max_units, self.v_max_units + 1))

    @property
    def tau_values(self) -> np.ndarray:
        return np.arange(self.tau_max + 1, dtype=np.float64)

    @property
    def shape(self) -> tuple[int, int, int]:
        """(n_v, n_h, n_tau) in input-space order (vO - vI, h, tau)."""
        return len(self.v_values), len(self.h_values), len(self.tau_values)

    @property
    def steps(self) -> tuple[float, float, float]:
        return UNIT_FT, self.h_step_units * UNIT_FT, 1.0

    def describe(self) -> dict:
        return {
            "h_ft": [float(self.h_values[0]), float(self.h_values[-1]), self.steps[1]],
            "vO_ftps": [float(self.v_values[0]), float(self.v_values[-1]), self.steps[0]],
            "tau_s": [0, self.tau_max, 1],
            "vI_ftps": self.v_intruder,
        }


@dataclass(frozen=True)
class CasLiteParams:
    """Rewards and pilot model.

    ``response="hold"``: a compliant pilot keeps the current rate.
    ``response="free"``: a compliant pilot may take any step that stays compliant.
    Either way a non-compliant pilot is forced one step toward compliance.
    """

    nmac_ft: float = 100.0
    accel_units: int = 1  # 8.33 ft/s^2 per one-second step
    nmac_reward: float = -1.0
    alert_reward: float = -0.01
    switch_reward: float = -0.02
    response: str = "hold"

    def __post_init__(self):
        if self.response not in ("hold", "free"):
            raise ValueError("response must be 'hold' or 'free'")


@dataclass
class CasLiteTables:
    grid: CasLiteGrid
    params: CasLiteParams
    scores: np.ndarray  # (a_prev, n_v, n_h, n_tau, 9)
    unsafeable: np.ndarray  # (9, n_v, n_h, n_tau) bool
    safeable_none: np.ndarray = field(init=False)

    def __post_init__(self):
        self.safeable_none = self.unsafeable.all(axis=0)


def rate_limits_units(advisory: int) -> tuple[float, float]:
    lo, hi = RATE_LIMITS_FPM[ADVISORIES[advisory]]
    return lo / 500.0, hi / 500.0


def allowed_accelerations(advisory: int, v: int, grid: CasLiteGrid, params: CasLiteParams) -> list[int]:
    """Acceleration choices (lattice units) open to a pilot following ``advisory`` at rate ``v``."""
    lo, hi = rate_limits_units(advisory)
    a = params.accel_units
    if v < lo:
        return [a]
    if v > hi:
        return [-a]
    if params.response == "hold":
        return [0]
    out = []
    for step in (-a, 0, a):
        nv = int(np.clip(v + step, -grid.v_max_units, grid.v_max_units))
        if lo <= nv <= hi:
            out.append(step)
    return out


def _transition_tables(grid: CasLiteGrid, params: CasLiteParams):
    """Successor lattice indices and an allowed-mask for (advisory, v, accel choice)."""
    H = np.arange(-grid.h_max_units, grid.h_max_units + 1)
    V = np.arange(-grid.v_max_units, grid.v_max_units + 1)
    a = params.accel_units
    choices = (-a, 0, a)
    allowed = np.zeros((9, len(V), 3), dtype=bool)
    for i in range(9):
        for vi, v in enumerate(V):
            for ci, step in enumerate(choices):
                allowed[i, vi, ci] = step in allowed_accelerations(i, int(v), grid, params)
    h_next = np.clip(H[:, None] - V[None, :], -grid.h_max_units, grid.h_max_units) + grid.h_max_units
    v_next = np.stack(
        [np.clip(V + step, -grid.v_max_units, grid.v_max_units) + grid.v_max_units for step in choices], axis=1
    )
    return H, V, allowed, h_next, v_next


def _nmac_units(params: CasLiteParams) -> float:
    return params.nmac_ft / UNIT_FT


def _advisory_costs(params: CasLiteParams) -> np.ndarray:
    """(a_prev, advisory) immediate reward."""
    cost = np.zeros((9, 9))
    cost[:, 1:] += params.alert_reward
    cost += params.switch_reward * (1 - np.eye(9))
    return cost


def caslite_solve(grid: CasLiteGrid = CasLiteGrid(), params: CasLiteParams = CasLiteParams()) -> np.ndarray:
    """Score tables by backward induction over tau.

    ``scores[p, v, h, tau, i]`` is the reward of issuing advisory ``i`` after
    previous advisory ``p`` plus the best achievable future reward.
    """
    H, V, allowed, h_next, v_next = _transition_tables(grid, params)
    cost = _advisory_costs(params)
    terminal = np.where(np.abs(H) < _nmac_units(params), params.nmac_reward, 0.0)  # (H,)
    h_rows = np.arange(0, len(H), grid.h_step_units)
    out = np.empty((9, len(V), len(h_rows), grid.tau_max + 1, 9))
    value = None  # value[p, h, v] at tau - 1
    for tau in range(grid.tau_max + 1):
        if tau == 0:
            cont = np.broadcast_to(terminal[None, :, None], (9, len(H), len(V)))
        else:
            # cont[i, h, v] = max over allowed accelerations of value[i, h', v']
            succ = value[:, h_next[:, :, None], v_next[None, :, :]]  # (9, H, V, 3)
            succ = np.where(allowed[:, None, :, :], succ, -np.inf)
            cont = succ.max(axis=3)
        q = cost[:, :, None, None] + cont[None, :, :, :]  # (p, i, H, V)
        value = q.max(axis=1)
        out[:, :, :, tau, :] = q[:, :, h_rows, :].transpose(0, 3, 2, 1)
    return out


def caslite_unsafeable(grid: CasLiteGrid = CasLiteGrid(), params: CasLiteParams = CasLiteParams()) -> np.ndarray:
    """Per-advisory unsafeable cells, shape (9, n_v, n_h, n_tau).

    An advisory is safeable when some compliant acceleration leads to a state
    from which an NMAC-free continuation exists (at tau = 0: separation of at
    least the NMAC threshold).
    """
    H, V, allowed, h_next, v_next = _transition_tables(grid, params)
    any_safe = np.broadcast_to((np.abs(H) >= _nmac_units(params))[:, None], (len(H), len(V)))
    h_rows = np.arange(0, len(H), grid.h_step_units)
    out = np.empty((9, len(V), len(h_rows), grid.tau_max + 1), dtype=bool)
    for tau in range(grid.tau_max + 1):
        if tau == 0:
            safeable = np.broadcast_to(any_safe[None], (9, len(H), len(V)))
        else:
            succ = any_safe[h_next[:, :, None], v_next[None, :, :]]  # (H, V, 3)
            safeable = (succ[None] & allowed[:, None, :, :]).any(axis=3)
        out[:, :, :, tau] = ~safeable[:, h_rows, :].transpose(0, 2, 1)
        any_safe = safeable.any(axis=0)
    return out


def caslite_tables(grid: CasLiteGrid = CasLiteGrid(), params: CasLiteParams = CasLiteParams()) -> CasLiteTables:
    return CasLiteTables(grid, params, caslite_solve(grid, params), caslite_unsafeable(grid, params))


def cell_edges(grid: CasLiteGrid = CasLiteGrid()) -> list[np.ndarray]:
    """Cell boundaries per input dimension (vO - vI, h, tau)."""
    centers = (grid.v_values - grid.v_intruder, grid.h_values, grid.tau_values)
    return [np.append(c - s / 2, c[-1] + s / 2) for c, s in zip(centers, grid.steps)]


def caslite_domain(grid: CasLiteGrid = CasLiteGrid()) -> InputRegion:
    return InputRegion.box(*[(e[0], e[-1]) for e in cell_edges(grid)])


def distance_scale(grid: CasLiteGrid = CasLiteGrid()) -> np.ndarray:
    """Per-dimension weights measuring distance in grid cells."""
    return 1.0 / np.asarray(grid.steps)


CELL_INSET = 1e-6  # fraction of a cell width


def caslite_constraints(tables: CasLiteTables, epsilon: float = 1e-4) -> list[ConstraintSpec]:
    """One "score must not be highest" constraint per advisory with a non-empty unsafeable region.

    Cells where no advisory is safeable are left out of every region. Boxes are
    inset by a millionth of a cell: on a face shared by two cells, closed boxes
    would otherwise mark the union of both cells' advisories unsafe, which can
    cover all nine. With the inset, any point in several regions lies inside a
    single cell that belongs to all of them.
    """
    masks = tables.unsafeable & ~tables.safeable_none[None]
    edges = cell_edges(tables.grid)
    inset = CELL_INSET * np.asarray(tables.grid.steps)
    out = []
    for i in range(9):
        if masks[i].any():
            region = region_from_cells(masks[i], edges, inset)
            out.append(ConstraintSpec(region, ConvexOutputSet.score_not_highest((i,), epsilon), ADVISORIES[i]))
    return out


def caslite_dataset(tables: CasLiteTables, a_prev: str | int) -> tuple[Dataset, list[ConstraintSpec]]:
    """One sample per grid cell for the chosen previous advisory."""
    if isinstance(a_prev, str):
        if a_prev.lower() not in A_PREV:
            raise ValueError(f"a_prev must be one of {sorted(A_PREV)}")
        a_prev = A_PREV[a_prev.lower()]
    grid = tables.grid
    v, h, t = np.meshgrid(grid.v_values - grid.v_intruder, grid.h_values, grid.tau_values, indexing="ij")
    inputs = np.stack([v.ravel(), h.ravel(), t.ravel()], axis=1)
    targets = tables.scores[a_prev].reshape(-1, 9)
    strata = np.argmax(targets, axis=1)
    ds = Dataset(inputs, targets, strata, ["vO_minus_vI", "h", "tau"], list(ADVISORIES))
    return ds, caslite_constraints(tables)


ARCH = {
    "trunk": DenseNetSpec((3, 45, 45, 45, 45), relu_output=True),
    "head": DenseNetSpec((45, 45, 45, 9)),
    "standard": DenseNetSpec((3, 45, 45, 45, 45, 45, 45, 9)),
}
