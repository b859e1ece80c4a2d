"""Batch multicalibration by iterative level-set patching.

Two halting rules are provided and deliberately kept separate:

* :func:`batch_multicalibrate` halts once every group's probability-weighted
  squared id error is at most ``alpha`` and always patches the worst
  (level, group) region.
* :func:`batch_multicalibrate_v` halts once every single (level, group)
  region has joint-probability-weighted squared id error below ``alpha / m``
  and patches the first offending region in scan order.

Both work on exact datasets where region expectations are finite sums over
cells, computed from per-cell tables E_{P_c}[V(grid_j, y)].
"""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from typing import Any, Callable, Mapping, Sequence

import numpy as np

from .audit import eval_property, property_kind
from .dataset import ALL_GROUP, ExactDataset, GroupFamily
from .errors import ConfigError, DataError, NonTermination
from .properties import PropertySpec, grid_points, nearest_grid_index

GUARD_FACTOR = 10
# Quantities this close are treated as tied, so exact ties do not depend on
# summation order.
TIE_TOL = 1e-12


@dataclass(frozen=True)
class UpdateRecord:
    step: int
    gamma_from: float
    group_id: str
    gamma_to: float
    # level-set restriction {other component == value}, used by the joint solver
    on: tuple[str, float] | None = None

    def to_dict(self) -> dict:
        d = {"step": self.step, "from": self.gamma_from, "group": self.group_id, "to": self.gamma_to}
        if self.on is not None:
            d["on"] = {"component": self.on[0], "value": self.on[1]}
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "UpdateRecord":
        on = d.get("on")
        return cls(int(d["step"]), float(d["from"]), str(d["group"]), float(d["to"]),
                   None if on is None else (str(on["component"]), float(on["value"])))


@dataclass
class DiscretizedPredictor:
    """Grid-valued predictor: an initial assignment plus an ordered patch log."""

    m: int
    init: float | list[float]
    update_log: list[UpdateRecord] = field(default_factory=list)
    current: np.ndarray | None = None

    @property
    def grid(self) -> np.ndarray:
        return grid_points(self.m)

    def init_values(self, n: int) -> np.ndarray:
        if isinstance(self.init, (list, tuple, np.ndarray)):
            if len(self.init) != n:
                raise DataError(f"per-cell init has {len(self.init)} entries, data has {n}")
            return np.asarray(self.init, dtype=float).copy()
        return np.full(n, float(self.init))

    def to_dict(self) -> dict:
        init = list(map(float, self.init)) if isinstance(self.init, (list, tuple, np.ndarray)) else float(self.init)
        return {"m": self.m, "grid": self.grid.tolist(), "init": init,
                "log": [r.to_dict() for r in self.update_log]}

    @classmethod
    def from_dict(cls, d: Mapping) -> "DiscretizedPredictor":
        try:
            m = int(d["m"])
            grid = grid_points(m)
            if "grid" in d and not np.array_equal(np.asarray(d["grid"], dtype=float), grid):
                raise ConfigError("stored grid does not match m")
            init = d["init"]
            init = [float(v) for v in init] if isinstance(init, list) else float(init)
            log = [UpdateRecord.from_dict(r) for r in d.get("log", [])]
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"malformed predictor: {exc}") from exc
        gset = set(grid.tolist())
        vals = init if isinstance(init, list) else [init]
        for v in [*vals, *(r.gamma_from for r in log), *(r.gamma_to for r in log)]:
            if v not in gset:
                raise ConfigError(f"predictor value {v!r} is not on the m={m} grid")
        return cls(m, init, log)

    def save(self, path) -> None:
        from .io import atomic_write_text
        atomic_write_text(path, json.dumps(self.to_dict(), indent=2) + "\n")

    @classmethod
    def load(cls, path) -> "DiscretizedPredictor":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


@dataclass
class ConvergenceTrace:
    rows: list[dict] = field(default_factory=list)
    phi0: float = float("nan")
    C_init: float = float("nan")
    C_opt_bound: float = float("nan")
    C_opt: float = float("nan")
    budget: float = float("nan")

    @property
    def updates(self) -> int:
        return len(self.rows)

    def phis(self) -> list[float]:
        return [self.phi0] + [r["phi"] for r in self.rows]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        cols = ["step", "gamma", "group", "mass", "expV", "gamma_to", "phi"]
        w.writerow(cols)
        for r in self.rows:
            w.writerow([r[c] if isinstance(r[c], (str, int)) else repr(r[c]) for c in cols])
        return buf.getvalue()

    def to_dict(self) -> dict:
        return {"updates": self.updates, "phi0": self.phi0, "C_init": self.C_init,
                "C_opt_bound": self.C_opt_bound, "C_opt": self.C_opt, "budget": self.budget,
                "steps": self.rows}


# --- engine -----------------------------------------------------------------

def cell_tables(fn: Callable, dataset: ExactDataset, grid: np.ndarray) -> np.ndarray:
    """(cells x m) table of E_{P_c}[fn(grid_j, y)]."""
    vals = np.broadcast_to(fn(grid[:, None], dataset.support[None, :]), (grid.size, dataset.support.size))
    return dataset.label_probs @ vals.T


def to_indices(values: np.ndarray, m: int) -> np.ndarray:
    grid = grid_points(m)
    idx = np.searchsorted(grid, values)
    idx = np.minimum(idx, m - 1)
    if not np.array_equal(grid[idx], values):
        bad = values[grid[idx] != values][0]
        raise ConfigError(f"value {bad!r} is not on the m={m} grid")
    return idx


def _init_indices(f_init, n: int, m: int) -> tuple[np.ndarray, float | list[float]]:
    grid = grid_points(m)
    if f_init is None:
        v = float(grid[nearest_grid_index(0.5, m)])
        return np.full(n, nearest_grid_index(0.5, m)), v
    if isinstance(f_init, DiscretizedPredictor):
        f_init = f_init.current
    if np.ndim(f_init) == 0:
        idx = to_indices(np.array([float(f_init)]), m)
        return np.full(n, idx[0]), float(grid[idx[0]])
    arr = np.asarray(f_init, dtype=float)
    if arr.shape != (n,):
        raise ConfigError(f"f_init has {arr.size} entries, data has {n} cells")
    idx = to_indices(arr, m)
    return idx, arr.tolist()


def _region_stats(Sid, w, masks, idx, m):
    """(groups x m) arrays of slice mass and weighted id sums."""
    occ = np.zeros((idx.size, m))
    occ[np.arange(idx.size), idx] = w
    mass = masks @ occ
    num = masks @ (occ * Sid)
    return mass, num


def _phi(Ssc, w, idx) -> float:
    if Ssc is None:
        return float("nan")
    return math.fsum((w * Ssc[np.arange(idx.size), idx]).tolist())


def run_engine(Sid: np.ndarray, Ssc: np.ndarray | None, w: np.ndarray, masks: np.ndarray,
               group_ids: Sequence[str], idx: np.ndarray, alpha: float, m: int, rule: str,
               guard: int, on: Sequence[tuple[str, float] | None] | None = None,
               step0: int = 0) -> tuple[np.ndarray, list[UpdateRecord], list[dict], float]:
    """Patch loop on precomputed tables.

    ``rule`` is ``"group_sum"`` (argmax selection, per-group sum halting) or
    ``"cell_scan"`` (first (level, group) with term >= alpha / m).
    Returns final indices, update records, trace rows and the initial potential.
    """
    grid = grid_points(m)
    idx = idx.copy()
    masks_f = masks.astype(float)
    records: list[UpdateRecord] = []
    rows: list[dict] = []
    phi0 = _phi(Ssc, w, idx)
    phi = phi0
    while True:
        mass, num = _region_stats(Sid, w, masks_f, idx, m)
        occupied = mass > 0
        term = np.zeros_like(mass)
        term[occupied] = num[occupied] ** 2 / mass[occupied]
        if rule == "group_sum":
            if not np.any(term.sum(axis=1) > alpha + TIE_TOL):
                break
            flat = _first_within(-term.T.ravel())
        elif rule == "cell_scan":
            viol = (term >= alpha / m - TIE_TOL) & occupied
            if not viol.any():
                break
            flat = int(np.argmax(viol.T))
        else:
            raise ValueError(f"unknown halting rule {rule!r}")
        j, g = divmod(flat, len(group_ids))
        if len(records) >= guard:
            raise NonTermination(
                f"exceeded {guard} updates (alpha={alpha:g}, m={m}); the asserted Lipschitz "
                "or monotonicity constants probably do not hold on this data"
            )
        region = masks[g] & (idx == j)
        tot = w[region] @ Sid[region]
        j_new = _first_within(np.abs(tot))
        if not abs(tot[j_new]) < abs(tot[j]):
            raise NonTermination(
                f"region ({grid[j]!r}, {group_ids[g]!r}) cannot be improved on the grid; "
                "its target lies outside the grid's reach"
            )
        region_mass = float(mass[g, j])
        idx[region] = j_new
        phi = _phi(Ssc, w, idx)
        tag = None if on is None else on[g]
        step = step0 + len(records)
        records.append(UpdateRecord(step, float(grid[j]), group_ids[g], float(grid[j_new]), tag))
        rows.append({"step": step, "gamma": float(grid[j]), "group": _label(group_ids[g], tag),
                     "mass": region_mass, "expV": float(num[g, j] / region_mass),
                     "gamma_to": float(grid[j_new]), "phi": phi})
    return idx, records, rows, phi0


def _first_within(a: np.ndarray) -> int:
    """First index whose value is within TIE_TOL of the minimum."""
    return int(np.flatnonzero(a <= a.min() + TIE_TOL)[0])


def _label(group_id: str, on: tuple[str, float] | None) -> str:
    return group_id if on is None else f"{group_id}×{on[0]}={on[1]!r}"


def _optimal_costs(prop: PropertySpec, data: ExactDataset, m: int) -> tuple[float, float]:
    """(exact C_opt, score of the grid-rounded true predictor)."""
    kind = property_kind(prop)
    grid = grid_points(m)
    exact, rounded = [], []
    for c, wc in zip(data.cells, data.weights):
        t = eval_property(kind, c.dist)
        r = float(grid[nearest_grid_index(t, m)])
        exact.append(wc * c.dist.expect(lambda y: prop.score_eval(t, y)))
        rounded.append(wc * c.dist.expect(lambda y: prop.score_eval(r, y)))
    return math.fsum(exact), math.fsum(rounded)


def batch_multicalibrate(prop: PropertySpec, data: ExactDataset, groups: GroupFamily, m: int,
                         f_init: Any = None, alpha: float | None = None,
                         max_updates: int | None = None) -> tuple[DiscretizedPredictor, ConvergenceTrace]:
    """Patch the worst (level, group) region until every group's weighted
    squared id error is at most ``alpha`` (default 4 L**2 / m)."""
    _check(data, groups, m)
    L = prop.lipschitz_L
    alpha = 4.0 * L * L / m if alpha is None else float(alpha)
    grid = grid_points(m)
    idx0, init = _init_indices(f_init, len(data), m)
    Sid = cell_tables(prop.id_eval, data, grid)
    Ssc = cell_tables(prop.score_eval, data, grid)
    c_init = _phi(Ssc, data.weights, idx0)
    try:
        c_opt, c_opt_bound = _optimal_costs(prop, data, m)
    except ConfigError:
        c_opt = c_opt_bound = float("nan")
    budget = (c_init - c_opt) * m * m / L if math.isfinite(c_opt) else prop.score_range_B * m * m / L
    guard = max_updates if max_updates is not None else GUARD_FACTOR * max(math.ceil(budget), 1)
    idx, records, rows, phi0 = run_engine(Sid, Ssc, data.weights, groups.masks(), groups.ids,
                                          idx0, alpha, m, "group_sum", guard)
    pred = DiscretizedPredictor(m, init, records, grid[idx].copy())
    trace = ConvergenceTrace(rows, phi0, c_init, c_opt_bound, c_opt, budget)
    return pred, trace


def batch_multicalibrate_v(id_fn: PropertySpec | Callable, data: ExactDataset, groups: GroupFamily,
                           m: int, f_init: Any = None, alpha: float | None = None,
                           score_fn: Callable | None = None, lipschitz_L: float | None = None,
                           score_range_B: float | None = None,
                           max_updates: int | None = None) -> tuple[DiscretizedPredictor, ConvergenceTrace]:
    """Patch the first (level, group) region whose joint-probability-weighted
    squared id error reaches ``alpha / m``; stop when none does."""
    _check(data, groups, m)
    if isinstance(id_fn, PropertySpec):
        score_fn = score_fn or id_fn.score_eval
        lipschitz_L = lipschitz_L or id_fn.lipschitz_L
        score_range_B = score_range_B or id_fn.score_range_B
        id_fn = id_fn.id_eval
    if alpha is None:
        if lipschitz_L is None:
            raise ConfigError("alpha or a Lipschitz constant is required")
        alpha = 4.0 * lipschitz_L ** 2 / m
    if not alpha > 0:
        raise ConfigError("alpha must be positive")
    grid = grid_points(m)
    idx0, init = _init_indices(f_init, len(data), m)
    Sid = cell_tables(id_fn, data, grid)
    Ssc = cell_tables(score_fn, data, grid) if score_fn is not None else None
    if max_updates is not None:
        guard = max_updates
    elif lipschitz_L and score_range_B:
        guard = GUARD_FACTOR * max(math.ceil(score_range_B * m * m / lipschitz_L), 1)
    else:
        guard = GUARD_FACTOR * m ** 3 * len(groups)
    idx, records, rows, phi0 = run_engine(Sid, Ssc, data.weights, groups.masks(), groups.ids,
                                          idx0, alpha, m, "cell_scan", guard)
    budget = score_range_B * m * m / lipschitz_L if lipschitz_L and score_range_B else float("nan")
    pred = DiscretizedPredictor(m, init, records, grid[idx].copy())
    return pred, ConvergenceTrace(rows, phi0, phi0, budget=budget)


def _check(data: ExactDataset, groups: GroupFamily, m: int) -> None:
    if m < 1:
        raise ConfigError("m must be >= 1")
    if groups.size != len(data):
        raise DataError("group masks do not match the dataset size")


def membership_matrix(data: ExactDataset | Sequence[Mapping], groups: GroupFamily) -> np.ndarray:
    """(points x groups) membership; masks for the training dataset, predicates otherwise."""
    if isinstance(data, ExactDataset) and groups.size == len(data):
        return groups.masks().T.copy()
    rows = data.rows() if isinstance(data, ExactDataset) else list(data)
    return np.array([[g.contains(r) for g in groups] for r in rows], dtype=bool).reshape(len(rows), len(groups))


def replay_record(values: np.ndarray, rec: UpdateRecord, member: np.ndarray,
                  other: Mapping[str, np.ndarray] | None = None) -> None:
    sel = (values == rec.gamma_from) & member
    if rec.on is not None:
        if other is None or rec.on[0] not in other:
            raise DataError(f"record {rec.step} needs component {rec.on[0]!r} to replay")
        sel &= other[rec.on[0]] == rec.on[1]
    values[sel] = rec.gamma_to


def apply_predictor(predictor: DiscretizedPredictor, data: ExactDataset | Sequence[Mapping],
                    groups: GroupFamily) -> np.ndarray:
    """Replay init + update log on training cells or new feature rows."""
    member = membership_matrix(data, groups)
    col = {gid: i for i, gid in enumerate(groups.ids)}
    values = predictor.init_values(member.shape[0])
    for rec in predictor.update_log:
        if rec.group_id not in col:
            raise DataError(f"update {rec.step} refers to unknown group {rec.group_id!r}")
        replay_record(values, rec, member[:, col[rec.group_id]])
    return values


__all__ = [
    "ALL_GROUP",
    "UpdateRecord",
    "DiscretizedPredictor",
    "ConvergenceTrace",
    "batch_multicalibrate",
    "batch_multicalibrate_v",
    "apply_predictor",
]
