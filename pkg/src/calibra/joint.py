"""Joint multicalibration of a property and a second property that is
elicitable on its level sets (e.g. mean with variance, quantile with CVaR)."""
from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Mapping, Sequence

import numpy as np

from .batch import (GUARD_FACTOR, TIE_TOL, DiscretizedPredictor, UpdateRecord, _init_indices, cell_tables,
                    membership_matrix, replay_record, run_engine)
from .dataset import ExactDataset, Group, GroupFamily
from .errors import ConfigError, DataError, NonTermination
from .properties import ConditionalIdFamily, PropertySpec, grid_points


@dataclass(frozen=True)
class JointConfig:
    m: int
    alpha0: float
    alpha1: float
    alpha1_star: float
    budget: float

    @classmethod
    def from_constants(cls, m: int, L0: float, La: float, Lc: float, L1: float,
                       B0: float, B1: float) -> "JointConfig":
        for name, v in (("L0", L0), ("La", La), ("Lc", Lc), ("L1", L1), ("B0", B0), ("B1", B1)):
            if not v > 0:
                raise ConfigError(f"{name} must be positive")
        return cls(
            m=m,
            alpha0=4.0 * L0 ** 2 / m,
            alpha1=4.0 * L1 ** 2 / m,
            alpha1_star=8.0 * ((L0 * La * Lc) ** 2 + L1 ** 2) / m,
            budget=B0 * B1 * m ** 4 / (L0 * L1),
        )

    @classmethod
    def for_family(cls, prop0: PropertySpec, fam1: ConditionalIdFamily, m: int,
                   La: float | None = None, Lc: float | None = None) -> "JointConfig":
        la = La if La is not None else prop0.anti_lipschitz_La
        if la is None:
            raise ConfigError(f"{prop0.name} needs an anti-Lipschitz constant for joint calibration")
        return cls.from_constants(m, prop0.lipschitz_L, la,
                                  Lc if Lc is not None else fam1.cross_lipschitz_Lc,
                                  fam1.level_lipschitz_L1, prop0.score_range_B, fam1.cond_score_range_B1)

    def to_dict(self) -> dict:
        return {"m": self.m, "alpha0": self.alpha0, "alpha1": self.alpha1,
                "alpha1_star": self.alpha1_star, "budget": self.budget}


@dataclass
class JointPredictor:
    f0: DiscretizedPredictor
    f1: DiscretizedPredictor
    interleave: list[tuple[str, int]] = field(default_factory=list)

    @property
    def m(self) -> int:
        return self.f0.m

    def to_dict(self) -> dict:
        return {"m": self.m, "f0": self.f0.to_dict(), "f1": self.f1.to_dict(),
                "interleave": [[c, s] for c, s in self.interleave]}

    @classmethod
    def from_dict(cls, d: Mapping) -> "JointPredictor":
        try:
            f0 = DiscretizedPredictor.from_dict(d["f0"])
            f1 = DiscretizedPredictor.from_dict(d["f1"])
            inter = [(str(c), int(s)) for c, s in d.get("interleave", [])]
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"malformed joint predictor: {exc}") from exc
        if f0.m != f1.m or int(d.get("m", f0.m)) != f0.m:
            raise ConfigError("joint components must share the grid granularity m")
        return cls(f0, f1, inter)

    def save(self, path) -> None:
        from .io import atomic_write_text
        atomic_write_text(path, json.dumps(self.to_dict(), indent=2) + "\n")

    @classmethod
    def load(cls, path) -> "JointPredictor":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


@dataclass
class JointTrace:
    config: JointConfig
    outer: list[dict] = field(default_factory=list)
    rows: list[dict] = field(default_factory=list)
    f0_updates: int = 0
    f1_updates: int = 0

    @property
    def total_updates(self) -> int:
        return self.f0_updates + self.f1_updates

    def to_dict(self) -> dict:
        return {"config": self.config.to_dict(), "f0_updates": self.f0_updates,
                "f1_updates": self.f1_updates, "outer": self.outer, "steps": self.rows}


def build_level_set_groups(base_groups: GroupFamily, values: Sequence[float] | np.ndarray,
                           component: str = "f") -> tuple[GroupFamily, list[tuple[str, float]]]:
    """Intersect every base group with every occupied level set of ``values``.

    Returns the family (ids ``group×component=value``, empty intersections
    dropped) and, per member group, the ``(component, value)`` restriction.
    """
    values = np.asarray(values, dtype=float)
    groups, tags = [], []
    for g in base_groups:
        for v in np.unique(values[g.mask]):
            mask = g.mask & (values == v)
            if mask.any():
                groups.append(Group(f"{g.group_id}×{component}={float(v)!r}", mask))
                tags.append((component, float(v)))
    return GroupFamily(tuple(groups)), tags


def _base_ids(family_ids: Sequence[str]) -> list[str]:
    return [gid.rsplit("×", 1)[0] for gid in family_ids]


def _first_triple_violation(term: np.ndarray, thresh: float, occupied: np.ndarray):
    viol = (term >= thresh - TIE_TOL) & occupied
    if not viol.any():
        return None
    return int(np.argmax(viol.T))


def joint_multicalibrate(prop0: PropertySpec, fam1: ConditionalIdFamily, data: ExactDataset,
                         groups: GroupFamily, m: int, f_init: tuple[Any, Any] | None = None,
                         config: JointConfig | None = None, parallel: bool = False,
                         max_outer: int | None = None) -> tuple[JointPredictor, JointTrace]:
    """Alternate level-set-restricted recalibrations of both components until
    no (g0, g1, G) slice carries a large V0 error and every g0 level set is
    calibrated for the conditional id V1_{g0}."""
    if groups.size != len(data):
        raise DataError("group masks do not match the dataset size")
    cfg = config or JointConfig.for_family(prop0, fam1, m)
    grid = grid_points(m)
    n = len(data)
    w = data.weights
    f_init = f_init or (None, None)
    idx0, init0 = _init_indices(f_init[0], n, m)
    idx1, init1 = _init_indices(f_init[1], n, m)

    Sid0 = cell_tables(prop0.id_eval, data, grid)
    Ssc0 = cell_tables(prop0.score_eval, data, grid)
    vals1 = fam1.cond_id_eval(grid[:, None, None], grid[None, :, None], data.support[None, None, :])
    sc1 = fam1.cond_score_eval(grid[:, None, None], grid[None, :, None], data.support[None, None, :])
    Sid1 = np.einsum("ca,jka->cjk", data.label_probs, vals1)
    Ssc1 = np.einsum("ca,jka->cjk", data.label_probs, sc1)

    masks = groups.masks().astype(float)
    guard = GUARD_FACTOR * max(math.ceil(cfg.budget), 1)
    f0_cap = prop0.score_range_B * m * m / prop0.lipschitz_L
    f1_cap = fam1.cond_score_range_B1 * m * m / fam1.level_lipschitz_L1
    log0: list[UpdateRecord] = []
    log1: list[UpdateRecord] = []
    interleave: list[tuple[str, int]] = []
    trace = JointTrace(cfg)
    step = 0
    cells = np.arange(n)
    outer = 0
    while True:
        occ = np.zeros((n, m * m))
        occ[cells, idx0 * m + idx1] = w
        mass = masks @ occ
        occupied = mass > 0
        num0 = masks @ (occ * Sid0[cells, idx0][:, None])
        num1 = masks @ (occ * Sid1[cells, idx0, idx1][:, None])
        term0 = np.where(occupied, num0 ** 2 / np.where(occupied, mass, 1.0), 0.0)
        term1 = np.where(occupied, num1 ** 2 / np.where(occupied, mass, 1.0), 0.0)
        hit0 = _first_triple_violation(term0, cfg.alpha0 / m, occupied)
        hit1 = _first_triple_violation(term1, cfg.alpha1 / m, occupied)
        if hit0 is None and hit1 is None:
            break
        if max_outer is not None and outer >= max_outer:
            raise NonTermination(f"joint calibration did not settle within {max_outer} outer iterations")
        hit = hit0 if hit0 is not None else hit1
        cell_key, g = divmod(hit, len(groups))
        j0, j1 = divmod(cell_key, m)
        info = {"outer": outer, "trigger": "v0" if hit0 is not None else "v1",
                "gamma0": float(grid[j0]), "gamma1": float(grid[j1]), "group": groups.ids[g]}

        fam0, tags0 = build_level_set_groups(groups, grid[idx1], "f1")
        idx0, recs0, rows0, _ = run_engine(Sid0, Ssc0, w, fam0.masks(), _base_ids(fam0.ids), idx0,
                                           cfg.alpha0, m, "cell_scan", guard - trace.total_updates,
                                           on=tags0, step0=step)
        step += len(recs0)
        log0.extend(recs0)
        interleave.extend(("f0", r.step) for r in recs0)
        trace.rows.extend({"component": "f0", **r} for r in rows0)
        trace.f0_updates += len(recs0)

        levels = [j for j in range(m) if np.any(idx0 == j)]

        def level_run(j: int):
            fam, tags = build_level_set_groups(groups, grid[idx0], "f0")
            keep = [k for k, t in enumerate(tags) if t[1] == float(grid[j])]
            sub = GroupFamily(tuple(fam.groups[k] for k in keep))
            return run_engine(Sid1[:, j, :], Ssc1[:, j, :], w, sub.masks(), _base_ids(sub.ids), idx1,
                              cfg.alpha1, m, "cell_scan", guard - trace.total_updates,
                              on=[tags[k] for k in keep])

        if parallel and len(levels) > 1:
            with ThreadPoolExecutor() as pool:
                results = list(pool.map(level_run, levels))
        else:
            results = [level_run(j) for j in levels]
        f1_this = 0
        for j, (new_idx1, recs1, rows1, _) in zip(levels, results):
            level = idx0 == j
            idx1 = np.where(level, new_idx1, idx1)
            for r, row in zip(recs1, rows1):
                rec = UpdateRecord(step, r.gamma_from, r.group_id, r.gamma_to, r.on)
                log1.append(rec)
                interleave.append(("f1", step))
                trace.rows.append({"component": "f1", **row, "step": step})
                step += 1
            f1_this += len(recs1)
        trace.f1_updates += f1_this
        info.update({"f0_updates": len(recs0), "f1_updates": f1_this,
                     "f1_within_cap": f1_this <= f1_cap})
        trace.outer.append(info)
        outer += 1
        if trace.total_updates > guard:
            raise NonTermination(f"joint calibration exceeded {guard} updates")

    trace.outer.append({"f0_total_within_cap": trace.f0_updates <= f0_cap})
    f0 = DiscretizedPredictor(m, init0, log0, grid[idx0].copy())
    f1 = DiscretizedPredictor(m, init1, log1, grid[idx1].copy())
    return JointPredictor(f0, f1, interleave), trace


def apply_joint_predictor(jp: JointPredictor, data: ExactDataset | Sequence[Mapping],
                          groups: GroupFamily) -> tuple[np.ndarray, np.ndarray]:
    """Replay both components in global update order."""
    member = membership_matrix(data, groups)
    col = {gid: i for i, gid in enumerate(groups.ids)}
    n = member.shape[0]
    cur = {"f0": jp.f0.init_values(n), "f1": jp.f1.init_values(n)}
    recs = {"f0": {r.step: r for r in jp.f0.update_log}, "f1": {r.step: r for r in jp.f1.update_log}}
    order = jp.interleave or sorted([("f0", s) for s in recs["f0"]] + [("f1", s) for s in recs["f1"]],
                                    key=lambda t: t[1])
    for comp, s in order:
        rec = recs[comp][s]
        if rec.group_id not in col:
            raise DataError(f"update {s} refers to unknown group {rec.group_id!r}")
        replay_record(cur[comp], rec, member[:, col[rec.group_id]], cur)
    return cur["f0"], cur["f1"]
