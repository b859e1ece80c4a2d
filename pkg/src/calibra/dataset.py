"""Finite datasets, group families and the counterexample constructions.

Exact mode: a dataset is a list of feature cells, each carrying a weight and
a finite label distribution, so every expectation is a finite sum.  Sample
mode (CSV rows) is collapsed into exact mode by grouping identical feature
vectors.
"""
from __future__ import annotations

import csv
import itertools
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

import numpy as np

from . import functionals
from .errors import DataError, EmptyGroup, EmptyRegion, NotFound
from .properties import MERGE_TOL, FiniteDistribution

ALL_GROUP = "all"


@dataclass(frozen=True)
class Cell:
    cell_id: str
    weight: float
    dist: FiniteDistribution


class ExactDataset:
    """Immutable collection of weighted cells with finite label distributions."""

    def __init__(self, cells: Sequence[Cell], tags: Mapping[str, Mapping[str, Any]] | None = None):
        cells = tuple(cells)
        if not cells:
            raise DataError("dataset has no cells")
        ids = [c.cell_id for c in cells]
        if len(set(ids)) != len(ids):
            raise DataError("cell ids must be unique")
        w = np.array([c.weight for c in cells], dtype=float)
        if np.any(~(w > 0)):
            raise DataError("cell weights must be positive")
        if abs(float(w.sum()) - 1.0) > 1e-12:
            raise DataError(f"cell weights sum to {float(w.sum())!r}, expected 1")
        self.cells = cells
        self.tags: dict[str, dict[str, Any]] = {
            cid: dict(tags.get(cid, {})) if tags else {} for cid in ids
        }
        self.weights = w
        self.weights.setflags(write=False)
        self.support, self.label_probs = _atom_matrix([c.dist for c in cells])

    def __len__(self) -> int:
        return len(self.cells)

    @property
    def cell_ids(self) -> list[str]:
        return [c.cell_id for c in self.cells]

    def rows(self) -> list[dict[str, Any]]:
        """Per-cell attribute maps used by group predicates."""
        return [self.tags[c.cell_id] for c in self.cells]

    def to_dict(self) -> dict:
        return {
            "cells": [
                {"id": c.cell_id, "weight": c.weight, "dist": c.dist.to_dict()} for c in self.cells
            ],
            "tags": {cid: t for cid, t in self.tags.items() if t},
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "ExactDataset":
        try:
            cells = [
                Cell(str(c["id"]), float(c["weight"]), FiniteDistribution.from_dict(c["dist"]))
                for c in d["cells"]
            ]
        except (KeyError, TypeError, ValueError) as exc:
            raise DataError(f"malformed exact dataset: {exc}") from exc
        return cls(cells, d.get("tags") or {})

    @classmethod
    def load(cls, path: str | Path) -> "ExactDataset":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, ExactDataset):
            return NotImplemented
        return self.cells == other.cells and self.tags == other.tags


def _atom_matrix(dists: Sequence[FiniteDistribution]) -> tuple[np.ndarray, np.ndarray]:
    """Common support over all cells and the (cells x atoms) probability matrix."""
    raw = np.unique(np.concatenate([d.support for d in dists]))
    merged: list[float] = []
    for v in raw.tolist():
        if not merged or v - merged[-1] > MERGE_TOL:
            merged.append(v)
    support = np.array(merged)
    mat = np.zeros((len(dists), support.size))
    for i, d in enumerate(dists):
        idx = np.searchsorted(support, d.support - MERGE_TOL, side="left")
        np.add.at(mat[i], idx, d.probs)
    support.setflags(write=False)
    mat.setflags(write=False)
    return support, mat


@dataclass(frozen=True)
class SampleDataset:
    """Rows of (feature vector, label) with uniform weight 1/n."""

    columns: tuple[str, ...]
    features: tuple[tuple[Any, ...], ...]
    labels: tuple[float, ...]

    def __post_init__(self):
        if not self.labels:
            raise DataError("sample dataset is empty")
        for i, y in enumerate(self.labels):
            if not 0.0 <= y <= 1.0:
                raise DataError(f"row {i + 1}: label {y!r} outside [0, 1]")

    def rows(self) -> list[dict[str, Any]]:
        return [dict(zip(self.columns, f)) for f in self.features]

    def to_exact(self) -> ExactDataset:
        """Collapse rows with identical feature vectors into one cell each."""
        buckets: dict[tuple, list[float]] = {}
        for f, y in zip(self.features, self.labels):
            buckets.setdefault(f, []).append(y)
        n = len(self.labels)
        cells, tags = [], {}
        for i, (f, ys) in enumerate(buckets.items()):
            cid = f"cell{i}"
            vals, counts = np.unique(np.array(ys), return_counts=True)
            cells.append(Cell(cid, len(ys) / n, FiniteDistribution(vals, counts / counts.sum())))
            tags[cid] = dict(zip(self.columns, f))
        return ExactDataset(_renormalized(cells), tags)


def _renormalized(cells: list[Cell]) -> list[Cell]:
    total = math.fsum(c.weight for c in cells)
    return [Cell(c.cell_id, c.weight / total, c.dist) for c in cells]


def _coerce(value: str) -> Any:
    try:
        return float(value)
    except ValueError:
        return value


def load_csv(path: str | Path, feature_columns: Sequence[str], label_column: str) -> SampleDataset:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        missing = [c for c in [*feature_columns, label_column] if c not in header]
        if missing:
            raise DataError(f"{path}: missing column(s) {', '.join(missing)}")
        feats, labels = [], []
        for lineno, row in enumerate(reader, start=2):
            raw = row[label_column]
            try:
                y = float(raw)
            except (TypeError, ValueError):
                raise DataError(f"{path}: row {lineno}: label {raw!r} is not a number") from None
            if not (0.0 <= y <= 1.0):
                raise DataError(f"{path}: row {lineno}: label {y!r} outside [0, 1]")
            feats.append(tuple(_coerce(row[c]) for c in feature_columns))
            labels.append(y)
    if not labels:
        raise DataError(f"{path}: no data rows")
    return SampleDataset(tuple(feature_columns), tuple(feats), tuple(labels))


@dataclass(frozen=True)
class GroupPredicate:
    """``column in [lo, hi)`` or ``column == value`` over a feature row."""

    column: str
    op: str
    args: tuple

    def __post_init__(self):
        if self.op == "in_range":
            if len(self.args) != 2:
                raise DataError(f"in_range on {self.column!r} needs [lo, hi]")
        elif self.op == "equals":
            if len(self.args) != 1:
                raise DataError(f"equals on {self.column!r} needs exactly one value")
        else:
            raise DataError(f"unknown group op {self.op!r}")

    def __call__(self, row: Mapping[str, Any]) -> bool:
        if self.column not in row:
            raise DataError(f"group predicate refers to unknown column {self.column!r}")
        v = row[self.column]
        if self.op == "in_range":
            lo, hi = self.args
            try:
                return float(lo) <= float(v) < float(hi)
            except (TypeError, ValueError):
                raise DataError(f"column {self.column!r} value {v!r} is not numeric") from None
        target = self.args[0]
        if isinstance(v, (int, float)) and isinstance(target, (int, float)):
            return float(v) == float(target)
        return str(v) == str(target)

    def to_dict(self, group_id: str) -> dict:
        return {"id": group_id, "column": self.column, "op": self.op, "args": list(self.args)}


@dataclass(frozen=True)
class Group:
    group_id: str
    mask: np.ndarray
    predicate: GroupPredicate | None = None

    def contains(self, row: Mapping[str, Any]) -> bool:
        if self.group_id == ALL_GROUP and self.predicate is None:
            return True
        if self.predicate is None:
            raise DataError(f"group {self.group_id!r} has no predicate for new points")
        return self.predicate(row)


@dataclass(frozen=True)
class GroupFamily:
    """Ordered groups over the cells of one dataset; order breaks ties."""

    groups: tuple[Group, ...]
    size: int = field(default=0)

    def __post_init__(self):
        ids = [g.group_id for g in self.groups]
        if len(set(ids)) != len(ids):
            raise DataError("group ids must be unique")
        if not self.groups:
            raise DataError("group family is empty")
        n = self.groups[0].mask.size
        object.__setattr__(self, "size", n)
        for g in self.groups:
            if g.mask.shape != (n,):
                raise DataError(f"group {g.group_id!r} mask has the wrong cardinality")
            if not g.mask.any():
                raise EmptyGroup(f"group {g.group_id!r} is empty")

    def __len__(self) -> int:
        return len(self.groups)

    def __iter__(self):
        return iter(self.groups)

    @property
    def ids(self) -> list[str]:
        return [g.group_id for g in self.groups]

    def masks(self) -> np.ndarray:
        return np.array([g.mask for g in self.groups], dtype=bool)

    def by_id(self, group_id: str) -> Group:
        for g in self.groups:
            if g.group_id == group_id:
                return g
        raise KeyError(group_id)

    def membership(self, row: Mapping[str, Any]) -> dict[str, bool]:
        return {g.group_id: g.contains(row) for g in self.groups}

    def config(self) -> list[dict]:
        return [g.predicate.to_dict(g.group_id) for g in self.groups if g.predicate is not None]

    @classmethod
    def from_masks(cls, masks: Mapping[str, Sequence[bool]] | Sequence[tuple[str, Sequence[bool]]],
                   n: int | None = None, include_all: bool = True) -> "GroupFamily":
        items = list(masks.items()) if isinstance(masks, Mapping) else list(masks)
        if n is None:
            n = len(items[0][1])
        groups = []
        if include_all and all(gid != ALL_GROUP for gid, _ in items):
            groups.append(Group(ALL_GROUP, np.ones(n, dtype=bool)))
        for gid, mask in items:
            groups.append(Group(str(gid), np.asarray(mask, dtype=bool)))
        return cls(tuple(groups))


def groups_from_config(dataset: ExactDataset | SampleDataset, predicates: Iterable[Mapping]) -> GroupFamily:
    """Materialize predicate configs into masks; the all-of-X group comes first."""
    rows = dataset.rows()
    n = len(rows)
    groups = [Group(ALL_GROUP, np.ones(n, dtype=bool))]
    for spec in predicates:
        try:
            gid = str(spec["id"])
            pred = GroupPredicate(str(spec["column"]), str(spec["op"]), tuple(spec["args"]))
        except KeyError as exc:
            raise DataError(f"group config missing key {exc}") from None
        if gid == ALL_GROUP:
            raise DataError(f"group id {ALL_GROUP!r} is reserved")
        mask = np.array([pred(r) for r in rows], dtype=bool)
        if not mask.any():
            raise EmptyGroup(f"group {gid!r} matches no rows")
        groups.append(Group(gid, mask, pred))
    return GroupFamily(tuple(groups))


@dataclass(frozen=True)
class Region:
    indices: tuple[int, ...]
    mass: float
    mixture: FiniteDistribution


def mixture_distribution(dataset: ExactDataset, indices: Iterable[int]) -> FiniteDistribution:
    """Weight-renormalized label mixture of the given cells."""
    idx = sorted(set(int(i) for i in indices))
    if not idx:
        raise EmptyRegion("region has no cells")
    w = dataset.weights[idx]
    total = float(w.sum())
    if not total > 0:
        raise EmptyRegion("region has zero mass")
    probs = (w[:, None] * dataset.label_probs[idx]).sum(axis=0) / total
    keep = probs > 0
    return FiniteDistribution(dataset.support[keep], probs[keep] / probs[keep].sum())


def region(dataset: ExactDataset, indices: Iterable[int]) -> Region:
    idx = tuple(sorted(set(int(i) for i in indices)))
    mix = mixture_distribution(dataset, idx)
    return Region(idx, float(dataset.weights[list(idx)].sum()), mix)


# --- constructions -----------------------------------------------------------

def make_two_point_dataset(p1: FiniteDistribution, p2: FiniteDistribution, lam: float) -> ExactDataset:
    if not 0.0 < lam < 1.0:
        raise ValueError("lambda must lie in (0, 1)")
    return ExactDataset([Cell("x1", lam, p1), Cell("x2", 1.0 - lam, p2)],
                        {"x1": {"idx": 0}, "x2": {"idx": 1}})


def make_variance_counterexample() -> ExactDataset:
    """Two equally likely cells with deterministic labels 0 and 1."""
    return ExactDataset(
        [Cell("x0", 0.5, FiniteDistribution.point(0.0)), Cell("x1", 0.5, FiniteDistribution.point(1.0))],
        {"x0": {"idx": 0}, "x1": {"idx": 1}},
    )


def make_bernoulli_dataset(probs: Sequence[float], weights: Sequence[float] | None = None) -> ExactDataset:
    """Cells with {0, 1}-valued labels; cell i has Pr[y = 1] = probs[i]."""
    n = len(probs)
    w = np.full(n, 1.0 / n) if weights is None else np.asarray(weights, dtype=float)
    cells, tags = [], {}
    for i, p in enumerate(probs):
        if p in (0.0, 1.0):
            dist = FiniteDistribution.point(float(p))
        else:
            dist = FiniteDistribution([0.0, 1.0], [1.0 - p, p])
        cid = f"x{i}"
        cells.append(Cell(cid, float(w[i]), dist))
        tags[cid] = {"idx": i, "parity": i % 2, "half": int(i >= n / 2), "x": i / n}
    return ExactDataset(cells, tags)


def make_grid_label_dataset(n: int = 16) -> ExactDataset:
    """n equally weighted cells; cell i has deterministic label i/n and feature x = i/n."""
    cells, tags = [], {}
    for i in range(n):
        cid = f"c{i}"
        cells.append(Cell(cid, 1.0 / n, FiniteDistribution.point(i / n)))
        tags[cid] = {"idx": i, "x": i / n}
    return ExactDataset(_renormalized(cells), tags)


def _mean_one_densities(raw: np.ndarray, m1: float, m2: float) -> np.ndarray:
    """Shift ``raw`` and clip to [m1, m2] so that the mean is exactly 1 (bisection)."""
    lo, hi = m1 - raw.max(), m2 - raw.min()
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if np.clip(raw + mid, m1, m2).mean() < 1.0:
            lo = mid
        else:
            hi = mid
    return np.clip(raw + 0.5 * (lo + hi), m1, m2)


def synth_bounded_density(cells: int, atoms: int, m1: float, m2: float, seed: int) -> ExactDataset:
    """Cells whose label laws are histograms on ``atoms`` bin midpoints with
    density between m1 and m2 (mass per atom in [m1/atoms, m2/atoms])."""
    if not (0 < m1 <= 1.0 <= m2):
        raise ValueError(f"infeasible density bounds m1={m1}, m2={m2} on [0, 1]")
    if cells < 1 or atoms < 1:
        raise ValueError("cells and atoms must be positive")
    rng = np.random.Generator(np.random.Philox(seed))
    support = (np.arange(atoms) + 0.5) / atoms
    out, tags = [], {}
    scores = rng.random(cells)
    for i in range(cells):
        dens = _mean_one_densities(rng.uniform(m1, m2, size=atoms), m1, m2)
        mass = dens / dens.sum()
        cid = f"c{i}"
        out.append(Cell(cid, 1.0 / cells, FiniteDistribution(support, mass)))
        tags[cid] = {"idx": i, "parity": i % 2, "half": int(i >= cells / 2),
                     "score": float(scores[i])}
    return ExactDataset(_renormalized(out), tags)


def find_cvar_cxls_violation(tau: float, atom_grid: Sequence[float], prob_grid: Sequence[float],
                             gap: float = 1e-3, max_pairs: int = 10**6):
    """Exhaustively search distributions on at most three atoms for a pair with
    equal CVaR whose 50/50 mixture has a different CVaR.

    Returns ``(P1, P2, 0.5, cvar(P1), cvar(mixture))`` for the first hit in
    enumeration order; raises :class:`NotFound` otherwise.
    """
    atoms = sorted(set(float(a) for a in atom_grid))
    weights = sorted(set(float(p) for p in prob_grid if p > 0))
    upper = sum(math.comb(len(atoms), k) * len(weights) ** k for k in (1, 2, 3))
    if upper * (upper - 1) // 2 > max_pairs:
        raise ValueError("grid too large for exhaustive search")
    cands: list[FiniteDistribution] = []
    for k in (1, 2, 3):
        for combo in itertools.combinations(atoms, k):
            for ps in itertools.product(weights, repeat=k):
                if abs(math.fsum(ps) - 1.0) <= 1e-12:
                    cands.append(FiniteDistribution(combo, ps))
    if len(cands) * (len(cands) - 1) // 2 > max_pairs:
        raise ValueError("grid too large for exhaustive search")
    values = [functionals.cvar(p, tau) for p in cands]
    for i, j in itertools.combinations(range(len(cands)), 2):
        if abs(values[i] - values[j]) > 1e-9:
            continue
        p1, p2 = cands[i], cands[j]
        mix = mix_distributions(p1, p2, 0.5)
        cm = functionals.cvar(mix, tau)
        if abs(cm - values[i]) > gap:
            return p1, p2, 0.5, values[i], cm
    raise NotFound(f"no CVaR level-set violation for tau={tau} on this grid")


def mix_distributions(p1: FiniteDistribution, p2: FiniteDistribution, lam: float) -> FiniteDistribution:
    return FiniteDistribution(
        np.concatenate([p1.support, p2.support]),
        np.concatenate([lam * p1.probs, (1.0 - lam) * p2.probs]),
    )
