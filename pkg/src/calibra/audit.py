"""Property evaluators and calibration-error metrics.

Every metric here is computed from definitions over an exact dataset (finite
sums over cells and atoms) and deliberately shares no state with the solvers,
so it can serve as their oracle.
"""
from __future__ import annotations

import csv
import io
import json
import math
import re
from dataclasses import dataclass, field
from typing import Any, Mapping, Sequence

import numpy as np

from . import functionals
from .dataset import ExactDataset, GroupFamily, mixture_distribution
from .errors import ConfigError
from .properties import ConditionalIdFamily, FiniteDistribution, PropertySpec

GAMMA_SPACE = "gamma_space"
V_SPACE = "v_space"

_KIND_RE = re.compile(r"^\s*([a-z_0-9]+)\s*(?:\((.*)\))?\s*$")


def _kind_args(kind: str) -> tuple[str, dict[str, float]]:
    m = _KIND_RE.match(kind)
    if not m:
        raise ConfigError(f"cannot parse property kind {kind!r}")
    args: dict[str, float] = {}
    body = m.group(2)
    if body and body.strip():
        for part in body.split(","):
            k, _, v = part.partition("=")
            try:
                args[k.strip()] = float(v)
            except ValueError:
                raise ConfigError(f"bad argument {part!r} in {kind!r}") from None
    return m.group(1), args


def property_kind(spec: PropertySpec | ConditionalIdFamily | str) -> str:
    """Canonical evaluator string for a property object (or pass a string through)."""
    if isinstance(spec, str):
        return spec
    if isinstance(spec, ConditionalIdFamily):
        tau = spec.outer.params.get("tau")
        return spec.inner_kind if tau is None else f"{spec.inner_kind}(tau={tau!r})"
    if spec.kind == "quantile":
        return f"quantile(tau={spec.params['tau']!r})"
    if spec.kind:
        return spec.kind
    raise ConfigError(f"property {spec.name!r} has no evaluator kind")


def eval_property(kind: str | PropertySpec | ConditionalIdFamily, dist: FiniteDistribution) -> float:
    """Exact value of a named functional: mean, variance, half_variance,
    quantile(tau), cvar(tau), q1(tau, c), q2(c)."""
    name, a = _kind_args(property_kind(kind))
    try:
        if name == "mean":
            return functionals.mean(dist)
        if name == "variance":
            return functionals.variance(dist)
        if name == "half_variance":
            return 0.5 * functionals.variance(dist)
        if name == "quantile":
            return functionals.quantile(dist, a["tau"])
        if name == "cvar":
            return functionals.cvar(dist, a["tau"])
        if name == "q1":
            return functionals.quantile_variant_1(dist, a["tau"], a["c"])
        if name == "q2":
            return functionals.quantile_variant_2(dist, a["c"])
    except KeyError as exc:
        raise ConfigError(f"property kind {name!r} is missing argument {exc}") from None
    raise ConfigError(f"unknown property kind {name!r}")


def cell_values(predictor: Any) -> np.ndarray:
    """Per-cell predictions from a predictor object or a plain sequence."""
    current = getattr(predictor, "current", predictor)
    return np.asarray(current, dtype=float)


@dataclass
class CalibrationReport:
    mode: str
    per_group: dict[str, float]
    alpha_equivalent: dict[str, float]
    group_mass: dict[str, float] = field(default_factory=dict)

    def max_alpha(self) -> float:
        return max(self.alpha_equivalent.values())

    def to_dict(self) -> dict:
        return {
            "mode": self.mode,
            "groups": [
                {"group_id": g, "error": self.per_group[g],
                 "alpha_equivalent": self.alpha_equivalent[g], "mass": self.group_mass.get(g)}
                for g in self.per_group
            ],
        }

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["group_id", "mode", "error", "alpha_equivalent"])
        for g, err in self.per_group.items():
            w.writerow([g, self.mode, repr(err), repr(self.alpha_equivalent[g])])
        return buf.getvalue()


def _slice_terms(values: np.ndarray, weights: np.ndarray, mask: np.ndarray):
    """Yield (value, member indices, slice mass) for each occupied level of ``values`` in ``mask``."""
    members = np.flatnonzero(mask)
    for v in np.unique(values[members]):
        idx = members[values[members] == v]
        yield float(v), idx, math.fsum(weights[idx].tolist())


def _report(mode: str, groups: GroupFamily, weights: np.ndarray, per_group_alpha: dict) -> CalibrationReport:
    per, alpha, mass = {}, {}, {}
    for g in groups:
        mu = math.fsum(weights[g.mask].tolist())
        mass[g.group_id] = mu
        alpha[g.group_id] = per_group_alpha[g.group_id]
        per[g.group_id] = per_group_alpha[g.group_id] / mu
    return CalibrationReport(mode, per, alpha, mass)


def batch_error_v(predictor: Any, dataset: ExactDataset, groups: GroupFamily,
                  id_fn: PropertySpec | Any) -> CalibrationReport:
    """Per-group sum over levels of Pr[f = g | G] * V(g, Y_(g, G))**2."""
    v = id_fn.id_eval if isinstance(id_fn, PropertySpec) else id_fn
    values = cell_values(predictor)
    w = dataset.weights
    out = {}
    for g in groups:
        terms = []
        for gamma, idx, mass in _slice_terms(values, w, g.mask):
            mix = mixture_distribution(dataset, idx)
            ev = float(np.dot(mix.probs, np.broadcast_to(v(gamma, mix.support), mix.support.shape)))
            terms.append(mass * ev * ev)
        out[g.group_id] = math.fsum(terms)
    return _report(V_SPACE, groups, w, out)


def batch_error_gamma(predictor: Any, dataset: ExactDataset, groups: GroupFamily,
                      property_kind_: str | PropertySpec) -> CalibrationReport:
    """Per-group sum over levels of Pr[f = g | G] * (g - Gamma(Y_(g, G)))**2."""
    values = cell_values(predictor)
    w = dataset.weights
    out = {}
    for g in groups:
        terms = []
        for gamma, idx, mass in _slice_terms(values, w, g.mask):
            d = gamma - eval_property(property_kind_, mixture_distribution(dataset, idx))
            terms.append(mass * d * d)
        out[g.group_id] = math.fsum(terms)
    return _report(GAMMA_SPACE, groups, w, out)


@dataclass
class JointCalibrationReport:
    alpha0_equivalent: float
    alpha1_equivalent: float
    slices: list[dict] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"alpha0_equivalent": self.alpha0_equivalent,
                "alpha1_equivalent": self.alpha1_equivalent, "slices": self.slices}

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        cols = ["group_id", "gamma0", "gamma1", "mass", "v0", "v1_true", "gamma0_true"]
        w.writerow(cols)
        for s in self.slices:
            w.writerow([s[c] if isinstance(s[c], str) else repr(s[c]) for c in cols])
        return buf.getvalue()


def joint_error(joint_predictor: Any, dataset: ExactDataset, groups: GroupFamily,
                prop0: PropertySpec, fam1: ConditionalIdFamily) -> JointCalibrationReport:
    """Both joint-calibration error families, rescaled by slice mass.

    alpha0: max over (G, g1) of sum_g0 Pr[G, f0 = g0, f1 = g1] * V0(g0, Y_slice)**2.
    alpha1: max over (G, g0) of sum_g1 Pr[G, f0 = g0, f1 = g1] * V1_{Gamma0(Y_slice)}(g1, Y_slice)**2.
    """
    if isinstance(joint_predictor, tuple):
        f0, f1 = (cell_values(p) for p in joint_predictor)
    else:
        f0, f1 = cell_values(joint_predictor.f0), cell_values(joint_predictor.f1)
    w = dataset.weights
    kind0 = property_kind(prop0)
    by_g1: dict[tuple[str, float], list[float]] = {}
    by_g0: dict[tuple[str, float], list[float]] = {}
    slices = []
    for g in groups:
        members = np.flatnonzero(g.mask)
        pairs = sorted(set(zip(f0[members].tolist(), f1[members].tolist())))
        for a, b in pairs:
            idx = members[(f0[members] == a) & (f1[members] == b)]
            mass = math.fsum(w[idx].tolist())
            mix = mixture_distribution(dataset, idx)
            v0 = float(np.dot(mix.probs, np.broadcast_to(prop0.id_eval(a, mix.support), mix.support.shape)))
            true0 = eval_property(kind0, mix)
            v1 = float(np.dot(mix.probs, np.broadcast_to(fam1.cond_id_eval(true0, b, mix.support),
                                                         mix.support.shape)))
            by_g1.setdefault((g.group_id, b), []).append(mass * v0 * v0)
            by_g0.setdefault((g.group_id, a), []).append(mass * v1 * v1)
            slices.append({"group_id": g.group_id, "gamma0": a, "gamma1": b, "mass": mass,
                           "v0": v0, "v1_true": v1, "gamma0_true": true0})
    a0 = max(math.fsum(t) for t in by_g1.values())
    a1 = max(math.fsum(t) for t in by_g0.values())
    return JointCalibrationReport(a0, a1, slices)


def online_k2(transcript: Any, groups: Sequence[str] | GroupFamily | None, id_fn: Any) -> dict[str, float]:
    """K2 per group, recomputed from the raw rounds.

    Sums of V are accumulated round by round in time order so the result is
    bit-comparable with incrementally maintained statistics.
    """
    v = id_fn.id_eval if isinstance(id_fn, PropertySpec) else id_fn
    names = list(transcript.group_ids if groups is None else
                 (groups.ids if isinstance(groups, GroupFamily) else groups))
    col = {g: transcript.group_ids.index(g) for g in names}
    grid = transcript.grid
    out = {}
    for g in names:
        R = [0.0] * grid.size
        n = [0] * grid.size
        for t in range(len(transcript)):
            if not transcript.member[t, col[g]]:
                continue
            j = int(transcript.p_index[t])
            R[j] += float(v(grid[j], transcript.y[t]))
            n[j] += 1
        out[g] = math.fsum(R[j] * R[j] / n[j] if n[j] else 0.0 for j in range(grid.size))
    return out


def dump_json(obj: Mapping) -> str:
    return json.dumps(obj, indent=2, sort_keys=False) + "\n"
