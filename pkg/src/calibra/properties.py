"""Elicitable properties: identification functions, scores and their constants.

All built-in properties live on the unit square: predictions and labels are
in [0, 1].  Evaluators accept scalars or numpy arrays and broadcast.
"""
from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import ConfigError

MERGE_TOL = 1e-12

Evaluator = Callable[[np.ndarray, np.ndarray], np.ndarray]
CondEvaluator = Callable[[np.ndarray, np.ndarray, np.ndarray], np.ndarray]


@dataclass(frozen=True, eq=False)
class FiniteDistribution:
    """A label distribution with finite support inside [0, 1].

    Support is kept sorted and duplicate-free; atoms closer than ``MERGE_TOL``
    are merged on construction and zero-mass atoms are dropped.
    """

    support: np.ndarray
    probs: np.ndarray

    def __init__(self, support: Sequence[float], probs: Sequence[float]):
        s = np.asarray(support, dtype=float).ravel()
        p = np.asarray(probs, dtype=float).ravel()
        if s.shape != p.shape:
            raise ValueError("support and probs must have the same length")
        if s.size == 0:
            raise ValueError("empty distribution")
        if not np.all(np.isfinite(s)) or not np.all(np.isfinite(p)):
            raise ValueError("non-finite support or probability")
        if np.any(p < 0):
            raise ValueError("negative probability")
        if np.any(s < 0.0) or np.any(s > 1.0):
            raise ValueError("label support must lie in [0, 1]")
        total = float(p.sum())
        if abs(total - 1.0) > 1e-9:
            raise ValueError(f"probabilities sum to {total!r}, expected 1")
        order = np.argsort(s, kind="stable")
        s, p = s[order], p[order]
        keep_s: list[float] = []
        keep_p: list[float] = []
        for value, mass in zip(s.tolist(), p.tolist()):
            if keep_s and value - keep_s[-1] <= MERGE_TOL:
                keep_p[-1] += mass
            else:
                keep_s.append(value)
                keep_p.append(mass)
        s_arr = np.array(keep_s)
        p_arr = np.array(keep_p)
        nz = p_arr > 0
        s_arr, p_arr = s_arr[nz], p_arr[nz]
        if s_arr.size == 0:
            raise ValueError("distribution has no positive mass")
        p_arr = p_arr / p_arr.sum()
        s_arr.setflags(write=False)
        p_arr.setflags(write=False)
        object.__setattr__(self, "support", s_arr)
        object.__setattr__(self, "probs", p_arr)

    @classmethod
    def point(cls, y: float) -> "FiniteDistribution":
        return cls([y], [1.0])

    @classmethod
    def from_mapping(cls, mapping: dict[float, float]) -> "FiniteDistribution":
        items = sorted(mapping.items())
        return cls([k for k, _ in items], [v for _, v in items])

    def mean(self) -> float:
        return float(np.dot(self.support, self.probs))

    def cdf(self, y: float) -> float:
        return float(self.probs[self.support <= y].sum())

    def expect(self, fn: Callable[[np.ndarray], np.ndarray]) -> float:
        return float(np.dot(self.probs, fn(self.support)))

    def to_dict(self) -> dict:
        return {"support": self.support.tolist(), "probs": self.probs.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "FiniteDistribution":
        return cls(d["support"], d["probs"])

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, FiniteDistribution):
            return NotImplemented
        return (
            self.support.shape == other.support.shape
            and bool(np.all(self.support == other.support))
            and bool(np.all(self.probs == other.probs))
        )

    def __hash__(self) -> int:
        return hash((self.support.tobytes(), self.probs.tobytes()))

    def __repr__(self) -> str:
        body = ", ".join(f"{s:g}: {p:g}" for s, p in zip(self.support, self.probs))
        return f"FiniteDistribution({{{body}}})"


@dataclass(frozen=True)
class PropertySpec:
    """An elicitable property packaged with its id function and score.

    ``score_eval`` is an antiderivative of ``id_eval`` in the prediction
    argument.  ``kind``/``params`` name the functional so that audits can
    evaluate the true property value of a distribution.
    """

    name: str
    id_eval: Evaluator
    score_eval: Evaluator
    lipschitz_L: float
    id_bound_C: float
    score_range_B: float
    anti_lipschitz_La: float | None = None
    score_lipschitz: float | None = None
    kind: str = ""
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        for attr in ("lipschitz_L", "id_bound_C", "score_range_B"):
            if not getattr(self, attr) > 0:
                raise ValueError(f"{attr} must be positive")
        if self.anti_lipschitz_La is not None and not self.anti_lipschitz_La > 0:
            raise ValueError("anti_lipschitz_La must be positive")


@dataclass(frozen=True)
class ConditionalIdFamily:
    """Id functions for a property that is elicitable on the level sets of ``outer``.

    ``cond_id_eval(g0, g1, y)`` identifies the inner property on the level set
    ``{outer == g0}``; ``bayes_score`` (when set) is the score whose Bayes risk
    the inner property is, so the inner value is ``E[bayes_score(outer(P), y)]``.
    """

    name: str
    outer: PropertySpec
    cond_id_eval: CondEvaluator
    cond_score_eval: CondEvaluator
    cross_lipschitz_Lc: float
    level_lipschitz_L1: float
    cond_score_range_B1: float
    bayes_score: Evaluator | None = None
    inner_kind: str = ""

    def __post_init__(self):
        for attr in ("cross_lipschitz_Lc", "level_lipschitz_L1", "cond_score_range_B1"):
            if not getattr(self, attr) > 0:
                raise ValueError(f"{attr} must be positive")


def _check_tau(tau: float) -> float:
    tau = float(tau)
    if not 0.0 < tau < 1.0:
        raise ValueError(f"tau must lie in (0, 1), got {tau!r}")
    return tau


def mean_property() -> PropertySpec:
    def v(g, y):
        return np.asarray(g, dtype=float) - np.asarray(y, dtype=float)

    def s(g, y):
        d = np.asarray(g, dtype=float) - np.asarray(y, dtype=float)
        return 0.5 * d * d

    return PropertySpec(
        name="mean",
        id_eval=v,
        score_eval=s,
        lipschitz_L=1.0,
        anti_lipschitz_La=1.0,
        id_bound_C=1.0,
        score_range_B=0.5,
        score_lipschitz=1.0,
        kind="mean",
    )


def pinball_score(tau: float) -> Evaluator:
    tau = _check_tau(tau)

    def s(g, y):
        g = np.asarray(g, dtype=float)
        y = np.asarray(y, dtype=float)
        return (1.0 - tau) * g + np.maximum(y - g, 0.0)

    return s


def rescaled_pinball_score(tau: float) -> Evaluator:
    """Pinball loss divided by (1 - tau); its Bayes risk is CVaR_tau."""
    tau = _check_tau(tau)
    inv = 1.0 / (1.0 - tau)

    def s(g, y):
        g = np.asarray(g, dtype=float)
        y = np.asarray(y, dtype=float)
        return g + np.maximum(y - g, 0.0) * inv

    return s


def quantile_property(
    tau: float, density_upper_M2: float, density_lower_M1: float | None = None
) -> PropertySpec:
    """tau-quantile with id ``1[y <= g] - tau`` and the pinball score.

    The Lipschitz constant is the caller's density upper bound; the
    anti-Lipschitz constant (if a lower bound is given) is ``1 / M1``.
    """
    tau = _check_tau(tau)
    if not density_upper_M2 > 0:
        raise ValueError("density upper bound must be positive")
    if density_lower_M1 is not None and not density_lower_M1 > 0:
        raise ValueError("density lower bound must be positive")

    def v(g, y):
        g = np.asarray(g, dtype=float)
        y = np.asarray(y, dtype=float)
        return (y <= g).astype(float) - tau

    return PropertySpec(
        name=f"quantile(tau={tau:g})",
        id_eval=v,
        score_eval=pinball_score(tau),
        lipschitz_L=float(density_upper_M2),
        anti_lipschitz_La=None if density_lower_M1 is None else 1.0 / density_lower_M1,
        id_bound_C=max(tau, 1.0 - tau),
        score_range_B=1.0,
        score_lipschitz=max(tau, 1.0 - tau),
        kind="quantile",
        params={"tau": tau, "m1": density_lower_M1, "m2": float(density_upper_M2)},
    )


def _score_extent(score: Evaluator, n: int = 1001) -> tuple[float, float]:
    # Built-in scores are piecewise quadratic with kinks on the diagonal, so
    # a grid containing the corners and the diagonal attains both extremes.
    grid = np.linspace(0.0, 1.0, n)
    vals = score(grid[:, None], grid[None, :])
    return float(vals.min()), float(vals.max())


def bayes_pair_family(
    base: PropertySpec,
    bayes_score: Evaluator | None = None,
    bayes_score_lipschitz: float | None = None,
    name: str | None = None,
    inner_kind: str = "bayes_risk",
) -> ConditionalIdFamily:
    """Conditional id family for the Bayes risk of ``base``.

    Inner id: ``g1 - S(g0, y)``; inner score ``(g1 - S(g0, y))**2 / 2``.
    ``bayes_score`` overrides the base score (the quantile/CVaR pair needs
    the rescaled pinball loss).
    """
    score = bayes_score if bayes_score is not None else base.score_eval
    if score is None:
        raise ValueError("base property has no score function")
    lip = bayes_score_lipschitz
    if lip is None:
        if bayes_score is not None:
            raise ValueError("a custom Bayes score needs its Lipschitz constant")
        lip = base.score_lipschitz
    if lip is None or not lip > 0:
        raise ValueError("Bayes score Lipschitz constant must be positive")

    def v1(g0, g1, y):
        return np.asarray(g1, dtype=float) - score(g0, y)

    def s1(g0, g1, y):
        d = np.asarray(g1, dtype=float) - score(g0, y)
        return 0.5 * d * d

    lo, hi = _score_extent(score)
    # (g1 - s)^2 / 2 with g1 in [0, 1] and s in [lo, hi]: extremes at corners.
    corner = max((g - s) ** 2 for g in (0.0, 1.0) for s in (lo, hi)) / 2.0
    overlap = hi >= 0.0 and lo <= 1.0
    floor = 0.0 if overlap else min((g - s) ** 2 for g in (0.0, 1.0) for s in (lo, hi)) / 2.0
    b1 = corner - floor

    return ConditionalIdFamily(
        name=name or f"bayes({base.name})",
        outer=base,
        cond_id_eval=v1,
        cond_score_eval=s1,
        cross_lipschitz_Lc=float(lip),
        level_lipschitz_L1=1.0,
        cond_score_range_B1=b1,
        bayes_score=score,
        inner_kind=inner_kind,
    )


def mean_variance_family() -> ConditionalIdFamily:
    """(mean, Bayes risk of the halved squared loss) = (mean, variance / 2)."""
    return bayes_pair_family(mean_property(), name="mean_variance", inner_kind="half_variance")


def quantile_cvar_family(tau: float, m1: float, m2: float) -> ConditionalIdFamily:
    tau = _check_tau(tau)
    base = quantile_property(tau, m2, m1)
    return bayes_pair_family(
        base,
        bayes_score=rescaled_pinball_score(tau),
        bayes_score_lipschitz=max(1.0, tau / (1.0 - tau)),
        name=f"quantile_cvar(tau={tau:g})",
        inner_kind="cvar",
    )


def expected_id(spec, gammas, dist: FiniteDistribution) -> float:
    """Exact expectation of the id function over ``dist``.

    ``gammas`` is a scalar for a :class:`PropertySpec` and a ``(g0, g1)`` pair
    for a :class:`ConditionalIdFamily`.
    """
    if isinstance(spec, ConditionalIdFamily):
        g0, g1 = gammas
        vals = spec.cond_id_eval(g0, g1, dist.support)
    else:
        vals = spec.id_eval(gammas, dist.support)
    return float(np.dot(dist.probs, np.broadcast_to(vals, dist.support.shape)))


def expected_score(spec, gammas, dist: FiniteDistribution) -> float:
    if isinstance(spec, ConditionalIdFamily):
        g0, g1 = gammas
        vals = spec.cond_score_eval(g0, g1, dist.support)
    else:
        vals = spec.score_eval(gammas, dist.support)
    return float(np.dot(dist.probs, np.broadcast_to(vals, dist.support.shape)))


_CALL_RE = re.compile(r"^\s*([a-z_]+)\s*(?:\((.*)\))?\s*$")


def _parse_kwargs(body: str | None) -> dict[str, float]:
    out: dict[str, float] = {}
    if not body or not body.strip():
        return out
    for part in body.split(","):
        if "=" not in part:
            raise ConfigError(f"expected key=value in property arguments, got {part!r}")
        k, v = part.split("=", 1)
        try:
            out[k.strip()] = float(v)
        except ValueError as exc:
            raise ConfigError(f"non-numeric property argument {part!r}") from exc
    return out


def parse_property(text: str) -> PropertySpec | ConditionalIdFamily:
    """Resolve a config string such as ``quantile(tau=0.9, m2=2)``."""
    m = _CALL_RE.match(text)
    if not m:
        raise ConfigError(f"cannot parse property {text!r}")
    name, kwargs = m.group(1), _parse_kwargs(m.group(2))

    def need(*keys):
        missing = [k for k in keys if k not in kwargs]
        if missing:
            raise ConfigError(f"property {name!r} requires {', '.join(missing)}")
        extra = set(kwargs) - set(keys) - {"m1"}
        if extra:
            raise ConfigError(f"unknown arguments for {name!r}: {sorted(extra)}")

    try:
        if name == "mean":
            need()
            return mean_property()
        if name == "quantile":
            need("tau", "m2")
            return quantile_property(kwargs["tau"], kwargs["m2"], kwargs.get("m1"))
        if name == "mean_variance":
            need()
            return mean_variance_family()
        if name == "quantile_cvar":
            need("tau", "m1", "m2")
            return quantile_cvar_family(kwargs["tau"], kwargs["m1"], kwargs["m2"])
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    raise ConfigError(f"unknown property {name!r}")


def grid_points(m: int) -> np.ndarray:
    """The m-point prediction grid {1/(m+1), ..., m/(m+1)}."""
    if m < 1:
        raise ValueError("grid granularity m must be >= 1")
    return np.arange(1, m + 1, dtype=float) / (m + 1)


def nearest_grid_index(value: float, m: int) -> int:
    """Index of the grid point closest to ``value`` (ties to the smaller point)."""
    g = grid_points(m)
    d = np.abs(g - value)
    return int(np.flatnonzero(d == d.min())[0])


__all__ = [
    "FiniteDistribution",
    "PropertySpec",
    "ConditionalIdFamily",
    "mean_property",
    "quantile_property",
    "pinball_score",
    "rescaled_pinball_score",
    "bayes_pair_family",
    "mean_variance_family",
    "quantile_cvar_family",
    "expected_id",
    "expected_score",
    "parse_property",
    "grid_points",
    "nearest_grid_index",
]
