"""Online multicalibration against an adversary via exponentially weighted
stage games, plus the generic multiobjective learner on explicit games.

Each round the learner holds weights over the |groups| x m coordinates
(group, grid value), solves the zero-sum stage game min_P max_y sum chi*loss
and samples its prediction from P.
"""
from __future__ import annotations

import csv
import io
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Callable, Mapping, Sequence

import numpy as np
from numba import njit

from .audit import eval_property, property_kind
from .dataset import GroupFamily
from .errors import AdversaryError, ConfigError
from .gamesolve import solve_zero_sum
from .properties import FiniteDistribution, PropertySpec, grid_points, nearest_grid_index

DEFAULT_LABEL_POINTS = 101


def label_grid(points: int = DEFAULT_LABEL_POINTS) -> np.ndarray:
    if points < 2:
        raise ConfigError("label grid needs at least two points")
    return np.arange(points, dtype=float) / (points - 1)


def rng_pair(seed: int) -> tuple[np.random.Generator, np.random.Generator]:
    """Independent counter-based streams for the learner and the adversary."""
    learner, adversary = np.random.SeedSequence(seed).spawn(2)
    return np.random.Generator(np.random.Philox(learner)), np.random.Generator(np.random.Philox(adversary))


# --- transcript ---------------------------------------------------------------

@dataclass
class Transcript:
    grid: np.ndarray
    group_ids: list[str]
    cell: np.ndarray
    member: np.ndarray  # rounds x groups
    p_index: np.ndarray
    y: np.ndarray
    n: np.ndarray  # groups x m running counts
    R: np.ndarray  # groups x m running id sums
    k2_history: list[dict[str, float]] | None = None

    def __len__(self) -> int:
        return int(self.cell.size)

    @property
    def p(self) -> np.ndarray:
        return self.grid[self.p_index]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["t", "cell", "groups", "p", "y"])
        for t in range(len(self)):
            gs = ";".join(g for g, inside in zip(self.group_ids, self.member[t]) if inside)
            w.writerow([t, int(self.cell[t]), gs, repr(float(self.grid[self.p_index[t]])), repr(float(self.y[t]))])
        return buf.getvalue()


def k2_from_running(R: np.ndarray, n: np.ndarray, group_ids: Sequence[str]) -> dict[str, float]:
    out = {}
    for g, gid in enumerate(group_ids):
        out[gid] = math.fsum(float(R[g, j]) * float(R[g, j]) / int(n[g, j]) if n[g, j] else 0.0
                             for j in range(R.shape[1]))
    return out


def stage_loss(n: int, R: float, v: float, in_group: bool = True, same_level: bool = True) -> float:
    """Loss of coordinate (G, g) for a round with prediction p and id value v = V(g, y).

    ``n`` and ``R`` are the count and id sum of (G, g) before the round.
    """
    if not (in_group and same_level):
        return 0.0
    return (2.0 * v * R + v * v) / max(n, 1)


# --- adversaries ----------------------------------------------------------------

class Adversary:
    """Chooses a feature cell and a label distribution each round.

    Subclasses set ``features`` (rows used for group membership) and
    ``avg_lipschitz_L`` and implement :meth:`next`.
    """

    features: list[dict[str, Any]]
    avg_lipschitz_L: float

    def reset(self, rng: np.random.Generator, T: int) -> None:
        self.rng = rng
        self.T = T

    def next(self, t: int, transcript_prefix: Any) -> tuple[int, FiniteDistribution]:
        raise NotImplementedError


def density_grid_distribution(labels: np.ndarray, m1: float, m2: float, rng: np.random.Generator) -> FiniteDistribution:
    """Random distribution on the label grid whose atom masses stay within
    [m1, m2] times the uniform mass."""
    k = labels.size
    raw = rng.uniform(m1, m2, size=k)
    lo, hi = m1 - raw.max(), m2 - raw.min()
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if np.clip(raw + mid, m1, m2).mean() < 1.0:
            lo = mid
        else:
            hi = mid
    d = np.clip(raw + 0.5 * (lo + hi), m1, m2)
    return FiniteDistribution(labels, d / d.sum())


def uniform_interval_distribution(labels: np.ndarray, lo: float, hi: float) -> FiniteDistribution:
    sel = (labels >= lo - 1e-12) & (labels <= hi + 1e-12)
    if not sel.any():
        raise AdversaryError(f"no label grid point in [{lo}, {hi}]")
    return FiniteDistribution(labels[sel], np.full(int(sel.sum()), 1.0 / sel.sum()))


def default_features(cells: int) -> list[dict[str, Any]]:
    return [{"idx": i, "parity": i % 2, "half": int(i >= cells / 2), "third": int(i % 3 == 0)}
            for i in range(cells)]


def default_online_groups() -> list[dict]:
    return [
        {"id": "even", "column": "parity", "op": "equals", "args": [0]},
        {"id": "upper", "column": "half", "op": "equals", "args": [1]},
        {"id": "third", "column": "third", "op": "equals", "args": [1]},
    ]


class IIDAdversary(Adversary):
    """Uniformly random cell; each cell has a fixed label distribution."""

    def __init__(self, dists: Sequence[FiniteDistribution], L: float,
                 features: list[dict[str, Any]] | None = None):
        self.dists = list(dists)
        self.features = features or default_features(len(self.dists))
        self.avg_lipschitz_L = float(L)

    @classmethod
    def density_bounded(cls, cells: int, m1: float, m2: float, seed: int,
                        labels: np.ndarray | None = None) -> "IIDAdversary":
        labels = label_grid() if labels is None else labels
        rng = np.random.Generator(np.random.Philox(seed))
        dists = [density_grid_distribution(labels, m1, m2, rng) for _ in range(cells)]
        return cls(dists, m2)

    def next(self, t, transcript_prefix):
        c = int(self.rng.integers(len(self.dists)))
        return c, self.dists[c]


class TwoPhaseShiftAdversary(Adversary):
    """Uniform cell; labels uniform on an interval of width ``width`` whose
    center sits at 0.5 - shift for the first half of the run and 0.5 + shift after."""

    def __init__(self, cells: int = 8, shift: float = 0.2, width: float = 0.5,
                 labels: np.ndarray | None = None):
        labels = label_grid() if labels is None else labels
        self.features = default_features(cells)
        self.phases = [uniform_interval_distribution(labels, 0.5 - shift - width / 2, 0.5 - shift + width / 2),
                       uniform_interval_distribution(labels, 0.5 + shift - width / 2, 0.5 + shift + width / 2)]
        spacing = float(labels[1] - labels[0])
        self.avg_lipschitz_L = max(float(d.probs.max()) / spacing for d in self.phases)
        self.cells = cells

    def next(self, t, transcript_prefix):
        c = int(self.rng.integers(self.cells))
        return c, self.phases[0 if t < self.T // 2 else 1]


class ScriptedAdversary(Adversary):
    """Replays a fixed list of (cell, distribution) pairs; used by tests."""

    def __init__(self, script: Sequence[tuple[int, FiniteDistribution]], features: list[dict[str, Any]],
                 L: float = 1.0):
        self.script = list(script)
        self.features = features
        self.avg_lipschitz_L = L

    def next(self, t, transcript_prefix):
        if t >= len(self.script):
            raise AdversaryError("script exhausted")
        return self.script[t]


def make_adversary(spec: Mapping[str, Any], labels: np.ndarray) -> Adversary:
    kind = spec.get("kind")
    if kind == "iid_density":
        return IIDAdversary.density_bounded(int(spec.get("cells", 8)), float(spec.get("m1", 0.5)),
                                            float(spec.get("m2", 2.0)), int(spec.get("seed", 0)), labels)
    if kind == "two_phase":
        return TwoPhaseShiftAdversary(int(spec.get("cells", 8)), float(spec.get("shift", 0.2)),
                                      float(spec.get("width", 0.5)), labels)
    raise ConfigError(f"unknown adversary kind {kind!r}")


# --- learner ---------------------------------------------------------------------

@njit(cache=True)
def _stage_matrix(logits, mem, R, n, Vu):
    G, m = R.shape
    mx = -np.inf
    for g in range(G):
        for j in range(m):
            if logits[g, j] > mx:
                mx = logits[g, j]
    total = 0.0
    chi = np.empty((G, m))
    for g in range(G):
        for j in range(m):
            chi[g, j] = np.exp(logits[g, j] - mx)
            total += chi[g, j]
    c1 = np.zeros(m)
    c2 = np.zeros(m)
    for g in range(G):
        if not mem[g]:
            continue
        for j in range(m):
            x = chi[g, j] / total
            d = max(n[g, j], 1)
            c1[j] += 2.0 * x * R[g, j] / d
            c2[j] += x / d
    A = np.empty(Vu.shape)
    for j in range(m):
        for k in range(Vu.shape[1]):
            v = Vu[j, k]
            A[j, k] = c1[j] * v + c2[j] * v * v
    return A, chi / total


def _solve_stage(A: np.ndarray) -> tuple[np.ndarray, float]:
    sol = solve_zero_sum(A)
    return sol.row, sol.value


def solve_stage_game(payoff: np.ndarray) -> tuple[np.ndarray, float]:
    """Minimizing mixed strategy over rows and the game value."""
    sol = solve_zero_sum(np.asarray(payoff, dtype=float))
    return sol.row, sol.value


def learning_rate(d: int, T: int, C: float) -> float:
    c_prime = 3.0 * C * C
    return math.sqrt(math.log(d) / (4.0 * T * c_prime ** 2)) if d > 1 else 0.0


def theorem_bound(C: float, L: float, m: int, T: int, n_groups: int) -> float:
    return 2 * C * L / m + 2 * C * C * math.log(T) / T + 12 * C * C * math.sqrt(math.log(n_groups * m) / T)


@dataclass
class OnlineReport:
    seed: int
    T: int
    k2: dict[str, float]
    alpha: dict[str, float]
    max_alpha: float
    bound: float
    mean_L_eff: float | None = None
    stage_bound_violation: float | None = None

    def to_dict(self) -> dict:
        return {"seed": self.seed, "T": self.T, "k2": self.k2, "alpha": self.alpha,
                "max_alpha": self.max_alpha, "bound": self.bound, "mean_L_eff": self.mean_L_eff,
                "stage_bound_violation": self.stage_bound_violation}


def run_online(id_fn: PropertySpec, C: float, groups: GroupFamily | Sequence[Mapping], m: int, T: int,
               adversary: Adversary, seed: int, labels: np.ndarray | None = None,
               track_k2: bool = False, instrument: bool = False) -> tuple[Transcript, dict[str, float], OnlineReport]:
    """Play T rounds; returns the transcript, final per-group K2 and a report.

    ``groups`` is a family built on ``adversary.features`` or a list of
    predicate configs applied to them.
    """
    from .dataset import groups_from_config

    if T < 1:
        raise ConfigError("T must be >= 1")
    labels = label_grid() if labels is None else np.asarray(labels, dtype=float)
    if not isinstance(groups, GroupFamily):
        groups = _feature_groups(adversary.features, groups, groups_from_config)
    if groups.size != len(adversary.features):
        raise ConfigError("group family does not match the adversary's feature cells")
    membership = groups.masks().T.copy()  # cells x groups
    G = len(groups)
    grid = grid_points(m)
    d = G * m
    if T < math.log(d):
        raise ConfigError(f"T={T} is below ln(|groups| * m) = {math.log(d):.3f}")
    eta = learning_rate(d, T, C)

    V = np.asarray(np.broadcast_to(id_fn.id_eval(grid[:, None], labels[None, :]), (m, labels.size)), dtype=float)
    Vu, col_of_label = np.unique(V, axis=1, return_inverse=True)
    Vu = np.ascontiguousarray(Vu)
    col_of_label = np.asarray(col_of_label).ravel()
    label_pos = {float(v): i for i, v in enumerate(labels)}
    kind = property_kind(id_fn) if instrument else None

    learner_rng, adv_rng = rng_pair(seed)
    adversary.reset(adv_rng, T)
    cum = np.zeros((G, m))
    R = np.zeros((G, m))
    n = np.zeros((G, m), dtype=np.int64)
    cells = np.empty(T, dtype=np.int64)
    p_idx = np.empty(T, dtype=np.int64)
    ys = np.empty(T)
    history = [] if track_k2 else None
    prefix = _Prefix(grid, groups.ids, membership, cells, p_idx, ys)
    cache: dict[int, tuple[np.ndarray, np.ndarray, FiniteDistribution]] = {}
    l_eff_sum = 0.0
    worst = -np.inf

    for t in range(T):
        prefix.t = t
        c, dist = adversary.next(t, prefix)
        if not 0 <= c < membership.shape[0]:
            raise AdversaryError(f"round {t}: unknown cell {c!r}")
        key = id(dist)
        if key not in cache:
            lab = _label_indices(dist, label_pos, t)
            truth = nearest_grid_index(eval_property(kind, dist), m) if instrument else -1
            cache[key] = (lab, np.cumsum(dist.probs), dist, truth)
        lab_idx, cdf, _, jn = cache[key]
        mem = membership[c]
        A, _ = _stage_matrix(eta * cum, mem, R, n, Vu)
        P, value = _solve_stage(A)
        u = learner_rng.random()
        cp = np.cumsum(P)
        j = min(int(np.searchsorted(cp, u * cp[-1], side="right")), m - 1)
        ub = adv_rng.random()
        b = lab_idx[min(int(np.searchsorted(cdf, ub * cdf[-1], side="right")), cdf.size - 1)]
        y = float(labels[b])
        v = float(V[j, b])

        if instrument:
            ev_near = float(np.dot(dist.probs, V[jn, lab_idx]))
            l_eff = m * abs(ev_near)
            l_eff_sum += l_eff
            revealed = A[:, col_of_label[lab_idx]] @ dist.probs
            n_min = min(int(n[g, jn]) for g in np.flatnonzero(mem)) if mem.any() else 0
            bound = 2 * C * l_eff / m + C * C / max(n_min, 1)
            worst = max(worst, float(revealed.min()) - bound)

        for g in np.flatnonzero(mem):
            cum[g, j] += (2.0 * v * R[g, j] + v * v) / max(int(n[g, j]), 1)
            R[g, j] += v
            n[g, j] += 1
        cells[t] = c
        p_idx[t] = j
        ys[t] = y
        if track_k2:
            history.append(k2_from_running(R, n, groups.ids))

    tr = Transcript(grid, list(groups.ids), cells, membership[cells], p_idx, ys, n, R, history)
    k2 = k2_from_running(R, n, groups.ids)
    alpha = {g: v / T for g, v in k2.items()}
    report = OnlineReport(
        seed, T, k2, alpha, max(alpha.values()),
        theorem_bound(C, adversary.avg_lipschitz_L, m, T, G),
        l_eff_sum / T if instrument else None,
        worst if instrument else None,
    )
    return tr, k2, report


class _Prefix:
    """Read-only view of the rounds played so far, handed to adversaries."""

    def __init__(self, grid, group_ids, membership, cells, p_idx, ys):
        self.grid, self.group_ids, self.membership = grid, group_ids, membership
        self._cells, self._p, self._y = cells, p_idx, ys
        self.t = 0

    def __len__(self):
        return self.t

    @property
    def predictions(self) -> np.ndarray:
        return self.grid[self._p[: self.t]]

    @property
    def labels(self) -> np.ndarray:
        return self._y[: self.t].copy()

    @property
    def cells(self) -> np.ndarray:
        return self._cells[: self.t].copy()


def _label_indices(dist: FiniteDistribution, label_pos: Mapping[float, int], t: int) -> np.ndarray:
    out = []
    for s in dist.support.tolist():
        if s not in label_pos:
            raise AdversaryError(f"round {t}: label {s!r} is not on the label grid")
        out.append(label_pos[s])
    return np.array(out, dtype=np.int64)


def _feature_groups(features, predicates, builder) -> GroupFamily:
    class _Rows:
        def rows(self_inner):
            return features
    return builder(_Rows(), predicates)


def _seed_job(args):
    id_fn, C, groups, m, T, adversary_factory, seed, labels = args
    transcript, _, report = run_online(id_fn, C, groups, m, T, adversary_factory(), seed, labels)
    return transcript, report


def run_online_seeds(id_fn: PropertySpec, C: float, groups: Sequence[Mapping], m: int, T: int,
                     adversary_factory: Callable[[], Adversary], seeds: Sequence[int],
                     labels: np.ndarray | None = None,
                     threads: int | None = None) -> list[tuple[Transcript, OnlineReport]]:
    """Independent runs, one per seed, returned in seed order as (transcript, report).

    ``threads`` (default: CALIBRA_THREADS or 1) caps the process fan-out;
    parallel fan-out needs a picklable factory (e.g. a functools.partial).
    """
    if threads is None:
        threads = int(os.environ.get("CALIBRA_THREADS", "1") or 1)
    jobs = [(id_fn, C, groups, m, T, adversary_factory, s, labels) for s in seeds]
    if threads <= 1 or len(jobs) <= 1:
        return [_seed_job(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(_seed_job, jobs))


# --- generic multiobjective learner on explicit games ------------------------------

@dataclass
class AMFReport:
    T: int
    d: int
    regret: float
    regret_vs_upper: float
    bound: float
    cumulative_loss: list[float] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"T": self.T, "d": self.d, "regret": self.regret,
                "regret_vs_upper": self.regret_vs_upper, "bound": self.bound,
                "cumulative_loss": self.cumulative_loss}


def amf_value_bounds(game: np.ndarray) -> tuple[float, float]:
    """Bracket the adversary-moves-first value of a (d, actions, responses) game.

    Lower: the best pure adversary response evaluated exactly (the learner
    answers with a mixed strategy, an LP over actions x objectives).
    Upper: the learner-moves-first value min_P max_{b, j} loss_j(P, b).
    """
    d, na, nb = game.shape
    lower = max(solve_zero_sum(game[:, :, b].T).value for b in range(nb))
    upper = solve_zero_sum(game.transpose(1, 2, 0).reshape(na, nb * d)).value
    return lower, upper


def run_amf_matrix_game(games: Sequence[np.ndarray] | Callable[[int], np.ndarray], T: int,
                        C: float = 1.0) -> AMFReport:
    """Exponential weights over d objectives against a best-responding adversary.

    Each stage game is an array (d, learner actions, adversary actions) with
    entries in [-C, C].  The learner plays argmin_P max_b sum_j chi_j loss_j(P, b);
    the adversary answers with the pure b maximizing max_j loss_j(P, b).
    Regret is measured against the per-round adversary-moves-first value
    (its lower bracket, which can only overstate regret).
    """
    first = games(0) if callable(games) else games[0]
    d = first.shape[0]
    eta = math.sqrt(math.log(d) / (4.0 * T * C * C)) if d > 1 else 0.0
    cum = np.zeros(d)
    w_low = []
    w_up = []
    for t in range(T):
        game = np.asarray(games(t) if callable(games) else games[t], dtype=float)
        if game.shape[0] != d:
            raise ConfigError("all stage games must share the objective count d")
        if np.abs(game).max() > C + 1e-12:
            raise ConfigError(f"stage game {t} has entries outside [-C, C]")
        z = eta * cum
        chi = np.exp(z - z.max())
        chi /= chi.sum()
        M = np.tensordot(chi, game, axes=1)
        sol = solve_zero_sum(M)
        per_obj = np.einsum("a,jab->jb", sol.row, game)
        b = int(np.argmax(per_obj.max(axis=0)))
        cum += per_obj[:, b]
        lo, up = amf_value_bounds(game)
        w_low.append(max(lo, sol.value))
        w_up.append(up)
    regret = float(cum.max() - math.fsum(w_low))
    regret_up = float(cum.max() - math.fsum(w_up))
    return AMFReport(T, d, regret, regret_up, 4 * C * math.sqrt(T * math.log(d)), cum.tolist())


def random_bilinear_games(T: int, d: int, actions: int, responses: int, seed: int,
                          C: float = 1.0) -> np.ndarray:
    rng = np.random.Generator(np.random.Philox(seed))
    return rng.uniform(-C, C, size=(T, d, actions, responses))
