import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from calibra.audit import joint_error
from calibra.dataset import (GroupFamily, groups_from_config, make_bernoulli_dataset,
                             make_variance_counterexample, synth_bounded_density)
from calibra.errors import ConfigError, NonTermination
from calibra.joint import (JointConfig, JointPredictor, apply_joint_predictor, build_level_set_groups,
                           joint_multicalibrate)
from calibra.properties import (grid_points, mean_property, mean_variance_family, quantile_cvar_family,
                                quantile_property)

M = 19
G = grid_points(M)


def singleton_groups():
    return GroupFamily.from_masks([("x0", [1, 0]), ("x1", [0, 1])])


def mv_config(m=M):
    return JointConfig.for_family(mean_property(), mean_variance_family(), m, Lc=2.0)


# --- config ---------------------------------------------------------------------------------

def test_config_constants():
    cfg = mv_config()
    assert cfg.alpha0 == pytest.approx(4 / 19)
    assert cfg.alpha1 == pytest.approx(4 / 19)
    assert cfg.alpha1_star == pytest.approx(8 * (4 + 1) / 19)
    assert cfg.budget == pytest.approx(0.5 * 0.5 * 19 ** 4)
    qc = JointConfig.for_family(quantile_property(0.5, 2.0, 0.5), quantile_cvar_family(0.5, 0.5, 2.0), 20)
    # L0 = 2, La = 1 / 0.5, Lc = 1, L1 = 1
    assert qc.alpha1_star == pytest.approx(8 * (16 + 1) / 20)


@pytest.mark.parametrize("bad", [dict(L0=0), dict(La=-1), dict(B1=0)])
def test_config_rejects_nonpositive(bad):
    kw = dict(m=9, L0=1, La=1, Lc=1, L1=1, B0=1, B1=1) | bad
    with pytest.raises(ConfigError):
        JointConfig.from_constants(**kw)


def test_config_requires_anti_lipschitz():
    with pytest.raises(ConfigError):
        JointConfig.for_family(quantile_property(0.5, 2.0), quantile_cvar_family(0.5, 0.5, 2.0), 9)


# --- level-set groups --------------------------------------------------------------------------

def test_level_sets_of_constant_predictor_are_the_base_groups():
    base = GroupFamily.from_masks([("a", [1, 0, 1])], 3)
    fam, tags = build_level_set_groups(base, [0.3, 0.3, 0.3])
    assert [g.mask.tolist() for g in fam] == [g.mask.tolist() for g in base]
    assert tags == [("f", 0.3), ("f", 0.3)]


def test_level_sets_of_two_level_predictor():
    fam, _ = build_level_set_groups(GroupFamily.from_masks([], 3), [0.1, 0.9, 0.1])
    assert [g.mask.tolist() for g in fam] == [[True, False, True], [False, True, False]]


def test_level_sets_drop_empty_intersections():
    base = GroupFamily.from_masks([("a", [1, 0, 0, 0]), ("b", [0, 0, 1, 1])], 4)
    fam, _ = build_level_set_groups(base, [0.1, 0.1, 0.9, 0.9], "f1")
    assert len(fam) == 4 <= 3 * 2
    assert fam.ids == ["all×f1=0.1", "all×f1=0.9", "a×f1=0.1", "b×f1=0.9"]


# --- runs ----------------------------------------------------------------------------------------

def test_jointly_calibrated_start_is_left_alone():
    data = make_variance_counterexample()
    jp, trace = joint_multicalibrate(mean_property(), mean_variance_family(), data, singleton_groups(), M,
                                     f_init=([G[0], G[-1]], [G[0], G[0]]), config=mv_config())
    assert trace.total_updates == 0
    assert [o for o in trace.outer if "outer" in o] == []


def test_variance_counterexample_converges_to_cellwise_values():
    data = make_variance_counterexample()
    fam = singleton_groups()
    cfg = mv_config()
    jp, trace = joint_multicalibrate(mean_property(), mean_variance_family(), data, fam, M, config=cfg)
    # nearest grid points to the cell means 0 and 1, and to the zero within-cell variance
    assert jp.f0.current.tolist() == [G[0], G[-1]]
    assert jp.f1.current.tolist() == [G[0], G[0]]
    rep = joint_error(jp, data, fam, mean_property(), mean_variance_family())
    assert rep.alpha0_equivalent <= 4 / M
    assert rep.alpha1_equivalent <= 40 / M
    # hand sum: both singleton slices carry 0.5 * 0.05^2 for V0
    assert rep.alpha0_equivalent == pytest.approx(2 * 0.5 * 0.05 ** 2)
    assert trace.total_updates <= cfg.budget


@st.composite
def bernoulli_joint_case(draw):
    n = draw(st.integers(2, 8))
    probs = draw(st.lists(st.integers(0, 8).map(lambda k: k / 8), min_size=n, max_size=n))
    masks = draw(st.lists(st.lists(st.booleans(), min_size=n, max_size=n).filter(any), max_size=3))
    return make_bernoulli_dataset(probs), GroupFamily.from_masks([(f"g{i}", m) for i, m in enumerate(masks)], n)


@settings(max_examples=40, deadline=None)
@given(bernoulli_joint_case())
def test_postconditions_replay_and_stitching(case):
    data, fam = case
    cfg = mv_config()
    mv = mean_variance_family()
    jp, trace = joint_multicalibrate(mean_property(), mv, data, fam, M, config=cfg)
    rep = joint_error(jp, data, fam, mean_property(), mv)
    assert rep.alpha0_equivalent <= cfg.alpha0 + 1e-12
    assert rep.alpha1_equivalent <= cfg.alpha1_star + 1e-12
    assert trace.total_updates <= cfg.budget
    assert all(o.get("f1_within_cap", True) for o in trace.outer)
    assert trace.outer[-1]["f0_total_within_cap"]
    f0, f1 = apply_joint_predictor(jp, data, fam)
    assert np.array_equal(f0, jp.f0.current) and np.array_equal(f1, jp.f1.current)
    # every f1 patch was restricted to one f0 level set
    assert all(r.on is not None and r.on[0] == "f0" for r in jp.f1.update_log)
    assert set(np.concatenate([f0, f1]).tolist()) <= set(G.tolist())


def test_parallel_matches_sequential():
    data = make_bernoulli_dataset([0.0, 1.0, 0.5, 0.25, 0.75, 0.1, 0.9, 0.6])
    fam = groups_from_config(data, [{"id": "even", "column": "parity", "op": "equals", "args": [0]},
                                    {"id": "hi", "column": "half", "op": "equals", "args": [1]}])
    args = (mean_property(), mean_variance_family(), data, fam, M)
    a, ta = joint_multicalibrate(*args, config=mv_config())
    b, tb = joint_multicalibrate(*args, config=mv_config(), parallel=True)
    assert a.to_dict() == b.to_dict()
    assert ta.to_dict() == tb.to_dict()


def test_quantile_cvar_run_meets_postconditions():
    data = synth_bounded_density(4, 50, 0.5, 2.0, seed=5)
    fam = groups_from_config(data, [{"id": "even", "column": "parity", "op": "equals", "args": [0]}])
    q, qc = quantile_property(0.5, 2.0, 0.5), quantile_cvar_family(0.5, 0.5, 2.0)
    cfg = JointConfig.for_family(q, qc, 20)
    jp, trace = joint_multicalibrate(q, qc, data, fam, 20, f_init=(grid_points(20)[0], grid_points(20)[0]), config=cfg)
    assert trace.total_updates >= 1
    rep = joint_error(jp, data, fam, q, qc)
    assert rep.alpha0_equivalent <= cfg.alpha0 and rep.alpha1_equivalent <= cfg.alpha1_star


def test_outer_iteration_cap():
    data = make_variance_counterexample()
    with pytest.raises(NonTermination):
        joint_multicalibrate(mean_property(), mean_variance_family(), data, singleton_groups(), M,
                             config=mv_config(), max_outer=0)


def test_joint_predictor_round_trip(tmp_path):
    data = make_variance_counterexample()
    jp, _ = joint_multicalibrate(mean_property(), mean_variance_family(), data, singleton_groups(), M,
                                 config=mv_config())
    path = tmp_path / "jp.json"
    jp.save(path)
    back = JointPredictor.load(path)
    assert back.to_dict() == jp.to_dict()
    f0, f1 = apply_joint_predictor(back, data, singleton_groups())
    assert np.array_equal(f0, jp.f0.current) and np.array_equal(f1, jp.f1.current)
    bad = jp.to_dict() | {"m": 7}
    with pytest.raises(ConfigError):
        JointPredictor.from_dict(bad)
