"""calibra command line: batch/joint calibration, online simulation, audits, demos.

Exit codes: 0 success, 1 configuration or data error, 2 audit failure.
"""
from __future__ import annotations

import argparse
import csv
import functools
import io
import json
import math
import sys
from pathlib import Path
from typing import Sequence

from . import audit, dataset, functionals
from .batch import DiscretizedPredictor, apply_predictor, batch_multicalibrate
from .config import RunConfig, load_config
from .errors import CalibraError, ConfigError, DataError
from .io import atomic_write_text, write_json
from .joint import JointConfig, JointPredictor, apply_joint_predictor, joint_multicalibrate
from .online import TwoPhaseShiftAdversary, IIDAdversary, label_grid, run_online_seeds, theorem_bound
from .properties import ConditionalIdFamily, FiniteDistribution, PropertySpec, parse_property

EXIT_OK, EXIT_CONFIG, EXIT_AUDIT = 0, 1, 2
AUDIT_TOL = 1e-9


class _Out:
    def __init__(self, quiet: bool):
        self.quiet = quiet

    def __call__(self, *parts) -> None:
        if not self.quiet:
            print(*parts)


def _load_dataset(cfg: RunConfig) -> dataset.ExactDataset:
    block = cfg.dataset
    if block is None:
        raise ConfigError("config has no dataset block")
    if block.exact:
        try:
            return dataset.ExactDataset.load(cfg.resolve(block.exact))
        except OSError as exc:
            raise DataError(f"cannot read dataset: {exc}") from exc
    if block.csv:
        c = block.csv
        try:
            return dataset.load_csv(cfg.resolve(c.path), c.features, c.label).to_exact()
        except OSError as exc:
            raise DataError(f"cannot read CSV: {exc}") from exc
    g = block.generator
    if g is None:
        raise ConfigError("dataset block names no source")
    try:
        if g.kind == "variance_counterexample":
            return dataset.make_variance_counterexample()
        if g.kind == "two_point":
            if g.p1 is None or g.p2 is None or g.lam is None:
                raise ConfigError("two_point generator needs p1, p2 and lambda")
            p1 = FiniteDistribution.from_mapping({float(k): v for k, v in g.p1.items()})
            p2 = FiniteDistribution.from_mapping({float(k): v for k, v in g.p2.items()})
            return dataset.make_two_point_dataset(p1, p2, g.lam)
        if g.kind == "bernoulli":
            if not g.probs:
                raise ConfigError("bernoulli generator needs probs")
            return dataset.make_bernoulli_dataset(g.probs)
        if g.kind == "grid_labels":
            return dataset.make_grid_label_dataset(g.n)
        return dataset.synth_bounded_density(g.cells, g.atoms, g.m1, g.m2, g.seed)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def _property(cfg: RunConfig):
    return parse_property(cfg.property)


def _writer(out_dir: Path):
    def write(name: str, text: str) -> None:
        atomic_write_text(out_dir / name, text)
    return write


def _dump(obj) -> str:
    return json.dumps(obj, indent=2) + "\n"


def cmd_calibrate_batch(cfg: RunConfig, out_dir: Path, say: _Out) -> int:
    prop = _property(cfg)
    if not isinstance(prop, PropertySpec):
        raise ConfigError(f"calibrate-batch needs a single property, got {cfg.property!r}")
    data = _load_dataset(cfg)
    groups = dataset.groups_from_config(data, cfg.group_dicts())
    pred, trace = batch_multicalibrate(prop, data, groups, cfg.m, cfg.f_init, cfg.alpha)
    alpha = cfg.alpha if cfg.alpha is not None else 4 * prop.lipschitz_L ** 2 / cfg.m
    rep_v = audit.batch_error_v(pred, data, groups, prop)
    rep_g = audit.batch_error_gamma(pred, data, groups, prop)
    write = _writer(out_dir)
    write("predictor.json", _dump(pred.to_dict()))
    write("trace.csv", trace.to_csv())
    write("trace.json", _dump(trace.to_dict()))
    write("report_v.json", _dump({**rep_v.to_dict(), "alpha": alpha}))
    write("report_v.csv", rep_v.to_csv())
    write("report_gamma.json", _dump(rep_g.to_dict()))
    write("report_gamma.csv", rep_g.to_csv())
    worst = rep_v.max_alpha()
    say(f"updates: {trace.updates}  max alpha-equivalent: {worst!r}  threshold: {alpha!r}")
    for g in groups.ids:
        say(f"  {g}: v-space {rep_v.alpha_equivalent[g]:.6g}  gamma-space {rep_g.alpha_equivalent[g]:.6g}")
    return EXIT_OK if worst <= alpha + AUDIT_TOL else EXIT_AUDIT


def _joint_config(cfg: RunConfig, prop0: PropertySpec, fam: ConditionalIdFamily) -> JointConfig:
    return JointConfig.for_family(prop0, fam, cfg.m, La=cfg.joint.La, Lc=cfg.joint.Lc)


def cmd_calibrate_joint(cfg: RunConfig, out_dir: Path, say: _Out) -> int:
    fam = _property(cfg)
    if not isinstance(fam, ConditionalIdFamily):
        raise ConfigError(f"calibrate-joint needs a property pair, got {cfg.property!r}")
    prop0 = fam.outer
    data = _load_dataset(cfg)
    groups = dataset.groups_from_config(data, cfg.group_dicts())
    jcfg = _joint_config(cfg, prop0, fam)
    jp, trace = joint_multicalibrate(prop0, fam, data, groups, cfg.m, (cfg.f_init, cfg.f1_init), jcfg,
                                     parallel=cfg.joint.parallel)
    rep = audit.joint_error(jp, data, groups, prop0, fam)
    write = _writer(out_dir)
    write("joint_predictor.json", _dump(jp.to_dict()))
    write("joint_trace.json", _dump(trace.to_dict()))
    write("joint_report.json", _dump({**rep.to_dict(), "config": jcfg.to_dict()}))
    write("joint_report.csv", rep.to_csv())
    ok = (rep.alpha0_equivalent <= jcfg.alpha0 + AUDIT_TOL
          and rep.alpha1_equivalent <= jcfg.alpha1_star + AUDIT_TOL
          and trace.total_updates <= jcfg.budget)
    say(f"updates: f0 {trace.f0_updates}, f1 {trace.f1_updates} (budget {jcfg.budget:g})")
    say(f"alpha0-equivalent {rep.alpha0_equivalent!r} <= {jcfg.alpha0!r}; "
        f"alpha1-equivalent {rep.alpha1_equivalent!r} <= {jcfg.alpha1_star!r}")
    return EXIT_OK if ok else EXIT_AUDIT


def _adversary_factory(block, labels):
    if block.kind == "iid_density":
        return functools.partial(IIDAdversary.density_bounded, block.cells, block.m1, block.m2, block.seed, labels)
    return functools.partial(TwoPhaseShiftAdversary, block.cells, block.shift, block.width, labels)


def cmd_simulate_online(cfg: RunConfig, out_dir: Path, say: _Out) -> int:
    if cfg.online is None:
        raise ConfigError("simulate-online needs an online block")
    prop = _property(cfg)
    if not isinstance(prop, PropertySpec):
        raise ConfigError("simulate-online needs a single property")
    o = cfg.online
    labels = label_grid(o.label_points)
    factory = _adversary_factory(o.adversary, labels)
    groups = cfg.group_dicts()
    write = _writer(out_dir)
    reports = []
    for s, (tr, rep) in zip(o.seeds, run_online_seeds(prop, o.C, groups, cfg.m, o.T, factory, o.seeds, labels)):
        write(f"transcript_seed{s}.csv", tr.to_csv())
        reports.append(rep)
    L = o.L if o.L is not None else factory().avg_lipschitz_L
    bound = theorem_bound(o.C, L, cfg.m, o.T, len(groups) + 1)
    mean_alpha = math.fsum(r.max_alpha for r in reports) / len(reports)
    summary = {"T": o.T, "m": cfg.m, "C": o.C, "L": L, "seeds": list(o.seeds), "bound": bound,
               "mean_max_alpha": mean_alpha, "per_seed": [r.to_dict() for r in reports]}
    write("online_report.json", _dump(summary))
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["seed", "group", "k2", "alpha", "bound"])
    for r in reports:
        for g, k in r.k2.items():
            w.writerow([r.seed, g, repr(k), repr(r.alpha[g]), repr(bound)])
    write("online_alpha.csv", buf.getvalue())
    say(f"mean over {len(reports)} seeds of max-group alpha: {mean_alpha!r}  bound: {bound!r}")
    return EXIT_OK if mean_alpha <= bound else EXIT_AUDIT


def cmd_audit(cfg: RunConfig, out_dir: Path, say: _Out) -> int:
    if cfg.predictor is None:
        raise ConfigError("audit needs a predictor path")
    try:
        raw = json.loads(cfg.resolve(cfg.predictor).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read predictor: {exc}") from exc
    data = _load_dataset(cfg)
    groups = dataset.groups_from_config(data, cfg.group_dicts())
    prop = _property(cfg)
    write = _writer(out_dir)
    m = int(raw.get("m", -1))
    if m != cfg.m:
        raise ConfigError(f"predictor grid m={m} does not match config m={cfg.m}")
    if "f0" in raw:
        if not isinstance(prop, ConditionalIdFamily):
            raise ConfigError("joint predictor needs a property pair")
        jp = JointPredictor.from_dict(raw)
        v0, v1 = apply_joint_predictor(jp, data, groups)
        rep = audit.joint_error((v0, v1), data, groups, prop.outer, prop)
        jcfg = _joint_config(cfg, prop.outer, prop)
        write("joint_report.json", _dump({**rep.to_dict(), "config": jcfg.to_dict()}))
        write("joint_report.csv", rep.to_csv())
        say(f"alpha0-equivalent {rep.alpha0_equivalent!r}  alpha1-equivalent {rep.alpha1_equivalent!r}")
        ok = (rep.alpha0_equivalent <= jcfg.alpha0 + AUDIT_TOL
              and rep.alpha1_equivalent <= jcfg.alpha1_star + AUDIT_TOL)
        return EXIT_OK if ok else EXIT_AUDIT
    if not isinstance(prop, PropertySpec):
        raise ConfigError("single-component predictor needs a single property")
    pred = DiscretizedPredictor.from_dict(raw)
    values = apply_predictor(pred, data, groups)
    rep_v = audit.batch_error_v(values, data, groups, prop)
    rep_g = audit.batch_error_gamma(values, data, groups, prop)
    write("report_v.json", _dump(rep_v.to_dict()))
    write("report_v.csv", rep_v.to_csv())
    write("report_gamma.json", _dump(rep_g.to_dict()))
    write("report_gamma.csv", rep_g.to_csv())
    for g in groups.ids:
        say(f"{g}: v-space {rep_v.alpha_equivalent[g]!r}  gamma-space {rep_g.alpha_equivalent[g]!r}")
    if cfg.alpha is not None and rep_v.max_alpha() > cfg.alpha + AUDIT_TOL:
        return EXIT_AUDIT
    return EXIT_OK


def cmd_demo(which: str, out_dir: Path | None, say: _Out) -> int:
    if which == "variance":
        data = dataset.make_variance_counterexample()
        per_cell = [functionals.variance(c.dist) for c in data.cells]
        mixed = functionals.variance(dataset.mixture_distribution(data, range(len(data))))
        say(f"per-cell variance: {', '.join(repr(v) for v in per_cell)}")
        say(f"variance on the single level set of the true variance predictor: {mixed!r}")
        result = {"per_cell_variance": per_cell, "level_set_variance": mixed}
    elif which == "cvar":
        p1, p2, lam, c1, cm = dataset.find_cvar_cxls_violation(0.5, [0, 0.25, 0.5, 0.75, 1.0],
                                                               [0.25, 0.5, 0.75, 1.0])
        say(f"P1 = {p1}\nP2 = {p2}\nCVaR_0.5(P1) = CVaR_0.5(P2) = {c1!r}")
        say(f"CVaR_0.5 of the {lam:g}/{1 - lam:g} mixture = {cm!r}")
        result = {"tau": 0.5, "P1": p1.to_dict(), "P2": p2.to_dict(), "lambda": lam,
                  "cvar": c1, "cvar_mixture": cm}
    else:
        raise ConfigError(f"unknown demo {which!r} (choose variance or cvar)")
    if out_dir is not None:
        write_json(out_dir / f"demo_{which}.json", result)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=argparse.SUPPRESS, help="run config (JSON or YAML)")
    common.add_argument("--out", default=argparse.SUPPRESS, help="output directory")
    common.add_argument("--quiet", action="store_true", default=argparse.SUPPRESS)
    p = argparse.ArgumentParser(prog="calibra", parents=[common],
                                description="Multicalibration of elicitable properties.")
    sub = p.add_subparsers(dest="command", required=True)
    for name, help_ in (("calibrate-batch", "calibrate a single property on an exact dataset"),
                        ("calibrate-joint", "jointly calibrate a property pair"),
                        ("simulate-online", "run the online learner against an adversary"),
                        ("audit", "audit a saved predictor")):
        sub.add_parser(name, parents=[common], help=help_)
    d = sub.add_parser("demo", parents=[common], help="counterexample certificates")
    d.add_argument("which", help="variance or cvar")
    return p


COMMANDS = {
    "calibrate-batch": cmd_calibrate_batch,
    "calibrate-joint": cmd_calibrate_joint,
    "simulate-online": cmd_simulate_online,
    "audit": cmd_audit,
}


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    say = _Out(getattr(args, "quiet", False))
    out = getattr(args, "out", None)
    try:
        if args.command == "demo":
            return cmd_demo(args.which, Path(out) if out else None, say)
        config = getattr(args, "config", None)
        if config is None:
            raise ConfigError(f"{args.command} needs --config")
        cfg = load_config(config)
        return COMMANDS[args.command](cfg, Path(out) if out else Path("."), say)
    except CalibraError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
