"""Command-line surface: one binary, config-driven.

Verbs: ``validate`` checks a blueprint file, ``lift`` samples one lift and
prints its degree structure, ``train`` runs a single regression trial and
writes the trajectory CSV, ``cover``/``theory``/``experiment <kind>`` drive
the experiment harness. Exit codes: 0 ok, 1 config error (bad flags, bad
config file, bad blueprint), 2 runtime error.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

from .blueprints import ParseError, ValidationError, validate_blueprint
from .experiments import (
    KINDS,
    ConfigError,
    ExperimentConfig,
    load_plan_ref,
    run_experiment,
    train_one,
)
from .fastpath import UnsupportedBlueprint
from .sparse import config_from_plan, degree_summary, sample_from_plan

__all__ = ["main", "build_parser"]


class _Parser(argparse.ArgumentParser):
    """Usage problems map to exit code 1, not argparse's default 2."""

    def error(self, message):
        raise ConfigError(message)


def _add_common(sp: argparse.ArgumentParser, config: bool = True) -> None:
    if config:
        sp.add_argument("--config", default=None, help="experiment config JSON file")
    sp.add_argument("--seed", type=int, default=None, help="master seed override")
    sp.add_argument("--out", default=None, help="output directory override")
    sp.add_argument("--plots", action="store_true", help="also write SVG plots")
    sp.add_argument("--threads", type=int, default=1, help="trial worker pool size")
    sp.add_argument(
        "--paper-scale", action="store_true",
        help="full-scale settings: default 100000 iterations, no width cap",
    )


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="liftlab", description="Lifted perceptron-module toolkit.")
    sub = p.add_subparsers(dest="verb", required=True, parser_class=_Parser)

    v = sub.add_parser("validate", help="check a blueprint file")
    v.add_argument("blueprint", help="blueprint JSON path or bundled name")
    v.set_defaults(func=_cmd_validate)

    l = sub.add_parser("lift", help="sample one lift and report degree structure")
    l.add_argument("blueprint", help="blueprint JSON path or bundled name")
    l.add_argument("--width", type=int, default=16, help="value for the width symbol")
    l.add_argument("--lam", type=float, default=None, help="override Bernoulli edge rates")
    l.add_argument("--seed", type=int, default=0)
    l.add_argument("--out", default=None, help="write the JSON summary here")
    l.set_defaults(func=_cmd_lift)

    t = sub.add_parser("train", help="run one training trial, write trajectory.csv")
    t.add_argument("--width", type=int, default=None, help="which config width to train")
    _add_common(t)
    t.set_defaults(func=_cmd_train)

    c = sub.add_parser("cover", help="witness-cover experiment")
    _add_common(c)
    c.set_defaults(func=lambda a: _cmd_experiment(a, "witness-cover"))

    th = sub.add_parser("theory", help="theory-report experiment")
    _add_common(th)
    th.set_defaults(func=lambda a: _cmd_experiment(a, "theory-report"))

    e = sub.add_parser("experiment", help="run an experiment by kind")
    e.add_argument("kind", choices=KINDS)
    _add_common(e)
    e.set_defaults(func=lambda a: _cmd_experiment(a, a.kind))
    return p


def _load_doc(path: str | None) -> dict:
    if path is None:
        return {}
    p = Path(path)
    try:
        text = p.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {p}: {exc}") from exc
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {p} is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise ConfigError(f"config {p} must hold a JSON object")
    return doc


def _build_config(args, kind: str) -> ExperimentConfig:
    doc = _load_doc(args.config)
    if doc.get("kind") not in (None, kind):
        raise ConfigError(f"config kind {doc['kind']!r} conflicts with the {kind!r} command")
    doc["kind"] = kind
    cfg = ExperimentConfig.from_dict(doc, paper_scale=args.paper_scale)
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    if args.out is not None:
        cfg = replace(cfg, out_dir=args.out)
    if args.threads < 1:
        raise ConfigError("--threads must be at least 1")
    return cfg


def _cmd_validate(args) -> int:
    plan = load_plan_ref(args.blueprint)
    report = validate_blueprint(plan.blueprint)
    b = plan.blueprint
    print(
        f"ok: {b.base.n_vertices} vertices, {b.base.n_edges} edges, "
        f"inputs {sorted(b.initial)}, terminals {sorted(b.terminal)}, "
        f"width symbols {list(plan.symbols())}"
    )
    for w in report.warnings:
        print(f"warning: {w}")
    return 0


def _cmd_lift(args) -> int:
    plan = load_plan_ref(args.blueprint)
    symbols = {s: args.width for s in plan.symbols()}
    override = None
    if args.lam is not None:
        override = {
            i: args.lam for i, el in enumerate(plan.edge_lifts) if el.mode == "sparse"
        }
    lift_cfg = config_from_plan(plan, symbols, lam_override=override)
    lm, _ = sample_from_plan(plan, symbols, seed=args.seed, lam_override=override)
    summary = degree_summary(lm, lam=lift_cfg.lam, delta=0.1)
    doc = {
        "blueprint": args.blueprint,
        "seed": args.seed,
        "widths": list(lift_cfg.n),
        "lambda": list(lift_cfg.lam),
        "vertices": lm.lifted.n_vertices,
        "edges": lm.lifted.n_edges,
        "parameters": lm.weight_bundle.total_dim,
        "per_edge": [
            {
                "base_edge": list(s.base_edge),
                "edges": s.n_edges,
                "in_degree": [s.in_min, round(s.in_mean, 4), s.in_max],
                "out_degree": [s.out_min, round(s.out_mean, 4), s.out_max],
                "out_bound": None if s.bound is None else round(s.bound, 4),
                "within_bound": s.within_bound,
            }
            for s in summary.per_edge
        ],
    }
    text = json.dumps(doc, indent=2)
    print(text)
    if args.out:
        Path(args.out).write_text(text + "\n")
    return 0


def _cmd_train(args) -> int:
    cfg = _build_config(args, "sine-quantiles")
    tr = train_one(cfg, width=args.width)
    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / "trajectory.csv"
    tr.to_csv(path)
    print(f"final loss {tr.final_loss!r} after {int(tr.times[-1])} iterations -> {path}")
    return 0


def _cmd_experiment(args, kind: str) -> int:
    cfg = _build_config(args, kind)
    files = run_experiment(cfg, threads=args.threads, plots=args.plots)
    for f in files:
        print(f)
    return 0


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except (ConfigError, ParseError, ValidationError, UnsupportedBlueprint) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
