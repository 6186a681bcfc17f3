"""Operator commands: data generation, hierarchy building, training,
evaluation, ablation, and rule self-checks.

One JSON config file carries the trainer and benchmark settings; any
field can be overridden on the command line with `--section.field value`
pairs. The effective config is echoed into the output directory so a run
can be reproduced from its artifacts alone.

Exit codes: 0 ok, 2 config error, 3 validation error, 4 external-service
error, 5 numerical failure.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .autodiff import GraphError
from .data import (
    DatasetSpec,
    build_label_space,
    read_dataset,
    read_label_space,
    sample_dataset,
    write_dataset,
    write_label_space,
)
from .errors import ConfigError, ExternalServiceError, NumericalError, ValidationError
from .fol import And, Not, Pred, Rule, gen_ecl_rules, gen_hpl_rules, read_rules, SymbolTable
from .fuzzy import FuzzyConfig, evaluate_rule
from .hierarchy import (
    EndpointConfig,
    Hierarchy,
    aggregate_votes,
    cluster_verbs,
    query_llm_taxonomy,
    read_hierarchy,
    validate_hierarchy,
    write_hierarchy,
)
from .losses import ScoreTable, exclusivity_degree, implication_degree
from .metrics import render_ablation_svg, render_curve_svg, write_curve_csv, write_report_json
from .model import load_checkpoint, save_checkpoint
from .seeding import substream
from .training import (
    TrainConfig,
    evaluate_split,
    run_ablation,
    train,
    write_ablation_json,
    write_history_csv,
)

_SECTIONS = {"train": TrainConfig, "data": DatasetSpec}
_PATH_KEYS = ("data_dir", "hierarchy")


@dataclasses.dataclass
class RunConfig:
    train: TrainConfig
    data: DatasetSpec
    paths: dict[str, str]

    def to_doc(self) -> dict:
        return {
            "train": dataclasses.asdict(self.train),
            "data": dataclasses.asdict(self.data),
            "paths": dict(sorted(self.paths.items())),
        }


def _read_json(path: str) -> dict:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"missing config file: {path}")
    try:
        doc = json.loads(p.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON in {path}: {exc}") from exc
    if not isinstance(doc, dict):
        raise ConfigError(f"config root must be an object in {path}")
    return doc


def _coerce(section: str, name: str, default, value):
    where = f"{section}.{name}"
    if isinstance(default, bool):
        if isinstance(value, bool):
            return value
        raise ConfigError(f"{where} expects a boolean, got {value!r}")
    if isinstance(default, int):
        if isinstance(value, bool):
            raise ConfigError(f"{where} expects an integer, got {value!r}")
        if isinstance(value, int):
            return value
        if isinstance(value, float) and value.is_integer():
            return int(value)
        raise ConfigError(f"{where} expects an integer, got {value!r}")
    if isinstance(default, float):
        if isinstance(value, (int, float)) and not isinstance(value, bool):
            return float(value)
        raise ConfigError(f"{where} expects a number, got {value!r}")
    if isinstance(default, str):
        if isinstance(value, str):
            return value
        raise ConfigError(f"{where} expects a string, got {value!r}")
    return value


def _build_section(cls, section: str, doc: dict):
    defaults = {f.name: f.default for f in dataclasses.fields(cls)}
    unknown = sorted(set(doc) - set(defaults))
    if unknown:
        raise ConfigError(f"unknown keys in section {section!r}: {', '.join(unknown)}")
    merged = dict(defaults)
    for name, value in doc.items():
        merged[name] = _coerce(section, name, defaults[name], value)
    return cls(**merged)


def parse_overrides(extra: list[str]) -> list[tuple[str, object]]:
    """Turn leftover `--section.field value` pairs into typed overrides."""
    out: list[tuple[str, object]] = []
    i = 0
    while i < len(extra):
        key = extra[i]
        if not key.startswith("--") or "." not in key:
            raise ConfigError(f"unexpected argument: {key!r}")
        if i + 1 >= len(extra):
            raise ConfigError(f"override {key!r} is missing a value")
        raw = extra[i + 1]
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        out.append((key[2:], value))
        i += 2
    return out


def load_run_config(
    path: str | None,
    overrides: list[tuple[str, object]],
    seed: int | None = None,
) -> RunConfig:
    doc = _read_json(path) if path else {}
    unknown = sorted(set(doc) - set(_SECTIONS) - {"paths"})
    if unknown:
        raise ConfigError(f"unknown config sections: {', '.join(unknown)}")
    sections = {name: dict(doc.get(name, {})) for name in _SECTIONS}
    paths = dict(doc.get("paths", {}))
    for dotted, value in overrides:
        section, _, field = dotted.partition(".")
        if section == "paths":
            paths[field] = value
        elif section in sections:
            sections[section][field] = value
        else:
            raise ConfigError(f"unknown override section {section!r} in --{dotted}")
    bad_paths = sorted(set(paths) - set(_PATH_KEYS))
    if bad_paths:
        raise ConfigError(f"unknown keys in section 'paths': {', '.join(bad_paths)}")
    for key, value in paths.items():
        if not isinstance(value, str):
            raise ConfigError(f"paths.{key} expects a string, got {value!r}")
    train_cfg = _build_section(TrainConfig, "train", sections["train"])
    data_spec = _build_section(DatasetSpec, "data", sections["data"])
    if seed is not None:
        train_cfg = replace(train_cfg, seed=seed)
        data_spec = replace(data_spec, seed=seed)
    train_cfg.validate()
    return RunConfig(train=train_cfg, data=data_spec, paths=paths)


def _echo_config(out_dir: Path, doc: dict) -> None:
    text = json.dumps(doc, indent=2, sort_keys=True) + "\n"
    (out_dir / "config.json").write_text(text, encoding="utf-8", newline="\n")


def _require_file(path: str, what: str) -> str:
    if not Path(path).is_file():
        raise ConfigError(f"missing {what}: {path}")
    return str(path)


def _load_benchmark(run: RunConfig):
    if run.paths.get("data_dir"):
        d = Path(run.paths["data_dir"])
        ls = read_label_space(_require_file(str(d / "labelspace.json"), "label space"))
        h = read_hierarchy(_require_file(str(d / "hierarchy.json"), "hierarchy"),
                           ls.verbs, ls.objects)
        ds = read_dataset(_require_file(str(d / "dataset.csv"), "dataset"))
    else:
        ls, h = build_label_space(run.data)
        ds = sample_dataset(ls, run.data, h)
    if run.paths.get("hierarchy"):
        h = read_hierarchy(_require_file(run.paths["hierarchy"], "hierarchy"),
                           ls.verbs, ls.objects)
    return ls, h, ds


def _out_dir(path: str) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


# -- command handlers ----------------------------------------------------------


def cmd_gen_data(args, overrides) -> int:
    doc = _read_json(args.spec)
    for dotted, value in overrides:
        section, _, field = dotted.partition(".")
        if section != "data":
            raise ConfigError(f"gen-data only accepts --data.* overrides, got --{dotted}")
        doc[field] = value
    spec = _build_section(DatasetSpec, "data", doc)
    if args.seed is not None:
        spec = replace(spec, seed=args.seed)
    ls, h = build_label_space(spec)
    ds = sample_dataset(ls, spec, h)
    out = _out_dir(args.out)
    write_label_space(str(out / "labelspace.json"), ls)
    write_hierarchy(str(out / "hierarchy.json"), h, ls.verbs, ls.objects)
    write_dataset(str(out / "dataset.csv"), ds)
    _echo_config(out, {"data": dataclasses.asdict(spec)})
    for split in ("seen", "unseen_val", "unseen_test"):
        print(f"compositions {split}: {len(ls.composition_ids(split))}")
    print(f"samples: {len(ds)}")
    return 0


def cmd_build_hierarchy(args, overrides) -> int:
    if overrides:
        raise ConfigError("build-hierarchy does not accept config overrides")
    ls = read_label_space(_require_file(args.labelspace, "label space"))
    coarse_v, v_parent = cluster_verbs(ls.verbs)

    if args.mode == "heuristic":
        # same first-token grouping; objects are usually head-noun phrases
        coarse_o, o_parent = cluster_verbs(ls.objects)
    elif args.mode == "votes":
        if not args.votes:
            raise ConfigError("votes mode requires --votes pointing at cached trials")
        trials = query_llm_taxonomy(ls.objects, trials=args.trials,
                                    cache_dir=args.votes, offline=True)
        coarse_o, o_parent, _ = aggregate_votes(ls.objects, trials)
    else:  # llm
        try:
            endpoint = EndpointConfig.from_env()
        except ExternalServiceError:
            endpoint = None
        if endpoint is None and not args.cache:
            raise ExternalServiceError(
                "llm mode needs LOGICCAR_LLM_ENDPOINT or a --cache directory")
        trials = query_llm_taxonomy(ls.objects, endpoint=endpoint, trials=args.trials,
                                    cache_dir=args.cache, offline=endpoint is None)
        coarse_o, o_parent, _ = aggregate_votes(ls.objects, trials)

    h = Hierarchy(coarse_verbs=coarse_v, coarse_objects=coarse_o,
                  verb_parent=v_parent, object_parent=o_parent)
    problems = validate_hierarchy(h, ls.verbs, ls.objects)
    if problems:
        raise ValidationError("hierarchy rejected: " + "; ".join(problems))
    write_hierarchy(args.out, h, ls.verbs, ls.objects)
    print(f"coarse verbs: {len(coarse_v)}, coarse objects: {len(coarse_o)}")
    return 0


def cmd_train(args, overrides) -> int:
    run = load_run_config(args.config, overrides, args.seed)
    ls, h, ds = _load_benchmark(run)
    out = _out_dir(args.out)
    _echo_config(out, run.to_doc())
    result = train(run.train, ds, ls, h)
    save_checkpoint(str(out / "checkpoint.json"), result.params,
                    meta={"train": dataclasses.asdict(run.train)})
    write_history_csv(out / "history.csv", result.history)
    last = result.history.val_reports[-1]
    print(f"steps: {len(result.history.steps)}")
    print(f"val best_hm: {last.best_hm:.4f}  val auc: {last.auc:.4f}")
    return 0


def cmd_eval(args, overrides) -> int:
    if overrides:
        raise ConfigError("eval does not accept config overrides")
    params, meta = load_checkpoint(_require_file(args.checkpoint, "checkpoint"))
    cfg = _build_section(TrainConfig, "train", dict(meta.get("train", {})))
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    run = RunConfig(train=cfg, data=DatasetSpec(), paths={"data_dir": args.data})
    ls, h, ds = _load_benchmark(run)
    report = evaluate_split(params, ds, ls, h, cfg, args.split)
    out = _out_dir(args.out)
    write_report_json(out / "report.json", report)
    write_curve_csv(out / "curve.csv", report.curve)
    render_curve_svg(out / "curve.svg", report.curve)
    print(f"verb_acc: {report.verb_acc:.4f}  object_acc: {report.object_acc:.4f}")
    print(f"best_seen: {report.best_seen:.4f}  best_unseen: {report.best_unseen:.4f}")
    print(f"best_hm: {report.best_hm:.4f}  auc: {report.auc:.4f}")
    for warning in report.warnings:
        print(f"warning: {warning}", file=sys.stderr)
    return 0


def cmd_ablate(args, overrides) -> int:
    run = load_run_config(args.config, overrides, args.seed)
    ls, h, ds = _load_benchmark(run)
    seeds = tuple(run.train.seed + i for i in range(args.seeds))
    out = _out_dir(args.out)
    _echo_config(out, run.to_doc())
    result = run_ablation(run.train, ds, ls, h, seeds)
    write_ablation_json(out / "ablation.json", result)
    render_ablation_svg(out / "ablation.svg", result.summary())
    for arm, reports in result.reports.items():
        for seed, report in zip(seeds, reports):
            write_report_json(out / f"report_{arm}_seed{seed}.json", report)
    summary = result.summary()
    for arm in summary["arms"]:
        auc = summary["arms"][arm]["auc"]
        print(f"{arm}: auc {auc['mean']:.4f} +/- {auc['sd']:.4f}")
    return 0


def _closed_form_degree(rule: Rule, table: ScoreTable, q: int) -> float:
    """Closed-form twin of the generic evaluator for generated rule shapes."""
    if rule.trivial:
        return 1.0
    body = rule.formula.body
    ant = table.column(body.antecedent.ref)
    if isinstance(body.consequent, Pred):
        return implication_degree(ant, table.column(body.consequent.ref), q)
    siblings: list[np.ndarray] = []

    def collect(node) -> None:
        if isinstance(node, And):
            collect(node.left)
            collect(node.right)
        elif isinstance(node, Not) and isinstance(node.body, Pred):
            siblings.append(table.column(node.body.ref))
        else:
            raise ValidationError(f"rule {rule.kind!r} is not a generated shape")

    collect(body.consequent)
    return exclusivity_degree(ant, siblings, q)


def _random_table(space, h, k: int, rng) -> ScoreTable:
    sizes = {
        "composition": len(space.compositions),
        "verb": len(space.verbs),
        "object": len(space.objects),
        "coarse_verb": len(h.coarse_verbs),
        "coarse_object": len(h.coarse_objects),
    }
    return ScoreTable(scores={g: rng.uniform(size=(k, n)) for g, n in sizes.items()})


def cmd_rules_check(args, overrides) -> int:
    if overrides:
        raise ConfigError("rules check does not accept config overrides")
    ls = read_label_space(_require_file(args.labelspace, "label space"))
    h = read_hierarchy(_require_file(args.hierarchy, "hierarchy"), ls.verbs, ls.objects)
    cfg = FuzzyConfig(q=args.q)
    rng = substream(args.seed if args.seed is not None else 0, "rules-check")

    if args.rules:
        symbols = SymbolTable.from_space(ls, h)
        ruleset = read_rules(_require_file(args.rules, "rules file"), symbols)
        worst_lo, worst_hi = 1.0, 0.0
        for _ in range(args.tables):
            table = _random_table(ls, h, int(rng.integers(1, 9)), rng)
            for rule in ruleset.rules:
                d = evaluate_rule(rule, table, cfg)
                worst_lo, worst_hi = min(worst_lo, d), max(worst_hi, d)
        print(f"evaluated {len(ruleset.rules)} parsed rules on {args.tables} tables; "
              f"degree range [{worst_lo:.6f}, {worst_hi:.6f}]")
        if not (0.0 <= worst_lo and worst_hi <= 1.0):
            raise NumericalError("parsed rule degrees left [0, 1]")
        return 0

    rules = gen_ecl_rules(ls, scope="all").rules + gen_hpl_rules(ls, h).rules
    max_dev = 0.0
    for _ in range(args.tables):
        table = _random_table(ls, h, int(rng.integers(1, 9)), rng)
        for rule in rules:
            generic = evaluate_rule(rule, table, cfg)
            closed = _closed_form_degree(rule, table, args.q)
            max_dev = max(max_dev, abs(generic - closed))
    print(f"checked {len(rules)} generated rules on {args.tables} random tables; "
          f"max deviation {max_dev:.3e}")
    if max_dev >= 1e-9:
        print("closed forms and generic evaluation disagree", file=sys.stderr)
        return 5
    return 0


# -- argument parsing ----------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="logiccar",
        description="rule-regularized compositional classifier toolkit",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate the synthetic benchmark")
    p.add_argument("--spec", required=True, help="DatasetSpec JSON file")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.set_defaults(handler=cmd_gen_data)

    p = sub.add_parser("build-hierarchy", help="cluster primitives into coarse groups")
    p.add_argument("--labelspace", required=True)
    p.add_argument("--mode", choices=("heuristic", "llm", "votes"), default="heuristic")
    p.add_argument("--votes", help="directory of cached taxonomy trials (votes mode)")
    p.add_argument("--cache", help="completion cache directory (llm mode)")
    p.add_argument("--trials", type=int, default=19)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.set_defaults(handler=cmd_build_hierarchy)

    p = sub.add_parser("train", help="fit the scorer and record the loss history")
    p.add_argument("--config", help="run config JSON (train/data/paths sections)")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.set_defaults(handler=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint and render the trade-off curve")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="directory from gen-data")
    p.add_argument("--split", choices=("val", "test"), default="test")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.set_defaults(handler=cmd_eval)

    p = sub.add_parser("ablate", help="train every rule-group arm over shared seeds")
    p.add_argument("--config", help="run config JSON (train/data/paths sections)")
    p.add_argument("--seeds", type=int, default=5, help="number of consecutive seeds")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, help="first seed of the range")
    p.set_defaults(handler=cmd_ablate)

    p = sub.add_parser("rules", help="rule utilities")
    rules_sub = p.add_subparsers(dest="rules_command", required=True)
    pc = rules_sub.add_parser("check", help="compare generic evaluation to closed forms")
    pc.add_argument("--labelspace", required=True)
    pc.add_argument("--hierarchy", required=True)
    pc.add_argument("--rules", help="optional custom rules file to evaluate")
    pc.add_argument("--tables", type=int, default=100)
    pc.add_argument("--q", type=int, default=1)
    pc.add_argument("--seed", type=int)
    pc.set_defaults(handler=cmd_rules_check)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args, extra = parser.parse_known_args(argv)
    try:
        overrides = parse_overrides(extra)
        return args.handler(args, overrides)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except ValidationError as exc:
        print(f"validation error: {exc}", file=sys.stderr)
        return 3
    except ExternalServiceError as exc:
        print(f"external service error: {exc}", file=sys.stderr)
        return 4
    except (NumericalError, GraphError) as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return 5


if __name__ == "__main__":
    sys.exit(main())
