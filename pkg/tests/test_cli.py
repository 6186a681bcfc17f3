"""Command surface: artifacts, exit codes, overrides, idempotency."""
from __future__ import annotations

import json
from pathlib import Path

import pytest

from logiccar.cli import load_run_config, main, parse_overrides
from logiccar.data import read_label_space
from logiccar.errors import ConfigError
from logiccar.fol import SymbolTable, gen_ecl_rules, write_rules
from logiccar.hierarchy import read_hierarchy, slugify

SPEC = {
    "coarse_verbs": 2, "verbs_per_coarse": 2, "coarse_objects": 2, "objects_per_coarse": 2,
    "dim": 6, "n_compositions": 10, "samples_per_composition": 6, "seed": 5,
}
DATA_FILES = ("labelspace.json", "hierarchy.json", "dataset.csv", "config.json")


def write_spec(tmp_path: Path) -> Path:
    path = tmp_path / "spec.json"
    path.write_text(json.dumps(SPEC), encoding="utf-8")
    return path


@pytest.fixture()
def data_dir(tmp_path) -> Path:
    spec = write_spec(tmp_path)
    out = tmp_path / "data"
    assert main(["gen-data", "--spec", str(spec), "--out", str(out)]) == 0
    return out


def run_config(tmp_path: Path, data_dir: Path, **train_over) -> Path:
    train = {"epochs": 2, "batch_size": 8, "seed": 3, **train_over}
    doc = {"train": train, "paths": {"data_dir": str(data_dir)}}
    path = tmp_path / "run.json"
    path.write_text(json.dumps(doc), encoding="utf-8")
    return path


def test_gen_data_writes_artifacts_and_is_idempotent(tmp_path, capsys):
    spec = write_spec(tmp_path)
    out = tmp_path / "data"
    assert main(["gen-data", "--spec", str(spec), "--out", str(out)]) == 0
    printed = capsys.readouterr().out
    assert "compositions seen: 7" in printed
    assert "samples: 60" in printed
    first = {name: (out / name).read_bytes() for name in DATA_FILES}
    assert main(["gen-data", "--spec", str(spec), "--out", str(out)]) == 0
    for name in DATA_FILES:
        assert (out / name).read_bytes() == first[name]


def test_gen_data_missing_spec_names_path(tmp_path, capsys):
    missing = tmp_path / "missing.json"
    assert main(["gen-data", "--spec", str(missing), "--out", str(tmp_path / "o")]) == 2
    assert str(missing) in capsys.readouterr().err


def test_gen_data_rejects_unknown_spec_key(tmp_path, capsys):
    spec = tmp_path / "spec.json"
    spec.write_text(json.dumps({**SPEC, "bogus": 1}), encoding="utf-8")
    assert main(["gen-data", "--spec", str(spec), "--out", str(tmp_path / "o")]) == 2
    assert "bogus" in capsys.readouterr().err


def test_override_parsing_and_typing(tmp_path):
    pairs = parse_overrides(["--train.lr", "0.1", "--data.dim", "8", "--train.fusion", "dedicated"])
    assert pairs == [("train.lr", 0.1), ("data.dim", 8), ("train.fusion", "dedicated")]
    with pytest.raises(ConfigError):
        parse_overrides(["train.lr", "0.1"])  # missing leading --
    with pytest.raises(ConfigError):
        parse_overrides(["--train.lr"])  # missing value
    with pytest.raises(ConfigError):
        parse_overrides(["--batch", "8"])  # no dotted path

    run = load_run_config(None, pairs)
    assert run.train.lr == 0.1 and run.train.fusion == "dedicated"
    assert run.data.dim == 8
    # integer fields accept integral floats, nothing else
    run = load_run_config(None, [("train.epochs", 3.0)])
    assert run.train.epochs == 3
    with pytest.raises(ConfigError):
        load_run_config(None, [("train.epochs", 2.5)])
    with pytest.raises(ConfigError):
        load_run_config(None, [("train.nope", 1)])
    with pytest.raises(ConfigError):
        load_run_config(None, [("model.lr", 0.1)])
    with pytest.raises(ConfigError):
        load_run_config(None, [("paths.nope", "x")])


def test_train_then_eval_pipeline(tmp_path, data_dir):
    cfg = run_config(tmp_path, data_dir)
    out = tmp_path / "run"
    assert main(["train", "--config", str(cfg), "--out", str(out)]) == 0
    assert (out / "checkpoint.json").is_file()
    assert (out / "history.csv").is_file()
    echoed = json.loads((out / "config.json").read_text(encoding="utf-8"))
    assert echoed["train"]["epochs"] == 2
    assert echoed["paths"]["data_dir"] == str(data_dir)

    first = {n: (out / n).read_bytes() for n in ("checkpoint.json", "history.csv")}
    assert main(["train", "--config", str(cfg), "--out", str(out)]) == 0
    for name, blob in first.items():
        assert (out / name).read_bytes() == blob

    ev = tmp_path / "eval"
    args = ["eval", "--checkpoint", str(out / "checkpoint.json"),
            "--data", str(data_dir), "--out", str(ev)]
    assert main(args) == 0
    report = json.loads((ev / "report.json").read_text(encoding="utf-8"))
    for key in ("verb_acc", "object_acc", "best_seen", "best_unseen", "best_hm", "auc"):
        assert key in report
    assert (ev / "curve.csv").read_text(encoding="utf-8").startswith("bias,seen_acc,unseen_acc,hm")
    artifacts = {n: (ev / n).read_bytes() for n in ("report.json", "curve.csv", "curve.svg")}
    assert main(args) == 0
    for name, blob in artifacts.items():
        assert (ev / name).read_bytes() == blob


def test_train_seed_flag_overrides_config(tmp_path, data_dir):
    cfg = run_config(tmp_path, data_dir)
    out = tmp_path / "run9"
    assert main(["train", "--config", str(cfg), "--out", str(out), "--seed", "9"]) == 0
    echoed = json.loads((out / "config.json").read_text(encoding="utf-8"))
    assert echoed["train"]["seed"] == 9 and echoed["data"]["seed"] == 9


def test_invalid_train_config_exits_3(tmp_path, data_dir, capsys):
    cfg = run_config(tmp_path, data_dir)
    code = main(["train", "--config", str(cfg), "--out", str(tmp_path / "x"),
                 "--train.lr", "-1.0"])
    assert code == 3
    assert "validation error" in capsys.readouterr().err


def test_eval_missing_checkpoint_exits_2(tmp_path, data_dir, capsys):
    code = main(["eval", "--checkpoint", str(tmp_path / "nope.json"),
                 "--data", str(data_dir), "--out", str(tmp_path / "e")])
    assert code == 2
    assert "nope.json" in capsys.readouterr().err


def test_rules_check_reports_deviation(tmp_path, data_dir, capsys):
    code = main(["rules", "check", "--labelspace", str(data_dir / "labelspace.json"),
                 "--hierarchy", str(data_dir / "hierarchy.json"), "--tables", "20"])
    assert code == 0
    assert "max deviation" in capsys.readouterr().out


def test_rules_check_parses_custom_rules(tmp_path, data_dir, capsys):
    ls = read_label_space(str(data_dir / "labelspace.json"))
    h = read_hierarchy(str(data_dir / "hierarchy.json"), ls.verbs, ls.objects)
    symbols = SymbolTable.from_space(ls, h)
    rules_path = tmp_path / "custom.logic"
    write_rules(str(rules_path), gen_ecl_rules(ls), symbols)
    code = main(["rules", "check", "--labelspace", str(data_dir / "labelspace.json"),
                 "--hierarchy", str(data_dir / "hierarchy.json"),
                 "--rules", str(rules_path), "--tables", "10"])
    assert code == 0
    assert "degree range" in capsys.readouterr().out


def test_build_hierarchy_heuristic(tmp_path, data_dir):
    out = tmp_path / "h.json"
    args = ["build-hierarchy", "--labelspace", str(data_dir / "labelspace.json"),
            "--mode", "heuristic", "--out", str(out)]
    assert main(args) == 0
    ls = read_label_space(str(data_dir / "labelspace.json"))
    h = read_hierarchy(str(out), ls.verbs, ls.objects)
    assert len(h.verb_parent) == len(ls.verbs)
    blob = out.read_bytes()
    assert main(args) == 0
    assert out.read_bytes() == blob


def _seed_vote_cache(cache: Path, objects, category_of, trials: int) -> None:
    for obj in objects:
        d = cache / slugify(obj)
        d.mkdir(parents=True, exist_ok=True)
        for t in range(trials):
            text = f"A: {obj} belongs to {category_of(obj, t)}.\n"
            (d / f"trial_{t}.txt").write_text(text, encoding="utf-8")


def test_build_hierarchy_votes_majority(tmp_path, data_dir):
    ls = read_label_space(str(data_dir / "labelspace.json"))
    cache = tmp_path / "votes"
    # 2 of 3 trials say tools, one dissents: majority must win
    _seed_vote_cache(cache, ls.objects,
                     lambda obj, t: "tools" if t < 2 else "misc", trials=3)
    out = tmp_path / "h_votes.json"
    assert main(["build-hierarchy", "--labelspace", str(data_dir / "labelspace.json"),
                 "--mode", "votes", "--votes", str(cache), "--trials", "3",
                 "--out", str(out)]) == 0
    h = read_hierarchy(str(out), ls.verbs, ls.objects)
    assert h.coarse_objects == ("tools",)
    assert all(p == 0 for p in h.object_parent)


def test_build_hierarchy_votes_requires_dir(tmp_path, data_dir):
    assert main(["build-hierarchy", "--labelspace", str(data_dir / "labelspace.json"),
                 "--mode", "votes", "--out", str(tmp_path / "h.json")]) == 2


def test_build_hierarchy_llm_offline_from_cache(tmp_path, data_dir, monkeypatch):
    monkeypatch.delenv("LOGICCAR_LLM_ENDPOINT", raising=False)
    ls = read_label_space(str(data_dir / "labelspace.json"))
    cache = tmp_path / "cache"
    _seed_vote_cache(cache, ls.objects, lambda obj, t: "stuff", trials=2)
    out = tmp_path / "h_llm.json"
    assert main(["build-hierarchy", "--labelspace", str(data_dir / "labelspace.json"),
                 "--mode", "llm", "--cache", str(cache), "--trials", "2",
                 "--out", str(out)]) == 0
    h = read_hierarchy(str(out), ls.verbs, ls.objects)
    assert h.coarse_objects == ("stuff",)


def test_build_hierarchy_llm_without_endpoint_or_cache_exits_4(tmp_path, data_dir, monkeypatch):
    monkeypatch.delenv("LOGICCAR_LLM_ENDPOINT", raising=False)
    code = main(["build-hierarchy", "--labelspace", str(data_dir / "labelspace.json"),
                 "--mode", "llm", "--out", str(tmp_path / "h.json")])
    assert code == 4


def test_ablate_writes_summary_and_reports(tmp_path, data_dir):
    cfg = run_config(tmp_path, data_dir, epochs=2)
    out = tmp_path / "abl"
    assert main(["ablate", "--config", str(cfg), "--seeds", "3", "--out", str(out)]) == 0
    doc = json.loads((out / "ablation.json").read_text(encoding="utf-8"))
    assert set(doc["arms"]) == {"none", "ecl_only", "hpl_only", "both"}
    assert doc["seeds"] == [3, 4, 5]
    assert (out / "ablation.svg").is_file()
    for arm in doc["arms"]:
        for seed in (3, 4, 5):
            assert (out / f"report_{arm}_seed{seed}.json").is_file()
