"""Minibatch trainer: cross-entropy plus rule-regularized asymmetric losses.

The optimizer is plain momentum SGD with decoupled weight decay. All
randomness (init, shuffling) flows through named substreams of the run
seed, so a fixed seed reproduces the history bit for bit.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .autodiff import Graph, GraphError, Node, backward, forward
from .data import Dataset, LabelSpace, partition_samples
from .errors import NumericalError, ValidationError
from .fuzzy import FuzzyConfig
from .hierarchy import Hierarchy
from .losses import (
    LOSS_FIELDS,
    AsymLossParams,
    LossBreakdown,
    build_asym_loss,
    build_ce_loss,
    build_ecl_rule_loss,
    build_hpl_rule_loss,
    combine_losses,
)
from .metrics import EvalReport, build_report
from .model import (
    COARSE_MODES,
    FUSIONS,
    ScoreNodes,
    build_scoring_graph,
    forward_scores,
    init_params,
    split_features,
)
from .seeding import substream

COMP_SCOPES = ("seen", "all")
METRIC_SOURCES = ("branch", "composition")
ABLATION_ARMS = ("none", "ecl_only", "hpl_only", "both")

HISTORY_HEADER = "epoch,step," + ",".join(LOSS_FIELDS)


@dataclass(frozen=True)
class TrainConfig:
    """Everything a run needs besides the data itself."""

    alpha: float = 0.04
    beta: float = 0.06
    q: int = 1
    tau: float = 15.0
    warmup_epochs: int = 2
    lr: float = 0.05
    epochs: int = 30
    batch_size: int = 64
    seed: int = 0
    fusion: str = "additive"
    comp_scope: str = "seen"
    momentum: float = 0.9
    weight_decay: float = 1e-4
    score_temp: float = 1.0
    seen_holdout: float = 0.5
    coarse_mode: str = "head"
    metric_source: str = "branch"
    use_ecl: bool = True  # ablation hook: hierarchy-only arm drops the ECL group

    def validate(self) -> None:
        if self.lr <= 0 or self.epochs <= 0 or self.batch_size <= 0:
            raise ValidationError("lr, epochs and batch_size must be positive")
        if self.alpha < 0 or self.beta < 0:
            raise ValidationError("alpha and beta must be nonnegative")
        if self.warmup_epochs < 0:
            raise ValidationError("warmup_epochs must be nonnegative")
        if not isinstance(self.q, int) or self.q == 0:
            raise ValidationError("q must be a nonzero integer")
        if self.tau <= 0 or self.score_temp <= 0:
            raise ValidationError("tau and score_temp must be positive")
        if not (0.0 <= self.momentum < 1.0):
            raise ValidationError("momentum must be in [0, 1)")
        if self.weight_decay < 0:
            raise ValidationError("weight_decay must be nonnegative")
        if not (0.0 <= self.seen_holdout < 1.0):
            raise ValidationError("seen_holdout must be in [0, 1)")
        if self.fusion not in FUSIONS:
            raise ValidationError(f"unknown fusion {self.fusion!r}")
        if self.coarse_mode not in COARSE_MODES:
            raise ValidationError(f"unknown coarse_mode {self.coarse_mode!r}")
        if self.comp_scope not in COMP_SCOPES:
            raise ValidationError(f"unknown comp_scope {self.comp_scope!r}")
        if self.metric_source not in METRIC_SOURCES:
            raise ValidationError(f"unknown metric_source {self.metric_source!r}")


@dataclass(frozen=True)
class StepRecord:
    epoch: int
    step: int
    losses: LossBreakdown


@dataclass
class TrainHistory:
    steps: list[StepRecord] = field(default_factory=list)
    val_reports: list[EvalReport] = field(default_factory=list)


@dataclass
class TrainResult:
    params: dict[str, np.ndarray]
    history: TrainHistory


@dataclass
class _TrainGraph:
    """One compiled loss graph for a fixed batch size."""

    g: Graph
    nodes: ScoreNodes
    parts: dict[str, Node | None]  # l_c / l_ea / l_er / l_ha / l_hr
    out_warm: Node  # rule terms excluded (warmup epochs)
    out_full: Node


def _build_train_graph(
    space: LabelSpace,
    hierarchy: Hierarchy,
    cfg: TrainConfig,
    k: int,
    dim: int,
) -> _TrainGraph:
    g = Graph()
    nodes = build_scoring_graph(
        g, space, hierarchy, k, dim,
        fusion=cfg.fusion, coarse_mode=cfg.coarse_mode, score_temp=cfg.score_temp,
    )
    y_comp = g.parameter("y_comp", (k, len(space.compositions)))
    y_verb = g.parameter("y_verb", (k, len(space.verbs)))
    y_object = g.parameter("y_object", (k, len(space.objects)))

    parts: dict[str, Node | None] = {name: None for name in ("l_c", "l_ea", "l_er", "l_ha", "l_hr")}
    parts["l_c"] = build_ce_loss(g, nodes.comp_logits, y_comp)

    # Inactive groups are left out of the graph entirely so a run with
    # them disabled is the pure-CE baseline, not a zero-scaled twin.
    ecl_active = cfg.alpha > 0 and cfg.use_ecl
    hpl_active = cfg.alpha > 0 and cfg.beta > 0
    ap = AsymLossParams(tau=cfg.tau)
    fz = FuzzyConfig(q=cfg.q)
    if ecl_active:
        parts["l_ea"] = build_asym_loss(g, nodes.zhat["composition"], y_comp, ap)
        parts["l_er"] = build_ecl_rule_loss(g, nodes.scores, space, fz, comp_scope=cfg.comp_scope)
    if hpl_active:
        parts["l_ha"] = g.add(
            build_asym_loss(g, nodes.zhat["verb"], y_verb, ap),
            build_asym_loss(g, nodes.zhat["object"], y_object, ap),
        )
        parts["l_hr"] = build_hpl_rule_loss(g, nodes.scores, space, hierarchy, fz)

    warm = parts["l_c"]
    if ecl_active:
        warm = g.add(warm, g.scale(parts["l_ea"], cfg.alpha))
    if hpl_active:
        warm = g.add(warm, g.scale(parts["l_ha"], cfg.alpha * cfg.beta))
    full = warm
    if ecl_active:
        full = g.add(full, g.scale(parts["l_er"], cfg.alpha))
    if hpl_active:
        full = g.add(full, g.scale(parts["l_hr"], cfg.alpha * cfg.beta))
    return _TrainGraph(g=g, nodes=nodes, parts=parts, out_warm=warm, out_full=full)


def _onehot(ids: np.ndarray, n: int) -> np.ndarray:
    out = np.zeros((ids.shape[0], n))
    out[np.arange(ids.shape[0]), ids] = 1.0
    return out


def _batch_bindings(
    tg: _TrainGraph,
    params: dict[str, np.ndarray],
    feats: np.ndarray,
    comp_ids: np.ndarray,
    space: LabelSpace,
    comp_verb: np.ndarray,
    comp_object: np.ndarray,
) -> dict[str, np.ndarray]:
    x_dyn, x_sta = split_features(feats)
    return {
        **params,
        "x_dyn": x_dyn,
        "x_sta": x_sta,
        "y_comp": _onehot(comp_ids, len(space.compositions)),
        "y_verb": _onehot(comp_verb[comp_ids], len(space.verbs)),
        "y_object": _onehot(comp_object[comp_ids], len(space.objects)),
    }


def batch_losses(
    tg: _TrainGraph,
    vals: list[np.ndarray],
    cfg: TrainConfig,
    rules_active: bool,
) -> LossBreakdown:
    """Read the step's loss breakdown out of a forward workspace."""
    def part(name: str, gated: bool = False) -> float:
        node = tg.parts[name]
        if node is None or (gated and not rules_active):
            return 0.0
        return float(vals[node.i])

    return combine_losses(
        l_c=part("l_c"),
        l_ea=part("l_ea"),
        l_er=part("l_er", gated=True),
        l_ha=part("l_ha"),
        l_hr=part("l_hr", gated=True),
        alpha=cfg.alpha,
        beta=cfg.beta,
        rules_active=rules_active,
    )


def _eval_rows(
    params: dict[str, np.ndarray],
    data: Dataset,
    space: LabelSpace,
    hierarchy: Hierarchy,
    cfg: TrainConfig,
    rows: np.ndarray,
    unseen_split: str,
) -> EvalReport:
    table = forward_scores(
        params, data.features[rows], space, hierarchy,
        fusion=cfg.fusion, coarse_mode=cfg.coarse_mode, score_temp=cfg.score_temp,
    )
    return build_report(
        table.comp_logits,
        table.scores["verb"],
        table.scores["object"],
        data.comp_ids[rows],
        space,
        space.seen_ids(),
        space.composition_ids(unseen_split),
        metric_source=cfg.metric_source,
    )


def evaluate_split(
    params: dict[str, np.ndarray],
    data: Dataset,
    space: LabelSpace,
    hierarchy: Hierarchy,
    cfg: TrainConfig,
    split: str = "test",
) -> EvalReport:
    """Score one partition against seen plus that partition's unseen pool."""
    if split not in ("val", "test"):
        raise ValidationError(f"split must be val or test, got {split!r}")
    rows = partition_samples(data, space, cfg.seen_holdout)[split]
    unseen = "unseen_val" if split == "val" else "unseen_test"
    return _eval_rows(params, data, space, hierarchy, cfg, rows, unseen)


def train(
    cfg: TrainConfig,
    data: Dataset,
    space: LabelSpace,
    hierarchy: Hierarchy,
) -> TrainResult:
    """Run the full optimization loop and keep a per-step loss history.

    Rule terms are physically absent from the loss graph until the
    warmup boundary; their history columns read 0 for those epochs.
    """
    cfg.validate()
    space.validate()
    rows = partition_samples(data, space, cfg.seen_holdout)
    train_rows = rows["train"]
    if train_rows.size == 0:
        raise ValidationError("no training rows; check seen_holdout and the label space")
    bad = [int(c) for c in np.unique(data.comp_ids[train_rows])
           if space.compositions[int(c)].split != "seen"]
    if bad:
        raise ValidationError(f"training rows reference unseen compositions {bad}")

    dim = data.features.shape[1] // 2
    comp_verb = np.array([c.verb for c in space.compositions])
    comp_object = np.array([c.object for c in space.compositions])

    params = init_params(space, hierarchy, dim, substream(cfg.seed, "init"),
                         fusion=cfg.fusion, coarse_mode=cfg.coarse_mode)
    names = sorted(params)
    velocity = {n: np.zeros_like(params[n]) for n in names}
    graphs: dict[int, _TrainGraph] = {}
    history = TrainHistory()

    step = 0
    for epoch in range(cfg.epochs):
        rules_active = epoch >= cfg.warmup_epochs
        order = substream(cfg.seed, "shuffle", epoch).permutation(train_rows.size)
        shuffled = train_rows[order]
        for lo in range(0, shuffled.size, cfg.batch_size):
            batch = shuffled[lo:lo + cfg.batch_size]
            k = batch.size
            if k not in graphs:
                graphs[k] = _build_train_graph(space, hierarchy, cfg, k, dim)
            tg = graphs[k]
            out = tg.out_full if rules_active else tg.out_warm
            binds = _batch_bindings(tg, params, data.features[batch],
                                    data.comp_ids[batch], space, comp_verb, comp_object)
            try:
                vals = forward(tg.g, binds)
                grads = backward(tg.g, out, vals)
            except GraphError as exc:
                ids = data.sample_ids[batch].tolist()
                raise NumericalError(
                    f"non-finite loss at epoch {epoch} step {step}; "
                    f"batch sample ids {ids}: {exc}"
                ) from exc
            losses = batch_losses(tg, vals, cfg, rules_active)
            if not math.isfinite(losses.total):
                ids = data.sample_ids[batch].tolist()
                raise NumericalError(
                    f"non-finite loss at epoch {epoch} step {step}; batch sample ids {ids}"
                )
            history.steps.append(StepRecord(epoch=epoch, step=step, losses=losses))
            for n in names:
                velocity[n] = cfg.momentum * velocity[n] + grads[n]
                params[n] = params[n] - cfg.lr * velocity[n] - cfg.lr * cfg.weight_decay * params[n]
            step += 1
        history.val_reports.append(
            _eval_rows(params, data, space, hierarchy, cfg, rows["val"], "unseen_val"))
    return TrainResult(params=params, history=history)


def write_history_csv(path: str | Path, history: TrainHistory) -> None:
    lines = [HISTORY_HEADER]
    for rec in history.steps:
        cells = [str(rec.epoch), str(rec.step)]
        cells += ["%.17g" % getattr(rec.losses, f) for f in LOSS_FIELDS]
        lines.append(",".join(cells))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8", newline="\n")


def read_history_csv(path: str | Path) -> list[StepRecord]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines or lines[0] != HISTORY_HEADER:
        raise ValidationError(f"bad history header in {path}")
    out = []
    for line in lines[1:]:
        cells = line.split(",")
        if len(cells) != 2 + len(LOSS_FIELDS):
            raise ValidationError(f"bad history row in {path}: {line!r}")
        vals = dict(zip(LOSS_FIELDS, (float(c) for c in cells[2:])))
        out.append(StepRecord(epoch=int(cells[0]), step=int(cells[1]),
                              losses=LossBreakdown(**vals)))
    return out


def arm_config(cfg: TrainConfig, arm: str) -> TrainConfig:
    """Map an ablation arm name onto a config for the shared trainer."""
    if arm == "none":
        return replace(cfg, alpha=0.0)
    if arm == "ecl_only":
        return replace(cfg, beta=0.0)
    if arm == "hpl_only":
        return replace(cfg, use_ecl=False)
    if arm == "both":
        return cfg
    raise ValidationError(f"unknown ablation arm {arm!r}")


@dataclass
class AblationResult:
    seeds: tuple[int, ...]
    reports: dict[str, list[EvalReport]]  # arm -> per-seed test report
    first_l_c: dict[str, list[float]]  # arm -> per-seed first-step CE

    def summary(self) -> dict:
        out: dict = {"seeds": list(self.seeds), "arms": {}}
        for arm in ABLATION_ARMS:
            reps = self.reports[arm]
            arm_out = {}
            for metric in ("auc", "best_hm", "best_seen", "best_unseen"):
                vals = np.array([getattr(r, metric) for r in reps])
                arm_out[metric] = {
                    "mean": float(vals.mean()),
                    "sd": float(vals.std()),
                    "per_seed": [float(v) for v in vals],
                }
            out["arms"][arm] = arm_out
        return out


def run_ablation(
    cfg: TrainConfig,
    data: Dataset,
    space: LabelSpace,
    hierarchy: Hierarchy,
    seeds: tuple[int, ...] | list[int],
) -> AblationResult:
    """Train every arm on the same data with the same seed list.

    Arms differ only in which loss groups exist; data, splits and the
    per-seed initialization are shared, so first-step CE must agree
    across arms for each seed.
    """
    seeds = tuple(int(s) for s in seeds)
    if len(seeds) < 3:
        raise ValidationError("ablation needs at least 3 seeds")
    if len(set(seeds)) != len(seeds):
        raise ValidationError("ablation seeds must be distinct")
    reports: dict[str, list[EvalReport]] = {arm: [] for arm in ABLATION_ARMS}
    first_l_c: dict[str, list[float]] = {arm: [] for arm in ABLATION_ARMS}
    for arm in ABLATION_ARMS:
        for seed in seeds:
            run_cfg = arm_config(replace(cfg, seed=seed), arm)
            result = train(run_cfg, data, space, hierarchy)
            reports[arm].append(
                evaluate_split(result.params, data, space, hierarchy, run_cfg, "test"))
            first_l_c[arm].append(result.history.steps[0].losses.l_c)
    return AblationResult(seeds=seeds, reports=reports, first_l_c=first_l_c)


def write_ablation_json(path: str | Path, result: AblationResult) -> None:
    payload = result.summary()
    payload["first_step_l_c"] = {arm: ["%.17g" % v for v in vals]
                                 for arm, vals in result.first_l_c.items()}
    text = json.dumps(payload, indent=2, sort_keys=True) + "\n"
    Path(path).write_text(text, encoding="utf-8", newline="\n")
