"""Training losses.

Three families: softmax cross-entropy over composition logits, an
asymmetric per-label sigmoid loss, and closed-form relaxations of the
generated rule sets. Every rule-based term exists twice: a plain numpy
closed form used as an oracle and in reports, and a vectorized graph
builder used during training. The two must agree to float precision;
tests enforce that against the generic formula evaluator as well.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Graph, Node
from .data import LabelSpace
from .errors import NumericalError, ValidationError
from .fol import GRANULARITIES, LabelRef
from .fuzzy import FuzzyConfig
from .hierarchy import Hierarchy


@dataclass(frozen=True)
class ScoreTable:
    """Per-sample label scores grouped by granularity.

    ``scores[g]`` is a (k, n_g) array of unit-interval memberships.
    ``zhat`` keeps the standardized logits the scores were squashed
    from (the asymmetric loss re-squashes them at its own temperature)
    and ``comp_logits`` the raw composition logits for cross-entropy.
    """

    scores: dict[str, np.ndarray]
    zhat: dict[str, np.ndarray] = field(default_factory=dict)
    comp_logits: np.ndarray | None = None

    def __post_init__(self):
        if not self.scores:
            raise ValidationError("score table needs at least one granularity")
        k = None
        for name, arr in self.scores.items():
            if name not in GRANULARITIES:
                raise ValidationError(f"unknown granularity {name!r}")
            if arr.ndim != 2:
                raise ValidationError(f"scores[{name!r}] must be 2-d, got {arr.shape}")
            if k is None:
                k = arr.shape[0]
            elif arr.shape[0] != k:
                raise ValidationError("granularities disagree on sample count")
            if arr.size and (arr.min() < 0.0 or arr.max() > 1.0):
                raise ValidationError(f"scores[{name!r}] outside [0, 1]")

    @property
    def k(self) -> int:
        return next(iter(self.scores.values())).shape[0]

    def column(self, ref: LabelRef) -> np.ndarray:
        if ref.granularity not in self.scores:
            raise ValidationError(f"no scores for granularity {ref.granularity!r}")
        arr = self.scores[ref.granularity]
        if not (0 <= ref.index < arr.shape[1]):
            raise ValidationError(f"label index {ref.index} out of range for {ref.granularity}")
        return arr[:, ref.index]


@dataclass(frozen=True)
class AsymLossParams:
    """Knobs of the asymmetric per-label loss."""

    tau: float = 15.0
    gamma_pos: float = 0.0
    gamma_neg: float = 4.0
    clip: float = 0.05

    def __post_init__(self):
        if self.tau <= 0:
            raise ValidationError("tau must be positive")
        if self.gamma_pos < 0 or self.gamma_neg < 0:
            raise ValidationError("focusing exponents must be non-negative")
        if not (0.0 <= self.clip < 1.0):
            raise ValidationError("clip must lie in [0, 1)")


@dataclass(frozen=True)
class LossBreakdown:
    """One training step's loss components.

    l_er and l_hr are the rule terms as contributed to the total, so
    they read as zero during rule warmup.
    """

    l_c: float
    l_ea: float
    l_er: float
    l_ha: float
    l_hr: float
    l_ecl: float
    l_hpl: float
    total: float


LOSS_FIELDS = ("l_c", "l_ea", "l_er", "l_ha", "l_hr", "l_ecl", "l_hpl", "total")


def combine_losses(
    l_c: float,
    l_ea: float,
    l_er: float,
    l_ha: float,
    l_hr: float,
    alpha: float,
    beta: float,
    rules_active: bool = True,
) -> LossBreakdown:
    if not rules_active:
        l_er = 0.0
        l_hr = 0.0
    l_ecl = l_ea + l_er
    l_hpl = l_ha + l_hr
    total = l_c + alpha * (l_ecl + beta * l_hpl)
    return LossBreakdown(
        l_c=float(l_c), l_ea=float(l_ea), l_er=float(l_er),
        l_ha=float(l_ha), l_hr=float(l_hr),
        l_ecl=float(l_ecl), l_hpl=float(l_hpl), total=float(total),
    )


# -- closed forms (numpy) ---------------------------------------------------


def _check_unit(name: str, a: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    if a.size == 0:
        raise ValidationError(f"{name} is empty")
    if a.min() < 0.0 or a.max() > 1.0:
        raise ValidationError(f"{name} outside [0, 1]")
    return a


def _mean_power_root(values: np.ndarray, q: int) -> float:
    """(mean values**q)**(1/q), diverging inputs rejected."""
    with np.errstate(divide="ignore", over="ignore"):
        m = float(np.mean(np.power(values, float(q))))
        out = m ** (1.0 / q)
    if not np.isfinite(out):
        raise NumericalError(f"power mean diverged for q={q}")
    return out


def implication_degree(antecedent: np.ndarray, consequent: np.ndarray, q: int = 1) -> float:
    """Universally quantified implication over one score column pair."""
    a = _check_unit("antecedent", antecedent)
    b = _check_unit("consequent", consequent)
    if a.shape != b.shape:
        raise ValidationError("column shapes differ")
    return 1.0 - _mean_power_root(a - a * b, q)


def composition_consistency(
    s_comp: np.ndarray, s_verb: np.ndarray, s_obj: np.ndarray, q: int = 1
) -> float:
    """Degree to which a composition implies both of its parts, in [0, 2]."""
    return implication_degree(s_comp, s_verb, q) + implication_degree(s_comp, s_obj, q)


def exclusivity_degree(s: np.ndarray, siblings: list[np.ndarray], q: int = 1) -> float:
    """Degree to which a label suppresses each sibling; 1 with no siblings."""
    s = _check_unit("scores", s)
    if not siblings:
        return 1.0
    terms = [_mean_power_root(s * _check_unit("sibling", m), q) for m in siblings]
    return 1.0 - float(np.mean(terms))


def rule_loss_ecl(
    table: ScoreTable,
    space: LabelSpace,
    q: int = 1,
    comp_scope: str = "seen",
) -> float:
    """Closed form of the composition/exclusivity rule set, in [-1, 3]."""
    if comp_scope not in ("seen", "all"):
        raise ValidationError(f"unknown comp_scope {comp_scope!r}")
    s_c = table.scores["composition"]
    s_v = table.scores["verb"]
    s_o = table.scores["object"]
    if s_v.shape[1] != len(space.verbs) or s_o.shape[1] != len(space.objects):
        raise ValidationError("score table does not match label space")
    ids = space.seen_ids() if comp_scope == "seen" else space.composition_ids()
    comp_term = float(np.mean([
        1.0 - composition_consistency(
            s_c[:, cid], s_v[:, space.compositions[cid].verb],
            s_o[:, space.compositions[cid].object], q)
        for cid in ids
    ]))
    verb_term = float(np.mean([
        1.0 - exclusivity_degree(s_v[:, i], [s_v[:, j] for j in range(s_v.shape[1]) if j != i], q)
        for i in range(s_v.shape[1])
    ]))
    obj_term = float(np.mean([
        1.0 - exclusivity_degree(s_o[:, i], [s_o[:, j] for j in range(s_o.shape[1]) if j != i], q)
        for i in range(s_o.shape[1])
    ]))
    return comp_term + verb_term + obj_term


def rule_loss_hpl(
    table: ScoreTable,
    space: LabelSpace,
    hierarchy: Hierarchy,
    q: int = 1,
) -> float:
    """Closed form of the hierarchy anchoring/exclusivity rule set, in [0, 4]."""
    s_v = table.scores["verb"]
    s_o = table.scores["object"]
    s_cv = table.scores["coarse_verb"]
    s_co = table.scores["coarse_object"]
    if len(hierarchy.verb_parent) != s_v.shape[1] or len(hierarchy.object_parent) != s_o.shape[1]:
        raise ValidationError("hierarchy does not match score table")
    va = float(np.mean([
        1.0 - implication_degree(s_v[:, i], s_cv[:, hierarchy.verb_parent[i]], q)
        for i in range(s_v.shape[1])
    ]))
    oa = float(np.mean([
        1.0 - implication_degree(s_o[:, i], s_co[:, hierarchy.object_parent[i]], q)
        for i in range(s_o.shape[1])
    ]))
    cv = float(np.mean([
        1.0 - exclusivity_degree(s_cv[:, i], [s_cv[:, j] for j in range(s_cv.shape[1]) if j != i], q)
        for i in range(s_cv.shape[1])
    ]))
    co = float(np.mean([
        1.0 - exclusivity_degree(s_co[:, i], [s_co[:, j] for j in range(s_co.shape[1]) if j != i], q)
        for i in range(s_co.shape[1])
    ]))
    return va + oa + cv + co


def ce_loss(logits: np.ndarray, labels: np.ndarray) -> float:
    """Mean softmax cross-entropy, stabilized by row max subtraction."""
    z = np.asarray(logits, dtype=np.float64)
    y = np.asarray(labels)
    if z.ndim != 2 or y.shape != (z.shape[0],):
        raise ValidationError(f"bad shapes for cross-entropy: {z.shape} vs {y.shape}")
    z = z - z.max(axis=1, keepdims=True)
    log_probs = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    return float(-np.mean(log_probs[np.arange(z.shape[0]), y]))


def asym_loss(zhat: np.ndarray, labels: np.ndarray, params: AsymLossParams = AsymLossParams()) -> float:
    """Asymmetric sigmoid loss over standardized logits.

    Positives pay a (possibly focused) log loss; negatives are clipped
    by a small margin, focused hard, and averaged over the negative
    slots so the two sides stay on comparable scales.
    """
    z = np.asarray(zhat, dtype=np.float64)
    y = np.asarray(labels)
    if z.ndim != 2 or y.shape != (z.shape[0],):
        raise ValidationError(f"bad shapes for asymmetric loss: {z.shape} vs {y.shape}")
    k, n = z.shape
    s = 1.0 / (1.0 + np.exp(-params.tau * z))
    sp = np.maximum(s[np.arange(k), y], 1e-12)
    pos = -np.log(sp)
    if params.gamma_pos != 0.0:
        pos = pos * np.power(1.0 - sp, params.gamma_pos)
    total = pos.copy()
    if n > 1:
        st = np.maximum(s - params.clip, 0.0)
        neg = -np.log(np.maximum(1.0 - st, 1e-12))
        if params.gamma_neg != 0.0:
            neg = neg * np.power(st, params.gamma_neg)
        neg[np.arange(k), y] = 0.0
        total = total + neg.sum(axis=1) / (n - 1)
    return float(np.mean(total))


# -- graph builders ---------------------------------------------------------


def build_ce_loss(g: Graph, comp_logits: Node, onehot: Node) -> Node:
    return g.softmax_ce(comp_logits, onehot)


def build_asym_loss(g: Graph, zhat: Node, onehot: Node, params: AsymLossParams = AsymLossParams()) -> Node:
    k, n = zhat.shape
    s = g.sigmoid(g.scale(zhat, params.tau))
    pos = g.mul(onehot, g.scale(g.log(s, floor=1e-12), -1.0))
    if params.gamma_pos != 0.0:
        # the mask keeps off-label entries from contributing anyway
        pos = g.mul(pos, _focus(g, g.sub(_full(g, (k, n), 1.0), s), params.gamma_pos))
    loss = g.scale(g.sum(pos), 1.0 / k)
    if n > 1:
        st = g.maximum(g.sub(s, _full(g, (k, n), params.clip)), _full(g, (k, n), 0.0))
        neg = g.scale(g.log(g.sub(_full(g, (k, n), 1.0), st), floor=1e-12), -1.0)
        if params.gamma_neg != 0.0:
            neg = g.mul(neg, _focus(g, st, params.gamma_neg))
        neg = g.mul(g.sub(_full(g, (k, n), 1.0), onehot), neg)
        loss = g.add(loss, g.scale(g.sum(neg), 1.0 / (k * (n - 1))))
    return loss


def _full(g: Graph, shape: tuple[int, ...], value: float) -> Node:
    return g.constant(np.full(shape, value))


def _focus(g: Graph, base: Node, gamma: float) -> Node:
    if float(gamma).is_integer():
        return g.pow_int(base, int(gamma))
    return g.powf(base, gamma)


def _build_implication_columns(g: Graph, s_ant: Node, s_cons_aligned: Node, cfg: FuzzyConfig) -> Node:
    """Per-column violation magnitudes (mean (a - a*b)**q)**(1/q)."""
    t = g.sub(s_ant, g.mul(s_ant, s_cons_aligned))
    return g.root_int(g.mean(g.pow_int(t, cfg.q), axis=0), cfg.q, eps=cfg.epsilon)


def _build_exclusivity_mean(g: Graph, s: Node, cfg: FuzzyConfig) -> Node | None:
    """Mean over labels of (1 - exclusivity degree); None when all trivial.

    Pairwise violation magnitudes come from one Gram product of the
    q-th powers: mean_k (s_i s_j)**q == (1/k) (S**q)^T (S**q).
    """
    k, n = s.shape
    if n < 2:
        return None
    a = g.pow_int(s, cfg.q)
    gram = g.root_int(g.scale(g.matmul(g.transpose(a), a), 1.0 / k), cfg.q, eps=cfg.epsilon)
    diag = g.sum(g.mul(gram, g.constant(np.eye(n))), axis=1)
    return g.scale(g.mean(g.sub(g.sum(gram, axis=1), diag)), 1.0 / (n - 1))


def _onehot_columns(n_rows: int, picks: list[int], n_cols: int) -> np.ndarray:
    m = np.zeros((n_rows, n_cols))
    m[picks, np.arange(n_cols)] = 1.0
    return m


def build_ecl_rule_loss(
    g: Graph,
    scores: dict[str, Node],
    space: LabelSpace,
    cfg: FuzzyConfig = FuzzyConfig(),
    comp_scope: str = "seen",
) -> Node:
    """Vectorized composition/exclusivity rule loss over a score batch."""
    if comp_scope not in ("seen", "all"):
        raise ValidationError(f"unknown comp_scope {comp_scope!r}")
    ids = list(space.seen_ids() if comp_scope == "seen" else space.composition_ids())
    n_v, n_o, n_c = len(space.verbs), len(space.objects), len(space.compositions)
    s_c = g.matmul(scores["composition"], g.constant(_onehot_columns(n_c, ids, len(ids))))
    out = g.constant(-1.0)
    for gran, size, picks in (
        ("verb", n_v, [space.compositions[c].verb for c in ids]),
        ("object", n_o, [space.compositions[c].object for c in ids]),
    ):
        aligned = g.matmul(scores[gran], g.constant(_onehot_columns(size, picks, len(ids))))
        out = g.add(out, g.mean(_build_implication_columns(g, s_c, aligned, cfg)))
    for gran in ("verb", "object"):
        term = _build_exclusivity_mean(g, scores[gran], cfg)
        if term is not None:
            out = g.add(out, term)
    return out


def build_hpl_rule_loss(
    g: Graph,
    scores: dict[str, Node],
    space: LabelSpace,
    hierarchy: Hierarchy,
    cfg: FuzzyConfig = FuzzyConfig(),
) -> Node:
    """Vectorized hierarchy anchoring/exclusivity rule loss."""
    out = g.constant(0.0)
    for fine, coarse, parent in (
        ("verb", "coarse_verb", hierarchy.verb_parent),
        ("object", "coarse_object", hierarchy.object_parent),
    ):
        s_f = scores[fine]
        n_coarse = scores[coarse].shape[1]
        if len(parent) != s_f.shape[1]:
            raise ValidationError(f"hierarchy does not match {fine} scores")
        aligned = g.matmul(scores[coarse], g.constant(
            _onehot_columns(n_coarse, list(parent), len(parent))))
        out = g.add(out, g.mean(_build_implication_columns(g, s_f, aligned, cfg)))
    for coarse in ("coarse_verb", "coarse_object"):
        term = _build_exclusivity_mean(g, scores[coarse], cfg)
        if term is not None:
            out = g.add(out, term)
    return out
