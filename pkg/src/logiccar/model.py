"""Compositional scoring model.

Linear heads score verbs on the dynamic feature half and objects on
the static half; coarse categories get their own heads or a max fold
over child logits. Composition logits come from additive fusion of the
part logits or a dedicated pair of split heads. Each granularity's
logits are standardized per sample before the sigmoid that turns them
into rule memberships; the raw composition logits feed cross-entropy.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .autodiff import Graph, Node, forward
from .data import LabelSpace
from .errors import ValidationError
from .hierarchy import Hierarchy
from .losses import ScoreTable

FUSIONS = ("additive", "dedicated")
COARSE_MODES = ("head", "max")
CHECKPOINT_FORMAT = "compositional-scorer-v1"


@dataclass
class ScoreNodes:
    """Handles into a scoring graph, keyed by granularity."""

    x_dyn: Node
    x_sta: Node
    logits: dict[str, Node]
    zhat: dict[str, Node]
    scores: dict[str, Node]

    @property
    def comp_logits(self) -> Node:
        return self.logits["composition"]


def _check_modes(fusion: str, coarse_mode: str) -> None:
    if fusion not in FUSIONS:
        raise ValidationError(f"unknown fusion {fusion!r}")
    if coarse_mode not in COARSE_MODES:
        raise ValidationError(f"unknown coarse_mode {coarse_mode!r}")


def init_params(
    space: LabelSpace,
    hierarchy: Hierarchy,
    dim: int,
    rng: np.random.Generator,
    fusion: str = "additive",
    coarse_mode: str = "head",
) -> dict[str, np.ndarray]:
    """Uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)) weights, zero biases.

    Weight draw order is fixed so a seeded generator always produces
    the same initialization regardless of downstream use.
    """
    _check_modes(fusion, coarse_mode)
    if dim < 1:
        raise ValidationError("dim must be positive")
    bound = 1.0 / np.sqrt(dim)

    def head(n: int, b: float = bound) -> np.ndarray:
        return rng.uniform(-b, b, size=(dim, n))

    p: dict[str, np.ndarray] = {}
    p["w_verb"] = head(len(space.verbs))
    p["w_object"] = head(len(space.objects))
    if coarse_mode == "head":
        p["w_coarse_verb"] = head(len(hierarchy.coarse_verbs))
        p["w_coarse_object"] = head(len(hierarchy.coarse_objects))
    if fusion == "dedicated":
        # the dedicated head sees both halves, so fan_in doubles
        b2 = 1.0 / np.sqrt(2 * dim)
        p["w_comp_dyn"] = head(len(space.compositions), b2)
        p["w_comp_sta"] = head(len(space.compositions), b2)
        p["b_comp"] = np.zeros((1, len(space.compositions)))
    p["b_verb"] = np.zeros((1, len(space.verbs)))
    p["b_object"] = np.zeros((1, len(space.objects)))
    if coarse_mode == "head":
        p["b_coarse_verb"] = np.zeros((1, len(hierarchy.coarse_verbs)))
        p["b_coarse_object"] = np.zeros((1, len(hierarchy.coarse_objects)))
    return p


def _selector(n_rows: int, picks: list[int]) -> np.ndarray:
    m = np.zeros((n_rows, len(picks)))
    m[picks, np.arange(len(picks))] = 1.0
    return m


def _standardize(g: Graph, z: Node) -> Node:
    """Per-row zero-mean unit-variance logits, variance floored at 1e-12."""
    k, n = z.shape
    ones_row = g.constant(np.ones((1, n)))
    centered = g.sub(z, g.matmul(g.reshape(g.mean(z, axis=1), (k, 1)), ones_row))
    var = g.matmul(g.reshape(g.mean(g.pow_int(centered, 2), axis=1), (k, 1)), ones_row)
    inv_std = g.pow_int(g.root_int(g.add(var, g.constant(np.full((k, n), 1e-12))), 2), -1)
    return g.mul(centered, inv_std)


def _max_fold(g: Graph, z: Node, parent: tuple[int, ...], n_coarse: int) -> Node:
    """Coarse logits as the max over each group's child columns."""
    k = z.shape[0]
    out: Node | None = None
    for c in range(n_coarse):
        children = [i for i, p in enumerate(parent) if p == c]
        if not children:
            raise ValidationError(f"coarse group {c} has no children")
        col = g.matmul(z, g.constant(_selector(len(parent), children[:1])))
        for i in children[1:]:
            col = g.maximum(col, g.matmul(z, g.constant(_selector(len(parent), [i]))))
        placed = g.matmul(col, g.constant(_selector(n_coarse, [c]).T))
        out = placed if out is None else g.add(out, placed)
    assert out is not None
    return out


def build_scoring_graph(
    g: Graph,
    space: LabelSpace,
    hierarchy: Hierarchy,
    k: int,
    dim: int,
    fusion: str = "additive",
    coarse_mode: str = "head",
    score_temp: float = 1.0,
) -> ScoreNodes:
    _check_modes(fusion, coarse_mode)
    if len(hierarchy.verb_parent) != len(space.verbs) or len(hierarchy.object_parent) != len(space.objects):
        raise ValidationError("hierarchy does not match the label space")
    x_dyn = g.parameter("x_dyn", (k, dim))
    x_sta = g.parameter("x_sta", (k, dim))
    ones_k1 = g.constant(np.ones((k, 1)))

    def head(x: Node, stem: str, n: int) -> Node:
        w = g.parameter(f"w_{stem}", (dim, n))
        b = g.parameter(f"b_{stem}", (1, n))
        return g.add(g.matmul(x, w), g.matmul(ones_k1, b))

    logits: dict[str, Node] = {}
    logits["verb"] = head(x_dyn, "verb", len(space.verbs))
    logits["object"] = head(x_sta, "object", len(space.objects))
    if coarse_mode == "head":
        logits["coarse_verb"] = head(x_dyn, "coarse_verb", len(hierarchy.coarse_verbs))
        logits["coarse_object"] = head(x_sta, "coarse_object", len(hierarchy.coarse_objects))
    else:
        logits["coarse_verb"] = _max_fold(
            g, logits["verb"], hierarchy.verb_parent, len(hierarchy.coarse_verbs))
        logits["coarse_object"] = _max_fold(
            g, logits["object"], hierarchy.object_parent, len(hierarchy.coarse_objects))

    if fusion == "additive":
        p_v = _selector(len(space.verbs), [c.verb for c in space.compositions])
        p_o = _selector(len(space.objects), [c.object for c in space.compositions])
        logits["composition"] = g.add(
            g.matmul(logits["verb"], g.constant(p_v)),
            g.matmul(logits["object"], g.constant(p_o)),
        )
    else:
        n_c = len(space.compositions)
        logits["composition"] = g.add(
            g.add(
                g.matmul(x_dyn, g.parameter("w_comp_dyn", (dim, n_c))),
                g.matmul(x_sta, g.parameter("w_comp_sta", (dim, n_c))),
            ),
            g.matmul(ones_k1, g.parameter("b_comp", (1, n_c))),
        )

    zhat = {name: _standardize(g, node) for name, node in logits.items()}
    scores = {name: g.sigmoid(g.scale(zh, float(score_temp))) for name, zh in zhat.items()}
    return ScoreNodes(x_dyn=x_dyn, x_sta=x_sta, logits=logits, zhat=zhat, scores=scores)


def split_features(features: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] % 2 != 0:
        raise ValidationError(f"features must be (k, 2*dim), got {x.shape}")
    d = x.shape[1] // 2
    return x[:, :d], x[:, d:]


def forward_scores(
    params: dict[str, np.ndarray],
    features: np.ndarray,
    space: LabelSpace,
    hierarchy: Hierarchy,
    fusion: str = "additive",
    coarse_mode: str = "head",
    score_temp: float = 1.0,
) -> ScoreTable:
    """Convenience one-shot forward pass producing a ScoreTable."""
    x_dyn, x_sta = split_features(features)
    g = Graph()
    nodes = build_scoring_graph(
        g, space, hierarchy, k=x_dyn.shape[0], dim=x_dyn.shape[1],
        fusion=fusion, coarse_mode=coarse_mode, score_temp=score_temp,
    )
    bindings = dict(params)
    bindings["x_dyn"] = x_dyn
    bindings["x_sta"] = x_sta
    vals = forward(g, bindings)
    return ScoreTable(
        scores={name: vals[node.i] for name, node in nodes.scores.items()},
        zhat={name: vals[node.i] for name, node in nodes.zhat.items()},
        comp_logits=vals[nodes.comp_logits.i],
    )


def predict_composition(
    comp_logits: np.ndarray,
    seen_ids: tuple[int, ...],
    unseen_ids: tuple[int, ...],
    bias_seen: float = 0.0,
) -> np.ndarray:
    """Argmax over candidate compositions with bias_seen added to seen ones.

    A bias of -inf masks the seen side entirely (and +inf the unseen
    side) instead of saturating the arithmetic, which would erase the
    within-side ordering. Ties resolve to the smallest composition id
    because candidate columns are scanned in ascending id order.
    """
    z = np.asarray(comp_logits, dtype=np.float64)
    if z.ndim != 2:
        raise ValidationError(f"composition logits must be 2-d, got {z.shape}")
    if set(seen_ids) & set(unseen_ids):
        raise ValidationError("seen and unseen candidate sets overlap")
    if bias_seen == -np.inf:
        pool = sorted(unseen_ids)
    elif bias_seen == np.inf:
        pool = sorted(seen_ids)
    else:
        pool = sorted(set(seen_ids) | set(unseen_ids))
    if not pool:
        raise ValidationError("empty candidate pool")
    for c in pool:
        if not (0 <= c < z.shape[1]):
            raise ValidationError(f"candidate {c} out of range")
    sub = z[:, pool].copy()
    if np.isfinite(bias_seen) and bias_seen != 0.0:
        seen = set(seen_ids)
        for j, c in enumerate(pool):
            if c in seen:
                sub[:, j] += bias_seen
    picks = np.argmax(sub, axis=1)
    return np.asarray(pool, dtype=np.int64)[picks]


def save_checkpoint(path, params: dict[str, np.ndarray], meta: dict) -> None:
    """Write parameters as exact decimal strings so reloads are bit-equal."""
    payload = {
        "format": CHECKPOINT_FORMAT,
        "meta": meta,
        "params": {
            name: {
                "shape": list(arr.shape),
                "values": ["%.17g" % float(v) for v in np.asarray(arr, dtype=np.float64).ravel()],
            }
            for name, arr in params.items()
        },
    }
    with open(path, "w", newline="\n") as f:
        json.dump(payload, f, indent=2)
        f.write("\n")


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    with open(path) as f:
        payload = json.load(f)
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise ValidationError(f"unrecognized checkpoint format in {path}")
    params = {
        name: np.array([float(s) for s in entry["values"]], dtype=np.float64).reshape(entry["shape"])
        for name, entry in payload["params"].items()
    }
    return params, payload.get("meta", {})
