"""Differentiable fuzzy semantics for quantified rules.

Connectives: and -> a*b, or -> max(a,b), not -> 1-a, implies -> 1-a+a*b.
Quantifiers reduce per-sample truth values with a generalized power mean
of integer order q (q=1 is the arithmetic mean; larger q weighs the worst
violations more).

A quantified rule whose implication consequent is a conjunction is first
rewritten into the equivalent family of single-consequent implications
(phi => (psi1 and psi2)  ==  (phi => psi1) and (phi => psi2), and the
universal quantifier distributes over conjunction); the family aggregates
by arithmetic mean. Without this rewrite the conjunction's product
semantics would disagree with the closed-form category-exclusivity
degrees for every q.
"""

from __future__ import annotations

from dataclasses import dataclass
from numbers import Real

import numpy as np

from .autodiff import Graph, Node, forward
from .errors import NumericalError, ValidationError
from .fol import And, ForAll, Formula, Implies, Not, Or, Pred, Rule

__all__ = [
    "FuzzyConfig",
    "fuzzy_connective",
    "quantifier_mean",
    "split_clauses",
    "build_rule_degree",
    "evaluate_formula",
    "evaluate_rule",
]


@dataclass(frozen=True)
class FuzzyConfig:
    q: int = 1
    epsilon: float = 1e-12

    def __post_init__(self):
        if not isinstance(self.q, int) or isinstance(self.q, bool) or self.q == 0:
            raise ValidationError("q must be a nonzero integer")
        if not (self.epsilon > 0):
            raise ValidationError("epsilon must be positive")


def _check_unit(value, what: str):
    arr = np.asarray(value, dtype=np.float64)
    if np.any(arr < 0.0) or np.any(arr > 1.0):
        raise ValidationError(f"{what} outside [0, 1]: {value!r}")
    return arr


def fuzzy_connective(kind: str, a: Real, b: Real | None = None) -> float:
    """One connective applied to truth degrees in [0, 1]."""
    av = float(_check_unit(a, "operand"))
    if kind == "not":
        if b is not None:
            raise ValidationError("'not' is unary")
        return 1.0 - av
    if b is None:
        raise ValidationError(f"{kind!r} needs two operands")
    bv = float(_check_unit(b, "operand"))
    if kind == "and":
        return av * bv
    if kind == "or":
        return max(av, bv)
    if kind == "implies":
        return 1.0 - av + av * bv
    raise ValidationError(f"unknown connective {kind!r}")


def quantifier_mean(kind: str, values, cfg: FuzzyConfig = FuzzyConfig()) -> float:
    """Power-mean quantifier over a non-empty sequence of truth degrees.

    exists -> (mean(v^q))^(1/q); forall -> 1 - (mean((1-v)^q))^(1/q).
    The root is never clamped here, so exact 0/1 fixed points survive.
    """
    arr = _check_unit(np.asarray(list(values), dtype=np.float64), "values")
    if arr.size == 0:
        raise ValidationError("quantifier over an empty sequence")
    if kind == "forall":
        base = 1.0 - arr
    elif kind == "exists":
        base = arr
    else:
        raise ValidationError(f"unknown quantifier {kind!r}")
    with np.errstate(divide="ignore"):
        inner = float(np.mean(base ** float(cfg.q)))
        result = inner ** (1.0 / cfg.q)
    if not np.isfinite(result):
        raise NumericalError(f"quantifier mean diverged (q={cfg.q}, inner={inner})")
    return 1.0 - result if kind == "forall" else result


# -- rule rewriting ------------------------------------------------------------


def split_clauses(body: Formula) -> list[Formula]:
    """Flatten top-level conjunction and distribute implications over
    conjunctive consequents, producing the equivalent clause family."""
    if isinstance(body, And):
        return split_clauses(body.left) + split_clauses(body.right)
    if isinstance(body, Implies):
        consequents = split_clauses(body.consequent)
        if len(consequents) > 1:
            out: list[Formula] = []
            for c in consequents:
                out.extend(split_clauses(Implies(body.antecedent, c)))
            return out
    return [body]


# -- graph construction --------------------------------------------------------


def _build_pointwise(g: Graph, f: Formula, column, ones: Node) -> Node:
    """(K,) node of per-sample truth values for a quantifier-free formula."""
    if isinstance(f, Pred):
        return column(f.ref)
    if isinstance(f, Not):
        return g.sub(ones, _build_pointwise(g, f.body, column, ones))
    if isinstance(f, And):
        return g.mul(
            _build_pointwise(g, f.left, column, ones),
            _build_pointwise(g, f.right, column, ones),
        )
    if isinstance(f, Or):
        return g.maximum(
            _build_pointwise(g, f.left, column, ones),
            _build_pointwise(g, f.right, column, ones),
        )
    if isinstance(f, Implies):
        a = _build_pointwise(g, f.antecedent, column, ones)
        b = _build_pointwise(g, f.consequent, column, ones)
        return g.add(g.sub(ones, a), g.mul(a, b))
    if isinstance(f, ForAll):
        raise ValidationError("nested quantifiers are not supported")
    raise ValidationError(f"cannot evaluate {type(f).__name__}")


def build_forall_degree(g: Graph, values: Node, cfg: FuzzyConfig, ones: Node) -> Node:
    """Scalar degree 1 - (mean((1 - v)^q))^(1/q) of a (K,) truth vector."""
    viol = g.sub(ones, values)
    inner = g.mean(g.pow_int(viol, cfg.q))
    return g.sub(g.constant(1.0), g.root_int(inner, cfg.q, cfg.epsilon))


def build_rule_degree(g: Graph, formula: ForAll, column, k: int, cfg: FuzzyConfig) -> Node:
    """Scalar node for a quantified rule's truth degree.

    `column(ref)` must return the (k,) node of per-sample scores for a
    label reference. The rule body is clause-split first; the clause
    degrees aggregate by arithmetic mean.
    """
    if not isinstance(formula, ForAll):
        raise ValidationError("top-level formula must be universally quantified")
    ones = g.constant(np.ones(k))
    clause_degrees = [
        build_forall_degree(g, _build_pointwise(g, clause, column, ones), cfg, ones)
        for clause in split_clauses(formula.body)
    ]
    total = clause_degrees[0]
    for d in clause_degrees[1:]:
        total = g.add(total, d)
    return g.scale(total, 1.0 / len(clause_degrees))


# -- value-level evaluation -----------------------------------------------------


def evaluate_formula(formula: ForAll, table, cfg: FuzzyConfig = FuzzyConfig()) -> float:
    """Truth degree of a rule against a score table.

    `table` provides `k` (sample count) and `column(ref) -> (k,) array`.
    """
    g = Graph()
    cache: dict = {}

    def column(ref):
        if ref not in cache:
            cache[ref] = g.constant(_check_unit(table.column(ref), f"scores for {ref}"))
        return cache[ref]

    node = build_rule_degree(g, formula, column, table.k, cfg)
    return float(forward(g, {})[node.i])


def evaluate_rule(rule: Rule, table, cfg: FuzzyConfig = FuzzyConfig()) -> float:
    """Like evaluate_formula but degenerate flagged rules are exactly true."""
    if rule.trivial:
        return 1.0
    return evaluate_formula(rule.formula, table, cfg)
