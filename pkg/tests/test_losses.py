import numpy as np
import pytest

from logiccar.autodiff import Graph, backward, finite_diff_check, forward
from logiccar.data import Composition, DatasetSpec, LabelSpace, build_label_space
from logiccar.errors import ValidationError
from logiccar.fol import gen_ecl_rules, gen_hpl_rules
from logiccar.fuzzy import FuzzyConfig, evaluate_rule
from logiccar.hierarchy import Hierarchy
from logiccar.losses import (
    AsymLossParams,
    ScoreTable,
    asym_loss,
    build_asym_loss,
    build_ce_loss,
    build_ecl_rule_loss,
    build_hpl_rule_loss,
    ce_loss,
    combine_losses,
    composition_consistency,
    exclusivity_degree,
    implication_degree,
    rule_loss_ecl,
    rule_loss_hpl,
)


def tiny_space():
    comps = (
        Composition(0, 0, "seen"),
        Composition(1, 1, "seen"),
        Composition(0, 1, "unseen_val"),
    )
    ls = LabelSpace(verbs=("v0", "v1"), objects=("o0", "o1"), compositions=comps)
    h = Hierarchy(
        coarse_verbs=("vg0",), coarse_objects=("og0", "og1"),
        verb_parent=(0, 0), object_parent=(0, 1),
    )
    ls.validate()
    return ls, h


def generated_space():
    spec = DatasetSpec(
        coarse_verbs=2, verbs_per_coarse=2, coarse_objects=2, objects_per_coarse=2,
        dim=4, n_compositions=10, samples_per_composition=4, seed=3,
    )
    return build_label_space(spec)


def random_table(space, h, k, rng, lo=0.0, hi=1.0):
    sizes = {
        "composition": len(space.compositions),
        "verb": len(space.verbs),
        "object": len(space.objects),
        "coarse_verb": len(h.coarse_verbs),
        "coarse_object": len(h.coarse_objects),
    }
    return ScoreTable(scores={g: rng.uniform(lo, hi, size=(k, n)) for g, n in sizes.items()})


def onehot_table(space, h, comp_ids):
    k = len(comp_ids)
    s = {
        "composition": np.zeros((k, len(space.compositions))),
        "verb": np.zeros((k, len(space.verbs))),
        "object": np.zeros((k, len(space.objects))),
        "coarse_verb": np.zeros((k, len(h.coarse_verbs))),
        "coarse_object": np.zeros((k, len(h.coarse_objects))),
    }
    for r, cid in enumerate(comp_ids):
        c = space.compositions[cid]
        s["composition"][r, cid] = 1.0
        s["verb"][r, c.verb] = 1.0
        s["object"][r, c.object] = 1.0
        s["coarse_verb"][r, h.verb_parent[c.verb]] = 1.0
        s["coarse_object"][r, h.object_parent[c.object]] = 1.0
    return ScoreTable(scores=s)


class TestClosedForms:
    def test_implication_reference_q2(self):
        got = implication_degree(np.array([0.8, 0.2]), np.array([0.9, 0.5]), q=2)
        assert got == pytest.approx(1.0 - np.sqrt(0.0082), abs=1e-15)
        assert got == pytest.approx(0.909446148618626, abs=1e-12)

    def test_composition_consistency_reference(self):
        s_c = np.array([0.8, 0.2])
        got = composition_consistency(s_c, np.array([0.9, 0.5]), np.array([1.0, 0.4]), q=2)
        expected = (1.0 - np.sqrt(0.0082)) + (1.0 - np.sqrt(0.0072))
        assert got == pytest.approx(expected, abs=1e-14)
        assert got == pytest.approx(1.8245933, abs=1e-7)

    def test_exclusivity_reference_q1(self):
        got = exclusivity_degree(np.array([0.9, 0.1]), [np.array([0.2, 0.3])], q=1)
        assert got == pytest.approx(0.895, abs=1e-15)

    def test_exclusivity_no_siblings_is_one(self):
        assert exclusivity_degree(np.array([0.3, 0.7]), [], q=3) == 1.0

    def test_perfect_antecedent_support(self):
        ones = np.ones(4)
        assert implication_degree(ones, ones, q=2) == 1.0
        assert implication_degree(np.zeros(4), np.random.default_rng(0).uniform(size=4)) == 1.0

    def test_rejects_out_of_range(self):
        with pytest.raises(ValidationError):
            implication_degree(np.array([1.2]), np.array([0.5]))


class TestRuleLossFixedPoints:
    def test_onehot_consistent_is_exact(self):
        ls, h = tiny_space()
        table = onehot_table(ls, h, [0, 1, 0, 1])
        assert rule_loss_ecl(table, ls, q=1) == -1.0
        assert rule_loss_ecl(table, ls, q=2) == -1.0
        assert rule_loss_hpl(table, ls, h, q=1) == 0.0
        assert rule_loss_hpl(table, ls, h, q=3) == 0.0

    def test_ranges_over_random_tables(self):
        ls, h = generated_space()
        rng = np.random.default_rng(7)
        for q in (1, 2, 3):
            for _ in range(40):
                t = random_table(ls, h, k=5, rng=rng)
                ecl = rule_loss_ecl(t, ls, q=q)
                hpl = rule_loss_hpl(t, ls, h, q=q)
                assert -1.0 - 1e-12 <= ecl <= 3.0 + 1e-12
                assert -1e-12 <= hpl <= 4.0 + 1e-12

    def test_comp_scope_all_differs(self):
        ls, h = tiny_space()
        rng = np.random.default_rng(1)
        t = random_table(ls, h, k=6, rng=rng)
        seen = rule_loss_ecl(t, ls, q=1, comp_scope="seen")
        both = rule_loss_ecl(t, ls, q=1, comp_scope="all")
        assert seen != both
        with pytest.raises(ValidationError):
            rule_loss_ecl(t, ls, q=1, comp_scope="train")


class TestAgainstGenericEvaluator:
    """The vectorized closed forms must agree with evaluating every
    generated rule through the formula interpreter."""

    def _ecl_via_rules(self, table, space, q, scope="seen"):
        cfg = FuzzyConfig(q=q)
        by_kind: dict[str, list[float]] = {}
        for r in gen_ecl_rules(space, scope).rules:
            by_kind.setdefault(r.kind, []).append(evaluate_rule(r, table, cfg))
        comp = np.mean([
            1.0 - dv - do
            for dv, do in zip(by_kind["comp_verb"], by_kind["comp_object"])
        ])
        return float(
            comp
            + np.mean([1.0 - d for d in by_kind["verb_excl"]])
            + np.mean([1.0 - d for d in by_kind["object_excl"]])
        )

    def _hpl_via_rules(self, table, space, h, q):
        cfg = FuzzyConfig(q=q)
        by_kind: dict[str, list[float]] = {}
        for r in gen_hpl_rules(space, h).rules:
            by_kind.setdefault(r.kind, []).append(evaluate_rule(r, table, cfg))
        return float(sum(
            np.mean([1.0 - d for d in by_kind[k]])
            for k in ("verb_parent", "object_parent", "coarse_verb_excl", "coarse_object_excl")
        ))

    @pytest.mark.parametrize("q", [1, 2, 3])
    def test_ecl_matches(self, q):
        ls, h = generated_space()
        rng = np.random.default_rng(q)
        for _ in range(10):
            t = random_table(ls, h, k=4, rng=rng)
            assert rule_loss_ecl(t, ls, q=q) == pytest.approx(
                self._ecl_via_rules(t, ls, q), abs=1e-9)

    @pytest.mark.parametrize("q", [1, 2, 3])
    def test_hpl_matches(self, q):
        ls, h = generated_space()
        rng = np.random.default_rng(10 + q)
        for _ in range(10):
            t = random_table(ls, h, k=4, rng=rng)
            assert rule_loss_hpl(t, ls, h, q=q) == pytest.approx(
                self._hpl_via_rules(t, ls, h, q), abs=1e-9)

    def test_trivial_coarse_group_handled(self):
        ls, h = tiny_space()  # single coarse verb -> trivial exclusivity
        rng = np.random.default_rng(5)
        t = random_table(ls, h, k=3, rng=rng)
        assert rule_loss_hpl(t, ls, h, q=2) == pytest.approx(
            self._hpl_via_rules(t, ls, h, q=2), abs=1e-9)


class TestCrossEntropy:
    def test_uniform_logits(self):
        z = np.zeros((4, 3))
        assert ce_loss(z, np.array([0, 1, 2, 0])) == pytest.approx(np.log(3.0), abs=1e-15)

    def test_huge_margin_vanishes(self):
        z = np.array([[50.0, 0.0, 0.0]])
        assert ce_loss(z, np.array([0])) < 1e-20

    def test_shape_validation(self):
        with pytest.raises(ValidationError):
            ce_loss(np.zeros((2, 3)), np.array([0, 1, 2]))


class TestAsymLoss:
    def test_midpoint_positive_only(self):
        # single label slot: no negatives, s+ = sigmoid(0) = 0.5
        got = asym_loss(np.zeros((1, 1)), np.array([0]))
        assert got == pytest.approx(np.log(2.0), abs=1e-15)

    def test_huge_margin_vanishes(self):
        z = np.array([[10.0 / 3.0, -10.0 / 3.0]])  # tau 15 -> logits +-50
        assert asym_loss(z, np.array([0])) < 1e-20

    def test_clip_zeroes_easy_negatives(self):
        # negative score below the clip never contributes
        params = AsymLossParams()
        z = np.array([[2.0, -1.0]])
        s_neg = 1.0 / (1.0 + np.exp(15.0))
        assert s_neg < params.clip
        got = asym_loss(z, np.array([0]), params)
        sp = 1.0 / (1.0 + np.exp(-30.0))
        assert got == pytest.approx(-np.log(sp), abs=1e-15)

    def test_focusing_reduces_moderate_negatives(self):
        z = np.array([[1.0, -0.05]])  # s_neg around 0.32
        hard = asym_loss(z, np.array([0]), AsymLossParams(gamma_neg=0.0))
        soft = asym_loss(z, np.array([0]), AsymLossParams(gamma_neg=4.0))
        assert soft < hard

    def test_param_validation(self):
        with pytest.raises(ValidationError):
            AsymLossParams(tau=0.0)
        with pytest.raises(ValidationError):
            AsymLossParams(clip=1.0)
        with pytest.raises(ValidationError):
            AsymLossParams(gamma_neg=-1.0)


class TestCombine:
    def test_reference_total(self):
        b = combine_losses(1.0, 0.3, 0.2, 0.15, 0.05, alpha=0.04, beta=0.06)
        assert b.l_ecl == pytest.approx(0.5, abs=1e-15)
        assert b.l_hpl == pytest.approx(0.2, abs=1e-15)
        assert b.total == pytest.approx(1.02048, abs=1e-12)

    def test_warmup_zeroes_rule_terms(self):
        b = combine_losses(1.0, 0.3, 0.2, 0.15, 0.05, alpha=0.04, beta=0.06, rules_active=False)
        assert b.l_er == 0.0 and b.l_hr == 0.0
        assert b.l_ecl == pytest.approx(0.3, abs=1e-15)
        assert b.total == pytest.approx(1.0 + 0.04 * (0.3 + 0.06 * 0.15), abs=1e-15)


class TestGraphBuilders:
    def _graph_value(self, build, table, *args, **kwargs):
        g = Graph()
        nodes = {gran: g.parameter(gran, arr.shape) for gran, arr in table.scores.items()}
        out = build(g, nodes, *args, **kwargs)
        vals = forward(g, dict(table.scores))
        return float(vals[out.i]), (g, nodes, out)

    @pytest.mark.parametrize("q", [1, 2, 3])
    def test_ecl_graph_matches_value(self, q):
        ls, h = generated_space()
        rng = np.random.default_rng(20 + q)
        for scope in ("seen", "all"):
            t = random_table(ls, h, k=6, rng=rng)
            got, _ = self._graph_value(build_ecl_rule_loss, t, ls, FuzzyConfig(q=q), scope)
            assert got == pytest.approx(rule_loss_ecl(t, ls, q=q, comp_scope=scope), abs=1e-12)

    @pytest.mark.parametrize("q", [1, 2])
    def test_hpl_graph_matches_value(self, q):
        for space_fn in (generated_space, tiny_space):
            ls, h = space_fn()
            rng = np.random.default_rng(30 + q)
            t = random_table(ls, h, k=5, rng=rng)
            got, _ = self._graph_value(build_hpl_rule_loss, t, ls, h, FuzzyConfig(q=q))
            assert got == pytest.approx(rule_loss_hpl(t, ls, h, q=q), abs=1e-12)

    def test_onehot_fixed_point_on_graph(self):
        ls, h = tiny_space()
        t = onehot_table(ls, h, [0, 1, 1, 0])
        got, _ = self._graph_value(build_ecl_rule_loss, t, ls, FuzzyConfig(q=2), "seen")
        assert got == -1.0

    def test_asym_graph_matches_value(self):
        rng = np.random.default_rng(3)
        k, n = 5, 4
        z = rng.uniform(-0.15, 0.15, size=(k, n))
        labels = rng.integers(0, n, size=k)
        onehot = np.zeros((k, n))
        onehot[np.arange(k), labels] = 1.0
        for params in (AsymLossParams(), AsymLossParams(gamma_pos=1.0, gamma_neg=2.0)):
            g = Graph()
            zn = g.parameter("zhat", (k, n))
            out = build_asym_loss(g, zn, g.constant(onehot), params)
            vals = forward(g, {"zhat": z})
            assert float(vals[out.i]) == pytest.approx(asym_loss(z, labels, params), abs=1e-12)

    def test_ce_graph_matches_value(self):
        rng = np.random.default_rng(4)
        k, n = 6, 5
        z = rng.normal(size=(k, n))
        labels = rng.integers(0, n, size=k)
        onehot = np.zeros((k, n))
        onehot[np.arange(k), labels] = 1.0
        g = Graph()
        zn = g.parameter("logits", (k, n))
        out = build_ce_loss(g, zn, g.constant(onehot))
        vals = forward(g, {"logits": z})
        assert float(vals[out.i]) == pytest.approx(ce_loss(z, labels), abs=1e-12)

    @pytest.mark.parametrize("q", [1, 2])
    def test_ecl_gradients_match_finite_differences(self, q):
        ls, h = generated_space()
        rng = np.random.default_rng(40 + q)
        t = random_table(ls, h, k=4, rng=rng, lo=0.1, hi=0.9)
        g = Graph()
        nodes = {gran: g.parameter(gran, arr.shape) for gran, arr in t.scores.items()}
        out = build_ecl_rule_loss(g, nodes, ls, FuzzyConfig(q=q))
        base = dict(t.scores)
        for gran in ("composition", "verb", "object"):
            def f(x, gran=gran):
                b = dict(base)
                b[gran] = x
                return float(forward(g, b)[out.i])

            def grad(x, gran=gran):
                b = dict(base)
                b[gran] = x
                return backward(g, out, forward(g, b))[gran]

            assert finite_diff_check(f, grad, base[gran]) < 1e-4

    def test_asym_gradients_match_finite_differences(self):
        rng = np.random.default_rng(9)
        k, n = 4, 3
        z = rng.uniform(-0.15, 0.15, size=(k, n))
        onehot = np.zeros((k, n))
        onehot[np.arange(k), rng.integers(0, n, size=k)] = 1.0
        g = Graph()
        zn = g.parameter("zhat", (k, n))
        out = build_asym_loss(g, zn, g.constant(onehot))
        err = finite_diff_check(
            lambda x: float(forward(g, {"zhat": x})[out.i]),
            lambda x: backward(g, out, forward(g, {"zhat": x}))["zhat"],
            z,
        )
        assert err < 1e-4


class TestScoreTable:
    def test_validation(self):
        with pytest.raises(ValidationError):
            ScoreTable(scores={})
        with pytest.raises(ValidationError):
            ScoreTable(scores={"verb": np.array([[1.5]])})
        with pytest.raises(ValidationError):
            ScoreTable(scores={"verb": np.zeros((2, 2)), "object": np.zeros((3, 2))})
        with pytest.raises(ValidationError):
            ScoreTable(scores={"tense": np.zeros((2, 2))})

    def test_column_lookup(self):
        from logiccar.fol import LabelRef

        t = ScoreTable(scores={"verb": np.array([[0.1, 0.9], [0.4, 0.6]])})
        np.testing.assert_array_equal(t.column(LabelRef("verb", 1)), [0.9, 0.6])
        with pytest.raises(ValidationError):
            t.column(LabelRef("object", 0))
        with pytest.raises(ValidationError):
            t.column(LabelRef("verb", 2))
