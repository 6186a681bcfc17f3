import numpy as np
import pytest
from scipy import stats

from logiccar.data import (
    Composition,
    DatasetSpec,
    LabelSpace,
    build_label_space,
    draw_biased_pair,
    implied_hierarchy,
    nearest_prototype_accuracy,
    partition_samples,
    read_dataset,
    read_label_space,
    sample_dataset,
    write_dataset,
    write_label_space,
)
from logiccar.errors import ValidationError
from logiccar.seeding import substream

DEFAULT = DatasetSpec()


class TestBuildLabelSpace:
    def test_default_counts(self):
        ls, h = build_label_space(DEFAULT)
        assert len(ls.verbs) == 6 and len(ls.objects) == 8
        assert len(ls.compositions) == 40
        assert len(ls.seen_ids()) == 28
        assert len(ls.composition_ids("unseen_val")) == 6
        assert len(ls.composition_ids("unseen_test")) == 6
        ls.validate()

    def test_primitive_coverage(self):
        for seed in range(5):
            ls, _ = build_label_space(DatasetSpec(seed=seed))
            seen = [ls.compositions[i] for i in ls.seen_ids()]
            assert {c.verb for c in seen} == set(range(6))
            assert {c.object for c in seen} == set(range(8))

    def test_seed_determinism(self):
        a, _ = build_label_space(DatasetSpec(seed=3))
        b, _ = build_label_space(DatasetSpec(seed=3))
        c, _ = build_label_space(DatasetSpec(seed=4))
        assert a == b
        assert a != c

    def test_no_overlap_between_splits(self):
        ls, _ = build_label_space(DEFAULT)
        pairs = [(c.verb, c.object) for c in ls.compositions]
        assert len(set(pairs)) == len(pairs)

    def test_infeasible_specs_rejected(self):
        with pytest.raises(ValidationError):
            DatasetSpec(n_compositions=48).validate()  # full product
        with pytest.raises(ValidationError):
            DatasetSpec(n_compositions=10, unseen_fraction=0.5).validate()  # coverage impossible

    def test_unbiased_draws_are_uniform(self):
        rng = substream(0, "chi")
        h = implied_hierarchy(DEFAULT)
        counts = np.zeros((6, 8))
        for _ in range(10_000):
            v, o = draw_biased_pair(rng, 6, 8, 0.0, h.object_parent, 4)
            counts[v, o] += 1
        _, p = stats.chisquare(counts.reshape(-1))
        assert p > 0.01

    def test_bias_concentrates_on_families(self):
        rng = substream(0, "chi2")
        h = implied_hierarchy(DEFAULT)
        in_family = 0
        n = 10_000
        for _ in range(n):
            v, o = draw_biased_pair(rng, 6, 8, 1.0, h.object_parent, 4)
            in_family += h.object_parent[o] == v % 4
        assert in_family == n


class TestSampleDataset:
    def test_shapes_and_split_inheritance(self):
        spec = DatasetSpec(samples_per_composition=3, dim=4)
        ls, h = build_label_space(spec)
        ds = sample_dataset(ls, spec, h)
        assert ds.features.shape == (3 * 40, 8)
        assert len(ds) == 120
        for k in range(len(ds)):
            assert ds.splits[k] == ls.compositions[ds.comp_ids[k]].split
        np.testing.assert_array_equal(ds.sample_ids, np.arange(120))

    def test_zero_noise_gives_exact_prototypes(self):
        spec = DatasetSpec(noise=0.0, samples_per_composition=2, dim=4)
        ls, h = build_label_space(spec)
        ds = sample_dataset(ls, spec, h)
        for k in range(len(ds)):
            comp = ls.compositions[ds.comp_ids[k]]
            np.testing.assert_array_equal(ds.features[k, :4], ds.verb_prototypes[comp.verb])
            np.testing.assert_array_equal(ds.features[k, 4:], ds.object_prototypes[comp.object])

    def test_zero_spread_collapses_fine_prototypes(self):
        spec = DatasetSpec(spread=0.0, dim=4)
        ls, h = build_label_space(spec)
        ds = sample_dataset(ls, spec, h)
        for i in range(len(ls.verbs)):
            for j in range(len(ls.verbs)):
                if h.verb_parent[i] == h.verb_parent[j]:
                    np.testing.assert_array_equal(ds.verb_prototypes[i], ds.verb_prototypes[j])

    def test_nearest_prototype_oracle_over_90_percent(self):
        # Defaults must keep the features informative enough for a trivial
        # oracle; this pins the benchmark's difficulty calibration.
        ls, h = build_label_space(DEFAULT)
        ds = sample_dataset(ls, DEFAULT, h)
        assert nearest_prototype_accuracy(ds, ls, "verb") > 0.9
        assert nearest_prototype_accuracy(ds, ls, "object") > 0.9

    def test_determinism(self):
        ls, h = build_label_space(DEFAULT)
        d1 = sample_dataset(ls, DEFAULT, h)
        d2 = sample_dataset(ls, DEFAULT, h)
        np.testing.assert_array_equal(d1.features, d2.features)


class TestFiles:
    def test_dataset_roundtrip_exact(self, tmp_path):
        spec = DatasetSpec(samples_per_composition=2, dim=3)
        ls, h = build_label_space(spec)
        ds = sample_dataset(ls, spec, h)
        path = tmp_path / "dataset.csv"
        write_dataset(str(path), ds)
        back = read_dataset(str(path))
        np.testing.assert_array_equal(back.features, ds.features)
        np.testing.assert_array_equal(back.comp_ids, ds.comp_ids)
        assert back.splits == ds.splits

    def test_dataset_bytes_deterministic(self, tmp_path):
        spec = DatasetSpec(samples_per_composition=2, dim=3)
        ls, h = build_label_space(spec)
        ds = sample_dataset(ls, spec, h)
        a, b = tmp_path / "a.csv", tmp_path / "b.csv"
        write_dataset(str(a), ds)
        write_dataset(str(b), ds)
        assert a.read_bytes() == b.read_bytes()

    def test_label_space_roundtrip(self, tmp_path):
        ls, _ = build_label_space(DEFAULT)
        path = tmp_path / "labelspace.json"
        write_label_space(str(path), ls)
        assert read_label_space(str(path)) == ls


class TestPartition:
    def test_unseen_goes_to_matching_split(self):
        spec = DatasetSpec(samples_per_composition=4)
        ls, h = build_label_space(spec)
        ds = sample_dataset(ls, spec, h)
        parts = partition_samples(ds, ls, seen_holdout=0.5)
        for name in ("val", "test"):
            rows = parts[name]
            for r in rows:
                assert ds.splits[r] in ("seen", f"unseen_{name}")
        for r in parts["train"]:
            assert ds.splits[r] == "seen"

    def test_every_seen_composition_in_all_parts(self):
        spec = DatasetSpec(samples_per_composition=4)
        ls, h = build_label_space(spec)
        ds = sample_dataset(ls, spec, h)
        parts = partition_samples(ds, ls, seen_holdout=0.5)
        seen = set(ls.seen_ids())
        for name in ("train", "val", "test"):
            present = {int(ds.comp_ids[r]) for r in parts[name] if ds.splits[r] == "seen"}
            assert present == seen

    def test_partition_is_disjoint_and_complete(self):
        spec = DatasetSpec(samples_per_composition=4)
        ls, h = build_label_space(spec)
        ds = sample_dataset(ls, spec, h)
        parts = partition_samples(ds, ls)
        all_rows = np.concatenate([parts["train"], parts["val"], parts["test"]])
        assert sorted(all_rows.tolist()) == list(range(len(ds)))
