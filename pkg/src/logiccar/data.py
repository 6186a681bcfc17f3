"""Synthetic compositional benchmark: label spaces and feature sampling.

Features are prototype-plus-Gaussian: each coarse category gets a unit
Gaussian prototype, each fine category perturbs its parent, and each
sample concatenates a noisy verb prototype (dynamic half) with a noisy
object prototype (static half). Seen compositions are sampled under a
co-occurrence bias so that unseen pairs are systematically unlike the
training pairs.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ValidationError
from .hierarchy import Hierarchy
from .seeding import substream

SPLITS = ("seen", "unseen_val", "unseen_test")


@dataclass(frozen=True)
class Composition:
    verb: int
    object: int
    split: str


@dataclass(frozen=True)
class LabelSpace:
    verbs: tuple[str, ...]
    objects: tuple[str, ...]
    compositions: tuple[Composition, ...]

    def composition_ids(self, split: str | None = None) -> tuple[int, ...]:
        if split is None:
            return tuple(range(len(self.compositions)))
        return tuple(i for i, c in enumerate(self.compositions) if c.split == split)

    def seen_ids(self) -> tuple[int, ...]:
        return self.composition_ids("seen")

    def validate(self) -> None:
        n_v, n_o = len(self.verbs), len(self.objects)
        if n_v == 0 or n_o == 0:
            raise ValidationError("label space needs at least one verb and one object")
        if len(set(self.verbs)) != n_v or len(set(self.objects)) != n_o:
            raise ValidationError("duplicate verb or object names")
        pairs = [(c.verb, c.object) for c in self.compositions]
        if len(set(pairs)) != len(pairs):
            raise ValidationError("duplicate composition pairs")
        if len(pairs) >= n_v * n_o:
            raise ValidationError("compositions must be a strict subset of the verb-object product")
        for c in self.compositions:
            if not (0 <= c.verb < n_v and 0 <= c.object < n_o):
                raise ValidationError(f"composition ({c.verb},{c.object}) out of range")
            if c.split not in SPLITS:
                raise ValidationError(f"unknown split {c.split!r}")
        seen = [c for c in self.compositions if c.split == "seen"]
        if {c.verb for c in seen} != set(range(n_v)):
            raise ValidationError("every verb must appear in at least one seen composition")
        if {c.object for c in seen} != set(range(n_o)):
            raise ValidationError("every object must appear in at least one seen composition")


@dataclass(frozen=True)
class DatasetSpec:
    coarse_verbs: int = 3
    verbs_per_coarse: int = 2
    coarse_objects: int = 4
    objects_per_coarse: int = 2
    dim: int = 16  # half-dimension d; features are 2d wide
    spread: float = 0.3  # fine-prototype offset from its coarse parent
    noise: float = 0.5  # per-sample Gaussian noise
    samples_per_composition: int = 20
    n_compositions: int = 40
    unseen_fraction: float = 0.3
    co_bias: float = 0.6  # probability of drawing the verb's correlated object family
    seed: int = 0

    def validate(self) -> None:
        if min(self.coarse_verbs, self.verbs_per_coarse, self.coarse_objects, self.objects_per_coarse) < 1:
            raise ValidationError("category counts must be positive")
        if self.dim < 1 or self.samples_per_composition < 1:
            raise ValidationError("dim and samples_per_composition must be positive")
        if not (0.0 <= self.unseen_fraction < 1.0):
            raise ValidationError("unseen_fraction must be in [0, 1)")
        if not (0.0 <= self.co_bias <= 1.0):
            raise ValidationError("co_bias must be in [0, 1]")
        if self.spread < 0 or self.noise < 0:
            raise ValidationError("spread and noise must be non-negative")
        n_v = self.coarse_verbs * self.verbs_per_coarse
        n_o = self.coarse_objects * self.objects_per_coarse
        if self.n_compositions >= n_v * n_o:
            raise ValidationError(
                f"n_compositions={self.n_compositions} must be < |V|*|O|={n_v * n_o}"
            )
        n_unseen = int(round(self.unseen_fraction * self.n_compositions))
        if self.n_compositions - n_unseen < max(n_v, n_o):
            raise ValidationError(
                "too few seen compositions to cover every verb and object; "
                f"need at least {max(n_v, n_o)}"
            )


@dataclass
class Dataset:
    """Struct-of-arrays sample store; prototypes kept for oracle checks."""

    features: np.ndarray  # (n, 2d) float64
    comp_ids: np.ndarray  # (n,) int
    splits: tuple[str, ...]  # per sample, inherited from the composition
    sample_ids: np.ndarray  # (n,) int, 0..n-1 in generation order
    verb_prototypes: np.ndarray | None = None  # (|V|, d)
    object_prototypes: np.ndarray | None = None  # (|O|, d)

    def __len__(self) -> int:
        return int(self.features.shape[0])


def draw_biased_pair(rng: np.random.Generator, n_verbs: int, n_objects: int,
                     co_bias: float, object_parent: tuple[int, ...], n_families: int) -> tuple[int, int]:
    """One (verb, object) draw: verb uniform; object from the verb's
    correlated family with probability co_bias, else uniform."""
    v = int(rng.integers(n_verbs))
    if rng.random() < co_bias:
        family = v % n_families
        members = [j for j, p in enumerate(object_parent) if p == family]
        o = int(members[int(rng.integers(len(members)))])
    else:
        o = int(rng.integers(n_objects))
    return v, o


def _repair_coverage(pairs: list[tuple[int, int]], n_verbs: int, n_objects: int) -> list[tuple[int, int]]:
    """Deterministically swap pairs so every verb and object is covered."""
    pairs = list(pairs)

    def verb_counts():
        c = [0] * n_verbs
        for v, _ in pairs:
            c[v] += 1
        return c

    def object_counts():
        c = [0] * n_objects
        for _, o in pairs:
            c[o] += 1
        return c

    for v in range(n_verbs):
        vc = verb_counts()
        if vc[v] > 0:
            continue
        # Donate from the most-represented verb; keep the donor's object so
        # object coverage is untouched. Ties resolve to the smallest pair.
        donors = [(i, p) for i, p in enumerate(pairs) if vc[p[0]] >= 2]
        if not donors:
            raise ValidationError("cannot repair verb coverage")
        donors.sort(key=lambda ip: (-vc[ip[1][0]], ip[1]))
        idx, (_, o_keep) = donors[0]
        pairs[idx] = (v, o_keep)

    for o in range(n_objects):
        oc = object_counts()
        if oc[o] > 0:
            continue
        vc = verb_counts()
        donors = [(i, p) for i, p in enumerate(pairs) if oc[p[1]] >= 2 and vc[p[0]] >= 1]
        if not donors:
            raise ValidationError("cannot repair object coverage")
        donors.sort(key=lambda ip: (-oc[ip[1][1]], ip[1]))
        idx, (v_keep, _) = donors[0]
        pairs[idx] = (v_keep, o)

    return pairs


def implied_hierarchy(spec: DatasetSpec) -> Hierarchy:
    """The ground-truth hierarchy a generated label space is built around."""
    return Hierarchy(
        coarse_verbs=tuple(f"vg{c}" for c in range(spec.coarse_verbs)),
        coarse_objects=tuple(f"og{c}" for c in range(spec.coarse_objects)),
        verb_parent=tuple(i // spec.verbs_per_coarse for i in range(spec.coarse_verbs * spec.verbs_per_coarse)),
        object_parent=tuple(
            j // spec.objects_per_coarse for j in range(spec.coarse_objects * spec.objects_per_coarse)
        ),
    )


def build_label_space(spec: DatasetSpec) -> tuple[LabelSpace, Hierarchy]:
    """Sample a biased label space plus its ground-truth hierarchy."""
    spec.validate()
    h = implied_hierarchy(spec)
    n_v = len(h.verb_parent)
    n_o = len(h.object_parent)
    verbs = tuple(f"v{i}_{h.coarse_verbs[h.verb_parent[i]]}" for i in range(n_v))
    objects = tuple(f"o{j}_{h.coarse_objects[h.object_parent[j]]}" for j in range(n_o))

    n_unseen = int(round(spec.unseen_fraction * spec.n_compositions))
    n_seen = spec.n_compositions - n_unseen

    rng = substream(spec.seed, "pairs")
    seen: list[tuple[int, int]] = []
    seen_set: set[tuple[int, int]] = set()
    budget = 1000 * n_seen
    while len(seen) < n_seen:
        budget -= 1
        if budget < 0:
            raise ValidationError("could not sample enough distinct seen compositions")
        pair = draw_biased_pair(rng, n_v, n_o, spec.co_bias, h.object_parent, spec.coarse_objects)
        if pair not in seen_set:
            seen.append(pair)
            seen_set.add(pair)

    seen = _repair_coverage(seen, n_v, n_o)
    seen_set = set(seen)

    remainder = [(v, o) for v in range(n_v) for o in range(n_o) if (v, o) not in seen_set]
    if n_unseen > len(remainder):
        raise ValidationError("not enough remaining pairs for the unseen split")
    rng_u = substream(spec.seed, "unseen")
    order = rng_u.permutation(len(remainder))[:n_unseen]
    chosen = [remainder[i] for i in order]
    n_val = (n_unseen + 1) // 2
    val = sorted(chosen[:n_val])
    test = sorted(chosen[n_val:])

    comps = tuple(
        [Composition(v, o, "seen") for v, o in seen]
        + [Composition(v, o, "unseen_val") for v, o in val]
        + [Composition(v, o, "unseen_test") for v, o in test]
    )
    ls = LabelSpace(verbs=verbs, objects=objects, compositions=comps)
    ls.validate()
    return ls, h


def sample_dataset(ls: LabelSpace, spec: DatasetSpec, hierarchy: Hierarchy | None = None) -> Dataset:
    """Draw samples_per_composition feature vectors for every composition.

    Each composition draws from its own named noise substream, so adding
    or removing compositions never shifts any other composition's draws.
    """
    spec.validate()
    ls.validate()
    h = hierarchy if hierarchy is not None else implied_hierarchy(spec)
    n_v, n_o, d = len(ls.verbs), len(ls.objects), spec.dim
    if len(h.verb_parent) != n_v or len(h.object_parent) != n_o:
        raise ValidationError("hierarchy does not match the label space")

    rng_p = substream(spec.seed, "prototypes")
    coarse_v = rng_p.standard_normal((len(h.coarse_verbs), d))
    coarse_o = rng_p.standard_normal((len(h.coarse_objects), d))
    proto_v = coarse_v[list(h.verb_parent)] + spec.spread * rng_p.standard_normal((n_v, d))
    proto_o = coarse_o[list(h.object_parent)] + spec.spread * rng_p.standard_normal((n_o, d))

    m = spec.samples_per_composition
    n = m * len(ls.compositions)
    features = np.empty((n, 2 * d), dtype=np.float64)
    comp_ids = np.empty(n, dtype=np.int64)
    splits: list[str] = []
    row = 0
    for cid, comp in enumerate(ls.compositions):
        rng_n = substream(spec.seed, "noise", cid)
        noise = rng_n.standard_normal((m, 2 * d))
        block = np.concatenate(
            [np.tile(proto_v[comp.verb], (m, 1)), np.tile(proto_o[comp.object], (m, 1))], axis=1
        )
        features[row:row + m] = block + spec.noise * noise
        comp_ids[row:row + m] = cid
        splits.extend([comp.split] * m)
        row += m

    return Dataset(
        features=features,
        comp_ids=comp_ids,
        splits=tuple(splits),
        sample_ids=np.arange(n, dtype=np.int64),
        verb_prototypes=proto_v,
        object_prototypes=proto_o,
    )


def nearest_prototype_accuracy(ds: Dataset, ls: LabelSpace, which: str = "verb") -> float:
    """Oracle: classify the relevant feature half by nearest fine prototype."""
    if which == "verb":
        protos = ds.verb_prototypes
        half = ds.features[:, : ds.features.shape[1] // 2]
        truth = np.array([ls.compositions[c].verb for c in ds.comp_ids])
    else:
        protos = ds.object_prototypes
        half = ds.features[:, ds.features.shape[1] // 2:]
        truth = np.array([ls.compositions[c].object for c in ds.comp_ids])
    if protos is None:
        raise ValidationError("dataset carries no prototypes (was it read from disk?)")
    d2 = ((half[:, None, :] - protos[None, :, :]) ** 2).sum(axis=2)
    pred = np.argmin(d2, axis=1)
    return float(np.mean(pred == truth))


# -- file formats -----------------------------------------------------------


def write_label_space(path: str, ls: LabelSpace) -> None:
    doc = {
        "verbs": list(ls.verbs),
        "objects": list(ls.objects),
        "compositions": [
            {"verb": ls.verbs[c.verb], "object": ls.objects[c.object], "split": c.split}
            for c in ls.compositions
        ],
    }
    with open(path, "w", encoding="utf-8", newline="") as fh:
        json.dump(doc, fh, indent=2)
        fh.write("\n")


def read_label_space(path: str) -> LabelSpace:
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    try:
        verbs = tuple(doc["verbs"])
        objects = tuple(doc["objects"])
        v_index = {v: i for i, v in enumerate(verbs)}
        o_index = {o: i for i, o in enumerate(objects)}
        comps = tuple(
            Composition(v_index[c["verb"]], o_index[c["object"]], c["split"])
            for c in doc["compositions"]
        )
    except (KeyError, TypeError) as exc:
        raise ValidationError(f"malformed label space file {path}: {exc}") from exc
    ls = LabelSpace(verbs=verbs, objects=objects, compositions=comps)
    ls.validate()
    return ls


def write_dataset(path: str, ds: Dataset) -> None:
    width = ds.features.shape[1]
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["sample_id", "comp_id", "split"] + [f"f{i}" for i in range(width)])
        for k in range(len(ds)):
            row = [str(int(ds.sample_ids[k])), str(int(ds.comp_ids[k])), ds.splits[k]]
            row += [("%.17g" % x) for x in ds.features[k]]
            writer.writerow(row)


def read_dataset(path: str) -> Dataset:
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header[:3] != ["sample_id", "comp_id", "split"]:
            raise ValidationError(f"unexpected dataset header in {path}")
        width = len(header) - 3
        sample_ids, comp_ids, splits, rows = [], [], [], []
        for rec in reader:
            if len(rec) != width + 3:
                raise ValidationError(f"ragged row in {path}")
            sample_ids.append(int(rec[0]))
            comp_ids.append(int(rec[1]))
            splits.append(rec[2])
            rows.append([float(x) for x in rec[3:]])
    return Dataset(
        features=np.asarray(rows, dtype=np.float64).reshape(len(rows), width),
        comp_ids=np.asarray(comp_ids, dtype=np.int64),
        splits=tuple(splits),
        sample_ids=np.asarray(sample_ids, dtype=np.int64),
    )


def partition_samples(ds: Dataset, ls: LabelSpace, seen_holdout: float = 0.5) -> dict[str, np.ndarray]:
    """Deterministic train/val/test row-index split.

    Unseen-composition samples go to val or test by their composition's
    split. For each seen composition the first (1 - seen_holdout) of its
    samples train; the held-out remainder alternates val/test so both
    eval splits see every seen composition.
    """
    if not (0.0 <= seen_holdout < 1.0):
        raise ValidationError("seen_holdout must be in [0, 1)")
    train, val, test = [], [], []
    for cid in range(len(ls.compositions)):
        rows = np.nonzero(ds.comp_ids == cid)[0]
        split = ls.compositions[cid].split
        if split == "unseen_val":
            val.extend(rows.tolist())
        elif split == "unseen_test":
            test.extend(rows.tolist())
        else:
            n_hold = int(round(seen_holdout * len(rows)))
            n_train = len(rows) - n_hold
            train.extend(rows[:n_train].tolist())
            held = rows[n_train:]
            val.extend(held[0::2].tolist())
            test.extend(held[1::2].tolist())
    return {
        "train": np.asarray(train, dtype=np.int64),
        "val": np.asarray(val, dtype=np.int64),
        "test": np.asarray(test, dtype=np.int64),
    }
