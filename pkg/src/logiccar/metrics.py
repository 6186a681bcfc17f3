"""Zero-shot evaluation protocol.

Adding a scalar bias to every unseen composition logit trades seen
accuracy against unseen accuracy. Predictions only change where some
sample's best unseen logit overtakes its best seen logit, so sweeping
the per-sample tie biases plus the midpoints between them visits every
regime the curve has; accuracies at each bias are computed exactly,
never sampled. Reports carry the curve, its best harmonic-mean point,
and the area under the seen/unseen trade-off.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np

from .data import LabelSpace
from .errors import ValidationError
from .model import predict_composition


@dataclass(frozen=True)
class CurvePoint:
    bias: float
    seen_acc: float
    unseen_acc: float

    @property
    def harmonic_mean(self) -> float:
        s, u = self.seen_acc, self.unseen_acc
        return 0.0 if s + u == 0.0 else 2.0 * s * u / (s + u)


@dataclass(frozen=True)
class CurveSummary:
    """Per-axis maxima over a curve plus the trade-off area.

    best_seen, best_unseen, and best_hm are independent maxima, so they
    generally come from different biases; best_bias is where the best
    harmonic mean first occurs.
    """

    best_seen: float
    best_unseen: float
    best_hm: float
    best_bias: float
    auc: float


@dataclass(frozen=True)
class EvalReport:
    verb_acc: float
    object_acc: float
    best_bias: float
    best_seen: float
    best_unseen: float
    best_hm: float
    auc: float
    curve: tuple[CurvePoint, ...]
    warnings: tuple[str, ...] = ()

    def to_dict(self) -> dict:
        d = asdict(self)
        d["curve_points"] = len(self.curve)
        del d["curve"]
        return d


def branch_accuracy(logits: np.ndarray, labels: np.ndarray) -> float:
    """Plain argmax accuracy; ties resolve to the smallest index."""
    z = np.asarray(logits, dtype=np.float64)
    y = np.asarray(labels)
    if z.ndim != 2 or y.shape != (z.shape[0],):
        raise ValidationError(f"bad shapes for accuracy: {z.shape} vs {y.shape}")
    return float(np.mean(np.argmax(z, axis=1) == y))


def _side_masks(
    true_comp: np.ndarray, seen_ids: tuple[int, ...], unseen_ids: tuple[int, ...]
) -> tuple[np.ndarray, np.ndarray]:
    seen_set, unseen_set = set(seen_ids), set(unseen_ids)
    stray = [int(c) for c in true_comp if c not in seen_set and c not in unseen_set]
    if stray:
        raise ValidationError(f"sample labels {sorted(set(stray))} are not candidates")
    is_seen = np.array([c in seen_set for c in true_comp], dtype=bool)
    return is_seen, ~is_seen


def accuracy_pair(
    comp_logits: np.ndarray,
    true_comp: np.ndarray,
    seen_ids: tuple[int, ...],
    unseen_ids: tuple[int, ...],
    bias: float,
) -> tuple[float, float]:
    """Seen-side and unseen-side accuracy at one bias; empty sides score 0."""
    is_seen, is_unseen = _side_masks(true_comp, seen_ids, unseen_ids)
    preds = predict_composition(comp_logits, seen_ids, unseen_ids, bias)
    hit = preds == np.asarray(true_comp)
    seen_acc = float(np.mean(hit[is_seen])) if is_seen.any() else 0.0
    unseen_acc = float(np.mean(hit[is_unseen])) if is_unseen.any() else 0.0
    return seen_acc, unseen_acc


def bias_candidates(
    comp_logits: np.ndarray, seen_ids: tuple[int, ...], unseen_ids: tuple[int, ...]
) -> list[float]:
    """Every bias at which some sample's two sides tie (the per-sample
    gaps), the midpoints between consecutive gaps, and the two
    single-side extremes. Predictions are constant between gaps, so
    this set hits every regime the curve has, including the exact-tie
    ones."""
    if not seen_ids or not unseen_ids:
        raise ValidationError("bias sweep needs candidates on both sides")
    z = np.asarray(comp_logits, dtype=np.float64)
    best_seen = z[:, sorted(seen_ids)].max(axis=1)
    best_unseen = z[:, sorted(unseen_ids)].max(axis=1)
    gaps = np.unique(best_unseen - best_seen)
    mids = (gaps[:-1] + gaps[1:]) / 2.0
    inner = sorted(set(gaps.tolist()) | set(mids.tolist()))
    return [-np.inf, *inner, np.inf]


def bias_sweep(
    comp_logits: np.ndarray,
    true_comp: np.ndarray,
    seen_ids: tuple[int, ...],
    unseen_ids: tuple[int, ...],
) -> tuple[CurvePoint, ...]:
    points = []
    for bias in bias_candidates(comp_logits, seen_ids, unseen_ids):
        s, u = accuracy_pair(comp_logits, true_comp, seen_ids, unseen_ids, bias)
        points.append(CurvePoint(bias=float(bias), seen_acc=s, unseen_acc=u))
    return tuple(points)


def summarize_curve(curve: tuple[CurvePoint, ...]) -> CurveSummary:
    """Per-axis maxima and the trade-off area.

    The area integrates unseen accuracy over seen accuracy with the
    trapezoid rule, after keeping only the best unseen accuracy at any
    repeated seen accuracy and closing the curve at (0, max unseen)
    and (max seen, 0).
    """
    if len(curve) < 2:
        raise ValidationError("curve needs at least two points")
    best_hm_point = curve[0]
    for p in curve[1:]:
        if p.harmonic_mean > best_hm_point.harmonic_mean:
            best_hm_point = p
    by_seen: dict[float, float] = {}
    for p in curve:
        if p.seen_acc not in by_seen or p.unseen_acc > by_seen[p.seen_acc]:
            by_seen[p.seen_acc] = p.unseen_acc
    xs = sorted(by_seen)
    ys = [by_seen[x] for x in xs]
    xs = [0.0] + xs + [xs[-1]]
    ys = [max(ys)] + ys + [0.0]
    auc = sum(
        (xs[i + 1] - xs[i]) * (ys[i + 1] + ys[i]) / 2.0
        for i in range(len(xs) - 1)
    )
    return CurveSummary(
        best_seen=max(p.seen_acc for p in curve),
        best_unseen=max(p.unseen_acc for p in curve),
        best_hm=best_hm_point.harmonic_mean,
        best_bias=best_hm_point.bias,
        auc=float(auc),
    )


def build_report(
    comp_logits: np.ndarray,
    verb_logits: np.ndarray,
    object_logits: np.ndarray,
    true_comp: np.ndarray,
    space: LabelSpace,
    seen_ids: tuple[int, ...],
    unseen_ids: tuple[int, ...],
    metric_source: str = "branch",
) -> EvalReport:
    """Full evaluation over one sample set.

    metric_source picks where verb/object accuracy comes from: the
    dedicated branch heads, or the parts of the unbiased composition
    prediction.
    """
    true_comp = np.asarray(true_comp)
    true_verbs = np.array([space.compositions[c].verb for c in true_comp])
    true_objects = np.array([space.compositions[c].object for c in true_comp])
    if metric_source == "branch":
        verb_acc = branch_accuracy(verb_logits, true_verbs)
        object_acc = branch_accuracy(object_logits, true_objects)
    elif metric_source == "composition":
        preds = predict_composition(comp_logits, seen_ids, unseen_ids, 0.0)
        verb_acc = float(np.mean([space.compositions[p].verb for p in preds] == true_verbs))
        object_acc = float(np.mean([space.compositions[p].object for p in preds] == true_objects))
    else:
        raise ValidationError(f"unknown metric_source {metric_source!r}")

    is_seen, is_unseen = _side_masks(true_comp, seen_ids, unseen_ids)
    warnings = []
    if not is_seen.any():
        warnings.append("no seen-composition samples; seen accuracy pinned to 0")
    if not is_unseen.any():
        warnings.append("no unseen-composition samples; unseen accuracy pinned to 0")
    curve = bias_sweep(comp_logits, true_comp, seen_ids, unseen_ids)
    s = summarize_curve(curve)
    return EvalReport(
        verb_acc=verb_acc,
        object_acc=object_acc,
        best_bias=s.best_bias,
        best_seen=s.best_seen,
        best_unseen=s.best_unseen,
        best_hm=s.best_hm,
        auc=s.auc,
        curve=curve,
        warnings=tuple(warnings),
    )


# -- artifacts --------------------------------------------------------------


def _render_bias(b: float) -> str:
    if b == -np.inf:
        return "-inf"
    if b == np.inf:
        return "+inf"
    return "%.17g" % b


def write_curve_csv(path, curve: tuple[CurvePoint, ...]) -> None:
    with open(path, "w", newline="\n") as f:
        f.write("bias,seen_acc,unseen_acc,hm\n")
        for p in curve:
            f.write("%s,%.17g,%.17g,%.17g\n" % (
                _render_bias(p.bias), p.seen_acc, p.unseen_acc, p.harmonic_mean))


def read_curve_csv(path) -> tuple[CurvePoint, ...]:
    points = []
    with open(path) as f:
        header = f.readline().strip()
        if header != "bias,seen_acc,unseen_acc,hm":
            raise ValidationError(f"unrecognized curve file {path}")
        for line in f:
            b, s, u, _hm = (float(x) for x in line.strip().split(","))
            points.append(CurvePoint(bias=b, seen_acc=s, unseen_acc=u))
    return tuple(points)


def write_report_json(path, report: EvalReport) -> None:
    with open(path, "w", newline="\n") as f:
        json.dump(report.to_dict(), f, indent=2, sort_keys=True)
        f.write("\n")


def render_curve_svg(path, curve: tuple[CurvePoint, ...], title: str = "seen/unseen trade-off") -> None:
    """Deterministic SVG of the trade-off curve and its harmonic means."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    with matplotlib.rc_context({"svg.hashsalt": "fixed"}):
        fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 4))
        seen = [p.seen_acc for p in curve]
        unseen = [p.unseen_acc for p in curve]
        ax1.plot(seen, unseen, marker="o", markersize=3, linewidth=1)
        ax1.set_xlabel("seen accuracy")
        ax1.set_ylabel("unseen accuracy")
        ax1.set_xlim(-0.02, 1.02)
        ax1.set_ylim(-0.02, 1.02)
        ax1.set_title(title)
        finite = [p for p in curve if np.isfinite(p.bias)]
        if finite:
            ax2.plot([p.bias for p in finite], [p.harmonic_mean for p in finite],
                     marker="o", markersize=3, linewidth=1)
        ax2.set_xlabel("seen-candidate bias")
        ax2.set_ylabel("harmonic mean")
        ax2.set_title("calibration")
        fig.tight_layout()
        fig.savefig(path, format="svg", metadata={"Date": None})
        plt.close(fig)


def render_ablation_svg(path, summary: dict, metric: str = "auc") -> None:
    """Deterministic bar chart of a per-arm metric with sd error bars."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    arms = list(summary["arms"])
    means = [summary["arms"][a][metric]["mean"] for a in arms]
    sds = [summary["arms"][a][metric]["sd"] for a in arms]
    with matplotlib.rc_context({"svg.hashsalt": "fixed"}):
        fig, ax = plt.subplots(figsize=(5, 4))
        xs = np.arange(len(arms))
        ax.bar(xs, means, yerr=sds, capsize=4, color="#4878a8")
        ax.set_xticks(xs)
        ax.set_xticklabels(arms, rotation=20)
        ax.set_ylabel(metric)
        ax.set_title(f"rule-group ablation ({metric}, mean over seeds)")
        fig.tight_layout()
        fig.savefig(path, format="svg", metadata={"Date": None})
        plt.close(fig)
