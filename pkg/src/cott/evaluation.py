"""Classification metrics and reasoning-process monitors.

Two monitors decide whether a prediction is reported:

* M1 (self-consistency) flags traces whose intuitive step-I label differs
  from the rational step-II label.
* M2 (step correctness) flags traces whose predicted intermediate step differs
  from the gold step; it needs gold steps.

Monitors never change a prediction. They only shrink the set of instances the
metrics are computed on.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Mapping, Optional, Sequence, Union

import numpy as np

from .errors import ArityMismatch, LengthMismatch, MissingGoldSteps, UnknownLabel


def _check_lengths(preds: Sequence, golds: Sequence) -> None:
    if len(preds) != len(golds):
        raise LengthMismatch(f"{len(preds)} predictions vs {len(golds)} gold labels")
    if len(preds) == 0:
        raise LengthMismatch("empty prediction list")


def confusion_counts(preds: Sequence[str], golds: Sequence[str], labels: Sequence[str]) -> np.ndarray:
    """Per-class ``[tp, fp, fn]`` rows in ``labels`` order."""
    index = {l: i for i, l in enumerate(labels)}
    counts = np.zeros((len(labels), 3), dtype=np.int64)
    for p, g in zip(preds, golds):
        if p not in index or g not in index:
            raise UnknownLabel(f"label {p if p not in index else g!r} is not in the label set")
        if p == g:
            counts[index[p], 0] += 1
        else:
            counts[index[p], 1] += 1
            counts[index[g], 2] += 1
    return counts


def _f1(tp, fp, fn) -> float:
    denom = 2 * tp + fp + fn
    return 0.0 if denom == 0 else 2 * tp / denom


def micro_macro_f1(preds: Sequence[str], golds: Sequence[str], labels: Sequence[str]) -> tuple[float, float]:
    """Micro-F1 over pooled counts and the unweighted mean of per-class F1.

    Every class in ``labels`` counts towards the macro average, including
    classes that never occur (they score 0).
    """
    _check_lengths(preds, golds)
    counts = confusion_counts(preds, golds, labels)
    tp, fp, fn = counts.sum(axis=0)
    micro = _f1(tp, fp, fn)
    macro = float(np.mean([_f1(*row) for row in counts]))
    return float(micro), macro


@dataclass(frozen=True)
class RelationScore:
    f1: float
    precision: float
    recall: float
    defined: bool  # False when there is no positive prediction or gold


def relation_f1(preds: Sequence[str], golds: Sequence[str], negative_label: str = "no_relation") -> RelationScore:
    """Micro-F1 that ignores the negative relation class (TACRED scoring)."""
    _check_lengths(preds, golds)
    correct = sum(1 for p, g in zip(preds, golds) if p == g and g != negative_label)
    guessed = sum(1 for p in preds if p != negative_label)
    gold = sum(1 for g in golds if g != negative_label)
    if guessed == 0 or gold == 0:
        return RelationScore(0.0, 0.0, 0.0, False)
    precision, recall = correct / guessed, correct / gold
    f1 = 0.0 if correct == 0 else 2 * precision * recall / (precision + recall)
    return RelationScore(f1, precision, recall, True)


def hamming_loss(preds: Sequence[Sequence[str]], golds: Sequence[Sequence[str]]) -> float:
    """Fraction of mismatched components over instances x tuple arity."""
    _check_lengths(preds, golds)
    arity = len(golds[0])
    wrong = 0
    for p, g in zip(preds, golds):
        if len(p) != arity or len(g) != arity:
            raise ArityMismatch(f"expected tuples of length {arity}")
        wrong += sum(a != b for a, b in zip(p, g))
    return wrong / (len(golds) * arity)


def hierarchical_f1(
    preds: Sequence[Sequence[str]],
    golds: Sequence[Sequence[str]],
    level_labels: Sequence[Sequence[str]],
) -> dict[str, tuple[float, float]]:
    """Micro/Macro-F1 for multi-level labels.

    ``joint`` pools every level into one classification over the union of the
    level label sets (7 + 134 = 141 classes on WOS). ``leaf`` scores the last
    level alone.
    """
    _check_lengths(preds, golds)
    union = [(lvl, l) for lvl, labels in enumerate(level_labels) for l in labels]
    pooled_p = [(lvl, p[lvl]) for p in preds for lvl in range(len(level_labels))]
    pooled_g = [(lvl, g[lvl]) for g in golds for lvl in range(len(level_labels))]
    last = len(level_labels) - 1
    return {
        "joint": micro_macro_f1(pooled_p, pooled_g, union),
        "leaf": micro_macro_f1([p[last] for p in preds], [g[last] for g in golds], level_labels[last]),
    }


# ---------------------------------------------------------------------- monitors


@dataclass(frozen=True)
class MonitorVerdict:
    id: str
    m1_inconsistent: bool
    m2_wrong_step: Optional[bool]
    accepted: bool


def _gold_lookup(traces, golds) -> Optional[list]:
    if golds is None:
        return None
    if isinstance(golds, Mapping):
        try:
            return [golds[t.id] for t in traces]
        except KeyError as e:
            raise MissingGoldSteps(f"no gold record for trace {e.args[0]!r}") from None
    golds = list(golds)
    if len(golds) != len(traces):
        raise LengthMismatch(f"{len(traces)} traces vs {len(golds)} gold records")
    return golds


def _scores(traces, golds, labels) -> Optional[dict]:
    if not traces:
        return None
    preds = [t.prediction for t in traces]
    gold_y = [g.label for g in golds]
    micro, macro = micro_macro_f1(preds, gold_y, labels)
    out = {
        "n": len(traces),
        "accuracy": sum(p == g for p, g in zip(preds, gold_y)) / len(preds),
        "micro_f1": micro,
        "macro_f1": macro,
    }
    if all(g.step is not None for g in golds):
        out["hamming_loss"] = hamming_loss(
            [(*t.step, t.prediction) for t in traces], [(*g.step, g.label) for g in golds]
        )
    return out


def apply_monitors(
    traces: Sequence,
    golds: Union[None, Sequence, Mapping[str, object]] = None,
    active: Iterable[str] = ("M1",),
    labels: Optional[Sequence[str]] = None,
) -> tuple[list[MonitorVerdict], dict]:
    """Run the monitors over reasoning traces.

    ``golds`` are instances (in trace order, or keyed by id) carrying ``step``
    and ``label``. Returns per-trace verdicts and a report with coverage, the
    decision histogram, and metrics on all traces and on the accepted ones.
    """
    active = {a.upper() for a in active}
    unknown = active - {"M1", "M2"}
    if unknown:
        raise ValueError(f"unknown monitors: {sorted(unknown)}")
    gold_list = _gold_lookup(traces, golds)
    has_steps = gold_list is not None and all(getattr(g, "step", None) is not None for g in gold_list)
    if "M2" in active and not has_steps:
        raise MissingGoldSteps("monitor M2 needs gold intermediate steps")

    verdicts = []
    for i, t in enumerate(traces):
        m1 = t.intuitive != t.rational
        m2 = None if not has_steps else tuple(t.step) != tuple(gold_list[i].step)
        flagged = ("M1" in active and m1) or ("M2" in active and bool(m2))
        verdicts.append(MonitorVerdict(t.id, m1, m2, not flagged))

    n = len(traces)
    n_accepted = sum(v.accepted for v in verdicts)
    coverage = n_accepted / n if n else 0.0
    report: dict = {
        "active": sorted(active),
        "n": n,
        "accepted": n_accepted,
        "coverage": coverage,
        "flagged_fraction": 1.0 - coverage,
        "histogram": decision_histogram(traces, verdicts, gold_list),
    }
    if gold_list is not None and all(getattr(g, "label", None) is not None for g in gold_list):
        if labels is None:
            labels = traces[0].rectified.candidates
        keep = [i for i, v in enumerate(verdicts) if v.accepted]
        report["all"] = _scores(list(traces), gold_list, labels)
        report["filtered"] = _scores([traces[i] for i in keep], [gold_list[i] for i in keep], labels)
    return verdicts, report


def decision_histogram(traces, verdicts, gold_list=None) -> dict:
    """Counts by self-consistency x step correctness, with label correctness
    inside each cell when gold labels are known."""
    hist: dict = {}
    for i, (t, v) in enumerate(zip(traces, verdicts)):
        consistency = "inconsistent" if v.m1_inconsistent else "consistent"
        step = "unknown" if v.m2_wrong_step is None else ("step_wrong" if v.m2_wrong_step else "step_correct")
        cell = hist.setdefault(consistency, {}).setdefault(step, {"count": 0})
        cell["count"] += 1
        if gold_list is not None and getattr(gold_list[i], "label", None) is not None:
            key = "label_correct" if t.prediction == gold_list[i].label else "label_wrong"
            cell[key] = cell.get(key, 0) + 1
    return hist


def format_report(report: dict) -> str:
    """Plain-text table of a monitor report."""
    lines = [f"monitors: {', '.join(report['active']) or 'none'}"]
    lines.append(f"coverage: {report['coverage']:.4f} ({report['accepted']}/{report['n']})")
    for scope in ("all", "filtered"):
        s = report.get(scope)
        if s:
            metrics = "  ".join(f"{k}={v:.4f}" for k, v in s.items() if k != "n")
            lines.append(f"{scope:>8}: n={s['n']}  {metrics}")
    for consistency, cells in sorted(report["histogram"].items()):
        for step, cell in sorted(cells.items()):
            lines.append(f"  {consistency:<12} {step:<12} {cell}")
    return "\n".join(lines)
