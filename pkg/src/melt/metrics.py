"""Confusion-matrix evaluation: weighted P/R/F1 and the favor/against F1 mean.

Scores are computed with exact integer ratios (fractions) and exposed as
floats, so independent counters produce bit-identical values.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from fractions import Fraction
from typing import Dict, Iterable, List, Mapping, Sequence, Tuple

from .corpus import LABELS, STANCE_TARGETS

_INDEX = {name: i for i, name in enumerate(LABELS)}


@dataclass
class ConfusionMatrix:
    """3x3 counts, rows = gold, columns = predicted, in LABELS order."""

    counts: Tuple[Tuple[int, ...], ...]

    @property
    def total(self) -> int:
        return sum(sum(row) for row in self.counts)

    def gold_count(self, label: str) -> int:
        return sum(self.counts[_INDEX[label]])

    def pred_count(self, label: str) -> int:
        j = _INDEX[label]
        return sum(row[j] for row in self.counts)

    def tp(self, label: str) -> int:
        i = _INDEX[label]
        return self.counts[i][i]


def confusion(gold: Sequence[str], predicted: Sequence[str]) -> ConfusionMatrix:
    if len(gold) != len(predicted):
        raise ValueError(f"{len(gold)} gold labels vs {len(predicted)} predictions")
    if not gold:
        raise ValueError("cannot build a confusion matrix from zero examples")
    counts = [[0, 0, 0] for _ in LABELS]
    for g, p in zip(gold, predicted):
        counts[_INDEX[g]][_INDEX[p]] += 1
    return ConfusionMatrix(tuple(tuple(row) for row in counts))


def _prf(cm: ConfusionMatrix, label: str) -> Tuple[Fraction, Fraction, Fraction]:
    """One-vs-rest precision/recall/F1; zero denominators score 0."""
    tp = cm.tp(label)
    pred = cm.pred_count(label)
    gold = cm.gold_count(label)
    p = Fraction(tp, pred) if pred else Fraction(0)
    r = Fraction(tp, gold) if gold else Fraction(0)
    f1 = 2 * p * r / (p + r) if p + r else Fraction(0)
    return p, r, f1


def per_class_scores(cm: ConfusionMatrix) -> Dict[str, Tuple[float, float, float]]:
    return {label: tuple(float(x) for x in _prf(cm, label)) for label in LABELS}


def weighted_scores(cm: ConfusionMatrix) -> Tuple[float, float, float]:
    """Per-class scores averaged with gold-frequency weights."""
    total = cm.total
    wp = wr = wf = Fraction(0)
    for label in LABELS:
        weight = Fraction(cm.gold_count(label), total)
        p, r, f1 = _prf(cm, label)
        wp += weight * p
        wr += weight * r
        wf += weight * f1
    return float(wp), float(wr), float(wf)


def semeval_f1(cm: ConfusionMatrix) -> float:
    """Mean of the favor and against one-vs-rest F1s; neutral is ignored."""
    _, _, f_against = _prf(cm, "against")
    _, _, f_favor = _prf(cm, "favor")
    return float((f_favor + f_against) / 2)


@dataclass
class MetricsReport:
    per_class: Dict[str, Tuple[float, float, float]]
    weighted_precision: float
    weighted_recall: float
    weighted_f1: float
    semeval_f1: float
    n_examples: int


def report(cm: ConfusionMatrix) -> MetricsReport:
    wp, wr, wf = weighted_scores(cm)
    return MetricsReport(per_class_scores(cm), wp, wr, wf, semeval_f1(cm), cm.total)


# ---------------------------------------------------------------------------
# per-target tables
# ---------------------------------------------------------------------------


def per_target_report(rows: Iterable[Tuple[str, str, str]],
                      pooled: bool = False) -> Dict[str, object]:
    """Weighted F1 per stance target plus the aggregate.

    ``rows`` are (target, gold, predicted) triples. The aggregate is the
    unweighted mean of per-target weighted F1s; ``pooled=True`` instead
    scores all examples as one pool.
    """
    grouped: Dict[str, Tuple[List[str], List[str]]] = {}
    all_gold: List[str] = []
    all_pred: List[str] = []
    for target, gold, pred in rows:
        if target not in STANCE_TARGETS:
            raise ValueError(f"unknown stance target '{target}'")
        grouped.setdefault(target, ([], []))
        grouped[target][0].append(gold)
        grouped[target][1].append(pred)
        all_gold.append(gold)
        all_pred.append(pred)
    if not grouped:
        raise ValueError("no predictions to score")
    per_target = {}
    for target in sorted(grouped):
        gold, pred = grouped[target]
        per_target[target] = report(confusion(gold, pred))
    if pooled:
        aggregate = report(confusion(all_gold, all_pred)).weighted_f1
    else:
        aggregate = sum(r.weighted_f1 for r in per_target.values()) / len(per_target)
    return {"per_target": per_target, "aggregate_weighted_f1": aggregate, "pooled": pooled}


def render_report(rep: MetricsReport) -> str:
    """Aligned plain-text table for one prediction set."""
    lines = [f"{'class':<10}{'precision':>10}{'recall':>10}{'f1':>10}"]
    for label in LABELS:
        p, r, f1 = rep.per_class[label]
        lines.append(f"{label:<10}{p:>10.4f}{r:>10.4f}{f1:>10.4f}")
    lines.append(f"{'weighted':<10}{rep.weighted_precision:>10.4f}"
                 f"{rep.weighted_recall:>10.4f}{rep.weighted_f1:>10.4f}")
    lines.append(f"{'semeval_f1':<10}{rep.semeval_f1:>30.4f}")
    lines.append(f"{'examples':<10}{rep.n_examples:>30d}")
    return "\n".join(lines)


def render_target_table(table: Mapping[str, object]) -> str:
    lines = [f"{'target':<12}{'weighted_f1':>12}{'semeval_f1':>12}{'n':>8}"]
    for target, rep in table["per_target"].items():
        lines.append(f"{target:<12}{rep.weighted_f1:>12.4f}"
                     f"{rep.semeval_f1:>12.4f}{rep.n_examples:>8d}")
    tag = "pooled" if table["pooled"] else "mean"
    lines.append(f"{'all(' + tag + ')':<12}{table['aggregate_weighted_f1']:>12.4f}")
    return "\n".join(lines)


def write_report_csv(path, table: Mapping[str, object]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["target", "weighted_precision", "weighted_recall",
                         "weighted_f1", "semeval_f1", "n_examples"])
        for target, rep in table["per_target"].items():
            writer.writerow([target, repr(rep.weighted_precision), repr(rep.weighted_recall),
                             repr(rep.weighted_f1), repr(rep.semeval_f1), rep.n_examples])
        writer.writerow(["all", "", "", repr(table["aggregate_weighted_f1"]), "", ""])
