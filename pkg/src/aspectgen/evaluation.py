"""Metrics for generated aspects: 80% accuracy, micro/macro F1, ROUGE-1.

Two matching rules coexist on purpose.  The accuracy metric scores token
coverage between values (bidirectional, best direction wins) and calls an
aspect correct at score >= 0.8, which forgives partial phrasings like
"long sleeve" vs "long sleeve length".  The F1 metrics use plain substring
containment between canonical values.  Predictions are plain per-product
aspect lists; a generator may emit several values for one attribute and the
metrics must count the spurious ones, so nothing deduplicates here.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

from .core import (
    Aspect,
    AspectGenError,
    normalize_attribute,
    normalize_value,
    serialize_aspects,
    _singularize_token,
)

CORRECT_THRESHOLD = 0.8
MIN_PREFIX_OVERLAP = 4

_ROUGE_TOKEN_RE = re.compile(r"[a-z0-9]+")


class AttributeMismatchError(AspectGenError):
    """aspect_match_score compared aspects with different attributes."""


class IdMismatchError(AspectGenError):
    """Predictions reference product ids absent from the gold set."""


def canonical_value(value: str) -> str:
    """Comparison form of a value: hyphens folded to spaces, then normalized."""
    return normalize_value(value.replace("-", " "))


def _match_tokens(value: str) -> list[str]:
    canon = canonical_value(value)
    return canon.split(" ") if canon else []


def _tokens_match(a: str, b: str) -> bool:
    sa, sb = _singularize_token(a), _singularize_token(b)
    if sa == sb:
        return True
    shorter = min(len(sa), len(sb))
    if shorter < MIN_PREFIX_OVERLAP:
        return False
    return sa.startswith(sb) or sb.startswith(sa)


def aspect_match_score(gold: Aspect, predicted: Aspect) -> float:
    """Bidirectional token coverage between two same-attribute values.

    Score is the better of (gold tokens covered by prediction) and
    (prediction tokens covered by gold); tokens match when equal after
    singularization or when one prefixes the other with at least 4 shared
    characters.
    """
    if normalize_attribute(gold.attribute) != normalize_attribute(predicted.attribute):
        raise AttributeMismatchError(
            f"cannot score {gold.attribute!r} against {predicted.attribute!r}"
        )
    gold_tokens = _match_tokens(gold.value)
    pred_tokens = _match_tokens(predicted.value)
    if not gold_tokens or not pred_tokens:
        return 0.0
    gold_cov = sum(
        1 for g in gold_tokens if any(_tokens_match(g, p) for p in pred_tokens)
    ) / len(gold_tokens)
    pred_cov = sum(
        1 for p in pred_tokens if any(_tokens_match(p, g) for g in gold_tokens)
    ) / len(pred_tokens)
    return max(gold_cov, pred_cov)


@dataclass(frozen=True)
class MatchJudgement:
    """Best-prediction verdict for one gold aspect."""

    product_id: str
    gold: Aspect
    predicted: Aspect | None
    score: float

    @property
    def correct(self) -> bool:
        return self.score >= CORRECT_THRESHOLD


Predictions = Mapping[str, Sequence[Aspect]]
Golds = Mapping[str, Sequence[Aspect]]


def judge_all(predictions: Predictions, golds: Golds) -> list[MatchJudgement]:
    """One judgement per gold aspect: the best same-attribute prediction."""
    judgements = []
    for product_id, gold_aspects in golds.items():
        candidates = list(predictions.get(product_id, ()))
        for gold in gold_aspects:
            best: Aspect | None = None
            best_score = 0.0
            for predicted in candidates:
                if normalize_attribute(predicted.attribute) != normalize_attribute(
                    gold.attribute
                ):
                    continue
                score = aspect_match_score(gold, predicted)
                if best is None or score > best_score:
                    best, best_score = predicted, score
            judgements.append(MatchJudgement(product_id, gold, best, best_score))
    return judgements


def accuracy80(predictions: Predictions, golds: Golds) -> float:
    """Fraction of gold aspects whose best prediction scores >= 0.8."""
    judgements = judge_all(predictions, golds)
    if not judgements:
        raise ValueError("no gold aspects to evaluate")
    return sum(1 for j in judgements if j.correct) / len(judgements)


def _values_contain(gold: Aspect, predicted: Aspect) -> bool:
    if normalize_attribute(gold.attribute) != normalize_attribute(predicted.attribute):
        return False
    cg, cp = canonical_value(gold.value), canonical_value(predicted.value)
    if not cg or not cp:
        return False
    return cg in cp or cp in cg


@dataclass(frozen=True)
class AttributeCounts:
    tp: int = 0
    fp: int = 0
    fn: int = 0

    @property
    def f1(self) -> float:
        denom = 2 * self.tp + self.fp + self.fn
        return 2 * self.tp / denom if denom else 0.0


@dataclass(frozen=True)
class F1Report:
    micro_precision: float
    micro_recall: float
    micro_f1: float
    macro_f1: float
    tp: int
    fp: int
    fn: int
    per_attribute: dict[str, AttributeCounts]


def micro_macro_f1(predictions: Predictions, golds: Golds) -> F1Report:
    """Containment-based F1.

    A gold aspect is a true positive when some same-attribute prediction's
    canonical value contains it or is contained by it; unmatched predictions
    are false positives.  Macro averages per-attribute F1 over the attributes
    present in gold; false positives on attributes gold never mentions still
    count in the micro totals.
    """
    tp = fp = fn = 0
    per_attr: dict[str, dict[str, int]] = {}
    gold_attrs: set[str] = set()
    for product_id, gold_aspects in golds.items():
        preds = list(predictions.get(product_id, ()))
        for gold in gold_aspects:
            attr = normalize_attribute(gold.attribute)
            gold_attrs.add(attr)
            bucket = per_attr.setdefault(attr, {"tp": 0, "fp": 0, "fn": 0})
            if any(_values_contain(gold, p) for p in preds):
                tp += 1
                bucket["tp"] += 1
            else:
                fn += 1
                bucket["fn"] += 1
        for predicted in preds:
            if not any(_values_contain(g, predicted) for g in gold_aspects):
                fp += 1
                attr = normalize_attribute(predicted.attribute)
                bucket = per_attr.setdefault(attr, {"tp": 0, "fp": 0, "fn": 0})
                bucket["fp"] += 1
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    micro = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    counts = {
        attr: AttributeCounts(b["tp"], b["fp"], b["fn"]) for attr, b in per_attr.items()
    }
    present = sorted(gold_attrs)
    macro = (
        sum(counts[attr].f1 for attr in present) / len(present) if present else 0.0
    )
    return F1Report(
        micro_precision=precision,
        micro_recall=recall,
        micro_f1=micro,
        macro_f1=macro,
        tp=tp,
        fp=fp,
        fn=fn,
        per_attribute=counts,
    )


def _rouge_tokens(aspects: Sequence[Aspect]) -> list[str]:
    return _ROUGE_TOKEN_RE.findall(serialize_aspects(aspects).lower())


def rouge1(predictions: Predictions, golds: Golds) -> float:
    """Mean per-product unigram recall with count clipping.

    Both sides are the serialized aspect strings; a product with no
    prediction scores zero.
    """
    total = 0.0
    counted = 0
    for product_id, gold_aspects in golds.items():
        gold_tokens = _rouge_tokens(gold_aspects)
        if not gold_tokens:
            continue
        counted += 1
        pred_counts: dict[str, int] = {}
        for token in _rouge_tokens(predictions.get(product_id, ())):
            pred_counts[token] = pred_counts.get(token, 0) + 1
        gold_counts: dict[str, int] = {}
        for token in gold_tokens:
            gold_counts[token] = gold_counts.get(token, 0) + 1
        clipped = sum(
            min(count, pred_counts.get(token, 0)) for token, count in gold_counts.items()
        )
        total += clipped / len(gold_tokens)
    if counted == 0:
        raise ValueError("no gold products with scoreable tokens")
    return total / counted


@dataclass(frozen=True)
class MetricsReport:
    """All four metrics plus the counts they were computed from."""

    acc80: float
    micro_f1: float
    macro_f1: float
    rouge1: float
    micro_precision: float
    micro_recall: float
    tp: int
    fp: int
    fn: int
    products: int
    gold_aspects: int

    def to_dict(self) -> dict:
        return {
            "acc80": self.acc80,
            "micro_f1": self.micro_f1,
            "macro_f1": self.macro_f1,
            "rouge1": self.rouge1,
            "micro_precision": self.micro_precision,
            "micro_recall": self.micro_recall,
            "tp": self.tp,
            "fp": self.fp,
            "fn": self.fn,
            "products": self.products,
            "gold_aspects": self.gold_aspects,
        }


def compute_report(predictions: Predictions, golds: Golds) -> MetricsReport:
    """Evaluate predictions against gold; requires a non-empty gold set."""
    unknown = sorted(set(predictions) - set(golds))
    if unknown:
        raise IdMismatchError(f"predictions for unknown product ids: {unknown[:5]}")
    products = len(golds)
    gold_aspects = sum(len(aspects) for aspects in golds.values())
    if products == 0 or gold_aspects == 0:
        raise ValueError("gold set is empty; nothing to evaluate")
    f1 = micro_macro_f1(predictions, golds)
    return MetricsReport(
        acc80=accuracy80(predictions, golds),
        micro_f1=f1.micro_f1,
        macro_f1=f1.macro_f1,
        rouge1=rouge1(predictions, golds),
        micro_precision=f1.micro_precision,
        micro_recall=f1.micro_recall,
        tp=f1.tp,
        fp=f1.fp,
        fn=f1.fn,
        products=products,
        gold_aspects=gold_aspects,
    )


def report_by_group(
    predictions: Predictions,
    golds: Golds,
    categories: Mapping[str, str] | None = None,
    group_by: str = "category",
) -> list[tuple[str, MetricsReport]]:
    """Per-category or per-attribute reports, sorted by macro-F1 ascending.

    Category grouping partitions products (list order follows the sort, and
    per-group tp/fp/fn sum to the global counts); attribute grouping
    restricts both sides to one attribute at a time.
    """
    rows: list[tuple[str, MetricsReport]] = []
    if group_by == "category":
        if categories is None:
            raise ValueError("category grouping needs a product id -> category map")
        groups: dict[str, list[str]] = {}
        for product_id in golds:
            if product_id not in categories:
                raise IdMismatchError(f"no category for product {product_id!r}")
            groups.setdefault(categories[product_id], []).append(product_id)
        for category, ids in groups.items():
            sub_golds = {pid: golds[pid] for pid in ids}
            sub_preds = {pid: predictions.get(pid, ()) for pid in ids}
            rows.append((category, compute_report(sub_preds, sub_golds)))
    elif group_by == "attribute":
        attrs = sorted(
            {
                normalize_attribute(a.attribute)
                for aspects in golds.values()
                for a in aspects
            }
        )
        for attr in attrs:
            sub_golds = {}
            sub_preds = {}
            for product_id, gold_aspects in golds.items():
                kept_gold = [
                    g
                    for g in gold_aspects
                    if normalize_attribute(g.attribute) == attr
                ]
                kept_pred = [
                    p
                    for p in predictions.get(product_id, ())
                    if normalize_attribute(p.attribute) == attr
                ]
                # Products predicting the attribute without annotating it
                # stay in: their false positives belong to this row, which
                # keeps each row equal to the overall macro-F1 component.
                if not kept_gold and not kept_pred:
                    continue
                sub_golds[product_id] = kept_gold
                sub_preds[product_id] = kept_pred
            rows.append((attr, compute_report(sub_preds, sub_golds)))
    else:
        raise ValueError(f"unknown group_by: {group_by!r}")
    rows.sort(key=lambda row: (row[1].macro_f1, row[0]))
    return rows


def render_table(rows: Iterable[tuple[str, MetricsReport]], label: str = "group") -> str:
    """Aligned text table, metric values as percentages with two decimals."""
    header = [label, "80%Acc", "Micro-F1", "Macro-F1", "ROUGE-1", "Products", "Aspects"]
    body = []
    for name, report in rows:
        body.append(
            [
                name,
                f"{report.acc80 * 100:.2f}",
                f"{report.micro_f1 * 100:.2f}",
                f"{report.macro_f1 * 100:.2f}",
                f"{report.rouge1 * 100:.2f}",
                str(report.products),
                str(report.gold_aspects),
            ]
        )
    widths = [
        max(len(row[i]) for row in [header, *body]) for i in range(len(header))
    ]
    lines = []
    for row in [header, *body]:
        cells = [row[0].ljust(widths[0])] + [
            row[i].rjust(widths[i]) for i in range(1, len(row))
        ]
        lines.append("  ".join(cells).rstrip())
    lines.insert(1, "-" * max(len(line) for line in lines))
    return "\n".join(lines)


def report_json(
    overall: MetricsReport,
    by_category: Sequence[tuple[str, MetricsReport]] = (),
    by_attribute: Sequence[tuple[str, MetricsReport]] = (),
) -> str:
    payload: dict = {"overall": overall.to_dict()}
    if by_category:
        payload["by_category"] = [
            {"category": name, **report.to_dict()} for name, report in by_category
        ]
    if by_attribute:
        payload["by_attribute"] = [
            {"attribute": name, **report.to_dict()} for name, report in by_attribute
        ]
    return json.dumps(payload, sort_keys=True, indent=2) + "\n"
