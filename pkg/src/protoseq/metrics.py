"""Entity-level precision/recall/F1 and token accuracy.

Scores are exact-span matches on (type, start, end) triples, micro-averaged
over all entity types. All values are fractions in [0, 1]; multiply by 100
only when rendering.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

from .corpus import extract_entities


@dataclass(frozen=True)
class ClassScore:
    precision: float
    recall: float
    f1: float
    support: int  # gold span count


@dataclass(frozen=True)
class EntityScores:
    precision: float
    recall: float
    f1: float
    per_class: dict[str, ClassScore] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "precision": self.precision,
            "recall": self.recall,
            "f1": self.f1,
            "per_class": {
                k: {"p": v.precision, "r": v.recall, "f1": v.f1,
                    "support": v.support}
                for k, v in self.per_class.items()
            },
        }


def prf1(tp: int, n_pred: int, n_gold: int) -> tuple[float, float, float]:
    p = tp / n_pred if n_pred else 0.0
    r = tp / n_gold if n_gold else 0.0
    f1 = 2 * p * r / (p + r) if p + r else 0.0
    return p, r, f1


def entity_prf1(
    predicted_tags: Sequence[Sequence[str]],
    gold_tags: Sequence[Sequence[str]],
    per_class: bool = False,
) -> EntityScores:
    """Score predicted tag sequences against gold, span-exact.

    Both arguments are per-sentence tag lists and must align sentence by
    sentence and token by token.
    """
    if len(predicted_tags) != len(gold_tags):
        raise ValueError(
            f"{len(predicted_tags)} predicted sentences vs {len(gold_tags)} gold"
        )
    pred_spans = set()
    gold_spans = set()
    for sid, (pred, gold) in enumerate(zip(predicted_tags, gold_tags)):
        if len(pred) != len(gold):
            raise ValueError(
                f"sentence {sid}: {len(pred)} predicted tags vs {len(gold)} gold"
            )
        pred_spans.update(extract_entities(pred, sentence_id=sid))
        gold_spans.update(extract_entities(gold, sentence_id=sid))

    p, r, f1 = prf1(len(pred_spans & gold_spans), len(pred_spans), len(gold_spans))
    by_class: dict[str, ClassScore] = {}
    if per_class:
        classes = sorted({s.entity_type for s in pred_spans | gold_spans})
        for cls in classes:
            pc = {s for s in pred_spans if s.entity_type == cls}
            gc = {s for s in gold_spans if s.entity_type == cls}
            cp, cr, cf = prf1(len(pc & gc), len(pc), len(gc))
            by_class[cls] = ClassScore(cp, cr, cf, support=len(gc))
    return EntityScores(p, r, f1, by_class)


def token_accuracy(
    predicted: Sequence[str],
    reference: Sequence[str],
    subset_mask: Sequence[bool] | None = None,
) -> float:
    """Exact-match fraction over the masked positions (default: all)."""
    if len(predicted) != len(reference):
        raise ValueError(f"{len(predicted)} predictions vs {len(reference)} references")
    if subset_mask is None:
        subset_mask = [True] * len(predicted)
    elif len(subset_mask) != len(predicted):
        raise ValueError("mask length does not match sequences")
    pairs = [(p, r) for p, r, m in zip(predicted, reference, subset_mask) if m]
    if not pairs:
        raise ValueError("empty evaluation mask")
    return sum(p == r for p, r in pairs) / len(pairs)
