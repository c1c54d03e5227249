"""Training-dynamics analytics.

Tracks per-token correctness and loss at every epoch, derives
learning/forgetting events from the resulting history, and detects noisy
labels from the loss distribution with an exhaustive threshold search.

Event definitions over a correctness history (epoch 0 counts as incorrect
for everyone): a learning event at epoch t means incorrect at t-1 but
correct at t; a forgetting event is the reverse; the first learning event
is the earliest correct epoch. Examples with zero forgetting events are
unforgettable; examples with at least one learning event are learned.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .corpus import Dataset, entity_class


class LedgerError(ValueError):
    pass


class EventLedger:
    """Per-example correctness and loss history, one row per epoch.

    Examples are tokens identified by "sentence_id:token_id"; the id list
    is fixed by the first recorded epoch. Appends happen at epoch
    boundaries only; all analytics read an immutable snapshot.
    """

    def __init__(self, example_ids: Sequence[str] | None = None,
                 noise_mask: Sequence[bool] | None = None):
        self.example_ids = list(example_ids) if example_ids is not None else None
        self.noise_mask = None if noise_mask is None else np.asarray(noise_mask, bool)
        self.epochs: list[int] = []
        self._correct_observed: list[np.ndarray] = []
        self._correct_gold: list[np.ndarray] = []
        self._losses: list[np.ndarray] = []

    def __len__(self) -> int:
        return len(self.epochs)

    @property
    def n_examples(self) -> int:
        return len(self.example_ids) if self.example_ids is not None else 0

    def record(self, epoch: int, correct_observed: Sequence[bool],
               correct_gold: Sequence[bool], losses: Sequence[float],
               example_ids: Sequence[str] | None = None) -> None:
        if self.example_ids is None:
            if example_ids is None:
                raise LedgerError("first record must supply example ids")
            self.example_ids = list(example_ids)
        n = self.n_examples
        for name, values in (("correct_observed", correct_observed),
                             ("correct_gold", correct_gold),
                             ("losses", losses)):
            if len(values) != n:
                raise LedgerError(f"{name} has {len(values)} entries, expected {n}")
        if self.epochs and epoch <= self.epochs[-1]:
            raise LedgerError(
                f"epoch {epoch} not after last recorded epoch {self.epochs[-1]}"
            )
        self.epochs.append(epoch)
        self._correct_observed.append(np.asarray(correct_observed, bool))
        self._correct_gold.append(np.asarray(correct_gold, bool))
        self._losses.append(np.asarray(losses, float))

    def correctness(self, channel: str = "observed") -> np.ndarray:
        """(T, N) boolean matrix for the requested label channel."""
        rows = {"observed": self._correct_observed,
                "gold": self._correct_gold}[channel]
        if not rows:
            return np.zeros((0, self.n_examples), bool)
        return np.stack(rows)

    def losses_at(self, epoch: int) -> np.ndarray:
        try:
            idx = self.epochs.index(epoch)
        except ValueError:
            raise LedgerError(
                f"epoch {epoch} not in ledger (has {self.epochs})"
            ) from None
        return self._losses[idx]

    def write_csv(self, stream) -> None:
        writer = csv.writer(stream)
        writer.writerow(["example_id", "epoch", "correct_observed",
                         "correct_gold", "loss"])
        for t, epoch in enumerate(self.epochs):
            for i, ex in enumerate(self.example_ids):
                writer.writerow([
                    ex, epoch,
                    int(self._correct_observed[t][i]),
                    int(self._correct_gold[t][i]),
                    repr(float(self._losses[t][i])),
                ])

    @classmethod
    def read_csv(cls, stream) -> "EventLedger":
        reader = csv.reader(stream)
        header = next(reader, None)
        if header != ["example_id", "epoch", "correct_observed",
                      "correct_gold", "loss"]:
            raise LedgerError(f"unexpected ledger header {header}")
        by_epoch: dict[int, list[tuple[str, bool, bool, float]]] = {}
        for row in reader:
            if not row:
                continue
            ex, epoch, c_obs, c_gold, loss = row
            by_epoch.setdefault(int(epoch), []).append(
                (ex, c_obs == "1", c_gold == "1", float(loss))
            )
        ledger = cls()
        for epoch in sorted(by_epoch):
            rows = by_epoch[epoch]
            ids = [r[0] for r in rows]
            if ledger.example_ids is not None and ids != ledger.example_ids:
                raise LedgerError(f"epoch {epoch} rows out of order")
            ledger.record(epoch, [r[1] for r in rows], [r[2] for r in rows],
                          [r[3] for r in rows], example_ids=ids)
        return ledger


@dataclass(frozen=True)
class EventSummary:
    epochs: tuple[int, ...]
    learning_events: np.ndarray        # (N,) int
    forgetting_events: np.ndarray      # (N,) int
    first_learning_epoch: np.ndarray   # (N,) int, -1 = never learned
    n_forgettable: int
    n_unforgettable: int
    n_learned: int

    @property
    def forgettable_learned_ratio(self) -> float | None:
        return forgettable_learned_ratio(self.n_forgettable, self.n_learned)

    def to_dict(self) -> dict:
        ratio = self.forgettable_learned_ratio
        return {
            "examples": int(self.learning_events.size),
            "forgettable": self.n_forgettable,
            "unforgettable": self.n_unforgettable,
            "learned": self.n_learned,
            "forgettable_learned_ratio": ratio,
        }


def forgettable_learned_ratio(n_forgettable: float, n_learned: float) -> float | None:
    """N_f / N_l; None when nothing was learned. Unit-agnostic (counts or %)."""
    if n_learned == 0:
        return None
    return n_forgettable / n_learned


def compute_events(ledger: EventLedger, channel: str = "observed") -> EventSummary:
    """Derive learning/forgetting events and aggregates from a ledger."""
    matrix = ledger.correctness(channel)
    if matrix.shape[0] == 0:
        raise LedgerError("ledger has no recorded epochs")
    t_count, n = matrix.shape
    prev = np.zeros(n, bool)  # epoch 0: everything incorrect
    learning = np.zeros(n, int)
    forgetting = np.zeros(n, int)
    first = np.full(n, -1, int)
    for t in range(t_count):
        cur = matrix[t]
        learned_now = cur & ~prev
        learning += learned_now
        forgetting += prev & ~cur
        newly_first = learned_now & (first < 0)
        first[newly_first] = ledger.epochs[t]
        prev = cur
    n_forgettable = int((forgetting > 0).sum())
    return EventSummary(
        epochs=tuple(ledger.epochs),
        learning_events=learning,
        forgetting_events=forgetting,
        first_learning_epoch=first,
        n_forgettable=n_forgettable,
        n_unforgettable=n - n_forgettable,
        n_learned=int((learning > 0).sum()),
    )


def histogram_first_learning(
    summary: EventSummary, epoch_count: int | None = None
) -> tuple[dict[int, int], int]:
    """Count examples by first-learning epoch.

    Returns (counts keyed by epoch, never-learned count); epochs with no
    first learnings appear with count 0 so the histogram is dense.
    """
    epochs = summary.epochs if epoch_count is None else tuple(
        range(1, epoch_count + 1)
    )
    counts = {e: 0 for e in epochs}
    never = 0
    for e in summary.first_learning_epoch:
        if e < 0:
            never += 1
        else:
            counts[int(e)] = counts.get(int(e), 0) + 1
    return counts, never


@dataclass(frozen=True)
class ThresholdResult:
    threshold: float | None
    mu_clean: float | None
    mu_noisy: float | None
    objective: float | None
    predicted_noisy: np.ndarray
    degenerate: bool = False

    def to_dict(self) -> dict:
        return {
            "threshold": self.threshold,
            "mu_clean": self.mu_clean,
            "mu_noisy": self.mu_noisy,
            "objective": self.objective,
            "degenerate": self.degenerate,
            "n_flagged": int(self.predicted_noisy.sum()),
            "n_examples": int(self.predicted_noisy.size),
        }


def _split_objective(losses: np.ndarray, threshold: float) -> tuple[float, float, float]:
    below = losses[losses < threshold]
    above = losses[losses >= threshold]
    mu_c = float(below.mean()) if below.size else 0.0
    mu_n = float(above.mean()) if above.size else 0.0
    objective = float(((below - mu_c) ** 2).sum() + ((above - mu_n) ** 2).sum())
    return mu_c, mu_n, objective


def detect_noise(losses: Sequence[float]) -> ThresholdResult:
    """Two-cluster loss threshold minimizing within-cluster squared error.

    Searches every midpoint between consecutive distinct sorted losses and
    keeps the smallest threshold attaining the minimum objective. Losses at
    or above the threshold are flagged noisy (noisy labels sit on the
    high-loss side early in training).
    """
    losses = np.asarray(losses, float)
    if losses.size < 2:
        raise ValueError("need at least 2 loss values")
    distinct = np.unique(losses)
    if distinct.size < 2:
        return ThresholdResult(None, None, None, None,
                               np.zeros(losses.size, bool), degenerate=True)

    # Prefix sums over the distinct-value groups give every candidate's
    # objective in O(m); the objective is constant between data points so
    # midpoints cover all distinct splits.
    order = np.sort(losses)
    csum = np.cumsum(order)
    csq = np.cumsum(order ** 2)
    total_sum, total_sq = csum[-1], csq[-1]
    # boundary index b: first b sorted values fall below the candidate
    boundaries = np.searchsorted(order, distinct[1:], side="left")
    candidates = (distinct[:-1] + distinct[1:]) / 2.0
    n_below = boundaries.astype(float)
    sum_b = csum[boundaries - 1]
    sq_b = csq[boundaries - 1]
    n_above = losses.size - n_below
    sse_below = sq_b - sum_b ** 2 / n_below
    sse_above = (total_sq - sq_b) - (total_sum - sum_b) ** 2 / n_above
    objectives = sse_below + sse_above

    best = int(np.argmin(objectives))  # ties resolve to the smaller threshold
    threshold = float(candidates[best])
    mu_c, mu_n, objective = _split_objective(losses, threshold)
    return ThresholdResult(
        threshold=threshold,
        mu_clean=mu_c,
        mu_noisy=mu_n,
        objective=objective,
        predicted_noisy=losses >= threshold,
    )


def detection_metrics(
    predicted_mask: Sequence[bool], true_mask: Sequence[bool]
) -> tuple[float, float, float]:
    """Precision/recall/F1 of the noisy class, as fractions."""
    predicted = np.asarray(predicted_mask, bool)
    true = np.asarray(true_mask, bool)
    if predicted.shape != true.shape:
        raise ValueError(
            f"mask lengths differ: {predicted.shape} vs {true.shape}"
        )
    tp = int((predicted & true).sum())
    p = tp / int(predicted.sum()) if predicted.any() else 0.0
    r = tp / int(true.sum()) if true.any() else 0.0
    f1 = 2 * p * r / (p + r) if p + r else 0.0
    return p, r, f1


@dataclass(frozen=True)
class NoisySubsetAccuracy:
    observed: float  # fraction of corrupted tokens predicted as their noisy label
    gold: float      # same subset scored against the clean label
    n_noisy: int


def noisy_token_accuracy(
    predictions: Sequence[str], dataset: Dataset
) -> NoisySubsetAccuracy:
    """Accuracy on the corrupted-token subset, per label channel.

    ``predictions`` are per-token class labels (entity type or O) in corpus
    iteration order. The observed channel measures memorisation of the
    injected noise; the gold channel shows how often those tokens are still
    classified correctly.
    """
    tokens = list(dataset.iter_tokens())
    if len(predictions) != len(tokens):
        raise ValueError(
            f"{len(predictions)} predictions for {len(tokens)} tokens"
        )
    noisy = [(pred, tok) for pred, (_, _, tok) in zip(predictions, tokens)
             if tok.is_noisy]
    if not noisy:
        raise ValueError("dataset has no noisy tokens")
    obs = sum(pred == entity_class(tok.observed_tag) for pred, tok in noisy)
    gold = sum(pred == entity_class(tok.gold_tag) for pred, tok in noisy)
    return NoisySubsetAccuracy(
        observed=obs / len(noisy),
        gold=gold / len(noisy),
        n_noisy=len(noisy),
    )
