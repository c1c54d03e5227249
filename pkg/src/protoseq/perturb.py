"""Controlled dataset perturbations: label noise and few-shot reduction.

Both operations are pure functions over immutable datasets and are fully
deterministic given a seed.
"""
from __future__ import annotations

import math

import numpy as np

from .corpus import Dataset, Sentence, Token, entity_class, rebuild


class PerturbError(ValueError):
    pass


def inject_noise(dataset: Dataset, noise_rate: float, seed: int) -> Dataset:
    """Corrupt a fixed fraction of token labels.

    Selects floor(noise_rate * N) token positions uniformly at random
    without replacement and resamples each one's observed tag uniformly
    from the tag inventory minus its gold tag. Gold tags are retained and
    the noise mask is set, so accuracy on corrupted tokens stays computable
    against both label channels.
    """
    if not 0.0 <= noise_rate <= 1.0:
        raise PerturbError(f"noise_rate must be in [0, 1], got {noise_rate}")
    if dataset.has_noise:
        raise PerturbError("dataset already carries a noise mask")

    n_tokens = dataset.token_count
    n_noisy = math.floor(noise_rate * n_tokens)
    rng = np.random.default_rng(seed)
    selected = set(rng.choice(n_tokens, size=n_noisy, replace=False).tolist())

    inventory = dataset.tag_inventory
    if n_noisy > 0 and len(inventory) < 2:
        raise PerturbError("tag inventory too small to permute labels")

    sentences: list[Sentence] = []
    flat = 0
    for sentence in dataset.sentences:
        tokens = []
        for token in sentence.tokens:
            if flat in selected:
                candidates = [t for t in inventory if t != token.gold_tag]
                observed = candidates[rng.integers(len(candidates))]
                tokens.append(
                    Token(surface=token.surface, gold_tag=token.gold_tag,
                          observed_tag=observed, is_noisy=True)
                )
            else:
                tokens.append(token)
            flat += 1
        sentences.append(
            Sentence(tokens=tuple(tokens), doc_boundary=sentence.doc_boundary,
                     index=sentence.index)
        )

    provenance = dataset.provenance + (
        {"op": "inject_noise", "rate": noise_rate, "seed": seed},
    )
    return rebuild(sentences, provenance)


def _reservoir_sample(items: list, keep: int, rng: np.random.Generator) -> list:
    # Algorithm R; uniform without replacement, single pass.
    kept = list(items[:keep])
    for i in range(keep, len(items)):
        j = int(rng.integers(0, i + 1))
        if j < keep:
            kept[j] = items[i]
    return kept


def reduce_few_shot(
    dataset: Dataset, target_class: str, keep_count: int, seed: int
) -> Dataset:
    """Drop all but ``keep_count`` sentences containing the target class.

    Sentences without the class are kept unconditionally; the retained
    subset of containing sentences is a uniform reservoir sample.
    """
    if target_class not in dataset.entity_classes:
        raise PerturbError(
            f"unknown entity class {target_class!r}; "
            f"expected one of {list(dataset.entity_classes)}"
        )
    if keep_count < 0:
        raise PerturbError("keep_count must be >= 0")

    containing = [
        sid
        for sid, sentence in enumerate(dataset.sentences)
        if any(entity_class(t.observed_tag) == target_class for t in sentence.tokens)
    ]
    if keep_count > len(containing):
        raise PerturbError(
            f"keep_count {keep_count} exceeds the {len(containing)} sentences "
            f"containing {target_class}"
        )

    rng = np.random.default_rng(seed)
    kept = set(_reservoir_sample(containing, keep_count, rng))
    dropped = set(containing) - kept
    sentences = [s for sid, s in enumerate(dataset.sentences) if sid not in dropped]

    provenance = dataset.provenance + (
        {"op": "reduce_few_shot", "class": target_class, "keep": keep_count,
         "seed": seed},
    )
    return rebuild(sentences, provenance)
