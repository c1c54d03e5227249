"""Token embedding sources.

Two implementations of the same contract: a small trainable encoder
(hash-bucketed lookup table, context-window mean pooling, affine map,
tanh squash) and a frozen source backed by a precomputed embeddings file.
Either one maps (sentence, token_index) to an M-dimensional float64 vector.

Embeddings file format::

    protoseq-emb v1 <count> <dim>
    <sentence_id> <token_id> <dim floats>
    ...

Rows must follow the corpus iteration order (sentences in order, tokens in
order, document-boundary markers contributing nothing).
"""
from __future__ import annotations

import zlib
from dataclasses import dataclass
from typing import Iterable

import numpy as np

from .corpus import Dataset, Sentence

EMB_FORMAT = "protoseq-emb"
EMB_VERSION = "v1"


class EmbeddingsError(ValueError):
    """Base class for embeddings-file validation failures."""


class CountMismatchError(EmbeddingsError):
    pass


class DimensionMismatchError(EmbeddingsError):
    pass


class NonFiniteError(EmbeddingsError):
    pass


class AlignmentError(EmbeddingsError):
    pass


@dataclass
class GradientBundle:
    """Loss plus gradients from one backward pass.

    ``parameter_gradients`` is flat and aligned with the encoder's flat
    parameter vector (empty for frozen sources); ``input_gradients`` holds
    one M-vector per query token.
    """

    loss_value: float
    parameter_gradients: np.ndarray
    input_gradients: np.ndarray
    d_o_gradient: float = 0.0


class EmbeddingSource:
    """Common surface of all embedding providers."""

    output_dim: int

    @property
    def mode(self) -> str:
        return "trainable" if self.trainable else "frozen"

    @property
    def trainable(self) -> bool:
        return False

    def encode(self, sentence: Sentence, token_index: int) -> np.ndarray:
        raise NotImplementedError

    def parameter_arrays(self) -> dict[str, np.ndarray]:
        """Live parameter arrays by group name (empty when frozen)."""
        return {}

    def flat_parameters(self) -> np.ndarray:
        arrays = self.parameter_arrays()
        if not arrays:
            return np.zeros(0)
        return np.concatenate([arrays[k].ravel() for k in sorted(arrays)])

    def set_flat_parameters(self, flat: np.ndarray) -> None:
        offset = 0
        arrays = self.parameter_arrays()
        for name in sorted(arrays):
            arr = arrays[name]
            arr.flat[:] = flat[offset:offset + arr.size]
            offset += arr.size
        if offset != flat.size:
            raise ValueError(f"expected {offset} parameters, got {flat.size}")

    def grad_templates(self) -> dict[str, np.ndarray]:
        return {k: np.zeros_like(v) for k, v in self.parameter_arrays().items()}

    def flatten_grads(self, grads: dict[str, np.ndarray]) -> np.ndarray:
        if not grads:
            return np.zeros(0)
        return np.concatenate([grads[k].ravel() for k in sorted(grads)])

    def backward(self, sentence: Sentence, token_index: int,
                 upstream: np.ndarray, grads: dict[str, np.ndarray]) -> None:
        """Accumulate d(loss)/d(parameters) given d(loss)/d(embedding)."""


class HashEncoder(EmbeddingSource):
    """Trainable desk-scale encoder.

    The embedding of token t is ``tanh(W u + b)`` where u is the mean of
    the hash-bucketed lookup vectors over the context window
    [t - window, t + window] clipped to the sentence. Parameters initialize
    uniformly in [-0.1, 0.1] so embeddings and distances start O(1).
    """

    def __init__(self, output_dim: int = 64, lookup_dim: int = 16,
                 n_buckets: int = 2 ** 16, window: int = 1, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.output_dim = output_dim
        self.lookup_dim = lookup_dim
        self.n_buckets = n_buckets
        self.window = window
        self.lookup = rng.uniform(-0.1, 0.1, size=(n_buckets, lookup_dim))
        self.weight = rng.uniform(-0.1, 0.1, size=(output_dim, lookup_dim))
        self.bias = rng.uniform(-0.1, 0.1, size=output_dim)
        self._frozen = False

    @property
    def trainable(self) -> bool:
        return not self._frozen

    def freeze(self) -> None:
        self._frozen = True

    def parameter_arrays(self) -> dict[str, np.ndarray]:
        if self._frozen:
            return {}
        return {"lookup": self.lookup, "weight": self.weight, "bias": self.bias}

    def bucket(self, surface: str) -> int:
        return zlib.crc32(surface.encode("utf-8")) % self.n_buckets

    def _window_buckets(self, sentence: Sentence, token_index: int) -> list[int]:
        if not 0 <= token_index < len(sentence.tokens):
            raise IndexError(
                f"token index {token_index} out of range for sentence of "
                f"length {len(sentence.tokens)}"
            )
        lo = max(0, token_index - self.window)
        hi = min(len(sentence.tokens), token_index + self.window + 1)
        return [self.bucket(sentence.tokens[i].surface) for i in range(lo, hi)]

    def encode(self, sentence: Sentence, token_index: int) -> np.ndarray:
        buckets = self._window_buckets(sentence, token_index)
        pooled = self.lookup[buckets].mean(axis=0)
        return np.tanh(self.weight @ pooled + self.bias)

    def backward(self, sentence: Sentence, token_index: int,
                 upstream: np.ndarray, grads: dict[str, np.ndarray]) -> None:
        if self._frozen:
            return
        buckets = self._window_buckets(sentence, token_index)
        pooled = self.lookup[buckets].mean(axis=0)
        out = np.tanh(self.weight @ pooled + self.bias)
        g_pre = upstream * (1.0 - out * out)
        grads["weight"] += np.outer(g_pre, pooled)
        grads["bias"] += g_pre
        g_pooled = self.weight.T @ g_pre
        share = g_pooled / len(buckets)
        for b in buckets:
            grads["lookup"][b] += share


class PrecomputedEmbeddings(EmbeddingSource):
    """Frozen source returning vectors loaded from an embeddings file."""

    def __init__(self, output_dim: int, by_sentence: dict[int, np.ndarray]):
        self.output_dim = output_dim
        self._by_sentence = by_sentence

    def encode(self, sentence: Sentence, token_index: int) -> np.ndarray:
        block = self._by_sentence.get(sentence.index)
        if block is None or not 0 <= token_index < block.shape[0]:
            raise AlignmentError(
                f"no stored vector for sentence {sentence.index} "
                f"token {token_index}"
            )
        return block[token_index]


def write_embeddings(stream, rows: Iterable[tuple[int, int, np.ndarray]],
                     count: int, dim: int) -> None:
    """Write the versioned embeddings format; floats via repr (round-trips)."""
    stream.write(f"{EMB_FORMAT} {EMB_VERSION} {count} {dim}\n")
    for sid, tid, vec in rows:
        values = " ".join(repr(float(x)) for x in vec)
        stream.write(f"{sid} {tid} {values}\n")


def load_embeddings(stream: Iterable[str], dataset: Dataset) -> PrecomputedEmbeddings:
    """Load a precomputed embeddings file aligned with ``dataset``.

    Raises CountMismatchError, DimensionMismatchError, NonFiniteError, or
    AlignmentError for the corresponding validation failures.
    """
    lines = iter(stream)
    try:
        header = next(lines)
    except StopIteration:
        raise EmbeddingsError("empty embeddings file") from None
    parts = header.split()
    if len(parts) != 4 or parts[0] != EMB_FORMAT or parts[1] != EMB_VERSION:
        raise EmbeddingsError(f"bad header {header.strip()!r}")
    count, dim = int(parts[2]), int(parts[3])
    if count != dataset.token_count:
        raise CountMismatchError(
            f"file declares {count} vectors, corpus has {dataset.token_count} tokens"
        )

    expected = [(sid, tid) for sid, tid, _ in dataset.iter_tokens()]
    vectors = np.zeros((count, dim))
    n_rows = 0
    for lineno, raw in enumerate(lines, start=2):
        if not raw.strip():
            continue
        fields = raw.split()
        if n_rows >= count:
            raise CountMismatchError(f"more vector rows than declared count {count}")
        if len(fields) != 2 + dim:
            raise DimensionMismatchError(
                f"line {lineno}: expected {dim} floats, got {len(fields) - 2}"
            )
        sid, tid = int(fields[0]), int(fields[1])
        if (sid, tid) != expected[n_rows]:
            raise AlignmentError(
                f"line {lineno}: row ({sid}, {tid}) does not match corpus "
                f"order entry {expected[n_rows]}"
            )
        vectors[n_rows] = [float(x) for x in fields[2:]]
        n_rows += 1
    if n_rows != count:
        raise CountMismatchError(f"file declares {count} vectors but has {n_rows}")
    if not np.isfinite(vectors).all():
        raise NonFiniteError("embeddings contain NaN or Inf values")

    by_sentence: dict[int, np.ndarray] = {}
    row = 0
    for sentence in dataset.sentences:
        n = len(sentence.tokens)
        if n:
            by_sentence[sentence.index] = vectors[row:row + n]
            row += n
    return PrecomputedEmbeddings(output_dim=dim, by_sentence=by_sentence)


def load_embeddings_file(path, dataset: Dataset) -> PrecomputedEmbeddings:
    with open(path, encoding="utf-8") as fh:
        return load_embeddings(fh, dataset)
