"""Prototypical classification head for token labeling.

Class centroids are support-set means in embedding space. A token's
distance vector ``v = (d_O, dist_0, ..., dist_{K-1})`` pairs a trainable
scalar threshold d_O with its distance to each class centroid; classes
absent from the support contribute a large constant distance instead.
Class probabilities are ``softmax(-v)`` over (O, class_0, ...), so a token
falls back to O whenever no centroid is closer than d_O.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np

from .corpus import OUTSIDE, Sentence
from .encoder import EmbeddingSource, GradientBundle

MISSING_CLASS_DISTANCE = 400.0

METRICS = ("euclidean", "squared_euclidean")


@dataclass
class PrototypeState:
    """Centroids plus the learned O-threshold.

    ``d_o_param`` is a 1-element array so optimizers can update it in
    place; read it through the ``d_o`` property. ``centroids`` holds the
    centroids used for inference (exact or per-batch); ``running_centroids``
    is the exponentially decayed accumulator for cheap inference.
    """

    class_order: tuple[str, ...]
    d_o_param: np.ndarray
    centroids: dict[str, np.ndarray] = field(default_factory=dict)
    running_centroids: dict[str, np.ndarray] = field(default_factory=dict)
    metric: str = "euclidean"
    missing_distance: float = MISSING_CLASS_DISTANCE

    def __post_init__(self):
        if self.metric not in METRICS:
            raise ValueError(f"metric must be one of {METRICS}, got {self.metric!r}")
        if self.missing_distance <= 0:
            raise ValueError("missing_distance must be positive")

    @classmethod
    def create(cls, class_order: Sequence[str], d_o: float = 1.0,
               metric: str = "euclidean",
               missing_distance: float = MISSING_CLASS_DISTANCE) -> "PrototypeState":
        return cls(class_order=tuple(class_order),
                   d_o_param=np.array([float(d_o)]),
                   metric=metric, missing_distance=missing_distance)

    @property
    def d_o(self) -> float:
        return float(self.d_o_param[0])

    @property
    def labels(self) -> tuple[str, ...]:
        """Output label order: O first, then the fixed class order."""
        return (OUTSIDE,) + self.class_order

    def with_centroids(self, centroids: dict[str, np.ndarray]) -> "PrototypeState":
        """Shallow copy sharing d_O but using the given centroids."""
        return replace(self, centroids=centroids)


@dataclass(frozen=True)
class DistanceVector:
    values: np.ndarray  # (K+1,), entry 0 is d_O
    metric: str


def pairwise_distance(x: np.ndarray, c: np.ndarray, metric: str) -> float:
    diff = x - c
    sq = float(diff @ diff)
    return np.sqrt(sq) if metric == "euclidean" else sq


def compute_centroids(
    support: Iterable[tuple[np.ndarray, str]]
) -> dict[str, np.ndarray]:
    """Per-class means of the support embeddings.

    Classes with no support element are simply absent from the result.
    """
    sums: dict[str, np.ndarray] = {}
    counts: dict[str, int] = {}
    dim = None
    for vec, label in support:
        vec = np.asarray(vec, dtype=float)
        if dim is None:
            dim = vec.shape
        elif vec.shape != dim:
            raise ValueError(f"support vector of shape {vec.shape}, expected {dim}")
        if label in sums:
            sums[label] = sums[label] + vec
            counts[label] += 1
        else:
            sums[label] = vec.copy()
            counts[label] = 1
    if dim is None:
        raise ValueError("empty support set")
    return {k: sums[k] / counts[k] for k in sums}


def distance_vector(
    x: np.ndarray,
    state: PrototypeState,
    present_classes: Iterable[str] | None = None,
) -> DistanceVector:
    """Distances from x to each class centroid, prefixed with d_O.

    Classes outside ``present_classes`` (default: classes with a centroid)
    get the fixed missing-class distance, which makes them effectively
    unreachable under softmax(-v).
    """
    present = set(state.centroids) if present_classes is None else set(present_classes)
    missing_centroid = present - set(state.centroids)
    if missing_centroid:
        raise ValueError(f"no centroid for classes {sorted(missing_centroid)}")
    values = np.empty(1 + len(state.class_order))
    values[0] = state.d_o
    for i, cls in enumerate(state.class_order):
        if cls in present:
            values[1 + i] = pairwise_distance(x, state.centroids[cls], state.metric)
        else:
            values[1 + i] = state.missing_distance
    return DistanceVector(values=values, metric=state.metric)


def class_probabilities(v: DistanceVector | np.ndarray) -> np.ndarray:
    """softmax(-v) with max-shift stabilization; sums to 1."""
    values = v.values if isinstance(v, DistanceVector) else np.asarray(v, dtype=float)
    if not np.isfinite(values).all():
        raise ValueError("distance vector contains non-finite entries")
    z = -values
    z = z - z.max()
    e = np.exp(z)
    return e / e.sum()


def _log_probabilities(values: np.ndarray) -> np.ndarray:
    z = -values
    shift = z - z.max()
    return shift - np.log(np.exp(shift).sum())


@dataclass(frozen=True)
class EpisodeItem:
    sentence: Sentence
    sentence_id: int
    token_id: int
    label: str


@dataclass(frozen=True)
class Episode:
    support: tuple[EpisodeItem, ...]
    query: tuple[EpisodeItem, ...]
    s1: int
    s2: int
    n: float

    @property
    def support_by_class(self) -> dict[str, tuple[EpisodeItem, ...]]:
        out: dict[str, list[EpisodeItem]] = {}
        for item in self.support:
            out.setdefault(item.label, []).append(item)
        return {k: tuple(v) for k, v in out.items()}


def proto_loss(
    episode: Episode,
    state: PrototypeState,
    encoder: EmbeddingSource,
) -> tuple[GradientBundle, dict[str, np.ndarray]]:
    """Cross-entropy of the episode queries against support centroids.

    Returns the loss with analytic gradients (d_O, encoder parameters, and
    per-query input gradients) plus the batch centroids. Gradients flow
    through the query embeddings and through the support means; the
    missing-class distance is a constant and contributes none.
    """
    support_vecs = [encoder.encode(it.sentence, it.token_id) for it in episode.support]
    centroids = compute_centroids(
        (vec, it.label) for vec, it in zip(support_vecs, episode.support)
    )
    batch_state = state.with_centroids(centroids)
    labels = state.labels
    label_index = {lab: i for i, lab in enumerate(labels)}

    param_grads = encoder.grad_templates()
    centroid_grads = {k: np.zeros_like(c) for k, c in centroids.items()}
    input_grads = np.zeros((len(episode.query), encoder.output_dim))
    d_o_grad = 0.0
    total_loss = 0.0
    n_q = len(episode.query)
    if n_q == 0:
        raise ValueError("episode has an empty query set")

    for qi, item in enumerate(episode.query):
        if item.label not in label_index:
            raise ValueError(f"query label {item.label!r} not in {labels}")
        x = encoder.encode(item.sentence, item.token_id)
        v = distance_vector(x, batch_state)
        logp = _log_probabilities(v.values)
        gold = label_index[item.label]
        total_loss += -logp[gold]

        p = np.exp(logp)
        dv = -(p - _onehot(gold, len(labels))) / n_q  # d(mean loss)/dv
        d_o_grad += dv[0]
        x_grad = np.zeros_like(x)
        for i, cls in enumerate(state.class_order):
            if cls not in centroids:
                continue
            g = dv[1 + i]
            if g == 0.0:
                continue
            diff = x - centroids[cls]
            if state.metric == "euclidean":
                dist = v.values[1 + i]
                ddist_dx = diff / dist if dist > 0 else np.zeros_like(diff)
            else:
                ddist_dx = 2.0 * diff
            x_grad += g * ddist_dx
            centroid_grads[cls] -= g * ddist_dx
        input_grads[qi] = x_grad
        encoder.backward(item.sentence, item.token_id, x_grad, param_grads)

    by_class = episode.support_by_class
    for cls, grad in centroid_grads.items():
        if not grad.any():  # e.g. O support: the head keeps no O centroid
            continue
        members = by_class[cls]
        share = grad / len(members)
        for item in members:
            encoder.backward(item.sentence, item.token_id, share, param_grads)

    loss = total_loss / n_q
    if not np.isfinite(loss):
        raise ValueError("non-finite loss")
    bundle = GradientBundle(
        loss_value=float(loss),
        parameter_gradients=encoder.flatten_grads(param_grads),
        input_gradients=input_grads,
        d_o_gradient=float(d_o_grad),
    )
    return bundle, centroids


def _onehot(index: int, size: int) -> np.ndarray:
    out = np.zeros(size)
    out[index] = 1.0
    return out


def update_running_centroids(
    state: PrototypeState,
    batch_centroids: dict[str, np.ndarray],
    alpha: float,
) -> PrototypeState:
    """Blend batch centroids into the running accumulator.

    Present classes move to ``alpha * batch + (1 - alpha) * previous``; a
    class seen for the first time adopts its batch centroid directly;
    absent classes keep their previous value.
    """
    if not 0.0 < alpha <= 1.0:
        raise ValueError(f"alpha must be in (0, 1], got {alpha}")
    for cls, batch in batch_centroids.items():
        previous = state.running_centroids.get(cls)
        if previous is None:
            state.running_centroids[cls] = np.array(batch, dtype=float)
        else:
            state.running_centroids[cls] = alpha * batch + (1.0 - alpha) * previous
    return state


def predict(x: np.ndarray, state: PrototypeState, use_running: bool = False) -> str:
    """Label of the nearest centroid, or O when none beats d_O.

    Equivalent to the argmax of class_probabilities over the distance
    vector; ties resolve to O first, then earlier class order.
    """
    if use_running:
        if not state.running_centroids:
            raise ValueError("running-centroid inference requested but the "
                             "accumulator is empty")
        working = state.with_centroids(state.running_centroids)
    else:
        if not state.centroids:
            raise ValueError("no centroids available for prediction")
        working = state
    v = distance_vector(x, working)
    return state.labels[int(np.argmin(v.values))]
