"""Episodic training for the prototypical head and a softmax baseline.

Both heads classify tokens into the dataset's entity classes plus O and
share the same encoder, optimizer, and bookkeeping. The prototypical head
trains on support/query episodes resampled every step; the baseline trains
on uniform token batches. An epoch-end pass records per-token correctness
and loss into the event ledger and tracks entity-level F1 on the training
and validation sets.
"""
from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .corpus import Dataset, OUTSIDE, entity_class, labels_to_bio
from .dynamics import EventLedger, noisy_token_accuracy
from .encoder import EmbeddingSource, HashEncoder
from .metrics import entity_prf1
from .optim import AdamW, warmup_lr
from .proto import (
    Episode,
    EpisodeItem,
    PrototypeState,
    class_probabilities,
    compute_centroids,
    distance_vector,
    proto_loss,
    update_running_centroids,
)


class TrainingAborted(RuntimeError):
    """Raised when a step produces a non-finite loss; carries the episode."""

    def __init__(self, message: str, episode_refs: list[tuple[int, int]] | None = None):
        super().__init__(message)
        self.episode_refs = episode_refs or []


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    weight_decay: float = 0.01
    warmup_fraction: float = 0.10
    epochs: int = 1
    steps_per_epoch: int | None = None
    seed: int = 0
    head: str = "proto"
    s1: int = 8
    s2: int = 8
    n: float = 1.0
    alpha: float = 0.9
    metric: str = "euclidean"
    output_dim: int = 64
    minority_classes: tuple[str, ...] = ()
    batch_size: int = 32
    use_running_centroids: bool = False
    d_o_init: float = 1.0
    missing_distance: float = 400.0
    lookup_dim: int = 16
    n_buckets: int = 2 ** 16
    window: int = 1

    def __post_init__(self):
        if self.learning_rate < 0 or self.weight_decay < 0:
            raise ValueError("rates must be non-negative")
        if not 0.0 <= self.warmup_fraction < 1.0:
            raise ValueError("warmup_fraction must be in [0, 1)")
        if self.head not in ("proto", "baseline"):
            raise ValueError(f"head must be proto or baseline, got {self.head!r}")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        self.minority_classes = tuple(self.minority_classes)

    @classmethod
    def from_file(cls, path) -> "TrainConfig":
        with open(path, encoding="utf-8") as fh:
            data = json.load(fh)
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**data)

    def to_file(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(dataclasses.asdict(self), fh, indent=2, sort_keys=True)
            fh.write("\n")


def class_pools(dataset: Dataset) -> dict[str, list[EpisodeItem]]:
    """Tokens grouped by the entity class of their observed tag."""
    pools: dict[str, list[EpisodeItem]] = {}
    for sid, tid, token in dataset.iter_tokens():
        label = entity_class(token.observed_tag)
        pools.setdefault(label, []).append(
            EpisodeItem(dataset.sentences[sid], sid, tid, label)
        )
    return pools


def _draw(pool: Sequence[EpisodeItem], count: int,
          rng: np.random.Generator) -> list[EpisodeItem]:
    if count >= len(pool):
        return list(pool)
    idx = rng.choice(len(pool), size=count, replace=False)
    return [pool[i] for i in np.sort(idx)]


def sample_episode(
    dataset: Dataset,
    s1: int,
    s2: int,
    n: float,
    minority_classes: Sequence[str],
    rng: np.random.Generator,
    pools: dict[str, list[EpisodeItem]] | None = None,
) -> Episode:
    """Draw a fresh support/query episode.

    Support takes min(s1, available) tokens from each minority class and
    min(s2, available) from each other class (O included). The query draws
    up to s2 non-minority tokens and floor(n * s2) minority tokens from
    what remains, keeping the minority:non-minority ratio near n.
    """
    if pools is None:
        pools = class_pools(dataset)
    minority = set(minority_classes)
    labels = sorted(pools)

    support: list[EpisodeItem] = []
    taken: set[tuple[int, int]] = set()
    for label in labels:
        quota = s1 if label in minority else s2
        picked = _draw(pools[label], quota, rng)
        support.extend(picked)
        taken.update((it.sentence_id, it.token_id) for it in picked)

    rem_minority: list[EpisodeItem] = []
    rem_other: list[EpisodeItem] = []
    for label in labels:
        rest = [it for it in pools[label]
                if (it.sentence_id, it.token_id) not in taken]
        (rem_minority if label in minority else rem_other).extend(rest)

    query = _draw(rem_other, s2, rng)
    query += _draw(rem_minority, math.floor(n * s2), rng)
    if not query:
        raise ValueError("sampled episode has an empty query set")
    return Episode(support=tuple(support), query=tuple(query), s1=s1, s2=s2, n=n)


@dataclass
class BaselineHead:
    """Affine softmax classifier over (O, class_0, ...)."""

    weight: np.ndarray  # (K+1, M)
    bias: np.ndarray    # (K+1,)
    labels: tuple[str, ...]

    @classmethod
    def create(cls, labels: Sequence[str], input_dim: int,
               seed: int = 0) -> "BaselineHead":
        rng = np.random.default_rng(seed)
        return cls(
            weight=rng.uniform(-0.1, 0.1, size=(len(labels), input_dim)),
            bias=rng.uniform(-0.1, 0.1, size=len(labels)),
            labels=tuple(labels),
        )


def baseline_forward(embedding: np.ndarray, weight: np.ndarray,
                     bias: np.ndarray) -> np.ndarray:
    """Softmax of the affine logits; zero weights give uniform output."""
    if weight.shape[1] != embedding.shape[0]:
        raise ValueError(
            f"weight expects dim {weight.shape[1]}, embedding has {embedding.shape[0]}"
        )
    logits = weight @ embedding + bias
    z = logits - logits.max()
    e = np.exp(z)
    return e / e.sum()


def baseline_loss(
    batch: Sequence[EpisodeItem],
    head: BaselineHead,
    encoder: EmbeddingSource,
) -> tuple[float, np.ndarray, np.ndarray, dict[str, np.ndarray]]:
    """Mean cross-entropy over a token batch, with W/b/encoder gradients."""
    label_index = {lab: i for i, lab in enumerate(head.labels)}
    g_w = np.zeros_like(head.weight)
    g_b = np.zeros_like(head.bias)
    enc_grads = encoder.grad_templates()
    total = 0.0
    for item in batch:
        e = encoder.encode(item.sentence, item.token_id)
        probs = baseline_forward(e, head.weight, head.bias)
        gold = label_index[item.label]
        total += -math.log(max(probs[gold], 1e-300))
        dlogits = probs.copy()
        dlogits[gold] -= 1.0
        dlogits /= len(batch)
        g_w += np.outer(dlogits, e)
        g_b += dlogits
        encoder.backward(item.sentence, item.token_id,
                         head.weight.T @ dlogits, enc_grads)
    return total / len(batch), g_w, g_b, enc_grads


@dataclass
class Checkpoint:
    head: str
    class_order: tuple[str, ...]
    metric: str
    missing_distance: float
    alpha: float
    d_o: float
    centroids: dict[str, np.ndarray]
    running_centroids: dict[str, np.ndarray]
    encoder_meta: dict
    encoder_params: dict[str, np.ndarray]
    baseline_weight: np.ndarray | None = None
    baseline_bias: np.ndarray | None = None
    epoch: int = 0
    val_f1: float = 0.0

    def save(self, path) -> None:
        meta = {
            "format": "protoseq-checkpoint",
            "version": 1,
            "head": self.head,
            "class_order": list(self.class_order),
            "metric": self.metric,
            "missing_distance": self.missing_distance,
            "alpha": self.alpha,
            "d_o": self.d_o,
            "encoder": self.encoder_meta,
            "centroid_classes": sorted(self.centroids),
            "running_classes": sorted(self.running_centroids),
            "epoch": self.epoch,
            "val_f1": self.val_f1,
        }
        arrays = {f"centroid_{k}": v for k, v in self.centroids.items()}
        arrays.update({f"running_{k}": v for k, v in self.running_centroids.items()})
        arrays.update({f"param_{k}": v for k, v in self.encoder_params.items()})
        if self.baseline_weight is not None:
            arrays["baseline_weight"] = self.baseline_weight
            arrays["baseline_bias"] = self.baseline_bias
        np.savez(path, meta=json.dumps(meta, sort_keys=True), **arrays)

    @classmethod
    def load(cls, path) -> "Checkpoint":
        with np.load(path, allow_pickle=False) as data:
            meta = json.loads(str(data["meta"]))
            if meta.get("format") != "protoseq-checkpoint":
                raise ValueError("not a protoseq checkpoint")
            centroids = {k: data[f"centroid_{k}"] for k in meta["centroid_classes"]}
            running = {k: data[f"running_{k}"] for k in meta["running_classes"]}
            params = {
                key[len("param_"):]: data[key]
                for key in data.files if key.startswith("param_")
            }
            weight = data["baseline_weight"] if "baseline_weight" in data else None
            bias = data["baseline_bias"] if "baseline_bias" in data else None
        return cls(
            head=meta["head"], class_order=tuple(meta["class_order"]),
            metric=meta["metric"], missing_distance=meta["missing_distance"],
            alpha=meta["alpha"], d_o=meta["d_o"], centroids=centroids,
            running_centroids=running, encoder_meta=meta["encoder"],
            encoder_params=params, baseline_weight=weight, baseline_bias=bias,
            epoch=meta["epoch"], val_f1=meta["val_f1"],
        )


@dataclass(frozen=True)
class EpochStats:
    epoch: int
    train_f1: float
    val_f1: float
    train_loss: float
    noisy_token_accuracy: float | None


HISTORY_HEADER = "epoch,train_f1,val_f1,train_loss,noisy_token_accuracy"


def write_history_csv(history: Sequence[EpochStats], stream) -> None:
    stream.write(HISTORY_HEADER + "\n")
    for row in history:
        noisy = "" if row.noisy_token_accuracy is None else repr(row.noisy_token_accuracy)
        stream.write(
            f"{row.epoch},{repr(row.train_f1)},{repr(row.val_f1)},"
            f"{repr(row.train_loss)},{noisy}\n"
        )


def read_history_csv(stream) -> list[EpochStats]:
    lines = [line.strip() for line in stream if line.strip()]
    if not lines or lines[0] != HISTORY_HEADER:
        raise ValueError(f"unexpected history header {lines[:1]}")
    history = []
    for line in lines[1:]:
        epoch, train_f1, val_f1, train_loss, noisy = line.split(",")
        history.append(EpochStats(
            epoch=int(epoch),
            train_f1=float(train_f1),
            val_f1=float(val_f1),
            train_loss=float(train_loss),
            noisy_token_accuracy=float(noisy) if noisy else None,
        ))
    return history


@dataclass
class RunResult:
    checkpoint: Checkpoint
    ledger: EventLedger
    history: list[EpochStats]


def build_encoder(config: TrainConfig, seed: int | None = None) -> HashEncoder:
    return HashEncoder(
        output_dim=config.output_dim,
        lookup_dim=config.lookup_dim,
        n_buckets=config.n_buckets,
        window=config.window,
        seed=config.seed if seed is None else seed,
    )


def default_steps_per_epoch(config: TrainConfig, dataset: Dataset) -> int:
    if config.steps_per_epoch is not None:
        return config.steps_per_epoch
    if config.head == "baseline":
        return max(1, math.ceil(dataset.token_count / config.batch_size))
    return max(1, math.ceil(dataset.token_count / (config.s1 + config.s2)))


def exact_centroids(
    dataset: Dataset, encoder: EmbeddingSource,
    pools: dict[str, list[EpisodeItem]] | None = None,
) -> dict[str, np.ndarray]:
    """Centroids from every token in the dataset, grouped by observed class."""
    if pools is None:
        pools = class_pools(dataset)
    support = (
        (encoder.encode(it.sentence, it.token_id), label)
        for label, items in pools.items() if label != OUTSIDE
        for it in items
    )
    return compute_centroids(support)


def _proto_token_eval(
    dataset: Dataset, state: PrototypeState, encoder: EmbeddingSource,
    use_running: bool,
) -> tuple[list[str], np.ndarray]:
    """Per-token predicted labels and cross-entropy losses vs observed tags."""
    working = state.with_centroids(
        state.running_centroids if use_running else state.centroids
    )
    labels = state.labels
    label_index = {lab: i for i, lab in enumerate(labels)}
    preds: list[str] = []
    losses = np.zeros(dataset.token_count)
    for flat, (sid, tid, token) in enumerate(dataset.iter_tokens()):
        x = encoder.encode(dataset.sentences[sid], tid)
        v = distance_vector(x, working)
        p = class_probabilities(v)
        preds.append(labels[int(np.argmin(v.values))])
        gold = label_index.get(entity_class(token.observed_tag))
        losses[flat] = -math.log(max(p[gold], 1e-300)) if gold is not None \
            else -math.log(1e-300)
    return preds, losses


def _baseline_token_eval(
    dataset: Dataset, head: BaselineHead, encoder: EmbeddingSource,
) -> tuple[list[str], np.ndarray]:
    label_index = {lab: i for i, lab in enumerate(head.labels)}
    preds: list[str] = []
    losses = np.zeros(dataset.token_count)
    for flat, (sid, tid, token) in enumerate(dataset.iter_tokens()):
        e = encoder.encode(dataset.sentences[sid], tid)
        probs = baseline_forward(e, head.weight, head.bias)
        preds.append(head.labels[int(np.argmax(probs))])
        gold = label_index.get(entity_class(token.observed_tag))
        losses[flat] = -math.log(max(probs[gold], 1e-300)) if gold is not None \
            else -math.log(1e-300)
    return preds, losses


def _grouped_tags(dataset: Dataset, flat_labels: Sequence[str]) -> list[list[str]]:
    """Reshape flat per-token class labels into per-sentence BIO tags."""
    tags: list[list[str]] = []
    it = iter(flat_labels)
    for sentence in dataset.sentences:
        labels = [next(it) for _ in sentence.tokens]
        tags.append(labels_to_bio(labels))
    return tags


def train_step(
    state: PrototypeState,
    episode: Episode,
    encoder: EmbeddingSource,
    optimizer: AdamW,
    lr: float,
    alpha: float,
) -> float:
    """One prototypical update: loss, gradients, AdamW step, running update."""
    try:
        bundle, batch_centroids = proto_loss(episode, state, encoder)
    except ValueError as exc:
        refs = [(it.sentence_id, it.token_id)
                for it in episode.support + episode.query]
        raise TrainingAborted(f"bad episode: {exc}", refs) from exc
    grads = _unflatten_encoder_grads(encoder, bundle.parameter_gradients)
    grads["d_o"] = np.array([bundle.d_o_gradient])
    optimizer.step(grads, lr)
    update_running_centroids(state, batch_centroids, alpha)
    return bundle.loss_value


def _unflatten_encoder_grads(encoder: EmbeddingSource,
                             flat: np.ndarray) -> dict[str, np.ndarray]:
    grads: dict[str, np.ndarray] = {}
    offset = 0
    arrays = encoder.parameter_arrays()
    for name in sorted(arrays):
        size = arrays[name].size
        grads[name] = flat[offset:offset + size].reshape(arrays[name].shape)
        offset += size
    return grads


def run_training(
    config: TrainConfig, dataset: Dataset, eval_dataset: Dataset
) -> RunResult:
    """Full training run; keeps the checkpoint with the best validation F1."""
    rng = np.random.default_rng(config.seed)
    encoder = build_encoder(config)
    return run_training_with_encoder(config, dataset, eval_dataset, encoder, rng)


def run_training_with_encoder(
    config: TrainConfig,
    dataset: Dataset,
    eval_dataset: Dataset,
    encoder: EmbeddingSource,
    rng: np.random.Generator,
    eval_encoder: EmbeddingSource | None = None,
) -> RunResult:
    # Frozen precomputed sources are bound to one corpus, so evaluation may
    # need its own source; the trainable encoder serves both.
    if eval_encoder is None:
        eval_encoder = encoder
    class_order = dataset.entity_classes
    state = PrototypeState.create(
        class_order, d_o=config.d_o_init, metric=config.metric,
        missing_distance=config.missing_distance,
    )
    head = BaselineHead.create(state.labels, encoder.output_dim,
                               seed=config.seed + 1)
    params = dict(encoder.parameter_arrays())
    if config.head == "proto":
        params["d_o"] = state.d_o_param
    else:
        params["baseline_weight"] = head.weight
        params["baseline_bias"] = head.bias
    optimizer = AdamW(params, weight_decay=config.weight_decay,
                      decay_exempt=("d_o", "bias", "baseline_bias"))

    pools = class_pools(dataset)
    flat_items = [it for label in sorted(pools) for it in pools[label]]
    steps_per_epoch = default_steps_per_epoch(config, dataset)
    total_steps = config.epochs * steps_per_epoch

    example_ids = [f"{sid}:{tid}" for sid, tid, _ in dataset.iter_tokens()]
    mask = dataset.noise_mask()
    ledger = EventLedger(example_ids=example_ids,
                         noise_mask=mask if any(mask) else None)
    history: list[EpochStats] = []
    best: Checkpoint | None = None

    observed_classes = [entity_class(t.observed_tag)
                        for _, _, t in dataset.iter_tokens()]
    gold_classes = [entity_class(t.gold_tag)
                    for _, _, t in dataset.iter_tokens()]
    observed_tags = dataset.observed_tags()
    eval_gold_tags = eval_dataset.gold_tags()

    step = 0
    for epoch in range(1, config.epochs + 1):
        for _ in range(steps_per_epoch):
            step += 1
            lr = warmup_lr(config.learning_rate, step, total_steps,
                           config.warmup_fraction)
            if config.head == "proto":
                episode = sample_episode(
                    dataset, config.s1, config.s2, config.n,
                    config.minority_classes, rng, pools=pools,
                )
                train_step(state, episode, encoder, optimizer, lr, config.alpha)
            else:
                batch = _draw(flat_items, config.batch_size, rng)
                loss, g_w, g_b, enc_grads = baseline_loss(batch, head, encoder)
                if not np.isfinite(loss):
                    raise TrainingAborted(
                        "non-finite baseline loss",
                        [(it.sentence_id, it.token_id) for it in batch],
                    )
                enc_grads["baseline_weight"] = g_w
                enc_grads["baseline_bias"] = g_b
                optimizer.step(enc_grads, lr)

        if config.head == "proto":
            state.centroids = exact_centroids(dataset, encoder, pools)
            train_preds, losses = _proto_token_eval(
                dataset, state, encoder, config.use_running_centroids)
            val_preds, _ = _proto_token_eval(
                eval_dataset, state, eval_encoder, config.use_running_centroids)
        else:
            train_preds, losses = _baseline_token_eval(dataset, head, encoder)
            val_preds, _ = _baseline_token_eval(eval_dataset, head, eval_encoder)

        ledger.record(
            epoch,
            [p == c for p, c in zip(train_preds, observed_classes)],
            [p == c for p, c in zip(train_preds, gold_classes)],
            losses,
        )
        train_f1 = entity_prf1(_grouped_tags(dataset, train_preds),
                               observed_tags).f1
        val_f1 = entity_prf1(_grouped_tags(eval_dataset, val_preds),
                             eval_gold_tags).f1
        noisy_acc = None
        if ledger.noise_mask is not None:
            noisy_acc = noisy_token_accuracy(train_preds, dataset).observed
        history.append(EpochStats(epoch, train_f1, val_f1,
                                  float(losses.mean()), noisy_acc))
        if best is None or val_f1 > best.val_f1:
            best = _snapshot(config, state, head, encoder, epoch, val_f1)

    if best is None:  # epochs == 0: return the initial state
        best = _snapshot(config, state, head, encoder, 0, 0.0)
    return RunResult(checkpoint=best, ledger=ledger, history=history)


def _snapshot(config: TrainConfig, state: PrototypeState, head: BaselineHead,
              encoder: EmbeddingSource, epoch: int, val_f1: float) -> Checkpoint:
    if isinstance(encoder, HashEncoder):
        meta = {"kind": "hash", "output_dim": encoder.output_dim,
                "lookup_dim": encoder.lookup_dim, "n_buckets": encoder.n_buckets,
                "window": encoder.window}
        enc_params = {k: v.copy() for k, v in
                      (("lookup", encoder.lookup), ("weight", encoder.weight),
                       ("bias", encoder.bias))}
    else:
        meta = {"kind": "precomputed", "output_dim": encoder.output_dim}
        enc_params = {}
    return Checkpoint(
        head=config.head,
        class_order=state.class_order,
        metric=state.metric,
        missing_distance=state.missing_distance,
        alpha=config.alpha,
        d_o=state.d_o,
        centroids={k: v.copy() for k, v in state.centroids.items()},
        running_centroids={k: v.copy() for k, v in state.running_centroids.items()},
        encoder_meta=meta,
        encoder_params=enc_params,
        baseline_weight=head.weight.copy() if config.head == "baseline" else None,
        baseline_bias=head.bias.copy() if config.head == "baseline" else None,
        epoch=epoch,
        val_f1=val_f1,
    )
