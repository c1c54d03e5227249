"""Shared test utilities: synthetic corpora and independent oracles.

The oracles here deliberately use different formulations than the library
code they check (relation-based span grouping, naive per-candidate
objective scans, plain-Python recounts).
"""
from __future__ import annotations

import io

import numpy as np

from protoseq.corpus import Dataset, parse_conll
from protoseq.encoder import PrecomputedEmbeddings, write_embeddings


def fd_gradient(fn, flat, eps=1e-5):
    """Central finite differences of a scalar function of a flat vector.

    The step balances truncation against roundoff so that components down
    to ~1e-7 are resolvable at 1e-4 relative error for O(1) outputs.
    """
    grad = np.zeros_like(flat)
    for i in range(flat.size):
        bumped = flat.copy()
        bumped[i] += eps
        up = fn(bumped)
        bumped[i] -= 2 * eps
        down = fn(bumped)
        grad[i] = (up - down) / (2 * eps)
    return grad


def rel_err(a, b):
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-6)
    return np.max(np.abs(a - b) / denom)


def grad_close(analytic, numeric, rtol=1e-4, floor=1e-7):
    """True when gradients agree to rtol, with an absolute floor.

    Components where both values sit below ``floor`` are at the
    finite-difference noise level (machine epsilon / step size) and are
    required to agree absolutely rather than relatively.
    """
    analytic = np.asarray(analytic, float)
    numeric = np.asarray(numeric, float)
    diff = np.abs(analytic - numeric)
    denom = np.maximum(np.abs(analytic), np.abs(numeric))
    ok = (diff <= rtol * denom) | ((denom <= floor) & (diff <= floor))
    return bool(np.all(ok))


def bio_spans_oracle(tags):
    """Span decoding by pairwise-link grouping, independent of the library.

    Position i links to i-1 iff tags[i] is I-X and tags[i-1] has type X;
    spans are the maximal linked runs of non-O positions.
    """
    def tag_type(tag):
        return None if tag == "O" else tag.split("-", 1)[1]

    def linked(i):
        if i == 0 or not tags[i].startswith("I-"):
            return False
        return tag_type(tags[i - 1]) == tag_type(tags[i])

    spans = []
    i = 0
    while i < len(tags):
        if tags[i] == "O":
            i += 1
            continue
        start = i
        i += 1
        while i < len(tags) and linked(i):
            i += 1
        spans.append((tag_type(tags[start]), start, i))
    return spans


def random_tagged_sequence(rng, types, max_len=12):
    tags = ["O"] + [f"{p}-{t}" for t in types for p in ("B", "I")]
    length = int(rng.integers(0, max_len + 1))
    return [tags[rng.integers(len(tags))] for _ in range(length)]


def make_corpus_text(sentences):
    """Render [(surface, tag), ...] sentences as column text."""
    chunks = []
    for sentence in sentences:
        chunks.append("\n".join(f"{w} {t}" for w, t in sentence))
    return "\n\n".join(chunks) + "\n"


def parse_text(text, **kwargs):
    return parse_conll(io.StringIO(text), **kwargs)


def random_corpus(rng, n_sentences=50, types=("LOC", "PER", "ORG")):
    """Random BIO-well-formed corpus for round-trip checks."""
    sentences = []
    for _ in range(n_sentences):
        length = int(rng.integers(1, 9))
        tags = []
        open_type = None
        for _ in range(length):
            roll = rng.random()
            if open_type is not None and roll < 0.4:
                tags.append(f"I-{open_type}")
                continue
            if roll < 0.55:
                open_type = types[rng.integers(len(types))]
                tags.append(f"B-{open_type}")
            else:
                open_type = None
                tags.append("O")
        words = [f"w{rng.integers(100)}" for _ in tags]
        sentences.append(list(zip(words, tags)))
    return make_corpus_text(sentences)


def cluster_corpus(
    rng,
    classes=("C0", "C1", "C2", "C3"),
    tokens_per_class=40,
    o_tokens=160,
    vocab_per_class=10,
    sentence_len=8,
):
    """Corpus whose surfaces are class-specific, so classes are separable.

    Each sentence is homogeneous (all tokens share one class, or all are O
    fillers), keeping context-window pooling inside the class vocabulary.
    Sentence order is shuffled.
    """
    sentences = []
    for cls in classes:
        words = [f"{cls.lower()}_{rng.integers(vocab_per_class)}"
                 for _ in range(tokens_per_class)]
        for i in range(0, len(words), sentence_len):
            chunk = words[i:i + sentence_len]
            sentences.append([(w, f"B-{cls}") for w in chunk])
    fillers = [f"filler_{rng.integers(vocab_per_class * 2)}"
               for _ in range(o_tokens)]
    for i in range(0, len(fillers), sentence_len):
        sentences.append([(w, "O") for w in fillers[i:i + sentence_len]])
    order = rng.permutation(len(sentences))
    return make_corpus_text([sentences[i] for i in order])


def interleaved_corpus(rng, class_counts: dict, o_tokens=100, sentence_len=8):
    """Corpus of single-token entities separated by O fillers.

    ``class_counts`` maps entity class -> number of labeled instances.
    Entities never touch, so per-token class predictions re-emit the gold
    span structure exactly.
    """
    entities = [(f"{cls.lower()}_{i}", f"B-{cls}")
                for cls, count in class_counts.items() for i in range(count)]
    order = rng.permutation(len(entities))
    entities = [entities[i] for i in order]
    fillers = [(f"o_{i}", "O") for i in range(o_tokens)]
    if len(fillers) < len(entities) + 1:
        raise ValueError("need at least one filler per entity")
    tokens = []
    gaps = np.sort(rng.choice(len(fillers) - 1, size=len(entities),
                              replace=False))
    next_entity = 0
    for fi, filler in enumerate(fillers):
        tokens.append(filler)
        while next_entity < len(entities) and next_entity < len(gaps) \
                and gaps[next_entity] == fi:
            tokens.append(entities[next_entity])
            next_entity += 1
    sentences = [tokens[i:i + sentence_len]
                 for i in range(0, len(tokens), sentence_len)]
    # keep entities single: a sentence break between B-X and a filler is fine
    return make_corpus_text([s for s in sentences if s])


def gaussian_embeddings(
    rng,
    dataset: Dataset,
    dim=8,
    spread=0.15,
    center_scale=3.0,
    centers=None,
):
    """Frozen embeddings with one Gaussian cluster per class.

    Cluster centers are random but well separated relative to the spread;
    pass the returned ``centers`` back in to embed a second corpus into the
    same space. A token's vector depends on its GOLD class, so injected
    label noise does not move points.
    """
    from protoseq.corpus import entity_class

    if centers is None:
        classes = ["O"] + list(dataset.entity_classes)
        centers = {c: rng.normal(0.0, center_scale, size=dim) for c in classes}
    by_sentence = {}
    rows = []
    for sid, sentence in enumerate(dataset.sentences):
        if not sentence.tokens:
            continue
        block = np.zeros((len(sentence.tokens), dim))
        for tid, token in enumerate(sentence.tokens):
            cls = entity_class(token.gold_tag)
            block[tid] = centers[cls] + rng.normal(0.0, spread, size=dim)
            rows.append((sid, tid, block[tid]))
        by_sentence[sid] = block
    source = PrecomputedEmbeddings(output_dim=dim, by_sentence=by_sentence)
    return source, rows, centers


def embeddings_file_text(rows, dim):
    buf = io.StringIO()
    write_embeddings(buf, rows, count=len(rows), dim=dim)
    return buf.getvalue()


def events_oracle(matrix):
    """Plain-Python recount of learning/forgetting events per example."""
    t_count = len(matrix)
    n = len(matrix[0]) if t_count else 0
    learning = [0] * n
    forgetting = [0] * n
    first = [-1] * n
    for i in range(n):
        prev = False
        for t in range(t_count):
            cur = bool(matrix[t][i])
            if cur and not prev:
                learning[i] += 1
                if first[i] < 0:
                    first[i] = t + 1
            if prev and not cur:
                forgetting[i] += 1
            prev = cur
    return learning, forgetting, first


def objective_oracle(losses, threshold):
    below = [x for x in losses if x < threshold]
    above = [x for x in losses if x >= threshold]
    obj = 0.0
    if below:
        mu = sum(below) / len(below)
        obj += sum((x - mu) ** 2 for x in below)
    if above:
        mu = sum(above) / len(above)
        obj += sum((x - mu) ** 2 for x in above)
    return obj


def exhaustive_detector_oracle(losses):
    """Quadratic-time scan of every midpoint candidate."""
    distinct = sorted(set(losses))
    best_t, best_obj = None, None
    for lo, hi in zip(distinct, distinct[1:]):
        t = (lo + hi) / 2
        obj = objective_oracle(losses, t)
        if best_obj is None or obj < best_obj - 1e-12:
            best_t, best_obj = t, obj
    return best_t, best_obj


def toy_episode(encoder, classes=("A", "B", "C"), per_class=2, n_query=4,
                seed=0):
    """Episode over a small corpus with class-coded surfaces."""
    from protoseq.proto import Episode, EpisodeItem

    rng = np.random.default_rng(seed)
    lines = []
    labels = []
    for cls in classes:
        for i in range(per_class + 2):
            lines.append(f"{cls.lower()}{i} B-{cls}")
            labels.append(cls)
    for i in range(4):
        lines.append(f"o{i} O")
        labels.append("O")
    ds = parse_text("\n".join(lines) + "\n")
    sentence = ds.sentences[0]
    items = [EpisodeItem(sentence, 0, t, labels[t]) for t in range(len(labels))]
    rng.shuffle(items)
    support, query = [], []
    seen = {}
    for item in items:
        if seen.get(item.label, 0) < per_class:
            support.append(item)
            seen[item.label] = seen.get(item.label, 0) + 1
        elif len(query) < n_query:
            query.append(item)
    return Episode(support=tuple(support), query=tuple(query), s1=per_class,
                   s2=per_class, n=1.0)
