"""CoNLL-style column corpora: parsing, serialization, and BIO span extraction.

The on-disk format is one token per line with whitespace-separated columns,
a blank line between sentences, and ``-DOCSTART-`` lines marking document
boundaries. Tags use the BIO scheme internally; IOB1-style input (where an
entity may open with ``I-X``) is normalized to BIO at parse time.

A dataset may carry a noise mask: a sidecar file with one line per token,
``0`` for untouched tokens and ``1 <gold_tag>`` for tokens whose observed
tag was corrupted. Datasets are immutable once built.
"""
from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Iterable, Iterator, Sequence

_TAG_RE = re.compile(r"^[BI]-\S+$")

OUTSIDE = "O"


class ParseError(ValueError):
    """Malformed corpus or sidecar input."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class TagError(ValueError):
    """A tag string that is neither O nor B-X/I-X."""


def split_tag(tag: str) -> tuple[str, str | None]:
    """Split a tag into its BIO prefix and entity type.

    ``"B-LOC"`` -> ``("B", "LOC")``, ``"O"`` -> ``("O", None)``.
    Raises TagError for anything else.
    """
    if tag == OUTSIDE:
        return OUTSIDE, None
    if not _TAG_RE.match(tag):
        raise TagError(f"unknown tag {tag!r}")
    prefix, etype = tag.split("-", 1)
    return prefix, etype


def entity_class(tag: str) -> str:
    """Entity type of a tag, with O mapping to itself."""
    _, etype = split_tag(tag)
    return OUTSIDE if etype is None else etype


@dataclass(frozen=True)
class Token:
    surface: str
    gold_tag: str
    observed_tag: str
    is_noisy: bool = False


@dataclass(frozen=True)
class Sentence:
    tokens: tuple[Token, ...]
    doc_boundary: bool = False
    index: int = -1

    def __len__(self) -> int:
        return len(self.tokens)


@dataclass(frozen=True)
class EntitySpan:
    entity_type: str
    start: int
    end: int  # exclusive
    sentence_id: int = 0


@dataclass(frozen=True)
class Dataset:
    sentences: tuple[Sentence, ...]
    tag_inventory: tuple[str, ...]
    entity_classes: tuple[str, ...]
    provenance: tuple[dict, ...] = ()

    def iter_tokens(self) -> Iterator[tuple[int, int, Token]]:
        """Yield (sentence_id, token_id, token) in canonical corpus order."""
        for sid, sentence in enumerate(self.sentences):
            for tid, token in enumerate(sentence.tokens):
                yield sid, tid, token

    @property
    def token_count(self) -> int:
        return sum(len(s) for s in self.sentences)

    def noise_mask(self) -> list[bool]:
        return [tok.is_noisy for _, _, tok in self.iter_tokens()]

    @property
    def has_noise(self) -> bool:
        return any(self.noise_mask())

    def observed_tags(self) -> list[list[str]]:
        return [[t.observed_tag for t in s.tokens] for s in self.sentences]

    def gold_tags(self) -> list[list[str]]:
        return [[t.gold_tag for t in s.tokens] for s in self.sentences]


@dataclass(frozen=True)
class ColumnSpec:
    """Which columns hold the token surface and the tag (python indexing)."""

    token: int = 0
    tag: int = -1


def _normalize_bio(tags: list[str]) -> list[str]:
    """Rewrite IOB1-style tags to BIO: an I-X opening an entity becomes B-X."""
    out = []
    prev_type = None
    for tag in tags:
        prefix, etype = split_tag(tag)
        if prefix == "I" and etype != prev_type:
            tag = "B-" + etype
        out.append(tag)
        prev_type = etype
    return out


def parse_conll(
    stream: Iterable[str],
    column_spec: ColumnSpec | None = None,
    noise_mask: Sequence[tuple[bool, str | None]] | None = None,
    normalize_scheme: bool | None = None,
) -> Dataset:
    """Parse a column-format corpus into a Dataset.

    Args:
        stream: iterable of lines (an open file works).
        column_spec: token/tag column indices; defaults to first/last column.
        noise_mask: per-token (is_noisy, gold_tag) entries from a sidecar.
            When given, tags are read verbatim (corrupted tags may violate
            BIO well-formedness on purpose).
        normalize_scheme: force tag-scheme normalization on/off; default is
            on without a mask, off with one.

    Raises:
        ParseError: wrong column count, bad tag, mask misalignment, or an
            empty corpus.
    """
    spec = column_spec or ColumnSpec()
    if normalize_scheme is None:
        normalize_scheme = noise_mask is None

    sentences: list[Sentence] = []
    surfaces: list[str] = []
    raw_tags: list[str] = []
    expected_cols: int | None = None

    def flush() -> None:
        nonlocal surfaces, raw_tags
        if not surfaces:
            return
        tags = _normalize_bio(raw_tags) if normalize_scheme else list(raw_tags)
        tokens = tuple(
            Token(surface=w, gold_tag=t, observed_tag=t)
            for w, t in zip(surfaces, tags)
        )
        sentences.append(Sentence(tokens=tokens, index=len(sentences)))
        surfaces, raw_tags = [], []

    for lineno, raw_line in enumerate(stream, start=1):
        line = raw_line.rstrip("\n").rstrip("\r")
        if not line.strip():
            flush()
            continue
        fields = line.split()
        if fields[0] == "-DOCSTART-":
            flush()
            sentences.append(
                Sentence(tokens=(), doc_boundary=True, index=len(sentences))
            )
            continue
        if expected_cols is None:
            expected_cols = len(fields)
        elif len(fields) != expected_cols:
            raise ParseError(
                f"expected {expected_cols} columns, got {len(fields)}", lineno
            )
        try:
            surface = fields[spec.token]
            tag = fields[spec.tag]
        except IndexError:
            raise ParseError(
                f"column spec {spec} out of range for {len(fields)} columns",
                lineno,
            ) from None
        try:
            split_tag(tag)
        except TagError as exc:
            raise ParseError(str(exc), lineno) from None
        surfaces.append(surface)
        raw_tags.append(tag)
    flush()

    dataset = _build_dataset(sentences)
    if dataset.token_count == 0:
        raise ParseError("empty corpus")
    if noise_mask is not None:
        dataset = apply_noise_mask(dataset, noise_mask)
    return dataset


def _build_dataset(sentences: list[Sentence], provenance: tuple = ()) -> Dataset:
    seen = {OUTSIDE}
    for sentence in sentences:
        for token in sentence.tokens:
            seen.add(token.observed_tag)
            seen.add(token.gold_tag)
    inventory = (OUTSIDE,) + tuple(sorted(seen - {OUTSIDE}))
    classes = tuple(sorted({entity_class(t) for t in inventory} - {OUTSIDE}))
    return Dataset(
        sentences=tuple(sentences),
        tag_inventory=inventory,
        entity_classes=classes,
        provenance=provenance,
    )


def rebuild(sentences: list[Sentence], provenance: tuple = ()) -> Dataset:
    """Build a Dataset from already-constructed sentences (reindexes them)."""
    reindexed = [
        Sentence(tokens=s.tokens, doc_boundary=s.doc_boundary, index=i)
        for i, s in enumerate(sentences)
    ]
    return _build_dataset(reindexed, provenance)


def apply_noise_mask(
    dataset: Dataset, mask: Sequence[tuple[bool, str | None]]
) -> Dataset:
    """Attach sidecar noise information to a freshly parsed dataset."""
    if len(mask) != dataset.token_count:
        raise ParseError(
            f"noise mask has {len(mask)} entries for {dataset.token_count} tokens"
        )
    entries = iter(mask)
    sentences = []
    for sentence in dataset.sentences:
        tokens = []
        for token in sentence.tokens:
            noisy, gold = next(entries)
            if noisy:
                tokens.append(
                    Token(
                        surface=token.surface,
                        gold_tag=gold if gold is not None else token.observed_tag,
                        observed_tag=token.observed_tag,
                        is_noisy=True,
                    )
                )
            else:
                tokens.append(token)
        sentences.append(
            Sentence(tokens=tuple(tokens), doc_boundary=sentence.doc_boundary,
                     index=sentence.index)
        )
    return _build_dataset(sentences, dataset.provenance)


def serialize_conll(dataset: Dataset, stream) -> None:
    """Write the dataset back in the two-column input format.

    Emits the observed tag column; parse(serialize(ds)) reproduces the
    dataset model (together with the noise-mask sidecar when one exists).
    """
    for sentence in dataset.sentences:
        if sentence.doc_boundary:
            stream.write(f"-DOCSTART- {OUTSIDE}\n\n")
            continue
        for token in sentence.tokens:
            stream.write(f"{token.surface} {token.observed_tag}\n")
        stream.write("\n")


def write_noise_mask(dataset: Dataset, stream) -> None:
    """Write the sidecar: one line per token, ``0`` or ``1 <gold_tag>``."""
    for _, _, token in dataset.iter_tokens():
        if token.is_noisy:
            stream.write(f"1 {token.gold_tag}\n")
        else:
            stream.write("0\n")


def read_noise_mask(stream: Iterable[str]) -> list[tuple[bool, str | None]]:
    entries: list[tuple[bool, str | None]] = []
    for lineno, raw_line in enumerate(stream, start=1):
        line = raw_line.strip()
        if not line:
            continue
        fields = line.split()
        if fields[0] == "0":
            entries.append((False, None))
        elif fields[0] == "1":
            if len(fields) < 2:
                raise ParseError("mask line marks noise but lacks a gold tag",
                                 lineno)
            entries.append((True, fields[1]))
        else:
            raise ParseError(f"mask line must start with 0 or 1, got {fields[0]!r}",
                             lineno)
    return entries


def load_conll(path, mask_path=None, column_spec: ColumnSpec | None = None) -> Dataset:
    """Parse a corpus file, with an optional noise-mask sidecar."""
    mask = None
    if mask_path is not None:
        with open(mask_path, encoding="utf-8") as fh:
            mask = read_noise_mask(fh)
    with open(path, encoding="utf-8") as fh:
        return parse_conll(fh, column_spec=column_spec, noise_mask=mask)


def save_conll(dataset: Dataset, path, mask_path=None) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        serialize_conll(dataset, fh)
    if mask_path is not None:
        with open(mask_path, "w", encoding="utf-8") as fh:
            write_noise_mask(dataset, fh)


def extract_entities(tags: Sequence[str], sentence_id: int = 0) -> list[EntitySpan]:
    """Decode BIO tags into entity spans.

    A span starts at ``B-X``, or at an ``I-X`` that does not continue a
    span of type X (the standard repair for malformed sequences), runs
    through consecutive ``I-X``, and ends before any other tag.
    """
    spans: list[EntitySpan] = []
    open_type: str | None = None
    open_start = 0
    for i, tag in enumerate(tags):
        prefix, etype = split_tag(tag)
        if prefix == "I" and etype == open_type:
            continue
        if open_type is not None:
            spans.append(EntitySpan(open_type, open_start, i, sentence_id))
            open_type = None
        if prefix in ("B", "I"):
            open_type = etype
            open_start = i
    if open_type is not None:
        spans.append(EntitySpan(open_type, open_start, len(tags), sentence_id))
    return spans


def labels_to_bio(labels: Sequence[str]) -> list[str]:
    """Turn per-token class labels (entity types or O) into BIO tags.

    Each maximal run of one type becomes a single entity: B-X at the run
    start, I-X inside.
    """
    tags = []
    prev = OUTSIDE
    for label in labels:
        if label == OUTSIDE:
            tags.append(OUTSIDE)
        elif label == prev:
            tags.append("I-" + label)
        else:
            tags.append("B-" + label)
        prev = label
    return tags
