"""Per-token contextual embedding export.

Runs any locally available pretrained transformer (anything loadable via
``AutoModel``/``AutoTokenizer``) over a CoNLL-style column corpus and
writes one vector per corpus token in the ``protoseq-emb v1`` format:

    protoseq-emb v1 <count> <dim>
    <sentence_id> <token_id> <dim floats>
    ...

Rows follow corpus iteration order (sentences in file order, tokens in
order; blank lines separate sentences; ``-DOCSTART-`` lines mark document
boundaries and contribute no rows). Subword pieces are pooled to one
vector per token, by first-piece selection (default) or mean pooling.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable

import numpy as np

EMB_HEADER = "protoseq-emb v1"


class ExportError(RuntimeError):
    pass


class AlignmentError(ExportError):
    """A corpus token received no subword pieces from the tokenizer."""


@dataclass(frozen=True)
class ExportStats:
    sentences: int
    tokens: int
    dim: int


def read_corpus_tokens(stream: Iterable[str], token_column: int = 0) -> list[list[str]]:
    """Token surfaces per sentence, in the primary toolkit's iteration order.

    ``-DOCSTART-`` markers occupy a sentence-id slot but carry no tokens,
    exactly as the primary parser numbers them; they appear here as empty
    lists so row sentence_ids line up.
    """
    sentences: list[list[str]] = []
    current: list[str] = []

    def flush():
        nonlocal current
        if current:
            sentences.append(current)
            current = []

    for lineno, raw in enumerate(stream, start=1):
        line = raw.strip()
        if not line:
            flush()
            continue
        fields = line.split()
        if fields[0] == "-DOCSTART-":
            flush()
            sentences.append([])
            continue
        try:
            current.append(fields[token_column])
        except IndexError:
            raise ExportError(
                f"line {lineno}: token column {token_column} out of range"
            ) from None
    flush()
    if not any(sentences):
        raise ExportError("empty corpus")
    return sentences


def _pool(pieces: "torch.Tensor", mode: str) -> "torch.Tensor":
    if mode == "first":
        return pieces[0]
    if mode == "mean":
        return pieces.mean(dim=0)
    raise ExportError(f"unknown pooling mode {mode!r}")


def encode_corpus(
    sentences: list[list[str]],
    model_name: str,
    layer: int = -1,
    pooling: str = "first",
    batch_size: int = 16,
) -> list[np.ndarray | None]:
    """One (n_tokens, dim) float64 array per sentence slot (None if empty)."""
    import torch
    from transformers import AutoModel, AutoTokenizer

    tokenizer = AutoTokenizer.from_pretrained(model_name, use_fast=True)
    if not getattr(tokenizer, "is_fast", False):
        raise ExportError(
            f"{model_name} has no fast tokenizer; word-level alignment "
            "needs one"
        )
    model = AutoModel.from_pretrained(model_name)
    model.eval()

    blocks: list[np.ndarray | None] = [None] * len(sentences)
    todo = [(sid, words) for sid, words in enumerate(sentences) if words]
    with torch.no_grad():
        for start in range(0, len(todo), batch_size):
            chunk = todo[start:start + batch_size]
            encoded = tokenizer([words for _, words in chunk],
                                is_split_into_words=True, padding=True,
                                return_tensors="pt")
            outputs = model(**encoded, output_hidden_states=True)
            hidden = outputs.hidden_states[layer]
            for i, (sid, words) in enumerate(chunk):
                word_ids = encoded.word_ids(i)
                by_word: dict[int, list[int]] = {}
                for pos, wid in enumerate(word_ids):
                    if wid is not None:
                        by_word.setdefault(wid, []).append(pos)
                vectors = []
                for wid in range(len(words)):
                    positions = by_word.get(wid)
                    if not positions:
                        raise AlignmentError(
                            f"sentence {sid}: token {wid} ({words[wid]!r}) "
                            "produced no subword pieces"
                        )
                    vectors.append(_pool(hidden[i, positions], pooling))
                blocks[sid] = torch.stack(vectors).to(torch.float64).cpu().numpy()
    return blocks


def write_embeddings_file(blocks: list[np.ndarray | None], stream) -> ExportStats:
    real = [b for b in blocks if b is not None]
    count = sum(b.shape[0] for b in real)
    dim = real[0].shape[1]
    stream.write(f"{EMB_HEADER} {count} {dim}\n")
    for sid, block in enumerate(blocks):
        if block is None:
            continue
        for tid in range(block.shape[0]):
            values = " ".join(repr(float(x)) for x in block[tid])
            stream.write(f"{sid} {tid} {values}\n")
    return ExportStats(sentences=len(real), tokens=count, dim=dim)


def export_embeddings(
    corpus_path: str,
    model_name: str,
    output_path: str,
    layer: int = -1,
    pooling: str = "first",
    batch_size: int = 16,
    token_column: int = 0,
) -> ExportStats:
    """Run the encoder over the corpus and write the embeddings file."""
    with open(corpus_path, encoding="utf-8") as fh:
        sentences = read_corpus_tokens(fh, token_column=token_column)
    blocks = encode_corpus(sentences, model_name, layer=layer,
                           pooling=pooling, batch_size=batch_size)
    with open(output_path, "w", encoding="utf-8") as fh:
        return write_embeddings_file(blocks, fh)
