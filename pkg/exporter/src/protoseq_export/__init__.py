"""Per-token contextual embedding export in the protoseq-emb v1 format."""

from .export import (
    AlignmentError,
    ExportError,
    ExportStats,
    encode_corpus,
    export_embeddings,
    read_corpus_tokens,
    write_embeddings_file,
)

__version__ = "0.1.0"
