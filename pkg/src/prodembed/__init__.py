"""Product embeddings from browsing logs and side information, with downstream evaluations."""

from .core import (
    ConfigError,
    DataError,
    DegenerateInputError,
    EmbeddingTable,
    FormatError,
    IntegrityError,
    NotFoundError,
    ProdEmbedError,
    ProductRecord,
    UsageError,
    cosine_similarity,
    load_table,
    save_table,
    top_k_neighbors,
)

__version__ = "0.1.0"
