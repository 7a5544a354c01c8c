"""Frozen word-level encoding: tokens to vectors to per-message means.

The message transformer only ever sees one vector per message: the
arithmetic mean of that message's per-token vectors. Two sources are
provided — a deterministic hash-embedding table, and an ingestion path for
vectors computed externally (one vector per message id). Both sides of the
pipeline (the reconstruction label and the model input) read the same
pooled vector through the same code path.

For fine-tuning with an unfrozen word level, thin trainable wrappers expose
the same per-message vectors as autodiff tensors: gradients flow into the
hash table itself, or into a d x d adapter over precomputed vectors.
"""

from __future__ import annotations

import string
from dataclasses import dataclass
from typing import Dict, Iterable, List, Mapping, Sequence

import numpy as np

from .tensor import Tensor, gather_rows, matmul, segment_mean

EMPTY_TOKEN = "<empty>"
DEFAULT_TOKEN_SEQ_LEN = 50

_PUNCT = set(string.punctuation)


@dataclass
class TokenSequence:
    tokens: List[str]
    truncated: bool = False

    def __len__(self) -> int:
        return len(self.tokens)


def tokenize(text: str, max_tokens: int = DEFAULT_TOKEN_SEQ_LEN) -> TokenSequence:
    """Lowercase, split on whitespace, break punctuation into single tokens.

    Empty or whitespace-only text yields the single ``<empty>`` token so a
    message always has at least one vector to pool.
    """
    tokens: List[str] = []
    for piece in text.lower().split():
        run = []
        for ch in piece:
            if ch in _PUNCT:
                if run:
                    tokens.append("".join(run))
                    run = []
                tokens.append(ch)
            else:
                run.append(ch)
        if run:
            tokens.append("".join(run))
    if not tokens:
        return TokenSequence([EMPTY_TOKEN])
    if len(tokens) > max_tokens:
        return TokenSequence(tokens[:max_tokens], truncated=True)
    return TokenSequence(tokens)


_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3
_MASK64 = 0xFFFFFFFFFFFFFFFF


def fnv1a_64(token: str) -> int:
    """FNV-1a over the token's UTF-8 bytes; stable across runs and platforms."""
    h = _FNV_OFFSET
    for byte in token.encode("utf-8"):
        h ^= byte
        h = (h * _FNV_PRIME) & _MASK64
    return h


class HashEmbeddingEncoder:
    """Fixed random embedding table addressed by a stable string hash.

    The table is drawn once from a seeded Gaussian scaled by 1/sqrt(dim) and
    never updated during pre-training; encoding is a pure function of the
    tokens.
    """

    frozen = True

    def __init__(self, dim: int = 768, buckets: int = 65536, seed: int = 1337):
        if dim < 1 or buckets < 1:
            raise ValueError("dim and buckets must be positive")
        self.dim = dim
        self.buckets = buckets
        self.seed = seed
        rng = np.random.default_rng(seed)
        self.table = (rng.standard_normal((buckets, dim)) / np.sqrt(dim)).astype(np.float32)

    def token_ids(self, toks: TokenSequence) -> np.ndarray:
        return np.array([fnv1a_64(t) % self.buckets for t in toks.tokens], dtype=np.int64)

    def encode(self, toks: TokenSequence) -> np.ndarray:
        """One row per token, in token order."""
        return self.table[self.token_ids(toks)]


def pool_message(vectors: np.ndarray) -> np.ndarray:
    """Elementwise arithmetic mean of a message's per-token vectors."""
    arr = np.asarray(vectors)
    if arr.ndim != 2 or arr.shape[0] == 0:
        raise ValueError(f"pool_message needs a nonempty (n, d) array, got shape {arr.shape}")
    return arr.mean(axis=0)


def message_vector(encoder: HashEmbeddingEncoder, text: str) -> np.ndarray:
    """tokenize -> encode -> mean; the single path both labels and inputs use."""
    return pool_message(encoder.encode(tokenize(text)))


# ---------------------------------------------------------------------------
# precomputed vector ingestion
# ---------------------------------------------------------------------------


class VectorFileError(ValueError):
    """Malformed vector file; message carries the offending line number."""


class PrecomputedVectorStore:
    """Per-message vectors produced externally, keyed by message id."""

    frozen = True

    def __init__(self, dim: int, vectors: Dict[str, np.ndarray]):
        self.dim = dim
        self.vectors = vectors

    def __len__(self) -> int:
        return len(self.vectors)

    def __contains__(self, message_id: str) -> bool:
        return message_id in self.vectors

    def get(self, message_id: str) -> np.ndarray:
        try:
            return self.vectors[message_id]
        except KeyError:
            raise KeyError(f"no precomputed vector for message id '{message_id}'") from None


def write_vector_file(path, dim: int, items: Iterable[tuple]) -> None:
    """Write `#dim=<d>` then one `id TAB hex(little-endian float32s)` per line."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"#dim={dim}\n")
        for message_id, vec in items:
            data = np.asarray(vec, dtype="<f4")
            if data.shape != (dim,):
                raise ValueError(f"vector for '{message_id}' has shape {data.shape}, want ({dim},)")
            fh.write(f"{message_id}\t{data.tobytes().hex()}\n")


def load_precomputed(path) -> PrecomputedVectorStore:
    """Parse a vector file; bad rows raise with their 1-based line number."""
    vectors: Dict[str, np.ndarray] = {}
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().rstrip("\n")
        if not header.startswith("#dim="):
            raise VectorFileError("line 1: expected '#dim=<d>' header")
        try:
            dim = int(header[5:])
        except ValueError:
            raise VectorFileError(f"line 1: bad dimension in header {header!r}") from None
        if dim < 1:
            raise VectorFileError(f"line 1: dimension must be positive, got {dim}")
        for lineno, line in enumerate(fh, start=2):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise VectorFileError(f"line {lineno}: expected 'id<TAB>hex'")
            message_id, hexdata = parts
            try:
                raw = bytes.fromhex(hexdata)
            except ValueError:
                raise VectorFileError(f"line {lineno}: invalid hex payload") from None
            vec = np.frombuffer(raw, dtype="<f4")
            if vec.shape != (dim,):
                raise VectorFileError(
                    f"line {lineno}: got {vec.shape[0]} floats, header says dim={dim}")
            if message_id in vectors:
                raise VectorFileError(f"line {lineno}: duplicate message id '{message_id}'")
            vectors[message_id] = vec.astype(np.float32)
    return PrecomputedVectorStore(dim, vectors)


# ---------------------------------------------------------------------------
# message-vector computation for whole corpora
# ---------------------------------------------------------------------------


def compute_message_vectors(messages: Iterable, source) -> Dict[str, np.ndarray]:
    """Map message_id -> pooled d-dim vector for every message.

    ``source`` is either a HashEmbeddingEncoder (pool of token vectors) or a
    PrecomputedVectorStore (direct lookup).
    """
    out: Dict[str, np.ndarray] = {}
    if isinstance(source, PrecomputedVectorStore):
        for msg in messages:
            out[msg.message_id] = source.get(msg.message_id)
        return out
    for msg in messages:
        out[msg.message_id] = message_vector(source, msg.text)
    return out


# ---------------------------------------------------------------------------
# word-level views used by fine-tuning
# ---------------------------------------------------------------------------


class FrozenWordLevel:
    """Constant message vectors; no trainable word-side parameters."""

    def __init__(self, dim: int, vectors: Mapping[str, np.ndarray]):
        self.dim = dim
        self.vectors = vectors

    def trainable_params(self) -> list:
        return []

    def batch_vectors(self, messages: Sequence) -> Tensor:
        rows = np.stack([self.vectors[m.message_id] for m in messages])
        return Tensor(rows)


class TrainableHashWordLevel:
    """Hash-table word level with gradients enabled on the table itself."""

    def __init__(self, encoder: HashEmbeddingEncoder):
        self.dim = encoder.dim
        self.encoder = encoder
        self.table = Tensor(encoder.table.copy(), requires_grad=True)

    def trainable_params(self) -> list:
        return [("word.table", self.table)]

    def batch_vectors(self, messages: Sequence) -> Tensor:
        ids: List[int] = []
        segments: List[int] = []
        for seg, msg in enumerate(messages):
            token_ids = self.encoder.token_ids(tokenize(msg.text))
            ids.extend(token_ids.tolist())
            segments.extend([seg] * len(token_ids))
        rows = gather_rows(self.table, np.array(ids, dtype=np.int64))
        return segment_mean(rows, np.array(segments, dtype=np.int64), len(messages))


class TrainableAdapterWordLevel:
    """Precomputed vectors passed through a trainable d x d adapter.

    The adapter starts at identity, so before any update it reproduces the
    frozen behavior exactly.
    """

    def __init__(self, store: PrecomputedVectorStore):
        self.dim = store.dim
        self.store = store
        self.adapter = Tensor(np.eye(store.dim, dtype=np.float32), requires_grad=True)

    def trainable_params(self) -> list:
        return [("word.adapter", self.adapter)]

    def batch_vectors(self, messages: Sequence) -> Tensor:
        rows = np.stack([self.store.get(m.message_id) for m in messages])
        return matmul(Tensor(rows), self.adapter)
