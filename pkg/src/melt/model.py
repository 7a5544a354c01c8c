"""The message-level transformer encoder.

A sequence of per-message vectors is embedded (learned MASK and PAD vectors
substituted per the mask plan, learned absolute position embeddings added),
run through N post-norm encoder layers with padding-masked bidirectional
self-attention, and finished with a dense reconstruction head that predicts
the pooled vector of each selected message.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .corpus import Action, MaskPlan, SequenceChunk
from .tensor import (Tensor, dropout, gather_bl, gather_rows, gelu, layer_norm,
                     matmul, reshape, scatter_rows, softmax, transpose)

INIT_STD = 0.02
ATTN_MASK_BIAS = -1e9  # finite stand-in for -inf; exp() underflows to exactly 0


@dataclass
class MeltConfig:
    n_layers: int = 2
    d_model: int = 768
    ff_dim: int = 2048
    n_heads: int = 8
    dropout: float = 0.1
    max_seq: int = 40
    use_positions: bool = True

    def __post_init__(self):
        if min(self.n_layers, self.d_model, self.ff_dim, self.n_heads, self.max_seq) < 1:
            raise ValueError("all extents must be >= 1")
        if self.d_model % self.n_heads != 0:
            raise ValueError(
                f"d_model ({self.d_model}) must be divisible by n_heads ({self.n_heads})")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout must be in [0, 1), got {self.dropout}")

    def to_dict(self) -> dict:
        return {
            "n_layers": self.n_layers,
            "d_model": self.d_model,
            "ff_dim": self.ff_dim,
            "n_heads": self.n_heads,
            "dropout": self.dropout,
            "max_seq": self.max_seq,
            "use_positions": self.use_positions,
        }


def _gaussian(rng: np.random.Generator, shape, dtype) -> np.ndarray:
    return (rng.standard_normal(shape) * INIT_STD).astype(dtype)


class EncoderLayer:
    """Post-norm transformer encoder layer: attention then feed-forward."""

    def __init__(self, cfg: MeltConfig, rng: np.random.Generator, dtype=np.float32):
        d, ff = cfg.d_model, cfg.ff_dim
        self.wq = Tensor(_gaussian(rng, (d, d), dtype), requires_grad=True)
        self.bq = Tensor(np.zeros(d, dtype=dtype), requires_grad=True)
        self.wk = Tensor(_gaussian(rng, (d, d), dtype), requires_grad=True)
        self.bk = Tensor(np.zeros(d, dtype=dtype), requires_grad=True)
        self.wv = Tensor(_gaussian(rng, (d, d), dtype), requires_grad=True)
        self.bv = Tensor(np.zeros(d, dtype=dtype), requires_grad=True)
        self.wo = Tensor(_gaussian(rng, (d, d), dtype), requires_grad=True)
        self.bo = Tensor(np.zeros(d, dtype=dtype), requires_grad=True)
        self.w1 = Tensor(_gaussian(rng, (d, ff), dtype), requires_grad=True)
        self.b1 = Tensor(np.zeros(ff, dtype=dtype), requires_grad=True)
        self.w2 = Tensor(_gaussian(rng, (ff, d), dtype), requires_grad=True)
        self.b2 = Tensor(np.zeros(d, dtype=dtype), requires_grad=True)
        self.ln1_g = Tensor(np.ones(d, dtype=dtype), requires_grad=True)
        self.ln1_b = Tensor(np.zeros(d, dtype=dtype), requires_grad=True)
        self.ln2_g = Tensor(np.ones(d, dtype=dtype), requires_grad=True)
        self.ln2_b = Tensor(np.zeros(d, dtype=dtype), requires_grad=True)

    def named_parameters(self, prefix: str) -> List[Tuple[str, Tensor]]:
        names = ["wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo",
                 "w1", "b1", "w2", "b2", "ln1_g", "ln1_b", "ln2_g", "ln2_b"]
        return [(f"{prefix}.{n}", getattr(self, n)) for n in names]

    def forward(self, x: Tensor, attn_bias: Tensor, n_heads: int, p_drop: float,
                train: bool, rng: Optional[np.random.Generator]) -> Tensor:
        b, length, d = x.shape
        dh = d // n_heads
        scale = 1.0 / np.sqrt(dh)

        def split_heads(t: Tensor) -> Tensor:
            return transpose(reshape(t, (b, length, n_heads, dh)), (0, 2, 1, 3))

        q = split_heads(matmul(x, self.wq) + self.bq)
        k = split_heads(matmul(x, self.wk) + self.bk)
        v = split_heads(matmul(x, self.wv) + self.bv)
        scores = matmul(q, transpose(k, (0, 1, 3, 2))) * scale + attn_bias
        attn = dropout(softmax(scores, axis=-1), p_drop, rng, train)
        ctx = reshape(transpose(matmul(attn, v), (0, 2, 1, 3)), (b, length, d))
        attn_out = dropout(matmul(ctx, self.wo) + self.bo, p_drop, rng, train)
        x = layer_norm(x + attn_out, self.ln1_g, self.ln1_b)
        ff = matmul(gelu(matmul(x, self.w1) + self.b1), self.w2) + self.b2
        x = layer_norm(x + dropout(ff, p_drop, rng, train), self.ln2_g, self.ln2_b)
        return x


class MeltModel:
    """Message-level transformer parameters and forward pass."""

    def __init__(self, config: MeltConfig, seed: int = 1337, dtype=np.float32):
        self.config = config
        self.seed = seed
        self.dtype = dtype
        d = config.d_model
        rng = np.random.default_rng(seed)
        self.pos_embedding = Tensor(_gaussian(rng, (config.max_seq, d), dtype),
                                    requires_grad=True)
        self.mask_vector = Tensor(_gaussian(rng, (d,), dtype), requires_grad=True)
        self.pad_vector = Tensor(_gaussian(rng, (d,), dtype), requires_grad=True)
        self.layers = [EncoderLayer(config, rng, dtype) for _ in range(config.n_layers)]
        self.head_w = Tensor(_gaussian(rng, (d, d), dtype), requires_grad=True)
        self.head_b = Tensor(np.zeros(d, dtype=dtype), requires_grad=True)

    def named_parameters(self) -> List[Tuple[str, Tensor]]:
        params: List[Tuple[str, Tensor]] = [
            ("pos_embedding", self.pos_embedding),
            ("mask_vector", self.mask_vector),
            ("pad_vector", self.pad_vector),
        ]
        for i, layer in enumerate(self.layers):
            params.extend(layer.named_parameters(f"layers.{i}"))
        params.append(("head.w", self.head_w))
        params.append(("head.b", self.head_b))
        return params

    def parameter_count(self) -> int:
        return sum(p.size for _, p in self.named_parameters())

    def forward(self, x: Tensor, attn_mask: np.ndarray, train: bool = False,
                rng: Optional[np.random.Generator] = None) -> Tensor:
        """Contextualize a (B, L, d) batch. ``attn_mask`` is (B, L) bool, True = attend.

        Masked-out positions contribute an additive -1e9 to every query's
        score for that key, which zeroes their attention weight exactly.
        """
        b, length, d = x.shape
        if d != self.config.d_model:
            raise ValueError(f"input dim {d} != model dim {self.config.d_model}")
        if length > self.config.max_seq:
            raise ValueError(f"sequence length {length} exceeds max_seq {self.config.max_seq}")
        bias = Tensor(np.where(np.asarray(attn_mask), 0.0, ATTN_MASK_BIAS)
                      .astype(x.dtype).reshape(b, 1, 1, length))
        p = self.config.dropout
        for layer in self.layers:
            x = layer.forward(x, bias, self.config.n_heads, p, train, rng)
        return x

    def reconstruct_rows(self, outputs: Tensor, b_idx, l_idx) -> Tensor:
        """Apply the reconstruction head at the given (batch, slot) positions."""
        return matmul(gather_bl(outputs, b_idx, l_idx), self.head_w) + self.head_b


# ---------------------------------------------------------------------------
# sequence embedding
# ---------------------------------------------------------------------------


def _no_mask_plan(chunk: SequenceChunk) -> MaskPlan:
    return MaskPlan(tuple(Action.KEEP for _ in chunk.slots))


def embed_batch(model: MeltModel, chunks: Sequence[SequenceChunk],
                plans: Optional[Sequence[MaskPlan]],
                vectors: Mapping[str, np.ndarray]) -> Tuple[Tensor, np.ndarray]:
    """Assemble the (B, L, d) input batch and its attention mask.

    Slot rules: MASK_TOKEN slots take the learned mask vector, PAD slots the
    learned pad vector, RANDOM_REPLACE slots the recorded substitute, and
    everything else the message's own pooled vector. Position embeddings are
    added last. The content of a masked slot never enters the input.
    """
    b = len(chunks)
    length = len(chunks[0].slots)
    d = model.config.d_model
    if plans is None:
        plans = [_no_mask_plan(c) for c in chunks]
    base = np.zeros((b, length, d), dtype=model.dtype)
    mask_ind = np.zeros((b, length, 1), dtype=model.dtype)
    pad_ind = np.zeros((b, length, 1), dtype=model.dtype)
    attn = np.zeros((b, length), dtype=bool)
    for bi, (chunk, plan) in enumerate(zip(chunks, plans)):
        if len(plan.actions) != len(chunk.slots):
            raise ValueError(
                f"mask plan has {len(plan.actions)} slots, chunk has {len(chunk.slots)}")
        for li, slot in enumerate(chunk.slots):
            if slot is None:
                pad_ind[bi, li, 0] = 1.0
                continue
            attn[bi, li] = True
            action = plan.actions[li]
            if action is Action.MASK_TOKEN:
                mask_ind[bi, li, 0] = 1.0
            elif action is Action.RANDOM_REPLACE:
                base[bi, li] = plan.replacements[li][1]
            else:
                base[bi, li] = vectors[slot.message_id]
    x = Tensor(base)
    x = x + Tensor(mask_ind) * reshape(model.mask_vector, (1, 1, d))
    x = x + Tensor(pad_ind) * reshape(model.pad_vector, (1, 1, d))
    if model.config.use_positions:
        pos = gather_rows(model.pos_embedding, np.arange(length))
        x = x + reshape(pos, (1, length, d))
    return x, attn


def embed_sequence(vectors_by_slot: Sequence[Optional[np.ndarray]], plan: Optional[MaskPlan],
                   model: MeltModel) -> Tensor:
    """Single-sequence embedding: per-slot vectors (None = PAD) to an (L, d) input."""
    length = len(vectors_by_slot)
    d = model.config.d_model
    chunk = SequenceChunk(
        "_",
        tuple(None if v is None else _SlotRef(f"slot{i}") for i, v in enumerate(vectors_by_slot)),
    )
    vec_map = {f"slot{i}": v for i, v in enumerate(vectors_by_slot) if v is not None}
    x, _ = embed_batch(model, [chunk], None if plan is None else [plan], vec_map)
    return reshape(x, (length, d))


@dataclass(frozen=True)
class _SlotRef:
    message_id: str


def embed_token_batch(model: MeltModel, chunks: Sequence[SequenceChunk],
                      row_vectors: Tensor, positions: Sequence[Tuple[int, int]]
                      ) -> Tuple[Tensor, np.ndarray]:
    """Embedding path where real-slot vectors arrive as one (n, d) tensor.

    ``positions[k]`` is the (batch, slot) destination of ``row_vectors[k]``.
    Used for fine-tuning with a trainable word level, where gradients must
    flow through the rows.
    """
    b = len(chunks)
    length = len(chunks[0].slots)
    d = model.config.d_model
    b_idx = np.array([p[0] for p in positions], dtype=np.int64)
    l_idx = np.array([p[1] for p in positions], dtype=np.int64)
    pad_ind = np.ones((b, length, 1), dtype=model.dtype)
    pad_ind[b_idx, l_idx, 0] = 0.0
    attn = np.zeros((b, length), dtype=bool)
    attn[b_idx, l_idx] = True
    x = scatter_rows(row_vectors, b_idx, l_idx, b, length)
    x = x + Tensor(pad_ind) * reshape(model.pad_vector, (1, 1, d))
    if model.config.use_positions:
        pos = gather_rows(model.pos_embedding, np.arange(length))
        x = x + reshape(pos, (1, length, d))
    return x, attn


# ---------------------------------------------------------------------------
# forward conveniences
# ---------------------------------------------------------------------------


def encoder_forward(inputs: Tensor, attn_mask: np.ndarray, model: MeltModel,
                    train_mode: bool = False,
                    rng: Optional[np.random.Generator] = None) -> Tensor:
    """Run the encoder over a single (L, d) input; returns (L, d) outputs."""
    length, d = inputs.shape
    out = model.forward(reshape(inputs, (1, length, d)), np.asarray(attn_mask).reshape(1, length),
                        train=train_mode, rng=rng)
    return reshape(out, (length, d))


def reconstruct(outputs: Tensor, plan: MaskPlan, model: MeltModel) -> Tuple[Tensor, List[int]]:
    """Head predictions at the plan's selected slots of a single (L, d) output."""
    slots = plan.selected_slots
    if not slots:
        return Tensor(np.zeros((0, model.config.d_model), dtype=model.dtype)), []
    length, d = outputs.shape
    batched = reshape(outputs, (1, length, d))
    preds = model.reconstruct_rows(batched, np.zeros(len(slots), dtype=np.int64),
                                   np.array(slots, dtype=np.int64))
    return preds, slots


def message_representation(chunk: SequenceChunk, model: MeltModel, slot: int,
                           vectors: Mapping[str, np.ndarray]) -> np.ndarray:
    """Top-layer contextual vector of a real slot, no masking, eval mode."""
    if not 0 <= slot < len(chunk.slots):
        raise ValueError(f"slot {slot} out of range for chunk of {len(chunk.slots)}")
    if chunk.slots[slot] is None:
        raise ValueError(f"slot {slot} is PAD; representations exist only for real messages")
    x, attn = embed_batch(model, [chunk], None, vectors)
    out = model.forward(x, attn, train=False)
    return np.array(out.data[0, slot])
