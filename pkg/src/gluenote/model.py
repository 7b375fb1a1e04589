"""Transformer encoder producing pairwise note similarities, plus the decoder head.

Both sequences of a pair are prepended with a default note, concatenated
and encoded jointly with full (unmasked) self-attention. The similarity
matrix is the dot product of the two halves of the output; row/column 0
belong to the default notes.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ValidationError
from .midi_io import DEFAULT, NoteSequence
from .tokenizer import TokenVocabulary, pad_blocks, prepend_default, tokenize

IGNORE = -100


@dataclass(frozen=True)
class ModelConfig:
    residual_dim: int = 128
    num_blocks: int = 4
    num_heads: int = 8
    ff_multiplier: int = 4
    batch_size: int = 24
    head_blocks: int = 2
    head_dim: int | None = None
    use_head: bool = True
    window: int = 512

    def __post_init__(self):
        if self.residual_dim % self.num_heads:
            raise ValidationError("residual_dim must be divisible by num_heads")
        if self.head_dim is not None and self.head_dim % self.num_heads:
            raise ValidationError("head_dim must be divisible by num_heads")
        if self.window < 1:
            raise ValidationError("window must be positive")

    @property
    def decoder_dim(self) -> int:
        return self.head_dim or self.residual_dim

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d) -> "ModelConfig":
        return cls(**d)


PRESETS = {
    "tiny": ModelConfig(residual_dim=64, num_blocks=2, num_heads=4, batch_size=4, head_blocks=2),
    "small": ModelConfig(residual_dim=128, num_blocks=4, num_heads=8, batch_size=24, head_blocks=2),
    "mid": ModelConfig(residual_dim=256, num_blocks=6, num_heads=8, batch_size=16, head_blocks=2),
    "large": ModelConfig(residual_dim=512, num_blocks=8, num_heads=8, batch_size=8, head_blocks=8),
}


class AttentionBlock(nn.Module):
    """Pre-norm self-attention and feedforward sublayers with residual connections."""

    def __init__(self, dim, num_heads, ff_multiplier=4):
        super().__init__()
        self.num_heads = num_heads
        self.norm_attn = nn.LayerNorm(dim)
        self.qkv = nn.Linear(dim, 3 * dim)
        self.attn_out = nn.Linear(dim, dim)
        self.norm_ff = nn.LayerNorm(dim)
        self.ff_in = nn.Linear(dim, ff_multiplier * dim)
        self.ff_out = nn.Linear(ff_multiplier * dim, dim)

    def forward(self, x):
        b, t, d = x.shape
        h = self.num_heads
        q, k, v = self.qkv(self.norm_attn(x)).view(b, t, 3, h, d // h).permute(2, 0, 3, 1, 4)
        a = F.scaled_dot_product_attention(q, k, v)
        x = x + self.attn_out(a.transpose(1, 2).reshape(b, t, d))
        return x + self.ff_out(F.gelu(self.ff_in(self.norm_ff(x))))


class DecoderHead(nn.Module):
    """Predicts, for every real note of s2, its match among the notes of s1.

    Input rows are the similarity columns of the real s2 notes (length
    ``window + 1``); output rows are ``window + 1`` logits, logit 0 meaning
    unmatched.
    """

    def __init__(self, window, dim, num_blocks, num_heads, ff_multiplier=4):
        super().__init__()
        self.window = window
        self.inp = nn.Linear(window + 1, dim)
        self.position = nn.Embedding(window, dim)
        self.norm_in = nn.LayerNorm(dim)
        self.blocks = nn.ModuleList(AttentionBlock(dim, num_heads, ff_multiplier) for _ in range(num_blocks))
        self.norm_out = nn.LayerNorm(dim)
        self.out = nn.Linear(dim, window + 1)

    def forward(self, sim):
        if sim.shape[-2:] != (self.window + 1, self.window + 1):
            raise ValidationError(f"decoder head expects {self.window + 1}x{self.window + 1} "
                                  f"similarity, got {tuple(sim.shape[-2:])}")
        x = sim[..., 1:].transpose(-1, -2)
        pos = torch.arange(self.window, device=sim.device)
        x = self.norm_in(self.inp(x) + self.position(pos))
        for block in self.blocks:
            x = block(x)
        return self.out(self.norm_out(x))


class GlueNote(nn.Module):
    def __init__(self, config: ModelConfig, vocab_sizes):
        super().__init__()
        self.config = config
        self.vocab_sizes = tuple(int(v) for v in vocab_sizes)
        d = config.residual_dim
        self.seq_len = config.window + 1
        self.field_embeddings = nn.ModuleList(nn.Embedding(n, d) for n in self.vocab_sizes)
        self.position = nn.Embedding(2 * self.seq_len, d)
        self.norm_in = nn.LayerNorm(d)
        self.blocks = nn.ModuleList(AttentionBlock(d, config.num_heads, config.ff_multiplier)
                                    for _ in range(config.num_blocks))
        self.norm_out = nn.LayerNorm(d)
        self.out = nn.Linear(d, d)
        self.head = None
        if config.use_head:
            self.head = DecoderHead(config.window, config.decoder_dim, config.head_blocks,
                                    config.num_heads, config.ff_multiplier)

    def encoder_parameters(self):
        return [p for name, p in self.named_parameters() if not name.startswith("head.")]

    def embed(self, ids1, ids2, positions=None):
        """Sum of the four field embeddings plus the learned position embedding.

        ``ids1``/``ids2`` are ``(batch, window + 1, 4)`` token ids with the
        default block first; returns ``(batch, 2 * (window + 1), dim)``.
        """
        if ids1.shape[-2:] != (self.seq_len, 4) or ids2.shape[-2:] != (self.seq_len, 4):
            raise ValidationError(f"expected {self.seq_len} blocks of 4 tokens per side, "
                                  f"got {tuple(ids1.shape)} and {tuple(ids2.shape)}")
        ids = torch.cat([ids1, ids2], dim=-2)
        x = sum(emb(ids[..., k]) for k, emb in enumerate(self.field_embeddings))
        if positions is None:
            positions = torch.arange(2 * self.seq_len, device=ids.device)
        return x + self.position(positions)

    def encode(self, x):
        x = self.norm_in(x)
        for block in self.blocks:
            x = block(x)
        return self.out(self.norm_out(x))

    def similarity(self, reps):
        return pairwise_similarity(reps, self.seq_len)

    def forward(self, ids1, ids2, positions=None):
        """Returns the ``(batch, window + 1, window + 1)`` similarity matrix."""
        return self.similarity(self.encode(self.embed(ids1, ids2, positions)))


def pairwise_similarity(reps, n1):
    """Dot products between the first ``n1`` representations and the rest."""
    return reps[..., :n1, :] @ reps[..., n1:, :].transpose(-1, -2)


def count_parameters(module) -> int:
    return sum(p.numel() for p in module.parameters())


# ----------------------------------------------------------------- targets/loss

def targets_from_alignment(truth, n1: int, n2: int, window: int):
    """Classification targets for one window.

    Returns ``(s1_targets, s2_targets)`` of length ``window``: the matrix
    column (resp. row) of each real note's match, 0 when unmatched and
    ``IGNORE`` on padding positions.
    """
    if n1 > window or n2 > window:
        raise ValidationError(f"window holds {window} notes, got {n1} and {n2}")
    t1 = np.full(window, IGNORE, dtype=np.int64)
    t2 = np.full(window, IGNORE, dtype=np.int64)
    t1[:n1] = 0
    t2[:n2] = 0
    for a, b in truth:
        if (a != DEFAULT and not 0 <= a < n1) or (b != DEFAULT and not 0 <= b < n2):
            raise ValidationError(f"truth pair ({a}, {b}) outside the {n1}x{n2} window")
        if a != DEFAULT and b != DEFAULT:
            t1[a] = b + 1
            t2[b] = a + 1
    return t1, t2


def _masked(logits, valid):
    if valid is None:
        return logits
    return logits.masked_fill(~valid, float("-inf"))


def dual_ce_loss(sim, s1_targets, s2_targets, s1_valid=None, s2_valid=None):
    """Cross-entropy of both softmax directions of the similarity matrix.

    Parameters
    ----------
    sim : tensor (batch, R, C)
        Similarities, row/column 0 the default notes.
    s1_targets : tensor (batch, R - 1)
        Target column for each real s1 note (``IGNORE`` to skip).
    s2_targets : tensor (batch, C - 1)
        Target row for each real s2 note.
    s1_valid, s2_valid : bool tensors (batch, R) / (batch, C), optional
        Candidate masks excluding padding blocks from the softmax.

    Returns
    -------
    total, (loss_s1, loss_s2)
    """
    r, c = sim.shape[-2:]
    # softmax over rows: prediction of the s1 match of each s2 note
    col_logits = sim[..., 1:].transpose(-1, -2)
    if s1_valid is not None:
        col_logits = _masked(col_logits, s1_valid[..., None, :])
    loss2 = F.cross_entropy(col_logits.reshape(-1, r), s2_targets.reshape(-1), ignore_index=IGNORE)
    row_logits = sim[..., 1:, :]
    if s2_valid is not None:
        row_logits = _masked(row_logits, s2_valid[..., None, :])
    loss1 = F.cross_entropy(row_logits.reshape(-1, c), s1_targets.reshape(-1), ignore_index=IGNORE)
    return loss1 + loss2, (loss1, loss2)


def head_ce_loss(logits, s2_targets, s1_valid=None):
    if s1_valid is not None:
        logits = _masked(logits, s1_valid[..., None, :])
    return F.cross_entropy(logits.reshape(-1, logits.shape[-1]), s2_targets.reshape(-1),
                           ignore_index=IGNORE)


def argmax_accuracy(sim, s1_targets, s2_targets, s1_valid=None, s2_valid=None):
    """Fraction of real notes (both sides) whose argmax equals the target."""
    with torch.no_grad():
        col_logits = sim[..., 1:].transpose(-1, -2)
        row_logits = sim[..., 1:, :]
        if s1_valid is not None:
            col_logits = _masked(col_logits, s1_valid[..., None, :])
        if s2_valid is not None:
            row_logits = _masked(row_logits, s2_valid[..., None, :])
        hits, total = 0, 0
        for logits, tgt in ((col_logits, s2_targets), (row_logits, s1_targets)):
            keep = tgt != IGNORE
            hits += int((logits.argmax(-1)[keep] == tgt[keep]).sum())
            total += int(keep.sum())
    return hits / max(total, 1)


# ----------------------------------------------------------------- input blocks

def window_ids(seq: NoteSequence, vocab: TokenVocabulary, window: int) -> np.ndarray:
    """Token ids ``(window + 1, 4)``: default block, notes, default-block padding."""
    blocks = prepend_default(tokenize(seq, vocab, max_notes=window), max_notes=window)
    return pad_blocks(blocks, window + 1).ids


def uniform_loss_value(window: int = 512, with_head: bool = False) -> float:
    return (3 if with_head else 2) * math.log(window + 1)
