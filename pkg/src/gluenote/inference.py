"""Whole-file inference with overlapping 512-note windows."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

from .errors import CheckpointError, EmptySequenceError
from .midi_io import NoteSequence
from .model import GlueNote, window_ids
from .tokenizer import TokenVocabulary

SENTINEL = -1e9
STRIDE = 256


def window_starts(n: int, window: int = 512, stride: int = STRIDE) -> list[int]:
    """Start indices of the windows covering ``n`` notes; the last may be partial."""
    if n <= window:
        return [0]
    count = math.ceil((n - window) / stride) + 1
    return [k * stride for k in range(count)]


def window_pairs(n1: int, n2: int, window: int = 512, stride: int = STRIDE) -> list[tuple[int, int]]:
    """Window k of s1 pairs with window k of s2; the side with fewer windows repeats its last."""
    a, b = window_starts(n1, window, stride), window_starts(n2, window, stride)
    k = max(len(a), len(b))
    return [(a[min(i, len(a) - 1)], b[min(i, len(b) - 1)]) for i in range(k)]


@dataclass
class GlobalSimilarity:
    sim: np.ndarray  # (n1 + 1, n2 + 1), row/column 0 the default notes
    head_logits: np.ndarray | None = None  # (n2, n1 + 1), column 0 = unmatched
    windows: list | None = None

    def covered(self) -> np.ndarray:
        return self.sim > SENTINEL / 2


class _Accumulator:
    """Running mean of local matrices placed at global offsets.

    Column 0 of every local matrix is the default note; with
    ``default_row`` so is row 0. Interior cells see at most four windows
    and use a uint8 counter, the default strips are shared by every
    window and counted separately.
    """

    def __init__(self, rows, cols, default_row=True):
        self.first = 1 if default_row else 0
        self.total = np.zeros((rows, cols))
        self.count = np.zeros((rows, cols), dtype=np.uint8)
        self.col_total = np.zeros(rows)
        self.col_count = np.zeros(rows, dtype=np.int64)
        self.row_total = np.zeros(cols)
        self.row_count = np.zeros(cols, dtype=np.int64)

    def add(self, local, r0, c0):
        h, w = local.shape
        f = self.first
        self.total[r0 + f:r0 + h, c0 + 1:c0 + w] += local[f:, 1:]
        self.count[r0 + f:r0 + h, c0 + 1:c0 + w] += 1
        self.col_total[r0 + f:r0 + h] += local[f:, 0]
        self.col_count[r0 + f:r0 + h] += 1
        if f:
            self.row_total[0] += local[0, 0]
            self.row_count[0] += 1
            self.row_total[c0 + 1:c0 + w] += local[0, 1:]
            self.row_count[c0 + 1:c0 + w] += 1

    def result(self):
        total = self.total
        hit = self.count > 0
        np.divide(total, self.count, out=total, where=hit)
        total[~hit] = SENTINEL
        total[:, 0] = np.where(self.col_count > 0, self.col_total / np.maximum(self.col_count, 1), SENTINEL)
        if self.first:
            total[0, :] = np.where(self.row_count > 0, self.row_total / np.maximum(self.row_count, 1),
                                   SENTINEL)
        return total


def local_outputs(model: GlueNote, vocab: TokenVocabulary, pieces, with_head=False, batch_size=4):
    """Similarity matrices (and head logits) for a list of (s1_window, s2_window)."""
    window = model.config.window
    sims, heads = [], []
    model.eval()
    with torch.no_grad():
        for i in range(0, len(pieces), batch_size):
            chunk = pieces[i:i + batch_size]
            ids1 = torch.as_tensor(np.stack([window_ids(a, vocab, window) for a, _ in chunk]))
            ids2 = torch.as_tensor(np.stack([window_ids(b, vocab, window) for _, b in chunk]))
            sim = model(ids1, ids2)
            logits = model.head(sim) if with_head else None
            for k, (a, b) in enumerate(chunk):
                sims.append(sim[k, :len(a) + 1, :len(b) + 1].double().numpy())
                if with_head:
                    heads.append(logits[k, :len(b), :len(a) + 1].double().numpy())
    return sims, heads


def infer_global_similarity(s1: NoteSequence, s2: NoteSequence, model: GlueNote,
                            vocab: TokenVocabulary, with_head: bool = False,
                            batch_size: int = 4, stride: int = STRIDE) -> GlobalSimilarity:
    """Aggregate windowed similarities into one ``(n1 + 1) x (n2 + 1)`` matrix.

    Overlapping cells are averaged; cells never covered by a window hold
    ``SENTINEL``.
    """
    if not len(s1) or not len(s2):
        raise EmptySequenceError("inference needs two non-empty sequences")
    if tuple(model.vocab_sizes) != vocab.sizes:
        raise CheckpointError("model embedding sizes do not match the tokenizer vocabulary")
    window = model.config.window
    n1, n2 = len(s1), len(s2)
    pairs = window_pairs(n1, n2, window, stride)
    if len(pairs) == 1:
        sims, heads = local_outputs(model, vocab, [(s1, s2)], with_head, batch_size)
        return GlobalSimilarity(sims[0], heads[0] if with_head else None, pairs)

    acc = _Accumulator(n1 + 1, n2 + 1)
    head_acc = _Accumulator(n2, n1 + 1, default_row=False) if with_head else None
    # windows are processed in chunks to bound memory on long inputs
    for i in range(0, len(pairs), batch_size):
        chunk = pairs[i:i + batch_size]
        pieces = [(s1.take(slice(a, a + window)), s2.take(slice(b, b + window))) for a, b in chunk]
        sims, heads = local_outputs(model, vocab, pieces, with_head, batch_size)
        for k, (a, b) in enumerate(chunk):
            acc.add(sims[k], a, b)
            if with_head:
                head_acc.add(heads[k], b, a)
    sim = acc.result()
    head = head_acc.result() if with_head else None
    return GlobalSimilarity(sim, head, pairs)
