"""Fixed-length structured tokenization: four tokens per note.

Each note becomes one block ``(time_shift, pitch, duration, velocity)``.
Every field has its own id space in which id 0 is reserved for the
default note and ids ``1..n`` index the field's value table.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from .errors import DecodeError, ValidationError
from .midi_io import NoteSequence

FIELDS = ("time_shift", "pitch", "duration", "velocity")
DEFAULT_ID = 0
MAX_NOTES = 512


def quantize(values, bins) -> np.ndarray:
    """Index of the nearest bin for each value; exact midpoints go to the upper bin."""
    values = np.asarray(values, dtype=np.int64)
    bins = np.asarray(bins, dtype=np.int64)
    if len(bins) == 1:
        return np.zeros(values.shape, dtype=np.int64)
    hi = np.clip(np.searchsorted(bins, values, side="left"), 1, len(bins) - 1)
    lo = hi - 1
    take_hi = (bins[hi] - values) <= (values - bins[lo])
    return np.where(take_hi, hi, lo)


@dataclass(frozen=True)
class TokenVocabulary:
    time_shift_bins: tuple
    duration_bins: tuple
    velocity_bins: tuple
    pitch_range: tuple = (0, 127)
    _tables: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        for name in ("time_shift_bins", "duration_bins", "velocity_bins", "pitch_range"):
            object.__setattr__(self, name, tuple(int(v) for v in getattr(self, name)))
        for name in ("time_shift_bins", "duration_bins", "velocity_bins"):
            bins = getattr(self, name)
            if not bins or np.any(np.diff(bins) <= 0):
                raise ValidationError(f"{name} must be non-empty and strictly increasing")
        lo, hi = self.pitch_range
        if not 0 <= lo <= hi <= 127:
            raise ValidationError("pitch_range must lie within 0-127")
        tables = {
            "time_shift": np.array(self.time_shift_bins, dtype=np.int64),
            "pitch": np.arange(lo, hi + 1, dtype=np.int64),
            "duration": np.array(self.duration_bins, dtype=np.int64),
            "velocity": np.array(self.velocity_bins, dtype=np.int64),
        }
        object.__setattr__(self, "_tables", tables)

    @classmethod
    def default(cls) -> "TokenVocabulary":
        text = resources.files("gluenote").joinpath("data/vocab.json").read_text()
        return cls.from_dict(json.loads(text))

    @classmethod
    def from_dict(cls, cfg: dict) -> "TokenVocabulary":
        return cls(time_shift_bins=cfg["time_shift"], duration_bins=cfg["duration"],
                   velocity_bins=cfg["velocity"], pitch_range=cfg.get("pitch_range", (0, 127)))

    @classmethod
    def load(cls, path) -> "TokenVocabulary":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_dict(self) -> dict:
        return {"time_shift": list(self.time_shift_bins), "pitch_range": list(self.pitch_range),
                "duration": list(self.duration_bins), "velocity": list(self.velocity_bins)}

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    def table(self, name) -> np.ndarray:
        return self._tables[name]

    @property
    def sizes(self) -> tuple:
        """Vocabulary size per field, default id included."""
        return tuple(len(self._tables[f]) + 1 for f in FIELDS)

    def pitch_id(self, pitch: int) -> int:
        lo, hi = self.pitch_range
        if not lo <= pitch <= hi:
            raise ValidationError(f"pitch {pitch} outside vocabulary range")
        return pitch - lo + 1

    def value_id(self, name: str, value: int) -> int:
        if name == "pitch":
            return self.pitch_id(value)
        return int(quantize([value], self._tables[name])[0]) + 1


@dataclass
class TokenBlockSequence:
    ids: np.ndarray  # (n_blocks, 4)
    has_default: bool = False

    def __post_init__(self):
        self.ids = np.asarray(self.ids, dtype=np.int64).reshape(-1, 4)

    def __len__(self):
        return len(self.ids)

    @property
    def n_tokens(self) -> int:
        return self.ids.size

    def flat(self) -> np.ndarray:
        return self.ids.reshape(-1)

    def __eq__(self, other):
        if not isinstance(other, TokenBlockSequence):
            return NotImplemented
        return self.has_default == other.has_default and np.array_equal(self.ids, other.ids)


def tokenize(seq: NoteSequence, vocab: TokenVocabulary, max_notes: int = MAX_NOTES) -> TokenBlockSequence:
    """Encode notes as blocks of (time shift, pitch, duration, velocity) ids.

    The time shift of note ``i`` is the quantized inter-onset interval to
    note ``i - 1``; the first note always encodes a shift of 0.
    """
    n = len(seq)
    if n > max_notes:
        raise ValidationError(f"{n} notes exceed the {max_notes}-note context; window the input")
    ids = np.zeros((n, 4), dtype=np.int64)
    if n:
        shifts = np.diff(seq.onset, prepend=seq.onset[0])
        ids[:, 0] = quantize(shifts, vocab.table("time_shift")) + 1
        ids[:, 1] = seq.pitch - vocab.pitch_range[0] + 1
        ids[:, 2] = quantize(seq.duration, vocab.table("duration")) + 1
        ids[:, 3] = quantize(seq.velocity, vocab.table("velocity")) + 1
        if seq.pitch.min() < vocab.pitch_range[0] or seq.pitch.max() > vocab.pitch_range[1]:
            raise ValidationError("pitch outside vocabulary range")
    return TokenBlockSequence(ids, has_default=False)


def prepend_default(blocks: TokenBlockSequence, max_notes: int = MAX_NOTES) -> TokenBlockSequence:
    if blocks.has_default:
        raise ValidationError("sequence already starts with a default block")
    if len(blocks) > max_notes:
        raise ValidationError(f"{len(blocks)} blocks exceed {max_notes}")
    ids = np.concatenate([np.full((1, 4), DEFAULT_ID, dtype=np.int64), blocks.ids])
    return TokenBlockSequence(ids, has_default=True)


def pad_blocks(blocks: TokenBlockSequence, length: int) -> TokenBlockSequence:
    """Append default-only blocks up to ``length``."""
    if len(blocks) > length:
        raise ValidationError(f"cannot pad {len(blocks)} blocks to {length}")
    pad = np.full((length - len(blocks), 4), DEFAULT_ID, dtype=np.int64)
    return TokenBlockSequence(np.concatenate([blocks.ids, pad]), has_default=blocks.has_default)


def detokenize(blocks: TokenBlockSequence, vocab: TokenVocabulary) -> NoteSequence:
    """Decode blocks back to notes, skipping a leading default block."""
    ids = blocks.ids
    if blocks.has_default or (len(ids) and np.all(ids[0] == DEFAULT_ID)):
        ids = ids[1:]
    if not len(ids):
        return NoteSequence()
    if np.any(ids == DEFAULT_ID):
        raise DecodeError("default id inside the note blocks")
    values = []
    for k, name in enumerate(FIELDS):
        table = vocab.table(name)
        col = ids[:, k]
        if col.min() < 1 or col.max() > len(table):
            bad = int(col.max()) if col.max() > len(table) else int(col.min())
            raise DecodeError(f"{name} id {bad} outside vocabulary of size {len(table) + 1}")
        values.append(table[col - 1])
    shifts, pitch, duration, velocity = values
    return NoteSequence(np.cumsum(shifts), pitch, duration, velocity)
