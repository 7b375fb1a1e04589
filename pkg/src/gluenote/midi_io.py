"""MIDI file ingestion, note sequences and the alignment file format.

All times are integer ticks at 480 ticks per beat. The nominal tempo of
120 BPM is metadata only and never enters the arithmetic.
"""
from __future__ import annotations

import logging
import struct
import warnings
from collections import defaultdict, deque
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, NamedTuple, Sequence

import numpy as np

from .errors import (DanglingNoteWarning, EmptySequenceError, MidiParseError,
                     ValidationError)

logger = logging.getLogger(__name__)

TICKS_PER_BEAT = 480
TEMPO_BPM = 120
# sentinel for "matched to the default note", i.e. unmatched
DEFAULT = -1
ALIGNMENT_HEADER = "#gluenote-match v1"


@dataclass(frozen=True)
class Note:
    index: int
    onset: int
    pitch: int
    duration: int
    velocity: int


class NoteSequence:
    """Ordered note list stored column-wise.

    The constructor validates field ranges but does not reorder; use
    :meth:`sorted` (``load_midi`` does) to establish the canonical
    (onset, pitch, appearance) order.
    """

    __slots__ = ("onset", "pitch", "duration", "velocity", "source_path", "original_ppq")

    def __init__(self, onset=(), pitch=(), duration=(), velocity=(),
                 source_path: str = "", original_ppq: int = TICKS_PER_BEAT):
        self.onset = np.asarray(onset, dtype=np.int64).reshape(-1)
        self.pitch = np.asarray(pitch, dtype=np.int64).reshape(-1)
        self.duration = np.asarray(duration, dtype=np.int64).reshape(-1)
        self.velocity = np.asarray(velocity, dtype=np.int64).reshape(-1)
        self.source_path = str(source_path)
        self.original_ppq = int(original_ppq)
        n = len(self.onset)
        if not (len(self.pitch) == len(self.duration) == len(self.velocity) == n):
            raise ValidationError("note field arrays differ in length")
        if n:
            if self.onset.min() < 0:
                raise ValidationError("negative onset")
            if self.pitch.min() < 0 or self.pitch.max() > 127:
                raise ValidationError("pitch outside 0-127")
            if self.duration.min() < 1:
                raise ValidationError("duration below 1 tick")
            if self.velocity.min() < 1 or self.velocity.max() > 127:
                raise ValidationError("velocity outside 1-127")

    @classmethod
    def from_notes(cls, notes: Iterable, **kwargs) -> "NoteSequence":
        """Build from ``Note`` objects or (onset, pitch, duration, velocity) tuples."""
        rows = [(n.onset, n.pitch, n.duration, n.velocity) if isinstance(n, Note) else tuple(n)
                for n in notes]
        if not rows:
            return cls(**kwargs)
        arr = np.array(rows, dtype=np.int64)
        return cls(arr[:, 0], arr[:, 1], arr[:, 2], arr[:, 3], **kwargs)

    def __len__(self):
        return len(self.onset)

    def __getitem__(self, item):
        if isinstance(item, (slice, np.ndarray, list)):
            return self.take(item)
        i = int(item)
        if i < 0:
            i += len(self)
        return Note(i, int(self.onset[i]), int(self.pitch[i]),
                    int(self.duration[i]), int(self.velocity[i]))

    def __iter__(self):
        return iter(self.notes)

    def __eq__(self, other):
        if not isinstance(other, NoteSequence):
            return NotImplemented
        return all(np.array_equal(getattr(self, f), getattr(other, f))
                   for f in ("onset", "pitch", "duration", "velocity"))

    def __repr__(self):
        return f"NoteSequence(n={len(self)}, source={self.source_path!r})"

    @property
    def notes(self) -> list[Note]:
        return [self[i] for i in range(len(self))]

    def take(self, idx) -> "NoteSequence":
        return NoteSequence(self.onset[idx], self.pitch[idx], self.duration[idx],
                            self.velocity[idx], self.source_path, self.original_ppq)

    def replace(self, **fields) -> "NoteSequence":
        kw = dict(onset=self.onset, pitch=self.pitch, duration=self.duration,
                  velocity=self.velocity, source_path=self.source_path,
                  original_ppq=self.original_ppq)
        kw.update(fields)
        return NoteSequence(**kw)

    def sort_order(self) -> np.ndarray:
        """Stable permutation putting notes in (onset, pitch, current position) order."""
        return np.lexsort((np.arange(len(self)), self.pitch, self.onset))

    def sorted(self) -> "NoteSequence":
        return self.take(self.sort_order())

    def is_sorted(self) -> bool:
        order = self.sort_order()
        return bool(np.array_equal(order, np.arange(len(self))))


class AlignmentPair(NamedTuple):
    idx1: int
    idx2: int


def validate_alignment(alignment: Sequence[AlignmentPair], n1=None, n2=None):
    """Raise ``ValidationError`` unless every real index is in range and used once."""
    seen1, seen2 = set(), set()
    for a, b in alignment:
        if a == DEFAULT and b == DEFAULT:
            raise ValidationError("(DEFAULT, DEFAULT) pair in alignment")
        for idx, seen, n, side in ((a, seen1, n1, "s1"), (b, seen2, n2, "s2")):
            if idx == DEFAULT:
                continue
            if idx < 0 or (n is not None and idx >= n):
                raise ValidationError(f"{side} index {idx} out of range")
            if idx in seen:
                raise ValidationError(f"{side} index {idx} appears twice")
            seen.add(idx)


# ----------------------------------------------------------------- SMF parsing

def _read_varlen(data, pos, end):
    value = 0
    for _ in range(4):
        if pos >= end:
            raise MidiParseError("truncated variable-length quantity", pos)
        byte = data[pos]
        pos += 1
        value = (value << 7) | (byte & 0x7F)
        if not byte & 0x80:
            return value, pos
    raise MidiParseError("variable-length quantity longer than 4 bytes", pos)


def _parse_track(data, start, end, notes, counter):
    """Collect (onset, pitch, duration, velocity, order) tuples of one MTrk chunk.

    Returns the number of dangling note-ons closed at end of track.
    """
    pos = start
    tick = 0
    status = None
    open_notes = defaultdict(deque)  # (channel, pitch) -> deque of (onset, velocity, order)
    while pos < end:
        delta, pos = _read_varlen(data, pos, end)
        tick += delta
        if pos >= end:
            raise MidiParseError("event missing after delta time", pos)
        byte = data[pos]
        if byte == 0xFF:
            if pos + 1 >= end:
                raise MidiParseError("truncated meta event", pos)
            meta_type = data[pos + 1]
            length, p = _read_varlen(data, pos + 2, end)
            if p + length > end:
                raise MidiParseError("meta event overruns track", pos)
            pos = p + length
            status = None
            if meta_type == 0x2F:
                break
            continue
        if byte in (0xF0, 0xF7):
            length, p = _read_varlen(data, pos + 1, end)
            if p + length > end:
                raise MidiParseError("sysex event overruns track", pos)
            pos = p + length
            status = None
            continue
        if byte & 0x80:
            if byte >= 0xF0:
                raise MidiParseError(f"unsupported system message 0x{byte:02X}", pos)
            status = byte
            pos += 1
        elif status is None:
            raise MidiParseError("running status without previous status byte", pos)
        kind = status & 0xF0
        channel = status & 0x0F
        n_data = 1 if kind in (0xC0, 0xD0) else 2
        if pos + n_data > end:
            raise MidiParseError("truncated channel message", pos)
        d1 = data[pos]
        d2 = data[pos + 1] if n_data == 2 else 0
        if d1 & 0x80 or d2 & 0x80:
            raise MidiParseError("data byte with high bit set", pos if d1 & 0x80 else pos + 1)
        pos += n_data
        if kind == 0x90 and d2 > 0:
            open_notes[(channel, d1)].append((tick, d2, next(counter)))
        elif kind == 0x80 or (kind == 0x90 and d2 == 0):
            queue = open_notes.get((channel, d1))
            if queue:
                onset, vel, order = queue.popleft()
                notes.append((onset, d1, tick - onset, vel, order))
    dangling = 0
    for (channel, pitch), queue in open_notes.items():
        for onset, vel, order in queue:
            notes.append((onset, pitch, tick - onset, vel, order))
            dangling += 1
    return dangling


def _rescale(ticks, ppq):
    # round half up: floor(t * 480 / ppq + 1/2), exact in integers
    return (ticks * TICKS_PER_BEAT * 2 + ppq) // (2 * ppq)


def parse_midi_bytes(data: bytes, source_path: str = "") -> NoteSequence:
    """Decode SMF bytes into a sorted ``NoteSequence`` at 480 ticks per beat."""
    data = memoryview(bytes(data))
    if len(data) < 14 or bytes(data[:4]) != b"MThd":
        raise MidiParseError("missing MThd header", 0)
    header_len = struct.unpack(">I", data[4:8])[0]
    if header_len < 6 or 8 + header_len > len(data):
        raise MidiParseError("bad header length", 4)
    fmt, ntracks, division = struct.unpack(">HHH", data[8:14])
    if fmt not in (0, 1):
        raise MidiParseError(f"unsupported SMF format {fmt}", 8)
    if division & 0x8000:
        raise MidiParseError("SMPTE time division is not supported", 12)
    if division == 0:
        raise MidiParseError("zero ticks per beat", 12)
    ppq = division

    raw_notes = []
    counter = iter(range(1 << 62))
    dangling = 0
    pos = 8 + header_len
    track_no = 0
    while pos < len(data) and track_no < ntracks:
        if pos + 8 > len(data):
            raise MidiParseError("truncated chunk header", pos)
        chunk_id = bytes(data[pos:pos + 4])
        length = struct.unpack(">I", data[pos + 4:pos + 8])[0]
        body = pos + 8
        if body + length > len(data):
            raise MidiParseError(f"chunk {chunk_id!r} overruns file", pos)
        if chunk_id == b"MTrk":
            dangling += _parse_track(data, body, body + length, raw_notes, counter)
            track_no += 1
        pos = body + length
    if track_no < ntracks:
        raise MidiParseError(f"header announces {ntracks} tracks, found {track_no}", pos)
    if not raw_notes:
        raise EmptySequenceError(f"no note events in {source_path or 'MIDI data'}")
    if dangling:
        msg = f"{dangling} dangling note-on event(s) closed at end of track in {source_path or 'MIDI data'}"
        warnings.warn(msg, DanglingNoteWarning, stacklevel=3)
        logger.warning(msg)

    arr = np.array(raw_notes, dtype=np.int64)
    arr = arr[np.argsort(arr[:, 4], kind="stable")]
    onset = _rescale(arr[:, 0], ppq)
    duration = np.maximum(_rescale(arr[:, 2], ppq), 1)
    seq = NoteSequence(onset, arr[:, 1], duration, arr[:, 3],
                       source_path=source_path, original_ppq=ppq)
    return seq.sorted()


def load_midi(path) -> NoteSequence:
    """Load a format-0/1 Standard MIDI File.

    All tracks and channels are merged. Note-on with velocity 0 counts as
    note-off, note-offs close the earliest open note of their pitch and
    channel, and notes still open at the end of a track are closed there
    (a ``DanglingNoteWarning`` reports how many).
    """
    path = Path(path)
    return parse_midi_bytes(path.read_bytes(), source_path=str(path))


def _varlen_bytes(value):
    out = [value & 0x7F]
    value >>= 7
    while value:
        out.append(0x80 | (value & 0x7F))
        value >>= 7
    return bytes(reversed(out))


def midi_bytes(seq: NoteSequence, ppq: int = TICKS_PER_BEAT) -> bytes:
    """Serialize as a single-track format-0 SMF with a 120 BPM tempo event."""
    events = []
    for i in range(len(seq)):
        on = int(seq.onset[i])
        off = on + int(seq.duration[i])
        p, v = int(seq.pitch[i]), int(seq.velocity[i])
        # offs sort before ons at equal ticks; ons keep sequence order
        events.append((off, 0, i, bytes((0x80, p, 0))))
        events.append((on, 1, i, bytes((0x90, p, v))))
    events.sort()
    body = bytearray(b"\x00\xFF\x51\x03" + (60_000_000 // TEMPO_BPM).to_bytes(3, "big"))
    last = 0
    for tick, _, _, msg in events:
        body += _varlen_bytes(tick - last) + msg
        last = tick
    body += b"\x00\xFF\x2F\x00"
    header = b"MThd" + struct.pack(">IHHH", 6, 0, 1, ppq)
    return header + b"MTrk" + struct.pack(">I", len(body)) + bytes(body)


def write_midi(seq: NoteSequence, path) -> None:
    Path(path).write_bytes(midi_bytes(seq))


# ----------------------------------------------------------- alignment files

def _fmt_idx(i):
    return "*" if i == DEFAULT else str(int(i))


def save_alignment(alignment: Sequence[AlignmentPair], s1: NoteSequence, s2: NoteSequence, path) -> None:
    """Write alignment pairs as tab-separated ``idx1<TAB>idx2`` lines, ``*`` = unmatched."""
    validate_alignment(alignment, len(s1), len(s2))
    lines = [ALIGNMENT_HEADER]
    lines += [f"{_fmt_idx(a)}\t{_fmt_idx(b)}" for a, b in alignment]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def _parse_idx(token, lineno):
    if token == "*":
        return DEFAULT
    try:
        value = int(token)
    except ValueError:
        raise ValidationError(f"line {lineno}: bad index {token!r}") from None
    if value < 0:
        raise ValidationError(f"line {lineno}: negative index {value}")
    return value


def load_alignment(path) -> list[AlignmentPair]:
    text = Path(path).read_text(encoding="utf-8")
    lines = text.splitlines()
    if not lines or lines[0].strip() != ALIGNMENT_HEADER:
        raise ValidationError(f"{path}: missing header {ALIGNMENT_HEADER!r}")
    out = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 2:
            raise ValidationError(f"line {lineno}: expected two tab-separated fields")
        out.append(AlignmentPair(_parse_idx(parts[0].strip(), lineno), _parse_idx(parts[1].strip(), lineno)))
    validate_alignment(out)
    return out
