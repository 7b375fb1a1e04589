"""Corpus loading: MIDI directories and score-to-performance ``.match`` files."""
from __future__ import annotations

import os
import re
import warnings
from pathlib import Path

import numpy as np

from .errors import GlueNoteError, MidiParseError, ValidationError
from .midi_io import DEFAULT, TICKS_PER_BEAT, AlignmentPair, NoteSequence, load_midi

VIENNA_ENV = "GLUENOTE_VIENNA_DIR"
MIDI_SUFFIXES = (".mid", ".midi")

_STEP = {"c": 0, "d": 2, "e": 4, "f": 5, "g": 7, "a": 9, "b": 11}
_ALTER = {"n": 0, "": 0, "#": 1, "##": 2, "x": 2, "b": -1, "bb": -2}

_SNOTE = (r"snote\(([^,]+),\[([^,\]]+),([^,\]]*)\],([^,]+),([^,]+):([^,]+),([^,]+),([^,]+),"
          r"([^,]+),([^,]+),\[(.*?)\]\)")
_NOTE = r"note\(([^,]+),\[([^,\]]+),([^,\]]*)\],([^,]+),([^,]+),([^,]+),(?:([^,]+),)?([^,)]+)\)"
_SNOTE_RE = re.compile(_SNOTE)
_NOTE_RE = re.compile(r"(?<![a-z])" + _NOTE)
_INFO_RE = re.compile(r"info\(\s*([^,]+)\s*,\s*(.+)\s*\)\.")


def list_midi_files(root) -> list[Path]:
    root = Path(root)
    if root.is_file():
        return [root]
    return sorted(p for p in root.rglob("*") if p.suffix.lower() in MIDI_SUFFIXES)


def load_corpus(root, min_notes: int = 0, strict: bool = False) -> list[NoteSequence]:
    """All MIDI files below ``root`` with at least ``min_notes`` notes.

    Unparseable files are skipped with a warning unless ``strict``.
    """
    out = []
    for path in list_midi_files(root):
        try:
            seq = load_midi(path)
        except (MidiParseError, GlueNoteError) as exc:
            if strict:
                raise
            warnings.warn(f"skipping {path}: {exc}")
            continue
        if len(seq) >= min_notes:
            out.append(seq)
    return out


def spelled_pitch(step: str, modifier: str, octave) -> int:
    """MIDI number of a spelled pitch such as (``C``, ``#``, 4) -> 61."""
    step = step.strip().lower()
    modifier = modifier.strip().lower()
    if step not in _STEP:
        raise ValidationError(f"unknown note name {step!r}")
    if modifier in _ALTER:
        alter = _ALTER[modifier]
    else:
        try:
            alter = int(modifier)
        except ValueError:
            raise ValidationError(f"unknown accidental {modifier!r}") from None
    return 12 * (int(octave) + 1) + _STEP[step] + alter


def parse_match_lines(lines, source_path: str = ""):
    """Build ``(score, performance, truth)`` from the lines of a ``.match`` file.

    Score onsets are beats scaled to the 480-tick grid; performance times
    are converted from MIDI clock units at the file's clock rate to ticks
    at 120 BPM.
    """
    info = {}
    score, perf, links = [], [], []  # links: (score row, perf row)
    perf_ids = {}
    for lineno, raw in enumerate(lines, 1):
        line = raw.strip()
        if not line or line.startswith("%"):
            continue
        m = _INFO_RE.match(line)
        if m:
            info[m.group(1).strip()] = m.group(2).strip()
            continue
        sn = _SNOTE_RE.match(line)
        s_row = None
        if sn:
            g = sn.groups()
            onset_beats, offset_beats = float(g[8]), float(g[9])
            pitch = spelled_pitch(g[1], g[2], g[3])
            score.append((onset_beats, pitch, max(offset_beats - onset_beats, 0.0)))
            s_row = len(score) - 1
        for nm in _NOTE_RE.finditer(line):
            if sn and nm.start() < sn.end():
                continue
            g = nm.groups()
            onset, offset = float(g[4]), float(g[5])
            velocity = int(float(g[7]))
            pitch = spelled_pitch(g[1], g[2], g[3])
            perf.append((onset, pitch, max(offset - onset, 0.0), velocity))
            perf_ids[g[0].strip()] = len(perf) - 1
            if s_row is not None and line[sn.end():].startswith("-note("):
                links.append((s_row, len(perf) - 1))
    if not score or not perf:
        raise ValidationError(f"{source_path or 'match data'} holds no score or no performance notes")

    units = float(info.get("midiClockUnits", 480))
    rate = float(info.get("midiClockRate", 500000))
    tick_scale = rate / (1e6 * units) * 2 * TICKS_PER_BEAT  # seconds -> ticks at 120 BPM

    sc = np.array(score, dtype=np.float64)
    s_on = sc[:, 0] - sc[:, 0].min()
    s1 = NoteSequence(np.round(s_on * TICKS_PER_BEAT).astype(np.int64), sc[:, 1].astype(np.int64),
                      np.maximum(np.round(sc[:, 2] * TICKS_PER_BEAT), 1).astype(np.int64),
                      np.full(len(sc), 64), source_path=source_path)
    pf = np.array(perf, dtype=np.float64)
    p_on = pf[:, 0] - pf[:, 0].min()
    s2 = NoteSequence(np.round(p_on * tick_scale).astype(np.int64), pf[:, 1].astype(np.int64),
                      np.maximum(np.round(pf[:, 2] * tick_scale), 1).astype(np.int64),
                      np.clip(pf[:, 3], 1, 127).astype(np.int64), source_path=source_path)
    # sort both sides and carry the links along
    o1, o2 = s1.sort_order(), s2.sort_order()
    r1, r2 = np.empty_like(o1), np.empty_like(o2)
    r1[o1] = np.arange(len(o1))
    r2[o2] = np.arange(len(o2))
    s1, s2 = s1.take(o1), s2.take(o2)
    match2 = np.full(len(s2), DEFAULT, dtype=np.int64)
    used = np.zeros(len(s1), bool)
    for a, b in links:
        match2[r2[b]] = r1[a]
        used[r1[a]] = True
    truth = [AlignmentPair(int(a), j) for j, a in enumerate(match2)]
    truth += [AlignmentPair(int(i), DEFAULT) for i in np.flatnonzero(~used)]
    return s1, s2, truth


def load_match_file(path):
    path = Path(path)
    with open(path, encoding="utf-8", errors="replace") as fh:
        return parse_match_lines(fh, str(path))


def vienna_root(root=None) -> Path | None:
    root = root or os.environ.get(VIENNA_ENV)
    if not root:
        return None
    root = Path(root)
    return root if root.is_dir() and any(root.rglob("*.match")) else None


def load_match_corpus(root) -> list:
    """``(name, score, performance, truth)`` for every ``.match`` file below ``root``."""
    out = []
    for path in sorted(Path(root).rglob("*.match")):
        s1, s2, truth = load_match_file(path)
        out.append((path.stem, s1, s2, truth))
    return out
