"""Synthetic training pairs with known ground-truth note matches.

A source sequence is copied and the copy is distorted by timing, velocity
and duration noise, by contiguous mismatch segments (trills, repeats,
skips), by per-note insertions and deletions, and finally both versions
are transposed together. Bookkeeping runs on an ``origin`` array that
holds, for every note of the copy, the index of the source note it came
from (``DEFAULT`` for notes without a source).
"""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .errors import ValidationError
from .midi_io import DEFAULT, AlignmentPair, NoteSequence, validate_alignment

logger = logging.getLogger(__name__)

PIANO_RANGE = (21, 108)
SEGMENT_KINDS = ("trill", "repeat", "skip")
_COUNT_KEYS = ("deleted", "skipped", "inserted", "repeated", "trill")


@dataclass
class AugmentationConfig:
    tempo_global_sigma: float = 0.5
    tempo_local_sigma: float = 0.5
    onset_noise: float = 50.0
    velocity_noise: float = 10.0
    duration_noise: float = 250.0
    p_repeat: float = 1.0
    repeat_length: tuple = (8, 200)
    p_skip: float = 1.0
    skip_length: tuple = (8, 200)
    p_insertion: float = 0.2
    p_deletion: float = 0.2
    p_trill: float = 1.0
    trill_length: tuple = (20, 100)
    transpose: bool = True
    max_transposition: int | None = None
    pitch_bounds: tuple = PIANO_RANGE
    tempo_factor_clip: tuple = (0.25, 4.0)
    max_duration: int = 4 * 480
    window: int = 512

    def __post_init__(self):
        for name in ("repeat_length", "skip_length", "trill_length", "pitch_bounds", "tempo_factor_clip"):
            setattr(self, name, tuple(getattr(self, name)))
        for name in ("p_repeat", "p_skip", "p_insertion", "p_deletion", "p_trill"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValidationError(f"{name} must lie in [0, 1]")
        for name in ("repeat_length", "skip_length", "trill_length"):
            lo, hi = getattr(self, name)
            if not 1 <= lo <= hi:
                raise ValidationError(f"{name} must be a non-empty range of positive lengths")
        for name in ("tempo_global_sigma", "tempo_local_sigma", "onset_noise",
                     "velocity_noise", "duration_noise"):
            if getattr(self, name) < 0:
                raise ValidationError(f"{name} must be non-negative")
        if self.max_duration < 1 or self.window < 1:
            raise ValidationError("max_duration and window must be positive")

    @classmethod
    def zero(cls, **overrides) -> "AugmentationConfig":
        """No noise, no mismatches, no transposition."""
        cfg = dict(tempo_global_sigma=0.0, tempo_local_sigma=0.0, onset_noise=0.0,
                   velocity_noise=0.0, duration_noise=0.0, p_repeat=0.0, p_skip=0.0,
                   p_insertion=0.0, p_deletion=0.0, p_trill=0.0, transpose=False)
        cfg.update(overrides)
        return cls(**cfg)

    def to_dict(self) -> dict:
        d = asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}

    @classmethod
    def from_dict(cls, d: dict) -> "AugmentationConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValidationError(f"unknown augmentation config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path) -> "AugmentationConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")


@dataclass
class AugmentedPair:
    s1: NoteSequence
    s2: NoteSequence
    truth: list
    stats: dict = field(default_factory=dict)

    def origin(self) -> np.ndarray:
        return origin_from_truth(self.truth, len(self.s2))


def _rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def _round_half_up(x):
    return np.floor(np.asarray(x, dtype=np.float64) + 0.5).astype(np.int64)


# --------------------------------------------------------------- truth helpers

def truth_from_origin(origin, n1: int) -> list[AlignmentPair]:
    """Pairs ``(origin[j], j)`` for every copy note, then unmatched source notes."""
    origin = np.asarray(origin, dtype=np.int64)
    pairs = [AlignmentPair(int(a), j) for j, a in enumerate(origin)]
    used = np.zeros(n1, dtype=bool)
    matched = origin[origin != DEFAULT]
    used[matched] = True
    pairs += [AlignmentPair(int(i), DEFAULT) for i in np.flatnonzero(~used)]
    return pairs


def origin_from_truth(truth, n2: int) -> np.ndarray:
    origin = np.full(n2, DEFAULT, dtype=np.int64)
    for a, b in truth:
        if b != DEFAULT:
            if not 0 <= b < n2:
                raise ValidationError(f"s2 index {b} out of range")
            origin[b] = a
    return origin


def _n1_from_truth(truth) -> int:
    return max((a for a, _ in truth if a != DEFAULT), default=-1) + 1


def validate_pair(pair: AugmentedPair) -> None:
    """Raise ``ValidationError`` if the truth of ``pair`` breaks an invariant."""
    n1, n2 = len(pair.s1), len(pair.s2)
    validate_alignment(pair.truth, n1, n2)
    covered1 = {a for a, _ in pair.truth if a != DEFAULT}
    covered2 = {b for _, b in pair.truth if b != DEFAULT}
    if len(covered1) != n1 or len(covered2) != n2:
        raise ValidationError("truth does not cover every note exactly once")
    for a, b in pair.truth:
        if a != DEFAULT and b != DEFAULT and pair.s1.pitch[a] != pair.s2.pitch[b]:
            raise ValidationError(f"matched notes {a}-{b} differ in pitch")
    st = pair.stats
    if all(k in st for k in _COUNT_KEYS):
        expected = (n1 - st["deleted"] - st["skipped"] + st["inserted"]
                    + st["repeated"] + st["trill"])
        if expected != n2:
            raise ValidationError(f"count accounting gives {expected} notes, s2 has {n2}")


# -------------------------------------------------------------------- stages

def _arrays(seq):
    return [seq.onset.copy(), seq.pitch.copy(), seq.duration.copy(), seq.velocity.copy()]


def _build(cols, like: NoteSequence, origin):
    """Re-sort columns into canonical order, carrying ``origin`` along."""
    seq = NoteSequence(*cols, source_path=like.source_path, original_ppq=like.original_ppq)
    order = seq.sort_order()
    return seq.take(order), np.asarray(origin, dtype=np.int64)[order]


def feature_noise_formula(seq: NoteSequence, global_factor, local_exponents, onset_shift,
                          velocity_shift, duration_shift, config: AugmentationConfig):
    """Apply pre-drawn noise to ``seq`` and clip; returns unsorted columns.

    Onset ``t`` becomes ``onset_0 + sum_{k<=t} ioi_k * g * 2**n_k`` plus the
    additive onset noise, with both tempo factors clipped to
    ``config.tempo_factor_clip``.
    """
    lo, hi = config.tempo_factor_clip
    g = float(np.clip(global_factor, lo, hi))
    local = np.clip(np.power(2.0, np.asarray(local_exponents, dtype=np.float64)), lo, hi)
    onset = seq.onset.astype(np.float64)
    if len(seq):
        ioi = np.diff(onset, prepend=onset[0])
        onset = onset[0] + np.cumsum(ioi * g * local)
    onset = np.maximum(_round_half_up(onset + onset_shift), 0)
    velocity = np.clip(_round_half_up(seq.velocity + np.asarray(velocity_shift)), 1, 127)
    duration = np.clip(_round_half_up(seq.duration + np.asarray(duration_shift)), 1, config.max_duration)
    return [onset, seq.pitch.copy(), duration, velocity]


def _draw_feature_noise(n, config, rng):
    # fixed draw order: g, local exponents, onset, velocity, duration
    g = rng.normal(1.0, config.tempo_global_sigma)
    local = rng.normal(0.0, config.tempo_local_sigma, n)
    d_on = rng.uniform(-config.onset_noise, config.onset_noise, n)
    d_vel = rng.uniform(-config.velocity_noise, config.velocity_noise, n)
    d_dur = rng.uniform(-config.duration_noise, config.duration_noise, n)
    return g, local, d_on, d_vel, d_dur


def _feature_noise(seq, origin, config, rng):
    cols = feature_noise_formula(seq, *_draw_feature_noise(len(seq), config, rng), config)
    return _build(cols, seq, origin)


def apply_feature_noise(seq: NoteSequence, config: AugmentationConfig, seed=None) -> NoteSequence:
    """Tempo, onset, velocity and duration noise; note count is unchanged."""
    if not len(seq):
        raise ValidationError("cannot add noise to an empty sequence")
    out, _ = _feature_noise(seq, np.arange(len(seq)), config, _rng(seed))
    return out


def _segment_length(kind, config, rng):
    lo, hi = getattr(config, f"{kind}_length")
    return int(rng.integers(lo, hi + 1))


def _trill(seq, origin, length, rng):
    n = len(seq)
    cols = _arrays(seq)
    onset, pitch, duration, velocity = cols
    p = int(rng.integers(1, n))  # insert between notes p - 1 and p
    step = int(rng.choice([1, 2]))
    base = int(pitch[p - 1])
    upper = base + step if base + step <= 127 else base - step
    t0 = int(onset[p - 1])
    later = onset[p:][onset[p:] > t0]
    gap = int(later[0] - t0) if len(later) else 480
    k = np.arange(length)
    t_onset = t0 + _round_half_up((k + 0.5) * gap / length)
    t_pitch = np.where(k % 2 == 0, base, upper)
    t_dur = np.full(length, max(1, int(round(gap / length))))
    t_vel = np.full(length, int(velocity[p - 1]))
    new = [np.concatenate([c[:p], t, c[p:]]) for c, t in zip(cols, (t_onset, t_pitch, t_dur, t_vel))]
    new_origin = np.concatenate([origin[:p], np.full(length, DEFAULT), origin[p:]])
    return _build(new, seq, new_origin)


def _span_duration(onset, a, length):
    n = len(onset)
    if a + length < n:
        return int(onset[a + length] - onset[a])
    last_gap = int(onset[-1] - onset[-2]) if n >= 2 else 480
    return int(onset[-1] - onset[a]) + max(last_gap, 1)


def _repeat(seq, origin, length, rng):
    n = len(seq)
    a = int(rng.integers(0, n - length + 1))
    cols = _arrays(seq)
    shift = _span_duration(cols[0], a, length)
    new = []
    for k, c in enumerate(cols):
        copy = c[a:a + length].copy()
        tail = c[a + length:].copy()
        if k == 0:
            copy += shift
            tail += shift
        new.append(np.concatenate([c[:a + length], copy, tail]))
    new_origin = np.concatenate([origin[:a + length], np.full(length, DEFAULT), origin[a + length:]])
    return _build(new, seq, new_origin)


def _skip(seq, origin, length, rng):
    n = len(seq)
    a = int(rng.integers(0, n - length + 1))
    cols = _arrays(seq)
    shift = int(cols[0][a + length] - cols[0][a]) if a + length < n else 0
    new = []
    for k, c in enumerate(cols):
        tail = c[a + length:].copy()
        if k == 0:
            tail -= shift
        new.append(np.concatenate([c[:a], tail]))
    return _build(new, seq, np.concatenate([origin[:a], origin[a + length:]]))


_SEGMENT_FUNCS = {"trill": _trill, "repeat": _repeat, "skip": _skip}


def _inject(seq, origin, kind, config, rng):
    """Returns (seq, origin, n_notes_affected); 0 when the sequence is too short."""
    length = _segment_length(kind, config, rng)
    if len(seq) <= length:
        logger.info("skipping %s of %d notes: sequence has only %d notes", kind, length, len(seq))
        return seq, origin, 0
    seq, origin = _SEGMENT_FUNCS[kind](seq, origin, length, rng)
    return seq, origin, length


def inject_segment(seq: NoteSequence, truth, kind: str, config: AugmentationConfig, seed=None):
    """Insert one trill, repeat or skip segment into ``seq`` (the augmented side).

    ``truth`` pairs indices of the source sequence with indices of ``seq``;
    the returned truth is re-indexed to the modified sequence. All inserted
    notes are unmatched and all skipped source notes become unmatched.
    Too-short inputs are returned unchanged (logged at INFO level).
    """
    if kind not in _SEGMENT_FUNCS:
        raise ValidationError(f"unknown segment kind {kind!r}; expected one of {SEGMENT_KINDS}")
    n1 = _n1_from_truth(truth)
    out, origin, _ = _inject(seq, origin_from_truth(truth, len(seq)), kind, config, _rng(seed))
    return out, truth_from_origin(origin, n1)


def _insertions_deletions(seq, origin, config, rng):
    n = len(seq)
    delete = rng.random(n) < config.p_deletion
    insert = rng.random(n) < config.p_insertion
    d_on = rng.uniform(-config.onset_noise, config.onset_noise, n)
    d_vel = rng.uniform(-config.velocity_noise, config.velocity_noise, n)
    d_dur = rng.uniform(-config.duration_noise, config.duration_noise, n)
    ins = np.flatnonzero(insert)
    keep = ~delete
    copies = [
        np.maximum(_round_half_up(seq.onset[ins] + d_on[ins]), 0),
        seq.pitch[ins],
        np.clip(_round_half_up(seq.duration[ins] + d_dur[ins]), 1, config.max_duration),
        np.clip(_round_half_up(seq.velocity[ins] + d_vel[ins]), 1, 127),
    ]
    cols = [np.concatenate([c[keep], cp]) for c, cp in zip(_arrays(seq), copies)]
    new_origin = np.concatenate([origin[keep], np.full(len(ins), DEFAULT)])
    out, out_origin = _build(cols, seq, new_origin)
    return out, out_origin, int(delete.sum()), len(ins)


def apply_insertions_deletions(seq: NoteSequence, truth, config: AugmentationConfig, seed=None):
    """Delete each note with ``p_deletion`` and add a jittered copy with ``p_insertion``.

    Both decisions are drawn independently per note, so a deleted note
    may still leave behind an (unmatched) inserted copy.
    """
    n1 = _n1_from_truth(truth)
    out, origin, _, _ = _insertions_deletions(seq, origin_from_truth(truth, len(seq)), config, _rng(seed))
    return out, truth_from_origin(origin, n1)


def legal_transpositions(*seqs, bounds=PIANO_RANGE) -> range:
    """Semitone shifts keeping every pitch of ``seqs`` inside ``bounds`` (0 always allowed)."""
    pitches = [s.pitch for s in seqs if len(s)]
    if not pitches:
        return range(0, 1)
    lo = bounds[0] - min(int(p.min()) for p in pitches)
    hi = bounds[1] - max(int(p.max()) for p in pitches)
    return range(min(lo, 0), max(hi, 0) + 1) if lo <= 0 <= hi else range(0, 1)


def transpose_pair(pair: AugmentedPair, semitones: int, bounds=PIANO_RANGE) -> AugmentedPair:
    semitones = int(semitones)
    if semitones == 0:
        return pair
    if semitones not in legal_transpositions(pair.s1, pair.s2, bounds=bounds):
        raise ValidationError(f"transposition by {semitones} leaves the range {bounds}")
    return AugmentedPair(pair.s1.replace(pitch=pair.s1.pitch + semitones),
                         pair.s2.replace(pitch=pair.s2.pitch + semitones),
                         list(pair.truth), dict(pair.stats))


def _sample_transposition(pair, config, rng):
    allowed = legal_transpositions(pair.s1, pair.s2, bounds=config.pitch_bounds)
    if config.max_transposition is not None:
        m = int(config.max_transposition)
        allowed = range(max(allowed.start, -m), min(allowed.stop, m + 1))
    # always draw so the stream position does not depend on the range
    u = rng.random()
    if len(allowed) == 0:
        return 0
    return allowed[int(u * len(allowed))]


def window_of(seq: NoteSequence, start: int, length: int) -> NoteSequence:
    """Notes ``start:start+length`` with onsets shifted to begin at 0."""
    sub = seq.take(slice(start, start + length))
    if len(sub):
        sub = sub.replace(onset=sub.onset - sub.onset[0])
    return sub


def augment_copy(s1: NoteSequence, config: AugmentationConfig, rng) -> AugmentedPair:
    """Run the full augmentation chain on a copy of ``s1``.

    Stage order: feature noise, trill, repeat, skip, insertions and
    deletions, transposition.
    """
    rng = _rng(rng)
    origin = np.arange(len(s1))
    stats = {"deleted": 0, "skipped": 0, "inserted": 0, "repeated": 0, "trill": 0}
    s2, origin = _feature_noise(s1, origin, config, rng)
    for kind, stat in (("trill", "trill"), ("repeat", "repeated"), ("skip", "skipped")):
        if rng.random() < getattr(config, f"p_{kind}"):
            s2, origin, count = _inject(s2, origin, kind, config, rng)
            stats[stat] = count
    s2, origin, n_del, n_ins = _insertions_deletions(s2, origin, config, rng)
    stats["deleted"], stats["inserted"] = n_del, n_ins
    pair = AugmentedPair(s1, s2, truth_from_origin(origin, len(s1)), stats)
    if config.transpose:
        semitones = _sample_transposition(pair, config, rng)
        pair = transpose_pair(pair, semitones, bounds=config.pitch_bounds)
        pair.stats["transposition"] = semitones
    return pair


def make_training_pair(seq: NoteSequence, config: AugmentationConfig, seed=None) -> AugmentedPair:
    """Sample a window of ``config.window`` notes and build an augmented pair from it."""
    if len(seq) < config.window:
        raise ValidationError(f"{seq.source_path or 'sequence'} has {len(seq)} notes, "
                              f"need at least {config.window}")
    rng = _rng(seed)
    start = int(rng.integers(0, len(seq) - config.window + 1))
    s1 = window_of(seq, start, config.window)
    pair = augment_copy(s1, config, rng)
    pair.stats["window_start"] = start
    return pair


# --------------------------------------------------------- evaluation mismatch

def _insert_random_segments(seq, fraction, window, min_length, rng):
    """One contiguous block of resampled notes per ``window`` notes of ``seq``.

    Returns the new sequence, the new position of every old note and the
    number of inserted notes.
    """
    n = len(seq)
    onset, pitch, duration, velocity = _arrays(seq)
    pieces = [[], [], [], []]
    is_new = []
    time_shift = 0
    for start in range(0, n, window):
        stop = min(start + window, n)
        w = stop - start
        length = int(round(fraction * w))
        if w == window:
            length = max(min_length, length)
        pos = int(rng.integers(start, stop + 1))
        ioi = np.diff(onset[start:stop])
        span = max(1, int(round(length * (ioi.mean() if len(ioi) else 480))))
        t_ins = int(onset[pos]) if pos < n else int(onset[-1] + duration[-1])
        src = rng.integers(start, stop, length)
        seg_onset = t_ins + time_shift + np.sort(_round_half_up(rng.uniform(0, span, length)))
        for k, (old, seg) in enumerate(zip(
                (onset[start:pos] + time_shift, pitch[start:pos], duration[start:pos], velocity[start:pos]),
                (seg_onset, pitch[src], duration[src], velocity[src]))):
            pieces[k] += [old, seg]
        is_new += [np.zeros(pos - start, bool), np.ones(length, bool)]
        time_shift += span
        for k, old in enumerate((onset[pos:stop] + time_shift, pitch[pos:stop],
                                 duration[pos:stop], velocity[pos:stop])):
            pieces[k].append(old)
        is_new.append(np.zeros(stop - pos, bool))
    cols = [np.concatenate(p) for p in pieces]
    is_new = np.concatenate(is_new)
    tag = np.full(len(is_new), DEFAULT)
    tag[~is_new] = np.arange(n)
    out, tag = _build(cols, seq, tag)
    new_pos = np.empty(n, dtype=np.int64)
    old_mask = tag != DEFAULT
    new_pos[tag[old_mask]] = np.flatnonzero(old_mask)
    return out, new_pos, int(is_new.sum())


def make_eval_mismatch_pair(s1: NoteSequence, s2: NoteSequence, truth, fraction: float = 0.2,
                            seed=None, window: int = 512, min_length: int = 100) -> AugmentedPair:
    """Insert one contiguous random-note segment per window into each side.

    Each full window of ``window`` notes receives a segment of
    ``max(min_length, round(fraction * window))`` notes, sampled from the
    window's own notes and spread over a time span proportional to its
    length. Inserted notes are unmatched on both sides.
    """
    if not 0.0 < fraction < 1.0:
        raise ValidationError("fraction must lie strictly between 0 and 1")
    if not len(s1) or not len(s2):
        raise ValidationError("mismatch augmentation needs non-empty sequences")
    validate_alignment(truth, len(s1), len(s2))
    rng = _rng(seed)
    new1, pos1, k1 = _insert_random_segments(s1, fraction, window, min_length, rng)
    new2, pos2, k2 = _insert_random_segments(s2, fraction, window, min_length, rng)
    origin = np.full(len(new2), DEFAULT, dtype=np.int64)
    for a, b in truth:
        if a != DEFAULT and b != DEFAULT:
            origin[pos2[b]] = pos1[a]
    pair = AugmentedPair(new1, new2, truth_from_origin(origin, len(new1)),
                         {"inserted_s1": k1, "inserted_s2": k2})
    return pair
