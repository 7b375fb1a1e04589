"""Match scoring and the training-free pitch/onset baseline similarity."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np

from .errors import ValidationError
from .midi_io import DEFAULT, NoteSequence, validate_alignment


@dataclass(frozen=True)
class MatchScore:
    precision: float
    recall: float
    f_score: float
    tp: int
    fp: int
    fn: int

    def to_dict(self):
        return asdict(self)


def _real_pairs(pairs):
    return {(int(a), int(b)) for a, b in pairs if a != DEFAULT and b != DEFAULT}


def _lengths(pairs):
    n1 = max((a for a, _ in pairs if a != DEFAULT), default=-1) + 1
    n2 = max((b for _, b in pairs if b != DEFAULT), default=-1) + 1
    return n1, n2


def score_from_counts(tp: int, fp: int, fn: int) -> MatchScore:
    p = tp / (tp + fp) if tp + fp else 0.0
    r = tp / (tp + fn) if tp + fn else 0.0
    f = 2 * p * r / (p + r) if p + r else 0.0
    return MatchScore(p, r, f, tp, fp, fn)


def match_prf(pred, truth, n1: int | None = None, n2: int | None = None) -> MatchScore:
    """Precision/recall/F over real-real pairs.

    Pairs involving DEFAULT never count as true positives. When both
    lists enumerate every note (the usual case), their sequence lengths
    must agree.
    """
    pred_pairs = getattr(pred, "pairs", pred)
    if n1 is not None or n2 is not None:
        validate_alignment(pred_pairs, n1, n2)
        validate_alignment(truth, n1, n2)
    elif _covers_all(pred_pairs) and _covers_all(truth) and _lengths(pred_pairs) != _lengths(truth):
        raise ValidationError(f"prediction covers {_lengths(pred_pairs)} notes, truth {_lengths(truth)}")
    p, t = _real_pairs(pred_pairs), _real_pairs(truth)
    tp = len(p & t)
    return score_from_counts(tp, len(p) - tp, len(t) - tp)


def _covers_all(pairs) -> bool:
    n1, n2 = _lengths(pairs)
    s1 = {a for a, _ in pairs if a != DEFAULT}
    s2 = {b for _, b in pairs if b != DEFAULT}
    return len(s1) == n1 and len(s2) == n2 and len(pairs) > 0


def pitch_onset_similarity(s1: NoteSequence, s2: NoteSequence, alpha: float = 1.0, beta: float = 1.0,
                           dtype=np.float64) -> np.ndarray:
    """Negative weighted L1 distance in (pitch, normalized onset).

    Onsets of each sequence are rescaled to [0, 1] by its own span. Row
    and column 0 (default notes) sit one unit below the smallest real
    similarity.
    """
    if not len(s1) or not len(s2):
        raise ValidationError("baseline similarity needs non-empty sequences")
    o1, o2 = _normalized_onsets(s1), _normalized_onsets(s2)
    sim = np.empty((len(s1) + 1, len(s2) + 1), dtype=dtype)
    real = sim[1:, 1:]
    np.subtract(s1.pitch[:, None].astype(dtype), s2.pitch[None, :].astype(dtype), out=real)
    np.abs(real, out=real)
    real *= -alpha
    real -= beta * np.abs(o1[:, None] - o2[None, :]).astype(dtype)
    low = real.min() - 1.0
    sim[0, :] = low
    sim[:, 0] = low
    return sim


def _normalized_onsets(seq):
    onset = seq.onset.astype(np.float64)
    span = onset.max() - onset.min()
    return (onset - onset.min()) / span if span > 0 else np.zeros_like(onset)


@dataclass
class CorpusReport:
    mean: MatchScore
    rows: list  # dicts: piece, precision, recall, f_score, runtime_seconds, counts

    def to_jsonl(self) -> str:
        return "".join(json.dumps(r) + "\n" for r in self.rows)

    def table(self) -> str:
        lines = [f"{'piece':<40} {'P':>7} {'R':>7} {'F':>7} {'sec':>8}"]
        for r in self.rows:
            lines.append(f"{str(r['piece'])[:40]:<40} {100 * r['precision']:7.2f} {100 * r['recall']:7.2f} "
                         f"{100 * r['f_score']:7.2f} {r['runtime_seconds']:8.2f}")
        m = self.mean
        lines.append(f"{'mean':<40} {100 * m.precision:7.2f} {100 * m.recall:7.2f} {100 * m.f_score:7.2f}")
        return "\n".join(lines)


def evaluate_corpus(pairs, pieces=None, runtimes=None) -> CorpusReport:
    """Unweighted mean of per-pair P/R/F plus one record per pair.

    ``pairs`` is a list of ``(pred, truth)``.
    """
    pairs = list(pairs)
    if not pairs:
        raise ValidationError("nothing to evaluate")
    pieces = pieces or [str(k) for k in range(len(pairs))]
    runtimes = runtimes or [0.0] * len(pairs)
    rows, scores = [], []
    for piece, rt, (pred, truth) in zip(pieces, runtimes, pairs):
        s = match_prf(pred, truth)
        scores.append(s)
        rows.append({"piece": piece, "precision": s.precision, "recall": s.recall, "f_score": s.f_score,
                     "runtime_seconds": float(rt), "tp": s.tp, "fp": s.fp, "fn": s.fn})
    mean = MatchScore(float(np.mean([s.precision for s in scores])), float(np.mean([s.recall for s in scores])),
                      float(np.mean([s.f_score for s in scores])), sum(s.tp for s in scores),
                      sum(s.fp for s in scores), sum(s.fn for s in scores))
    return CorpusReport(mean, rows)
