"""Match extraction from similarity matrices.

Three extractors share one output type:

* ``greedy_extract``: best-first argmax with conflict housekeeping,
* ``head_extract``: the same rule on the decoder head's logits,
* ``dtw_extract``: weighted DTW on the global similarity, a piecewise-linear
  time mapping from the path and a per-pitch onset DTW that adds or
  overwrites matches.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numba
import numpy as np

from .augmentor import truth_from_origin
from .errors import ValidationError
from .inference import SENTINEL
from .midi_io import DEFAULT, NoteSequence

# direction codes in the backpointer matrix
_START, _DIAG, _UP, _LEFT = 0, 1, 2, 3
STEP_WEIGHTS = (2.0, 1.0, 1.0)  # diagonal (1,1), vertical (1,0), horizontal (0,1)


@dataclass
class MatchPrediction:
    pairs: list
    provenance: str = ""
    info: dict = field(default_factory=dict)

    def matches(self) -> list:
        return [p for p in self.pairs if p.idx1 != DEFAULT and p.idx2 != DEFAULT]


def _prediction(match2, n1, provenance, **info):
    return MatchPrediction(truth_from_origin(match2, n1), provenance, info)


# ----------------------------------------------------------------- DTW

@numba.njit(cache=True)
def _dtw_core(cost, w_diag, w_up, w_left):
    rows, cols = cost.shape
    back = np.zeros((rows, cols), dtype=np.uint8)
    prev = np.empty(cols)
    cur = np.empty(cols)
    for i in range(rows):
        for j in range(cols):
            c = cost[i, j]
            if i == 0 and j == 0:
                cur[j] = c
                back[i, j] = 0
                continue
            best = np.inf
            code = 0
            # candidate order fixes the tie-break: diagonal, vertical, horizontal
            if i > 0 and j > 0:
                v = prev[j - 1] + w_diag * c
                if v < best:
                    best = v
                    code = 1
            if i > 0:
                v = prev[j] + w_up * c
                if v < best:
                    best = v
                    code = 2
            if j > 0:
                v = cur[j - 1] + w_left * c
                if v < best:
                    best = v
                    code = 3
            cur[j] = best
            back[i, j] = code
        prev, cur = cur, prev
    total = prev[cols - 1]
    # backtrack
    n_steps = 1
    i, j = rows - 1, cols - 1
    while i > 0 or j > 0:
        code = back[i, j]
        if code == 1:
            i -= 1
            j -= 1
        elif code == 2:
            i -= 1
        else:
            j -= 1
        n_steps += 1
    path = np.empty((n_steps, 2), dtype=np.int64)
    i, j = rows - 1, cols - 1
    k = n_steps - 1
    path[k, 0] = i
    path[k, 1] = j
    while i > 0 or j > 0:
        code = back[i, j]
        if code == 1:
            i -= 1
            j -= 1
        elif code == 2:
            i -= 1
        else:
            j -= 1
        k -= 1
        path[k, 0] = i
        path[k, 1] = j
    return path, total


def weighted_dtw(cost, weights=STEP_WEIGHTS):
    """Minimal accumulated-cost monotone path through ``cost``.

    ``D(i, j) = w(step) * cost(i, j) + min(predecessor)`` with ``D(0, 0) =
    cost(0, 0)``. Returns ``(path, total)`` where ``path`` is an ``(L, 2)``
    integer array from ``(0, 0)`` to the bottom-right corner.
    """
    cost = np.ascontiguousarray(cost, dtype=np.float64)
    if cost.ndim != 2 or 0 in cost.shape:
        raise ValidationError(f"DTW needs a non-empty 2-D cost matrix, got shape {cost.shape}")
    if not np.all(np.isfinite(cost)):
        raise ValidationError("DTW cost matrix must be finite")
    w_diag, w_up, w_left = (float(w) for w in weights)
    return _dtw_core(cost, w_diag, w_up, w_left)


def weighted_dtw_path(cost, weights=STEP_WEIGHTS) -> np.ndarray:
    return weighted_dtw(cost, weights)[0]


def path_cost(cost, path, weights=STEP_WEIGHTS) -> float:
    """Accumulated weighted cost of an explicit path."""
    cost = np.asarray(cost, dtype=np.float64)
    path = np.asarray(path)
    w_diag, w_up, w_left = weights
    total = cost[path[0, 0], path[0, 1]]
    for (i0, j0), (i1, j1) in zip(path[:-1], path[1:]):
        di, dj = i1 - i0, j1 - j0
        w = w_diag if (di, dj) == (1, 1) else w_up if (di, dj) == (1, 0) else w_left
        total += w * cost[i1, j1]
    return float(total)


def similarity_to_cost(sim) -> np.ndarray:
    """``max - sim`` over the real-note block; uncovered cells keep a huge cost."""
    real = np.asarray(sim, dtype=np.float64)[1:, 1:]
    covered = real > SENTINEL / 2
    if not covered.any():
        raise ValidationError("similarity matrix has no covered cells")
    top = real[covered].max()
    return top - real


# ----------------------------------------------------------------- mapping

@dataclass
class TimeMapping:
    """Piecewise-linear map from s1 onset ticks to s2 onset ticks, clamped at the ends."""
    t1: np.ndarray
    t2: np.ndarray

    @classmethod
    def from_knots(cls, t1, t2) -> "TimeMapping":
        t1 = np.asarray(t1, dtype=np.float64)
        t2 = np.asarray(t2, dtype=np.float64)
        if not len(t1):
            raise ValidationError("time mapping needs at least one knot")
        order = np.argsort(t1, kind="stable")
        t1, t2 = t1[order], t2[order]
        keys, inverse = np.unique(t1, return_inverse=True)
        sums = np.bincount(inverse, weights=t2)
        counts = np.bincount(inverse)
        return cls(keys, sums / counts)

    def __call__(self, t):
        return np.interp(np.asarray(t, dtype=np.float64), self.t1, self.t2)


def path_to_mapping(path, s1: NoteSequence, s2: NoteSequence, covered=None) -> TimeMapping:
    """Knots from the onsets of every path step (indices into the real notes)."""
    path = np.asarray(path)
    if not len(path):
        raise ValidationError("empty warping path")
    if covered is not None:
        keep = covered[path[:, 0], path[:, 1]]
        if keep.any():
            path = path[keep]
    return TimeMapping.from_knots(s1.onset[path[:, 0]], s2.onset[path[:, 1]])


def one_to_one_steps(path) -> np.ndarray:
    """Path steps whose row and column both occur exactly once in the path."""
    path = np.asarray(path)
    if not len(path):
        return path.reshape(0, 2)
    _, inv_r, cnt_r = np.unique(path[:, 0], return_inverse=True, return_counts=True)
    _, inv_c, cnt_c = np.unique(path[:, 1], return_inverse=True, return_counts=True)
    return path[(cnt_r[inv_r] == 1) & (cnt_c[inv_c] == 1)]


# ----------------------------------------------------------------- refinement

def _assign(match1, match2, i, j):
    old_j = match1[i]
    if old_j != DEFAULT:
        match2[old_j] = DEFAULT
    old_i = match2[j]
    if old_i != DEFAULT:
        match1[old_i] = DEFAULT
    match1[i] = j
    match2[j] = i


def pitch_separated_refine(s1: NoteSequence, s2: NoteSequence, mapping: TimeMapping, base_path,
                           covered=None) -> MatchPrediction:
    """Per-pitch onset DTW between ``mapping(s1^p)`` and ``s2^p``.

    Matches start from the one-to-one, equal-pitch steps of ``base_path``.
    For each pitch (ascending) the one-to-one steps of an unweighted
    absolute-difference DTW overwrite earlier assignments of those notes.
    """
    n1, n2 = len(s1), len(s2)
    match1 = np.full(n1, DEFAULT, dtype=np.int64)
    match2 = np.full(n2, DEFAULT, dtype=np.int64)
    steps = one_to_one_steps(base_path)
    if covered is not None and len(steps):
        steps = steps[covered[steps[:, 0], steps[:, 1]]]
    for i, j in steps:
        if s1.pitch[i] == s2.pitch[j]:
            _assign(match1, match2, i, j)
    warped = mapping(s1.onset)
    refined = 0
    for p in np.intersect1d(s1.pitch, s2.pitch):
        idx1 = np.flatnonzero(s1.pitch == p)
        idx2 = np.flatnonzero(s2.pitch == p)
        cost = np.abs(warped[idx1][:, None] - s2.onset[idx2][None, :].astype(np.float64))
        path, _ = weighted_dtw(cost, (1.0, 1.0, 1.0))
        for a, b in one_to_one_steps(path):
            _assign(match1, match2, idx1[a], idx2[b])
            refined += 1
    matched = match2 != DEFAULT
    final_mapping = mapping
    if matched.any():
        final_mapping = TimeMapping.from_knots(s1.onset[match2[matched]], s2.onset[matched])
    return _prediction(match2, n1, "dtw", mapping=final_mapping, refined=refined)


def dtw_extract(global_sim, s1: NoteSequence, s2: NoteSequence, refine: bool = True) -> MatchPrediction:
    """Weighted DTW on the similarity, then pitch-separated refinement."""
    global_sim = np.asarray(global_sim)
    n1, n2 = len(s1), len(s2)
    if global_sim.shape != (n1 + 1, n2 + 1):
        raise ValidationError(f"similarity shape {global_sim.shape} does not fit {n1}x{n2} notes")
    covered = global_sim[1:, 1:] > SENTINEL / 2
    cost = similarity_to_cost(global_sim)
    path, total = weighted_dtw(cost)
    del cost
    mapping = path_to_mapping(path, s1, s2, covered)
    if not refine:
        match2 = np.full(n2, DEFAULT, dtype=np.int64)
        used = np.zeros(n1, bool)
        for i, j in one_to_one_steps(path):
            if covered[i, j] and s1.pitch[i] == s2.pitch[j] and not used[i]:
                match2[j] = i
                used[i] = True
        return _prediction(match2, n1, "dtw-path", mapping=mapping, path=path, path_cost=total)
    pred = pitch_separated_refine(s1, s2, mapping, path, covered)
    pred.info.update(path=path, path_cost=total, coarse_mapping=mapping)
    return pred


# ----------------------------------------------------------------- greedy

@numba.njit(cache=True)
def _greedy_core(scores, order, sentinel):
    n_rows, n_cols = scores.shape
    claimed = np.zeros(n_rows, dtype=np.bool_)
    out = np.full(n_cols, -1, dtype=np.int64)
    for t in range(n_cols):
        j = order[t]
        best = -np.inf
        arg = 0
        for i in range(n_rows):
            if i > 0 and claimed[i]:
                continue
            v = scores[i, j]
            if v <= sentinel:
                continue
            if v > best:
                best = v
                arg = i
        out[j] = arg - 1
        if arg > 0:
            claimed[arg] = True
    return out


def _greedy_columns(scores, provenance):
    """``scores`` is ``(n1 + 1, n2)``: row 0 the default note, one column per real s2 note."""
    scores = np.ascontiguousarray(scores, dtype=np.float64)
    masked = np.where(scores > SENTINEL / 2, scores, -np.inf)
    best = masked.max(axis=0) if masked.size else np.zeros(0)
    order = np.argsort(-best, kind="stable")
    match2 = _greedy_core(scores, order, SENTINEL / 2)
    return _prediction(match2, scores.shape[0] - 1, provenance)


def greedy_extract(sim) -> MatchPrediction:
    """Best-first argmax matching of s2 notes to unclaimed s1 notes or the default."""
    sim = np.asarray(sim)
    return _greedy_columns(sim[:, 1:], "greedy")


def head_extract(logits) -> MatchPrediction:
    """Argmax over the head's classes per s2 note, with greedy conflict housekeeping.

    ``logits`` has one row per real s2 note and ``n1 + 1`` classes.
    """
    return _greedy_columns(np.asarray(logits).T, "head")

