"""Export multi-part works from the music21 corpus as MIDI files.

Writes ``<out>/train/*.mid`` and ``<out>/heldout/*.mid``; every file has at
least ``--min-notes`` notes. The split is deterministic (sorted paths,
every fifth file held out).

    python3 scripts/build_public_corpus.py data/public_corpus
"""
import argparse
import sys
import warnings
from pathlib import Path

import numpy as np

from gluenote.midi_io import TICKS_PER_BEAT, NoteSequence, write_midi

COMPOSERS = ("beethoven", "mozart", "haydn", "schumann", "joplin", "schubert", "chopin", "handel",
             "corelli", "monteverdi", "verdi", "weber", "dvorak", "grieg")


def score_to_sequence(path):
    import music21

    score = music21.converter.parse(str(path)).stripTies()
    rows = []
    for el in score.flatten().notes:
        onset = int(round(float(el.getOffsetInHierarchy(score)) * TICKS_PER_BEAT))
        dur = max(1, int(round(float(el.quarterLength) * TICKS_PER_BEAT)))
        vel = el.volume.velocity if el.volume.velocity is not None else 64
        pitches = el.pitches if hasattr(el, "pitches") else [el.pitch]
        for p in pitches:
            if 0 <= p.midi <= 127:
                rows.append((onset, int(p.midi), dur, int(vel)))
    if not rows:
        return None
    a = np.array(rows, dtype=np.int64)
    return NoteSequence(a[:, 0], a[:, 1], a[:, 2], np.clip(a[:, 3], 1, 127)).sorted()


def main(argv=None):
    import music21

    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("out")
    ap.add_argument("--min-notes", type=int, default=600)
    ap.add_argument("--max-files", type=int, default=60)
    args = ap.parse_args(argv)
    out = Path(args.out)
    (out / "train").mkdir(parents=True, exist_ok=True)
    (out / "heldout").mkdir(parents=True, exist_ok=True)
    paths = []
    for composer in COMPOSERS:
        paths += sorted(str(p) for p in music21.corpus.getComposer(composer))
    kept, seen = 0, set()
    for path in paths:
        if kept >= args.max_files:
            break
        rel = Path(path).relative_to(Path(music21.__file__).parent / "corpus")
        name = "_".join(rel.with_suffix("").parts)
        if name in seen:  # same work in another encoding
            continue
        try:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                seq = score_to_sequence(path)
        except Exception as exc:  # noqa: BLE001 - corpus files fail in many ways
            print(f"skip {path}: {exc}", file=sys.stderr)
            continue
        if seq is None or len(seq) < args.min_notes:
            continue
        seen.add(name)
        split = "heldout" if kept % 5 == 4 else "train"
        write_midi(seq, out / split / f"{name}.mid")
        kept += 1
        print(f"{split:8s} {len(seq):6d} {name}", flush=True)
    print(f"{kept} files written to {out}")


if __name__ == "__main__":
    main()
