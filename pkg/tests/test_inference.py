import numpy as np
import pytest
import torch

from gluenote.errors import CheckpointError, EmptySequenceError
from gluenote.extractors import dtw_extract, greedy_extract, head_extract
from gluenote.inference import SENTINEL, infer_global_similarity, window_pairs, window_starts
from gluenote.midi_io import NoteSequence
from gluenote.model import PRESETS, GlueNote, window_ids

from conftest import random_sequence
from oracles import check_alignment


@pytest.fixture(scope="module")
def tiny(vocab):
    torch.manual_seed(0)
    return GlueNote(PRESETS["tiny"], vocab.sizes).eval()


def direct_local(model, vocab, a, b, head=False):
    ids1 = torch.as_tensor(window_ids(a, vocab, 512))[None]
    ids2 = torch.as_tensor(window_ids(b, vocab, 512))[None]
    with torch.no_grad():
        sim = model(ids1, ids2)
        out = sim[0, :len(a) + 1, :len(b) + 1].double().numpy()
        if head:
            return out, model.head(sim)[0, :len(b), :len(a) + 1].double().numpy()
    return out


def test_window_starts():
    assert window_starts(100) == [0]
    assert window_starts(512) == [0]
    assert window_starts(513) == [0, 256]
    assert window_starts(768) == [0, 256]
    assert window_starts(769) == [0, 256, 512]
    for n in range(513, 3000, 37):
        starts = window_starts(n)
        assert starts[-1] + 512 >= n and starts[-1] < n


def test_window_pairs_repeat_last():
    assert window_pairs(1000, 300) == [(0, 0), (256, 0), (512, 0)]
    assert window_pairs(600, 600) == [(0, 0), (256, 256)]


def test_single_window_bit_exact(tiny, vocab):
    s1, s2 = random_sequence(300, seed=1), random_sequence(512, seed=2)
    g = infer_global_similarity(s1, s2, tiny, vocab, with_head=True)
    ref, ref_head = direct_local(tiny, vocab, s1, s2, head=True)
    assert g.sim.shape == (301, 513)
    assert np.array_equal(g.sim, ref)
    assert np.array_equal(g.head_logits, ref_head)


def test_768_overlap_is_mean(tiny, vocab):
    s1, s2 = random_sequence(768, seed=3), random_sequence(768, seed=4)
    g = infer_global_similarity(s1, s2, tiny, vocab, with_head=True)
    a = direct_local(tiny, vocab, s1.take(slice(0, 512)), s2.take(slice(0, 512)), head=True)
    b = direct_local(tiny, vocab, s1.take(slice(256, 768)), s2.take(slice(256, 768)), head=True)
    # real-note overlap block: global rows/cols 257..512
    overlap = g.sim[257:513, 257:513]
    expect = (a[0][257:513, 257:513] + b[0][1:257, 1:257]) / 2
    np.testing.assert_allclose(overlap, expect, rtol=1e-6, atol=1e-6)
    # cells covered by one window only
    np.testing.assert_allclose(g.sim[1:257, 1:257], a[0][1:257, 1:257], rtol=1e-6, atol=1e-6)
    np.testing.assert_allclose(g.sim[513:, 513:], b[0][257:, 257:], rtol=1e-6, atol=1e-6)
    # default column and row are averaged over the windows touching them
    np.testing.assert_allclose(g.sim[300, 0], (a[0][300, 0] + b[0][300 - 256, 0]) / 2, rtol=1e-6, atol=1e-6)
    np.testing.assert_allclose(g.sim[0, 0], (a[0][0, 0] + b[0][0, 0]) / 2, rtol=1e-6, atol=1e-6)
    np.testing.assert_allclose(g.sim[0, 600], b[0][0, 600 - 256], rtol=1e-6, atol=1e-6)
    # head logits overlap the same way
    np.testing.assert_allclose(g.head_logits[300, 301], (a[1][300, 301] + b[1][44, 45]) / 2,
                               rtol=1e-6, atol=1e-6)


def test_uncovered_cells_hold_sentinel(tiny, vocab):
    s1, s2 = random_sequence(768, seed=5), random_sequence(768, seed=6)
    g = infer_global_similarity(s1, s2, tiny, vocab)
    assert np.all(g.sim[1:257, 513:] == SENTINEL)
    assert np.all(g.sim[513:, 1:257] == SENTINEL)
    assert g.covered()[1:, 1:].sum() == 768 * 768 - 2 * 256 * 256
    # no extractor selects a sentinel cell
    dtw = dtw_extract(g.sim, s1, s2)
    assert not check_alignment([tuple(p) for p in dtw.pairs], s1.pitch, s2.pitch)
    for pred in (greedy_extract(g.sim), dtw):
        for i, j in pred.matches():
            assert g.sim[i + 1, j + 1] > SENTINEL / 2


def test_unequal_lengths(tiny, vocab):
    s1, s2 = random_sequence(900, seed=7), random_sequence(520, seed=8)
    g = infer_global_similarity(s1, s2, tiny, vocab, with_head=True)
    assert g.sim.shape == (901, 521) and g.head_logits.shape == (520, 901)
    assert np.isfinite(g.sim).all()
    pred = head_extract(g.head_logits)
    assert len({p.idx2 for p in pred.pairs if p.idx2 >= 0}) == 520


def test_inference_errors(tiny, vocab):
    with pytest.raises(EmptySequenceError):
        infer_global_similarity(NoteSequence(), random_sequence(5), tiny, vocab)
    other = GlueNote(PRESETS["tiny"], (10, 129, 121, 33))
    with pytest.raises(CheckpointError):
        infer_global_similarity(random_sequence(5), random_sequence(5), other, vocab)
