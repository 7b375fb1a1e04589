import json

import numpy as np
import pytest
import torch

from gluenote import training
from gluenote.augmentor import AugmentationConfig, AugmentedPair
from gluenote.errors import CheckpointError, TrainingDivergence, ValidationError
from gluenote.midi_io import DEFAULT, AlignmentPair
from gluenote.model import GlueNote, ModelConfig
from gluenote.tokenizer import TokenVocabulary
from gluenote.training import (PairSampler, TrainConfig, cosine_restart_lr, crop_pair, encode_pair,
                               load_checkpoint, read_checkpoint, save_checkpoint, train)

from conftest import random_sequence

W = 32
MICRO = ModelConfig(residual_dim=16, num_blocks=1, num_heads=2, batch_size=2, head_blocks=1, window=W)
AUG = AugmentationConfig(window=W, repeat_length=(2, 6), skip_length=(2, 6), trill_length=(2, 6))


@pytest.fixture(scope="module")
def corpus():
    return [random_sequence(60, seed=s) for s in range(3)]


def quiet(**kw):
    base = dict(steps=6, log_every=1, val_every=3, val_pairs=2, checkpoint_every=3)
    base.update(kw)
    return TrainConfig(**base)


# ------------------------------------------------------------- LR schedule

def test_lr_restarts():
    assert cosine_restart_lr(0) == 5e-4
    for k in range(1, 6):
        assert cosine_restart_lr(2000 * k) == 5e-4
    assert cosine_restart_lr(1000) == pytest.approx(2.5e-4)
    assert cosine_restart_lr(1999) < 1e-9


def test_lr_matches_torch_scheduler():
    p = torch.nn.Parameter(torch.zeros(1))
    opt = torch.optim.SGD([p], lr=5e-4)
    sched = torch.optim.lr_scheduler.CosineAnnealingWarmRestarts(opt, T_0=2000)
    for step in range(6001):
        if step % 97 == 0 or step % 2000 in (0, 1, 1999):
            assert opt.param_groups[0]["lr"] == pytest.approx(cosine_restart_lr(step), rel=1e-9, abs=1e-15)
        opt.step()
        sched.step()


# -------------------------------------------------------------------- batches

def test_crop_reindexes_truth():
    s = random_sequence(10)
    truth = [AlignmentPair(i, 9 - i) for i in range(10)]
    pair = crop_pair(AugmentedPair(s, s, truth), 6)
    assert len(pair.s1) == len(pair.s2) == 6
    got = sorted(pair.truth, key=lambda p: (p.idx1 if p.idx1 != DEFAULT else 99, p.idx2))
    assert got == [(0, DEFAULT), (1, DEFAULT), (2, DEFAULT), (3, DEFAULT), (4, 5), (5, 4),
                   (DEFAULT, 0), (DEFAULT, 1), (DEFAULT, 2), (DEFAULT, 3)]


def test_encode_pair_masks(vocab):
    s1, s2 = random_sequence(5), random_sequence(3)
    pair = AugmentedPair(s1, s2, [AlignmentPair(0, 0), AlignmentPair(1, DEFAULT), AlignmentPair(2, 1),
                                  AlignmentPair(3, DEFAULT), AlignmentPair(4, 2)])
    ex = encode_pair(pair, vocab, 8)
    assert ex["ids1"].shape == (9, 4)
    assert ex["v1"].tolist() == [True] * 6 + [False] * 3
    assert ex["v2"].tolist() == [True] * 4 + [False] * 5
    assert list(ex["t2"][:3]) == [1, 3, 5]


def test_sampler_deterministic(corpus):
    a, b = PairSampler(corpus, AUG, 5), PairSampler(corpus, AUG, 5)
    assert a.pair(3, 1).truth == b.pair(3, 1).truth
    assert a.pair(3, 1).s2 == b.pair(3, 1).s2
    with pytest.raises(ValidationError):
        PairSampler([random_sequence(10)], AUG)


# ---------------------------------------------------------------- training

def test_equal_seeds_identical_curves(tmp_path, corpus):
    r1 = train(corpus, MICRO, AUG, quiet(), out_dir=tmp_path / "a")
    r2 = train(corpus, MICRO, AUG, quiet(), out_dir=tmp_path / "b")
    tl = lambda r: [(h["step"], h["TL"], h["VL"], h["VA"]) for h in r.history]
    assert tl(r1) == tl(r2)
    assert len(r1.history) == 6 and r1.history[2]["VL"] is not None
    lines = (tmp_path / "a" / "metrics.jsonl").read_text().splitlines()
    assert [json.loads(x)["step"] for x in lines] == [1, 2, 3, 4, 5, 6]
    assert set(json.loads(lines[0])) == {"step", "TL", "VL", "VA", "LR", "elapsed"}


def test_resume_equivalence(tmp_path, corpus):
    full = train(corpus, MICRO, AUG, quiet(), out_dir=tmp_path / "full")
    train(corpus, MICRO, AUG, quiet(steps=3), out_dir=tmp_path / "half")
    resumed = train(corpus, MICRO, AUG, quiet(), out_dir=tmp_path / "resumed",
                    resume=tmp_path / "half" / "checkpoint.pt")
    assert resumed.step == 6
    assert [h["TL"] for h in resumed.history] == [h["TL"] for h in full.history[3:]]
    for (k, a), b in zip(full.model.state_dict().items(), resumed.model.state_dict().values()):
        assert torch.equal(a, b), k


def test_resume_rejects_other_config(tmp_path, corpus):
    train(corpus, MICRO, AUG, quiet(steps=1), out_dir=tmp_path / "a")
    other = ModelConfig(**{**MICRO.to_dict(), "residual_dim": 8})
    with pytest.raises(CheckpointError):
        train(corpus, other, AUG, quiet(steps=2), resume=tmp_path / "a" / "checkpoint.pt")


def test_window_mismatch_rejected(corpus):
    with pytest.raises(ValidationError):
        train(corpus, MICRO, AugmentationConfig(), quiet(steps=1))


def test_loss_decreases_on_fixed_pair():
    s = random_sequence(W, seed=4)
    pair = AugmentedPair(s, s, [AlignmentPair(i, i) for i in range(W)])
    r = train([], MICRO, AUG, quiet(steps=60, log_every=20, val_every=60), fixed_pair=pair)
    assert r.history[-1]["TL"] < r.history[0]["TL"]


def test_divergence_dump(tmp_path, corpus, monkeypatch):
    real = training.compute_losses
    calls = {"n": 0}

    def poisoned(model, batch):
        total, parts, sim = real(model, batch)
        calls["n"] += 1
        if model.training and calls["n"] >= 3:
            total = total * float("nan")
        return total, parts, sim

    monkeypatch.setattr(training, "compute_losses", poisoned)
    with pytest.raises(TrainingDivergence) as err:
        train(corpus, MICRO, AUG, quiet(val_every=100), out_dir=tmp_path)
    assert err.value.step == 2
    dump = json.loads((tmp_path / "divergence_step2.json").read_text())
    assert dump["step"] == 2 and "losses" in dump


# ------------------------------------------------------------- checkpoints

def test_checkpoint_roundtrip(tmp_path, vocab):
    torch.manual_seed(0)
    model = GlueNote(MICRO, vocab.sizes)
    save_checkpoint(tmp_path / "m.pt", model, vocab, {"step": 7})
    back, v, payload = load_checkpoint(tmp_path / "m.pt", vocab)
    assert v == vocab and payload["train_state"]["step"] == 7
    assert back.config == MICRO
    for a, b in zip(model.state_dict().values(), back.state_dict().values()):
        assert torch.equal(a, b)


def test_checkpoint_errors(tmp_path, vocab):
    with pytest.raises(CheckpointError, match="not found"):
        read_checkpoint(tmp_path / "missing.pt")
    (tmp_path / "junk.pt").write_bytes(b"not a checkpoint")
    with pytest.raises(CheckpointError):
        read_checkpoint(tmp_path / "junk.pt")
    torch.save({"format": "other"}, tmp_path / "other.pt")
    with pytest.raises(CheckpointError, match="not a gluenote"):
        read_checkpoint(tmp_path / "other.pt")
    model = GlueNote(MICRO, vocab.sizes)
    save_checkpoint(tmp_path / "m.pt", model, vocab)
    other_vocab = TokenVocabulary(list(vocab.time_shift_bins), list(vocab.duration_bins), [1, 64, 127])
    with pytest.raises(CheckpointError, match="vocabulary"):
        load_checkpoint(tmp_path / "m.pt", other_vocab)
    payload = torch.load(tmp_path / "m.pt", weights_only=True)
    payload["model_config"]["residual_dim"] = 8
    torch.save(payload, tmp_path / "bad.pt")
    with pytest.raises(CheckpointError, match="do not fit"):
        load_checkpoint(tmp_path / "bad.pt")


def test_train_config_rejects_unknown():
    with pytest.raises(ValidationError):
        TrainConfig.from_dict({"stepz": 3})
    assert TrainConfig.from_dict(TrainConfig().to_dict()) == TrainConfig()
