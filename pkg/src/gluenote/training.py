"""Training loop, batch assembly and checkpoint I/O."""
from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .augmentor import AugmentationConfig, AugmentedPair, make_training_pair
from .errors import CheckpointError, TrainingDivergence, ValidationError
from .midi_io import DEFAULT, AlignmentPair
from .model import (GlueNote, ModelConfig, argmax_accuracy, dual_ce_loss, head_ce_loss,
                    targets_from_alignment, window_ids)
from .tokenizer import TokenVocabulary

CHECKPOINT_FORMAT = "gluenote-checkpoint"
CHECKPOINT_VERSION = 1
VALIDATION_SEED_OFFSET = 1_000_003


def cosine_restart_lr(step: int, base_lr: float = 5e-4, period: int = 2000, min_lr: float = 0.0) -> float:
    """Cosine annealing with warm restarts every ``period`` steps."""
    t = step % period
    return min_lr + (base_lr - min_lr) * (1.0 + math.cos(math.pi * t / period)) / 2.0


@dataclass
class TrainConfig:
    steps: int = 200_000
    lr: float = 5e-4
    restart_interval: int = 2000
    batch_size: int | None = None  # None: take the model preset's batch size
    seed: int = 0
    log_every: int = 50
    val_every: int = 500
    val_pairs: int = 16
    checkpoint_every: int = 1000
    threads: int | None = 1
    stop_accuracy: float | None = None

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValidationError(f"unknown training options: {sorted(unknown)}")
        return cls(**d)


# ----------------------------------------------------------------- batches

def crop_pair(pair: AugmentedPair, window: int) -> AugmentedPair:
    """Keep the first ``window`` notes of each side, re-deriving the truth."""
    n1, n2 = min(len(pair.s1), window), min(len(pair.s2), window)
    if n1 == len(pair.s1) and n2 == len(pair.s2):
        return pair
    truth = []
    for a, b in pair.truth:
        # a note whose partner is cropped away becomes unmatched
        a = a if a != DEFAULT and a < n1 else DEFAULT
        b = b if b != DEFAULT and b < n2 else DEFAULT
        if a != DEFAULT or b != DEFAULT:
            truth.append(AlignmentPair(a, b))
    return AugmentedPair(pair.s1.take(slice(0, n1)), pair.s2.take(slice(0, n2)), truth, dict(pair.stats))


def encode_pair(pair: AugmentedPair, vocab: TokenVocabulary, window: int) -> dict:
    """Model inputs, targets and candidate masks for one (cropped) pair."""
    pair = crop_pair(pair, window)
    n1, n2 = len(pair.s1), len(pair.s2)
    t1, t2 = targets_from_alignment(pair.truth, n1, n2, window)
    v1 = np.zeros(window + 1, bool)
    v2 = np.zeros(window + 1, bool)
    v1[:n1 + 1] = True
    v2[:n2 + 1] = True
    return {"ids1": window_ids(pair.s1, vocab, window), "ids2": window_ids(pair.s2, vocab, window),
            "t1": t1, "t2": t2, "v1": v1, "v2": v2}


def collate(examples) -> dict:
    return {k: torch.as_tensor(np.stack([e[k] for e in examples])) for k in examples[0]}


def compute_losses(model: GlueNote, batch: dict):
    """Returns ``(total, parts, sim)``; parts maps loss names to floats."""
    sim = model(batch["ids1"], batch["ids2"])
    total, (l1, l2) = dual_ce_loss(sim, batch["t1"], batch["t2"], batch["v1"], batch["v2"])
    parts = {"s1": float(l1.detach()), "s2": float(l2.detach())}
    if model.head is not None:
        lh = head_ce_loss(model.head(sim), batch["t2"], batch["v1"])
        total = total + lh
        parts["head"] = float(lh.detach())
    return total, parts, sim


class PairSampler:
    """Deterministic augmented pairs keyed by ``(seed, step, slot)``."""

    def __init__(self, corpus, aug_config: AugmentationConfig, seed: int = 0):
        self.corpus = [s for s in corpus if len(s) >= aug_config.window]
        if not self.corpus:
            raise ValidationError(f"corpus has no sequence with at least {aug_config.window} notes")
        self.aug_config = aug_config
        self.seed = seed

    def pair(self, step: int, slot: int) -> AugmentedPair:
        rng = np.random.default_rng([self.seed, step, slot])
        seq = self.corpus[int(rng.integers(len(self.corpus)))]
        return make_training_pair(seq, self.aug_config, seed=rng)


# ----------------------------------------------------------------- checkpoints

def save_checkpoint(path, model: GlueNote, vocab: TokenVocabulary, train_state: dict | None = None,
                    optimizer: torch.optim.Optimizer | None = None) -> None:
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "model_config": model.config.to_dict(),
        "vocab": vocab.to_dict(),
        "state_dict": model.state_dict(),
        "train_state": dict(train_state or {}),
        "optimizer_state": optimizer.state_dict() if optimizer is not None else None,
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save(payload, tmp)
    tmp.replace(path)


def read_checkpoint(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint not found: {path}")
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as exc:  # noqa: BLE001 - torch raises many types here
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path} is not a gluenote checkpoint")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {payload.get('version')}")
    return payload


def load_checkpoint(path, vocab: TokenVocabulary | None = None):
    """Rebuild the model stored at ``path``. Returns ``(model, vocab, payload)``."""
    payload = read_checkpoint(path)
    stored = TokenVocabulary.from_dict(payload["vocab"])
    if vocab is not None and vocab != stored:
        raise CheckpointError("checkpoint vocabulary differs from the tokenizer vocabulary")
    config = ModelConfig.from_dict(payload["model_config"])
    model = GlueNote(config, stored.sizes)
    try:
        model.load_state_dict(payload["state_dict"])
    except RuntimeError as exc:
        raise CheckpointError(f"parameters do not fit the stored config: {exc}") from exc
    model.eval()
    return model, stored, payload


# ----------------------------------------------------------------- training

@dataclass
class TrainResult:
    model: GlueNote
    step: int
    history: list = field(default_factory=list)
    checkpoint: Path | None = None


def _evaluate(model, val_batches):
    model.eval()
    losses, hits = [], []
    with torch.no_grad():
        for batch in val_batches:
            loss, _, sim = compute_losses(model, batch)
            losses.append(float(loss))
            hits.append(argmax_accuracy(sim, batch["t1"], batch["t2"], batch["v1"], batch["v2"]))
    model.train()
    return float(np.mean(losses)), float(np.mean(hits))


def train(corpus, model_config: ModelConfig, aug_config: AugmentationConfig | None = None,
          train_config: TrainConfig | None = None, out_dir=None, vocab: TokenVocabulary | None = None,
          resume=None, fixed_pair: AugmentedPair | None = None, val_corpus=None,
          log=None) -> TrainResult:
    """Train a model on augmented pairs drawn from ``corpus``.

    With ``fixed_pair`` every batch slot is that single pair (overfitting
    check); ``corpus`` may then be empty. ``resume`` is a checkpoint path
    whose parameters, optimizer moments and step counter are restored.
    """
    train_config = train_config or TrainConfig()
    aug_config = aug_config or AugmentationConfig()
    vocab = vocab or TokenVocabulary.default()
    if aug_config.window != model_config.window:
        raise ValidationError("augmentation window and model window differ")
    if train_config.threads:
        torch.set_num_threads(train_config.threads)
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
    batch_size = train_config.batch_size or model_config.batch_size
    window = model_config.window

    torch.manual_seed(train_config.seed)
    model = GlueNote(model_config, vocab.sizes)
    optimizer = torch.optim.Adam(model.parameters(), lr=train_config.lr)
    step = 0
    if resume is not None:
        payload = read_checkpoint(resume)
        if ModelConfig.from_dict(payload["model_config"]) != model_config:
            raise CheckpointError("resume checkpoint was trained with a different model config")
        model.load_state_dict(payload["state_dict"])
        if payload.get("optimizer_state") is not None:
            optimizer.load_state_dict(payload["optimizer_state"])
        step = int(payload["train_state"].get("step", 0))

    if fixed_pair is not None:
        example = encode_pair(fixed_pair, vocab, window)
        fixed_batch = collate([example] * batch_size)
        val_batches = [collate([example])]
        sampler = None
    else:
        sampler = PairSampler(corpus, aug_config, train_config.seed)
        val_sampler = PairSampler(val_corpus if val_corpus is not None else corpus, aug_config,
                                  train_config.seed + VALIDATION_SEED_OFFSET)
        val_examples = [encode_pair(val_sampler.pair(0, i), vocab, window)
                        for i in range(train_config.val_pairs)]
        val_batches = [collate(val_examples[i:i + batch_size])
                       for i in range(0, len(val_examples), batch_size)]

    metrics = open(out_dir / "metrics.jsonl", "a") if out_dir is not None else None
    history, window_losses = [], []
    ckpt_path = out_dir / "checkpoint.pt" if out_dir is not None else None

    def state(s):
        return {"step": s, "seed": train_config.seed, "lr": cosine_restart_lr(
            s, train_config.lr, train_config.restart_interval), "optimizer": "adam",
            "betas": list(optimizer.defaults["betas"]), "train_config": train_config.to_dict(),
            "aug_config": aug_config.to_dict()}

    model.train()
    t_start = time.time()
    try:
        while step < train_config.steps:
            lr = cosine_restart_lr(step, train_config.lr, train_config.restart_interval)
            for group in optimizer.param_groups:
                group["lr"] = lr
            if sampler is None:
                batch = fixed_batch
            else:
                batch = collate([encode_pair(sampler.pair(step, b), vocab, window)
                                 for b in range(batch_size)])
            loss, parts, sim = compute_losses(model, batch)
            if not torch.isfinite(loss):
                dump = None
                if out_dir is not None:
                    dump = out_dir / f"divergence_step{step}.json"
                    dump.write_text(json.dumps({"step": step, "lr": lr, "losses": parts,
                                                "seed": train_config.seed}, indent=2))
                raise TrainingDivergence(f"non-finite loss at step {step}", step=step, dump_path=dump)
            optimizer.zero_grad(set_to_none=True)
            loss.backward()
            optimizer.step()
            step += 1
            window_losses.append(float(loss.detach()))

            do_val = step % train_config.val_every == 0 or step == train_config.steps
            do_log = step % train_config.log_every == 0 or do_val
            record = None
            if do_log:
                record = {"step": step, "TL": float(np.mean(window_losses)), "VL": None, "VA": None,
                          "LR": lr}
                window_losses = []
            if do_val or train_config.stop_accuracy is not None and do_log:
                record["VL"], record["VA"] = _evaluate(model, val_batches)
            if record is not None:
                record["elapsed"] = round(time.time() - t_start, 3)
                history.append(record)
                if metrics is not None:
                    metrics.write(json.dumps(record) + "\n")
                    metrics.flush()
                if log is not None:
                    log(record)
            if ckpt_path is not None and step % train_config.checkpoint_every == 0:
                save_checkpoint(ckpt_path, model, vocab, state(step), optimizer)
            if (train_config.stop_accuracy is not None and record is not None
                    and record["VA"] is not None and record["VA"] >= train_config.stop_accuracy):
                break
    finally:
        if metrics is not None:
            metrics.close()
    if ckpt_path is not None:
        save_checkpoint(ckpt_path, model, vocab, state(step), optimizer)
    model.eval()
    return TrainResult(model, step, history, ckpt_path)
