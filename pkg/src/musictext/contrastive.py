"""NT-Xent training of the two-tower model.

Each epoch visits every training track once in random order, pairing a
random 10 s crop of its audio with a freshly sampled text. Validation
mAP@10 drives a plateau schedule: the learning rate is divided after a few
epochs without improvement, training stops after more, and the weights of
the best epoch are restored at the end.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np
import torch

from .audio import AudioClip, fit_length
from .encoders import TowerModel, encode_texts, featurize_audio
from .evalharness import EvalCollection, embed_block_features, retrieval_metrics
from .relevance import block_features
from .textminer import MinedDescription

logger = logging.getLogger(__name__)


@dataclass
class LossConfig:
    temperature: float = 0.07
    direction: str = "audio_to_text"  # or "symmetric"

    def __post_init__(self):
        if not self.temperature > 0:
            raise ValueError(f"temperature must be positive, got {self.temperature}")
        if self.direction not in ("audio_to_text", "symmetric"):
            raise ValueError(f"unknown loss direction {self.direction!r}")


def nt_xent_loss(s, cfg: LossConfig | None = None):
    """Mean over anchors of -log softmax(s / tau) at the matching pair.

    Rows of ``s`` are audio anchors and columns texts. In symmetric mode the
    row-wise and column-wise losses are averaged. Tensors in give a tensor
    (differentiable) out; anything else gives a float.
    """
    cfg = cfg or LossConfig()
    is_tensor = isinstance(s, torch.Tensor)
    t = s if is_tensor else torch.as_tensor(np.asarray(s, dtype=np.float64))
    if t.ndim != 2 or t.shape[0] != t.shape[1] or t.shape[0] == 0:
        raise ValueError(f"similarity matrix must be square and non-empty, got shape {tuple(t.shape)}")
    logits = t / cfg.temperature
    diag = logits.diagonal()
    loss = (torch.logsumexp(logits, dim=1) - diag).mean()
    if cfg.direction == "symmetric":
        loss = (loss + (torch.logsumexp(logits, dim=0) - diag).mean()) / 2
    return loss if is_tensor else float(loss)


# --- batch construction -----------------------------------------------------


@dataclass
class BatchSpec:
    batch_size: int = 64
    max_aspects_per_text: int = 5
    aspect_join_delimiter: str = ", "
    sentence_join_delimiter: str = " "

    def __post_init__(self):
        if self.batch_size < 2:
            raise ValueError("batch_size must be at least 2")


@dataclass
class SentenceSampleRule:
    mode: str = "random_subset"  # or "consecutive_prefix"

    def __post_init__(self):
        if self.mode not in ("random_subset", "consecutive_prefix"):
            raise ValueError(f"unknown sentence sampling mode {self.mode!r}")


def _random_subset(items, limit, rng):
    n = min(limit, len(items))
    return [items[i] for i in rng.choice(len(items), size=n, replace=False)]


def sample_text(desc: MinedDescription, rule: SentenceSampleRule, spec: BatchSpec, rng) -> str:
    """Draw one training text for a track.

    A fair coin picks aspects or sentences when both exist. Aspects: a random
    subset of ``min(max_aspects_per_text, available)``, joined. Sentences: the same
    procedure, or for ``consecutive_prefix`` the first n sentences with n
    uniform in 1..S.
    """
    if desc.is_empty():
        raise ValueError(f"track {desc.track_id} has no texts to sample")
    use_aspects = bool(desc.aspects) and (not desc.sentences or rng.random() < 0.5)
    if use_aspects:
        chosen = _random_subset(desc.aspects, spec.max_aspects_per_text, rng)
        return spec.aspect_join_delimiter.join(chosen)
    if rule.mode == "consecutive_prefix":
        n = int(rng.integers(1, len(desc.sentences) + 1))
        chosen = desc.sentences[:n]
    else:
        chosen = _random_subset(desc.sentences, spec.max_aspects_per_text, rng)
    return spec.sentence_join_delimiter.join(chosen)


def crop_audio(clip: AudioClip, length_s: float = 10.0, rng=None) -> AudioClip:
    """Uniformly placed window of exactly ``length_s``; shorter clips are zero-padded."""
    n = int(round(length_s * clip.sample_rate))
    if len(clip) <= n:
        return fit_length(clip, n)
    rng = rng if rng is not None else np.random.default_rng()
    start = int(rng.integers(0, len(clip) - n + 1))
    return AudioClip(clip.samples[start : start + n], clip.sample_rate)


# --- schedule ---------------------------------------------------------------


@dataclass
class TrainSchedule:
    initial_lr: float = 1e-4
    lr_decay_factor: float = 10.0
    lr_patience_epochs: int = 5
    early_stop_patience_epochs: int = 10
    max_epochs: int = 200
    monitored_metric: str = "mAP@10"

    def __post_init__(self):
        if self.lr_patience_epochs < 1 or self.early_stop_patience_epochs < 1:
            raise ValueError("patience values must be positive")
        if not self.lr_decay_factor > 1:
            raise ValueError("lr_decay_factor must exceed 1")
        if not self.initial_lr > 0:
            raise ValueError("initial_lr must be positive")


class PlateauTracker:
    """Patience bookkeeping for one training run.

    Only a score strictly above the best so far counts as an improvement.
    The stop check runs before the decay check, so the epoch that ends
    training never also decays the learning rate; after a decay the
    learning-rate patience counter starts over.
    """

    def __init__(self, schedule: TrainSchedule):
        self.schedule = schedule
        self.lr = schedule.initial_lr
        self.best = -math.inf
        self.best_epoch: int | None = None
        self.epoch = 0
        self.stale = 0
        self.lr_stale = 0
        self.stopped = False
        self.decay_epochs: list[int] = []

    def update(self, score: float) -> bool:
        """Record one epoch's score; returns whether it is a new best."""
        if self.stopped:
            raise RuntimeError("training already stopped")
        self.epoch += 1
        if score > self.best:
            self.best, self.best_epoch = score, self.epoch
            self.stale = self.lr_stale = 0
            return True
        self.stale += 1
        self.lr_stale += 1
        if self.stale >= self.schedule.early_stop_patience_epochs:
            self.stopped = True
        elif self.lr_stale >= self.schedule.lr_patience_epochs:
            self.lr /= self.schedule.lr_decay_factor
            self.lr_stale = 0
            self.decay_epochs.append(self.epoch)
        return False


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    score: float
    lr: float


@dataclass
class TrainingHistory:
    epochs: list[EpochRecord] = field(default_factory=list)
    best_epoch: int | None = None
    best_score: float | None = None
    stopped_early: bool = False
    decay_epochs: list[int] = field(default_factory=list)

    def write(self, path) -> None:
        """JSON Lines: one object per epoch, then a summary line."""
        with open(path, "w", encoding="utf-8") as fh:
            for rec in self.epochs:
                fh.write(json.dumps(asdict(rec)) + "\n")
            summary = {
                "best_epoch": self.best_epoch,
                "best_score": self.best_score,
                "stopped_early": self.stopped_early,
                "decay_epochs": self.decay_epochs,
            }
            fh.write(json.dumps({"summary": summary}) + "\n")


class TrainingAborted(RuntimeError):
    def __init__(self, message, history: TrainingHistory):
        super().__init__(message)
        self.history = history


# --- training loop ----------------------------------------------------------


@dataclass
class TrainItem:
    track_id: str
    clip: AudioClip
    description: MinedDescription


def retrieval_evaluator(model: TowerModel, valid: EvalCollection, metric: str = "mAP@10") -> Callable:
    """Validation scorer reusing block features across epochs."""
    index = valid.relevance_index()
    index.check(valid.track_ids)
    queries = list(index.queries)
    if not queries:
        raise ValueError("validation set has no usable queries")
    feats = [block_features(model, c) for c in valid.clips]
    k = int(metric.split("@")[1])

    def evaluate(m: TowerModel) -> float:
        audio = embed_block_features(m, feats)
        metrics = retrieval_metrics(audio, valid.track_ids, encode_texts(m, queries), queries, index, ks=(k,))
        return metrics[metric]

    return evaluate


def _snapshot(model):
    return {k: v.detach().clone() for k, v in model.state_dict().items()}


def train(
    model: TowerModel,
    train_set: Sequence[TrainItem],
    valid_set: EvalCollection | None,
    spec: BatchSpec | None = None,
    schedule: TrainSchedule | None = None,
    seed: int = 0,
    loss_cfg: LossConfig | None = None,
    sentence_rule: SentenceSampleRule | None = None,
    evaluator: Callable[[TowerModel], float] | None = None,
    on_epoch_end: Callable[[TowerModel, EpochRecord], None] | None = None,
) -> tuple[TowerModel, TrainingHistory]:
    """Train in place and return the model restored to its best validation epoch.

    ``evaluator`` overrides the default validation mAP@10 scorer built from
    ``valid_set``. If evaluation raises, :class:`TrainingAborted` carries the
    partial history.
    """
    spec = spec or BatchSpec()
    schedule = schedule or TrainSchedule()
    loss_cfg = loss_cfg or LossConfig()
    sentence_rule = sentence_rule or SentenceSampleRule()
    items = [it for it in train_set if not it.description.is_empty()]
    if len(items) < 2:
        raise ValueError("need at least two training tracks with texts")
    if evaluator is None:
        if valid_set is None or len(valid_set) == 0:
            raise ValueError("empty validation set")
        evaluator = retrieval_evaluator(model, valid_set, schedule.monitored_metric)

    rng = np.random.default_rng(seed)
    tracker = PlateauTracker(schedule)
    opt = torch.optim.Adam(model.parameters(), lr=tracker.lr)
    history = TrainingHistory()
    best_state = _snapshot(model)
    cfg = model.config

    while tracker.epoch < schedule.max_epochs and not tracker.stopped:
        model.train()
        lr = tracker.lr
        for group in opt.param_groups:
            group["lr"] = lr
        order = rng.permutation(len(items))
        losses = []
        for b in range(0, len(order), spec.batch_size):
            batch = [items[i] for i in order[b : b + spec.batch_size]]
            if len(batch) < 2:
                continue
            clips = [crop_audio(it.clip, cfg.clip_seconds, rng) for it in batch]
            texts = [sample_text(it.description, sentence_rule, spec, rng) for it in batch]
            feats = torch.as_tensor(np.stack([featurize_audio(c, cfg.features) for c in clips]))
            s = model.embed_features(feats) @ model.embed_texts(texts).T
            loss = nt_xent_loss(s, loss_cfg)
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(loss.item())
        try:
            score = float(evaluator(model))
        except Exception as exc:
            raise TrainingAborted(f"validation failed after epoch {tracker.epoch + 1}: {exc}", history) from exc
        if tracker.update(score):
            best_state = _snapshot(model)
        rec = EpochRecord(tracker.epoch, float(np.mean(losses)) if losses else math.nan, score, lr)
        history.epochs.append(rec)
        logger.info("epoch %d loss %.4f %s %.4f lr %.2g", rec.epoch, rec.loss, schedule.monitored_metric, score, lr)
        if on_epoch_end is not None:
            on_epoch_end(model, rec)

    model.load_state_dict(best_state)
    model.eval()
    history.best_epoch = tracker.best_epoch
    history.best_score = tracker.best if tracker.best_epoch else None
    history.stopped_early = tracker.stopped
    history.decay_epochs = list(tracker.decay_epochs)
    return model, history
