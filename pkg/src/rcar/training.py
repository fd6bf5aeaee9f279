"""Hardest-negative hinge loss and the training loop."""

from __future__ import annotations

import logging
import os
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np
import torch

from . import checkpoint as ckpt_io
from .datamodel import PairedData
from .encoders import collate_captions, stack_regions
from .errors import ConfigError, ShapeError, TrainingError
from .evaluation import RetrievalReport, bidirectional_recall
from .pipeline import MatchingModel, PipelineConfig

log = logging.getLogger(__name__)


@dataclass
class LossConfig:
    margin: float = 0.2
    batch_size: int = 128

    def __post_init__(self):
        if not self.margin > 0:
            raise ConfigError(f"margin must be > 0, got {self.margin}")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")


@dataclass
class TrainSchedule:
    """Adam learning-rate phases as ``(lr, epochs)`` pairs."""

    phases: tuple[tuple[float, int], ...] = ((2e-4, 10), (2e-5, 10))

    def __post_init__(self):
        self.phases = tuple((float(lr), int(n)) for lr, n in self.phases)
        prev = float("inf")
        for lr, n in self.phases:
            if lr <= 0 or n < 0:
                raise ConfigError(f"bad schedule phase ({lr}, {n})")
            if lr > prev:
                raise ConfigError("learning rate must not increase across phases")
            prev = lr

    @classmethod
    def coco(cls):
        return cls(((2e-4, 10), (2e-5, 10)))

    @classmethod
    def flickr(cls):
        return cls(((2e-4, 30), (2e-5, 10)))

    @property
    def total_epochs(self) -> int:
        return sum(n for _, n in self.phases)

    def lr_at(self, epoch: int) -> float:
        for lr, n in self.phases:
            if epoch < n:
                return lr
            epoch -= n
        return self.phases[-1][0]


@dataclass
class TrainConfig:
    pipeline: PipelineConfig = field(default_factory=PipelineConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    schedule: TrainSchedule = field(default_factory=TrainSchedule)
    embed_dim: int = 300
    seed: int = 0
    grad_clip: float | None = None
    # leading epochs that score with the plain attention head so the encoders
    # find a matching space before the regulators join in
    host_warmup_epochs: int = 0

    def __post_init__(self):
        if self.host_warmup_epochs < 0:
            raise ConfigError("host_warmup_epochs must be >= 0")

    def snapshot(self) -> dict:
        return {
            "pipeline": self.pipeline.to_dict(),
            "loss": asdict(self.loss),
            "schedule": [list(p) for p in self.schedule.phases],
            "embed_dim": self.embed_dim,
            "seed": self.seed,
            "grad_clip": self.grad_clip,
            "host_warmup_epochs": self.host_warmup_epochs,
        }


def hinge_loss(sims: torch.Tensor, margin: float = 0.2) -> torch.Tensor:
    """Sum over positives of the hinges against the hardest caption and image negatives.

    ``sims[i, j]`` scores image ``i`` against caption ``j``; the diagonal holds
    the matched pairs.
    """
    if sims.ndim != 2 or sims.shape[0] != sims.shape[1]:
        raise ShapeError(f"similarity matrix must be square, got {tuple(sims.shape)}")
    diag = sims.diagonal()
    eye = torch.eye(sims.shape[0], dtype=torch.bool, device=sims.device)
    cost_caption = torch.relu(margin - (diag[:, None] - sims)).masked_fill(eye, 0)
    cost_image = torch.relu(margin - (diag[None, :] - sims)).masked_fill(eye, 0)
    return cost_caption.max(dim=1).values.sum() + cost_image.max(dim=0).values.sum()


@dataclass
class TrainResult:
    model: MatchingModel
    checkpoint: ckpt_io.Checkpoint
    best: ckpt_io.Checkpoint | None
    history: list[dict]


def _tensors(data: PairedData):
    regions = stack_regions(data.regions)
    tokens, lengths = collate_captions(data.sentences)
    targets = torch.from_numpy(data.caption_targets())
    return regions, tokens, lengths, targets


@torch.no_grad()
def score_dataset(model: MatchingModel, data: PairedData, chunk: int = 64) -> np.ndarray:
    """``[n_images, n_captions]`` score matrix in evaluation mode."""
    was_training = model.training
    model.eval()
    regions, tokens, lengths, _ = _tensors(data)
    V, T, mask = model.encode(regions, tokens, lengths)
    sims = model.similarity_matrix(V, T, mask, chunk=chunk)
    model.train(was_training)
    return sims.double().numpy()


def evaluate(model: MatchingModel, data: PairedData, ks=(1, 5, 10)) -> dict[str, RetrievalReport]:
    return bidirectional_recall(score_dataset(model, data), data.caption_targets(), ks)


def train(
    config: TrainConfig,
    data: PairedData,
    schedule: TrainSchedule | None = None,
    seed: int | None = None,
    valid: PairedData | None = None,
    run_dir: str | os.PathLike | None = None,
    on_epoch: Callable[[int, MatchingModel], None] | None = None,
) -> TrainResult:
    """Train a matching model with Adam on hardest-negative hinge loss.

    Deterministic for a fixed seed under single-threaded execution. With
    ``run_dir`` a checkpoint is written per epoch, plus ``best.npz`` when
    ``valid`` is given (selected by recall sum) and a ``train.log`` with one
    ``epoch step loss lr`` line per step.
    """
    schedule = schedule or config.schedule
    seed = config.seed if seed is None else seed
    torch.manual_seed(seed)
    model = MatchingModel(config.pipeline, data.regions[0].raw_dim, data.vocab_size, config.embed_dim)
    snap = {**config.snapshot(), "seed": seed, "model": model.snapshot()}
    gen = torch.Generator().manual_seed(seed)
    opt = torch.optim.Adam(model.parameters(), lr=schedule.lr_at(0))
    regions, tokens, lengths, targets = _tensors(data)
    n = tokens.shape[0]
    bs = config.loss.batch_size

    logfile = None
    if run_dir is not None:
        os.makedirs(run_dir, exist_ok=True)
        logfile = open(os.path.join(run_dir, "train.log"), "w", encoding="utf-8")

    history: list[dict] = []
    best, best_rsum = None, -1.0
    step = 0
    try:
        for epoch in range(schedule.total_epochs):
            lr = schedule.lr_at(epoch)
            for group in opt.param_groups:
                group["lr"] = lr
            model.train()
            order = torch.randperm(n, generator=gen)
            losses = []
            for start in range(0, n, bs):
                cap = order[start : start + bs]
                img = targets[cap]
                sims = model(regions[img], tokens[cap], lengths[cap], host_only=epoch < config.host_warmup_epochs)
                loss = hinge_loss(sims, config.loss.margin)
                if not torch.isfinite(loss):
                    _dump_nan(run_dir, epoch, step, cap, img, sims)
                    raise TrainingError(f"non-finite loss at epoch {epoch} step {step} (captions {cap.tolist()[:8]}...)")
                opt.zero_grad()
                loss.backward()
                if config.grad_clip:
                    torch.nn.utils.clip_grad_norm_(model.parameters(), config.grad_clip)
                opt.step()
                losses.append(loss.item())
                if logfile:
                    logfile.write(f"{epoch}\t{step}\t{loss.item():.6f}\t{lr:.3g}\n")
                step += 1
            record = {"epoch": epoch, "loss": float(np.mean(losses)), "lr": lr}
            if valid is not None:
                reports = evaluate(model, valid)
                rsum = sum(r.rsum for r in reports.values())
                record["rsum"] = rsum
                if rsum > best_rsum:
                    best_rsum = rsum
                    best = ckpt_io.from_module(model, snap)
                    if run_dir is not None:
                        ckpt_io.save(os.path.join(run_dir, "best.npz"), best)
            history.append(record)
            log.info("epoch %d loss %.4f lr %.3g", epoch, record["loss"], lr)
            if run_dir is not None:
                ckpt_io.save(os.path.join(run_dir, f"epoch_{epoch:03d}.npz"), ckpt_io.from_module(model, snap))
            if on_epoch is not None:
                on_epoch(epoch, model)
    finally:
        if logfile:
            logfile.close()

    final = ckpt_io.from_module(model, snap)
    if run_dir is not None:
        ckpt_io.save(os.path.join(run_dir, "final.npz"), final)
    return TrainResult(model, final, best, history)


def _dump_nan(run_dir, epoch, step, cap, img, sims):
    if run_dir is None:
        return
    np.savez(
        os.path.join(run_dir, "nan_batch.npz"),
        epoch=epoch, step=step, captions=cap.numpy(), images=img.numpy(), sims=sims.detach().numpy(),
    )


def model_from_checkpoint(ck: ckpt_io.Checkpoint) -> MatchingModel:
    model = MatchingModel.from_snapshot(ck.config["model"])
    model.load_state_dict(ck.state_dict())
    model.eval()
    return model
