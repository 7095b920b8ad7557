"""REINFORCE training against a greedy-rollout baseline."""
from __future__ import annotations

import copy
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from .errors import InvalidArgument
from .instances import batch_tour_lengths
from .model import CNNTransformer, ModelConfig

log = logging.getLogger(__name__)

EVAL_STREAM = 1_000_003  # seed-sequence tag separating the validation set from training batches


@dataclass
class TrainerConfig:
    epochs: int = 100
    instances_per_epoch: int = 10_000
    batch_size: int = 512
    learning_rate: float = 1e-4
    n: int = 50
    seed: int = 0
    eval_set_size: int = 1000
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8

    REQUIRED = ("epochs", "instances_per_epoch", "batch_size", "learning_rate", "n", "seed")

    def __post_init__(self):
        if self.epochs < 0:
            raise InvalidArgument("epochs: must be >= 0")
        if self.instances_per_epoch < 1:
            raise InvalidArgument("instances_per_epoch: must be >= 1")
        if self.batch_size < 2:
            raise InvalidArgument("batch_size: must be >= 2 (batch normalization needs statistics)")
        if not self.learning_rate > 0:
            raise InvalidArgument("learning_rate: must be > 0")
        if self.n < 2:
            raise InvalidArgument("n: must be >= 2")
        if self.eval_set_size < 1:
            raise InvalidArgument("eval_set_size: must be >= 1")


@dataclass
class EpochStats:
    epoch: int
    mean_length: float
    mean_baseline_length: float
    mean_loss: float
    eval_mean_length: float
    eval_baseline_mean_length: float
    baseline_copied: bool
    seconds: float


@dataclass
class RunConfig:
    trainer: TrainerConfig
    model: ModelConfig = field(default_factory=ModelConfig)

    def to_dict(self) -> dict:
        return {**asdict(self.trainer), "model": self.model.to_dict()}

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        """Build from a flat JSON document; ``model`` holds the network fields."""
        data = dict(data)
        model = ModelConfig.from_dict(data.pop("model", {}))
        names = {f.name for f in fields(TrainerConfig)}
        unknown = set(data) - names
        if unknown:
            raise InvalidArgument(f"unknown config fields: {', '.join(sorted(unknown))}")
        missing = [f for f in TrainerConfig.REQUIRED if f not in data]
        if missing:
            raise InvalidArgument(f"missing required config field(s): {', '.join(missing)}")
        return cls(TrainerConfig(**data), model)


def make_optimizer(model: CNNTransformer, cfg: TrainerConfig) -> torch.optim.Adam:
    return torch.optim.Adam(model.parameters(), lr=cfg.learning_rate,
                            betas=(cfg.adam_beta1, cfg.adam_beta2), eps=cfg.adam_eps)


def greedy_lengths(model: CNNTransformer, coords: np.ndarray, chunk: int = 1000) -> np.ndarray:
    out = []
    with torch.no_grad():
        for lo in range(0, len(coords), chunk):
            part = coords[lo:lo + chunk]
            tours, _ = model.rollout(torch.from_numpy(part), mode="greedy", bn_mode="infer")
            out.append(batch_tour_lengths(part, tours.numpy()))
    return np.concatenate(out)


def surrogate_loss(model: CNNTransformer, baseline: CNNTransformer, coords: np.ndarray,
                   generator: Optional[torch.Generator] = None, decode: str = "sample",
                   bn_mode: str = "train", update_stats: bool = True):
    """Frozen-advantage REINFORCE surrogate ``mean((l(pi) - l(pi')) * log p(pi))``.

    Returns ``(loss, lengths, baseline_lengths, log_probs)``. ``decode`` and
    ``bn_mode`` exist so tests can force a deterministic policy rollout.
    """
    x = torch.from_numpy(coords)
    tours, log_p = model.rollout(x, mode=decode, bn_mode=bn_mode, generator=generator,
                                 update_stats=update_stats)
    with torch.no_grad():
        base_tours, _ = baseline.rollout(x, mode="greedy", bn_mode="infer")
    lengths = batch_tour_lengths(coords, tours.numpy())
    base_lengths = batch_tour_lengths(coords, base_tours.numpy())
    advantage = torch.from_numpy(lengths - base_lengths).to(log_p.dtype)
    loss = (advantage * log_p).mean()
    return loss, lengths, base_lengths, log_p


def reinforce_step(model: CNNTransformer, baseline: CNNTransformer, optimizer: torch.optim.Optimizer,
                   coords: np.ndarray, generator: Optional[torch.Generator] = None,
                   decode: str = "sample", bn_mode: str = "train") -> dict:
    """One policy-gradient update on a batch of ``(B, n, 2)`` coordinates."""
    if len(coords) == 0:
        raise InvalidArgument("empty batch")
    model.train()
    loss, lengths, base_lengths, _ = surrogate_loss(model, baseline, coords, generator, decode, bn_mode)
    if not torch.isfinite(loss):
        raise FloatingPointError(
            f"non-finite surrogate loss {loss.item()} (mean length {lengths.mean():.4f}, "
            f"baseline {base_lengths.mean():.4f})")
    optimizer.zero_grad()
    loss.backward()
    for name, p in model.named_parameters():
        if p.grad is not None and not torch.isfinite(p.grad).all():
            raise FloatingPointError(f"non-finite gradient in {name}")
    optimizer.step()
    return {
        "loss": float(loss.item()),
        "mean_length": float(lengths.mean()),
        "mean_baseline_length": float(base_lengths.mean()),
    }


def baseline_update(model: CNNTransformer, baseline: CNNTransformer, eval_coords: np.ndarray):
    """Copy the training weights into the baseline if they decode shorter tours on average.

    Returns ``(copied, train_mean, baseline_mean)``.
    """
    if len(eval_coords) == 0:
        raise InvalidArgument("empty evaluation set")
    train_mean = float(greedy_lengths(model, eval_coords).mean())
    base_mean = float(greedy_lengths(baseline, eval_coords).mean())
    copied = train_mean < base_mean
    if copied:
        baseline.load_state_dict(model.state_dict())
    return copied, train_mean, base_mean


def clone_model(model: CNNTransformer) -> CNNTransformer:
    return copy.deepcopy(model)


def _epoch_rng(seed: int, epoch: int) -> np.random.Generator:
    return np.random.default_rng([seed, epoch])


def eval_coords_for(cfg: TrainerConfig) -> np.ndarray:
    rng = np.random.default_rng([cfg.seed, EVAL_STREAM])
    return rng.random((cfg.eval_set_size, cfg.n, 2))


@dataclass
class TrainResult:
    checkpoint: Path
    stats: list
    model: CNNTransformer
    baseline: CNNTransformer


def checkpoint_name(epoch: int) -> str:
    return f"epoch_{epoch:03d}.ckpt"


def train(run: RunConfig, out_dir, progress: bool = False) -> TrainResult:
    """Train from scratch, writing ``config.json``, ``stats.jsonl`` and one checkpoint per epoch."""
    cfg = run.trainer
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    torch.manual_seed(cfg.seed)
    model = CNNTransformer(run.model, seed=cfg.seed)
    baseline = clone_model(model)
    optimizer = make_optimizer(model, cfg)
    generator = torch.Generator().manual_seed(cfg.seed)
    eval_coords = eval_coords_for(cfg)

    (out / "config.json").write_text(json.dumps(run.to_dict(), indent=2, sort_keys=True) + "\n")
    stats_path = out / "stats.jsonl"
    stats_path.write_text("")
    ckpt = out / checkpoint_name(0)
    model.save(ckpt, {"epoch": 0, "run": run.to_dict()})

    history = []
    batches = math.ceil(cfg.instances_per_epoch / cfg.batch_size)
    for epoch in range(1, cfg.epochs + 1):
        t0 = time.perf_counter()
        rng = _epoch_rng(cfg.seed, epoch)
        sums = {"loss": 0.0, "mean_length": 0.0, "mean_baseline_length": 0.0}
        seen = 0
        for b in range(batches):
            size = min(cfg.batch_size, cfg.instances_per_epoch - b * cfg.batch_size)
            if size < 2:
                break
            coords = rng.random((size, cfg.n, 2))
            res = reinforce_step(model, baseline, optimizer, coords, generator)
            for key in sums:
                sums[key] += res[key] * size
            seen += size
            if progress and b % 20 == 0:
                log.info("epoch %d batch %d/%d loss %.4f len %.4f base %.4f", epoch, b, batches,
                         res["loss"], res["mean_length"], res["mean_baseline_length"])
        copied, train_mean, base_mean = baseline_update(model, baseline, eval_coords)
        stats = EpochStats(
            epoch=epoch,
            mean_length=sums["mean_length"] / seen,
            mean_baseline_length=sums["mean_baseline_length"] / seen,
            mean_loss=sums["loss"] / seen,
            eval_mean_length=train_mean,
            eval_baseline_mean_length=base_mean,
            baseline_copied=copied,
            seconds=time.perf_counter() - t0,
        )
        history.append(stats)
        with open(stats_path, "a") as fh:
            fh.write(json.dumps(asdict(stats)) + "\n")
        ckpt = out / checkpoint_name(epoch)
        model.save(ckpt, {"epoch": epoch, "run": run.to_dict()})
        log.info("epoch %d: sampled %.4f baseline %.4f eval %.4f vs %.4f copied=%s (%.1fs)",
                 epoch, stats.mean_length, stats.mean_baseline_length, train_mean, base_mean,
                 copied, stats.seconds)
    return TrainResult(ckpt, history, model, baseline)
