"""AdamW, warmup + cosine schedule, mixup, soft-target cross-entropy and the training loop."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np

from . import tensor as T
from .data import LabeledImageSet, batch_indices, one_hot, random_flip
from .errors import ContractError, NumericalAbort
from .model import ModelConfig, MoaTransformer, ParamStore
from .tensor import Tensor

logger = logging.getLogger(__name__)

METRICS_COLUMNS = "epoch,lr,train_loss,train_acc,eval_acc"


# -- optimiser ---------------------------------------------------------------

@dataclass
class OptState:
    lr_peak: float = 0.009
    weight_decay: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)


def adamw_step(params: ParamStore, opt: OptState, lr: float) -> None:
    """One decoupled-weight-decay Adam update, in place.

    ``theta <- theta - lr * (m_hat / (sqrt(v_hat) + eps) + wd * theta)``
    """
    for name, p in params.items():
        if p.grad is None:
            raise ContractError(f"parameter {name!r} has no gradient")
    opt.step += 1
    b1, b2 = opt.beta1, opt.beta2
    c1 = 1.0 - b1 ** opt.step
    c2 = 1.0 - b2 ** opt.step
    for name, p in params.items():
        g = p.grad
        m = opt.m.get(name)
        if m is None:
            m = opt.m[name] = np.zeros_like(p.data)
            opt.v[name] = np.zeros_like(p.data)
        v = opt.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        update = (m / c1) / (np.sqrt(v / c2) + opt.eps) + opt.weight_decay * p.data
        p.data = p.data - (lr * update).astype(p.dtype)


# -- schedule ----------------------------------------------------------------

@dataclass
class Schedule:
    warmup_epochs: float
    total_epochs: float
    lr_peak: float
    lr_min: float = 1e-6
    steps_per_epoch: int = 1

    def __post_init__(self):
        if not 0 <= self.warmup_epochs < self.total_epochs:
            raise ValueError(
                f"need 0 <= warmup_epochs < total_epochs, got {self.warmup_epochs}, {self.total_epochs}"
            )


def lr_at(schedule: Schedule, epoch_fraction: float) -> float:
    """Linear warmup from 0 to the peak, then cosine decay to ``lr_min``."""
    s = schedule
    e = min(max(epoch_fraction, 0.0), s.total_epochs)
    if e < s.warmup_epochs:
        return s.lr_peak * e / s.warmup_epochs
    t = (e - s.warmup_epochs) / (s.total_epochs - s.warmup_epochs)
    return s.lr_min + (s.lr_peak - s.lr_min) * 0.5 * (1.0 + math.cos(math.pi * t))


# -- loss and augmentation ---------------------------------------------------

def cross_entropy_soft(logits: Tensor, target: np.ndarray) -> Tensor:
    """Batch mean of ``-sum(target * log_softmax(logits))``."""
    target = np.asarray(target, dtype=logits.dtype)
    if target.shape != logits.shape:
        raise ContractError(f"target {target.shape} does not match logits {logits.shape}")
    logp = T.log_softmax(logits, axis=-1)
    return -(logp * Tensor(target)).sum(axis=-1).mean()


def mixup(x: np.ndarray, y: np.ndarray, alpha: float, rng: np.random.Generator,
          lam: Optional[float] = None) -> Tuple[np.ndarray, np.ndarray]:
    """Blend each sample with a partner from a random permutation of the batch."""
    if alpha <= 0:
        raise ContractError(f"mixup alpha must be positive, got {alpha}")
    if lam is None:
        lam = float(rng.beta(alpha, alpha))
    perm = rng.permutation(len(x))
    return lam * x + (1.0 - lam) * x[perm], lam * y + (1.0 - lam) * y[perm]


# -- loop --------------------------------------------------------------------

@dataclass
class Recipe:
    epochs: int = 300
    batch_size: int = 128
    lr: float = 0.009
    weight_decay: float = 0.05
    warmup_epochs: float = 20
    lr_min: float = 1e-6
    seed: int = 42
    drop_path: Optional[float] = None  # overrides the config's drop_path_max
    use_mixup: bool = False
    mixup_alpha: float = 0.8
    flip: bool = False
    dtype: str = "float32"
    max_steps: Optional[int] = None


@dataclass
class TrainResult:
    model: MoaTransformer
    metrics: List[dict]
    log_lines: List[str]
    steps: int


def evaluate(model: MoaTransformer, data: LabeledImageSet, batch_size: int = 256) -> float:
    """Top-1 accuracy in eval mode."""
    model.eval()
    correct = 0
    with T.no_grad():
        for idx in batch_indices(len(data), batch_size):
            logits = model(data.images[idx])
            correct += int((logits.data.argmax(axis=-1) == data.labels[idx]).sum())
    return correct / max(len(data), 1)


def format_metrics(row: dict) -> str:
    return (f"{row['epoch']},{row['lr']:.6f},{row['train_loss']:.6f},"
            f"{row['train_acc']:.6f},{row['eval_acc']:.6f}")


def train(config: ModelConfig, dataset: LabeledImageSet, recipe: Recipe,
          eval_set: Optional[LabeledImageSet] = None, out_dir=None,
          model: Optional[MoaTransformer] = None) -> TrainResult:
    """Run the epoch loop; optionally write ``metrics.log`` and ``model.ckpt`` to ``out_dir``.

    Raises :class:`NumericalAbort` on a non-finite loss or gradient norm.
    """
    if recipe.drop_path is not None:
        config = config.replace(drop_path_max=recipe.drop_path)
    config.validate()
    if dataset.image_size != config.input_size or dataset.num_classes != config.num_classes:
        raise ValueError(
            f"dataset ({dataset.image_size}px, {dataset.num_classes} classes) does not match "
            f"config ({config.input_size}px, {config.num_classes} classes)"
        )
    dtype = np.dtype(recipe.dtype)
    if model is None:
        model = MoaTransformer(config, seed=recipe.seed, dtype=dtype)
    params = ParamStore.from_module(model)
    opt = OptState(lr_peak=recipe.lr, weight_decay=recipe.weight_decay)
    spe = math.ceil(len(dataset) / recipe.batch_size)
    sched = Schedule(recipe.warmup_epochs, recipe.epochs, recipe.lr, recipe.lr_min, spe)
    rng = np.random.default_rng(recipe.seed)
    eval_set = eval_set if eval_set is not None else dataset

    lines = [f"# seed={recipe.seed}", f"# {METRICS_COLUMNS}"]
    metrics: List[dict] = []
    log_file = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        log_file = open(out_dir / "metrics.log", "a")
        log_file.write("\n".join(lines) + "\n")

    step = 0
    lr = 0.0
    try:
        for epoch in range(recipe.epochs):
            model.train()
            loss_sum, correct, seen = 0.0, 0, 0
            for i, idx in enumerate(batch_indices(len(dataset), recipe.batch_size, True,
                                                  recipe.seed + epoch)):
                x = dataset.images[idx].astype(dtype)
                labels = dataset.labels[idx]
                y = one_hot(labels, config.num_classes, dtype)
                if recipe.flip:
                    x = random_flip(x, rng)
                if recipe.use_mixup:
                    x, y = mixup(x, y, recipe.mixup_alpha, rng)
                lr = lr_at(sched, epoch + (i + 1) / spe)
                logits = model(x, rng)
                loss = cross_entropy_soft(logits, y)
                loss_val = loss.item()
                params.zero_grad()
                if not math.isfinite(loss_val):
                    raise NumericalAbort(step, lr, float("nan"), loss_val)
                loss.backward()
                gnorm = params.grad_norm()
                if not math.isfinite(gnorm):
                    raise NumericalAbort(step, lr, gnorm, loss_val)
                adamw_step(params, opt, lr)
                step += 1
                loss_sum += loss_val * len(idx)
                correct += int((logits.data.argmax(axis=-1) == labels).sum())
                seen += len(idx)
                if recipe.max_steps is not None and step >= recipe.max_steps:
                    break
            row = {"epoch": epoch + 1, "lr": lr, "train_loss": loss_sum / seen,
                   "train_acc": correct / seen, "eval_acc": evaluate(model, eval_set)}
            metrics.append(row)
            line = format_metrics(row)
            lines.append(line)
            logger.info(line)
            if log_file is not None:
                log_file.write(line + "\n")
                log_file.flush()
            if recipe.max_steps is not None and step >= recipe.max_steps:
                break
    finally:
        if log_file is not None:
            log_file.close()

    if out_dir is not None:
        from .checkpoint import save_checkpoint

        save_checkpoint(out_dir / "model.ckpt", model, {"seed": recipe.seed, "steps": step})
    return TrainResult(model, metrics, lines, step)
