"""Training loops for the detector and the patch classifier.

Both loops use Adam, shuffle once per epoch with the run seed, keep the
checkpoint with the lowest validation loss, and stop early after
``early_stop_patience`` epochs without improvement. Each epoch appends an
``epoch,train_loss,val_loss`` line to ``<checkpoint stem>_metrics.csv`` next
to the checkpoint.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from .losses import LossConfig, weighted_cross_entropy_batch, weighted_dice_batch
from .nets import (
    ClassifierSpec,
    DetectorSpec,
    build_classifier,
    build_detector,
    load_model,
    save_model,
)
from .targetgen import TrainingSample, WeightKind

logger = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    strategy: WeightKind = WeightKind.EXP1
    batch_size: int = 8
    max_epochs: int = 50
    early_stop_patience: int = 10
    seed: int = 0
    learning_rate: float = 1e-4
    augment: bool = False
    checkpoint_dir: str = "checkpoints"
    data_dir: str = "samples"

    def __post_init__(self):
        self.strategy = WeightKind(self.strategy)
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.max_epochs < 1:
            raise ValueError("max_epochs must be >= 1")
        if not 0 < self.early_stop_patience < self.max_epochs:
            raise ValueError("early_stop_patience must be in (0, max_epochs)")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")


@dataclass
class TrainReport:
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    best_epoch: int = -1
    best_checkpoint: str = ""
    wall_seconds: float = 0.0

    @property
    def best_val_loss(self) -> float:
        return min(self.val_loss)

    @property
    def epochs(self) -> int:
        return len(self.train_loss)

    def to_dict(self) -> dict:
        return {
            "train_loss": self.train_loss,
            "val_loss": self.val_loss,
            "best_epoch": self.best_epoch,
            "best_val_loss": self.best_val_loss,
            "best_checkpoint": self.best_checkpoint,
            "wall_seconds": self.wall_seconds,
        }


BatchHook = Callable[[int, dict], None]


def _flip_augment(rng: np.random.Generator, arrays: list[np.ndarray]) -> list[np.ndarray]:
    """Random horizontal/vertical flips applied identically to all arrays."""
    if rng.random() < 0.5:
        arrays = [a[:, :, ::-1] for a in arrays]
    if rng.random() < 0.5:
        arrays = [a[:, ::-1] for a in arrays]
    return [np.ascontiguousarray(a) for a in arrays]


def _stack_samples(samples: Sequence[TrainingSample]):
    images = np.stack([s.image for s in samples]).astype(np.float32)
    refs = np.stack([s.reference for s in samples]).astype(np.float32)
    weights = np.stack([s.weight for s in samples]).astype(np.float32)
    return images, refs, weights


def detector_loss(model, samples: Sequence[TrainingSample], batch_size: int = 16, cfg: LossConfig = LossConfig()) -> float:
    """Mean weighted Dice loss over ``samples`` in eval mode."""
    images, refs, weights = _stack_samples(samples)
    model.eval()
    total = 0.0
    with torch.no_grad():
        for i in range(0, len(images), batch_size):
            y = model(torch.from_numpy(images[i : i + batch_size]))[..., 0]
            loss = weighted_dice_batch(y, torch.from_numpy(refs[i : i + batch_size]), torch.from_numpy(weights[i : i + batch_size]), cfg)
            total += float(loss) * len(y)
    return total / len(images)


def classifier_loss(model, images: np.ndarray, labels: np.ndarray, class_weights: Sequence[float], batch_size: int = 256) -> float:
    model.eval()
    cw = torch.tensor(class_weights, dtype=torch.float32)
    total = 0.0
    with torch.no_grad():
        for i in range(0, len(images), batch_size):
            probs = model(torch.from_numpy(images[i : i + batch_size].astype(np.float32)))
            lab = torch.from_numpy(labels[i : i + batch_size].astype(np.int64))
            total += float(weighted_cross_entropy_batch(probs, lab, cw)) * len(lab)
    return total / len(images)


def _run(
    model,
    n_train: int,
    step_fn: Callable[[np.ndarray, np.random.Generator, int], float],
    val_fn: Callable[[], float],
    cfg: TrainConfig,
    ckpt_path: Path,
) -> TrainReport:
    start = time.perf_counter()
    ckpt_path.parent.mkdir(parents=True, exist_ok=True)
    metrics_path = ckpt_path.with_name(ckpt_path.stem + "_metrics.csv")
    rng = np.random.default_rng(cfg.seed)
    optimizer = torch.optim.Adam(model.parameters(), lr=cfg.learning_rate)
    report = TrainReport(best_checkpoint=str(ckpt_path))
    best, stale = math.inf, 0

    with open(metrics_path, "w", encoding="utf-8") as log:
        log.write("epoch,train_loss,val_loss\n")
        for epoch in range(cfg.max_epochs):
            model.train()
            order = rng.permutation(n_train)
            losses = []
            for i in range(0, n_train, cfg.batch_size):
                optimizer.zero_grad()
                loss = step_fn(order[i : i + cfg.batch_size], rng, epoch)
                if not torch.isfinite(loss):
                    raise TrainingDiverged(f"non-finite training loss at epoch {epoch}, batch {i // cfg.batch_size}")
                loss.backward()
                optimizer.step()
                losses.append(loss.item())
            train_loss = float(np.mean(losses))
            val_loss = val_fn()
            if not math.isfinite(val_loss):
                raise TrainingDiverged(f"non-finite validation loss at epoch {epoch}")
            report.train_loss.append(train_loss)
            report.val_loss.append(val_loss)
            log.write(f"{epoch},{train_loss:.8g},{val_loss:.8g}\n")
            log.flush()
            logger.info("epoch %d train %.5f val %.5f", epoch, train_loss, val_loss)

            if val_loss < best:
                best, stale = val_loss, 0
                report.best_epoch = epoch
                save_model(model, ckpt_path, epoch=epoch, val_loss=val_loss)
            else:
                stale += 1
                if stale >= cfg.early_stop_patience:
                    logger.info("early stop at epoch %d", epoch)
                    break

    report.wall_seconds = time.perf_counter() - start
    return report


def train_detector(
    train: Sequence[TrainingSample],
    val: Sequence[TrainingSample],
    cfg: TrainConfig,
    spec: DetectorSpec | None = None,
    loss_cfg: LossConfig = LossConfig(),
    on_batch: BatchHook | None = None,
) -> TrainReport:
    """Train the detector on prepared (image, reference, weight) samples.

    The weight maps inside ``train`` and ``val`` must have been generated
    with ``cfg.strategy``; ``on_batch`` sees every training batch.
    """
    if not train or not val:
        raise ValueError("train and val sample sets must be nonempty")
    if spec is None:
        h, w = train[0].image.shape[:2]
        spec = DetectorSpec(input_shape=(h, w, train[0].image.shape[2]))
    torch.manual_seed(cfg.seed)
    model = build_detector(spec, seed=cfg.seed)
    images, refs, weights = _stack_samples(train)

    def step(idx, rng, epoch):
        arrays = [images[idx], refs[idx], weights[idx]]
        if cfg.augment:
            arrays = _flip_augment(rng, arrays)
        x, r, w = (torch.from_numpy(a) for a in arrays)
        if on_batch is not None:
            on_batch(epoch, {"image": x, "reference": r, "weight": w})
        return weighted_dice_batch(model(x)[..., 0], r, w, loss_cfg)

    ckpt = Path(cfg.checkpoint_dir) / "detector_best.pt"
    return _run(model, len(images), step, lambda: detector_loss(model, val, cfg=loss_cfg), cfg, ckpt)


def train_classifier(
    train: tuple[np.ndarray, np.ndarray],
    val: tuple[np.ndarray, np.ndarray],
    class_weights: Sequence[float],
    cfg: TrainConfig,
    spec: ClassifierSpec | None = None,
    on_batch: BatchHook | None = None,
) -> TrainReport:
    """Train the patch classifier on ``(images (N,28,28,3), labels (N,))`` pairs.

    Each sample's cross-entropy is scaled by its label's entry in
    ``class_weights``.
    """
    x_train, y_train = train
    x_val, y_val = val
    if len(x_train) == 0 or len(x_val) == 0:
        raise ValueError("train and val sets must be nonempty")
    if spec is None:
        spec = ClassifierSpec(input_shape=tuple(x_train.shape[1:]), dense_units=(200, len(class_weights)))
    torch.manual_seed(cfg.seed)
    model = build_classifier(spec, seed=cfg.seed)
    x_train = x_train.astype(np.float32)
    y_train = y_train.astype(np.int64)
    cw = torch.tensor(class_weights, dtype=torch.float32)

    def step(idx, rng, epoch):
        arrays = [x_train[idx]]
        if cfg.augment:
            arrays = _flip_augment(rng, arrays)
        x = torch.from_numpy(arrays[0])
        y = torch.from_numpy(y_train[idx])
        if on_batch is not None:
            on_batch(epoch, {"image": x, "label": y, "weight": cw[y]})
        return weighted_cross_entropy_batch(model(x), y, cw)

    ckpt = Path(cfg.checkpoint_dir) / "classifier_best.pt"
    return _run(model, len(x_train), step, lambda: classifier_loss(model, x_val, y_val, class_weights), cfg, ckpt)


def load_best(report: TrainReport):
    return load_model(report.best_checkpoint)
