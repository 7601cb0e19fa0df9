"""Mini-batch training with Adam, checkpointing and deterministic seeding.

Randomness is derived per epoch from ``(seed, epoch)`` so a run resumed from
a checkpoint sees exactly the batches an uninterrupted run would.
"""

from __future__ import annotations

import logging
import os
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .audio_features import LogMelSegment
from .model import ModelConfig, TimeFrequencyTransformer
from .nncore import functional as F
from .nncore.checkpoint import Checkpoint, FormatError, load_checkpoint, save_checkpoint
from .nncore.optim import Adam
from .nncore.tensor import NumericError, Tensor

logger = logging.getLogger(__name__)

LOG_HEADER = "epoch,mean_loss,train_war,wall_ms"


@dataclass
class TrainConfig:
    batch_size: int = 64
    epochs: int = 1000
    lr: float = 0.001
    seed: int = 0
    eval_every: int = 0
    checkpoint_dir: str | None = None
    grad_check_mode: bool = False
    weight_decay: float = 0.0
    clip_norm: float | None = None
    lr_decay: float = 1.0
    class_weighted: bool = False
    target_train_war: float | None = None

    def validate(self) -> None:
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        # lr == 0 is allowed: it makes an epoch a no-op on the parameters
        if self.lr < 0:
            raise ValueError("lr must be non-negative")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.eval_every < 0:
            raise ValueError("eval_every must be >= 0")


@dataclass
class EpochStats:
    epoch: int
    mean_loss: float
    train_war: float
    wall_ms: int

    def log_row(self) -> str:
        return f"{self.epoch},{self.mean_loss:.8f},{self.train_war:.6f},{self.wall_ms}"


def stack_segments(segments: Sequence[LogMelSegment]) -> tuple[np.ndarray, np.ndarray]:
    """(n, 1, f, d) float32 inputs and (n,) integer labels."""
    if not segments:
        raise ValueError("no segments")
    X = np.stack([s.values for s in segments])[:, None].astype(np.float32)
    y = np.array([s.label for s in segments], dtype=np.int64)
    return X, y


def make_batches(
    X: np.ndarray, y: np.ndarray, batch_size: int, rng: np.random.Generator | None
) -> list[tuple[Tensor, np.ndarray]]:
    """Shuffle (when ``rng`` is given) and cut into batches; the last batch may be partial."""
    if len(X) == 0:
        raise ValueError("cannot batch an empty dataset")
    if len(X) != len(y):
        raise ValueError("inputs and labels differ in length")
    order = rng.permutation(len(X)) if rng is not None else np.arange(len(X))
    return [
        (Tensor(X[order[i : i + batch_size]]), y[order[i : i + batch_size]])
        for i in range(0, len(X), batch_size)
    ]


def epoch_rng(seed: int, epoch: int) -> np.random.Generator:
    return np.random.default_rng([seed, epoch])


def class_weights(y: np.ndarray, n_classes: int) -> np.ndarray:
    counts = np.bincount(y, minlength=n_classes).astype(np.float64)
    w = np.where(counts > 0, len(y) / (n_classes * np.maximum(counts, 1)), 0.0)
    return w


def make_optimizer(model: TimeFrequencyTransformer, cfg: TrainConfig) -> Adam:
    return Adam(model.trainable_parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay, clip_norm=cfg.clip_norm)


def train_epoch(
    model: TimeFrequencyTransformer,
    X: np.ndarray,
    y: np.ndarray,
    optimizer: Adam,
    cfg: TrainConfig,
    epoch: int,
) -> EpochStats:
    """One pass over the data: forward, loss, backward, Adam step per batch."""
    start = time.perf_counter()
    rng = epoch_rng(cfg.seed, epoch)
    model.train()
    model.set_rng(rng)
    optimizer.lr = cfg.lr * cfg.lr_decay ** (epoch - 1)
    n_classes = model.cfg.n_classes
    eye = np.eye(n_classes, dtype=model.dtype)
    weights = class_weights(y, n_classes) if cfg.class_weighted else None
    losses: list[float] = []
    correct = 0
    total_loss = 0.0
    for i, (xb, yb) in enumerate(make_batches(X, y, cfg.batch_size, rng)):
        probs, _ = model(xb)
        sw = None if weights is None else weights[yb].astype(model.dtype)
        loss = F.cross_entropy(probs, eye[yb], sample_weights=sw)
        value = float(loss.data)
        if not np.isfinite(value):
            raise NumericError(
                f"non-finite loss at epoch {epoch}, batch {i}; recent batch losses: {losses[-10:]}"
            )
        losses.append(value)
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()
        total_loss += value * len(yb)
        correct += int((probs.data.argmax(axis=1) == yb).sum())
    wall_ms = int(round(1000 * (time.perf_counter() - start)))
    return EpochStats(epoch, total_loss / len(y), correct / len(y), wall_ms)


def verify_gradients(
    model: TimeFrequencyTransformer,
    xb: np.ndarray,
    yb: np.ndarray,
    coords_per_param: int = 3,
    seed: int = 0,
    tol: float = 1e-3,
) -> float:
    """Finite-difference check of the loss gradient on sampled coordinates.

    Runs on a float64 copy of ``model`` in eval mode, so the model itself is
    untouched.  Returns the relative error; raises NumericError above ``tol``.
    """
    copy = TimeFrequencyTransformer(model.cfg, dtype=np.float64)
    copy.load_state_dict(model.state_dict())
    copy.eval()
    x = Tensor(np.asarray(xb, dtype=np.float64))
    z = np.eye(model.cfg.n_classes)[yb]

    def loss() -> float:
        probs, _ = copy(x)
        return F.cross_entropy(probs, z)

    copy.zero_grad()
    loss().backward()
    rng = np.random.default_rng(seed)
    analytic, numeric = [], []
    h = 1e-6
    for _, p in copy.trainable_parameters():
        flat = p.data.reshape(-1)
        grad = np.zeros(p.size) if p.grad is None else p.grad.reshape(-1)
        for i in rng.choice(p.size, min(coords_per_param, p.size), replace=False):
            orig = flat[i]
            flat[i] = orig + h
            plus = float(loss().data)
            flat[i] = orig - h
            minus = float(loss().data)
            flat[i] = orig
            analytic.append(grad[i])
            numeric.append((plus - minus) / (2 * h))
    a, n = np.array(analytic), np.array(numeric)
    err = float(np.linalg.norm(a - n) / max(np.linalg.norm(a), np.linalg.norm(n), 1e-6))
    logger.info("gradient check on %d coordinates: relative error %.2e", a.size, err)
    if err > tol:
        raise NumericError(f"gradient check failed: relative error {err:.3e} > {tol}")
    return err


def checkpoint_state(
    model: TimeFrequencyTransformer, optimizer: Adam, epoch: int, extra: dict | None = None
) -> Checkpoint:
    named = list(model.named_parameters())
    meta = {"epoch": epoch, "model": model.cfg.to_dict()}
    if extra:
        meta.update(extra)
    return Checkpoint(
        params={n: p.data for n, p in named},
        trainable={n: p.trainable for n, p in named},
        adam=optimizer.state,
        meta=meta,
    )


def checkpoint_save(
    model: TimeFrequencyTransformer, optimizer: Adam, epoch: int, path: str | os.PathLike, extra: dict | None = None
) -> None:
    save_checkpoint(path, checkpoint_state(model, optimizer, epoch, extra))


def checkpoint_load(path: str | os.PathLike) -> Checkpoint:
    return load_checkpoint(path)


def restore(ckpt: Checkpoint, train_cfg: TrainConfig | None = None) -> tuple[TimeFrequencyTransformer, Adam, int]:
    """Rebuild model and optimizer from a checkpoint; returns the epoch it was saved at."""
    try:
        model_cfg = ModelConfig.from_dict(ckpt.meta["model"])
        epoch = int(ckpt.meta["epoch"])
    except (KeyError, TypeError) as exc:
        raise FormatError(f"checkpoint metadata incomplete: {exc}") from exc
    model = TimeFrequencyTransformer(model_cfg)
    model.load_state_dict(ckpt.params)
    optimizer = make_optimizer(model, train_cfg or TrainConfig())
    optimizer.state.step = ckpt.adam.step
    optimizer.state.m = {n: m.copy() for n, m in ckpt.adam.m.items()}
    optimizer.state.v = {n: v.copy() for n, v in ckpt.adam.v.items()}
    return model, optimizer, epoch


def fit(
    model: TimeFrequencyTransformer,
    X: np.ndarray,
    y: np.ndarray,
    cfg: TrainConfig,
    optimizer: Adam | None = None,
    start_epoch: int = 0,
    log_path: str | os.PathLike | None = None,
    on_epoch: Callable[[EpochStats], None] | None = None,
) -> tuple[Adam, list[EpochStats]]:
    """Train epochs ``start_epoch + 1 .. cfg.epochs``.

    Writes one log row per epoch when ``log_path`` is given and a checkpoint
    per epoch (``last.ckpt``) when ``cfg.checkpoint_dir`` is set.  Stops early
    once ``cfg.target_train_war`` is reached, if set.  ``cfg.grad_check_mode``
    verifies gradients on the first batch before training; ``cfg.eval_every``
    logs eval-mode accuracy on the training data every that many epochs.
    """
    cfg.validate()
    optimizer = optimizer or make_optimizer(model, cfg)
    if cfg.grad_check_mode:
        head = slice(0, min(cfg.batch_size, len(X)))
        verify_gradients(model, X[head], y[head], seed=cfg.seed)
    history: list[EpochStats] = []
    log = None
    if log_path is not None:
        log_path = Path(log_path)
        fresh = start_epoch == 0 or not log_path.exists()
        log = open(log_path, "w" if fresh else "a", encoding="utf-8")
        if fresh:
            log.write(LOG_HEADER + "\n")
    try:
        for epoch in range(start_epoch + 1, cfg.epochs + 1):
            stats = train_epoch(model, X, y, optimizer, cfg, epoch)
            history.append(stats)
            logger.info("epoch %d loss %.4f train_war %.4f", epoch, stats.mean_loss, stats.train_war)
            if log is not None:
                log.write(stats.log_row() + "\n")
                log.flush()
            if cfg.checkpoint_dir:
                ckpt_dir = Path(cfg.checkpoint_dir)
                ckpt_dir.mkdir(parents=True, exist_ok=True)
                checkpoint_save(model, optimizer, epoch, ckpt_dir / "last.ckpt")
            if cfg.eval_every and epoch % cfg.eval_every == 0:
                acc = float((model.predict_proba(X, cfg.batch_size).argmax(axis=1) == y).mean())
                logger.info("epoch %d eval-mode train accuracy %.4f", epoch, acc)
            if on_epoch is not None:
                on_epoch(stats)
            if cfg.target_train_war is not None and stats.train_war >= cfg.target_train_war:
                break
    finally:
        if log is not None:
            log.close()
    return optimizer, history
