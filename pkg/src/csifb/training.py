"""ADAM training of standalone CsiNet and the CsiNet-LSTM composite."""
from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .models import (CsiNetLstmParams, CsiNetParams, copy_params, csinet_forward,
                     forward_batch, init_csinet, init_params, preload_from_csinet, save_params)

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    """Training produced a non-finite loss; ``last_good`` holds the previous parameters."""

    def __init__(self, msg, last_good=None, epoch=None):
        super().__init__(msg)
        self.last_good = last_good
        self.epoch = epoch


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 50
    epochs_phase1: int = 100
    epochs_phase2: int = 50
    lr_phase1: float = 1e-3
    lr_phase2: float = 1e-4
    seed: int = 0
    checkpoint_every: int = 0
    checkpoint_dir: str | None = None
    early_stop_patience: int | None = None

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.lr_phase1 <= 0 or self.lr_phase2 <= 0:
            raise ValueError("learning rates must be positive")

    @property
    def epochs(self) -> int:
        return self.epochs_phase1 + self.epochs_phase2


def lr_schedule(epoch: int, cfg: TrainConfig) -> float:
    """Step schedule: ``lr_phase1`` for the first ``epochs_phase1`` epochs (0-based), then ``lr_phase2``."""
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    return cfg.lr_phase1 if epoch < cfg.epochs_phase1 else cfg.lr_phase2


@dataclass
class TrainHistory:
    records: list[dict] = field(default_factory=list)
    checkpoint: str | None = None

    def __len__(self) -> int:
        return len(self.records)

    @property
    def train_loss(self) -> list[float]:
        return [r["train_loss"] for r in self.records]

    @property
    def val_loss(self) -> list[float]:
        return [r["val_loss"] for r in self.records]

    def to_jsonl(self) -> str:
        keep = ("epoch", "train_loss", "val_loss", "lr", "wall_time", "grad_norm")
        return "".join(json.dumps({k: r[k] for k in keep}) + "\n" for r in self.records)

    def save(self, path) -> None:
        Path(path).write_text(self.to_jsonl())


def _batched_loss(forward, params, data: np.ndarray, batch: int = 200) -> float:
    """Sample-mean loss over ``data`` without building a graph."""
    total = 0.0
    for k in range(0, len(data), batch):
        x = data[k:k + batch]
        out = forward(x, params).data
        total += float(np.sum((out - x) ** 2))
    return total / len(data)


def _cross_check(forward, params, batch: np.ndarray, tag: str) -> None:
    """The numpy evaluation loss must agree with the autodiff loss on one batch."""
    a = _batched_loss(forward, params, batch)
    b = float(ad.mse_loss(forward(batch, params), batch).data)
    if not abs(a - b) <= 1e-12 * max(abs(a), abs(b), 1.0):
        raise TrainingError(f"{tag}: evaluation loss {a!r} disagrees with mse_loss {b!r}")


def _fit(params, forward, batches_fn, val: np.ndarray, cfg: TrainConfig, tag: str):
    """Shared epoch loop. ``batches_fn(epoch, rng)`` yields training batches."""
    plist = params.parameters()
    opt = ad.Adam(plist, cfg.lr_phase1)
    rng = np.random.default_rng([cfg.seed, 7919])
    hist = TrainHistory()
    best_val, stale = np.inf, 0
    last_good = copy_params(params)
    t_start = time.perf_counter()
    for epoch in range(cfg.epochs):
        lr = lr_schedule(epoch, cfg)
        loss_sum, n_seen, gnorm = 0.0, 0, 0.0
        for xb in batches_fn(epoch, rng):
            opt.zero_grad()
            loss = ad.mse_loss(forward(xb, params), xb)
            ad.backward(loss)
            lval = float(loss.data)
            g = float(np.sqrt(sum(float(np.sum(p.grad * p.grad)) for p in plist)))
            if not (np.isfinite(lval) and np.isfinite(g)):
                raise TrainingError(f"{tag}: non-finite loss/gradient at epoch {epoch}",
                                    last_good, epoch)
            opt.step(lr)
            loss_sum += lval * len(xb)
            n_seen += len(xb)
            gnorm = max(gnorm, g)
        train_loss = loss_sum / n_seen
        val_loss = _batched_loss(forward, params, val)
        _cross_check(forward, params, val[:min(len(val), 8)], tag)
        rec = {"epoch": epoch, "train_loss": train_loss, "val_loss": val_loss, "lr": lr,
               "wall_time": time.perf_counter() - t_start, "grad_norm": gnorm}
        hist.records.append(rec)
        log.info("%s epoch %d lr %g train %.6g val %.6g", tag, epoch, lr, train_loss, val_loss)
        last_good = copy_params(params)
        if cfg.checkpoint_every and cfg.checkpoint_dir and (epoch + 1) % cfg.checkpoint_every == 0:
            path = Path(cfg.checkpoint_dir) / f"{tag}-epoch{epoch + 1:04d}.ckpt"
            save_params(params, path, {"epoch": epoch, "val_loss": val_loss, "tag": tag})
            hist.checkpoint = str(path)
        if cfg.early_stop_patience is not None:
            if val_loss < best_val:
                best_val, stale = val_loss, 0
            else:
                stale += 1
                if stale >= cfg.early_stop_patience:
                    break
    return params, hist


def _frame_batches(train: np.ndarray, batch_size: int):
    """Per epoch, each group contributes one randomly chosen frame, in shuffled order."""
    G, T = train.shape[:2]

    def gen(epoch, rng):
        order = rng.permutation(G)
        pick = rng.integers(0, T, size=G)
        for k in range(0, G, batch_size):
            idx = order[k:k + batch_size]
            yield train[idx, pick[k:k + batch_size]]
    return gen


def _group_batches(train: np.ndarray, batch_size: int):
    G = train.shape[0]

    def gen(epoch, rng):
        order = rng.permutation(G)
        for k in range(0, G, batch_size):
            yield train[order[k:k + batch_size]]
    return gen


def train_csinet(train: np.ndarray, val: np.ndarray, codeword_len: int, cfg: TrainConfig,
                 decoder_input_len: int | None = None) -> tuple[CsiNetParams, TrainHistory]:
    """Train a standalone CsiNet on normalised frames.

    ``train`` may be grouped ``(G, T, 2, R, C)`` (one frame per group per epoch)
    or plain frames ``(N, 2, R, C)``. ``val`` is flattened to frames.
    """
    if train.ndim == 4:
        train = train[:, None]
    val_frames = val.reshape((-1,) + val.shape[-3:])
    _, _, _, R, C = train.shape
    params = init_csinet(R, C, codeword_len, np.random.default_rng([cfg.seed, 1, codeword_len]),
                         decoder_input_len)
    return _fit(params, csinet_forward, _frame_batches(train, cfg.batch_size), val_frames, cfg,
                f"csinet-m{codeword_len}")


def train_csinet_lstm(train: np.ndarray, val: np.ndarray, m_high: int, m_low: int,
                      cfg: TrainConfig,
                      preload: tuple[CsiNetParams, CsiNetParams] | None = None
                      ) -> tuple[CsiNetLstmParams, TrainHistory]:
    """End-to-end training on normalised groups ``(G, T, 2, R, C)``."""
    if train.ndim != 5:
        raise ValueError("train_csinet_lstm needs grouped data (G, T, 2, R, C)")
    _, _, _, R, C = train.shape
    params = init_params(R, C, m_high, m_low, np.random.default_rng([cfg.seed, 2, m_high, m_low]))
    if preload is not None:
        preload_from_csinet(params, *preload)
    return _fit(params, forward_batch, _group_batches(train, cfg.batch_size), val, cfg,
                f"csinet-lstm-m{m_high}-{m_low}")


def config_dict(cfg: TrainConfig) -> dict:
    return asdict(cfg)
