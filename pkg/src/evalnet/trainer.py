"""Two-stage optimisation of the reconstruction network.

Stage 1 fits the construction backbone with MSE on the initial prediction.
Stage 2 freezes the backbone and fits only the refiner with L1 on the
refined prediction. After every epoch the model is scored by log-space RMSE
on the validation split; the best epoch's weights are kept.
"""

from __future__ import annotations

import csv
import dataclasses
import io
import logging
import math
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import tensor as T
from .checkpoint import Checkpoint, atomic_write, save_checkpoint
from .model import EvalNet
from .patches import PatchRecord, split_of, stack_batch

log = logging.getLogger(__name__)

LOG_HEADER = ["epoch", "stage", "train_loss", "val_rmse_log", "wall_seconds"]


class TrainingError(Exception):
    """Configuration or data problem that prevents training."""


class NumericalError(TrainingError):
    """Loss became non-finite."""


@dataclass
class TrainConfig:
    lr_stage1: float = 1e-4
    lr_stage2: float = 1e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    batch_size: int = 4
    epochs_stage1: int = 60
    epochs_stage2: int = 10
    seed: int = 0
    checkpoint_dir: Optional[str] = None

    def __post_init__(self):
        if not (self.lr_stage1 > 0 and self.lr_stage2 > 0):
            raise ValueError("learning rates must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("betas must lie in [0, 1)")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.weight_decay != 0:
            raise ValueError("weight decay is not supported")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class OptimState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0

    @classmethod
    def zeros_like(cls, params: Sequence[T.Tensor]) -> "OptimState":
        return cls([np.zeros_like(p.data) for p in params], [np.zeros_like(p.data) for p in params])


def adam_step(
    params: Sequence[T.Tensor],
    state: OptimState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """One bias-corrected Adam update, in place. Gradients are read from ``p.grad``."""
    for p in params:
        if p.grad is None:
            raise TrainingError("parameter has no gradient; run backward first")
    state.t += 1
    bc1 = 1.0 - beta1**state.t
    bc2 = 1.0 - beta2**state.t
    for p, m, v in zip(params, state.m, state.v):
        g = p.grad
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        m_hat = m / bc1
        v_hat = v / bc2
        p.data -= (lr * m_hat / (np.sqrt(v_hat) + eps)).astype(p.data.dtype)


class Adam:
    def __init__(self, params: Sequence[T.Tensor], lr: float, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.state = OptimState.zeros_like(self.params)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        adam_step(self.params, self.state, self.lr, self.beta1, self.beta2, self.eps)


def _predict(model: EvalNet, x: np.ndarray, mask: np.ndarray, stage: int) -> np.ndarray:
    with T.no_grad():
        xt = T.Tensor(x)
        initial = model.construct(xt)
        if stage == 2 and model.dfr is not None:
            return model.refine(initial, T.Tensor(mask)).data
        return initial.data


def predict_records(model: EvalNet, records: Sequence[PatchRecord], stage: int, batch_size: int = 4) -> np.ndarray:
    """Log-space predictions (n, 1, P, P) for ``records`` in order."""
    outs = []
    for i in range(0, len(records), batch_size):
        x, m, _ = stack_batch(records[i : i + batch_size])
        outs.append(_predict(model, x, m, stage))
    return np.concatenate(outs)


def validate(model: EvalNet, records: Sequence[PatchRecord], stage: int = 1, batch_size: int = 4) -> float:
    """Log-space RMSE over every pixel of ``records``, accumulated in float64."""
    if not records:
        raise TrainingError("validation split is empty")
    sq = 0.0
    n = 0
    for i in range(0, len(records), batch_size):
        x, m, y = stack_batch(records[i : i + batch_size])
        pred = _predict(model, x, m, stage).astype(np.float64)
        d = pred - y.astype(np.float64)
        sq += float(np.sum(d * d))
        n += d.size
    return math.sqrt(sq / n)


def select_best(history: Sequence[tuple[int, float]]) -> tuple[int, float]:
    """Epoch with the lowest validation RMSE; the earliest wins ties."""
    if not history:
        raise TrainingError("no epochs to select from")
    return min(history, key=lambda er: (er[1], er[0]))


@dataclass
class StageResult:
    best: Checkpoint
    history: list[dict]
    initial_train_loss: float


def _dataset_loss(model: EvalNet, records, stage: int, kind: str, batch_size: int) -> float:
    total = 0.0
    n = 0
    for i in range(0, len(records), batch_size):
        x, m, y = stack_batch(records[i : i + batch_size])
        pred = _predict(model, x, m, stage).astype(np.float64)
        d = pred - y
        total += float(np.sum(d * d) if kind == "mse" else np.sum(np.abs(d)))
        n += d.size
    return total / n


def _run_stage(
    model: EvalNet,
    records: Sequence[PatchRecord],
    cfg: TrainConfig,
    stage: int,
    norm_stats: Optional[dict] = None,
) -> StageResult:
    train = split_of(records, "train")
    val = split_of(records, "val")
    if not train:
        raise TrainingError("training split is empty")
    if not val:
        raise TrainingError("validation split is empty")

    if stage == 1:
        params, lr, epochs, kind = model.backbone_parameters(), cfg.lr_stage1, cfg.epochs_stage1, "mse"
    else:
        params, lr, epochs, kind = model.dfr_parameters(), cfg.lr_stage2, cfg.epochs_stage2, "l1"
    if epochs < 1:
        raise TrainingError(f"stage {stage} needs at least one epoch")

    model.requires_grad_(False)
    for p in params:
        p.requires_grad = True
    opt = Adam(params, lr, cfg.beta1, cfg.beta2, cfg.eps)
    rng = np.random.default_rng([cfg.seed, stage])
    ckpt_dir = Path(cfg.checkpoint_dir) if cfg.checkpoint_dir else None

    initial_loss = _dataset_loss(model, train, stage, kind, cfg.batch_size)
    history = [
        {
            "epoch": 0,
            "stage": stage,
            "train_loss": initial_loss,
            "val_rmse_log": validate(model, val, stage, cfg.batch_size),
            "wall_seconds": 0.0,
        }
    ]
    scores: list[tuple[int, float]] = []
    best: Optional[Checkpoint] = None
    start = time.perf_counter()
    step = 0
    try:
        for epoch in range(1, epochs + 1):
            order = rng.permutation(len(train))
            losses = []
            for i in range(0, len(order), cfg.batch_size):
                batch = [train[j] for j in order[i : i + cfg.batch_size]]
                x, m, y = stack_batch(batch)
                opt.zero_grad()
                if stage == 1:
                    pred = model.construct(T.Tensor(x))
                else:
                    with T.no_grad():
                        initial = model.construct(T.Tensor(x))
                    pred = model.refine(initial, T.Tensor(m))
                loss = T.loss(pred, y, kind)
                value = loss.item()
                if not math.isfinite(value):
                    raise NumericalError(f"non-finite {kind} loss at stage {stage} epoch {epoch} step {step}")
                T.backward(loss)
                opt.step()
                losses.append(value)
                step += 1
            rmse = validate(model, val, stage, cfg.batch_size)
            scores.append((epoch, rmse))
            history.append(
                {
                    "epoch": epoch,
                    "stage": stage,
                    "train_loss": float(np.mean(losses)),
                    "val_rmse_log": rmse,
                    "wall_seconds": time.perf_counter() - start,
                }
            )
            log.info("stage %d epoch %d loss %.6f val_rmse_log %.6f", stage, epoch, history[-1]["train_loss"], rmse)
            ckpt = Checkpoint.from_model(model, stage, epoch, rmse, norm_stats)
            if ckpt_dir is not None:
                save_checkpoint(ckpt, ckpt_dir / f"stage{stage}_epoch{epoch:03d}.evckpt")
            if best is None or select_best(scores)[0] == epoch:
                best = ckpt
    finally:
        model.requires_grad_(False)
        model.zero_grad()

    model.load_state_dict(best.tensors)
    if ckpt_dir is not None:
        save_checkpoint(best, ckpt_dir / f"stage{stage}_best.evckpt")
    return StageResult(best, history, initial_loss)


def train_stage1(model: EvalNet, records: Sequence[PatchRecord], cfg: TrainConfig, norm_stats=None) -> StageResult:
    """Fit encoder and decoder with MSE; the refiner is left untouched."""
    return _run_stage(model, records, cfg, 1, norm_stats)


def train_stage2(model: EvalNet, records: Sequence[PatchRecord], cfg: TrainConfig, norm_stats=None) -> StageResult:
    """Fit only the refiner with L1 on the refined prediction."""
    if model.dfr is None:
        raise TrainingError("stage 2 requires dfr_enabled=true")
    return _run_stage(model, records, cfg, 2, norm_stats)


def history_csv(history: Sequence[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(LOG_HEADER)
    for row in history:
        w.writerow(
            [
                row["epoch"],
                row["stage"],
                repr(float(row["train_loss"])),
                repr(float(row["val_rmse_log"])),
                f"{row['wall_seconds']:.3f}",
            ]
        )
    return buf.getvalue()


def write_history(history: Sequence[dict], path) -> None:
    atomic_write(path, history_csv(history).encode())
