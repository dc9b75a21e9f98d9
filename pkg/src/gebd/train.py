"""Training: per-frame BCE loss, warmup + cosine schedule, Adam, and the loop.

The schedule rises linearly from 0 to lr_peak over the warmup epochs, then
follows a cosine from lr_peak down to lr_final at the last step. The model
from the last epoch is the result.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .autodiff import Tensor, _accumulate, add, backward, scale, time_matmul
from .data import VideoFeatures
from .model import GebdModel
from .postprocess import smoothing_matrix
from .util import atomic_write_text

BCE_CLAMP = 1e-7


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 8
    lr_peak: float = 4e-4
    lr_final: float = 4e-6
    warmup_epochs: int = 2
    smooth_targets: bool = True
    smooth_inference: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1 or self.warmup_epochs < 0:
            raise ValueError("epochs/warmup must be >= 0 and batch_size >= 1")
        # epochs == 0 means "initialize only" and skips the schedule entirely
        if self.epochs > 0 and self.warmup_epochs >= self.epochs:
            raise ValueError(f"warmup_epochs {self.warmup_epochs} must be < epochs {self.epochs}")
        if not 0 < self.lr_final < self.lr_peak:
            raise ValueError(f"need 0 < lr_final < lr_peak, got {self.lr_final} / {self.lr_peak}")


def bce_loss(pred: Tensor, target) -> Tensor:
    """Mean binary cross entropy over frames, predictions clamped away from 0/1."""
    y = np.asarray(target, dtype=np.float64).reshape(-1)
    p = pred.data.reshape(-1)
    if p.shape != y.shape:
        raise ValueError(f"bce_loss: {p.shape[0]} predictions vs {y.shape[0]} targets")
    n = len(y)
    lo, hi = BCE_CLAMP, 1.0 - BCE_CLAMP
    pc = np.clip(p, lo, hi)
    value = float(-(y * np.log(pc) + (1.0 - y) * np.log1p(-pc)).mean())

    def bwd(g):
        active = (p >= lo) & (p <= hi)  # clamp kills the gradient outside
        dp = (-(y / pc) + (1.0 - y) / (1.0 - pc)) / n * g[0, 0] * active
        _accumulate(pred, dp.reshape(pred.data.shape))

    return Tensor([[value]], parents=(pred,), backward=bwd, validate=False)


def lr_schedule(step: int, steps_per_epoch: int, cfg: TrainConfig) -> float:
    """Learning rate for a global step index (0-based)."""
    if step < 0 or steps_per_epoch < 1:
        raise ValueError("step must be >= 0 and steps_per_epoch >= 1")
    warmup_steps = cfg.warmup_epochs * steps_per_epoch
    total_steps = cfg.epochs * steps_per_epoch
    if step < warmup_steps:
        return cfg.lr_peak * step / warmup_steps
    denom = max(1, total_steps - 1 - warmup_steps)
    u = min(max((step - warmup_steps) / denom, 0.0), 1.0)
    return cfg.lr_final + (cfg.lr_peak - cfg.lr_final) * 0.5 * (1.0 + math.cos(math.pi * u))


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0

    @classmethod
    def init(cls, params: Sequence[Tensor]) -> "AdamState":
        return cls(
            m=[np.zeros(p.data.shape) for p in params],
            v=[np.zeros(p.data.shape) for p in params],
        )


def adam_step(
    params: Sequence[Tensor],
    grads: Sequence[np.ndarray],
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """Standard bias-corrected Adam update, in place on the parameter tensors."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ValueError("params/grads/state length mismatch")
    state.step += 1
    t = state.step
    for i, (p, g) in enumerate(zip(params, grads)):
        g = np.asarray(g, dtype=np.float64)
        if g.shape != p.data.shape:
            raise ValueError(f"grad shape {g.shape} does not match param {p.data.shape}")
        state.m[i] = beta1 * state.m[i] + (1.0 - beta1) * g
        state.v[i] = beta2 * state.v[i] + (1.0 - beta2) * g * g
        m_hat = state.m[i] / (1.0 - beta1 ** t)
        v_hat = state.v[i] / (1.0 - beta2 ** t)
        p.update_data(p.data - lr * m_hat / (np.sqrt(v_hat) + eps))


def train(
    dataset: Sequence[tuple[VideoFeatures, np.ndarray]],
    model: GebdModel,
    cfg: TrainConfig,
) -> tuple[GebdModel, list[tuple[int, float, float]]]:
    """Seeded mini-batch training; returns the model plus a (step, lr, loss) curve.

    When cfg.smooth_targets is on, predictions are Gaussian-smoothed before
    the loss so training optimizes the smoothed scores; targets stay hard.
    """
    if not len(dataset):
        raise ValueError("train: empty dataset")
    if cfg.epochs == 0:
        return model, []
    params = [p for _, p in model.parameters()]
    state = AdamState.init(params)
    rng = np.random.default_rng(cfg.seed)
    n = len(dataset)
    steps_per_epoch = math.ceil(n / cfg.batch_size)
    curve: list[tuple[int, float, float]] = []
    global_step = 0
    for _ in range(cfg.epochs):
        order = rng.permutation(n)
        for lo in range(0, n, cfg.batch_size):
            batch = order[lo:lo + cfg.batch_size]
            total = None
            for i in batch:
                video, labels = dataset[i]
                pred = model.forward(video.stages)
                if cfg.smooth_targets:
                    pred = time_matmul(smoothing_matrix(video.num_frames, video.fps), pred)
                loss = bce_loss(pred, labels)
                total = loss if total is None else add(total, loss)
            total = scale(total, 1.0 / len(batch))
            loss_value = float(total.data[0, 0])
            if not math.isfinite(loss_value):
                raise TrainingDiverged(f"non-finite loss at step {global_step}")
            model.zero_grads()
            backward(total)
            lr = lr_schedule(global_step, steps_per_epoch, cfg)
            grads = [p.grad if p.grad is not None else np.zeros(p.data.shape) for p in params]
            adam_step(params, grads, state, lr)
            curve.append((global_step, lr, loss_value))
            global_step += 1
    return model, curve


def write_loss_curve(path: str | Path, curve: Sequence[tuple[int, float, float]]) -> None:
    lines = ["step,lr,loss"]
    for step, lr, loss in curve:
        lines.append(f"{step},{lr:.10g},{loss:.10g}")
    atomic_write_text(path, "\n".join(lines) + "\n")
