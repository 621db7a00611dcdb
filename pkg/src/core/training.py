"""Head facade and the synthetic regression task used as a training smoke test."""

from dataclasses import dataclass, field
from typing import List, Tuple

import numpy as np

from ..utils.logging import setup_logger
from .config import HeadConfig
from .head import ArrayGrads, HeadParams, head_forward, head_value_and_pullback, init_head_params
from .pyramid import FeaturePyramid
from .sepc import build_head_variant
from .tensor import Tensor

logger = setup_logger(__name__)


@dataclass(eq=False)
class PyramidHead:
    """A configured head (variant applied) with its current parameters."""
    cfg: HeadConfig
    params: HeadParams

    @classmethod
    def create(cls, cfg: HeadConfig, levels: int) -> "PyramidHead":
        return cls(cfg, build_head_variant(cfg, init_head_params(cfg, levels)))

    def __call__(self, p: FeaturePyramid) -> Tuple[FeaturePyramid, FeaturePyramid]:
        return head_forward(p, self.cfg, self.params)

    def sgd_step(self, grads: ArrayGrads, lr: float):
        """Plain gradient descent on every named parameter array."""
        updated = {name: array - lr * grads[name] for name, array in self.params.arrays().items()}
        self.params = self.params.with_arrays(updated)


def mse_loss(pred: FeaturePyramid, target: FeaturePyramid) -> Tuple[float, FeaturePyramid]:
    """0.5 * mean squared error over every element of every level, and its gradient."""
    count = sum(level.size for level in pred.levels)
    loss = 0.0
    grads = []
    for a, b in zip(pred.levels, target.levels):
        diff = a.data - b.data
        loss += 0.5 * float(np.sum(diff * diff))
        grads.append(Tensor(diff / count))
    return loss / count, pred.with_levels(grads)


@dataclass(frozen=True, eq=False)
class RegressionTask:
    """Fixed input pyramid with classification and localization targets."""
    inputs: FeaturePyramid
    cls_target: FeaturePyramid
    loc_target: FeaturePyramid


def synthetic_regression_task(cfg: HeadConfig, seed: int = 0, batch: int = 2, base: int = 8,
                              levels: int = 3) -> RegressionTask:
    """Uniform random input pyramid and targets shaped like the head's outputs."""
    rng = np.random.default_rng(seed)
    inputs = FeaturePyramid.from_sizes(batch, cfg.channels, base, base, levels, rng)
    if cfg.outputs is not None:
        num_classes, anchors = cfg.outputs
        cls_channels, loc_channels = anchors * num_classes, 4 * anchors
    else:
        cls_channels = loc_channels = cfg.channels
    cls_target = FeaturePyramid.from_sizes(batch, cls_channels, base, base, levels, rng) * 0.5
    loc_target = FeaturePyramid.from_sizes(batch, loc_channels, base, base, levels, rng) * 0.5
    return RegressionTask(inputs, cls_target, loc_target)


@dataclass(eq=False)
class TrainResult:
    head: PyramidHead
    losses: List[float] = field(default_factory=list)


def train_head(cfg: HeadConfig, task: RegressionTask, steps: int = 200, lr: float = 5e-3,
               log_every: int = 50) -> TrainResult:
    """
    Fit the head to the task with plain gradient descent.

    Args:
        cfg (HeadConfig): Head configuration, sepc_variant included
        task (RegressionTask): Inputs and targets
        steps (int): Gradient steps
        lr (float): Learning rate
        log_every (int): Log the loss every this many steps

    Returns:
        TrainResult: The trained head and steps + 1 losses (before every step and after the last)
    """
    head = PyramidHead.create(cfg, len(task.inputs))
    result = TrainResult(head)
    for step in range(steps + 1):
        cls, loc, pullback = head_value_and_pullback(task.inputs, cfg, head.params)
        cls_loss, cls_grad = mse_loss(cls, task.cls_target)
        loc_loss, loc_grad = mse_loss(loc, task.loc_target)
        loss = cls_loss + loc_loss
        result.losses.append(loss)
        if not np.isfinite(loss):
            raise FloatingPointError(f"Loss diverged at step {step}: {loss}")
        if log_every and step % log_every == 0:
            logger.info(f"step {step}: loss {loss:.6g}")
        if step == steps:
            break
        _, grads = pullback(cls_grad, loc_grad)
        head.sgd_step(grads, lr)
    return result
