"""Batch normalization over feature pyramids.

Three modes:
    single: per-level batch statistics, one shared affine (gamma, beta)
    independent: per-level statistics and per-level affine parameters
    integrated: statistics pooled over every level of the pyramid, shared affine

Training mode mutates the running statistics of the BNState passed in. Callers
must not run training-mode bn_forward on the same state from several threads.
"""

from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np

from ..utils.logging import setup_logger
from .config import BNMode
from .pyramid import ChannelMismatchError, EmptyPyramidError, FeaturePyramid
from .tensor import ShapeError, Tensor

logger = setup_logger(__name__)


@dataclass(eq=False)
class BNState:
    """Affine parameters, running statistics and mode of one pyramid BN.

    gamma/beta have shape (c,), or (levels, c) in independent mode. Running
    statistics have shape (c,) in integrated mode and (levels, c) otherwise.
    """
    mode: BNMode
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    eps: float = 1e-5
    momentum: float = 0.1
    training: bool = True

    @classmethod
    def create(cls, mode: BNMode, channels: int, levels: int, eps: float = 1e-5,
               momentum: float = 0.1) -> "BNState":
        """Fresh state: gamma 1, beta 0, running mean 0 and running var 1."""
        mode = BNMode(mode)
        affine = (levels, channels) if mode == BNMode.INDEPENDENT else (channels,)
        running = (channels,) if mode == BNMode.INTEGRATED else (levels, channels)
        return cls(
            mode=mode,
            gamma=np.ones(affine),
            beta=np.zeros(affine),
            running_mean=np.zeros(running),
            running_var=np.ones(running),
            eps=eps,
            momentum=momentum,
        )

    @property
    def channels(self) -> int:
        return int(self.gamma.shape[-1])

    def affine(self, level: int) -> Tuple[np.ndarray, np.ndarray]:
        if self.mode == BNMode.INDEPENDENT:
            return self.gamma[level], self.beta[level]
        return self.gamma, self.beta

    def running(self, level: int) -> Tuple[np.ndarray, np.ndarray]:
        if self.mode == BNMode.INTEGRATED:
            return self.running_mean, self.running_var
        return self.running_mean[level], self.running_var[level]


@dataclass(frozen=True, eq=False)
class BNGrads:
    gamma: np.ndarray
    beta: np.ndarray


def _pooled_moments(levels: List[np.ndarray]) -> Tuple[np.ndarray, np.ndarray]:
    count = sum(x.shape[0] * x.shape[2] * x.shape[3] for x in levels)
    if count == 0:
        raise EmptyPyramidError("Cannot compute statistics of a pyramid without elements")
    total = sum(x.sum(axis=(0, 2, 3)) for x in levels)
    mean = total / count
    sq = sum(((x - mean[None, :, None, None]) ** 2).sum(axis=(0, 2, 3)) for x in levels)
    return mean, sq / count


def ibn_statistics(p: FeaturePyramid) -> Tuple[np.ndarray, np.ndarray]:
    """
    Per-channel mean and biased variance pooled over all levels.

    Args:
        p (FeaturePyramid): Input pyramid

    Returns:
        Tuple[np.ndarray, np.ndarray]: (mean, var), each of length c

    Raises:
        EmptyPyramidError: If the pyramid holds no elements
    """
    return _pooled_moments([level.data for level in p.levels])


def _groups(p: FeaturePyramid, mode: BNMode) -> List[List[int]]:
    if mode == BNMode.INTEGRATED:
        return [list(range(len(p)))]
    return [[l] for l in range(len(p))]


def _check(p: FeaturePyramid, s: BNState):
    if p.c != s.channels:
        raise ChannelMismatchError(f"Shape mismatch on axis c: pyramid has {p.c} channels, BN expects {s.channels}")
    per_level = [arr for arr in (s.gamma, s.running_mean) if arr.ndim == 2]
    for arr in per_level:
        if arr.shape[0] != len(p):
            raise ShapeError(f"BN state holds {arr.shape[0]} levels, pyramid has {len(p)}")


def _batch_stats(p: FeaturePyramid, s: BNState) -> List[Tuple[np.ndarray, np.ndarray]]:
    """(mean, var) used by every level in training mode."""
    stats: List[Optional[Tuple[np.ndarray, np.ndarray]]] = [None] * len(p)
    for group in _groups(p, s.mode):
        moments = _pooled_moments([p[l].data for l in group])
        for l in group:
            stats[l] = moments
    return stats  # type: ignore[return-value]


def _update_running(s: BNState, stats: List[Tuple[np.ndarray, np.ndarray]]):
    m = s.momentum
    if s.mode == BNMode.INTEGRATED:
        mean, var = stats[0]
        s.running_mean = (1.0 - m) * s.running_mean + m * mean
        s.running_var = (1.0 - m) * s.running_var + m * var
        return
    s.running_mean = (1.0 - m) * s.running_mean + m * np.stack([mean for mean, _ in stats])
    s.running_var = (1.0 - m) * s.running_var + m * np.stack([var for _, var in stats])


def _expand(v: np.ndarray) -> np.ndarray:
    return v[None, :, None, None]


def bn_forward(p: FeaturePyramid, s: BNState) -> FeaturePyramid:
    """Normalize every level per ``s.mode``; training mode updates the running stats."""
    _check(p, s)
    if s.training:
        stats = _batch_stats(p, s)
        _update_running(s, stats)
    else:
        stats = [s.running(l) for l in range(len(p))]
    out = []
    for l, level in enumerate(p.levels):
        mean, var = stats[l]
        gamma, beta = s.affine(l)
        xhat = (level.data - _expand(mean)) / np.sqrt(_expand(var) + s.eps)
        out.append(Tensor(_expand(gamma) * xhat + _expand(beta)))
    return p.with_levels(out)


def bn_vjp(p: FeaturePyramid, s: BNState, grad_out: FeaturePyramid) -> Tuple[FeaturePyramid, BNGrads]:
    """
    Gradients of L = sum_l sum(grad_out_l * bn_forward(p, s)_l) without touching s.

    In training mode the batch statistics are recomputed from p and differentiated
    through; in evaluation mode the running statistics are constants.

    Returns:
        Tuple[FeaturePyramid, BNGrads]: Input-pyramid gradient and gamma/beta gradients
            shaped like s.gamma and s.beta
    """
    _check(p, s)
    if grad_out.sizes != p.sizes or len(grad_out) != len(p):
        raise ShapeError(f"grad_out sizes {grad_out.sizes} do not match the pyramid {p.sizes}")
    grad_gamma = np.zeros_like(s.gamma)
    grad_beta = np.zeros_like(s.beta)
    grad_levels: List[Optional[np.ndarray]] = [None] * len(p)

    def add_affine(l: int, g: np.ndarray, xhat: np.ndarray):
        dg = (g * xhat).sum(axis=(0, 2, 3))
        db = g.sum(axis=(0, 2, 3))
        if s.mode == BNMode.INDEPENDENT:
            grad_gamma[l] += dg
            grad_beta[l] += db
        else:
            grad_gamma[...] += dg
            grad_beta[...] += db

    if not s.training:
        for l, level in enumerate(p.levels):
            mean, var = s.running(l)
            gamma, _ = s.affine(l)
            inv_std = 1.0 / np.sqrt(var + s.eps)
            g = grad_out[l].data
            add_affine(l, g, (level.data - _expand(mean)) * _expand(inv_std))
            grad_levels[l] = g * _expand(gamma * inv_std)
        return p.with_levels(Tensor(g) for g in grad_levels), BNGrads(grad_gamma, grad_beta)

    for group in _groups(p, s.mode):
        mean, var = _pooled_moments([p[l].data for l in group])
        inv_std = 1.0 / np.sqrt(var + s.eps)
        count = sum(p[l].n * p[l].h * p[l].w for l in group)
        xhats, dxhats = {}, {}
        sum_dxhat = np.zeros_like(mean)
        sum_dxhat_xhat = np.zeros_like(mean)
        for l in group:
            gamma, _ = s.affine(l)
            g = grad_out[l].data
            xhat = (p[l].data - _expand(mean)) * _expand(inv_std)
            dxhat = g * _expand(gamma)
            add_affine(l, g, xhat)
            sum_dxhat += dxhat.sum(axis=(0, 2, 3))
            sum_dxhat_xhat += (dxhat * xhat).sum(axis=(0, 2, 3))
            xhats[l], dxhats[l] = xhat, dxhat
        for l in group:
            grad_levels[l] = _expand(inv_std) * (
                dxhats[l] - _expand(sum_dxhat / count) - xhats[l] * _expand(sum_dxhat_xhat / count)
            )
    return p.with_levels(Tensor(g) for g in grad_levels), BNGrads(grad_gamma, grad_beta)
