"""Rectified-flow training objective and ODE sampling.

The probability path is the straight line z_t = t*z1 + (1-t)*z0 from
Gaussian noise (t=0) to data (t=1); its velocity z1 - z0 is constant in t.
Training regresses the model onto that velocity with a mean-squared error;
generation integrates the learned field with fixed-step Euler.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from miniflow import tensor as T
from miniflow.model import FeatureTap, ModelParams, mmdit_forward_batch
from miniflow.tensor import ShapeError, Tensor


@dataclass(frozen=True)
class FlowSample:
    """One training tuple along the linear path."""

    z0: np.ndarray
    z1: np.ndarray
    t: float
    z_t: np.ndarray
    u_t: np.ndarray

    @classmethod
    def make(cls, z0: np.ndarray, z1: np.ndarray, t: float) -> "FlowSample":
        zt = interpolate(Tensor(z0), Tensor(z1), t).data
        ut = target_velocity(Tensor(z0), Tensor(z1)).data
        return cls(z0=z0, z1=z1, t=t, z_t=zt, u_t=ut)


def interpolate(z0: Tensor, z1: Tensor, t: float) -> Tensor:
    """Linear blend t*z1 + (1-t)*z0; endpoints return the inputs bitwise."""
    if z0.shape != z1.shape:
        raise ShapeError(f"interpolate: shapes {z0.shape} and {z1.shape} differ")
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"interpolate: t={t} outside [0, 1]")
    if t == 0.0:
        return z0
    if t == 1.0:
        return z1
    return T.scale(z1, t) + T.scale(z0, 1.0 - t)


def target_velocity(z0: Tensor, z1: Tensor) -> Tensor:
    """dz_t/dt of the linear path: z1 - z0, independent of t."""
    if z0.shape != z1.shape:
        raise ShapeError(f"target_velocity: shapes {z0.shape} and {z1.shape} differ")
    return T.sub(z1, z0)


def fm_loss(v_pred: Tensor, z0: Tensor, z1: Tensor) -> Tensor:
    """Mean squared error between the predicted and target velocity."""
    target = target_velocity(z0, z1)
    if v_pred.shape != target.shape:
        raise ShapeError(f"fm_loss: prediction {v_pred.shape} vs target {target.shape}")
    return T.mean(T.square(T.sub(v_pred, target)))


def sample_batch(dataset, batch_size: int, rng: np.random.Generator) -> list[tuple[FlowSample, int]]:
    """Draw (FlowSample, caption_id) pairs: z1 from the dataset, z0 ~ N(0, I),
    t ~ U(0, 1). Fully determined by the rng state."""
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    if len(dataset) == 0:
        raise ValueError("cannot sample from an empty dataset")
    out = []
    for _ in range(batch_size):
        idx = int(rng.integers(0, len(dataset)))
        z1, caption_id = dataset[idx]
        z0 = rng.standard_normal(z1.shape)
        t = float(rng.uniform(0.0, 1.0))
        out.append((FlowSample.make(z0, z1, t), caption_id))
    return out


def euler_integrate(v_fn: Callable[[np.ndarray, float], np.ndarray],
                    z0: np.ndarray, steps: int) -> np.ndarray:
    """z <- z + (1/N) * v(z, k/N) for k = 0..N-1."""
    if steps < 1:
        raise ValueError(f"steps must be >= 1, got {steps}")
    z = np.asarray(z0, dtype=np.float64).copy()
    dt = 1.0 / steps
    for k in range(steps):
        z = z + dt * np.asarray(v_fn(z, k * dt))
    return z


def euler_sample(params: ModelParams, text_cond: np.ndarray, steps: int,
                 rng: np.random.Generator, count: int = 1) -> np.ndarray:
    """Integrate the learned velocity field from seeded Gaussian noise.

    ``text_cond`` is one caption condition [T, text_embed_dim] shared by all
    ``count`` trajectories; returns [count, C, H, W]. Supervision plays no
    part here: the forward pass runs without any feature tap.
    """
    cfg = params.cfg
    z0 = rng.standard_normal((count,) + cfg.latent_shape)
    if count == 0:
        return z0
    p = params.as_tensors()
    cond = np.broadcast_to(np.asarray(text_cond, dtype=np.float64),
                           (count, cfg.text_tokens, cfg.text_embed_dim))

    def v_fn(z: np.ndarray, t: float) -> np.ndarray:
        vel, _ = mmdit_forward_batch(p, cfg, z, np.full(count, t), cond, tap=None)
        return vel.data

    return euler_integrate(v_fn, z0, steps)
