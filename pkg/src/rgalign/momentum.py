"""Slow-moving shadow machinery for stabilized contrastive training.

The shadow is an exponential moving average of the online encoder and
projection parameters. Its embeddings feed fixed-capacity FIFO queues of
historical candidates and the soft distillation targets that blend shadow
predictions with one-hot ground truth.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .diffcore import Tensor
from .encoders import ModelParams

__all__ = [
    "TRACKED_PREFIXES", "MomentumParams", "MomentumQueue", "SoftTargets",
    "make_shadow", "ema_update", "candidate_set", "soft_targets",
]

# subset of the model that the shadow tracks: the two unimodal encoders
# and their projections (fusion and heads have no momentum copy)
TRACKED_PREFIXES = ("vision.", "text.", "proj_v.", "proj_t.")


def _tracked_names(params: ModelParams):
    return [n for n in params.names() if n.startswith(TRACKED_PREFIXES)]


class MomentumParams(ModelParams):
    """Shadow copy of the tracked parameter subset; never receives grads."""

    def __init__(self, cfg, tensors):
        super().__init__(cfg, tensors)
        self.step = 0


def make_shadow(online: ModelParams) -> MomentumParams:
    tensors = {n: Tensor(online[n].data.copy(), dtype=online[n].data.dtype)
               for n in _tracked_names(online)}
    return MomentumParams(online.cfg, tensors)


def ema_update(online: ModelParams, shadow: MomentumParams, beta: float):
    """shadow <- beta * shadow + (1 - beta) * online, elementwise."""
    if not 0.0 <= beta <= 1.0:
        raise ValueError(f"ema beta {beta} outside [0, 1]")
    expected = set(_tracked_names(online))
    have = set(shadow.names())
    if expected != have:
        missing = sorted(expected ^ have)
        raise ValueError(f"ema_update: shadow/online name mismatch: {missing}")
    for name in shadow.names():
        s = shadow[name].data
        s *= beta
        s += (1.0 - beta) * online[name].data
    shadow.step += 1


class MomentumQueue:
    """Fixed-capacity FIFO ring of unit embeddings."""

    def __init__(self, capacity, dim, dtype=np.float32):
        if capacity < 1:
            raise ValueError("queue capacity must be positive")
        self.storage = np.zeros((capacity, dim), dtype=dtype)
        self.write_head = 0
        self.valid_count = 0

    @property
    def capacity(self):
        return self.storage.shape[0]

    def enqueue(self, batch):
        """Write a batch of rows, evicting the oldest once saturated."""
        batch = np.asarray(batch)
        n = batch.shape[0]
        if n == 0 or self.capacity % n != 0:
            raise ValueError(
                f"enqueue: batch size {n} must divide capacity {self.capacity}")
        norms = np.linalg.norm(batch, axis=-1)
        off = np.abs(norms - 1.0)
        if np.any(off > 1e-4):
            bad = int(np.argmax(off))
            raise ValueError(f"enqueue: row {bad} not unit norm (|v|={norms[bad]:.6f})")
        end = self.write_head + n
        self.storage[self.write_head:end] = batch
        self.write_head = end % self.capacity
        self.valid_count = min(self.valid_count + n, self.capacity)

    def valid_rows(self):
        """Valid rows in FIFO order, oldest first."""
        if self.valid_count < self.capacity:
            return self.storage[: self.valid_count].copy()
        return np.concatenate(
            [self.storage[self.write_head:], self.storage[: self.write_head]], axis=0)

    def state(self):
        return {"storage": self.storage.copy(),
                "write_head": self.write_head,
                "valid_count": self.valid_count}

    @classmethod
    def from_state(cls, state):
        q = cls(state["storage"].shape[0], state["storage"].shape[1],
                dtype=state["storage"].dtype)
        q.storage[:] = state["storage"]
        q.write_head = int(state["write_head"])
        q.valid_count = int(state["valid_count"])
        return q


def candidate_set(queue, batch_momentum):
    """[batch; valid queue rows] so the positive for sample i sits at index i."""
    batch_momentum = np.asarray(batch_momentum)
    if queue is None or queue.valid_count == 0:
        return batch_momentum.copy()
    return np.concatenate(
        [batch_momentum, queue.valid_rows().astype(batch_momentum.dtype)], axis=0)


@dataclass
class SoftTargets:
    """Row-stochastic targets for both contrast directions (N x M each)."""

    q_i2t: np.ndarray
    q_t2i: np.ndarray


def _blend(query, candidates, alpha, tau):
    logits = (query @ candidates.T) / tau
    logits -= logits.max(axis=-1, keepdims=True)
    e = np.exp(logits)
    p = e / e.sum(axis=-1, keepdims=True)
    n, m = query.shape[0], candidates.shape[0]
    onehot = np.zeros((n, m), dtype=p.dtype)
    onehot[np.arange(n), np.arange(n)] = 1.0
    return alpha * p + (1.0 - alpha) * onehot


def soft_targets(z_v_m, z_t_m, cand_v, cand_t, alpha, tau) -> SoftTargets:
    """Blend shadow similarity distributions with one-hot ground truth.

    Row i of q_i2t scores the text candidates for image i (positive at
    index i); q_t2i is the symmetric direction.
    """
    if tau <= 0:
        raise ValueError(f"temperature {tau} must be positive")
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha {alpha} outside [0, 1]")
    z_v_m, z_t_m = np.asarray(z_v_m), np.asarray(z_t_m)
    cand_v, cand_t = np.asarray(cand_v), np.asarray(cand_t)
    return SoftTargets(
        q_i2t=_blend(z_v_m, cand_t, alpha, tau),
        q_t2i=_blend(z_t_m, cand_v, alpha, tau),
    )
