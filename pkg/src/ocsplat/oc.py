"""Per-primitive observation statistics and observation-completeness pruning.

Each primitive keeps a running mean and variance of the camera positions
from which it was effectively observed.  Its observation completeness (OC)
is an exponential moving average of the norm of that variance, so a
primitive seen often and from well separated cameras has high OC while a
floater seen from one or two nearby cameras stays close to zero.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

GRADP_MIN = 1e-7
OC_DECAY = 0.98
OCP_MAX_OC = 0.03
OCP_MIN_OBSERVATIONS = 3


def effective_observation(grad_p):
    """1 where the positional gradient norm is strictly above 1e-7."""
    return (np.asarray(grad_p) > GRADP_MIN).astype(np.int8)


@dataclass
class ObservationStats:
    m: np.ndarray
    mean_pos: np.ndarray
    var_pos: np.ndarray
    oc: np.ndarray
    epoch_observation_count: np.ndarray

    @classmethod
    def zeros(cls, n: int) -> "ObservationStats":
        return cls(
            np.zeros(n, dtype=np.int64),
            np.zeros((n, 2)),
            np.zeros((n, 2)),
            np.zeros(n),
            np.zeros(n, dtype=np.int64),
        )

    def __len__(self) -> int:
        return len(self.m)

    def copy(self) -> "ObservationStats":
        return ObservationStats(
            self.m.copy(), self.mean_pos.copy(), self.var_pos.copy(), self.oc.copy(),
            self.epoch_observation_count.copy(),
        )

    def take(self, index) -> "ObservationStats":
        return ObservationStats(
            self.m[index], self.mean_pos[index], self.var_pos[index], self.oc[index],
            self.epoch_observation_count[index],
        )

    def concat(self, other: "ObservationStats") -> "ObservationStats":
        return ObservationStats(*(
            np.concatenate([getattr(self, k), getattr(other, k)])
            for k in ("m", "mean_pos", "var_pos", "oc", "epoch_observation_count")
        ))

    def equals(self, other: "ObservationStats") -> bool:
        return all(
            np.array_equal(getattr(self, k), getattr(other, k))
            for k in ("m", "mean_pos", "var_pos", "oc", "epoch_observation_count")
        )

    def to_dict(self) -> dict:
        return {
            "m": self.m.tolist(),
            "mean_pos": self.mean_pos.tolist(),
            "var_pos": self.var_pos.tolist(),
            "oc": self.oc.tolist(),
            "epoch_observation_count": self.epoch_observation_count.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ObservationStats":
        return cls(
            np.array(d["m"], dtype=np.int64),
            np.array(d["mean_pos"], dtype=np.float64).reshape(-1, 2),
            np.array(d["var_pos"], dtype=np.float64).reshape(-1, 2),
            np.array(d["oc"], dtype=np.float64),
            np.array(d["epoch_observation_count"], dtype=np.int64),
        )


def update_stats(stats: ObservationStats, camera_position, u) -> ObservationStats:
    """Fold one camera position into the running statistics, in place.

    Only rows with ``u == 1`` change.  The variance recurrence is the
    unbiased (n - 1) form; it is undefined for a single sample, which is
    taken to have zero variance.
    """
    sel = np.flatnonzero(np.broadcast_to(np.asarray(u, dtype=bool), stats.m.shape))
    if sel.size == 0:
        return stats
    cam = np.asarray(camera_position, dtype=np.float64)
    m = stats.m[sel] + 1
    prev_mean = stats.mean_pos[sel]
    diff = cam[None, :] - prev_mean
    mf = m[:, None].astype(np.float64)
    stats.mean_pos[sel] = prev_mean + diff / mf
    first = m <= 1
    ratio = np.where(first, 0.0, (mf[:, 0] - 2.0) / np.where(first, 1.0, mf[:, 0] - 1.0))
    var = ratio[:, None] * stats.var_pos[sel] + diff * diff / mf
    var[first] = 0.0
    stats.var_pos[sel] = var
    stats.m[sel] = m
    stats.epoch_observation_count[sel] += 1
    return stats


def update_oc(stats: ObservationStats, u) -> ObservationStats:
    """EMA of the camera-position spread; every row decays each call."""
    u = np.broadcast_to(np.asarray(u, dtype=np.float64), stats.oc.shape)
    delta = np.linalg.norm(stats.var_pos, axis=1) * u
    stats.oc = OC_DECAY * stats.oc + (1.0 - OC_DECAY) * delta
    return stats


def observe(stats: ObservationStats, camera_position, grad_p) -> np.ndarray:
    """One training iteration's update from positional gradient norms."""
    u = effective_observation(grad_p)
    update_stats(stats, camera_position, u)
    update_oc(stats, u)
    return u


def ocp_prune(stats: ObservationStats, reset: bool = True) -> np.ndarray:
    """Indices with OC below 0.03 and fewer than 3 observations this round."""
    drop = np.flatnonzero((stats.oc < OCP_MAX_OC) & (stats.epoch_observation_count < OCP_MIN_OBSERVATIONS))
    if reset:
        stats.epoch_observation_count[:] = 0
    return drop
