"""Per-layer exit confidences and the exit-threshold schedule."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np
from scipy.special import expit


class ConfidenceKind(str, enum.Enum):
    SOFTMAX = "softmax"
    STATE = "state"
    CLASSIFIER = "classifier"
    ORACLE = "oracle"


REAL_MEASURES = (ConfidenceKind.SOFTMAX, ConfidenceKind.STATE, ConfidenceKind.CLASSIFIER)


def argmax(x) -> int:
    """Greedy choice; ``np.argmax`` already breaks ties toward the lowest index."""
    return int(np.argmax(x))


def softmax_response(logits) -> float:
    """Top-1 minus top-2 softmax probability."""
    z = np.asarray(logits, dtype=np.float64)
    if z.ndim != 1 or z.size < 2:
        raise ValueError("softmax response needs at least two logits")
    top2 = np.partition(z, -2)[-2:]
    # p1 - p2 = (1 - e^{z2 - z1}) / sum_j e^{z_j - z1}
    z1, z2 = top2[1], top2[0]
    denom = np.exp(z - z1).sum()
    return float(np.clip(-math.expm1(z2 - z1) / denom, 0.0, 1.0))


def state_saturation(d_i, d_prev) -> float:
    """Cosine similarity of consecutive hidden states, clipped to [0, 1]."""
    a = np.asarray(d_i, dtype=np.float64)
    b = np.asarray(d_prev, dtype=np.float64)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        return 0.0
    return float(np.clip(a @ b / (na * nb), 0.0, 1.0))


def sigmoid(x):
    return expit(np.asarray(x, dtype=np.float64))


def classifier_confidence(d, w, b) -> float:
    d = np.asarray(d, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    if d.shape != w.shape:
        raise ValueError(f"classifier weight shape {w.shape} != state shape {d.shape}")
    return float(sigmoid(w @ d + float(b)))


def oracle_confidence(layer_logits, final_logits) -> float:
    if np.shape(layer_logits) != np.shape(final_logits):
        raise ValueError("logit vectors differ in size")
    return 1.0 if argmax(layer_logits) == argmax(final_logits) else 0.0


@dataclass(frozen=True)
class ThresholdPolicy:
    """Base threshold ``lam`` with optional exponential decay over timesteps.

    ``tau=None`` uses ``lam`` unchanged at every step.  Any float ``tau >= 0``
    applies ``clip(0.9*lam + 0.1*exp(-tau*t/max_len))`` with 0-based ``t``.
    """

    lam: float
    tau: float | None = None
    max_len: int = 1

    def __post_init__(self):
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError(f"threshold must lie in [0, 1], got {self.lam}")
        if self.tau is not None and self.tau < 0:
            raise ValueError(f"temperature must be >= 0, got {self.tau}")
        if self.max_len < 1:
            raise ValueError("max_len must be >= 1")


def decayed_threshold(policy: ThresholdPolicy, t: int) -> float:
    if t < 0:
        raise ValueError("timestep must be >= 0")
    if policy.tau is None:
        return float(policy.lam)
    value = 0.9 * policy.lam + 0.1 * math.exp(-policy.tau * t / policy.max_len)
    return min(1.0, max(0.0, value))
