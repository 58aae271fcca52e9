"""Small numerically-stable helpers used across decoding, modeling, analysis."""
from __future__ import annotations

import numpy as np


def softmax(scores: np.ndarray, axis: int = -1) -> np.ndarray:
    shifted = scores - np.max(scores, axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=axis, keepdims=True)


def log_softmax(scores: np.ndarray, axis: int = -1) -> np.ndarray:
    shifted = scores - np.max(scores, axis=axis, keepdims=True)
    return shifted - np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))


def entropy_nats(probs: np.ndarray) -> float:
    """-sum p ln p with the 0*ln(0) := 0 convention."""
    p = np.asarray(probs, dtype=float)
    nz = p > 0.0
    return float(-np.sum(p[nz] * np.log(p[nz])))
