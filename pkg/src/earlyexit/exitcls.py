"""Training and evaluation of the shared linear exit classifier.

The backbone stays frozen: examples are built from copies of its hidden
states and only ``(w, b)`` are learned, by full-batch gradient descent.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit, log_expit

from .confidence import argmax


@dataclass(frozen=True)
class ExitTrainExample:
    hidden: np.ndarray  # (L-1, d_model)
    labels: np.ndarray  # (L-1,), 1 where the layer agrees with the final layer

    def __post_init__(self):
        labels = np.asarray(self.labels)
        if not np.isin(labels, (0, 1)).all():
            raise ValueError("oracle labels must be binary")
        if np.shape(self.hidden)[0] != labels.shape[0]:
            raise ValueError("one label per non-final layer required")


@dataclass
class ExitClassifierParams:
    w: np.ndarray
    b: float
    history: list[float] = field(default_factory=list, repr=False)

    @property
    def num_parameters(self) -> int:
        return self.w.size + 1


def collect_examples(backend, prompts) -> list[ExitTrainExample]:
    """Run full-depth greedy decoding and label every non-final layer of every step."""
    L = backend.num_layers
    if L < 2:
        raise ValueError("exit classifier needs at least two layers")
    out = []
    for prompt in prompts:
        session = backend.start(prompt)
        for _ in range(backend.max_len):
            hidden = np.stack([np.array(session.hidden(i), dtype=np.float64) for i in range(1, L)])
            final = argmax(session.logits(L))
            labels = np.array([argmax(session.logits(i)) == final for i in range(1, L)], dtype=int)
            out.append(ExitTrainExample(hidden, labels))
            session.commit(final, L)
            if final == 0:
                break
    return out


def _stack(examples):
    if not examples:
        raise ValueError("empty training set")
    X = np.stack([np.asarray(e.hidden, dtype=np.float64) for e in examples])
    O = np.stack([np.asarray(e.labels, dtype=np.float64) for e in examples])
    return X, O


def _weighted_bce(w, b, X, Y, weight):
    """sum(weight * BCE(sigmoid(X w + b), Y)) and its gradient."""
    z = X @ w + b
    loss = -np.sum(weight * (Y * log_expit(z) + (1 - Y) * log_expit(-z)))
    r = weight * (expit(z) - Y)
    return loss, np.einsum("nl,nld->d", r, X), r.sum()


def independent_weights(O):
    n, m = O.shape
    return O, np.full(O.shape, 1.0 / (n * m))


def geometric_weights(O):
    """Targets/weights for the first-oracle-exit event.

    Layers before the first positive get target 0, the first positive target
    1, later layers weight 0.  Rows with no positive keep every layer at 0.
    """
    n, m = O.shape
    has_exit = O.any(axis=1)
    first = np.where(has_exit, O.argmax(axis=1), m - 1)
    idx = np.arange(m)[None, :]
    weight = (idx <= first[:, None]).astype(float) / n
    Y = np.where(has_exit[:, None] & (idx == first[:, None]), 1.0, 0.0)
    return Y, weight


def objective(params_wb, examples, kind="independent"):
    """Loss and gradient ``(loss, grad_w, grad_b)`` of the chosen objective."""
    X, O = _stack(examples)
    Y, weight = (independent_weights if kind == "independent" else geometric_weights)(O)
    w, b = params_wb
    return _weighted_bce(np.asarray(w, dtype=np.float64), float(b), X, Y, weight)


def _train(examples, epochs, learning_rate, seed, kind):
    X, O = _stack(examples)
    Y, weight = (independent_weights if kind == "independent" else geometric_weights)(O)
    rng = np.random.default_rng(seed)
    w = rng.normal(0.0, 0.01, size=X.shape[-1])
    b = 0.0
    history = []
    for _ in range(epochs):
        loss, gw, gb = _weighted_bce(w, b, X, Y, weight)
        history.append(float(loss))
        w = w - learning_rate * gw
        b = b - learning_rate * gb
    history.append(float(_weighted_bce(w, b, X, Y, weight)[0]))
    return ExitClassifierParams(w, float(b), history)


def train_independent(examples, epochs=500, learning_rate=0.5, seed=0) -> ExitClassifierParams:
    """Mean per-layer binary cross-entropy against the consistency oracle."""
    return _train(examples, epochs, learning_rate, seed, "independent")


def train_geometric(examples, epochs=500, learning_rate=0.5, seed=0) -> ExitClassifierParams:
    """Negative log-probability of exiting exactly at the first oracle-positive layer."""
    return _train(examples, epochs, learning_rate, seed, "geometric")


def predict(params: ExitClassifierParams, examples) -> np.ndarray:
    X, _ = _stack(examples)
    return expit(X @ params.w + params.b)


def accuracy(params: ExitClassifierParams, examples, threshold=0.5) -> float:
    _, O = _stack(examples)
    return float(np.mean((predict(params, examples) >= threshold) == (O == 1)))


def f1_score(tp, fp, fn) -> float:
    # no positives and none predicted counts as perfect
    denom = 2 * tp + fp + fn
    return 1.0 if denom == 0 else 2 * tp / denom


def eval_layerwise_f1(params: ExitClassifierParams, examples, threshold=0.5) -> np.ndarray:
    """Per-layer F1 of the "don't exit" class (label 0, confidence < threshold)."""
    _, O = _stack(examples)
    stay_pred = predict(params, examples) < threshold
    stay_true = O == 0
    tp = np.sum(stay_pred & stay_true, axis=0)
    fp = np.sum(stay_pred & ~stay_true, axis=0)
    fn = np.sum(~stay_pred & stay_true, axis=0)
    return np.array([f1_score(*c) for c in zip(tp, fp, fn)])
