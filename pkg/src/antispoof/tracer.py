"""Open-set API tracing: layer attention pooling, SE classifier, max-probability rejection."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .frontend import FeatureStack
from .metrics import ConfusionTable, macro_f1
from .nesblock import squeeze_excite
from .tensor import Tensor

N_SEEN = 21
UNSEEN = "UNSEEN"
THRESHOLD_GRID = np.arange(201) / 200.0


@dataclass
class TraceDecision:
    probs: np.ndarray
    predicted: int
    max_prob: float
    threshold: float

    def is_unseen(self) -> bool:
        return self.predicted == len(self.probs)


def init_tracer_params(channels: int, n_seen: int = N_SEEN, se_reduction: int = 4, seed: int = 0) -> dict[str, Tensor]:
    rng = np.random.default_rng([seed, 0x7ACE])
    hidden = max(1, channels // se_reduction)
    bound = 1 / np.sqrt(channels)
    p = {
        "pool.w": rng.uniform(-bound, bound, (1, channels)),
        "pool.b": np.zeros(1),
        "se.w1": rng.uniform(-bound, bound, (hidden, channels)),
        "se.b1": np.zeros(hidden),
        "se.w2": rng.uniform(-1, 1, (channels, hidden)) / np.sqrt(hidden),
        "se.b2": np.zeros(channels),
        "out.w": rng.uniform(-bound, bound, (n_seen, channels)),
        "out.b": np.zeros(n_seen),
    }
    return {k: Tensor(v, requires_grad=True) for k, v in p.items()}


def layer_means(stack) -> np.ndarray:
    """Time-averaged layer embeddings ``[..., L, C]`` from a stack ``[..., L, C, T]``."""
    layers = stack.layers if isinstance(stack, FeatureStack) else np.asarray(stack)
    return layers.mean(axis=-1)


def pool_layer_means(means, params: dict[str, Tensor]) -> Tensor:
    """``sum_l softmax_l(w . e_l + b) * e_l`` over the layer axis of ``[..., L, C]``."""
    means = T.as_tensor(means)
    if "norm.mean" in params:
        means = T.mul(T.sub(means, params["norm.mean"]), params["norm.inv_std"])
    scores = T.linear(means, params["pool.w"], params["pool.b"])
    alpha = T.softmax(scores, axis=-2)
    return T.reduce_sum(T.mul(alpha, means), axis=-2)


def attention_pool(stack, params: dict[str, Tensor]) -> Tensor:
    return pool_layer_means(layer_means(stack), params)


def classify_pooled(pooled: Tensor, params: dict[str, Tensor]) -> Tensor:
    gated = squeeze_excite(T.unsqueeze(pooled, -1), params["se.w1"], params["se.w2"], params["se.b1"], params["se.b2"])
    return T.linear(T.reshape(gated, gated.shape[:-1]), params["out.w"], params["out.b"])


def trace_logits(means, params: dict[str, Tensor]) -> Tensor:
    return classify_pooled(pool_layer_means(means, params), params)


def trace_forward(stack, params: dict[str, Tensor]) -> Tensor:
    """Seen-class logits for one stack ``(L, C, T)`` or a batch ``(B, L, C, T)``."""
    return trace_logits(layer_means(stack), params)


def softmax_np(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def decide_probs(probs: np.ndarray, threshold: float) -> tuple[np.ndarray, np.ndarray]:
    """Predicted class per row (``n_seen`` means UNSEEN) and the max probability."""
    probs = np.atleast_2d(probs)
    top = np.argmax(probs, axis=-1)  # first maximum wins ties
    maxp = probs[np.arange(len(probs)), top]
    return np.where(maxp < threshold, probs.shape[-1], top), maxp


def open_set_decide(logits, threshold: float) -> TraceDecision:
    if not 0.0 <= threshold <= 1.0:
        raise ValueError(f"threshold must lie in [0, 1], got {threshold}")
    z = logits.data if isinstance(logits, Tensor) else np.asarray(logits, dtype=np.float64)
    probs = softmax_np(z)
    pred, maxp = decide_probs(probs, threshold)
    return TraceDecision(probs, int(pred[0]), float(maxp[0]), float(threshold))


def calibrate_threshold(dev_decisions) -> float:
    """Grid threshold (step 0.005) maximising overall macro-F1; ties go to the smallest.

    ``dev_decisions`` holds ``(probs, true_label)`` pairs where ``true_label``
    equals ``len(probs)`` for unseen samples.
    """
    probs = np.array([p for p, _ in dev_decisions], dtype=np.float64)
    truth = np.array([t for _, t in dev_decisions], dtype=np.int64)
    n_seen = probs.shape[1]
    if not np.any(truth == n_seen) or not np.any(truth < n_seen):
        raise ValueError("calibration set needs both seen and unseen samples")
    names = [str(i) for i in range(n_seen)] + [UNSEEN]
    best_t, best_f1 = 0.0, -1.0
    for t in THRESHOLD_GRID:
        pred, _ = decide_probs(probs, t)
        f1 = macro_f1(ConfusionTable.from_labels(truth, pred, names), "overall")[2]
        if f1 > best_f1:
            best_t, best_f1 = float(t), f1
    return best_t
