"""Sliding-window local attention across nested-block outputs, plus the scoring head.

Each subset output ``h_j`` attends, frame by frame, to its neighbours
``h_k`` for ``k`` in ``[j-K, j+K]`` (clamped to the valid range). The attended
features are added back to ``h_j``; all subsets are concatenated, pooled over
time and mapped to class logits by one affine layer.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor


@dataclass(frozen=True)
class LAConfig:
    radius: int = 1
    d_attn: int = 8
    n_classes: int = 2

    def __post_init__(self):
        if self.radius < 0:
            raise ValueError("radius must be >= 0")
        if self.d_attn < 1:
            raise ValueError("d_attn must be >= 1")


def neighborhood(j: int, J: int, K: int) -> list[int]:
    """1-based indices of the window around block ``j``; no wraparound."""
    return list(range(max(1, j - K), min(J, j + K) + 1))


def init_attention_params(width: int, cfg: LAConfig, rng: np.random.Generator, prefix: str = "att0") -> dict[str, Tensor]:
    d = cfg.d_attn
    p = {
        f"{prefix}.wq": rng.normal(0, 1 / np.sqrt(width), (d, width)),
        f"{prefix}.wk": rng.normal(0, 1 / np.sqrt(width), (d, width)),
        f"{prefix}.wv": rng.normal(0, 1 / np.sqrt(width), (d, width)),
        f"{prefix}.wo": rng.normal(0, 1 / np.sqrt(d), (width, d)),
    }
    return {k: Tensor(v, requires_grad=True) for k, v in p.items()}


def init_head_params(channels: int, n_classes: int, rng: np.random.Generator, prefix: str = "fc") -> dict[str, Tensor]:
    bound = 1 / np.sqrt(channels)
    return {
        f"{prefix}.w": Tensor(rng.uniform(-bound, bound, (n_classes, channels)), requires_grad=True),
        f"{prefix}.b": Tensor(np.zeros(n_classes), requires_grad=True),
    }


def attention_weights(h_j: Tensor, neighbors: list[Tensor], params: dict[str, Tensor], prefix: str = "att0") -> Tensor:
    """Per-frame softmax weights over the window: ``[..., M, T]``."""
    if not neighbors:
        raise ValueError("local_attention: empty neighbor list")
    wq, wk = params[f"{prefix}.wq"], params[f"{prefix}.wk"]
    scale = 1.0 / np.sqrt(wq.shape[0])
    q = T.matmul(wq, h_j)
    scores = [T.reduce_sum(T.mul(q, T.matmul(wk, hm)), axis=-2, keepdims=True) for hm in neighbors]
    return T.softmax(T.mul(T.concat(scores, axis=-2), scale), axis=-2)


def local_attention(h_j: Tensor, neighbors: list[Tensor], params: dict[str, Tensor], prefix: str = "att0") -> Tensor:
    """Scaled dot-product attention of ``h_j`` over ``neighbors`` at each frame.

    Returns ``W_o @ sum_m alpha_m (W_v @ h_m)`` with the shape of ``h_j``.
    """
    for hm in neighbors:
        if hm.shape != h_j.shape:
            raise ShapeError(f"local_attention: neighbor {hm.shape} vs query {h_j.shape}")
    alpha = attention_weights(h_j, neighbors, params, prefix)
    wv = params[f"{prefix}.wv"]
    mix = None
    for m, hm in enumerate(neighbors):
        term = T.mul(T.slice_axis(alpha, m, m + 1, axis=-2), T.matmul(wv, hm))
        mix = term if mix is None else T.add(mix, term)
    return T.matmul(params[f"{prefix}.wo"], mix)


def enhance(h: list[Tensor], params: dict[str, Tensor], cfg: LAConfig, prefix: str = "att0") -> list[Tensor]:
    """Residual local attention ``o_j = h_j + y_j`` for every subset."""
    J = len(h)
    out = []
    for j in range(1, J + 1):
        window = [h[k - 1] for k in neighborhood(j, J, cfg.radius)]
        out.append(T.add(h[j - 1], local_attention(h[j - 1], window, params, prefix)))
    return out


def pooled_head(o: list[Tensor], params: dict[str, Tensor], prefix: str = "fc") -> Tensor:
    """Concatenate subsets, average over time, affine map to logits."""
    pooled = T.global_avg_pool_time(T.concat_channels(o))
    return T.linear(pooled, params[f"{prefix}.w"], params[f"{prefix}.b"])


def la_head_forward(h: list[Tensor], params: dict[str, Tensor], cfg: LAConfig, use_attention: bool = True) -> Tensor:
    """Logits from nested-block outputs; ``use_attention=False`` is the plain concat head."""
    o = enhance(h, params, cfg) if use_attention else h
    return pooled_head(o, params)
