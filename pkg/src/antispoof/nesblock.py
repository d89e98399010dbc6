"""Nested multi-scale block: channel split, cascaded Conv + WS, SE-gated residual.

For subset ``j`` of the split input::

    z_j = WS(Conv(x_j + z_{j-1}))        (no z_{j-1} term for the first subset)
    h_j = x_j + SE(Conv(z_j))

WS mixes ``ws_branches`` parallel convolutions (dilations 1, 2, ...) with
softmax-normalised learnable weights. Parameters are not shared across subsets.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor


@dataclass(frozen=True)
class NesConfig:
    channels: int = 64
    splits: int = 8
    ws_branches: int = 2
    se_reduction: int = 4
    kernel_size: int = 3

    def __post_init__(self):
        if self.splits < 1 or self.channels % self.splits:
            raise ValueError(f"splits={self.splits} must divide channels={self.channels}")
        if self.ws_branches < 1:
            raise ValueError("ws_branches must be >= 1")
        if self.se_reduction < 1:
            raise ValueError("se_reduction must be >= 1")
        if self.kernel_size % 2 == 0:
            raise ValueError("kernel_size must be odd")

    @property
    def width(self) -> int:
        """Channels per subset (C/J)."""
        return self.channels // self.splits

    @property
    def se_hidden(self) -> int:
        return max(1, self.width // self.se_reduction)


@dataclass
class SubsetActivations:
    x_subsets: list[Tensor]
    z: list[Tensor]
    h: list[Tensor]


def _conv_init(rng, c_out, c_in, k):
    bound = 1.0 / np.sqrt(c_in * k)
    return rng.uniform(-bound, bound, (c_out, c_in, k)), rng.uniform(-bound, bound, c_out)


def init_nes_params(cfg: NesConfig, rng: np.random.Generator, prefix: str = "nes0") -> dict[str, Tensor]:
    """Fresh parameters for one nested block, keyed ``{prefix}.{j}.{name}``."""
    w, k = cfg.width, cfg.kernel_size
    params = {}
    for j in range(cfg.splits):
        p = f"{prefix}.{j}"
        params[f"{p}.pre.w"], params[f"{p}.pre.b"] = _conv_init(rng, w, w, k)
        for b in range(cfg.ws_branches):
            params[f"{p}.ws{b}.w"], params[f"{p}.ws{b}.b"] = _conv_init(rng, w, w, k)
        params[f"{p}.ws.weights"] = np.zeros(cfg.ws_branches)
        params[f"{p}.post.w"], params[f"{p}.post.b"] = _conv_init(rng, w, w, k)
        params[f"{p}.se.w1"] = rng.uniform(-1, 1, (cfg.se_hidden, w)) / np.sqrt(w)
        params[f"{p}.se.w2"] = rng.uniform(-1, 1, (w, cfg.se_hidden)) / np.sqrt(cfg.se_hidden)
    return {name: Tensor(v, requires_grad=True) for name, v in params.items()}


def split_channels(x: Tensor, J: int) -> list[Tensor]:
    """Contiguous channel subsets ``[j*C/J, (j+1)*C/J)`` of ``x`` ([..., C, T])."""
    C = x.shape[-2]
    if J < 1 or C % J:
        raise ShapeError(f"split_channels: J={J} does not divide C={C}")
    width = C // J
    return [T.slice_axis(x, j * width, (j + 1) * width, axis=-2) for j in range(J)]


def weighted_summation(branch_outputs: list[Tensor], weights: Tensor) -> Tensor:
    """Convex combination ``sum_b softmax(weights)_b * branch_b``."""
    if not branch_outputs:
        raise ValueError("weighted_summation: empty branch list")
    if weights.shape != (len(branch_outputs),):
        raise ShapeError(
            f"weighted_summation: {len(branch_outputs)} branches but weights of shape {weights.shape}"
        )
    alpha = T.softmax(weights, axis=0)
    out = None
    for b, branch in enumerate(branch_outputs):
        term = T.mul(branch, T.slice_axis(alpha, b, b + 1, axis=0))
        out = term if out is None else T.add(out, term)
    return out


def squeeze_excite(x: Tensor, w1: Tensor, w2: Tensor, b1: Tensor | None = None, b2: Tensor | None = None) -> Tensor:
    """Channel gating ``x[c, t] * sigmoid(W2 relu(W1 mean_t(x)))[c]``.

    Biases are optional; the nested block uses none.
    """
    pooled = T.global_avg_pool_time(x)
    hidden = T.relu(T.linear(pooled, w1, b1))
    gate = T.sigmoid(T.linear(hidden, w2, b2))
    return T.mul(x, T.unsqueeze(gate, -1))


def _conv(x, params, name, dilation=1):
    return T.conv1d(x, params[f"{name}.w"], params[f"{name}.b"], dilation=dilation)


def nes_block_forward(x: Tensor, params: dict[str, Tensor], cfg: NesConfig, prefix: str = "nes0") -> SubsetActivations:
    if x.shape[-2] != cfg.channels:
        raise ShapeError(f"nes_block_forward: expected {cfg.channels} channels, got input {x.shape}")
    xs = split_channels(x, cfg.splits)
    zs, hs = [], []
    for j, xj in enumerate(xs):
        p = f"{prefix}.{j}"
        inp = xj if j == 0 else T.add(xj, zs[-1])
        u = _conv(inp, params, f"{p}.pre")
        branches = [_conv(u, params, f"{p}.ws{b}", dilation=b + 1) for b in range(cfg.ws_branches)]
        z = weighted_summation(branches, params[f"{p}.ws.weights"])
        refined = squeeze_excite(_conv(z, params, f"{p}.post"), params[f"{p}.se.w1"], params[f"{p}.se.w2"])
        zs.append(z)
        hs.append(T.add(xj, refined))
    return SubsetActivations(x_subsets=xs, z=zs, h=hs)
