"""Bonafide/spoof detector assembled from nested blocks and the local-attention head."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .local_attention import LAConfig, enhance, init_attention_params, init_head_params, pooled_head
from .nesblock import NesConfig, init_nes_params, nes_block_forward
from .tensor import Tensor

VARIANTS = ("nes2net-x", "nes2net-la")
SPOOF, BONAFIDE = 0, 1


@dataclass(frozen=True)
class DetectorConfig:
    in_channels: int = 64
    channels: int = 64
    splits: int = 8
    ws_branches: int = 2
    se_reduction: int = 4
    kernel_size: int = 3
    radius: int = 1
    d_attn: int = 8
    n_blocks: int = 1
    variant: str = "nes2net-la"

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.n_blocks < 1:
            raise ValueError("n_blocks must be >= 1")
        self.nes  # validates splits/channels

    @property
    def nes(self) -> NesConfig:
        return NesConfig(self.channels, self.splits, self.ws_branches, self.se_reduction, self.kernel_size)

    @property
    def la(self) -> LAConfig:
        return LAConfig(self.radius, self.d_attn, n_classes=2)

    @property
    def uses_attention(self) -> bool:
        return self.variant == "nes2net-la"


def init_detector_params(cfg: DetectorConfig, seed: int) -> dict[str, Tensor]:
    rng = np.random.default_rng(seed)
    params: dict[str, Tensor] = {}
    if cfg.in_channels != cfg.channels:
        bound = 1 / np.sqrt(cfg.in_channels)
        params["proj.w"] = Tensor(rng.uniform(-bound, bound, (cfg.channels, cfg.in_channels, 1)), requires_grad=True)
        params["proj.b"] = Tensor(np.zeros(cfg.channels), requires_grad=True)
    for i in range(cfg.n_blocks):
        params.update(init_nes_params(cfg.nes, rng, prefix=f"nes{i}"))
        if cfg.uses_attention:
            params.update(init_attention_params(cfg.nes.width, cfg.la, rng, prefix=f"att{i}"))
    params.update(init_head_params(cfg.channels, 2, rng))
    return params


def detector_forward(x, params: dict[str, Tensor], cfg: DetectorConfig) -> Tensor:
    """Class logits ``[..., 2]`` (spoof, bonafide) for features ``[..., C_in, T']``."""
    x = T.as_tensor(x)
    if "norm.mean" in params:
        # frozen per-channel standardisation of front-end features
        x = T.mul(T.sub(x, params["norm.mean"]), params["norm.inv_std"])
    if "proj.w" in params:
        x = T.conv1d(x, params["proj.w"], params["proj.b"])
    o = None
    for i in range(cfg.n_blocks):
        h = nes_block_forward(x, params, cfg.nes, prefix=f"nes{i}").h
        o = enhance(h, params, cfg.la, prefix=f"att{i}") if cfg.uses_attention else h
        if i + 1 < cfg.n_blocks:
            x = T.concat_channels(o)
    return pooled_head(o, params)


def detection_scores(logits: Tensor | np.ndarray) -> np.ndarray:
    """Higher means more bonafide: ``logit(bonafide) - logit(spoof)``."""
    z = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    return z[..., BONAFIDE] - z[..., SPOOF]
