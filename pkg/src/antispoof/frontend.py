"""Waveform handling and a frozen, seeded stand-in for a pretrained speech encoder."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.io import wavfile

from . import tensor as T
from .tensor import Tensor

DEFAULT_SAMPLE_RATE = 16000


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate: int = DEFAULT_SAMPLE_RATE

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64).reshape(-1)
        if self.sample_rate <= 0:
            raise ValueError("sample_rate must be positive")
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("waveform contains non-finite samples")

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate


@dataclass
class FeatureStack:
    """Encoder output: ``layers`` has shape (L, C_enc, T')."""

    layers: np.ndarray
    utt_id: str = ""

    def __post_init__(self):
        if self.layers.ndim != 3 or self.layers.shape[0] < 1:
            raise ValueError(f"FeatureStack needs (L, C, T) with L >= 1, got {self.layers.shape}")

    @property
    def n_layers(self) -> int:
        return self.layers.shape[0]

    def last(self) -> np.ndarray:
        return self.layers[-1]


def segment_4s(w: Waveform, target_seconds: float = 4.0) -> Waveform:
    """Fixed-length segment: tile short signals, keep the prefix of long ones."""
    n = len(w.samples)
    if n == 0:
        raise ValueError("segment_4s: empty waveform")
    target = int(round(target_seconds * w.sample_rate))
    if n >= target:
        return Waveform(w.samples[:target].copy(), w.sample_rate)
    reps = -(-target // n)
    return Waveform(np.tile(w.samples, reps)[:target], w.sample_rate)


def n_frames(n_samples: int, win: int, hop: int) -> int:
    return (n_samples - win) // hop + 1


@dataclass(frozen=True)
class EncoderConfig:
    n_layers: int = 12
    channels: int = 64
    hop: int = 320
    win: int = 320
    kernel_size: int = 3
    seed: int = 0


@dataclass
class EncoderParams:
    config: EncoderConfig
    projection: np.ndarray
    bias: np.ndarray
    convs: list[tuple[np.ndarray, np.ndarray]] = field(default_factory=list)


def init_encoder(cfg: EncoderConfig) -> EncoderParams:
    rng = np.random.default_rng([cfg.seed, 0xE4C0])
    # gaussian bumps on the rfft bins, denser at low frequencies; rows sum to 1
    freqs = np.linspace(0.0, 1.0, cfg.win // 2 + 1)
    centers = np.sort(rng.uniform(0, 1, cfg.channels)) ** 1.5
    widths = rng.uniform(0.01, 0.06, cfg.channels)
    proj = np.exp(-0.5 * ((freqs[None, :] - centers[:, None]) / widths[:, None]) ** 2)
    proj /= proj.sum(axis=1, keepdims=True)
    bias = rng.normal(0, 0.1, cfg.channels)
    convs = []
    fan_in = cfg.channels * cfg.kernel_size
    for _ in range(cfg.n_layers - 1):
        w = rng.normal(0, np.sqrt(2.0 / fan_in), (cfg.channels, cfg.channels, cfg.kernel_size))
        b = rng.normal(0, 0.01, cfg.channels)
        convs.append((w, b))
    return EncoderParams(cfg, proj, bias, convs)


def encode(w: Waveform, enc: EncoderParams, utt_id: str = "", requires_grad: bool = False) -> FeatureStack | list[Tensor]:
    """Run the stub encoder.

    Layer 0 is a log filterbank energy, ``log1p(1e4 * F @ S_t) + bias``, where
    S_t is the Hann-windowed power spectrum of the t-th hop-spaced frame and F
    holds the fixed filter shapes. Each later layer is ``relu(conv1d(previous))``. With ``requires_grad`` the
    layers are returned as tape-connected tensors instead of a FeatureStack.
    """
    cfg = enc.config
    if len(w.samples) < cfg.win:
        raise ValueError(f"encode: waveform shorter than one {cfg.win}-sample window")
    frames = np.lib.stride_tricks.sliding_window_view(w.samples, cfg.win)[:: cfg.hop]
    power = np.abs(np.fft.rfft(frames * np.hanning(cfg.win), axis=1)) ** 2 / cfg.win
    proj = Tensor(enc.projection, requires_grad=requires_grad)
    x = T.matmul(proj, Tensor(power.T))
    layer = T.add(T.log1p(T.mul(x, 1e4)), Tensor(enc.bias[:, None], requires_grad=requires_grad))
    layers = [layer]
    for kw, kb in enc.convs:
        layer = T.relu(T.conv1d(layer, Tensor(kw, requires_grad=requires_grad), Tensor(kb, requires_grad=requires_grad)))
        layers.append(layer)
    if requires_grad:
        return layers
    return FeatureStack(np.stack([l.data for l in layers]), utt_id)


def read_waveform(path: str | Path) -> Waveform:
    """Mono PCM/float WAV, or a text file with one sample per line."""
    path = Path(path)
    if path.suffix.lower() in (".txt", ".raw", ".csv"):
        return Waveform(np.loadtxt(path, dtype=np.float64, ndmin=1))
    rate, data = wavfile.read(path)
    if data.ndim != 1:
        raise ValueError(f"{path}: expected mono audio, got {data.shape[1]} channels")
    if data.dtype == np.int16:
        samples = data.astype(np.float64) / 32768.0
    elif data.dtype == np.float32 or data.dtype == np.float64:
        samples = data.astype(np.float64)
    else:
        raise ValueError(f"{path}: unsupported sample format {data.dtype}")
    return Waveform(samples, rate)


def write_waveform(path: str | Path, w: Waveform, fmt: str = "int16") -> None:
    path = Path(path)
    if path.suffix.lower() == ".txt":
        np.savetxt(path, w.samples, fmt="%.17g")
        return
    if fmt == "int16":
        data = np.clip(np.round(w.samples * 32768.0), -32768, 32767).astype(np.int16)
    elif fmt == "float32":
        data = w.samples.astype(np.float32)
    else:
        raise ValueError(f"unknown sample format {fmt!r}")
    wavfile.write(path, w.sample_rate, data)
