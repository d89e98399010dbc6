"""Feature extraction, detector/tracer training and inference over manifest records."""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .checkpoint import Checkpoint
from .config import RunConfig
from .corpus import ManifestRecord, utterance_waveform
from .detector import BONAFIDE, SPOOF, detection_scores, detector_forward, init_detector_params
from .frontend import EncoderParams, FeatureStack, encode, init_encoder, segment_4s
from .metrics import ConfusionTable, ScoreSet, compute_eer, empty_classes, macro_f1
from .optim import AdamW
from .tensor import Tensor
from .tracer import (UNSEEN, calibrate_threshold, decide_probs, init_tracer_params, layer_means,
                     pool_layer_means, softmax_np, trace_logits)

log = logging.getLogger(__name__)


# bump when the stub encoder's arithmetic changes so stale cache files are ignored
ENCODER_REVISION = "fbank-1"


class FeatureExtractor:
    """Waveform generation + segmenting + stub encoding, memoised per utterance."""

    def __init__(self, cfg: RunConfig, corpus_seed: int):
        self.cfg = cfg
        self.corpus_seed = corpus_seed
        self.encoder: EncoderParams = init_encoder(cfg.model.encoder())
        self.cache_dir = cfg.cache_dir
        self._memo: dict[str, FeatureStack] = {}

    def _key(self, rec: ManifestRecord) -> str:
        m = self.cfg.model
        text = (f"{ENCODER_REVISION}|{self.corpus_seed}|{rec.seed}|{rec.api_id}|{rec.duration_s!r}|{m.sample_rate}|"
                f"{m.segment_seconds!r}|{self.encoder.config}")
        return hashlib.sha256(text.encode()).hexdigest()[:32]

    def stack(self, rec: ManifestRecord) -> FeatureStack:
        key = self._key(rec)
        if key in self._memo:
            return self._memo[key]
        path = self.cache_dir / f"{key}.npy" if self.cache_dir else None
        if path is not None and path.exists():
            stack = FeatureStack(np.load(path), rec.utt_id)
        else:
            w = utterance_waveform(rec, self.corpus_seed, self.cfg.model.sample_rate)
            stack = encode(segment_4s(w, self.cfg.model.segment_seconds), self.encoder, rec.utt_id)
            if path is not None:
                path.parent.mkdir(parents=True, exist_ok=True)
                np.save(path, stack.layers)
        self._memo[key] = stack
        return stack

    def detector_inputs(self, records: list[ManifestRecord]) -> np.ndarray:
        """Last encoder layer per utterance: ``(N, C_enc, T')``."""
        return np.stack([self.stack(r).last() for r in records])

    def tracer_inputs(self, records: list[ManifestRecord]) -> np.ndarray:
        """Time-averaged layers per utterance: ``(N, L, C_enc)``."""
        return np.stack([layer_means(self.stack(r)) for r in records])


def _normalizer(x: np.ndarray, axes: tuple[int, ...], keep_shape) -> dict[str, Tensor]:
    mean = x.mean(axis=axes).reshape(keep_shape)
    std = x.std(axis=axes).reshape(keep_shape)
    # near-dead relu channels would otherwise be blown up by 1/std
    floor = max(0.1 * float(np.mean(std)), 1e-12)
    return {"norm.mean": Tensor(mean), "norm.inv_std": Tensor(1.0 / np.maximum(std, floor))}


def _batches(n: int, size: int):
    for start in range(0, n, size):
        yield slice(start, min(n, start + size))


def _minibatches(rng: np.random.Generator, n: int, size: int):
    """Endless shuffled index batches; each epoch is a fresh permutation."""
    pending: list[int] = []
    while True:
        while len(pending) < size:
            pending.extend(rng.permutation(n).tolist())
        yield np.array(pending[:size])
        pending = pending[size:]


def _labels(records) -> np.ndarray:
    return np.array([BONAFIDE if r.is_bonafide else SPOOF for r in records])


# ---------------------------------------------------------------- detector


def detector_logits(x: np.ndarray, params: dict[str, Tensor], cfg: RunConfig, batch: int = 64) -> np.ndarray:
    dcfg = cfg.model.detector()
    out = []
    with T.no_grad():
        for sl in _batches(len(x), batch):
            out.append(detector_forward(x[sl], params, dcfg).data)
    return np.concatenate(out) if out else np.zeros((0, 2))


def _mean_ce(logits: np.ndarray, y: np.ndarray) -> float:
    return float(T.cross_entropy(Tensor(logits), y).data)


@dataclass
class TrainResult:
    params: dict[str, Tensor]
    optimizer: AdamW
    log_lines: list[str] = field(default_factory=list)
    final_train_ce: float = float("nan")
    best_step: int = 0
    best_params: dict[str, np.ndarray] = field(default_factory=dict)


def train_detector(cfg: RunConfig, records: list[ManifestRecord], fx: FeatureExtractor) -> TrainResult:
    """Minibatch AdamW on cross-entropy; evaluates train CE and dev EER every ``eval_every`` steps."""
    tr = cfg.train
    train = [r for r in records if r.split == "train"]
    dev = [r for r in records if r.split == "dev"]
    if not train:
        raise ValueError("manifest has no train split")
    x, y = fx.detector_inputs(train), _labels(train)
    x_dev, dev_set = (fx.detector_inputs(dev), _scoreset(dev)) if dev else (None, None)
    dev_scored = dev_set is not None and len(set(dev_set.labels)) == 2

    params = init_detector_params(cfg.model.detector(), seed=tr.seed)
    params.update(_normalizer(x, (0, 2), (-1, 1)))
    opt = AdamW(params, tr.learning_rate, tr.weight_decay)
    dcfg = cfg.model.detector()
    batches = _minibatches(np.random.default_rng([tr.seed, 0xBA7C]), len(train), min(tr.batch_size, len(train)))
    result = TrainResult(params, opt)
    best_eer = np.inf
    for step in range(1, tr.max_steps + 1):
        idx = next(batches)
        loss = T.cross_entropy(detector_forward(x[idx], params, dcfg), y[idx])
        opt.zero_grad()
        loss.backward()
        opt.step()
        if step % tr.eval_every and step != tr.max_steps:
            continue
        train_ce = _mean_ce(detector_logits(x, params, cfg), y)
        line = f"step={step} batch_ce={float(loss.data):.6f} train_ce={train_ce:.6f}"
        if dev_scored:
            dev_set.scores = detection_scores(detector_logits(x_dev, params, cfg))
            eer = compute_eer(dev_set)[0]
            line += f" dev_eer={eer:.6f}"
            if eer < best_eer:
                best_eer, result.best_step = eer, step
                result.best_params = {k: p.data.copy() for k, p in params.items()}
        result.log_lines.append(line)
        result.final_train_ce = train_ce
        log.info(line)
    if not result.best_params:
        result.best_step = tr.max_steps
        result.best_params = {k: p.data.copy() for k, p in params.items()}
    return result


def _scoreset(records: list[ManifestRecord], scores=None) -> ScoreSet:
    scores = np.zeros(len(records)) if scores is None else scores
    return ScoreSet([r.utt_id for r in records], scores, [r.label for r in records])


def detector_checkpoint(cfg: RunConfig, params: dict[str, np.ndarray] | dict[str, Tensor], optim: AdamW | None,
                        step: int, corpus_seed: int) -> Checkpoint:
    arrays = {k: (v.data if isinstance(v, Tensor) else v) for k, v in params.items()}
    meta = {"kind": "detector", "config": cfg.to_dict(), "step": step, "corpus_seed": corpus_seed,
            "model_seed": cfg.train.seed, "score_orientation": "bonafide-high"}
    return Checkpoint(meta, arrays, optim.state_dict() if optim else {})


def score_records(ckpt: Checkpoint, records: list[ManifestRecord], fx: FeatureExtractor) -> ScoreSet:
    cfg = RunConfig.from_dict(ckpt.meta["config"])
    params = ckpt.tensors()
    return _scoreset(records, detection_scores(detector_logits(fx.detector_inputs(records), params, cfg)))


# ---------------------------------------------------------------- tracer


@dataclass
class TraceOutcome:
    params: dict[str, Tensor]
    optimizer: AdamW
    seen: list[str]
    threshold: float
    log_lines: list[str]
    splits: dict[str, dict] = field(default_factory=dict)

    @property
    def class_names(self) -> list[str]:
        return self.seen + [UNSEEN]


def tracer_probs(means: np.ndarray, params: dict[str, Tensor], batch: int = 256) -> np.ndarray:
    out = []
    with T.no_grad():
        for sl in _batches(len(means), batch):
            out.append(softmax_np(trace_logits(means[sl], params).data))
    return np.concatenate(out)


def tracer_embeddings(means: np.ndarray, params: dict[str, Tensor]) -> np.ndarray:
    with T.no_grad():
        return pool_layer_means(means, params).data


def _trace_truth(records, seen):
    index = {a: i for i, a in enumerate(seen)}
    return np.array([index.get(r.api_id, len(seen)) for r in records])


def train_tracer(cfg: RunConfig, records: list[ManifestRecord], fx: FeatureExtractor, seen: list[str]) -> TraceOutcome:
    """Fit the tracer on seen-API spoofed train audio; bonafide audio is never used."""
    tc = cfg.trace
    train = [r for r in records if r.split == "train" and not r.is_bonafide and r.api_id in seen]
    if not train:
        raise ValueError("no spoofed train utterances from seen APIs")
    means = fx.tracer_inputs(train)
    y = _trace_truth(train, seen)
    params = init_tracer_params(means.shape[-1], len(seen), tc.se_reduction, seed=tc.seed)
    params.update(_normalizer(means, (0,), means.shape[1:]))
    opt = AdamW(params, tc.learning_rate, tc.weight_decay)
    batches = _minibatches(np.random.default_rng([tc.seed, 0x7EA1]), len(train), min(tc.batch_size, len(train)))
    lines = []
    for step in range(1, tc.max_steps + 1):
        idx = next(batches)
        loss = T.cross_entropy(trace_logits(means[idx], params), y[idx])
        opt.zero_grad()
        loss.backward()
        opt.step()
        if step % max(1, tc.max_steps // 20) == 0 or step == tc.max_steps:
            probs = tracer_probs(means, params)
            ce = float(-np.mean(np.log(probs[np.arange(len(y)), y])))
            lines.append(f"step={step} batch_ce={float(loss.data):.6f} train_ce={ce:.6f}")
            log.info(lines[-1])
    return TraceOutcome(params, opt, list(seen), float("nan"), lines)


def trace_split(outcome: TraceOutcome, records: list[ManifestRecord], fx: FeatureExtractor) -> dict:
    """Probabilities, decisions and confusion table for the spoofed records given."""
    means = fx.tracer_inputs(records)
    probs = tracer_probs(means, outcome.params)
    truth = _trace_truth(records, outcome.seen)
    pred, maxp = decide_probs(probs, outcome.threshold)
    ct = ConfusionTable.from_labels(truth, pred, outcome.class_names)
    return {"records": records, "probs": probs, "truth": truth, "pred": pred, "max_prob": maxp,
            "confusion": ct, "embeddings": tracer_embeddings(means, outcome.params)}


def run_tracing(cfg: RunConfig, records: list[ManifestRecord], fx: FeatureExtractor, seen: list[str]) -> TraceOutcome:
    outcome = train_tracer(cfg, records, fx, seen)
    dev = [r for r in records if r.split == "dev" and not r.is_bonafide]
    if cfg.trace.threshold == "auto":
        dev_means = fx.tracer_inputs(dev)
        probs = tracer_probs(dev_means, outcome.params)
        outcome.threshold = calibrate_threshold(list(zip(probs, _trace_truth(dev, seen))))
    else:
        outcome.threshold = float(cfg.trace.threshold)
    for split in ("dev", "eval"):
        subset = [r for r in records if r.split == split and not r.is_bonafide]
        if subset:
            outcome.splits[split] = trace_split(outcome, subset, fx)
    return outcome


def trace_report_lines(outcome: TraceOutcome) -> list[str]:
    lines = [f"threshold={outcome.threshold!r}", f"n_seen_classes={len(outcome.seen)}"]
    for split, res in outcome.splits.items():
        ct = res["confusion"]
        for subset in ("seen", "unseen", "overall"):
            p, r, f = macro_f1(ct, subset)
            lines += [f"{split}.{subset}.precision={p!r}", f"{split}.{subset}.recall={r!r}", f"{split}.{subset}.f1={f!r}"]
        empty = empty_classes(ct)
        lines.append(f"{split}.empty_classes={','.join(empty) if empty else '-'}")
    return lines
