"""Deterministic synthetic multi-API spoofing corpus and its split protocol.

Thirty "APIs" (A0-A29) are parameterised signal generators from five families;
bonafide speech is imitated by noise-excited, slowly drifting formant
resonators. APIs A0-A20 are split 70/10/20 into train/dev/eval, A21-A23 go to
dev only and A24-A29 to eval only.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import signal

from .frontend import DEFAULT_SAMPLE_RATE, Waveform

GENERATOR_VERSION = 1
N_APIS = 30
FAMILIES = ("harmonic-stack", "am-noise", "filtered-pulse", "chirp-mix", "vocoder-buzz")
SEEN_APIS = tuple(f"A{i}" for i in range(21))
DEV_UNSEEN_APIS = ("A21", "A22", "A23")
EVAL_UNSEEN_APIS = tuple(f"A{i}" for i in range(24, 30))
SPLITS = ("train", "dev", "eval")
SPLIT_FRACTIONS = (0.7, 0.1, 0.2)
BONAFIDE = "bonafide"
SPOOF = "spoof"

# Per family, the primary frequency parameter (Hz) is drawn from one of six
# disjoint strata so APIs of one family never share a spectral region.
_PRIMARY_RANGE = {
    "harmonic-stack": (90.0, 330.0),
    "am-noise": (600.0, 5400.0),
    "filtered-pulse": (350.0, 2750.0),
    "chirp-mix": (300.0, 4500.0),
    "vocoder-buzz": (0.7, 1.6),
}


@dataclass(frozen=True)
class ApiGenSpec:
    api_id: str
    family: str
    params: dict


@dataclass(frozen=True)
class ManifestRecord:
    utt_id: str
    seed: int
    label: str
    api_id: str
    split: str
    duration_s: float

    @property
    def is_bonafide(self) -> bool:
        return self.label == BONAFIDE


def api_index(api_id: str) -> int:
    if not api_id.startswith("A") or not api_id[1:].isdigit():
        raise ValueError(f"not an API id: {api_id!r}")
    k = int(api_id[1:])
    if not 0 <= k < N_APIS:
        raise ValueError(f"API id out of range: {api_id!r}")
    return k


def parse_api_list(text: str) -> tuple[str, ...]:
    """``"A0-A4,A21"`` -> ``("A0", "A1", "A2", "A3", "A4", "A21")``."""
    out: list[str] = []
    for part in filter(None, (p.strip() for p in text.split(","))):
        if "-" in part:
            lo, hi = (api_index(p) for p in part.split("-", 1))
            out.extend(f"A{i}" for i in range(lo, hi + 1))
        else:
            out.append(f"A{api_index(part)}")
    return tuple(out)


def api_spec(api_id: str, corpus_seed: int) -> ApiGenSpec:
    k = api_index(api_id)
    family = FAMILIES[k % len(FAMILIES)]
    rank = k // len(FAMILIES)
    rng = np.random.default_rng([corpus_seed, k, 0xA91])
    lo, hi = _PRIMARY_RANGE[family]
    primary = lo + (rank + rng.uniform(0.2, 0.8)) / 6.0 * (hi - lo)
    p: dict = {"primary": primary, "snr_db": rng.uniform(18.0, 35.0)}
    if family == "harmonic-stack":
        p.update(n_harm=int(rng.integers(4, 12)), decay=rng.uniform(0.4, 1.6), vibrato=rng.uniform(0.0, 0.04))
    elif family == "am-noise":
        p.update(q=rng.uniform(2.0, 8.0), am_rate=rng.uniform(2.0, 12.0), am_depth=rng.uniform(0.3, 0.9))
    elif family == "filtered-pulse":
        p.update(f0=rng.uniform(80.0, 250.0), second=rng.uniform(1.4, 2.4), bandwidth=rng.uniform(60.0, 250.0))
    elif family == "chirp-mix":
        p.update(n_chirps=int(rng.integers(2, 4)), span=rng.uniform(0.15, 0.5), period=rng.uniform(0.2, 0.8))
    else:
        p.update(f0=rng.uniform(90.0, 220.0), quant_bits=int(rng.integers(4, 9)), bandwidth=rng.uniform(80.0, 200.0))
    return ApiGenSpec(api_id, family, p)


def _resonator_coeffs(freq, bandwidth, fs):
    r = np.exp(-np.pi * bandwidth / fs)
    return [1.0 - r], [1.0, -2 * r * np.cos(2 * np.pi * freq / fs), r * r]


def _resonator(x, freq, bandwidth, fs):
    return signal.lfilter(*_resonator_coeffs(freq, bandwidth, fs), x)


def _add_noise(x, snr_db, rng):
    power = np.mean(x * x) + 1e-12
    return x + rng.normal(0, np.sqrt(power / 10 ** (snr_db / 10)), x.shape)


def _generate_spoof(spec: ApiGenSpec, rng, n, fs):
    p = spec.params
    t = np.arange(n) / fs
    jitter = 1.0 + rng.uniform(-0.03, 0.03)
    f = p["primary"] * jitter
    if spec.family == "harmonic-stack":
        f0 = f * (1 + p["vibrato"] * np.sin(2 * np.pi * rng.uniform(3, 7) * t))
        phase = 2 * np.pi * np.cumsum(f0) / fs
        x = sum(h ** -p["decay"] * np.sin(h * phase + rng.uniform(0, 2 * np.pi)) for h in range(1, p["n_harm"] + 1))
    elif spec.family == "am-noise":
        x = _resonator(rng.normal(0, 1, n), f, f / p["q"], fs)
        x *= 1 - p["am_depth"] * (0.5 + 0.5 * np.cos(2 * np.pi * p["am_rate"] * t))
    elif spec.family == "filtered-pulse":
        period = int(fs / (p["f0"] * jitter))
        pulses = np.zeros(n)
        pulses[rng.integers(0, period):: period] = 1.0
        x = _resonator(pulses, f, p["bandwidth"], fs) + 0.6 * _resonator(pulses, f * p["second"], p["bandwidth"], fs)
    elif spec.family == "chirp-mix":
        x = np.zeros(n)
        for c in range(p["n_chirps"]):
            base = f * (1 + 0.35 * c)
            sweep = signal.sawtooth(2 * np.pi * t / p["period"] + rng.uniform(0, 2 * np.pi), 1.0)
            inst = base * (1 + p["span"] * 0.5 * sweep)
            x += np.sin(2 * np.pi * np.cumsum(inst) / fs)
    else:
        buzz = signal.sawtooth(2 * np.pi * p["f0"] * jitter * t + rng.uniform(0, 2 * np.pi))
        x = sum(_resonator(buzz, fc * f, p["bandwidth"], fs) for fc in (500.0, 1500.0, 2500.0))
        levels = 2 ** p["quant_bits"]
        x = np.round(x / (np.max(np.abs(x)) + 1e-12) * levels) / levels
    return _add_noise(x, p["snr_db"], rng)


def _generate_bonafide(rng, n, fs, block=400):
    t = np.arange(n) / fs
    excitation = signal.lfilter([1.0], [1.0, -0.7], rng.normal(0, 1, n))
    x = np.zeros(n)
    for fc, bw in ((700.0, 130.0), (1220.0, 70.0), (2600.0, 160.0)):
        # formant frequency follows a slow random walk, one step per block
        drift = np.cumsum(rng.normal(0, 0.05, n // block + 1))
        zi = np.zeros(2)
        for b, start in enumerate(range(0, n, block)):
            seg = slice(start, start + block)
            coef_b, coef_a = _resonator_coeffs(fc * np.exp(0.15 * np.tanh(drift[b])), bw, fs)
            y, zi = signal.lfilter(coef_b, coef_a, excitation[seg], zi=zi)
            x[seg] += y
    syllables = 0.5 + 0.5 * np.sin(2 * np.pi * rng.uniform(3, 5) * t + rng.uniform(0, 2 * np.pi))
    return x * syllables ** 2


def generate_utterance(spec: ApiGenSpec | None, utt_seed: int, duration_s: float,
                       sample_rate: int = DEFAULT_SAMPLE_RATE) -> Waveform:
    """Waveform for one utterance; ``spec=None`` yields bonafide-style speech.

    Output is peak-normalised to 0.9 and bit-reproducible from the arguments.
    """
    if not 1.0 <= duration_s <= 10.0:
        raise ValueError(f"duration_s must lie in [1, 10], got {duration_s}")
    rng = np.random.default_rng(utt_seed)
    n = int(round(duration_s * sample_rate))
    x = _generate_bonafide(rng, n, sample_rate) if spec is None else _generate_spoof(spec, rng, n, sample_rate)
    x = x - np.mean(x)
    return Waveform(0.9 * x / (np.max(np.abs(x)) + 1e-12), sample_rate)


def spectral_centroid(w: Waveform) -> float:
    power = np.abs(np.fft.rfft(w.samples)) ** 2
    freqs = np.fft.rfftfreq(len(w.samples), 1.0 / w.sample_rate)
    return float(np.sum(freqs * power) / np.sum(power))


def largest_remainder(n: int, fractions=SPLIT_FRACTIONS) -> list[int]:
    """Integer apportionment of ``n`` by the largest-remainder rule (ties by order)."""
    quotas = [n * f for f in fractions]
    counts = [int(np.floor(q + 1e-9)) for q in quotas]
    remainders = [q - c for q, c in zip(quotas, counts)]
    for i in sorted(range(len(quotas)), key=lambda i: (-round(remainders[i], 9), i))[: n - sum(counts)]:
        counts[i] += 1
    return counts


def _utt_seed(corpus_seed: int, stream: int, i: int) -> int:
    return int(np.random.SeedSequence([corpus_seed, stream, i]).generate_state(1)[0])


def build_manifest(
    corpus_seed: int,
    n_per_api: int,
    n_bonafide: int | None = None,
    seen_apis=SEEN_APIS,
    dev_unseen_apis=DEV_UNSEEN_APIS,
    eval_unseen_apis=EVAL_UNSEEN_APIS,
) -> list[ManifestRecord]:
    """Records for every API and the bonafide pool, with split tags.

    Seen APIs are split 70/10/20 per API. Bonafide utterances (default: as many
    as spoofed ones) are apportioned in proportion to the per-split spoof
    counts so each split stays close to 1:1.
    """
    seen, dev_u, eval_u = tuple(seen_apis), tuple(dev_unseen_apis), tuple(eval_unseen_apis)
    all_apis = seen + dev_u + eval_u
    if len(set(all_apis)) != len(all_apis):
        raise ValueError("an API appears in more than one group")
    for a in all_apis:
        api_index(a)
    if not seen:
        raise ValueError("at least one seen API is required")
    per_api = largest_remainder(n_per_api)
    if min(per_api) == 0:
        raise ValueError(f"n_per_api={n_per_api} leaves a split empty ({per_api}); use n_per_api >= 10")

    rng = np.random.default_rng([corpus_seed, 0x5EED])
    records: list[ManifestRecord] = []
    spoof_per_split = dict.fromkeys(SPLITS, 0)

    def add(utt_id, stream, i, label, api, split):
        duration = round(float(rng.uniform(2.0, 6.0)), 3)
        records.append(ManifestRecord(utt_id, _utt_seed(corpus_seed, stream, i), label, api, split, duration))

    for api in all_apis:
        k = api_index(api)
        if api in seen:
            tags = [s for s, c in zip(SPLITS, per_api) for _ in range(c)]
        else:
            tags = ["dev" if api in dev_u else "eval"] * n_per_api
        for i, split in enumerate(tags):
            add(f"{api}_{i:05d}", k + 1, i, SPOOF, api, split)
            spoof_per_split[split] += 1

    total_spoof = sum(spoof_per_split.values())
    n_bonafide = total_spoof if n_bonafide is None else n_bonafide
    bona_counts = largest_remainder(n_bonafide, [spoof_per_split[s] / total_spoof for s in SPLITS])
    if n_bonafide and any(c == 0 for c, s in zip(bona_counts, SPLITS) if spoof_per_split[s]):
        raise ValueError(f"n_bonafide={n_bonafide} leaves a split without bonafide audio")
    i = 0
    for split, c in zip(SPLITS, bona_counts):
        for _ in range(c):
            add(f"BF_{i:05d}", 0, i, BONAFIDE, BONAFIDE, split)
            i += 1

    seeds = [(r.api_id, r.seed) for r in records]
    if len(set(seeds)) != len(seeds):
        raise RuntimeError("utterance seed collision")
    return records


def utterance_waveform(rec: ManifestRecord, corpus_seed: int, sample_rate: int = DEFAULT_SAMPLE_RATE) -> Waveform:
    spec = None if rec.is_bonafide else api_spec(rec.api_id, corpus_seed)
    return generate_utterance(spec, rec.seed, rec.duration_s, sample_rate)


MANIFEST_COLUMNS = ("utt_id", "seed", "label", "api_id", "split", "duration_s")


def write_manifest(path: str | Path, records: list[ManifestRecord], corpus_seed: int, meta: dict | None = None) -> None:
    lines = [f"# corpus_seed={corpus_seed}", f"# generator_version={GENERATOR_VERSION}"]
    lines += [f"# {k}={v}" for k, v in (meta or {}).items()]
    lines.append("\t".join(MANIFEST_COLUMNS))
    for r in records:
        lines.append(f"{r.utt_id}\t{r.seed}\t{r.label}\t{r.api_id}\t{r.split}\t{r.duration_s!r}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_manifest(path: str | Path) -> tuple[list[ManifestRecord], dict[str, str]]:
    """Records plus header metadata (``corpus_seed`` and friends, as strings)."""
    meta: dict[str, str] = {}
    records = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        if line.startswith("#"):
            key, _, value = line[1:].strip().partition("=")
            meta[key.strip()] = value.strip()
            continue
        fields = line.split("\t")
        if fields == list(MANIFEST_COLUMNS):
            continue
        if len(fields) != len(MANIFEST_COLUMNS):
            raise ValueError(f"{path}:{lineno}: expected {len(MANIFEST_COLUMNS)} fields, got {len(fields)}")
        utt, seed, label, api, split, dur = fields
        if label not in (BONAFIDE, SPOOF) or split not in SPLITS:
            raise ValueError(f"{path}:{lineno}: bad label/split {label!r}/{split!r}")
        records.append(ManifestRecord(utt, int(seed), label, api, split, float(dur)))
    if "corpus_seed" not in meta:
        raise ValueError(f"{path}: missing '# corpus_seed=' header")
    return records, meta


def seen_api_set(records: list[ManifestRecord]) -> list[str]:
    """APIs with spoofed audio in the train split, in index order."""
    return sorted({r.api_id for r in records if r.split == "train" and not r.is_bonafide}, key=api_index)
