"""Detection metrics (EER, minDCF, actDCF) and open-set tracing P/R/F1.

Score orientation is fixed: higher scores mean "more bonafide". A trial is
accepted as bonafide when ``score >= threshold``.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

ORIENTATION_HEADER = "#orientation=bonafide-high"


@dataclass(frozen=True)
class DcfCosts:
    c_miss: float = 1.0
    c_fa: float = 10.0
    p_target: float = 0.95

    def __post_init__(self):
        if self.c_miss <= 0 or self.c_fa <= 0:
            raise ValueError("DCF costs must be positive")
        if not 0.0 < self.p_target < 1.0:
            raise ValueError("p_target must lie in (0, 1)")

    @property
    def normalizer(self) -> float:
        return min(self.c_miss * self.p_target, self.c_fa * (1.0 - self.p_target))

    @property
    def bayes_threshold(self) -> float:
        return float(np.log(self.c_fa * (1.0 - self.p_target) / (self.c_miss * self.p_target)))


@dataclass
class ScoreSet:
    utt_ids: list[str]
    scores: np.ndarray
    labels: list[str]

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        if not (len(self.utt_ids) == len(self.scores) == len(self.labels)):
            raise ValueError("ScoreSet fields differ in length")
        if not np.all(np.isfinite(self.scores)):
            raise ValueError("ScoreSet contains non-finite scores")
        bad = set(self.labels) - {"bonafide", "spoof"}
        if bad:
            raise ValueError(f"unknown labels {sorted(bad)}")

    @classmethod
    def from_arrays(cls, bonafide, spoof) -> "ScoreSet":
        bonafide, spoof = np.asarray(bonafide, float), np.asarray(spoof, float)
        n = len(bonafide) + len(spoof)
        return cls([f"u{i}" for i in range(n)], np.concatenate([bonafide, spoof]),
                   ["bonafide"] * len(bonafide) + ["spoof"] * len(spoof))

    @property
    def bonafide(self) -> np.ndarray:
        return self.scores[np.array([l == "bonafide" for l in self.labels], dtype=bool)]

    @property
    def spoof(self) -> np.ndarray:
        return self.scores[np.array([l == "spoof" for l in self.labels], dtype=bool)]

    def subset(self, keep) -> "ScoreSet":
        idx = [i for i, k in enumerate(keep) if k]
        return ScoreSet([self.utt_ids[i] for i in idx], self.scores[idx], [self.labels[i] for i in idx])


def _split(s: ScoreSet):
    bona, spoof = np.sort(s.bonafide), np.sort(s.spoof)
    if bona.size == 0 or spoof.size == 0:
        raise ValueError("need at least one bonafide and one spoof score")
    return bona, spoof


def sweep_thresholds(scores: np.ndarray) -> np.ndarray:
    """-inf, midpoints between adjacent unique scores, +inf."""
    u = np.unique(scores)
    return np.concatenate([[-np.inf], (u[:-1] + u[1:]) / 2.0, [np.inf]])


def error_rates(bona: np.ndarray, spoof: np.ndarray, thresholds: np.ndarray):
    """(FAR, FRR) at each threshold; inputs must be sorted ascending."""
    far = (spoof.size - np.searchsorted(spoof, thresholds, side="left")) / spoof.size
    frr = np.searchsorted(bona, thresholds, side="left") / bona.size
    return far, frr


def compute_eer(s: ScoreSet) -> tuple[float, float]:
    """Equal error rate and its threshold.

    The crossing of FRR - FAR through zero is located on the midpoint sweep; if
    no sweep point hits it exactly, both rates are interpolated linearly
    between the two bracketing operating points.
    """
    bona, spoof = _split(s)
    th = sweep_thresholds(np.concatenate([bona, spoof]))
    far, frr = error_rates(bona, spoof, th)
    d = frr - far
    i = int(np.argmax(d >= 0))
    lam = -d[i - 1] / (d[i] - d[i - 1])
    eer = far[i - 1] + lam * (far[i] - far[i - 1])
    lo, hi = th[i - 1], th[i]
    if np.isfinite(lo) and np.isfinite(hi):
        threshold = lo + lam * (hi - lo)
    elif np.isfinite(lo) or np.isfinite(hi):
        threshold = lo if np.isfinite(lo) else hi
    else:
        threshold = bona[0]  # every score is identical
    return float(eer), float(threshold)


def dcf_curve(far: np.ndarray, frr: np.ndarray, costs: DcfCosts) -> np.ndarray:
    raw = costs.c_miss * costs.p_target * frr + costs.c_fa * (1.0 - costs.p_target) * far
    return raw / costs.normalizer


def compute_min_dcf(s: ScoreSet, costs: DcfCosts = DcfCosts()) -> tuple[float, float]:
    bona, spoof = _split(s)
    th = sweep_thresholds(np.concatenate([bona, spoof]))
    far, frr = error_rates(bona, spoof, th)
    dcf = dcf_curve(far, frr, costs)
    i = int(np.argmin(dcf))
    return float(dcf[i]), float(th[i])


def compute_act_dcf(s: ScoreSet, costs: DcfCosts = DcfCosts()) -> float:
    """DCF at the Bayes threshold, treating scores as log-likelihood ratios."""
    bona, spoof = _split(s)
    far, frr = error_rates(bona, spoof, np.array([costs.bayes_threshold]))
    return float(dcf_curve(far, frr, costs)[0])


# ---------------------------------------------------------------- score files


def write_scores(path: str | Path, s: ScoreSet, extra_header: dict | None = None) -> None:
    lines = [ORIENTATION_HEADER] + [f"#{k}={v}" for k, v in (extra_header or {}).items()]
    lines += [f"{u}\t{score!r}\t{lab}" for u, score, lab in zip(s.utt_ids, s.scores.tolist(), s.labels)]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_scores(path: str | Path) -> ScoreSet:
    """Parse a score file; files without the orientation header are refused."""
    text = Path(path).read_text(encoding="utf-8").splitlines()
    if ORIENTATION_HEADER not in (l.strip() for l in text if l.startswith("#")):
        raise ValueError(f"{path}: missing '{ORIENTATION_HEADER}' header")
    ids, scores, labels = [], [], []
    for lineno, line in enumerate(text, 1):
        if not line.strip() or line.startswith("#"):
            continue
        fields = line.split("\t")
        if len(fields) != 3:
            raise ValueError(f"{path}:{lineno}: expected utt_id<TAB>score<TAB>label")
        ids.append(fields[0])
        scores.append(float(fields[1]))
        labels.append(fields[2])
    return ScoreSet(ids, np.array(scores), labels)


# ---------------------------------------------------------------- tracing


@dataclass
class ConfusionTable:
    """``counts[true, pred]``; the last class is UNSEEN."""

    counts: np.ndarray
    class_names: list[str]

    @classmethod
    def from_labels(cls, true, pred, class_names: list[str]) -> "ConfusionTable":
        n = len(class_names)
        counts = np.zeros((n, n), dtype=np.int64)
        np.add.at(counts, (np.asarray(true, dtype=np.int64), np.asarray(pred, dtype=np.int64)), 1)
        return cls(counts, list(class_names))

    @property
    def n_classes(self) -> int:
        return self.counts.shape[0]


def per_class_prf(ct: ConfusionTable):
    """Per-class precision, recall and F1, with 0/0 taken as 0."""
    c = ct.counts.astype(np.float64)
    tp = np.diag(c)
    pred = c.sum(axis=0)
    support = c.sum(axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        p = np.where(pred > 0, tp / pred, 0.0)
        r = np.where(support > 0, tp / support, 0.0)
        f = np.where(p + r > 0, 2 * p * r / (p + r), 0.0)
    return p, r, f


def macro_f1(ct: ConfusionTable, subset: str = "overall") -> tuple[float, float, float]:
    """Unweighted (precision, recall, F1) over seen classes, the UNSEEN class, or all."""
    p, r, f = per_class_prf(ct)
    if subset == "seen":
        sel = slice(0, ct.n_classes - 1)
    elif subset == "unseen":
        sel = slice(ct.n_classes - 1, ct.n_classes)
    elif subset == "overall":
        sel = slice(None)
    else:
        raise ValueError(f"subset must be seen|unseen|overall, got {subset!r}")
    return float(np.mean(p[sel])), float(np.mean(r[sel])), float(np.mean(f[sel]))


def empty_classes(ct: ConfusionTable) -> list[str]:
    """Classes with neither support nor predictions (their F1 counts as 0)."""
    empty = (ct.counts.sum(axis=0) == 0) & (ct.counts.sum(axis=1) == 0)
    return [name for name, e in zip(ct.class_names, empty) if e]
