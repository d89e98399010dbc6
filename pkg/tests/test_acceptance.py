"""End-to-end acceptance checks, one test per numbered criterion.

Each test is tagged ``criterion(n)``; the terminal summary prints one PASS/FAIL
line per criterion. Run just this file with ``pytest tests/test_acceptance.py``.
"""

import time

import numpy as np
import pytest

import oracles
from antispoof import tensor as T
from antispoof.cli import EXIT_OK, main
from antispoof.corpus import api_spec, build_manifest, generate_utterance, read_manifest, spectral_centroid
from antispoof.detector import DetectorConfig, detector_forward, init_detector_params
from antispoof.local_attention import (LAConfig, init_attention_params, init_head_params, la_head_forward,
                                       local_attention, neighborhood)
from antispoof.metrics import DcfCosts, ScoreSet, compute_act_dcf, compute_eer, compute_min_dcf, read_scores
from antispoof.nesblock import NesConfig, init_nes_params, nes_block_forward
from antispoof.tensor import Tensor, grad_check
from antispoof.tracer import calibrate_threshold, decide_probs, init_tracer_params, softmax_np, trace_forward

pytestmark = pytest.mark.acceptance


def run(*args):
    return main([str(a) for a in args])


def report(n, ok, detail):
    print(f"\ncriterion {n}: {'PASS' if ok else 'FAIL'} ({detail})")


def _kv(path):
    out = {}
    for line in path.read_text().splitlines():
        if line and not line.startswith("#"):
            k, _, v = line.partition("=")
            out[k] = v
    return out


# ---------------------------------------------------------------- 1. gradient integrity

# Largest allowed step: at 1e-6 roundoff swamps entries with |grad| near 1e-8.
EPS = 1e-4
MIN_MARGIN = 1e-3  # relu inputs must sit this far from the kink for differencing to be valid


def _smooth(fn):
    with T.relu_margin() as margin:
        fn()
    return margin[0] > MIN_MARGIN


def _draw_config(rng):
    J = int(rng.choice([2, 4, 8]))
    C = J * int(rng.integers(1, 32 // J + 1))
    Tp = int(rng.integers(2, 17))
    return C, J, Tp


def _check_all(targets, loss, rng, per_tensor=6):
    worst = 0.0
    for t in targets:
        worst = max(worst, grad_check(loss, t, eps=EPS, n_samples=per_tensor, rng=rng))
    return worst


def _case_nesblock(rng, C, J, Tp):
    cfg = NesConfig(channels=C, splits=J, ws_branches=int(rng.integers(1, 4)), se_reduction=int(rng.integers(1, 3)))
    params = init_nes_params(cfg, rng)
    x = Tensor(rng.normal(size=(C, Tp)))
    probe = rng.normal(size=(C, Tp))

    def loss(_):
        return T.reduce_sum(T.mul(T.concat_channels(nes_block_forward(x, params, cfg).h), probe))

    return loss, [x] + list(params.values())


def _case_la_head(rng, C, J, Tp):
    cfg = LAConfig(radius=int(rng.integers(0, 3)), d_attn=int(rng.integers(1, 9)))
    params = init_attention_params(C // J, cfg, rng)
    params.update(init_head_params(C, 2, rng))
    h = [Tensor(rng.normal(size=(C // J, Tp))) for _ in range(J)]
    y = np.array([int(rng.integers(2))])

    def loss(_):
        return T.cross_entropy(T.unsqueeze(la_head_forward(h, params, cfg), 0), y)

    return loss, h[:2] + list(params.values())


def _case_tracer(rng, C, J, Tp):
    L = int(rng.integers(1, 5))
    params = init_tracer_params(C, int(rng.integers(2, 6)), se_reduction=int(rng.integers(1, 5)),
                                seed=int(rng.integers(1000)))
    stack = rng.normal(size=(L, C, Tp))
    y = np.array([0])

    def loss(_):
        return T.cross_entropy(T.unsqueeze(trace_forward(stack, params), 0), y)

    return loss, list(params.values())


def _case_detector(rng, C, J, Tp):
    cfg = DetectorConfig(in_channels=int(rng.integers(2, 33)), channels=C, splits=J,
                         ws_branches=int(rng.integers(1, 3)), se_reduction=int(rng.integers(1, 3)),
                         radius=int(rng.integers(0, 3)), d_attn=int(rng.integers(1, 6)),
                         variant=str(rng.choice(["nes2net-la", "nes2net-x"])))
    params = init_detector_params(cfg, seed=int(rng.integers(1000)))
    x = Tensor(rng.normal(size=(2, cfg.in_channels, Tp)))
    y = rng.integers(0, 2, 2)

    def loss(_):
        return T.cross_entropy(detector_forward(x, params, cfg), y)

    return loss, [x] + list(params.values())


_case_detector.per_tensor = 4  # many parameter tensors; keeps the criterion inside its time budget

CASES = {"nes_block_forward": _case_nesblock, "la_head_forward": _case_la_head,
         "trace_forward": _case_tracer, "detector loss": _case_detector}


@pytest.mark.criterion(1)
def test_gradient_integrity():
    start = time.time()
    rng = np.random.default_rng(20240917)
    worst = dict.fromkeys(CASES, 0.0)
    counts = dict.fromkeys(CASES, 0)
    redraws = 0
    for name, make in CASES.items():
        while counts[name] < 50:
            C, J, Tp = _draw_config(rng)
            loss, targets = make(rng, C, J, Tp)
            if not _smooth(lambda: loss(None)):
                redraws += 1
                continue
            worst[name] = max(worst[name], _check_all(targets, loss, rng, getattr(make, "per_tensor", 6)))
            counts[name] += 1
    elapsed = time.time() - start
    ok = max(worst.values()) < 1e-4 and elapsed < 300
    report(1, ok, ", ".join(f"{k} {v:.1e}" for k, v in worst.items()) + f"; {redraws} redraws; {elapsed:.0f}s")
    assert max(worst.values()) < 1e-4, worst
    assert elapsed < 300


# ---------------------------------------------------------------- 2. reduction equivalence


@pytest.mark.criterion(2)
def test_reduction_equivalence():
    start = time.time()
    rng = np.random.default_rng(2)
    worst = 0.0
    for i in range(100):
        J = int(rng.choice([2, 4, 8]))
        base = dict(in_channels=int(rng.integers(2, 17)), channels=J * int(rng.integers(1, 5)), splits=J,
                    radius=int(rng.integers(0, 3)), d_attn=int(rng.integers(1, 6)), se_reduction=1)
        la = DetectorConfig(**base, variant="nes2net-la")
        params = init_detector_params(la, seed=i)
        for k in params:
            if k.endswith(".wo"):
                params[k].data[...] = 0.0
        x = Tensor(rng.normal(size=(2, base["in_channels"], int(rng.integers(1, 17)))))
        a = detector_forward(x, params, la).data
        b = detector_forward(x, {k: v for k, v in params.items() if not k.startswith("att")},
                             DetectorConfig(**base, variant="nes2net-x")).data
        worst = max(worst, float(np.max(np.abs(a - b))))
    elapsed = time.time() - start
    report(2, worst <= 1e-9 and elapsed < 60, f"max |delta logit| {worst:.1e} over 100 inputs; {elapsed:.1f}s")
    assert worst <= 1e-9 and elapsed < 60


# ---------------------------------------------------------------- 3. locality


@pytest.mark.criterion(3)
def test_locality_contract():
    start = time.time()
    rng = np.random.default_rng(3)
    J, width, Tp = 8, 3, 5
    violations = 0
    for K in (0, 1, 2):
        params = init_attention_params(width, LAConfig(radius=K, d_attn=4), rng)
        h = [rng.normal(size=(width, Tp)) for _ in range(J)]

        def ys(blocks):
            ts = [Tensor(b) for b in blocks]
            return [local_attention(ts[j - 1], [ts[k - 1] for k in neighborhood(j, J, K)], params).data
                    for j in range(1, J + 1)]

        base = ys(h)
        for m in range(J):
            moved = list(h)
            moved[m] = h[m] + rng.normal(size=(width, Tp))
            after = ys(moved)
            for j in range(J):
                changed = not np.array_equal(after[j], base[j])
                violations += changed != (abs(j - m) <= K)
    elapsed = time.time() - start
    report(3, violations == 0 and elapsed < 60, f"{violations} violations over 3 x 64 (j, m) pairs")
    assert violations == 0 and elapsed < 60


# ---------------------------------------------------------------- 4. metric oracles


@pytest.mark.criterion(4)
def test_metric_oracle_equivalence():
    start = time.time()
    rng = np.random.default_rng(4)
    costs = DcfCosts()
    worst_eer = worst_min = 0.0
    act_mismatch = invariance_fail = 0
    for _ in range(1000):
        n = int(rng.integers(2, 201))
        nb = int(rng.integers(1, n))
        if rng.random() < 0.3:
            scores = rng.integers(-8, 9, n) / 4.0
        else:
            scores = rng.normal(size=n) + np.r_[np.ones(nb), np.zeros(n - nb)] * rng.uniform(0, 3)
        b, s = scores[:nb], scores[nb:]
        ss = ScoreSet.from_arrays(b, s)
        e = compute_eer(ss)[0]
        worst_eer = max(worst_eer, abs(e - oracles.eer(b.tolist(), s.tolist())))
        worst_min = max(worst_min, abs(compute_min_dcf(ss, costs)[0] - oracles.min_dcf(b.tolist(), s.tolist())))
        act_mismatch += compute_act_dcf(ss, costs) != oracles.act_dcf(b.tolist(), s.tolist())
        for f in (lambda v: np.exp(v / 3), lambda v: 2.5 * v - 1.0):
            invariance_fail += abs(compute_eer(ScoreSet.from_arrays(f(b), f(s)))[0] - e) > 1e-12
    elapsed = time.time() - start
    ok = worst_eer <= 1e-12 and worst_min <= 1e-12 and act_mismatch == 0 and invariance_fail == 0 and elapsed < 120
    report(4, ok, f"EER {worst_eer:.1e}, minDCF {worst_min:.1e}, actDCF mismatches {act_mismatch}, "
                  f"invariance failures {invariance_fail}; {elapsed:.0f}s")
    assert ok


# ---------------------------------------------------------------- 5. open-set machinery


@pytest.mark.criterion(5)
def test_open_set_machinery():
    start = time.time()
    rng = np.random.default_rng(5)
    monotone_fail = calib_fail = 0
    for _ in range(100):
        n_seen = int(rng.integers(2, 8))
        n = int(rng.integers(10, 60))
        probs = softmax_np(rng.normal(scale=rng.uniform(0.5, 4), size=(n, n_seen)))
        prev = np.zeros(n, dtype=bool)
        for t in np.linspace(0, 1, 201):
            now = decide_probs(probs, t)[0] == n_seen
            monotone_fail += bool(np.any(prev & ~now))
            prev = now
        truth = rng.integers(0, n_seen + 1, n)
        truth[:2] = [0, n_seen]
        calib_fail += calibrate_threshold(list(zip(probs, truth))) != oracles.calibrate(probs.tolist(), truth.tolist())
    elapsed = time.time() - start
    ok = monotone_fail == 0 and calib_fail == 0 and elapsed < 60
    report(5, ok, f"monotonicity failures {monotone_fail}, calibration mismatches {calib_fail}; {elapsed:.0f}s")
    assert ok


# ---------------------------------------------------------------- 6. trainability

TRAIN_ARGS = ["--train.learning_rate=1e-3", "--train.max_steps=500", "--train.eval_every=50", "--train.seed=0"]


@pytest.mark.criterion(6)
def test_trainability(tmp_path):
    start = time.time()
    m = tmp_path / "m.tsv"
    assert run("gen-corpus", "--seed", 3, "--n-per-api", 8, "--n-bonafide", 32, "--seen-apis", "A0-A3",
               "--dev-unseen-apis", "", "--eval-unseen-apis", "", "--out", m) == EXIT_OK
    records, _ = read_manifest(m)
    assert len(records) == 64
    for out in ("a", "b"):
        assert run("train", "--manifest", m, "--out", tmp_path / out, *TRAIN_ARGS) == EXIT_OK
    same = all((tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
               for f in ("detector.ckpt", "train.log"))
    ce = float(_kv(tmp_path / "a" / "train.log")["final_train_ce"])
    assert run("score", "--checkpoint", tmp_path / "a" / "detector.ckpt", "--manifest", m,
               "--split", "train", "--out", tmp_path / "s.tsv") == EXIT_OK
    scores = read_scores(tmp_path / "s.tsv")
    eer = compute_eer(scores)[0]
    separated = scores.bonafide.min() > scores.spoof.max()
    elapsed = time.time() - start
    ok = ce < 0.05 and same and eer == 0.0 and separated and elapsed < 600
    report(6, ok, f"train CE {ce:.2e} after 500 steps, deterministic={same}, train EER {eer}; {elapsed:.0f}s")
    assert ok


# ---------------------------------------------------------------- 7. end-to-end tracing

TRACE_SEEN, TRACE_DEV_UNSEEN, TRACE_EVAL_UNSEEN = ["A6", "A9", "A11", "A16", "A18"], "A22", "A25"
TRACE_ARGS = ["--trace.learning_rate=1e-3", "--trace.max_steps=2000", "--trace.seed=0"]


def _centroid_band(api, corpus_seed, n=8):
    c = [spectral_centroid(generate_utterance(api_spec(api, corpus_seed), 500 + i, 3.0)) for i in range(n)]
    return min(c), max(c)


@pytest.mark.criterion(7)
def test_end_to_end_tracing(tmp_path):
    start = time.time()
    apis = TRACE_SEEN + [TRACE_DEV_UNSEEN, TRACE_EVAL_UNSEEN]
    # separability oracle: spectral-centroid bands of all seven APIs are disjoint with a 100 Hz gap,
    # the unseen APIs come from generator families absent in the seen set
    bands = sorted(_centroid_band(a, 7) for a in apis)
    gap = min(b[0] - a[1] for a, b in zip(bands, bands[1:]))
    families = {api_spec(a, 7).family for a in TRACE_SEEN}
    assert gap >= 100.0
    assert not {api_spec(a, 7).family for a in (TRACE_DEV_UNSEEN, TRACE_EVAL_UNSEEN)} & families

    m = tmp_path / "m.tsv"
    assert run("gen-corpus", "--seed", 7, "--n-per-api", 40, "--n-bonafide", 10, "--seen-apis", ",".join(TRACE_SEEN),
               "--dev-unseen-apis", TRACE_DEV_UNSEEN, "--eval-unseen-apis", TRACE_EVAL_UNSEEN, "--out", m) == EXIT_OK
    assert run("trace", "--manifest", m, "--out", tmp_path / "t", *TRACE_ARGS) == EXIT_OK
    kv = _kv(tmp_path / "t" / "report.txt")
    seen_f1, unseen_recall = float(kv["eval.seen.f1"]), float(kv["eval.unseen.recall"])
    elapsed = time.time() - start
    ok = seen_f1 >= 0.9 and unseen_recall > 0 and elapsed < 600
    report(7, ok, f"eval seen F1 {seen_f1:.3f}, unseen recall {unseen_recall:.3f}, "
                  f"threshold {float(kv['threshold'])}; centroid gap {gap:.0f} Hz; {elapsed:.0f}s")
    assert ok


# ---------------------------------------------------------------- 8. protocol fidelity


@pytest.mark.criterion(8)
def test_protocol_fidelity():
    start = time.time()
    problems = []
    for n in (10, 100):
        recs = build_manifest(0, n)
        expect = {10: (7, 1, 2), 100: (70, 10, 20)}[n]
        for k in range(30):
            api = f"A{k}"
            got = tuple(sum(r.api_id == api and r.split == s for r in recs) for s in ("train", "dev", "eval"))
            want = expect if k <= 20 else (0, n, 0) if k <= 23 else (0, 0, n)
            if got != want:
                problems.append((n, api, got, want))
        if sum(r.label == "spoof" for r in recs) != 30 * n:
            problems.append((n, "total"))
    elapsed = time.time() - start
    report(8, not problems and elapsed < 1, f"{len(problems)} count mismatches; {elapsed:.2f}s")
    assert not problems and elapsed < 1


# ---------------------------------------------------------------- 9. determinism and round trip

TINY = ["--model.layers=3", "--model.enc_channels=16", "--model.channels=16", "--model.splits=4",
        "--model.d_attn=4", "--model.segment_seconds=1.0"]


def _pipeline(d):
    m = d / "m.tsv"
    steps = [
        ("gen-corpus", "--seed", 11, "--n-per-api", 10, "--n-bonafide", 40, "--seen-apis", "A0-A2",
         "--dev-unseen-apis", "A21", "--eval-unseen-apis", "A24", "--out", m),
        ("train", "--manifest", m, "--out", d / "run", *TINY, "--train.learning_rate=1e-3", "--train.max_steps=20",
         "--train.eval_every=10"),
        ("score", "--checkpoint", d / "run" / "detector.ckpt", "--manifest", m, "--out", d / "s.tsv"),
        ("eval", "--scores", d / "s.tsv", "--manifest", m, "--out", d / "r.txt"),
        ("trace", "--manifest", m, "--out", d / "trace", *TINY, "--trace.learning_rate=1e-3", "--trace.max_steps=20"),
        ("density", "--scores", d / "s.tsv", "--out", d / "density.csv"),
    ]
    return [run(*s) for s in steps]


@pytest.mark.criterion(9)
def test_determinism_and_round_trip(tmp_path):
    from antispoof.checkpoint import load_checkpoint, save_checkpoint

    a, b = tmp_path / "a", tmp_path / "b"
    a.mkdir(), b.mkdir()
    codes = _pipeline(a) + _pipeline(b)
    files = sorted(p.relative_to(a) for p in a.rglob("*") if p.is_file())
    differing = [str(f) for f in files if (a / f).read_bytes() != (b / f).read_bytes()]

    ck = load_checkpoint(a / "run" / "detector.ckpt")
    save_checkpoint(tmp_path / "copy.ckpt", ck)
    assert run("score", "--checkpoint", tmp_path / "copy.ckpt", "--manifest", a / "m.tsv",
               "--out", tmp_path / "s_copy.tsv") == EXIT_OK
    round_trip = np.array_equal(read_scores(tmp_path / "s_copy.tsv").scores, read_scores(a / "s.tsv").scores)
    bytes_equal = (tmp_path / "copy.ckpt").read_bytes() == (a / "run" / "detector.ckpt").read_bytes()
    ok = all(c == EXIT_OK for c in codes) and not differing and round_trip and bytes_equal
    report(9, ok, f"{len(files)} output files compared, {len(differing)} differ; checkpoint round trip exact={round_trip}")
    assert ok, differing
