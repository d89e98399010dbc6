"""Command-line entry point: ``antispoof <command> [options] [--section.key=value ...]``.

Exit codes: 0 success, 1 usage error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import logging
import re
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .config import RunConfig, load_config, write_config
from .corpus import (DEV_UNSEEN_APIS, EVAL_UNSEEN_APIS, SEEN_APIS, build_manifest, parse_api_list,
                     read_manifest, seen_api_set, utterance_waveform, write_manifest)
from .frontend import write_waveform
from .metrics import (ScoreSet, compute_act_dcf, compute_eer, compute_min_dcf, macro_f1, read_scores,
                      write_scores)
from .pipeline import (FeatureExtractor, detector_checkpoint, run_tracing, score_records,
                       trace_report_lines, train_detector)
from .tensor import NonFiniteError

log = logging.getLogger("antispoof")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2
_OVERRIDE = re.compile(r"^--([A-Za-z_][\w.]*)=(.*)$")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _api_list(text: str) -> tuple[str, ...]:
    try:
        return parse_api_list(text)
    except ValueError as e:
        raise argparse.ArgumentTypeError(str(e)) from None


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="antispoof", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-corpus", help="write a synthetic multi-API manifest")
    p.add_argument("--seed", type=int, required=True, help="corpus seed")
    p.add_argument("--n-per-api", type=int, required=True)
    p.add_argument("--n-bonafide", type=int, default=None, help="default: as many as spoofed utterances")
    p.add_argument("--seen-apis", type=_api_list, default=SEEN_APIS)
    p.add_argument("--dev-unseen-apis", type=_api_list, default=DEV_UNSEEN_APIS)
    p.add_argument("--eval-unseen-apis", type=_api_list, default=EVAL_UNSEEN_APIS)
    p.add_argument("--materialize", type=Path, default=None, help="also write 16-bit WAV files here")
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("train", help="train the detector")
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--config", type=Path, default=None)
    p.add_argument("--out", type=Path, required=True, help="output directory")

    p = sub.add_parser("score", help="score one split with a detector checkpoint")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--split", choices=("train", "dev", "eval"), default="eval")
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("eval", help="EER / minDCF / actDCF report for a score file")
    p.add_argument("--scores", type=Path, required=True)
    p.add_argument("--manifest", type=Path, default=None, help="sidecar for the seen/unseen breakdown")
    p.add_argument("--config", type=Path, default=None)
    p.add_argument("--out", type=Path, default=None, help="report path (default: stdout)")

    p = sub.add_parser("trace", help="train, calibrate and evaluate the open-set API tracer")
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--config", type=Path, default=None)
    p.add_argument("--out", type=Path, required=True, help="output directory")

    p = sub.add_parser("density", help="per-label score histogram densities as CSV")
    p.add_argument("--scores", type=Path, required=True)
    p.add_argument("--bins", type=int, default=50)
    p.add_argument("--out", type=Path, default=None)
    return parser


def _split_overrides(argv: list[str]) -> tuple[list[str], list[tuple[str, str]]]:
    rest, overrides = [], []
    known = {"--seed", "--n-per-api", "--n-bonafide", "--seen-apis", "--dev-unseen-apis", "--eval-unseen-apis",
             "--materialize", "--out", "--manifest", "--config", "--checkpoint", "--split", "--scores", "--bins"}
    for arg in argv:
        m = _OVERRIDE.match(arg)
        if m and f"--{m.group(1)}" not in known:
            overrides.append((m.group(1), m.group(2)))
        else:
            rest.append(arg)
    return rest, overrides


def _write_lines(path: Path | None, lines: list[str]) -> None:
    text = "\n".join(lines) + "\n"
    if path is None:
        sys.stdout.write(text)
    else:
        path.write_text(text, encoding="utf-8")


# ---------------------------------------------------------------- commands


def cmd_gen_corpus(args, cfg: RunConfig) -> None:
    records = build_manifest(args.seed, args.n_per_api, args.n_bonafide,
                             args.seen_apis, args.dev_unseen_apis, args.eval_unseen_apis)
    meta = {
        "seen_apis": ",".join(args.seen_apis),
        "dev_unseen_apis": ",".join(args.dev_unseen_apis) or "-",
        "eval_unseen_apis": ",".join(args.eval_unseen_apis) or "-",
        "sample_rate": cfg.model.sample_rate,
    }
    write_manifest(args.out, records, args.seed, meta)
    if args.materialize is not None:
        args.materialize.mkdir(parents=True, exist_ok=True)
        for r in records:
            write_waveform(args.materialize / f"{r.utt_id}.wav", utterance_waveform(r, args.seed, cfg.model.sample_rate))
    log.info("wrote %d records to %s", len(records), args.out)


def _load_manifest(path: Path):
    records, meta = read_manifest(path)
    return records, int(meta["corpus_seed"])


def cmd_train(args, cfg: RunConfig) -> None:
    records, corpus_seed = _load_manifest(args.manifest)
    fx = FeatureExtractor(cfg, corpus_seed)
    result = train_detector(cfg, records, fx)
    args.out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(args.out / "detector.ckpt",
                    detector_checkpoint(cfg, result.params, result.optimizer, cfg.train.max_steps, corpus_seed))
    save_checkpoint(args.out / "best.ckpt", detector_checkpoint(cfg, result.best_params, None, result.best_step, corpus_seed))
    write_config(args.out / "config.ini", cfg)
    _write_lines(args.out / "train.log", cfg.to_lines("# config.") + result.log_lines
                 + [f"final_train_ce={result.final_train_ce!r}", f"best_dev_step={result.best_step}"])


def cmd_score(args, cfg: RunConfig) -> None:
    ckpt = load_checkpoint(args.checkpoint)
    if ckpt.meta.get("kind") != "detector":
        raise ValueError(f"{args.checkpoint}: not a detector checkpoint")
    records, corpus_seed = _load_manifest(args.manifest)
    subset = [r for r in records if r.split == args.split]
    if not subset:
        raise ValueError(f"manifest has no {args.split!r} records")
    fx = FeatureExtractor(RunConfig.from_dict(ckpt.meta["config"]), corpus_seed)
    write_scores(args.out, score_records(ckpt, subset, fx), {"split": args.split})


def detection_report(scores: ScoreSet, cfg: RunConfig, api_of: dict[str, str] | None = None,
                     seen: set[str] | None = None) -> list[str]:
    """Key-value report lines; one metric per line."""
    costs = cfg.dcf.costs()
    groups = [("overall", scores)]
    if api_of is not None:
        apis = [api_of.get(u, "?") for u in scores.utt_ids]
        for name, want_seen in (("seen", True), ("unseen", False)):
            keep = [lab == "bonafide" or ((a in seen) == want_seen) for a, lab in zip(apis, scores.labels)]
            groups.append((name, scores.subset(keep)))
    lines = ["# detection report (score orientation: bonafide-high)"]
    table = []
    for name, s in groups:
        n_b, n_s = len(s.bonafide), len(s.spoof)
        lines += [f"{name}.n_bonafide={n_b}", f"{name}.n_spoof={n_s}"]
        if n_b == 0 or n_s == 0:
            lines.append(f"{name}.skipped=needs both labels")
            continue
        eer, eer_t = compute_eer(s)
        min_dcf, min_t = compute_min_dcf(s, costs)
        act = compute_act_dcf(s, costs)
        lines += [f"{name}.eer={eer!r}", f"{name}.eer_threshold={eer_t!r}", f"{name}.min_dcf={min_dcf!r}",
                  f"{name}.min_dcf_threshold={min_t!r}", f"{name}.act_dcf={act!r}"]
        table.append(f"# {name:>7}: EER / minDCF / actDCF = {100 * eer:.2f}% / {min_dcf:.3f} / {act:.3f}")
    return lines + table + cfg.to_lines()


def cmd_eval(args, cfg: RunConfig) -> None:
    scores = read_scores(args.scores)
    api_of = seen = None
    if args.manifest is not None:
        records, _ = read_manifest(args.manifest)
        api_of = {r.utt_id: r.api_id for r in records}
        seen = set(seen_api_set(records))
    _write_lines(args.out, detection_report(scores, cfg, api_of, seen))


def cmd_trace(args, cfg: RunConfig) -> None:
    records, corpus_seed = _load_manifest(args.manifest)
    seen = seen_api_set(records)
    if not seen:
        raise ValueError("manifest has no spoofed train records")
    fx = FeatureExtractor(cfg, corpus_seed)
    outcome = run_tracing(cfg, records, fx, seen)
    out = args.out
    out.mkdir(parents=True, exist_ok=True)
    meta = {"kind": "tracer", "config": cfg.to_dict(), "seen_apis": seen, "threshold": outcome.threshold,
            "step": cfg.trace.max_steps, "corpus_seed": corpus_seed, "model_seed": cfg.trace.seed}
    save_checkpoint(out / "tracer.ckpt", Checkpoint(meta, {k: p.data for k, p in outcome.params.items()},
                                                    outcome.optimizer.state_dict()))
    names = outcome.class_names
    for split, res in outcome.splits.items():
        rows = [f"#threshold={outcome.threshold!r}", "utt_id\ttrue_api\tpred_api\tmax_prob"]
        for r, pred, mp in zip(res["records"], res["pred"], res["max_prob"]):
            rows.append(f"{r.utt_id}\t{r.api_id}\t{names[pred]}\t{float(mp)!r}")
        _write_lines(out / f"decisions_{split}.tsv", rows)
        prob_rows = ["utt_id\t" + "\t".join(outcome.seen)]
        prob_rows += [r.utt_id + "\t" + "\t".join(repr(float(v)) for v in p) for r, p in zip(res["records"], res["probs"])]
        _write_lines(out / f"probs_{split}.tsv", prob_rows)
        with open(out / f"embeddings_{split}.csv", "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["utt_id", "api_id", "seen"] + [f"e{i}" for i in range(res["embeddings"].shape[1])])
            for r, e in zip(res["records"], res["embeddings"]):
                w.writerow([r.utt_id, r.api_id, int(r.api_id in seen)] + [repr(float(v)) for v in e])
    _write_lines(out / "trace.log", outcome.log_lines)
    _write_lines(out / "report.txt", ["# API tracing report: precision / recall / F1 (macro)"]
                 + trace_report_lines(outcome) + _table3(outcome) + cfg.to_lines())


def _table3(outcome) -> list[str]:
    rows = []
    for split, res in outcome.splits.items():
        for subset in ("seen", "unseen", "overall"):
            p, r, f = macro_f1(res["confusion"], subset)
            rows.append(f"# {split:>4} {subset:>7}: {p:.3f} / {r:.3f} / {f:.3f}")
    return rows


def score_density(scores: ScoreSet, bins: int) -> list[list[str]]:
    """Rows ``bin_left, bin_right, bonafide, spoof`` with per-label densities."""
    if bins < 1:
        raise ValueError("bins must be >= 1")
    lo, hi = float(scores.scores.min()), float(scores.scores.max())
    if lo == hi:
        lo, hi = lo - 0.5, hi + 0.5
    edges = np.linspace(lo, hi, bins + 1)
    width = edges[1:] - edges[:-1]
    cols = []
    for values in (scores.bonafide, scores.spoof):
        counts, _ = np.histogram(values, bins=edges)
        cols.append(counts / (max(len(values), 1) * width))
    return [[repr(float(a)), repr(float(b)), repr(float(d0)), repr(float(d1))]
            for a, b, d0, d1 in zip(edges[:-1], edges[1:], *cols)]


def cmd_density(args, cfg: RunConfig) -> None:
    rows = score_density(read_scores(args.scores), args.bins)
    _write_lines(args.out, ["bin_left,bin_right,bonafide,spoof"] + [",".join(r) for r in rows])


COMMANDS = {"gen-corpus": cmd_gen_corpus, "train": cmd_train, "score": cmd_score,
            "eval": cmd_eval, "trace": cmd_trace, "density": cmd_density}


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    argv, overrides = _split_overrides(argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        cfg = load_config(getattr(args, "config", None), overrides)
    except UsageError as e:
        print(f"antispoof: usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (KeyError, ValueError) as e:
        print(f"antispoof: bad configuration: {e}", file=sys.stderr)
        return EXIT_USAGE
    except FileNotFoundError as e:
        print(f"antispoof: {e}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        COMMANDS[args.command](args, cfg)
    except NonFiniteError as e:
        print(f"antispoof: numerical failure: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    except (OSError, ValueError, FloatingPointError) as e:
        print(f"antispoof: {args.command} failed: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
