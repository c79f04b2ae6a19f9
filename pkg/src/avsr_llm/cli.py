"""Command-line entry point: ``avsr-llm <subcommand>``.

Exit codes: 0 success, 2 configuration/validation error, 3 runtime abort.
"""

from __future__ import annotations

import argparse
import math
import sys
from pathlib import Path

from .autograd import ParameterError
from .config import OUTPUT_ROOT_ENV, RunConfig, output_root
from .data import generate_corpus, save_corpus, split_corpus
from .evaluate import compression_table, evaluate, format_snr, noise_table, write_records
from .nn import CapacityError, ConfigError
from .pipeline import (RunSpec, backbone_path, backbone_state, build_model, load_model, load_splits,
                       token_estimate, train_model, write_train_outputs)
from .plots import wer_vs_k, wer_vs_snr
from .train import TrainingAborted, eval_noise_rng, prepare_features, save_json

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3


class UsageError(Exception):
    """Refusal that maps to the configuration exit code."""


def _log(msg: str) -> None:
    print(msg, flush=True)


def _prepare_out(path: Path, force: bool) -> Path:
    if path.exists() and any(path.iterdir()) and not force:
        raise UsageError(f"{path} exists and is not empty; pass --force to overwrite")
    path.mkdir(parents=True, exist_ok=True)
    return path


def _load_config(args) -> RunConfig:
    overrides = list(args.set or [])
    for flag, key in (("task", "task"), ("seed", "seed"), ("corpus", "corpus.path"),
                      ("K_audio", "model.K_audio"), ("K_video", "model.K_video")):
        value = getattr(args, flag, None)
        if value is not None:
            overrides.append(f"{key}={value}")
    return RunConfig.load(args.config, overrides)


def _out_dir(args, cfg: RunConfig, default_name: str) -> Path:
    if getattr(args, "out", None):
        return Path(args.out)
    if cfg["output_dir"]:
        return Path(cfg["output_dir"])
    return output_root() / default_name


# -- subcommands ------------------------------------------------------------------

def cmd_generate_data(args) -> int:
    cfg = _load_config(args)
    spec = cfg.corpus_spec()
    out = _prepare_out(_out_dir(args, cfg, "corpus"), args.force)
    utts = generate_corpus(spec)
    save_corpus(utts, spec, out)
    cfg.save(out / "config.yaml")
    sizes = {k: len(v) for k, v in split_corpus(utts).items()}
    _log(f"wrote {len(utts)} utterances to {out}")
    _log("  ".join(f"{k}: {v}" for k, v in sizes.items()))
    return EXIT_OK


def _header(cfg: RunConfig, run: RunSpec) -> list[str]:
    tc = cfg.train_config(run.task, run.seed)
    model = build_model(cfg, run, None)
    breakdown = model.expected_trainable()
    lines = [f"task {run.task}  K_audio {run.K_audio}  K_video {run.K_video}  seed {run.seed}",
             f"lr {tc.lr_peak:g}  weight decay {tc.weight_decay:g}  epochs {tc.epochs}  batch {tc.batch_size}  "
             f"warmup {tc.warmup_fraction:g}",
             f"trainable parameters {model.store.num_trainable()} = "
             + " + ".join(f"{k} {v}" for k, v in breakdown.items())]
    est = token_estimate(cfg, run)
    lines.append("token budget per utterance: " + "  ".join(f"{k} {v}" for k, v in est.items()))
    return lines


def cmd_train(args) -> int:
    cfg = _load_config(args)
    run = RunSpec.from_config(cfg)
    for line in _header(cfg, run):
        _log(line)
    if args.dry_run:
        _log("dry run: configuration valid, nothing trained")
        return EXIT_OK
    out = _prepare_out(_out_dir(args, cfg, run.label()), args.force)
    cfg.save(out / "config.yaml")
    splits = load_splits(cfg)
    state = backbone_state(cfg, log=_log)
    try:
        model, result = train_model(cfg, run, splits["train"], state, _log)
    except TrainingAborted as e:
        save_json(out / "abort_snapshot.json", e.snapshot)
        raise
    write_train_outputs(out, model, result, cfg, run)
    audit = result.freeze_audit
    _log(f"freeze audit: {audit['frozen_params']} frozen tensors, unchanged={audit['unchanged']}")
    _log(f"wrote {out / 'checkpoint.npz'} ({result.wall_clock_s:.0f}s)")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    model, ckpt_cfg, run = load_model(args.checkpoint)
    cfg = _load_config(args) if (args.config or args.set or args.corpus) else ckpt_cfg
    decode_cfg, method = cfg.decode_config()
    if args.method:
        method = args.method
    snr = cfg.eval_snr() if args.snr is None else _parse_snr(args.snr)
    limit = args.limit if args.limit is not None else cfg["eval"]["limit"]
    _log(f"decoding: {method}, beam width {decode_cfg.beam_width}, temperature {decode_cfg.temperature:g}")
    test = load_splits(cfg)["test"]
    rec = evaluate(model, test, snr, decode_cfg, method, run.seed, limit)
    out = Path(args.out) if args.out else Path(args.checkpoint).parent
    out.mkdir(parents=True, exist_ok=True)
    write_records(out / "eval.jsonl", [rec])
    table = noise_table([rec])
    (out / "eval_table.txt").write_text(table + "\n")
    _log(table)
    return EXIT_OK


def _parse_snr(text: str) -> float:
    if text.strip().lower() in ("inf", "clean", "+inf"):
        return math.inf
    return float(text)


def cmd_sweep(args) -> int:
    cfg = _load_config(args)
    sweep = cfg["sweep"]
    if args.kind:
        sweep["kind"] = args.kind
    tasks, seeds = sweep["tasks"], sweep["seeds"]
    grid = sweep["K_values"] if sweep["kind"] == "compression" else cfg.sweep_snrs()
    if not tasks or not seeds or not grid:
        raise UsageError(f"empty {sweep['kind']} grid: tasks={tasks} seeds={seeds} values={grid}")
    if sweep["kind"] == "compression" and any(not 1 <= int(k) <= 8 for k in grid):
        raise UsageError(f"K values must lie in [1, 8], got {grid}")
    out = _prepare_out(_out_dir(args, cfg, f"sweep-{sweep['kind']}"), args.force)
    cfg.save(out / "config.yaml")
    decode_cfg, method = cfg.decode_config()
    limit = cfg["eval"]["limit"]
    splits = load_splits(cfg)
    state = backbone_state(cfg, log=_log)
    base = RunSpec.from_config(cfg)
    records = []

    if sweep["kind"] == "compression":
        for task in tasks:
            for K in grid:
                for seed in seeds:
                    run = RunSpec(task, int(K) if task != "VSR" else base.K_audio,
                                  int(K) if task == "VSR" else base.K_video, seed)
                    _log(f"== {run.label()}")
                    model, _ = train_model(cfg, run, splits["train"], state, _log)
                    rec = evaluate(model, splits["test"], math.inf, decode_cfg, method, seed, limit)
                    _log(f"   tokens {rec.tokens}  WER {rec.wer:.2f}")
                    records.append(rec)
        table = compression_table(records)
        series: dict[str, dict[int, list[float]]] = {}
        for r in records:
            K = r.K_v if r.task == "VSR" else r.K_a
            series.setdefault(r.task, {}).setdefault(K, []).append(r.wer)
        (out / "wer_vs_k.svg").write_text(wer_vs_k({t: {k: sum(v) / len(v) for k, v in d.items()}
                                                    for t, d in series.items()}))
    else:
        for task in tasks:
            for seed in seeds:
                run = RunSpec(task, base.K_audio, base.K_video, seed)
                _log(f"== {run.label()}")
                model, _ = train_model(cfg, run, splits["train"], state, _log)
                for snr in grid:
                    rec = evaluate(model, splits["test"], snr, decode_cfg, method, seed, limit)
                    _log(f"   snr {format_snr(snr):>4s}  WER {rec.wer:.2f}")
                    records.append(rec)
        table = noise_table(records)
        series_snr: dict[str, dict[float, list[float]]] = {}
        for r in records:
            series_snr.setdefault(r.task, {}).setdefault(r.snr_db, []).append(r.wer)
        (out / "wer_vs_snr.svg").write_text(wer_vs_snr({t: {s: sum(v) / len(v) for s, v in d.items()}
                                                        for t, d in series_snr.items()}))
    write_records(out / "records.jsonl", records)
    (out / "table.txt").write_text(table + "\n")
    _log(table)
    return EXIT_OK


def cmd_decode(args) -> int:
    model, ckpt_cfg, run = load_model(args.checkpoint)
    cfg = _load_config(args) if (args.config or args.set or args.corpus) else ckpt_cfg
    decode_cfg, method = cfg.decode_config()
    if args.method:
        method = args.method
    test = load_splits(cfg)["test"]
    ids = [u.uid for u in test]
    if args.utt in ids:
        index = ids.index(args.utt)
    else:
        try:
            index = int(args.utt)
        except ValueError:
            raise UsageError(f"unknown utterance {args.utt!r}") from None
        if not 0 <= index < len(test):
            raise UsageError(f"utterance index {index} outside [0, {len(test)})")
    snr = _parse_snr(args.snr)
    audio, video = prepare_features(test, index, snr, eval_noise_rng(run.seed, index, snr))
    hyp = model.transcribe(audio if model.cfg.uses_audio else None, video if model.cfg.uses_video else None,
                           decode_cfg, method)
    _log(f"utterance {test[index].uid}  snr {format_snr(snr)}  method {method}")
    _log(f"ref: {' '.join(test[index].text())}")
    _log(f"hyp: {' '.join(model.hyp_words(hyp))}")
    _log(f"log score {hyp.log_score:.4f}  finished {hyp.finished}  truncated {hyp.truncated}")
    return EXIT_OK


def cmd_pretrain_llm(args) -> int:
    cfg = _load_config(args)
    path = backbone_path(cfg)
    if path.exists() and args.force:
        path.unlink()
    backbone_state(cfg, log=_log)
    _log(f"pretrained decoder at {path}")
    return EXIT_OK


# -- parser -------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="avsr-llm", description="Toy audio-visual speech recognition with a "
                                "LoRA-adapted decoder-only language model.",
                                epilog=f"Outputs default to ${OUTPUT_ROOT_ENV} (else ./runs).")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out=True):
        sp.add_argument("--config", help="YAML run configuration")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config value (repeatable)")
        sp.add_argument("--corpus", help="corpus directory (overrides corpus.path)")
        if out:
            sp.add_argument("--out", help="output directory")

    sp = sub.add_parser("generate-data", help="write the synthetic corpus to disk")
    common(sp)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--force", action="store_true", help="overwrite a non-empty output directory")
    sp.set_defaults(func=cmd_generate_data)

    sp = sub.add_parser("pretrain-llm", help="pretrain and cache the frozen decoder")
    common(sp, out=False)
    sp.add_argument("--force", action="store_true", help="retrain even if cached")
    sp.set_defaults(func=cmd_pretrain_llm)

    sp = sub.add_parser("train", help="train projectors and LoRA adapters")
    common(sp)
    sp.add_argument("--task", choices=("ASR", "VSR", "AVSR"))
    sp.add_argument("--seed", type=int)
    sp.add_argument("--K-audio", dest="K_audio", type=int)
    sp.add_argument("--K-video", dest="K_video", type=int)
    sp.add_argument("--force", action="store_true")
    sp.add_argument("--dry-run", action="store_true", help="validate and print the run header only")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("evaluate", help="decode the test split and report WER")
    common(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--snr", help="SNR in dB or 'inf'")
    sp.add_argument("--method", choices=("beam", "greedy"))
    sp.add_argument("--limit", type=int, help="evaluate only the first N test utterances")
    sp.set_defaults(func=cmd_evaluate)

    sp = sub.add_parser("sweep", help="compression-rate or noise sweep with tables and SVG plots")
    common(sp)
    sp.add_argument("--kind", choices=("compression", "noise"))
    sp.add_argument("--force", action="store_true")
    sp.set_defaults(func=cmd_sweep)

    sp = sub.add_parser("decode", help="decode one test utterance (debugging)")
    common(sp, out=False)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--utt", required=True, help="utterance id or test-split index")
    sp.add_argument("--snr", default="inf")
    sp.add_argument("--method", choices=("beam", "greedy"))
    sp.set_defaults(func=cmd_decode)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, ParameterError, UsageError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (TrainingAborted, CapacityError) as e:
        print(f"aborted: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
