"""Command-line surface: synth / train / eval / attention.

Exit codes: 0 success, 2 configuration or contract problems, 3 I/O and data
problems, 4 numeric aborts. Every command prints the effective configuration
before doing work, and every output is deterministic given (config, seed,
inputs). ``AFPA_THREADS`` caps the evaluation worker pool.
"""

from __future__ import annotations

import argparse
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

from threadpoolctl import threadpool_limits

import numpy as np

from . import attention, corpus, metrics, pipeline, trainer
from .config import apply_overrides, load_config
from .errors import (AfpaError, ConfigError, ContractError, DataError,
                     NumericError, ShapeError)
from .metrics import ScoreRecord

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_NUMERIC = 4


def _worker_count() -> int:
    raw = os.environ.get("AFPA_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        raise ConfigError(f"AFPA_THREADS must be an integer, got {raw!r}")


def _load_effective_config(args):
    config = load_config(args.config)
    config = apply_overrides(
        config,
        seed=getattr(args, "seed", None),
        epochs=getattr(args, "epochs", None),
        use_afpa=False if getattr(args, "no_afpa", False) else None,
    )
    print(f"# effective configuration (hash {config.config_hash()})")
    print(config.describe())
    return config


def cmd_synth(args) -> int:
    config = _load_effective_config(args)
    c = config.corpus
    specs = corpus.default_specs(defect_hz=c.defect_hz, defect_rel_db=c.defect_rel_db)
    root = corpus.build_corpus(
        specs, args.out, counts=(c.n_train, c.n_test_normal, c.n_test_anomalous),
        seed=c.seed, force=args.force,
        sample_rate=config.dsp.sample_rate, duration=config.dsp.clip_seconds)
    manifest = (root / "manifest.csv").read_text().strip().splitlines()
    print(f"wrote {len(manifest) - 1} clips under {root}")
    by_split: dict[str, int] = {}
    for line in manifest[1:]:
        split = line.split(",")[3]
        by_split[split] = by_split.get(split, 0) + 1
    for split in sorted(by_split):
        print(f"  {split}: {by_split[split]}")
    return EXIT_OK


def cmd_train(args) -> int:
    config = _load_effective_config(args)
    data = trainer.load_training_data(args.data_dir, config)
    bundle = pipeline.create_bundle(config, data.class_map)
    print(f"training {'with' if bundle.use_afpa else 'without'} the attention stage "
          f"on {len(data.clips)} clips / {len(data.class_map)} machine ids")
    result = trainer.train(bundle, data, args.out, verbose=True,
                           workers=_worker_count())
    print(f"checkpoint written to {result.checkpoint} "
          f"({result.seconds:.1f} s, final loss {result.log_rows[-1][1]:.4f})")
    return EXIT_OK


def score_dataset(bundle, data_dir, workers: int = 1) -> list[ScoreRecord]:
    """Anomaly-score every test clip against its claimed machine ID."""
    entries = [(w, lbl, split, label) for w, lbl, split, label in corpus.read_dataset(data_dir)
               if split in ("test_normal", "test_anomalous")]
    if not entries:
        raise DataError(f"no test clips under {data_dir}")
    index = bundle.class_index

    def score_one(entry):
        wave, lbl, _, label = entry
        pair = (lbl.machine_type, lbl.machine_id)
        if pair not in index:
            raise DataError(f"machine {pair} not present in the checkpoint's class map")
        feature = pipeline.extract_feature(bundle, wave)
        value = pipeline.score_clip(bundle, wave.samples.astype(bundle.dtype()),
                                    index[pair], feature=feature)
        return ScoreRecord(wave.source_id, lbl.machine_type, lbl.machine_id, label, value)

    with threadpool_limits(limits=1, user_api="blas"):
        if workers <= 1:
            return [score_one(e) for e in entries]
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(score_one, entries))


def cmd_eval(args) -> int:
    bundle = pipeline.load_checkpoint(args.checkpoint)
    print(f"# checkpoint config hash {bundle.config.config_hash()}, "
          f"use_afpa={bundle.use_afpa}")
    records = score_dataset(bundle, args.data_dir, workers=_worker_count())
    out = Path(args.out)
    scores_path = out.with_suffix(".scores.csv")
    report_path = out.with_suffix(".report.csv")
    metrics.write_scores(scores_path, records)
    rep = metrics.report(records)
    metrics.report_to_csv(rep, report_path, config_hash=bundle.config.config_hash())
    text = metrics.report_to_text(rep)
    print(text)
    print(f"scores: {scores_path}\nreport: {report_path}")
    return EXIT_OK


def cmd_attention(args) -> int:
    bundle = pipeline.load_checkpoint(args.checkpoint)
    if not bundle.use_afpa:
        raise ConfigError("this checkpoint was trained without the attention stage "
                          "(--no-afpa); it has no frequency patterns to export")
    from .dsp import load_wav

    wave = load_wav(args.wav)
    enhanced, pattern = pipeline.clip_pattern(
        bundle, wave.samples.astype(bundle.dtype()), wave=wave, clip_id=str(args.wav))
    prefix = Path(args.out)
    pattern_aft = prefix.parent / (prefix.name + ".pattern.aft")
    pattern_csv = prefix.parent / (prefix.name + ".pattern.csv")
    enhanced_aft = prefix.parent / (prefix.name + ".enhanced.aft")
    attention.export_pattern(pattern, pattern_aft, pattern_csv)
    corpus.tensor_write(enhanced_aft, {"enhanced": enhanced})
    print(f"pattern maps: {pattern_aft}\npooled csv:   {pattern_csv}\n"
          f"enhanced:     {enhanced_aft}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="afpa",
        description="Machine-sound anomaly detection with frequency-pattern attention")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, seed=True):
        p.add_argument("--config", type=Path, default=None, help="TOML config file")
        if seed:
            p.add_argument("--seed", type=int, default=None,
                           help="override corpus and training seeds")

    p = sub.add_parser("synth", help="generate the synthetic machine-sound corpus")
    common(p)
    p.add_argument("--out", type=Path, required=True, help="target dataset directory")
    p.add_argument("--force", action="store_true", help="overwrite a non-empty directory")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a model on a dataset directory")
    common(p)
    p.add_argument("data_dir", type=Path)
    p.add_argument("--out", type=Path, required=True, help="checkpoint path (.aft)")
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--no-afpa", action="store_true",
                   help="train the plain spectral+temporal baseline")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score test clips and report AUC / pAUC")
    common(p, seed=False)
    p.add_argument("checkpoint", type=Path)
    p.add_argument("data_dir", type=Path)
    p.add_argument("--out", type=Path, required=True,
                   help="output prefix for .scores.csv and .report.csv")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("attention", help="export frequency patterns for one clip")
    common(p, seed=False)
    p.add_argument("checkpoint", type=Path)
    p.add_argument("wav", type=Path)
    p.add_argument("--out", type=Path, required=True, help="output file prefix")
    p.set_defaults(func=cmd_attention)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, ContractError, ShapeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except NumericError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except AfpaError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
