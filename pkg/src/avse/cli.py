"""Command line entry point: ``avse <command> [options]``.

Exit codes: 0 success, 1 usage or configuration error, 2 data validation
failure, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import torch

from . import __version__, audio, autoencoder, config, corpus, crq, metrics, model, pipeline, tensorio
from .nn import NumericalError, ShapeError

log = logging.getLogger("avse")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERICAL = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _values(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma separated numbers, got {text!r}") from exc


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="avse", description="Lightweight audio-visual speech enhancement experiments.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    common = _Parser(add_help=False)
    common.add_argument("--config", type=Path, help="TOML experiment configuration")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", default=[],
                        help="override a configuration entry, e.g. training.epochs=5 (repeatable)")
    common.add_argument("--manifest", help="corpus manifest (paths.manifest)")
    common.add_argument("--cache-dir", help="feature/latent cache (paths.cache_dir)")
    common.add_argument("--run-dir", help="run directory for checkpoints and logs (paths.run_dir)")
    common.add_argument("--seed", type=int)
    common.add_argument("--jobs", type=int, help="worker cap for parallel stages")

    p = sub.add_parser("generate", help="write a synthetic audio-visual corpus")
    p.add_argument("--out", type=Path, required=True)
    defaults = corpus.SyntheticSpec()
    p.add_argument("--train-speakers", type=int, default=defaults.train_speakers)
    p.add_argument("--test-speakers", type=int, default=defaults.test_speakers)
    p.add_argument("--utterances", type=int, default=defaults.utterances_per_speaker, help="utterances per speaker")
    p.add_argument("--min-duration", type=float, default=defaults.min_duration)
    p.add_argument("--max-duration", type=float, default=defaults.max_duration)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--jobs", type=int, default=1)

    p = sub.add_parser("prepare", parents=[common], help="cache clean features and lip latents")
    p.add_argument("--ae", type=Path, help="autoencoder checkpoint; required for latents")

    p = sub.add_parser("train-ae", parents=[common], help="train the lip autoencoder")
    p.add_argument("--epochs", type=int)
    p.add_argument("--resume", action="store_true")

    p = sub.add_parser("train-avse", parents=[common], help="train the enhancement model")
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--budget", type=int, help="number of training mixtures")
    p.add_argument("--ofr", type=int, help="offset range k; offsets drawn from [-k, k] frames")
    p.add_argument("--lpr", type=float, help="low-quality percentage range for zero-out")
    p.add_argument("--resume", action="store_true")

    p = sub.add_parser("enhance", parents=[common], help="enhance one noisy utterance")
    p.add_argument("--model", type=Path, required=True)
    p.add_argument("--ae", type=Path)
    p.add_argument("--noisy", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    group = p.add_mutually_exclusive_group(required=True)
    group.add_argument("--lips", type=Path, help="directory of lip frames at 50 fps")
    group.add_argument("--no-video", action="store_true", help="run with all visual latents zeroed")

    for name, helptext in (("evaluate", "score the test set"), ("simulate", "offset or zero-out sweep")):
        p = sub.add_parser(name, parents=[common], help=helptext)
        p.add_argument("--model", type=Path, required=True)
        p.add_argument("--out", type=Path, help="output CSV (default: inside the run directory)")
        if name == "evaluate":
            p.add_argument("--offset", type=int, default=0, help="audio/video offset in frames (20 ms each)")
            p.add_argument("--lp", type=float, default=0.0, help="percentage of zeroed visual frames")
            p.add_argument("--no-video", action="store_true")
        else:
            p.add_argument("--sweep", choices=("offset", "zeroout"), required=True)
            p.add_argument("--values", type=_values, help="restrict the sweep, e.g. --values=-3,0,3")
    return parser


_FLAG_KEYS = {"manifest": "paths.manifest", "cache_dir": "paths.cache_dir", "run_dir": "paths.run_dir",
              "seed": "seed", "jobs": "jobs", "lr": "training.lr", "batch_size": "training.batch_size",
              "budget": "training.budget", "ofr": "augmentation.ofr_k", "lpr": "augmentation.lpr"}


def resolve_config(args) -> config.ExperimentConfig:
    overrides = config.parse_assignments(args.set)
    for attr, key in _FLAG_KEYS.items():
        if getattr(args, attr, None) is not None:
            overrides[key] = getattr(args, attr)
    if getattr(args, "epochs", None) is not None:
        overrides["ae_training.epochs" if args.command == "train-ae" else "training.epochs"] = args.epochs
    return config.load(args.config, overrides)


def _manifest(cfg) -> corpus.Manifest:
    return corpus.read_manifest(cfg.paths.manifest)


def cmd_generate(args) -> int:
    spec = corpus.SyntheticSpec(args.train_speakers, args.test_speakers, args.utterances,
                                args.min_duration, args.max_duration)
    path = corpus.generate_synthetic_corpus(args.out, spec, args.seed, args.jobs)
    print(path)
    return EXIT_OK


def cmd_prepare(args) -> int:
    cfg = resolve_config(args)
    report = pipeline.prepare(_manifest(cfg), cfg.paths.cache_dir, cfg.crq, args.ae, cfg.jobs)
    print(f"computed {len(report.computed)}, up to date {len(report.skipped)}")
    return EXIT_OK


def cmd_train_ae(args) -> int:
    cfg = resolve_config(args)
    cfg.save(cfg.paths.run_dir)
    path = pipeline.train_autoencoder(_manifest(cfg), cfg, cfg.paths.run_dir, args.resume, log=log.info)
    print(path)
    return EXIT_OK


def cmd_train_avse(args) -> int:
    cfg = resolve_config(args)
    cfg.save(cfg.paths.run_dir)
    history = pipeline.train_enhancer(_manifest(cfg), cfg, cfg.paths.cache_dir, cfg.paths.run_dir,
                                      args.resume, log=log.info)
    if history:
        print(f"final loss {history[-1]:.6f}")
    return EXIT_OK


def cmd_enhance(args) -> int:
    cfg = resolve_config(args)
    net, _ = model.load_model(args.model)
    noisy = audio.read_wav(args.noisy)
    latents = None
    if not args.no_video:
        if args.ae is None:
            raise UsageError("--ae is required unless --no-video is given")
        frames = crq.list_frames(args.lips) if args.lips.is_dir() else []
        if not frames:
            raise pipeline.DataError(f"no lip frames found in {args.lips}")
        n_audio = audio.n_frames_for(len(noisy))
        if abs(len(frames) - n_audio) > 1:
            raise pipeline.DataError(f"{len(frames)} lip frames do not match {n_audio} audio frames at 50 fps")
        ae, _ = autoencoder.load_ae(args.ae)
        latents = model.encode_lips(crq.load_lip_sequence(args.lips), ae, cfg.crq)
    enhanced = model.enhance(noisy, net, latents)
    audio.write_wav(args.out, enhanced)
    print(args.out)
    return EXIT_OK


def cmd_evaluate(args) -> int:
    cfg = resolve_config(args)
    manifest = _manifest(cfg)
    net, _ = model.load_model(args.model)
    items = pipeline.test_items(manifest, cfg)
    cond = pipeline.Condition(args.offset, args.lp, args.no_video)
    scores = pipeline.evaluate(net, manifest, items, pipeline.FeatureCache(cfg.paths.cache_dir), cond, cfg.jobs)
    out = args.out or Path(cfg.paths.run_dir) / "evaluation" / "items.csv"
    metrics.write_items_csv(out, scores, (*metrics.ITEM_COLUMNS, "stoi_noisy"))
    report = metrics.aggregate(scores, values=("stoi", "stoi_noisy", "snr_improvement"))
    metrics.write_report_csv(Path(out).with_name(Path(out).stem + "_by_condition.csv"), report)
    print(f"items {len(scores)}  stoi {report.means['stoi']:.4f}  noisy {report.means['stoi_noisy']:.4f}  "
          f"snr gain {report.means['snr_improvement']:+.2f} dB")
    return EXIT_OK


def cmd_simulate(args) -> int:
    cfg = resolve_config(args)
    manifest = _manifest(cfg)
    net, _ = model.load_model(args.model)
    values = args.values
    if values is not None and args.sweep == "offset":
        if any(v != int(v) for v in values):
            raise UsageError("offsets must be whole frames")
        values = [int(v) for v in values]
    rows = pipeline.simulate(net, manifest, pipeline.test_items(manifest, cfg),
                             pipeline.FeatureCache(cfg.paths.cache_dir), args.sweep, values, cfg.jobs)
    out = args.out or Path(cfg.paths.run_dir) / f"sweep_{args.sweep}.csv"
    pipeline.write_rows(out, rows)
    for row in rows:
        print(f"{args.sweep} {row['value']:>5}  stoi {row['stoi']:.4f}")
    return EXIT_OK


COMMANDS = {"generate": cmd_generate, "prepare": cmd_prepare, "train-ae": cmd_train_ae,
            "train-avse": cmd_train_avse, "enhance": cmd_enhance, "evaluate": cmd_evaluate,
            "simulate": cmd_simulate}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    torch.set_num_threads(getattr(args, "jobs", None) or 1)
    try:
        return COMMANDS[args.command](args)
    except (UsageError, config.ConfigError) as exc:
        print(f"avse: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalError as exc:
        print(f"avse: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (pipeline.DataError, corpus.ManifestError, tensorio.FormatError, ShapeError,
            FileNotFoundError, ValueError) as exc:
        print(f"avse: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
