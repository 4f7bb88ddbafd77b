"""Command-line interface: `vtlsv <subcommand> [--config FILE] [--seed N] [--workers N] [--force]`.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import pipeline
from .config import load_config
from .errors import ConfigError, VsvError

log = logging.getLogger("vtlsv")

STAGE_COMMANDS = {
    "train-ubm": "train-ubm",
    "train-tv": "train-tv",
    "train-plda": "train-plda",
    "train-apc": "train-apc",
    "train-spkbn": "train-spkbn",
    "fit-pca": "fit-pca",
    "enroll": "enroll",
    "score": "score",
}


def _global_flags(suppress: bool) -> argparse.ArgumentParser:
    """Flags accepted both before and after the subcommand."""
    default = (lambda v: argparse.SUPPRESS) if suppress else (lambda v: v)
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", type=Path, default=default(None), help="experiment config file")
    p.add_argument("--seed", type=int, default=default(None), help="override experiment seed")
    p.add_argument("--workers", type=int, default=default(None), help="parallel worker processes")
    p.add_argument("--force", action="store_true", default=default(False),
                   help="recompute cached stages / overwrite an existing corpus")
    p.add_argument("-v", "--verbose", action="store_true", default=default(False),
                   help="log progress and list every stage")
    return p


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="vtlsv", parents=[_global_flags(False)],
        description="Text-dependent speaker verification with VTL-perturbed features.")
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")
    flags = [_global_flags(True)]
    sub.add_parser("synth-corpus", parents=flags, help="render the synthetic corpus and trial lists")
    sub.add_parser("extract", parents=flags, help="MFCC features for every warp factor (and BN features)")
    for name in STAGE_COMMANDS:
        sub.add_parser(name, parents=flags, help=f"run the {name} stage for every system")
    p = sub.add_parser("fuse", parents=flags, help="equal-weight score fusion")
    p.add_argument("scores", nargs="*", type=Path, help="score files (default: configured systems)")
    p.add_argument("-o", "--output", type=Path, help="fused score file (required with explicit inputs)")
    p = sub.add_parser("evaluate", parents=flags, help="EER / minDCF reports")
    p.add_argument("scores", nargs="*", type=Path, help="score files (default: configured systems)")
    sub.add_parser("run", parents=flags, help="run the whole experiment")
    return parser


def _config(args):
    cfg = load_config(args.config)
    changes = {}
    if args.seed is not None:
        changes["seed"] = args.seed
    if args.workers is not None:
        if args.workers < 1:
            raise ConfigError("--workers must be >= 1")
        changes["workers"] = args.workers
    return cfg.replace(**changes) if changes else cfg


def _summarize(events, verbose: bool) -> None:
    if verbose:
        for e in events:
            print(e)
    ran = sum(e.status == "ran" for e in events)
    print(f"stages run: {ran}, skipped: {len(events) - ran}")


def _cmd_extract(cfg, args):
    events = pipeline.extract_mfcc(cfg, args.force)
    bn = [f for f in cfg.features if f in pipeline.BN_FEATURES]
    if bn:
        lay = pipeline.Layout(cfg)
        ready = [f for f in bn if all(lay.model(f, a, n).exists() for a in cfg.alphas
                                      for n in ("network.vsvn", "pca.vsvn"))]
        for f in sorted(set(bn) - set(ready)):
            log.warning("%s extraction waits for its network and PCA (train, fit-pca)", f)
        if ready:
            events += pipeline.run_systems(cfg.replace(features=tuple(ready)), {"extract-bn"}, args.force)
    return events


def _cmd_fuse(cfg, args):
    if args.scores:
        if args.output is None:
            raise ConfigError("fuse with explicit score files needs --output")
        fused = pipeline.fuse_files(args.scores, args.output, args.output.stem)
        print(f"fused {len(args.scores)} systems, {len(fused)} trials -> {args.output}")
        return []
    return pipeline.fuse(cfg, args.force)


def _cmd_evaluate(cfg, args):
    if args.scores:
        from .evaluation import TABLE_HEADER
        print(TABLE_HEADER)
        for path in args.scores:
            print(pipeline.evaluate_file(path, path.stem, cfg.dcf).table_row())
        return []
    events = pipeline.evaluate(cfg, args.force)
    print(pipeline.Layout(cfg).report_table.read_text(), end="")
    return events


def _cmd_synth(cfg, args):
    info = pipeline.synth_corpus(cfg, args.force)
    print(f"{info['evaluation_utterances']} evaluation and {info['background_utterances']} "
          f"background utterances, {info['models']} models -> {cfg.corpus_dir}")
    return []


def _cmd_run(cfg, args):
    events = pipeline.run_experiment(cfg, args.force)
    print(pipeline.Layout(cfg).report_table.read_text(), end="")
    return events


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    handlers = {"synth-corpus": _cmd_synth, "extract": _cmd_extract, "fuse": _cmd_fuse,
                "evaluate": _cmd_evaluate, "run": _cmd_run}
    try:
        cfg = _config(args)
        if args.command in STAGE_COMMANDS:
            events = pipeline.run_systems(cfg, {STAGE_COMMANDS[args.command]}, args.force)
        else:
            events = handlers[args.command](cfg, args)
        if events:
            _summarize(events, args.verbose)
    except VsvError as exc:
        print(f"vtlsv: error: {exc}", file=sys.stderr)
        return exc.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
