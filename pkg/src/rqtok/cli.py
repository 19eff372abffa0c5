"""Command line entry point: ``rqtok <subcommand> ...``.

Exit codes: 0 success, 1 usage error, 2 validation error, 3 numeric
divergence.  Failures print a single JSON line ``{"error": ..., "message": ...}``
on stderr.  ``RQTOK_SEED`` and ``RQTOK_OUTPUT_DIR`` override the seed and
the directory that relative output paths are resolved against.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .archive import ArchiveError, load_codebooks, save_codebooks
from .codebook_training import BoundViolation
from .config import ConfigError, RunConfig, parse_config
from .harness.data import SyntheticDatasetSpec, gen_synthetic
from .harness.experiments import convergence_experiment, vq_vs_rq_experiment
from .harness.training import DivergenceError, run
from .io import (FORMATS, IngestError, ingest_features, read_tokens, report_to_json, write_features,
                 write_report, write_tokens)
from .metrics import MetricsError, metrics_report
from .quantizer import QuantizerError, quantize

EXIT_OK, EXIT_USAGE, EXIT_VALIDATION, EXIT_DIVERGENCE = 0, 1, 2, 3
ENV_SEED = "RQTOK_SEED"
ENV_OUTPUT_DIR = "RQTOK_OUTPUT_DIR"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _out_path(path) -> Path:
    p = Path(path)
    base = os.environ.get(ENV_OUTPUT_DIR)
    return p if p.is_absolute() or not base else Path(base) / p


def _seed(args, default=0) -> int:
    if getattr(args, "seed", None) is not None:
        return args.seed
    env = os.environ.get(ENV_SEED)
    if env is not None:
        try:
            return int(env)
        except ValueError:
            raise ConfigError(ENV_SEED, f"not an integer: {env!r}") from None
    return default


def _load_config(args) -> RunConfig:
    text = Path(args.config).read_text() if args.config else ""
    if getattr(args, "preset", None):
        # a preset key inside the file takes precedence
        text = f"preset: {args.preset}\n" + text
    cfg = parse_config(text=text)
    changes = {"seed": _seed(args, cfg.seed)}
    if getattr(args, "joint", False):
        changes["joint_mode"] = True
    return cfg.replace(**changes)


def _emit(report: dict, out) -> None:
    if out:
        write_report(_out_path(out), report)
    print(report_to_json(report))


# ---------------------------------------------------------------------------
# subcommands


def cmd_train(args) -> int:
    cfg = _load_config(args)
    report = run(cfg, keep_models=bool(args.codebooks))
    models = report.pop("_models", None)
    if args.codebooks:
        tok = models["tokenizer"]
        save_codebooks(tok.rq, _out_path(args.codebooks), tok.ema, width=cfg.float_width // 8)
    _emit(report, args.out)
    return EXIT_OK


def cmd_quantize(args) -> int:
    rq, _ = load_codebooks(args.codebooks)
    x = ingest_features(args.input, args.format, args.T, args.F)
    N, T, D = x.shape
    tokens = quantize(x.reshape(-1, D), rq).tokens.reshape(N, T, -1)
    write_tokens(_out_path(args.out), tokens)
    print(json.dumps({"samples": N, "positions": T, "stages": rq.num_stages, "out": str(args.out)},
                     sort_keys=True))
    return EXIT_OK


def cmd_metrics(args) -> int:
    rq, _ = load_codebooks(args.codebooks)
    tokens = read_tokens(args.tokens)
    if tokens.size == 0:
        tokens = np.zeros((0, rq.num_stages), dtype=np.int64)
    report = metrics_report(tokens.reshape(-1, tokens.shape[-1]), rq.sizes, args.provenance)
    _emit(report, args.out)
    return EXIT_OK


def cmd_convergence(args) -> int:
    r = convergence_experiment(K=args.K, D=args.D, gamma=args.gamma, eps=args.eps, steps=args.steps,
                               seed=_seed(args), batch_size=args.batch_size)
    report = {"mode": "convergence-check", **r.to_dict()}
    _emit(report, args.out)
    return EXIT_OK


def cmd_compare(args) -> int:
    cfg = _load_config(args)
    report = vq_vs_rq_experiment(cfg, range(cfg.seed, cfg.seed + args.seeds),
                                 encoder_epochs=args.encoder_epochs)
    _emit(report, args.out)
    return EXIT_OK


def cmd_gen_data(args) -> int:
    cfg = _load_config(args)
    spec = SyntheticDatasetSpec(n_samples=args.n_samples or cfg.n_samples, T=cfg.seq_len, F=cfg.feature_dim,
                                n_coarse=cfg.n_coarse, n_fine=cfg.n_fine, coarse_scale=cfg.coarse_scale,
                                fine_scale=cfg.fine_scale, noise=cfg.noise, seed=cfg.seed)
    data = gen_synthetic(spec)
    write_features(_out_path(args.out), data.x, args.format)
    if args.labels:
        write_tokens(_out_path(args.labels), np.stack([data.coarse, data.fine], axis=-1))
    print(json.dumps({"samples": spec.n_samples, "T": spec.T, "F": spec.F, "out": str(args.out)},
                     sort_keys=True))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="rqtok", description="Residual-quantization tokenizer toolkit.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    def with_config(sp):
        sp.add_argument("--config", help="YAML config file")
        sp.add_argument("--preset", help="named preset applied beneath the config file")
        sp.add_argument("--seed", type=int, help=f"overrides config and ${ENV_SEED}")

    sp = sub.add_parser("train", help="interleaved (or joint) training on synthetic data")
    with_config(sp)
    sp.add_argument("--joint", action="store_true", help="use joint training")
    sp.add_argument("--out", help="report path (JSON)")
    sp.add_argument("--codebooks", help="write the final tokenizer codebooks here")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("quantize", help="map features to a token grid")
    sp.add_argument("--codebooks", required=True)
    sp.add_argument("--input", required=True, help="features whose width equals the codebook dim")
    sp.add_argument("--format", choices=FORMATS, default="text")
    sp.add_argument("--T", type=int)
    sp.add_argument("--F", type=int)
    sp.add_argument("--out", required=True, help="token grid path (text)")
    sp.set_defaults(func=cmd_quantize)

    sp = sub.add_parser("metrics", help="CUR/UE/ECU of a token grid")
    sp.add_argument("--tokens", required=True)
    sp.add_argument("--codebooks", required=True)
    sp.add_argument("--provenance", choices=("pre_training", "post_training"), default="post_training")
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_metrics)

    sp = sub.add_parser("convergence-check", help="EMA iterates against their closed-form limit")
    sp.add_argument("--gamma", type=float, default=0.99)
    sp.add_argument("--eps", type=float, default=1e-5)
    sp.add_argument("--steps", type=int, default=5000)
    sp.add_argument("--K", type=int, default=4)
    sp.add_argument("--D", type=int, default=2)
    sp.add_argument("--batch-size", type=int)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_convergence)

    sp = sub.add_parser("compare-vq-rq", help="equal-budget VQ and RQ tokenizers on paired seeds")
    with_config(sp)
    sp.add_argument("--seeds", type=int, default=10, help="number of consecutive seeds")
    sp.add_argument("--encoder-epochs", type=int, default=0)
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_compare)

    sp = sub.add_parser("gen-data", help="write a synthetic hierarchical dataset")
    with_config(sp)
    sp.add_argument("--n-samples", type=int)
    sp.add_argument("--format", choices=FORMATS, default="text")
    sp.add_argument("--labels", help="also write (coarse, fine) generative labels as a token grid")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_gen_data)
    return p


def _fail(kind: str, exc: BaseException, code: int, **extra) -> int:
    msg = {"error": kind, "message": str(exc).replace("\n", " "), **extra}
    print(json.dumps(msg, sort_keys=True), file=sys.stderr)
    return code


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError("a subcommand is required")
    except UsageError as exc:
        return _fail("usage", exc, EXIT_USAGE)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except ConfigError as exc:
        return _fail("validation", exc, EXIT_VALIDATION, key=exc.key)
    except (DivergenceError, BoundViolation, FloatingPointError) as exc:
        return _fail("divergence", exc, EXIT_DIVERGENCE)
    except (ArchiveError, IngestError, MetricsError, QuantizerError, ValueError, OSError) as exc:
        return _fail("validation", exc, EXIT_VALIDATION)


if __name__ == "__main__":
    sys.exit(main())
