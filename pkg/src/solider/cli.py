"""Command line entry point.

Subcommands: gen-data, pretrain, finetune, extract, analyze. Exit codes:
0 success, 2 unknown flag/subcommand or invalid value, 3 missing required
flag, 4 config file parse error, 1 any other runtime failure. Every run
writes its resolved configuration (with the code version) next to its
output for provenance.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from . import __version__
from .analysis import extract_features, lambda_sweep, write_sweep_csv
from .checkpoint import CheckpointError
from .config import (ConfigError, dump_config, load_run_config, load_synthetic_spec,
                     parse_kv_text)
from .controller import check_lambda
from .data import denormalize, gen_synthetic_corpus, ingest_images, load_corpus
from .labeler import export_overlays, make_labels, save_label_grids
from .trainer import (MetricsWriter, finetune_solider, load_train_state, pretrain_dino,
                      save_train_state)

# config keys that fix the network shape; a finetune config may not change them
_ARCH_KEYS = ("image_height", "image_width", "patch_size", "embed_dim", "depths",
              "heads", "window_size", "mlp_ratio", "shifted_windows", "controller_hidden",
              "proj_hidden", "proj_bottleneck", "prototypes", "parts", "head_hidden",
              "head_blocks")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        code = 3 if "required" in message else 2
        self.exit(code, f"{self.prog}: error: {message}\n")


def _build_parser() -> _Parser:
    parser = _Parser(prog="solider", description=__doc__)
    parser.add_argument("--version", action="version", version=f"solider {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="command", parser_class=_Parser)

    p = sub.add_parser("gen-data", help="write a synthetic figure corpus")
    p.add_argument("--spec", help="flat key=value spec file")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--downsample", type=int, default=8,
                   help="token cell size in pixels for ground-truth grids")

    p = sub.add_parser("pretrain", help="phase-1 contrastive pretraining")
    p.add_argument("--config", help="flat key=value config file")
    p.add_argument("--data", required=True, help="corpus directory")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--metrics", help="per-step CSV path")

    p = sub.add_parser("finetune", help="phase-2 conditional fine-tuning")
    p.add_argument("--from", dest="from_ckpt", required=True, help="phase-1 checkpoint")
    p.add_argument("--config", help="schedule overrides (architecture keys must match)")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--metrics")

    p = sub.add_parser("extract", help="export features at a fixed lambda")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--lambda", dest="lam", type=float, required=True)
    p.add_argument("--images", required=True, help="directory of images")
    p.add_argument("--out", required=True, help="output .npz path")
    p.add_argument("--parts", type=int, default=None, help="override part count for labels")
    p.add_argument("--labels-out", help="directory for label overlays and grids")

    p = sub.add_parser("analyze", help="distance and probe sweep over lambda")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True, help="corpus directory")
    p.add_argument("--lambdas", default="0,0.25,0.5,0.75,1")
    p.add_argument("--labels", choices=("pseudo", "truth"), default="pseudo")
    p.add_argument("--parts", type=int, default=None)
    p.add_argument("--out", required=True, help="report CSV path")
    return parser


def _env_seed() -> int | None:
    raw = os.environ.get("SOLIDER_SEED")
    return int(raw) if raw else None


def _resolve_config(path: str | None, cli_seed: int | None):
    """Precedence: CLI flag > config file > SOLIDER_SEED > built-in default."""
    seed = cli_seed
    if seed is None and path is not None:
        with open(path) as fh:
            if "seed" in parse_kv_text(fh.read()):
                return load_run_config(path)
    if seed is None:
        seed = _env_seed()
    return load_run_config(path, overrides={} if seed is None else {"seed": seed})


def _write_provenance(out_path: str, cfg) -> str:
    if os.path.isdir(out_path):
        target = os.path.join(out_path, "resolved.config")
    else:
        target = out_path + ".config"
    with open(target, "w") as fh:
        fh.write(dump_config(cfg, __version__))
    return target


def _cmd_gen_data(args) -> int:
    spec = load_synthetic_spec(args.spec)
    seed = args.seed if args.seed is not None else (_env_seed() or 0)
    gen_synthetic_corpus(spec, seed, args.out, downsample=args.downsample)
    _write_provenance(args.out, spec)
    print(f"wrote {spec.identities * spec.images_per_identity} images to {args.out}")
    return 0


def _cmd_pretrain(args) -> int:
    cfg = _resolve_config(args.config, args.seed)
    corpus = load_corpus(args.data)
    metrics = MetricsWriter(args.metrics) if args.metrics else None
    state = pretrain_dino(cfg, corpus.images, metrics)
    if metrics:
        metrics.close()
    save_train_state(state, args.out)
    _write_provenance(args.out, cfg)
    print(f"phase-1 done: {state.global_step} steps, final loss "
          f"{state.reports[-1].total:.4f}, checkpoint {args.out}")
    return 0


def _cmd_finetune(args) -> int:
    state = load_train_state(args.from_ckpt)
    if args.config:
        new_cfg = load_run_config(args.config)
        for key in _ARCH_KEYS:
            if getattr(new_cfg, key) != getattr(state.config, key):
                raise ConfigError(
                    f"config changes architecture key '{key}' "
                    f"({getattr(state.config, key)} -> {getattr(new_cfg, key)})")
        state.config = new_cfg
    corpus = load_corpus(args.data)
    metrics = MetricsWriter(args.metrics) if args.metrics else None
    finetune_solider(state, corpus.images, metrics)
    if metrics:
        metrics.close()
    save_train_state(state, args.out)
    _write_provenance(args.out, state.config)
    print(f"phase-2 done: {state.global_step} steps total, checkpoint {args.out}")
    return 0


def _cmd_extract(args) -> int:
    lam = check_lambda(args.lam)
    state = load_train_state(args.ckpt)
    cfg = state.config
    batch, skipped = ingest_images(args.images, (cfg.image_height, cfg.image_width))
    if skipped:
        print(f"skipped {skipped} unreadable file(s)", file=sys.stderr)
    if len(batch) == 0:
        print("no images found; wrote empty feature file")
    pooled, tokens = extract_features(state.student.backbone, batch.pixels, lam)
    out_path = args.out if args.out.endswith(".npz") else args.out + ".npz"
    np.savez(out_path, features=pooled, files=np.asarray(batch.source_ids))
    _write_provenance(out_path, cfg)
    if args.labels_out and len(batch):
        parts = args.parts if args.parts is not None else cfg.parts
        label_map = make_labels(tokens, parts, seed=cfg.seed)
        os.makedirs(args.labels_out, exist_ok=True)
        export_overlays(batch.pixels, label_map, args.labels_out, denormalize)
        save_label_grids(label_map, os.path.join(args.labels_out, "labels.bin"))
    print(f"extracted {pooled.shape[0]} feature rows at lambda={lam} -> {out_path}")
    return 0


def _cmd_analyze(args) -> int:
    lambdas = [check_lambda(float(v)) for v in args.lambdas.split(",") if v.strip()]
    if not lambdas:
        raise ValueError("no lambda values given")
    state = load_train_state(args.ckpt)
    cfg = state.config
    parts = args.parts if args.parts is not None else cfg.parts
    corpus = load_corpus(args.data)
    report = lambda_sweep(
        state.student.backbone, corpus.images, lambdas, parts,
        label_source=args.labels, truth_labels=corpus.token_labels,
        identities=corpus.identities, seed=cfg.seed, batch_size=cfg.batch_size,
    )
    write_sweep_csv(report, args.out)
    _write_provenance(args.out, cfg)
    print(f"wrote {len(lambdas)} sweep rows to {args.out}")
    return 0


_HANDLERS = {
    "gen-data": _cmd_gen_data,
    "pretrain": _cmd_pretrain,
    "finetune": _cmd_finetune,
    "extract": _cmd_extract,
    "analyze": _cmd_analyze,
}


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    if args.command is None:
        parser.print_help()
        return 0
    try:
        return _HANDLERS[args.command](args)
    except ConfigError as e:
        print(f"solider: config error: {e}", file=sys.stderr)
        return 4
    except (ValueError, CheckpointError) as e:
        print(f"solider: error: {e}", file=sys.stderr)
        return 2
    except OSError as e:
        print(f"solider: error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
