"""``cml`` command-line entry point.

Exit codes: 0 on success, 1 on runtime or data errors, 2 on usage or
configuration errors.  ``CML_LOG`` (error, warning, info, debug) sets the log
level.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .dataio import SyntheticSpec, generate_synthetic, load_image, scan_directory
from .errors import CosineMetricError
from .evaluation import (
    METRICS,
    evaluate_single_shot,
    extract_embeddings,
    load_embeddings,
    save_embeddings,
    topk_query,
)
from .figures import KappaSweepConfig, kappa_sweep, posterior_grid, write_csv
from .network import (
    EncoderSpec,
    count_parameters,
    encoder_from_checkpoint,
    head_from_checkpoint,
    load_checkpoint,
)
from .tensor import Rng, load_tensor
from .training import LOSSES, TrainConfig, train, with_overrides

log = logging.getLogger("cosine_metric")

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    """Flags parse but describe an invalid configuration."""


def _int_list(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(v) for v in text.split(",") if v.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _float_list(text: str) -> tuple[float, ...]:
    try:
        return tuple(float(v) for v in text.split(",") if v.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _add_data_flags(p: argparse.ArgumentParser) -> None:
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--data", type=Path, help="directory of <id>_c<cam>_*.ppm images")
    src.add_argument("--synthetic", metavar="NxM", help="N synthetic identities with M samples each")
    p.add_argument("--input-dim", type=int, default=32, help="synthetic input dimension")
    p.add_argument("--spread", type=float, default=0.15, help="synthetic cluster spread")
    p.add_argument("--heldout", type=int, default=None,
                   help="synthetic identities held out of training (default: N // 5)")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--threads", type=int, default=1,
                        help="worker threads for embedding extraction and distances")

    parser = argparse.ArgumentParser(prog="cml", description="Cosine softmax metric learning toolkit.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", parents=[common], help="train an encoder")
    _add_data_flags(p)
    p.add_argument("--loss", required=True, choices=LOSSES)
    p.add_argument("--arch", choices=("paper", "toy"), default=None,
                   help="default: paper for --data, toy for --synthetic")
    p.add_argument("--out", type=Path, required=True, help="output directory")
    p.add_argument("--iters", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--per-identity", type=int, help="images per identity in a batch")
    p.add_argument("--weight-decay", type=float, help="network weight decay")
    p.add_argument("--kappa-decay", type=float, help="weight decay on the cosine scale")
    p.add_argument("--dropout", type=float)
    p.add_argument("--flip", action=argparse.BooleanOptionalAction, default=None)
    p.add_argument("--val-fraction", type=float)
    p.add_argument("--log-interval", type=int)
    p.add_argument("--eval-interval", type=int)
    p.add_argument("--widths", type=_int_list, help="toy encoder widths: hidden...,embedding")
    p.add_argument("--final-l2", action=argparse.BooleanOptionalAction, default=None)
    p.add_argument("--triplet-margin", type=float)
    p.add_argument("--magnet-margin", type=float)

    p = sub.add_parser("embed", parents=[common], help="write embeddings of a dataset")
    _add_data_flags(p)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--split", choices=("all", "train", "heldout"), default="heldout",
                   help="synthetic subset to embed")
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--out", type=Path, required=True, help="embedding file to write")

    p = sub.add_parser("eval", parents=[common], help="single-shot cross-view CMC and mAP")
    p.add_argument("--query-embeddings", type=Path, required=True)
    p.add_argument("--gallery-embeddings", type=Path, required=True)
    p.add_argument("--metric", choices=METRICS, default="cosine")
    p.add_argument("--max-rank", type=int, default=50)
    p.add_argument("--out", type=Path, help="also write the JSON report here")

    p = sub.add_parser("query", parents=[common], help="most similar and dissimilar gallery records")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--probe", type=Path, required=True, help=".ppm/.pgm image or .cmlt input vector")
    p.add_argument("--gallery-embeddings", type=Path, required=True)
    p.add_argument("--topk", type=int, default=5)
    p.add_argument("--metric", choices=METRICS, default=None,
                   help="default: cosine for softmax checkpoints, euclidean otherwise")

    p = sub.add_parser("paramcount", parents=[common], help="per-layer parameter table")
    p.add_argument("--arch", choices=("paper", "toy"), required=True)
    p.add_argument("--input-dim", type=int, default=32)
    p.add_argument("--widths", type=_int_list, default=TrainConfig.toy_widths)

    p = sub.add_parser("plotgrid", parents=[common], help="posterior grid of a 2-D embedding model")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--grid", type=int, default=50)
    p.add_argument("--out", type=Path, required=True, help="CSV file to write")

    p = sub.add_parser("kappasweep", parents=[common], help="sample positions under fixed scales")
    p.add_argument("--kappa", type=_float_list, required=True, help="comma-separated scales")
    p.add_argument("--classes", type=int, default=3)
    p.add_argument("--samples-per-class", type=int, default=8)
    p.add_argument("--iters", type=int, default=500)
    p.add_argument("--lr", type=float, default=0.05)
    p.add_argument("--points", type=int, default=360, help="curve resolution")
    p.add_argument("--out", type=Path, required=True, help="output directory")
    return parser


# -- data -------------------------------------------------------------------

def _synthetic_spec(args) -> SyntheticSpec:
    try:
        base = SyntheticSpec.parse(args.synthetic)
        heldout = base.num_identities // 5 if args.heldout is None else args.heldout
        return SyntheticSpec(base.num_identities, base.samples_per_identity, args.input_dim,
                             args.spread, heldout, args.seed)
    except ValueError as e:
        raise UsageError(str(e)) from None


def _load_dataset(args, split: str = "train"):
    """Dataset named by --data/--synthetic; ``split`` picks the synthetic subset."""
    if args.data is not None:
        return scan_directory(args.data), None
    spec = _synthetic_spec(args)
    data = generate_synthetic(spec)
    return {"all": data.full, "train": data.train, "heldout": data.heldout}[split], spec


# -- commands ---------------------------------------------------------------

def cmd_train(args) -> int:
    dataset, spec = _load_dataset(args)
    arch = args.arch or ("toy" if args.synthetic else "paper")
    try:
        config = with_overrides(
            TrainConfig(loss=args.loss, architecture=arch, seed=args.seed),
            iterations=args.iters, learning_rate=args.lr, batch_size=args.batch_size,
            images_per_identity=args.per_identity, weight_decay_network=args.weight_decay,
            weight_decay_kappa=args.kappa_decay, dropout_p=args.dropout, flip_augment=args.flip,
            val_fraction=args.val_fraction, log_interval=args.log_interval,
            eval_interval=args.eval_interval, toy_widths=args.widths, final_l2=args.final_l2,
            triplet_margin=args.triplet_margin, magnet_margin=args.magnet_margin,
        )
        config.encoder_spec(dataset.input_shape)
    except ValueError as e:
        raise UsageError(str(e)) from None

    args.out.mkdir(parents=True, exist_ok=True)
    record = {"train": asdict(config), "synthetic": asdict(spec) if spec else None,
              "data": str(args.data) if args.data else None}
    (args.out / "config.json").write_text(json.dumps(record, indent=2) + "\n")
    result = train(config, dataset, args.out)
    rank1 = "n/a" if result.best_val_rank1 is None else f"{result.best_val_rank1:.4f}"
    print(f"best checkpoint: iteration {result.best_iteration}, validation rank-1 {rank1}")
    print(f"wrote {args.out / 'best.cmck'} and {args.out / 'train_log.csv'}")
    return EXIT_OK


def cmd_embed(args) -> int:
    encoder = encoder_from_checkpoint(load_checkpoint(args.checkpoint))
    dataset, _ = _load_dataset(args, args.split)
    es = extract_embeddings(encoder, dataset, args.batch_size, args.threads)
    if args.out.parent != Path(""):
        args.out.parent.mkdir(parents=True, exist_ok=True)
    save_embeddings(args.out, es)
    print(f"wrote {len(es)} embeddings of dimension {es.dim} to {args.out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    queries = load_embeddings(args.query_embeddings)
    gallery = load_embeddings(args.gallery_embeddings)
    report = evaluate_single_shot(queries, gallery, args.metric, args.max_rank, args.threads)
    text = report.to_json()
    if args.out is not None:
        args.out.parent.mkdir(parents=True, exist_ok=True)
        args.out.write_text(text + "\n")
    print(text)
    return EXIT_OK


def _probe_input(path: Path, encoder) -> np.ndarray:
    if path.suffix.lower() == ".cmlt":
        x = load_tensor(path)
        if x.size != int(np.prod(encoder.input_shape)):
            raise CosineMetricError(
                f"probe has {x.size} values, encoder expects shape {encoder.input_shape}")
        return x.reshape(encoder.input_shape)
    return load_image(path).pixels


def cmd_query(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    encoder = encoder_from_checkpoint(ckpt)
    gallery = load_embeddings(args.gallery_embeddings)
    metric = args.metric or ("cosine" if head_from_checkpoint(ckpt) is not None else "euclidean")
    probe = encoder.embed(_probe_input(args.probe, encoder)[None])[0]
    near, far = topk_query(probe, gallery, metric, args.topk)
    for label, matches in (("similar", near), ("dissimilar", far)):
        for rank, m in enumerate(matches, start=1):
            print(f"{label}\t{rank}\tdistance={m.distance:.6f}\tidentity={m.record.identity}"
                  f"\tcamera={m.record.camera}\tindex={m.index}")
    return EXIT_OK


def cmd_paramcount(args) -> int:
    rng = Rng(args.seed).stream("weights")
    if args.arch == "paper":
        encoder = EncoderSpec("paper").build(rng)
    else:
        encoder = EncoderSpec("toy", (args.input_dim,) + tuple(args.widths)).build(rng)
    print(count_parameters(encoder).report())
    return EXIT_OK


def cmd_plotgrid(args) -> int:
    head = head_from_checkpoint(load_checkpoint(args.checkpoint))
    if head is None:
        raise CosineMetricError("checkpoint holds no softmax head")
    header, rows = posterior_grid(head, args.grid)
    args.out.parent.mkdir(parents=True, exist_ok=True)
    write_csv(args.out, header, rows)
    print(f"wrote {len(rows)} grid rows to {args.out}")
    return EXIT_OK


def cmd_kappasweep(args) -> int:
    if any(k <= 0 for k in args.kappa):
        raise UsageError("every --kappa value must be positive")
    cfg = KappaSweepConfig(args.classes, args.samples_per_class, args.iters, args.lr, args.points)
    args.out.mkdir(parents=True, exist_ok=True)
    for kappa in args.kappa:
        # each scale gets the same starting positions
        header, rows = kappa_sweep(kappa, Rng(args.seed).stream("synthetic"), cfg)
        path = args.out / f"kappa_{kappa:g}.csv"
        write_csv(path, header, rows)
        print(f"wrote {path}")
    return EXIT_OK


COMMANDS = {
    "train": cmd_train,
    "embed": cmd_embed,
    "eval": cmd_eval,
    "query": cmd_query,
    "paramcount": cmd_paramcount,
    "plotgrid": cmd_plotgrid,
    "kappasweep": cmd_kappasweep,
}


def _configure_logging() -> None:
    level = os.environ.get("CML_LOG", "warning").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)  # exits with 2 on usage errors
    _configure_logging()
    try:
        return COMMANDS[args.command](args)
    except UsageError as e:
        print(f"cml {args.command}: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (CosineMetricError, OSError, ValueError, KeyError) as e:
        print(f"cml {args.command}: error: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
