"""Command line entry point: ``fancl <subcommand> [flags]``.

Subcommands: synth, train, eval, cluster, fana-preview.
Exit codes: 0 success, 1 usage error, 2 runtime error.

Every subcommand accepts ``--config FILE.json``; its keys are flag names
(dashes or underscores) and act as defaults that explicit flags override.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from fancl.errors import ConfigError, FanclError

log = logging.getLogger("fancl")

USAGE_ERROR = 1
RUNTIME_ERROR = 2


class UsageError(Exception):
    pass


class Parser(argparse.ArgumentParser):
    """argparse that raises instead of exiting, so main() owns exit codes."""

    def error(self, message):
        raise UsageError(f"{self.format_help()}\n{self.prog}: error: {message}")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON file whose keys mirror the flags")
    p.add_argument("--seed", type=int, default=0, help="master seed for every random choice")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")


def build_parser() -> Parser:
    parser = Parser(prog="fancl", description="Feature-aware noise contrastive re-identification toolkit.")
    sub = parser.add_subparsers(dest="command", parser_class=Parser, metavar="COMMAND")
    sub.required = True

    p = sub.add_parser("synth", help="generate a synthetic identity dataset")
    _common(p)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--identities", type=int, default=10)
    p.add_argument("--per-identity", type=int, default=40)
    p.add_argument("--size", type=int, nargs=2, default=(32, 32), metavar=("H", "W"))

    p = sub.add_parser("train", help="train on the train split of a manifest")
    _common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True, help="directory for metrics.jsonl and checkpoints")
    p.add_argument("--epochs", type=int, default=60)
    p.add_argument("--lr", type=float, default=0.00035)
    p.add_argument("--lr-step", type=int, default=20)
    p.add_argument("--lr-decay", type=float, default=0.1)
    p.add_argument("--weight-decay", type=float, default=0.0005)
    p.add_argument("--P", type=int, default=16, help="clusters per batch")
    p.add_argument("--K", type=int, default=4, help="images per cluster")
    p.add_argument("--rho", type=float, default=0.05, help="noised fraction of each image")
    p.add_argument("--patch", type=int, default=1, help="noise patch size (1 = pixel noise)")
    p.add_argument("--probe-source", default="dedicated-probe",
                   choices=("dedicated-probe", "branch-first-conv", "branch-first-batchnorm"))
    p.add_argument("--eps", type=float, default=0.6, help="DBSCAN radius (cosine distance)")
    p.add_argument("--min-pts", type=int, default=4)
    p.add_argument("--tau", type=float, default=0.05)
    p.add_argument("--alpha", type=float, default=0.1, help="memory momentum")
    p.add_argument("--no-cluster-consistency", action="store_true")
    p.add_argument("--no-instance-consistency", action="store_true")
    p.add_argument("--no-recalibrate-bn", action="store_true")
    p.add_argument("--channels", type=int, nargs="+", default=[8, 16, 32])
    p.add_argument("--embed-dim", type=int, default=64)
    p.add_argument("--precision", choices=("float32", "float64"), default="float32")
    p.add_argument("--resume", action="store_true", help="continue from OUT/last.ftck")
    p.add_argument("--eval-each-epoch", action="store_true", help="log query/gallery metrics per epoch")
    p.add_argument("--plot", action="store_true", help="write loss_curve.png into OUT")

    p = sub.add_parser("eval", help="retrieval metrics of a checkpoint")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--feature-space", choices=("original", "noised", "fused"), default="original")
    p.add_argument("--json-out", help="also write the metrics JSON here")
    p.add_argument("--plot", help="write a CMC curve PNG here")

    p = sub.add_parser("cluster", help="DBSCAN over a feature tensor file")
    _common(p)
    p.add_argument("--features", required=True, help="(N, D) tensor file")
    p.add_argument("--out", required=True, help="int32 label tensor file to write")
    p.add_argument("--eps", type=float, default=0.6)
    p.add_argument("--min-pts", type=int, default=4)
    p.add_argument("--normalize", action="store_true", help="L2-normalize rows first")

    p = sub.add_parser("fana-preview", help="activation map, mask and noised image for one image")
    _common(p)
    p.add_argument("--image", required=True, help="(H, W, C) tensor file")
    p.add_argument("--rho", type=float, default=0.05)
    p.add_argument("--patch", type=int, default=1)
    p.add_argument("--checkpoint", help="use this checkpoint's probe instead of a fresh one")
    p.add_argument("--out", default=".", help="output directory")
    p.add_argument("--no-plot", action="store_true", help="skip preview.png")
    return parser


def _subparser(parser: Parser, command: str) -> argparse.ArgumentParser:
    for action in parser._subparsers._group_actions:
        if command in action.choices:
            return action.choices[command]
    raise UsageError(f"unknown command {command!r}")


def parse_args(argv) -> argparse.Namespace:
    parser = build_parser()
    # find the command and config file first: the config may supply required flags
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("command", nargs="?")
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    if known.config and known.command in COMMANDS:
        try:
            cfg = json.loads(Path(known.config).read_text())
        except OSError as exc:
            raise FileNotFoundError(f"cannot read config {known.config}: {exc.strerror}") from exc
        except json.JSONDecodeError as exc:
            raise UsageError(f"config {known.config} is not valid JSON: {exc}") from exc
        if not isinstance(cfg, dict):
            raise UsageError(f"config {known.config} must hold a JSON object")
        sub = _subparser(parser, known.command)
        known_dests = {a.dest for a in sub._actions}
        defaults = {}
        for key, value in cfg.items():
            dest = key.lstrip("-").replace("-", "_")
            if dest not in known_dests or dest in ("config", "help"):
                raise UsageError(f"config {known.config}: unknown option {key!r} for {known.command}")
            defaults[dest] = value
        sub.set_defaults(**defaults)
        for action in sub._actions:
            if action.dest in defaults:
                action.required = False
    return parser.parse_args(argv)


# -- subcommands ------------------------------------------------------------


def cmd_synth(args) -> int:
    from fancl.toolkit.synthetic import SyntheticConfig, generate_synthetic

    cfg = SyntheticConfig(
        n_identities=args.identities, images_per_identity=args.per_identity,
        height=args.size[0], width=args.size[1],
    )
    records = generate_synthetic(cfg, args.out, seed=args.seed)
    counts = {s: sum(r.split == s for r in records) for s in ("train", "query", "gallery")}
    print(json.dumps({"manifest": str(Path(args.out) / "manifest.jsonl"), **counts}))
    return 0


def run_config_from_args(args, extent=(32, 32)):
    from fancl.clustering import DbscanConfig
    from fancl.encoder import EncoderConfig
    from fancl.fana import FanaConfig
    from fancl.losses import LossConfig
    from fancl.memory import MemoryConfig
    from fancl.trainer import AugmentConfig, RunConfig, TrainConfig

    return RunConfig(
        train=TrainConfig(
            epochs=args.epochs, lr=args.lr, lr_decay=args.lr_decay, lr_step=args.lr_step,
            batch_size=args.P * args.K, weight_decay=args.weight_decay, seed=args.seed, P=args.P, K=args.K,
            recalibrate_bn=not args.no_recalibrate_bn,
        ),
        augment=AugmentConfig(height=extent[0], width=extent[1]),
        encoder=EncoderConfig(channels=tuple(args.channels), embed_dim=args.embed_dim, height=extent[0], width=extent[1]),
        fana=FanaConfig(rho=args.rho, source=args.probe_source, patch=args.patch),
        dbscan=DbscanConfig(eps=args.eps, min_pts=args.min_pts),
        memory=MemoryConfig(alpha=args.alpha),
        loss=LossConfig(
            tau=args.tau,
            cluster_consistency=not args.no_cluster_consistency,
            instance_consistency=not args.no_instance_consistency,
        ),
    )


def cmd_train(args) -> int:
    from fancl.toolkit.manifest import load_split, read_manifest
    from fancl.trainer import FanclModel, evaluate_model, run_training

    records = read_manifest(args.manifest)
    images, ids = load_split(records, "train")
    if len(images) == 0:
        raise FanclError(f"manifest {args.manifest} has no train images")
    out = Path(args.out)
    config = run_config_from_args(args, extent=images.shape[1:3])
    dtype = np.float64 if args.precision == "float64" else np.float32
    model = None
    if args.resume and (out / "last.ftck").exists():
        model = FanclModel.load(out / "last.ftck")
        log.info("resuming at epoch %d", model.epoch)
    eval_fn = None
    if args.eval_each_epoch:
        q, qids = load_split(records, "query")
        g, gids = load_split(records, "gallery")
        if len(q) == 0 or len(g) == 0:
            raise FanclError(f"manifest {args.manifest} lacks query or gallery images")
        eval_fn = lambda m: evaluate_model(m, q, qids, g, gids).to_dict()  # noqa: E731
    # identity strings only feed the purity diagnostic, never a loss
    _, truth = np.unique(ids, return_inverse=True)
    model, recs = run_training(config, images, out, truth=truth, eval_fn=eval_fn,
                               model=model, dtype=dtype)
    if args.plot:
        from fancl.toolkit.plots import loss_plot

        loss_plot(recs, out / "loss_curve.png")
    last = next((r for r in reversed(recs) if r.get("event") == "cluster"), {})
    print(json.dumps({"checkpoint": str(out / "last.ftck"), "epochs": model.epoch,
                      "n_clusters": last.get("n_clusters"), "n_outliers": last.get("n_outliers")}))
    return 0


def cmd_eval(args) -> int:
    from fancl.evalkit import cmc_curve
    from fancl.toolkit.manifest import load_split, read_manifest
    from fancl.trainer import FanclModel, evaluate_model, extract_space

    if not Path(args.checkpoint).exists():
        raise FileNotFoundError(f"checkpoint {args.checkpoint} does not exist")
    records = read_manifest(args.manifest)
    model = FanclModel.load(args.checkpoint)
    q, qids = load_split(records, "query")
    g, gids = load_split(records, "gallery")
    if len(q) == 0 or len(g) == 0:
        raise FanclError(f"manifest {args.manifest} lacks query or gallery images")
    metrics = evaluate_model(model, q, qids, g, gids, space=args.feature_space).to_dict()
    text = json.dumps(metrics)
    print(text)
    if args.json_out:
        Path(args.json_out).write_text(text + "\n")
    if args.plot:
        from fancl.toolkit.plots import cmc_plot

        fq = extract_space(model, q, args.feature_space)
        fg = extract_space(model, g, args.feature_space)
        curve = cmc_curve(fq, qids, fg, gids, max_rank=min(20, len(g)))
        cmc_plot(curve, args.plot, label=f"mAP {metrics['mAP']:.3f}")
    return 0


def cmd_cluster(args) -> int:
    from fancl.clustering import DbscanConfig, dbscan, pairwise_cosine_distance
    from fancl.toolkit.tensorfile import read_tensor, write_tensor

    if not Path(args.features).exists():
        raise FileNotFoundError(f"feature file {args.features} does not exist")
    feats = read_tensor(args.features).astype(np.float64)
    if feats.ndim != 2:
        raise FanclError(f"{args.features}: expected an (N, D) tensor, got shape {list(feats.shape)}")
    if args.normalize:
        feats = feats / np.maximum(np.linalg.norm(feats, axis=1, keepdims=True), 1e-12)
    labeling = dbscan(pairwise_cosine_distance(feats, tol=1e-4), DbscanConfig(eps=args.eps, min_pts=args.min_pts))
    write_tensor(args.out, labeling.labels.astype(np.int32))
    print(json.dumps({"M": labeling.n_clusters, "outliers": labeling.n_outliers}))
    return 0


def cmd_fana_preview(args) -> int:
    from fancl.fana import FanaConfig, activation_map, apply_pepper_noise, dedicated_probe, noise_mask
    from fancl.toolkit.tensorfile import read_tensor, write_tensor

    cfg = FanaConfig(rho=args.rho, patch=args.patch)
    if not Path(args.image).exists():
        raise FileNotFoundError(f"image file {args.image} does not exist")
    image = read_tensor(args.image)
    if image.ndim != 3:
        raise FanclError(f"{args.image}: expected an (H, W, C) tensor, got shape {list(image.shape)}")
    if args.checkpoint:
        from fancl.trainer import FanclModel

        probe = FanclModel.load(args.checkpoint).probe
    else:
        probe = dedicated_probe(image.shape[2], args.seed)
    amap = activation_map(probe, image)
    mask = noise_mask(amap, cfg.rho, cfg.patch)
    noised = apply_pepper_noise(image, mask)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_tensor(out / "map.ftns", amap.astype(image.dtype))
    write_tensor(out / "mask.ftns", mask.astype(np.int32))
    write_tensor(out / "noised.ftns", noised)
    summary = {"map": str(out / "map.ftns"), "mask": str(out / "mask.ftns"), "noised": str(out / "noised.ftns"),
               "masked_pixels": int(mask.sum())}
    if not args.no_plot:
        from fancl.toolkit.plots import fana_panel

        summary["preview"] = str(fana_panel(image, amap, mask, noised, out / "preview.png", rho=args.rho))
    print(json.dumps(summary))
    return 0


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "eval": cmd_eval,
    "cluster": cmd_cluster,
    "fana-preview": cmd_fana_preview,
}


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        args = parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return USAGE_ERROR
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    except (OSError, FanclError) as exc:
        print(f"fancl: error: {exc}", file=sys.stderr)
        return RUNTIME_ERROR
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    logging.getLogger("matplotlib").setLevel(logging.WARNING)
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"fancl {args.command}: invalid configuration: {exc}", file=sys.stderr)
        return USAGE_ERROR
    except (OSError, FanclError, ValueError) as exc:
        print(f"fancl {args.command}: error: {exc}", file=sys.stderr)
        return RUNTIME_ERROR


run_cli = main

if __name__ == "__main__":
    sys.exit(main())
