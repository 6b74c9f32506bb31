"""Command-line entry point.

Commands: synth-gen, extract, pretrain-cpc, train-mil, sweep-labels, eval,
attention-map, check-grads, verify. Option precedence is flags > config file
> built-in defaults; every artifact-producing command writes a run manifest
(config, seeds, input/output hashes) sufficient to reproduce it. Exit codes:
0 success, 1 usage, 2 configuration, 3 numeric failure, 4 verification
failure.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

import numpy as np
import torch

from . import verify
from .checkpoint import file_hash
from .config import (
    CPC_AUGMENT,
    N_FOLDS,
    VAL_FRACTION,
    AugmentConfig,
    CpcTrainConfig,
    MilLossConfig,
    SyntheticSpec,
    TrainConfig,
    dataclass_to_items,
    read_config_file,
)
from .contrastive import cpc_pretrain, load_pretrained, save_pretrained
from .data import (
    bags_from_images,
    build_bags,
    build_cpc_tiles,
    generate_synthetic_corpus,
    load_corpus,
    load_image_manifest,
    save_corpus,
    write_bag_manifest,
)
from .encoder import to_tensor
from .errors import ConfigurationError, NumericError, VerificationError
from .manifest import summary_table, write_metrics_csv, write_run_manifest
from .metrics import accuracy, aggregate_folds, export_attention_map, roc_auc
from .mil import load_mil_model, save_mil_model
from .profiles import get_profile
from .training import label_efficiency_sweep, make_splits, subsample_labels, train_mil

log = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_CONFIG = 2
EXIT_NUMERIC = 3
EXIT_VERIFY = 4

COMMANDS = (
    "synth-gen",
    "extract",
    "pretrain-cpc",
    "train-mil",
    "sweep-labels",
    "eval",
    "attention-map",
    "check-grads",
    "verify",
)


class CliParser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"{self.prog}: error: {message}\n")
        sys.exit(EXIT_USAGE)


def _bool(text: str) -> bool:
    lowered = str(text).strip().lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise ConfigurationError(f"expected a boolean, got {text!r}")


class Options:
    """Resolve option values with precedence flags > config file > defaults,
    recording every non-default source for the run manifest."""

    def __init__(self, args: argparse.Namespace, command: str):
        self.args = vars(args)
        self.file: dict[str, str] = {}
        if self.args.get("config"):
            sections = read_config_file(self.args["config"])
            self.file = {**sections.get("common", {}), **sections.get(command, {})}
        self.overrides: dict[str, str] = {}

    def get(self, key: str, default, cast=None):
        flag = self.args.get(key.replace("-", "_"))
        if flag is not None:
            self.overrides[key] = f"{flag} (flag)"
            return flag
        if key in self.file:
            cast = cast or (type(default) if default is not None else str)
            if cast is bool:
                cast = _bool
            value = cast(self.file[key])
            self.overrides[key] = f"{value} (file)"
            return value
        return default


def _out_dir(opts: Options, command: str) -> Path:
    root = Path(os.environ.get("CPCMIL_OUT", "."))
    out = Path(opts.get("out", root / "runs" / command, cast=Path))
    out.mkdir(parents=True, exist_ok=True)
    return out


def _manifest(
    out: Path,
    command: str,
    opts: Options,
    config_sections: dict[str, dict],
    inputs: dict[str, str] | None = None,
    outputs: dict[str, str] | None = None,
) -> None:
    sections: dict[str, dict] = {"run": {"command": command}}
    sections.update(config_sections)
    if opts.overrides:
        sections["overrides"] = dict(sorted(opts.overrides.items()))
    if inputs:
        sections["inputs"] = inputs
    if outputs:
        sections["outputs"] = outputs
    write_run_manifest(out / "run.manifest", sections)


def _corpus_inputs(corpus: Path) -> dict[str, str]:
    return {
        "corpus": str(corpus),
        "labels_sha256": file_hash(corpus / "labels.jsonl"),
        "truth_sha256": file_hash(corpus / "truth.jsonl"),
    }


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_synth_gen(args) -> int:
    opts = Options(args, "synth-gen")
    base = SyntheticSpec()
    spec = SyntheticSpec(
        n_images=opts.get("n-images", base.n_images),
        image_size=opts.get("image-size", base.image_size),
        patch_size=opts.get("patch-size", base.patch_size),
        class_balance=opts.get("balance", base.class_balance),
        motif_density=opts.get("motif-density", base.motif_density),
        dot_rate=opts.get("dot-rate", base.dot_rate),
        noise_std=opts.get("noise-std", base.noise_std),
        margin=opts.get("margin", base.margin),
        seed=opts.get("seed", 0),
    )
    out = _out_dir(opts, "synth-gen")
    images = generate_synthetic_corpus(spec)
    save_corpus(out, images, spec)
    _manifest(
        out,
        "synth-gen",
        opts,
        {"synthetic": dict(dataclass_to_items(spec))},
        outputs=_corpus_inputs(out),
    )
    n_pos = sum(1 for im in images if im.image.label == 1)
    print(f"wrote {len(images)} images ({n_pos} positive) to {out}")
    return EXIT_OK


def cmd_extract(args) -> int:
    opts = Options(args, "extract")
    out = _out_dir(opts, "extract")
    patch_size = opts.get("patch-size", 32)
    if args.corpus:
        corpus = Path(args.corpus)
        bags = build_bags(load_corpus(corpus))
        inputs = _corpus_inputs(corpus)
    elif args.images:
        bags = bags_from_images(load_image_manifest(args.images), patch_size)
        inputs = {"images": str(args.images), "manifest_sha256": file_hash(args.images)}
    else:
        raise ConfigurationError("extract needs --corpus or --images")
    path = out / "bags.jsonl"
    write_bag_manifest(path, bags)
    if opts.get("materialize", False):
        from PIL import Image

        pdir = out / "patches"
        pdir.mkdir(exist_ok=True)
        for bag in bags:
            for i, patch in enumerate(bag.instances):
                arr = np.round(np.clip(patch, 0, 1) * 255).astype(np.uint8)
                Image.fromarray(arr).save(pdir / f"{bag.bag_id}_{i:03d}.png", format="PNG")
    _manifest(
        out,
        "extract",
        opts,
        {"extract": {"patch_size": patch_size, "bags": len(bags)}},
        inputs=inputs,
        outputs={"bags_sha256": file_hash(path)},
    )
    print(f"wrote {len(bags)} bags ({sum(b.n_instances for b in bags)} instances) to {path}")
    return EXIT_OK


def cmd_pretrain_cpc(args) -> int:
    opts = Options(args, "pretrain-cpc")
    out = _out_dir(opts, "pretrain-cpc")
    profile = get_profile(opts.get("profile", "desk"))
    corpus = Path(args.corpus)
    images = load_corpus(corpus)
    seed = opts.get("seed", 0)
    augment = AugmentConfig(**vars(CPC_AUGMENT))
    if opts.get("no-augment", False):
        augment = AugmentConfig()
    # offsets must stay inside the profile's sub-patch grid
    offsets = tuple(k for k in (1, 2, 3) if k < profile.grid_size)
    config = CpcTrainConfig(
        epochs=opts.get("epochs", 30),
        batch_size=opts.get("batch-size", 16),
        learning_rate=opts.get("lr", 1e-3),
        tiles_per_image=opts.get("tiles-per-image", 12),
        negatives=opts.get("negatives", None, cast=int),
        offsets=offsets,
        augment=augment,
        seed=seed,
    )
    tiles = build_cpc_tiles(
        images, profile.cpc_tile, per_image=config.tiles_per_image, seed=seed
    )
    result = cpc_pretrain(tiles, profile, config, log_fn=lambda e: log.info("%s", e))
    ckpt_path = out / "cpc.ckpt"
    save_pretrained(ckpt_path, result, profile)
    write_metrics_csv(out / "history.csv", result.history)
    _manifest(
        out,
        "pretrain-cpc",
        opts,
        {
            "cpc": dict(dataclass_to_items(config)),
            "profile": {"name": profile.name, "tiles": len(tiles)},
        },
        inputs=_corpus_inputs(corpus),
        outputs={
            "checkpoint_sha256": file_hash(ckpt_path),
            "initial_loss": repr(result.initial_loss),
            "chance": repr(result.chance),
            "final_loss": repr(result.history[-1]["loss"]),
        },
    )
    print(
        f"pretrained {config.epochs} epochs on {len(tiles)} tiles: "
        f"loss {result.initial_loss:.4f} -> {result.history[-1]['loss']:.4f} "
        f"(chance {result.chance:.4f}); checkpoint {ckpt_path}"
    )
    return EXIT_OK


def _train_config(opts: Options, mode: str, seed: int) -> TrainConfig:
    loss = MilLossConfig(
        mode=opts.get("loss-mode", "svm_kl"),
        margin=opts.get("margin", 1.0),
        tau=opts.get("tau", 1.0),
        kl_coefficient=opts.get("beta", 0.5),
    )
    return TrainConfig(
        mode=mode,
        learning_rate=opts.get("lr", None, cast=float),
        max_epochs=opts.get("max-epochs", 100),
        patience=opts.get("patience", 25),
        loss=loss,
        attention_dropout=opts.get("dropout", 0.25),
        seed=seed,
    )


def cmd_train_mil(args) -> int:
    opts = Options(args, "train-mil")
    out = _out_dir(opts, "train-mil")
    corpus = Path(args.corpus)
    mode = opts.get("mode", "frozen")
    if mode in ("frozen", "finetune") and not args.checkpoint:
        raise ConfigurationError(f"--mode {mode} requires --checkpoint")
    seed = opts.get("seed", 0)
    split_seed = opts.get("split-seed", 0)
    bags = {b.bag_id: b for b in build_bags(load_corpus(corpus))}
    labels = {k: b.bag_label for k, b in bags.items()}
    splits = make_splits(
        labels,
        n_folds=opts.get("folds", N_FOLDS),
        val_fraction=opts.get("val-fraction", VAL_FRACTION),
        seed=split_seed,
    )
    pretrained = None
    profile = get_profile(opts.get("profile", "desk"))
    inputs = _corpus_inputs(corpus)
    if args.checkpoint:
        profile, pretrained = load_pretrained(args.checkpoint)
        inputs["checkpoint_sha256"] = file_hash(args.checkpoint)
    config = _train_config(opts, mode, seed)
    budget = opts.get("budget", None, cast=int)
    subsets = None
    if budget is not None:
        subsets = [
            subsample_labels(fold.train_ids, labels, budget, split_seed, f)
            for f, fold in enumerate(splits.folds)
        ]
    result = train_mil(
        bags, splits, pretrained, config, profile, train_subsets=subsets,
        log_fn=lambda e: log.info("%s", e),
    )

    history = [row for fold in result.folds for row in fold.history]
    write_metrics_csv(out / "history.csv", history)
    fold_rows = [
        {
            "fold": f.fold,
            "best_epoch": f.best_epoch,
            "val_auc": f.val_auc,
            "val_accuracy": f.val_accuracy,
        }
        for f in result.folds
    ]
    write_metrics_csv(out / "folds.csv", fold_rows)
    model_hashes = {}
    for f in result.folds:
        path = out / f"mil_fold{f.fold}.ckpt"
        save_mil_model(path, f.model)
        model_hashes[f"fold{f.fold}_sha256"] = file_hash(path)
    acc = aggregate_folds(result.val_accuracies)
    auc = aggregate_folds(result.val_aucs)
    summary = summary_table([(f"{mode}/{config.loss.mode}", acc.formatted(), auc.formatted())])
    (out / "summary.txt").write_text(summary + "\n")
    _manifest(
        out,
        "train-mil",
        opts,
        {
            "train": dict(dataclass_to_items(config)),
            "splits": {
                "seed": split_seed,
                "folds": len(splits.folds),
                "budget": budget if budget is not None else "full",
            },
            "profile": {"name": profile.name},
        },
        inputs=inputs,
        outputs={"val_auc": auc.formatted(), "val_accuracy": acc.formatted(), **model_hashes},
    )
    print(summary)
    return EXIT_OK


def cmd_sweep_labels(args) -> int:
    opts = Options(args, "sweep-labels")
    out = _out_dir(opts, "sweep-labels")
    corpus = Path(args.corpus)
    seed = opts.get("seed", 0)
    split_seed = opts.get("split-seed", 0)
    bags = {b.bag_id: b for b in build_bags(load_corpus(corpus))}
    labels = {k: b.bag_label for k, b in bags.items()}
    splits = make_splits(
        labels,
        n_folds=opts.get("folds", N_FOLDS),
        val_fraction=opts.get("val-fraction", VAL_FRACTION),
        seed=split_seed,
    )
    profile, pretrained = load_pretrained(args.checkpoint)
    config = _train_config(opts, "frozen", seed)
    max_budget = min(
        sum(1 for i in fold.train_ids if labels[i] == cls)
        for fold in splits.folds
        for cls in (0, 1)
    )
    budgets = []
    for token in str(opts.get("budgets", "1,4,16,max")).split(","):
        token = token.strip()
        budgets.append(max_budget if token == "max" else int(token))
    points = label_efficiency_sweep(
        bags, splits, pretrained, budgets, config, profile,
        log_fn=lambda e: log.info("%s", e),
    )
    rows = [
        {"budget": p.budget, "mean_auc": p.mean, "std_auc": p.std,
         "aucs": ";".join(repr(a) for a in p.aucs)}
        for p in points
    ]
    write_metrics_csv(out / "sweep.csv", rows)
    _manifest(
        out,
        "sweep-labels",
        opts,
        {"train": dict(dataclass_to_items(config)),
         "sweep": {"budgets": ",".join(str(b) for b in budgets), "split_seed": split_seed}},
        inputs={**_corpus_inputs(corpus), "checkpoint_sha256": file_hash(args.checkpoint)},
        outputs={f"budget_{p.budget}": aggregate_folds(p.aucs).formatted() for p in points},
    )
    for p in points:
        print(f"budget {p.budget:>4}: AUC {aggregate_folds(p.aucs).formatted()}")
    return EXIT_OK


def cmd_eval(args) -> int:
    opts = Options(args, "eval")
    out = _out_dir(opts, "eval")
    corpus = Path(args.corpus)
    bags = {b.bag_id: b for b in build_bags(load_corpus(corpus))}
    model = load_mil_model(args.model)
    split_seed = opts.get("split-seed", 0)
    fold_idx = opts.get("fold", 0)
    labels = {k: b.bag_label for k, b in bags.items()}
    if opts.get("all-bags", False):
        ids = sorted(bags)
    else:
        splits = make_splits(
            labels,
            n_folds=opts.get("folds", N_FOLDS),
            val_fraction=opts.get("val-fraction", VAL_FRACTION),
            seed=split_seed,
        )
        if not 0 <= fold_idx < len(splits.folds):
            raise ConfigurationError(f"fold {fold_idx} outside 0..{len(splits.folds) - 1}")
        ids = splits.folds[fold_idx].val_ids
    rows = []
    with torch.no_grad():
        for bag_id in ids:
            bag = bags[bag_id]
            output = model(to_tensor(bag.instances))
            rows.append(
                {"bag_id": bag_id, "label": bag.bag_label,
                 "probability": float(output.probability)}
            )
    write_metrics_csv(out / "predictions.csv", rows)
    scores = [r["probability"] for r in rows]
    ys = [r["label"] for r in rows]
    acc = accuracy(ys, scores)
    auc = roc_auc(ys, scores)
    _manifest(
        out,
        "eval",
        opts,
        {"eval": {"model": str(args.model), "fold": fold_idx, "bags": len(ids)}},
        inputs={**_corpus_inputs(corpus), "model_sha256": file_hash(args.model)},
        outputs={"accuracy": repr(acc), "auc": repr(auc)},
    )
    print(summary_table([(Path(args.model).stem, f"{acc:.3f}", f"{auc:.3f}")]))
    return EXIT_OK


def cmd_attention_map(args) -> int:
    opts = Options(args, "attention-map")
    out = _out_dir(opts, "attention-map")
    bags = {b.bag_id: b for b in build_bags(load_corpus(Path(args.corpus)))}
    if args.bag not in bags:
        raise ConfigurationError(f"unknown bag id {args.bag!r}")
    bag = bags[args.bag]
    model = load_mil_model(args.model)
    with torch.no_grad():
        output = model(to_tensor(bag.instances))
    png, csv_path = export_attention_map(bag, output.attention.numpy(), out / args.bag)
    _manifest(
        out,
        "attention-map",
        opts,
        {"attention": {"bag": args.bag, "instances": bag.n_instances}},
        inputs={"model_sha256": file_hash(args.model)},
        outputs={"heatmap_sha256": file_hash(png), "records_sha256": file_hash(csv_path)},
    )
    print(f"wrote {png} and {csv_path}")
    return EXIT_OK


def cmd_check_grads(args) -> int:
    opts = Options(args, "check-grads")
    report = verify.gradient_suite(seed=opts.get("seed", 0))
    for line in report.details:
        print(line)
    print(report.line())
    return EXIT_OK if report.passed else EXIT_VERIFY


def cmd_verify(args) -> int:
    opts = Options(args, "verify")
    results = verify.run_all(
        seed=opts.get("seed", 0), causality_trials=opts.get("trials", 1000)
    )
    for result in results:
        print(result.line())
    return EXIT_OK if all(r.passed for r in results) else EXIT_VERIFY


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def _add_common(p: CliParser) -> None:
    p.add_argument("--out", type=Path, help="output directory (default $CPCMIL_OUT/runs/<command>)")
    p.add_argument("--config", type=Path, help="key = value config file")
    p.add_argument("--seed", type=int)
    p.add_argument("--threads", type=int, default=1, help="torch thread cap (default 1)")


def build_parser() -> CliParser:
    parser = CliParser(prog="cpcmil", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=CliParser)

    p = sub.add_parser("synth-gen", help="generate the synthetic benchmark corpus")
    _add_common(p)
    p.add_argument("--n-images", type=int)
    p.add_argument("--image-size", type=int)
    p.add_argument("--patch-size", type=int)
    p.add_argument("--balance", type=float)
    p.add_argument("--motif-density", type=float)
    p.add_argument("--dot-rate", type=float)
    p.add_argument("--noise-std", type=float)
    p.add_argument("--margin", type=int)
    p.set_defaults(func=cmd_synth_gen)

    p = sub.add_parser("extract", help="cut bags of patches from a corpus")
    _add_common(p)
    p.add_argument("--corpus", type=Path, help="synthetic corpus directory")
    p.add_argument("--images", type=Path, help="external image manifest (jsonl)")
    p.add_argument("--patch-size", type=int)
    p.add_argument("--materialize", action="store_const", const=True)
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("pretrain-cpc", help="contrastive pretraining on unlabeled tiles")
    _add_common(p)
    p.add_argument("--corpus", type=Path, required=True)
    p.add_argument("--profile", choices=("paper", "desk", "tiny"))
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--tiles-per-image", type=int)
    p.add_argument("--negatives", type=int)
    p.add_argument("--no-augment", action="store_const", const=True)
    p.set_defaults(func=cmd_pretrain_cpc)

    p = sub.add_parser("train-mil", help="train the attention bag classifier")
    _add_common(p)
    p.add_argument("--corpus", type=Path, required=True)
    p.add_argument("--checkpoint", type=Path, help="pretraining checkpoint")
    p.add_argument("--mode", choices=("frozen", "finetune", "scratch"))
    p.add_argument("--profile", choices=("paper", "desk", "tiny"))
    p.add_argument("--loss-mode", choices=("svm_kl", "ce"))
    p.add_argument("--margin", type=float)
    p.add_argument("--tau", type=float)
    p.add_argument("--beta", type=float)
    p.add_argument("--dropout", type=float)
    p.add_argument("--lr", type=float)
    p.add_argument("--max-epochs", type=int)
    p.add_argument("--patience", type=int)
    p.add_argument("--folds", type=int)
    p.add_argument("--val-fraction", type=float)
    p.add_argument("--split-seed", type=int)
    p.add_argument("--budget", type=int, help="labels per class (default all)")
    p.set_defaults(func=cmd_train_mil)

    p = sub.add_parser("sweep-labels", help="label-efficiency sweep (frozen mode)")
    _add_common(p)
    p.add_argument("--corpus", type=Path, required=True)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--budgets", help="comma list, e.g. 1,4,16,max")
    p.add_argument("--loss-mode", choices=("svm_kl", "ce"))
    p.add_argument("--margin", type=float)
    p.add_argument("--tau", type=float)
    p.add_argument("--beta", type=float)
    p.add_argument("--dropout", type=float)
    p.add_argument("--lr", type=float)
    p.add_argument("--max-epochs", type=int)
    p.add_argument("--patience", type=int)
    p.add_argument("--folds", type=int)
    p.add_argument("--val-fraction", type=float)
    p.add_argument("--split-seed", type=int)
    p.set_defaults(func=cmd_sweep_labels)

    p = sub.add_parser("eval", help="evaluate a saved bag classifier")
    _add_common(p)
    p.add_argument("--corpus", type=Path, required=True)
    p.add_argument("--model", type=Path, required=True)
    p.add_argument("--fold", type=int)
    p.add_argument("--folds", type=int)
    p.add_argument("--val-fraction", type=float)
    p.add_argument("--split-seed", type=int)
    p.add_argument("--all-bags", action="store_const", const=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("attention-map", help="export a bag's attention heatmap")
    _add_common(p)
    p.add_argument("--corpus", type=Path, required=True)
    p.add_argument("--model", type=Path, required=True)
    p.add_argument("--bag", required=True)
    p.set_defaults(func=cmd_attention_map)

    p = sub.add_parser("check-grads", help="finite-difference gradient checks")
    _add_common(p)
    p.set_defaults(func=cmd_check_grads)

    p = sub.add_parser("verify", help="run all verification suites")
    _add_common(p)
    p.add_argument("--trials", type=int, help="causality trials (default 1000)")
    p.set_defaults(func=cmd_verify)

    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    torch.set_num_threads(max(1, args.threads))
    try:
        return args.func(args)
    except ConfigurationError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ValueError as exc:
        print(f"invalid argument: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        if exc.batch_ids:
            print(f"offending batch: {exc.batch_ids}", file=sys.stderr)
        return EXIT_NUMERIC
    except VerificationError as exc:
        print(f"verification failure: {exc}", file=sys.stderr)
        return EXIT_VERIFY


if __name__ == "__main__":
    sys.exit(main())
