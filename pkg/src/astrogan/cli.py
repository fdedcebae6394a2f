"""Command-line entry point.

Usage::

    astrogan dataset fetch --manifest M.jsonl [--dest DIR]
    astrogan dataset split --manifest M.jsonl [--test-fraction 0.1] [--seed S]
    astrogan dataset prepare --manifest M.jsonl --src DIR --out DIR [--side 256] [--tiles 1]
    astrogan pretrain --data DIR --out RUN [--task colorize|sr] ...
    astrogan finetune --data DIR --out RUN --gen-weights W [--disc-weights W] ...
    astrogan colorize IN.png OUT.png [--weights W]
    astrogan upscale IN.png OUT.png --scale 4 --arch {srgan,edsr,wdsr} [--weights W]
    astrogan evaluate --data DIR --space {rgb,lab} [--fid] (--weights W | --model oracle)

Option precedence is command-line flag > ``--config`` JSON file > built-in
default. Exit status: 0 success, 1 user error, 2 internal error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Sequence

import numpy as np

from . import datapipe
from .colorspace import ContractError, ImageGrid, Space, normalize, rgb_to_lab, split_lab
from .datapipe import (
    DatasetManifest,
    Split,
    assign_splits,
    extract_tiles,
    fetch_images,
    holdout,
    list_images,
    make_colorization_sample,
    make_sr_sample,
    read_image,
    read_manifest,
    reconstruct_rgb,
    write_image,
    write_manifest,
)
from .metrics import (
    ColorSpace,
    InceptionExtractor,
    OracleModel,
    PoolingExtractor,
    evaluate,
)
from .models import (
    SR_ARCHS,
    ModelKind,
    ModelParams,
    ModelSpec,
    WeightsError,
    build_model,
    forward,
    load_params,
    save_params,
)
from .trainer import CheckpointError, Stage, TrainConfig, TrainingError, fit

log = logging.getLogger("astrogan")

EXIT_OK, EXIT_USER, EXIT_INTERNAL = 0, 1, 2

DEFAULTS: dict[str, object] = {
    # data
    "dest": None,
    "rate_limit": 2.0,
    "parallelism": 4,
    "test_fraction": 0.10,
    "side": 256,
    "tiles": 1,
    "val_fraction": 0.10,
    # model
    "task": "colorize",
    "space": "lab",
    "arch": "srgan",
    "scale": 4,
    "base_width": 64,
    "encoder_stages": 4,
    "n_res_blocks": 16,
    "encoder_weights": None,
    "patch_layers": 3,
    "disc_width": 64,
    # training
    "epochs": 20,
    "batch_size": 16,
    "lr": 2e-4,
    "beta1": 0.5,
    "beta2": 0.999,
    "patience": 10,
    "lambda_weight": 100.0,
    "seed": 0,
    # evaluation
    "split": "test",
    "fid": False,
    "inception_weights": None,
    "model": None,
    "weights": None,
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON file of option defaults")
    p.add_argument("--seed", type=int)


def _add_model(p: argparse.ArgumentParser) -> None:
    p.add_argument("--task", choices=["colorize", "sr"])
    p.add_argument("--space", choices=["lab", "rgb"], help="colorization target space")
    p.add_argument("--arch", choices=sorted(SR_ARCHS))
    p.add_argument("--scale", type=int, choices=[2, 4])
    p.add_argument("--base-width", type=int)
    p.add_argument("--encoder-stages", type=int)
    p.add_argument("--n-res-blocks", type=int)
    p.add_argument("--encoder-weights", help="torchvision-style ResNet-18 state dict")


def _add_training(p: argparse.ArgumentParser) -> None:
    p.add_argument("--data", required=True, help="prepared dataset directory")
    p.add_argument("--out", required=True, help="run directory")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--beta1", type=float)
    p.add_argument("--beta2", type=float)
    p.add_argument("--patience", type=int)
    p.add_argument("--lambda", dest="lambda_weight", type=float)
    p.add_argument("--val-fraction", type=float)
    p.add_argument("--resume", action="store_true", help="continue from checkpoints in --out")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="astrogan", description="Astronomical image colorization and super-resolution.")
    parser.add_argument("-q", "--quiet", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    ds = sub.add_parser("dataset", help="acquire and prepare data")
    ds_sub = ds.add_subparsers(dest="action", required=True, parser_class=_Parser)
    p = ds_sub.add_parser("fetch")
    _add_common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--dest", help="defaults to $ASTRO_DATA_DIR")
    p.add_argument("--rate-limit", type=float, help="requests per second")
    p.add_argument("--parallelism", type=int)
    p = ds_sub.add_parser("split")
    _add_common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", help="output manifest (default: overwrite input)")
    p.add_argument("--test-fraction", type=float)
    p = ds_sub.add_parser("prepare")
    _add_common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--src", help="directory of fetched images (default: $ASTRO_DATA_DIR)")
    p.add_argument("--out", required=True)
    p.add_argument("--side", type=int)
    p.add_argument("--tiles", type=int, help="tiles cut per source image")

    p = sub.add_parser("pretrain", help="supervised L1 pretraining of the generator")
    _add_common(p)
    _add_model(p)
    _add_training(p)

    p = sub.add_parser("finetune", help="adversarial fine-tuning")
    _add_common(p)
    _add_model(p)
    _add_training(p)
    p.add_argument("--gen-weights", required=True)
    p.add_argument("--disc-weights")
    p.add_argument("--patch-layers", type=int)
    p.add_argument("--disc-width", type=int)

    p = sub.add_parser("colorize", help="colorize an image")
    _add_common(p)
    p.add_argument("input")
    p.add_argument("output")
    p.add_argument("--weights")

    p = sub.add_parser("upscale", help="super-resolve an image")
    _add_common(p)
    p.add_argument("input")
    p.add_argument("output")
    p.add_argument("--scale", type=int, choices=[2, 4])
    p.add_argument("--arch", choices=sorted(SR_ARCHS))
    p.add_argument("--weights")
    p.add_argument("--n-res-blocks", type=int)
    p.add_argument("--base-width", type=int)

    p = sub.add_parser("evaluate", help="distance and FID report")
    _add_common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--split", choices=["train", "test"])
    p.add_argument("--task", choices=["colorize", "sr"])
    p.add_argument("--scale", type=int, choices=[2, 4])
    p.add_argument("--space", choices=["rgb", "lab"])
    p.add_argument("--fid", action="store_true", default=None)
    p.add_argument("--inception-weights")
    p.add_argument("--weights")
    p.add_argument("--model", choices=["oracle"], help="use a stub model instead of weights")
    p.add_argument("--out", required=True, help="report path (.json; a .txt table is written alongside)")
    return parser


def resolve(args: argparse.Namespace) -> dict:
    """Merge built-in defaults, the config file and explicit flags."""
    cfg = dict(DEFAULTS)
    if getattr(args, "config", None):
        try:
            loaded = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {args.config}: {exc}") from exc
        if not isinstance(loaded, dict):
            raise UsageError(f"config {args.config} must hold a JSON object")
        cfg.update({k.replace("-", "_"): v for k, v in loaded.items()})
    cfg.update({k: v for k, v in vars(args).items() if v is not None and k != "config"})
    return cfg


def _echo(cfg: dict, directory: Path) -> None:
    directory.mkdir(parents=True, exist_ok=True)
    (directory / "run_config.json").write_text(json.dumps(cfg, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# dataset commands


def cmd_dataset(cfg: dict) -> int:
    manifest = read_manifest(cfg["manifest"])
    if cfg["action"] == "fetch":
        dest = Path(cfg["dest"]) if cfg["dest"] else datapipe.default_data_dir()
        _echo(cfg, dest)
        report = fetch_images(manifest, dest, cfg["rate_limit"], cfg["parallelism"])
        (dest / "fetch_report.json").write_text(
            json.dumps({"fetched": report.fetched, "skipped": report.skipped, "failed": report.failed}, indent=2)
            + "\n"
        )
        print("fetched {fetched}, skipped {skipped}, failed {failed}".format(**report.counts))
        return EXIT_OK if not report.failed else EXIT_USER
    if cfg["action"] == "split":
        out = Path(cfg.get("out") or cfg["manifest"])
        split = assign_splits(manifest, cfg["test_fraction"], cfg["seed"])
        write_manifest(split, out)
        n_test = len(split.ids(Split.TEST))
        print(f"{len(split) - n_test} train / {n_test} test -> {out}")
        return EXIT_OK
    return _prepare(manifest, cfg)


def _prepare(manifest: DatasetManifest, cfg: dict) -> int:
    src = Path(cfg["src"]) if cfg.get("src") else datapipe.default_data_dir()
    out = Path(cfg["out"])
    _echo(cfg, out)
    written = 0
    for entry in manifest.entries:
        if entry.split is Split.UNASSIGNED:
            log.warning("skipping %s: no split assigned (run `dataset split` first)", entry.id)
            continue
        matches = [p for p in src.glob(f"{entry.id}.*") if p.suffix.lower() in datapipe.IMAGE_EXTENSIONS]
        if not matches:
            log.warning("skipping %s: not found in %s", entry.id, src)
            continue
        tiles = extract_tiles(read_image(matches[0]), cfg["side"], cfg["tiles"])
        target = out / entry.split.value
        target.mkdir(parents=True, exist_ok=True)
        for k, tile in enumerate(tiles):
            name = entry.id if len(tiles) == 1 else f"{entry.id}_t{k}"
            write_image(tile, target / f"{name}.png")
            written += 1
    print(f"wrote {written} images to {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# training


def _load_samples(directory: Path, cfg: dict) -> list:
    paths = list_images(directory) if directory.is_dir() else []
    if not paths:
        raise ContractError(f"no images found in {directory}")
    samples = []
    for p in paths:
        img = read_image(p)
        if cfg["task"] == "sr":
            samples.append(make_sr_sample(img, cfg["scale"], p.stem))
        else:
            samples.append(make_colorization_sample(img, p.stem, side=None, mode=cfg["space"]))
    return samples


def _generator_spec(cfg: dict) -> ModelSpec:
    if cfg["task"] == "sr":
        return ModelSpec(
            SR_ARCHS[cfg["arch"]],
            in_channels=3,
            out_channels=3,
            base_width=cfg["base_width"],
            n_res_blocks=cfg["n_res_blocks"],
            scale=cfg["scale"],
            seed=cfg["seed"],
        )
    return ModelSpec(
        ModelKind.UNET_COLORIZER,
        in_channels=1,
        out_channels=2 if cfg["space"] == "lab" else 3,
        encoder_stages=cfg["encoder_stages"],
        base_width=cfg["base_width"],
        pretrained_encoder=bool(cfg["encoder_weights"]),
        encoder_weights=cfg["encoder_weights"],
        seed=cfg["seed"],
    )


def _train_config(cfg: dict, stage: Stage) -> TrainConfig:
    return TrainConfig(
        batch_size=cfg["batch_size"],
        epochs=cfg["epochs"],
        lr=cfg["lr"],
        beta1=cfg["beta1"],
        beta2=cfg["beta2"],
        patience=cfg["patience"],
        lambda_weight=cfg["lambda_weight"],
        seed=cfg["seed"],
        stage=stage,
    )


def _split_train_val(cfg: dict) -> tuple[list, list]:
    samples = _load_samples(Path(cfg["data"]) / "train", cfg)
    keep, held = holdout([s.id for s in samples], cfg["val_fraction"], cfg["seed"])
    by_id = {s.id: s for s in samples}
    if not held:
        raise ContractError("need at least two training images to hold out a validation set")
    return [by_id[i] for i in keep], [by_id[i] for i in held]


def _run_training(cfg: dict, stage: Stage) -> int:
    out = Path(cfg["out"])
    _echo(cfg, out)
    train, val = _split_train_val(cfg)
    if stage is Stage.PRETRAIN:
        gen = build_model(_generator_spec(cfg))
        disc = None
    else:
        gen = load_params(cfg["gen_weights"])
        if gen.spec.kind.is_sr != (cfg["task"] == "sr") or gen.spec.kind.is_discriminator:
            raise ContractError(f"{cfg['gen_weights']} holds a {gen.spec.kind.value} model, not a {cfg['task']} model")
        if cfg.get("disc_weights"):
            disc = load_params(cfg["disc_weights"])
        else:
            log.info("no --disc-weights given; starting from a freshly initialized discriminator")
            disc = build_model(
                ModelSpec(
                    ModelKind.PATCH_DISCRIMINATOR,
                    in_channels=gen.spec.in_channels + gen.spec.out_channels,
                    base_width=cfg["disc_width"],
                    patch_layers=cfg["patch_layers"],
                    seed=cfg["seed"],
                )
            )
    print(f"{stage.value}: {len(train)} train / {len(val)} validation samples, {gen!r}")
    best, state = fit(gen, disc, train, val, _train_config(cfg, stage), out, resume=cfg.get("resume", False))
    if not (out / "best.weights").exists():
        save_params(best, out / "best.weights")
    if disc is not None:
        save_params(disc, out / "disc.weights")
    print(
        f"done after {state.epoch} epochs; best val L1 {state.best_val_l1:.6f} "
        f"at epoch {state.best_epoch} -> {out / 'best.weights'}"
    )
    return EXIT_OK


# ---------------------------------------------------------------------------
# inference


def _random_model(spec: ModelSpec, what: str) -> ModelParams:
    log.warning("no --weights given; %s uses a randomly initialized %s", what, spec.kind.value)
    return build_model(spec)


def cmd_colorize(cfg: dict) -> int:
    if cfg["weights"]:
        gen = load_params(cfg["weights"])
        if gen.spec.kind is not ModelKind.UNET_COLORIZER:
            raise ContractError(f"{cfg['weights']} is not a colorization model")
    else:
        gen = _random_model(ModelSpec(ModelKind.UNET_COLORIZER, seed=cfg["seed"]), "colorize")
    img = read_image(cfg["input"])
    if gen.spec.out_channels == 2:
        l_part, _ = split_lab(normalize(rgb_to_lab(img), Space.LAB_NORM))
        ab = forward(gen, l_part.pixels[None])[0]
        result = reconstruct_rgb(l_part, ImageGrid(ab.astype(np.float64), Space.LAB_NORM))
    else:
        sample = make_colorization_sample(img, "input", side=None, mode="rgb")
        rgb = (forward(gen, sample.input_l.pixels[None] * 2.0 - 1.0)[0] + 1.0) / 2.0
        result = normalize(ImageGrid(rgb.astype(np.float64), Space.SRGB_UNIT), Space.SRGB_8BIT)
    write_image(result, cfg["output"])
    print(f"wrote {cfg['output']} ({result.height}x{result.width})")
    return EXIT_OK


def cmd_upscale(cfg: dict) -> int:
    kind = SR_ARCHS[cfg["arch"]]
    if cfg["weights"]:
        gen = load_params(cfg["weights"])
        if gen.spec.kind is not kind or gen.spec.scale != cfg["scale"]:
            raise ContractError(
                f"{cfg['weights']} holds {gen.spec.kind.value} x{gen.spec.scale}, "
                f"requested {kind.value} x{cfg['scale']}"
            )
    else:
        spec = ModelSpec(
            kind,
            in_channels=3,
            out_channels=3,
            scale=cfg["scale"],
            base_width=cfg["base_width"],
            n_res_blocks=cfg["n_res_blocks"],
            seed=cfg["seed"],
        )
        gen = _random_model(spec, "upscale")
    img = normalize(read_image(cfg["input"]), Space.SRGB_UNIT)
    out = forward(gen, img.pixels[None])[0]
    result = ImageGrid(out.astype(np.float64), Space.SRGB_UNIT)
    write_image(result, cfg["output"])
    print(f"wrote {cfg['output']} ({result.height}x{result.width})")
    return EXIT_OK


def cmd_evaluate(cfg: dict) -> int:
    """``--space`` selects the report space; the data mode follows the model."""
    out = Path(cfg["out"])
    _echo(cfg, out.parent)
    data_cfg = {**cfg, "space": "lab"}
    if cfg["model"] == "oracle":
        model = OracleModel()
    elif cfg["weights"]:
        model = load_params(cfg["weights"])
        if model.spec.kind.is_discriminator:
            raise ContractError(f"{cfg['weights']} holds a discriminator")
        if model.spec.kind.is_sr:
            data_cfg.update(task="sr", scale=model.spec.scale)
        else:
            data_cfg.update(task="colorize", space="lab" if model.spec.out_channels == 2 else "rgb")
    else:
        raise UsageError("evaluate needs --weights or --model oracle")
    samples = _load_samples(Path(cfg["data"]) / cfg["split"], data_cfg)
    extractor = None
    if cfg["fid"]:
        extractor = InceptionExtractor(cfg["inception_weights"]) if cfg["inception_weights"] else PoolingExtractor()
    report = evaluate(model, samples, ColorSpace.LAB if cfg["space"] == "lab" else ColorSpace.RGB, extractor)
    report.save(out)
    print(report.to_text(), end="")
    return EXIT_OK


# ---------------------------------------------------------------------------


def _setup_logging(quiet: bool) -> None:
    if not log.handlers:
        handler = logging.StreamHandler(sys.stdout)
        handler.setFormatter(logging.Formatter("%(message)s"))
        log.addHandler(handler)
    log.setLevel(logging.WARNING if quiet else logging.INFO)


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        cfg = resolve(args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USER
    _setup_logging(cfg.get("quiet", False))
    handlers = {
        "dataset": cmd_dataset,
        "pretrain": lambda c: _run_training(c, Stage.PRETRAIN),
        "finetune": lambda c: _run_training(c, Stage.ADVERSARIAL),
        "colorize": cmd_colorize,
        "upscale": cmd_upscale,
        "evaluate": cmd_evaluate,
    }
    try:
        return handlers[cfg["command"]](cfg)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USER
    except (ContractError, WeightsError, CheckpointError, FileNotFoundError, KeyError, TrainingError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USER
    except Exception as exc:  # noqa: BLE001
        log.exception("internal error")
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
