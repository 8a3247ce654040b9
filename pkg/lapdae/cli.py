"""
Command-line entry points: train, eval, corrupt, export

Every verb resolves a RunConfig first (defaults, INI file, flags) so that bad
keys or a missing data directory fail before any compute. Library errors are
mapped to the exit code carried by their class.
"""

import argparse
import logging
import sys
from datetime import datetime
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

from termcolor import colored

import config
from lapdae import __version__
from lapdae.checkpoint import Checkpoint, load as load_checkpoint, save as save_checkpoint
from lapdae.data import Dataset, load_dataset
from lapdae.errors import LapDAEError, MissingDataError, NonFiniteLossError, UsageError
from lapdae.evaluation import (
    METRICS,
    RECON_CORRUPTIONS,
    EvalReport,
    dump_first_layer_kernels,
    export_embeddings,
    knn_retrieval,
    linear_probe,
    parse_metrics,
    reconstruction_grid,
    reconstruction_mse,
)
from lapdae.images import read_image, save_image, stack_rows
from lapdae.log_utils import configure_logging
from lapdae.model import init_params
from lapdae.optim import MODES, SPATIAL, train
from lapdae.pyramid import RANDOM_LEVEL, CorruptionSpec, clamp_levels, lap_corrupt, spatial_corrupt

logger = logging.getLogger(__name__)

RUN_SUBDIRS = ("checkpoints", "logs", "reports", "images")
EXPORT_TARGETS = ("embeddings", "kernels")


def progress_callback(message: str):
    """Timestamped console status line"""
    timestamp = datetime.now().strftime("%H:%M:%S")
    print(f"[{timestamp}] {message}", flush=True)


def parse_level_range(text: Optional[str]) -> List[Union[int, str]]:
    """'random', '3', '0..4' or '0,2,4' -> list of levels"""
    if text is None or text.strip() == RANDOM_LEVEL:
        return [RANDOM_LEVEL]
    levels: List[Union[int, str]] = []
    try:
        for part in text.split(","):
            if ".." in part:
                start, end = (int(p) for p in part.split("..", 1))
                if start > end:
                    raise UsageError(f"Level range '{part}' runs backwards")
                levels.extend(range(start, end + 1))
            elif part.strip():
                levels.append(int(part))
    except ValueError:
        raise UsageError(f"Invalid level selection '{text}' (use 'random', N, 'A..B' or 'A,B,C')") from None
    if any(level < 0 for level in levels):
        raise UsageError(f"Levels must be >= 0, got '{text}'")
    return levels


def _train_level(text: Optional[str]) -> Optional[Union[int, str]]:
    if text is None:
        return None
    levels = parse_level_range(text)
    if len(levels) != 1:
        raise UsageError("train takes a single --level (an index or 'random')")
    return levels[0]


def resolve_config(args: argparse.Namespace, overrides: Dict, base: Optional[Dict] = None) -> config.RunConfig:
    overrides = dict(overrides)
    overrides.update(data_dir=args.data_dir, seed=args.seed, workers=args.workers, log_level=args.log_level)
    cfg = config.load_run_config(args.config, overrides, base=base)
    configure_logging(cfg.log_level)
    return cfg


def require_data_dir(cfg: config.RunConfig) -> Path:
    if not cfg.data_dir:
        raise MissingDataError(f"No data directory: pass --data-dir, set data_dir in [data] or {config.DATA_DIR_ENV}")
    path = Path(cfg.data_dir).expanduser()
    if not path.is_dir():
        raise MissingDataError(f"Data directory does not exist: {path}")
    return path


def make_run_dir(cfg: config.RunConfig) -> Path:
    """runs/<timestamp>-<config hash>/ with the resolved config and the artifact subfolders"""
    stamp = datetime.now().strftime("%Y%m%d-%H%M%S")
    base = Path(cfg.runs_dir) / f"{stamp}-{cfg.fingerprint()}"
    run_dir, attempt = base, 1
    while run_dir.exists():
        attempt += 1
        run_dir = base.with_name(f"{base.name}-{attempt}")
    for sub in RUN_SUBDIRS:
        (run_dir / sub).mkdir(parents=True, exist_ok=True)
    config.write_config(cfg, run_dir / "config.ini")
    return run_dir


def run_dir_of(checkpoint_path: Path) -> Path:
    parent = checkpoint_path.resolve().parent
    return parent.parent if parent.name == "checkpoints" else parent


def _ensure_config_beside(cfg: config.RunConfig, directory: Path):
    target = directory / "config.ini"
    if not target.exists():
        config.write_config(cfg, target)


def _load_splits(cfg: config.RunConfig) -> Tuple[Dataset, Dataset]:
    data_dir = require_data_dir(cfg)
    return load_dataset(cfg.dataset, data_dir, "train"), load_dataset(cfg.dataset, data_dir, "test")


def cmd_train(args: argparse.Namespace) -> int:
    """Train one model; writes checkpoints, the loss log and the held-out curve under a new run dir"""
    cfg = resolve_config(args, {
        "dataset": args.dataset, "mode": args.mode, "epochs": args.epochs, "batch_size": args.batch_size,
        "sigma": args.sigma, "levels": args.levels, "level": _train_level(args.level), "subset": args.subset,
        "flip": True if args.mnist_flip else None,
    })
    data_dir = require_data_dir(cfg)
    dataset = load_dataset(cfg.dataset, data_dir, "train").subset(cfg.subset)
    if len(dataset) == 0:
        raise MissingDataError(f"{cfg.dataset} train split is empty")
    train_set, held_out = dataset.split_off(cfg.held_out_size) if cfg.held_out_size else (dataset, None)
    if len(train_set) == 0:
        raise MissingDataError(f"No training images left: {len(dataset)} loaded, held_out_size = {cfg.held_out_size}")

    run_dir = make_run_dir(cfg)
    params = init_params(cfg.arch(), cfg.seed)
    fingerprint = cfg.fingerprint()
    progress_callback(f"Run {run_dir} | mode={cfg.mode} dataset={cfg.dataset} train={len(train_set)} "
                      f"held-out={len(held_out) if held_out is not None else 0} epochs={cfg.epochs}")

    def on_epoch_end(epoch, current, state):
        if cfg.checkpoint_every and epoch % cfg.checkpoint_every == 0:
            save_checkpoint(Checkpoint(current, epoch, cfg.to_dict(), fingerprint, state),
                            run_dir / "checkpoints" / f"epoch-{epoch:03d}.lapd")

    try:
        result = train(params, train_set.images, cfg.train_config(),
                       held_out=held_out.images if held_out is not None else None,
                       log_path=run_dir / "logs" / "loss.csv",
                       on_epoch_end=on_epoch_end, progress_callback=progress_callback)
    except NonFiniteLossError as e:
        if e.last_good is not None:
            save_checkpoint(Checkpoint(e.last_good, e.epoch, cfg.to_dict(), fingerprint, e.state),
                            run_dir / "checkpoints" / "last_good.lapd")
        raise

    result.held_out.to_csv(run_dir / "logs" / "held_out.csv", index=False)
    final = save_checkpoint(Checkpoint(result.params, cfg.epochs, cfg.to_dict(), fingerprint, result.state),
                            run_dir / "checkpoints" / "final.lapd")
    progress_callback(colored(f"Training finished: {final}", "green"))
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    """Run the selected metrics on the test split and write the EvalReport CSV"""
    checkpoint_path = Path(args.checkpoint)
    ckpt = load_checkpoint(checkpoint_path)
    metrics = tuple(parse_metrics(args.metrics)) if args.metrics else None
    cfg = resolve_config(args, {
        "test_subset": args.subset, "k": args.k, "levels": args.levels, "sigma": args.sigma,
        "layers": config.parse_layers(args.layer) if args.layer else None, "metrics": metrics,
    }, base=ckpt.run_config)
    metrics = list(cfg.metrics)
    train_split, test_split = _load_splits(cfg)
    test_split = test_split.subset(cfg.test_subset)

    out = Path(args.out) if args.out else run_dir_of(checkpoint_path) / "reports" / f"eval-{checkpoint_path.stem}.csv"
    images_dir = out.parent.parent / "images" if out.parent.name == "reports" else out.parent
    fingerprint = ckpt.params.fingerprint()
    spec = CorruptionSpec(sigma=cfg.sigma)
    report = EvalReport()

    for metric in metrics:
        if metric == "recon":
            for corruption in RECON_CORRUPTIONS:
                value = reconstruction_mse(ckpt.params, test_split, corruption, spec, cfg.levels, cfg.seed)
                report.add(f"recon_mse_{corruption}", "test", "output", value, fingerprint, cfg.seed)
                reconstruction_grid(ckpt.params, test_split, corruption, images_dir / f"recon_{corruption}.png",
                                    spec, cfg.levels, cfg.seed)
        elif metric == "knn":
            for layer in cfg.layers:
                result = knn_retrieval(ckpt.params, test_split, cfg.k, layer, cfg.queries, cfg.seed, cfg.distance,
                                       cfg.budget, cfg.workers, grid_path=images_dir / f"retrieval_{layer}.png")
                report.add(f"precision@{cfg.k}", "test", layer, result.precision, fingerprint, cfg.seed)
        elif metric == "probe":
            probe_train = train_split.subset(cfg.probe_train_size)
            for layer in cfg.layers:
                result = linear_probe(ckpt.params, probe_train, test_split, layer, cfg.budget, cfg.probe_epochs,
                                      cfg.probe_lr, seed=cfg.seed, workers=cfg.workers)
                report.add("probe_top1", "test", layer, result.accuracy, fingerprint, cfg.seed)

    report.to_csv(out)
    _ensure_config_beside(cfg, out.parent)
    print(report.table())
    progress_callback(colored(f"Report written to {out}", "green"))
    return 0


def _corruption_source(args: argparse.Namespace, cfg: config.RunConfig) -> Tuple[object, str]:
    if args.image:
        return read_image(args.image), Path(args.image).stem
    data_dir = require_data_dir(cfg)
    dataset = load_dataset(cfg.dataset, data_dir, args.split)
    if not 0 <= args.index < len(dataset):
        raise UsageError(f"--index {args.index} out of range; valid indices are 0..{len(dataset) - 1}")
    return dataset.images[args.index], f"{cfg.dataset}-{args.split}-{args.index}"


def cmd_corrupt(args: argparse.Namespace) -> int:
    """Write the clean image and one corrupted image per requested level, plus a comparison grid"""
    cfg = resolve_config(args, {"dataset": args.dataset, "sigma": args.sigma, "levels": args.levels})
    levels = parse_level_range(args.level) if args.kind != SPATIAL else [RANDOM_LEVEL]
    image, stem = _corruption_source(args, cfg)
    depth = clamp_levels(cfg.levels, image.shape[-2], image.shape[-1])
    out_of_range = [level for level in levels if level != RANDOM_LEVEL and not 0 <= level < depth]
    if out_of_range:
        raise UsageError(f"Corruption level(s) {', '.join(map(str, out_of_range))} out of range; "
                         f"valid levels are 0..{depth - 1}")
    out_dir = Path(args.out or "corrupted")
    suffix = args.format or (".pgm" if image.shape[0] == 1 else ".ppm")
    if not suffix.startswith("."):
        suffix = f".{suffix}"

    outputs = [(f"{stem}_clean{suffix}", image)]
    for level in levels:
        if args.kind == SPATIAL:
            corrupted, tag = spatial_corrupt(image, cfg.sigma, cfg.seed), "spatial"
        else:
            spec = CorruptionSpec(level=level, sigma=cfg.sigma, seed=cfg.seed, level_scale=cfg.level_sigma_scale)
            corrupted, realized = lap_corrupt(image, spec, depth)
            tag = f"L{realized}"
        outputs.append((f"{stem}_{tag}{suffix}", corrupted))

    written = [save_image(pixels, out_dir / name) for name, pixels in outputs]
    save_image(stack_rows([[pixels for _, pixels in outputs]]), out_dir / f"{stem}_grid.png")
    _ensure_config_beside(cfg, out_dir)
    for path in written:
        progress_callback(f"wrote {path}")
    return 0


def cmd_export(args: argparse.Namespace) -> int:
    """Dispatch to the embedding or kernel exporter"""
    checkpoint_path = Path(args.checkpoint)
    ckpt = load_checkpoint(checkpoint_path)
    cfg = resolve_config(args, {"test_subset": args.subset}, base=ckpt.run_config)
    run_dir = run_dir_of(checkpoint_path)
    fingerprint = ckpt.params.fingerprint()

    if args.what == "kernels":
        out = Path(args.out) if args.out else run_dir / "images" / f"kernels-{checkpoint_path.stem}.png"
        grid = dump_first_layer_kernels(ckpt.params, out, scale=args.scale)
        progress_callback(f"wrote {out} ({grid.shape[2]}x{grid.shape[1]} before scaling)")
        _ensure_config_beside(cfg, out.parent)
        return 0

    layers = config.parse_layers(args.layer) if args.layer else cfg.layers
    test_split = load_dataset(cfg.dataset, require_data_dir(cfg), "test").subset(cfg.test_subset)
    for layer in layers:
        if args.out and len(layers) == 1:
            out = Path(args.out)
        else:
            base = Path(args.out) if args.out else run_dir / "reports"
            out = base / f"embeddings-{layer}-{checkpoint_path.stem}.tsv"
        export_embeddings(ckpt.params, test_split, layer, out, fingerprint, cfg.budget, cfg.workers)
        _ensure_config_beside(cfg, out.parent)
        progress_callback(f"wrote {out}")
    return 0


COMMANDS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "corrupt": cmd_corrupt,
    "export": cmd_export,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI run configuration (see configuration.ini)")
    common.add_argument("--data-dir", help=f"Dataset directory (falls back to [data] data_dir, then {config.DATA_DIR_ENV})")
    common.add_argument("--seed", type=int)
    common.add_argument("--workers", type=int, help="Thread pool size for corruption and embedding extraction")
    common.add_argument("--log-level", choices=config.LOG_LEVELS, type=str.upper)

    parser = argparse.ArgumentParser(prog="lapdae", description="Laplacian denoising autoencoder toolkit")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", parents=[common], help="Train an autoencoder")
    p.add_argument("--dataset", choices=sorted(config.DEFAULT_EPOCHS))
    p.add_argument("--mode", choices=list(MODES))
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--sigma", type=float, help="Noise std on the 0-255 scale")
    p.add_argument("--levels", type=int, help="Pyramid depth")
    p.add_argument("--level", help="Corrupted level: index or 'random'")
    p.add_argument("--subset", type=int, help="Use only the first N training images")
    p.add_argument("--mnist-flip", action="store_true", help="Enable horizontal flips on MNIST")

    p = sub.add_parser("eval", parents=[common], help="Evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--metrics", help=f"Comma list of {', '.join(METRICS)}")
    p.add_argument("--layer", help="Layer tag or range, e.g. bottleneck, conv1..bottleneck, pixels")
    p.add_argument("--k", type=int)
    p.add_argument("--sigma", type=float)
    p.add_argument("--levels", type=int)
    p.add_argument("--subset", type=int, help="Use only the first N test images")
    p.add_argument("--out", help="Report CSV path")

    p = sub.add_parser("corrupt", parents=[common], help="Write corrupted versions of one image")
    source = p.add_mutually_exclusive_group()
    source.add_argument("--image", help="PGM/PPM/PNG input image")
    source.add_argument("--index", type=int, default=0, help="Dataset sample index")
    p.add_argument("--dataset", choices=sorted(config.DEFAULT_EPOCHS))
    p.add_argument("--split", choices=("train", "test"), default="test")
    p.add_argument("--kind", choices=("laplacian", "spatial"), default="laplacian")
    p.add_argument("--level", help="random, N, A..B or A,B,C")
    p.add_argument("--levels", type=int)
    p.add_argument("--sigma", type=float)
    p.add_argument("--format", help="Output suffix (pgm, ppm, png); default pgm/ppm by channel count")
    p.add_argument("--out", help="Output directory")

    p = sub.add_parser("export", parents=[common], help="Export embeddings or first-layer kernels")
    p.add_argument("what", choices=EXPORT_TARGETS)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--layer", help="Layer tag or range for embeddings")
    p.add_argument("--subset", type=int, help="Use only the first N test images")
    p.add_argument("--scale", type=int, default=8, help="Pixel upscaling of the kernel grid")
    p.add_argument("--out", help="Output file (or directory for several layers)")
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    configure_logging(args.log_level)
    try:
        return COMMANDS[args.command](args)
    except LapDAEError as e:
        print(colored(f"error ({type(e).__name__}): {e}", "red"), file=sys.stderr)
        return e.exit_code


if __name__ == "__main__":
    sys.exit(main())
