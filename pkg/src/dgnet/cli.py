"""``dgnet`` command line: split, train, enhance, evaluate, ablate, bench, synth.

Exit codes: 0 success, 2 configuration or usage error, 3 numerical failure, 4 IO error.
"""
from __future__ import annotations

import argparse
import logging
import math
import statistics
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import tensor as T
from .config import KNOWN_KEYS, RunConfig
from .data import (IMAGE_SUFFIXES, DatasetIndex, SplitSpec, index_directory, load_image, read_manifest,
                   save_image, split_dataset, worker_count, write_manifest)
from .errors import ConfigurationError, DGNetError, DimensionError, NumericalError, UsageError, ValidationError
from .metrics import FULL_REFERENCE, NO_REFERENCE, MetricReport, evaluate_image
from .nn import ARCH_ARMS, DGNet
from .tensor import Tensor
from .trainer import TrainConfig, Trainer, load_checkpoint, load_model, save_checkpoint, use_weights

log = logging.getLogger("dgnet")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4

LOSS_ARMS = {
    "wo_l1": ("loss.alpha=0",),
    "wo_ssim": ("loss.beta=0",),
    "wo_ld": ("loss.gamma=0",),
}
ABLATION_ARMS = ARCH_ARMS + tuple(LOSS_ARMS)


class ExitError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


# ---------------------------------------------------------------------------
# helpers


def _list_images(folder: Path) -> dict[str, Path]:
    if not folder.is_dir():
        raise OSError(f"{folder} is not a directory")
    return {p.name: p for p in sorted(folder.iterdir()) if p.suffix.lower() in IMAGE_SUFFIXES}


def _pad_to_multiple(arr: np.ndarray, multiple: int = 8, minimum: int = 16) -> tuple[np.ndarray, tuple[int, int]]:
    h, w = arr.shape[-2:]
    th = max(minimum, -(-h // multiple) * multiple)
    tw = max(minimum, -(-w // multiple) * multiple)
    mode = "reflect" if th - h < h and tw - w < w else "edge"
    padded = np.pad(arr, ((0, 0), (0, 0), (0, th - h), (0, tw - w)), mode=mode)
    return padded, (h, w)


def enhance_array(model: DGNet, image: Tensor) -> Tensor:
    """Pad to an 8-divisible size, run the model, crop back to the input size."""
    padded, (h, w) = _pad_to_multiple(image.data)
    with T.no_grad():
        out = model(Tensor(padded))
    return Tensor(out.data[..., :h, :w].copy())


def _map_sorted(fn, items, threads: int | None = None):
    """Run ``fn`` over items in worker threads; results keep the input (sorted) order."""
    with ThreadPoolExecutor(max_workers=worker_count(threads)) as pool:
        return list(pool.map(fn, items))


def _load_dataset(data: str, manifest: str | None) -> DatasetIndex:
    return read_manifest(manifest, data) if manifest else index_directory(data)


def _run_config(args) -> RunConfig:
    return RunConfig.load(getattr(args, "config", None), getattr(args, "set", None) or (),
                          getattr(args, "variant", None))


def _base_train_config(args) -> TrainConfig:
    return TrainConfig.desk() if getattr(args, "profile", "full") == "desk" else TrainConfig()


# ---------------------------------------------------------------------------
# commands


def cmd_split(args) -> int:
    index = index_directory(args.data)
    train, val = split_dataset(index, SplitSpec(args.train, args.val, args.seed))
    out = Path(args.out)
    write_manifest(train, out / "train.txt")
    write_manifest(val, out / "val.txt")
    print(f"train: {len(train)} -> {out / 'train.txt'}")
    print(f"val: {len(val)} -> {out / 'val.txt'}")
    return EXIT_OK


def cmd_train(args) -> int:
    rc = _run_config(args)
    base = _base_train_config(args)
    tconf, mconf = rc.train_config(base), rc.model_config()
    log.info("effective config:\n%s", rc.echo(base).rstrip())
    train = _load_dataset(args.data, args.train_manifest)
    val = _load_dataset(args.data, args.val_manifest) if args.val_manifest else None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.resume:
        trainer = load_checkpoint(args.resume, mconf, train, val, tconf, log_path=out / "train.log")
    else:
        trainer = Trainer(mconf, tconf, train, val, log_path=out / "train.log")
    log.info("model %s: %d parameters", mconf.variant, trainer.model.param_count())
    best = -math.inf

    def on_epoch(epoch: int) -> None:
        nonlocal best
        if val is None or epoch % tconf.val_every:
            return
        agg = trainer.validate().aggregate()
        log.info("epoch %d step %d: val psnr %.3f ssim %.4f", epoch, trainer.step, agg["psnr"], agg["ssim"])
        if agg["psnr"] > best:
            best = agg["psnr"]
            save_checkpoint(trainer, out / "best.dgn")

    trainer.run(max_steps=args.max_steps, on_step=lambda r: log.debug("step %d total %.5f", r.step, r.total),
                on_epoch=on_epoch)
    save_checkpoint(trainer, out / "last.dgn")
    print(f"trained {trainer.step} steps -> {out / 'last.dgn'}")
    return EXIT_OK


def _require_checkpoint(path: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise ConfigurationError(f"checkpoint {p} not found")
    return p


def cmd_enhance(args) -> int:
    model, ema = load_model(_require_checkpoint(args.ckpt))
    model.eval()
    src, dst = Path(args.input), Path(args.output)
    if src.is_dir():
        jobs = [(p, dst / (p.stem + ".png")) for p in _list_images(src).values()]
    else:
        jobs = [(src, dst if dst.suffix else dst / (src.stem + ".png"))]

    def run(job):
        image = load_image(job[0])
        save_image(enhance_array(model, image), job[1])
        return job[1]

    with use_weights(model, ema):
        written = _map_sorted(run, jobs, args.threads)
    for p in written:
        print(p)
    return EXIT_OK


def cmd_evaluate(args) -> int:
    if args.raw:
        preds = _list_images(Path(args.raw))
        refs, columns, missing = None, NO_REFERENCE, []
        names = sorted(preds)
    else:
        if not (args.pred and args.ref):
            raise UsageError("evaluate needs --pred and --ref, or --raw")
        preds, refs = _list_images(Path(args.pred)), _list_images(Path(args.ref))
        columns = FULL_REFERENCE + NO_REFERENCE
        names = sorted(set(preds) & set(refs))
        missing = sorted(set(preds) ^ set(refs))

    def score(name):
        pred = load_image(preds[name])
        ref = load_image(refs[name]) if refs is not None else None
        if ref is not None and ref.shape != pred.shape:
            raise DimensionError(f"{name}: prediction {pred.shape[2:]} vs reference {ref.shape[2:]}")
        return evaluate_image(pred, ref)

    report = MetricReport(columns)
    for name, values in zip(names, _map_sorted(score, names, args.threads)):
        report.add(Path(name).stem, values)
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        with open(args.out, "w", newline="") as fh:
            report.write_csv(fh)
    else:
        report.write_csv(sys.stdout)
    if missing:
        for name in missing:
            print(f"unmatched: {name}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


def cmd_ablate(args) -> int:
    if args.list:
        print("\n".join(ABLATION_ARMS))
        return EXIT_OK
    if args.arm not in ABLATION_ARMS:
        raise ConfigurationError(f"unknown arm {args.arm!r}; valid arms: {', '.join(ABLATION_ARMS)}")
    extra = list(args.set or ())
    if args.arm in LOSS_ARMS:
        extra += LOSS_ARMS[args.arm]
    else:
        extra.append(f"model.ablation={args.arm}")
    rc = RunConfig.load(args.config, extra, args.variant)
    base = _base_train_config(args)
    tconf, mconf = rc.train_config(base), rc.model_config()
    log.info("effective config:\n%s", rc.echo(base).rstrip())
    print(audit_line(args.arm, DGNet(mconf, seed=tconf.seed)))
    if not args.data:
        return EXIT_OK
    train = _load_dataset(args.data, args.train_manifest)
    val = _load_dataset(args.data, args.val_manifest) if args.val_manifest else train
    trainer = Trainer(mconf, tconf, train, val)
    trainer.run(max_steps=args.steps)
    report = trainer.validate()
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / f"{args.arm}.csv").write_text(report.to_csv())
        save_checkpoint(trainer, out / f"{args.arm}.dgn")
    agg = report.aggregate()
    print(f"{args.arm}: steps {trainer.step} psnr {agg['psnr']:.3f} ssim {agg['ssim']:.4f} uiqm {agg['uiqm']:.3f}")
    return EXIT_OK


def audit_line(arm: str, model: DGNet) -> str:
    counts = model.module_counts()
    line = f"{arm}: total {model.param_count()} params"
    ref = model.reference_counts
    for key in ("frr", "frs"):
        if arm in (f"instead_{key}", "instead_all"):
            got, want = counts[key], ref[key]
            line += f"; {key} replacement {got} vs original {want} ({100 * (got - want) / want:+.2f}%)"
    return line


def cmd_bench(args) -> int:
    model, ema = load_model(_require_checkpoint(args.ckpt))
    model.eval()
    try:
        w, h = (int(s) for s in args.size.lower().split("x"))
    except ValueError:
        raise ConfigurationError(f"--size must look like WIDTHxHEIGHT, got {args.size!r}") from None
    if args.iters < 1 or args.warmup < 0:
        raise ConfigurationError("--iters must be >= 1 and --warmup >= 0")
    image = Tensor(np.random.default_rng(0).random((1, 3, h, w)))
    times = []
    with use_weights(model, ema):
        for k in range(args.warmup + args.iters):
            t0 = time.perf_counter()
            enhance_array(model, image)
            if k >= args.warmup:
                times.append(time.perf_counter() - t0)
    wall = sum(times)
    print(f"size {w}x{h} iters {args.iters} warmup {args.warmup}")
    print(f"mean latency {1000 * statistics.fmean(times):.2f} ms")
    print(f"median latency {1000 * statistics.median(times):.2f} ms")
    print(f"throughput {args.iters / wall:.4f} images/s")
    return EXIT_OK


def cmd_synth(args) -> int:
    from .synthetic import write_dataset

    root = write_dataset(args.out, args.count, args.size, args.seed)
    print(f"wrote {args.count} pairs to {root}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def _add_run_config(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key=value file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key (repeatable)")
    p.add_argument("--variant", choices=("s", "l"), help="model size preset")
    p.add_argument("--profile", choices=("full", "desk"), default="full",
                   help="defaults before overrides: full (300 epochs) or desk (20 epochs, 48->96 px)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dgnet", description="Underwater image enhancement toolkit.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("split", help="seeded train/val split into manifests")
    p.add_argument("--data", required=True)
    p.add_argument("--train", type=int, default=800)
    p.add_argument("--val", type=int, default=90)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="manifests")
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("train", help="train a model")
    _add_run_config(p)
    p.add_argument("--data", required=True)
    p.add_argument("--train-manifest")
    p.add_argument("--val-manifest")
    p.add_argument("--max-steps", type=int)
    p.add_argument("--resume")
    p.add_argument("--out", default="ckpt")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("enhance", help="enhance an image or a directory of images")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", dest="output", required=True)
    p.add_argument("--threads", type=int)
    p.set_defaults(func=cmd_enhance)

    p = sub.add_parser("evaluate", help="metric report as CSV")
    p.add_argument("--pred")
    p.add_argument("--ref")
    p.add_argument("--raw", help="no-reference mode")
    p.add_argument("--out")
    p.add_argument("--threads", type=int)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("ablate", help="build, train and evaluate one ablation arm")
    _add_run_config(p)
    p.add_argument("--arm", default="full")
    p.add_argument("--list", action="store_true", help="print the arm names and exit")
    p.add_argument("--data")
    p.add_argument("--train-manifest")
    p.add_argument("--val-manifest")
    p.add_argument("--steps", type=int, default=10)
    p.add_argument("--out")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("bench", help="inference latency and throughput")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--size", default="854x480")
    p.add_argument("--iters", type=int, default=10)
    p.add_argument("--warmup", type=int, default=2)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("synth", help="write the synthetic paired dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, default=24)
    p.add_argument("--size", type=int, default=96)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code in (0, None) else EXIT_CONFIG
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except NumericalError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigurationError, UsageError, ValidationError, DimensionError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except DGNetError as exc:  # pragma: no cover - every subclass is mapped above
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
