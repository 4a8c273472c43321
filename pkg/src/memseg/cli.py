"""Command-line entry point: ``memseg gen|train|infer|eval|bench``.

Exit codes:
    0  success
    2  invalid config or arguments (including mismatched inputs)
    3  I/O error (missing/unreadable/unwritable files, corrupt manifest or image)
    4  memory budget exceeded (the report is still written)
    5  numeric failure (non-finite loss or activations)

Set MEMSEG_LOG=debug|info|warning to change verbosity; nothing else is read from
the environment.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import checkpoint, netpbm
from .config import ConfigError, RunConfig
from .data import ManifestError, generate_dataset
from .memtrack import BudgetExceeded
from .metrics import miou
from .tensor import NonFiniteError
from .tiling import MemoryReport, infer_global, infer_local

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_BUDGET, EXIT_NUMERIC = 0, 2, 3, 4, 5

log = logging.getLogger("memseg")


class CliError(Exception):
    def __init__(self, code: int, kind: str, message: str, **detail):
        self.code = code
        self.kind = kind
        self.detail = detail
        super().__init__(message)

    def to_dict(self) -> dict:
        return {"error": self.kind, "message": str(self), **self.detail}


def _dump(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True)


def _write(path: Path, data: bytes | str):
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        if isinstance(data, str):
            path.write_text(data)
        else:
            path.write_bytes(data)
    except OSError as e:
        raise CliError(EXIT_IO, "io", f"cannot write {path}: {e.strerror or e}") from None


def _read_image(path) -> np.ndarray:
    """PPM file -> (3, H, W) float64 in [0, 1]."""
    try:
        rgb = netpbm.read_ppm(path)
    except OSError as e:
        raise CliError(EXIT_IO, "io", f"cannot read {path}: {e.strerror or e}") from None
    except netpbm.NetpbmError as e:
        raise CliError(EXIT_IO, "image", f"{path}: {e}") from None
    return rgb.transpose(2, 0, 1).astype(np.float64) / 255.0


def _read_labels(path) -> np.ndarray:
    try:
        return netpbm.read_pgm(path)
    except OSError as e:
        raise CliError(EXIT_IO, "io", f"cannot read {path}: {e.strerror or e}") from None
    except netpbm.NetpbmError as e:
        raise CliError(EXIT_IO, "image", f"{path}: {e}") from None


def _load_ckpt(path):
    try:
        return checkpoint.load(path)
    except checkpoint.CheckpointError as e:
        raise CliError(EXIT_IO, "checkpoint", str(e)) from None


# ---------------------------------------------------------------- subcommands

def cmd_gen(args) -> int:
    if args.classes < 2:
        raise CliError(EXIT_CONFIG, "config", "--classes must be >= 2", key="classes")
    if args.scenes < 1 or args.size < 16:
        raise CliError(EXIT_CONFIG, "config", "--scenes must be >= 1 and --size >= 16", key="scenes")
    splits = tuple(float(v) for v in args.splits.split(","))
    try:
        path = generate_dataset(args.out, args.scenes, args.size, args.classes, args.seed, splits)
    except OSError as e:
        raise CliError(EXIT_IO, "io", f"cannot write dataset to {args.out}: {e.strerror or e}") from None
    except ValueError as e:
        raise CliError(EXIT_CONFIG, "config", str(e), key="splits") from None
    print(_dump({"manifest": str(path), "scenes": args.scenes}))
    return EXIT_OK


def cmd_train(args) -> int:
    from .train import TrainingDiverged, train

    try:
        cfg = RunConfig.load(args.config)
    except OSError as e:
        raise CliError(EXIT_IO, "io", f"cannot read config {args.config}: {e.strerror or e}") from None
    except ConfigError as e:
        raise CliError(EXIT_CONFIG, "config", str(e), key=e.key) from None
    root = Path(args.data) if args.data else Path(cfg.data.root)
    manifest = root / "manifest.json"
    out = Path(args.out)
    _write(out / "config.json", _dump(cfg.to_dict()) + "\n")
    try:
        _, record = train(cfg, manifest, out)
    except FileNotFoundError as e:
        raise CliError(EXIT_IO, "io", f"missing file: {e.filename or e}") from None
    except ManifestError as e:
        raise CliError(EXIT_IO, "manifest", str(e), path=str(manifest)) from None
    except TrainingDiverged as e:
        raise CliError(EXIT_NUMERIC, "diverged", str(e), iteration=e.iteration) from None
    except NonFiniteError as e:
        raise CliError(EXIT_NUMERIC, "numeric", str(e)) from None
    except BudgetExceeded as e:
        raise CliError(EXIT_BUDGET, "budget", str(e), stage=e.stage) from None
    print(_dump({"run": str(out / "run.json"), "checkpoint": str(out / "model.ckpt"),
                 "record_hash": record.digest(), "test_miou": record.test_miou}))
    return EXIT_OK


def _infer(model, header, image, args) -> tuple[np.ndarray, MemoryReport]:
    tiling = RunConfig.from_dict({"tiling": header["config"]["tiling"]}).tiling if header.get("config") else None
    chunk = args.chunk_rows or (tiling.chunk_rows if tiling else 32)
    if args.mode == "global":
        side = args.target_side or (tiling.target_side if tiling else 512)
        return infer_global(image, model, side, chunk, args.budget)
    patch = args.patch or (tiling.patch if tiling else 128)
    overlap = args.overlap if args.overlap is not None else patch // 16
    budget = args.budget or (tiling.budget_bytes if tiling else 256 * 2**20)
    return infer_local(image, model, budget, patch, overlap, chunk, args.workers)


def cmd_infer(args) -> int:
    model, header = _load_ckpt(args.ckpt)
    image = _read_image(args.image).astype(model.dtype)
    out = Path(args.out)
    report_path = Path(args.report) if args.report else out.with_suffix(".json")
    try:
        labels, report = _infer(model, header, image, args)
    except BudgetExceeded as e:
        doc = {"estimated_peak_bytes": None, "measured_peak_bytes": int(e.needed), "budget_bytes": int(e.budget),
               "within_budget": False, "per_stage": {e.stage: int(e.needed)}, "wall_time": 0.0,
               "error": str(e)}
        _write(report_path, _dump(doc) + "\n")
        raise CliError(EXIT_BUDGET, "budget", str(e), stage=e.stage, report=str(report_path)) from None
    except ValueError as e:
        raise CliError(EXIT_CONFIG, "config", str(e)) from None
    except NonFiniteError as e:
        raise CliError(EXIT_NUMERIC, "numeric", str(e)) from None
    _write(out, netpbm.encode_pgm(labels))
    _write(report_path, _dump(report.to_dict()) + "\n")
    print(_dump({"labels": str(out), "report": str(report_path), **report.to_dict()}))
    return EXIT_OK


def cmd_eval(args) -> int:
    pred, gt = _read_labels(args.pred), _read_labels(args.gt)
    if pred.shape != gt.shape:
        raise CliError(EXIT_CONFIG, "shape", f"prediction {pred.shape} and ground truth {gt.shape} differ")
    try:
        rep = miou(pred, gt, args.classes)
    except ValueError as e:
        raise CliError(EXIT_CONFIG, "labels", str(e)) from None
    print(_dump(rep.to_dict()))
    return EXIT_OK


BENCH_FIELDS = ("patch", "miou", "measured_peak_bytes", "estimated_peak_bytes", "within_budget", "wall_time")


def bench_rows(model, image: np.ndarray, gt: np.ndarray | None, patches, budget: int, chunk_rows: int,
               workers: int = 1) -> list[dict]:
    rows = []
    for p in patches:
        t0 = time.perf_counter()
        labels, rep = infer_local(image, model, budget, p, p // 16, chunk_rows, workers)
        score = miou(labels, gt, model.cfg.num_classes).miou if gt is not None else None
        rows.append({"patch": p, "miou": score, "measured_peak_bytes": rep.measured_peak_bytes,
                     "estimated_peak_bytes": rep.estimated_peak_bytes, "within_budget": rep.within_budget,
                     "wall_time": time.perf_counter() - t0})
    return rows


def cmd_bench(args) -> int:
    model, _ = _load_ckpt(args.ckpt)
    image = _read_image(args.image).astype(model.dtype)
    gt = _read_labels(args.gt) if args.gt else None
    if gt is not None and gt.shape != image.shape[1:]:
        raise CliError(EXIT_CONFIG, "shape", f"ground truth {gt.shape} does not match image {image.shape[1:]}")
    try:
        patches = [int(p) for p in args.patches.split(",") if p]
    except ValueError:
        raise CliError(EXIT_CONFIG, "config", f"--patches must be comma-separated integers, got {args.patches!r}",
                       key="patches") from None
    try:
        rows = bench_rows(model, image, gt, patches, args.budget, args.chunk_rows, args.workers)
    except BudgetExceeded as e:
        raise CliError(EXIT_BUDGET, "budget", str(e), stage=e.stage) from None
    except ValueError as e:
        raise CliError(EXIT_CONFIG, "config", str(e)) from None
    doc = {"ckpt": str(args.ckpt), "image": str(args.image), "budget_bytes": args.budget, "rows": rows}
    if args.out:
        out = Path(args.out)
        _write(out / "bench.json", _dump(doc) + "\n")
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=BENCH_FIELDS, lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
        _write(out / "bench.csv", buf.getvalue())
    print(_dump(doc))
    return EXIT_OK


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="memseg", description="Patch-wise segmentation with implicit decoding "
                                "and a class-prototype memory, on a numpy autograd engine.")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate a synthetic dataset and its split manifest")
    g.add_argument("--out", required=True)
    g.add_argument("--scenes", type=int, default=200)
    g.add_argument("--size", type=int, default=512)
    g.add_argument("--classes", type=int, default=8)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--splits", default="0.7,0.15,0.15")
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", help="train one configuration")
    t.add_argument("--config", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--data", help="dataset directory (overrides data.root)")
    t.set_defaults(func=cmd_train)

    i = sub.add_parser("infer", help="segment one PPM image")
    i.add_argument("--ckpt", required=True)
    i.add_argument("--image", required=True)
    i.add_argument("--out", required=True, help="output label PGM")
    i.add_argument("--report", help="MemoryReport JSON path (default: next to --out)")
    i.add_argument("--mode", choices=("local", "global"), default="local")
    i.add_argument("--patch", type=int)
    i.add_argument("--overlap", type=int)
    i.add_argument("--budget", type=int)
    i.add_argument("--chunk-rows", dest="chunk_rows", type=int)
    i.add_argument("--target-side", dest="target_side", type=int)
    i.add_argument("--workers", type=int, default=1)
    i.set_defaults(func=cmd_infer)

    e = sub.add_parser("eval", help="mIoU of a predicted label PGM against ground truth")
    e.add_argument("--pred", required=True)
    e.add_argument("--gt", required=True)
    e.add_argument("--classes", type=int, default=8)
    e.set_defaults(func=cmd_eval)

    b = sub.add_parser("bench", help="peak memory and mIoU over a sweep of patch sizes")
    b.add_argument("--ckpt", required=True)
    b.add_argument("--image", required=True)
    b.add_argument("--gt")
    b.add_argument("--patches", default="128,96,64")
    b.add_argument("--budget", type=int, default=256 * 2**20)
    b.add_argument("--chunk-rows", dest="chunk_rows", type=int, default=32)
    b.add_argument("--workers", type=int, default=1)
    b.add_argument("--out", help="directory for bench.json and bench.csv")
    b.set_defaults(func=cmd_bench)
    return p


def main(argv=None) -> int:
    level = os.environ.get("MEMSEG_LOG", "warning").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except CliError as e:
        print(_dump(e.to_dict()), file=sys.stderr)
        return e.code


if __name__ == "__main__":
    sys.exit(main())
