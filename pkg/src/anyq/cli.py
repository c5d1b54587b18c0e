"""``anyq`` command line: calibrate, quantize, dequantize, eval, bench, inspect.

Exit status is 0 on success, 1 for usage errors (bad flags, checked before
any work) and 2 for data errors (unreadable or inconsistent inputs).
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from typing import Optional

import numpy as np

from . import calibration, codebooks, pack, qgemm
from .core import AnyqError, ConfigError, Init, LearnerConfig, QuantConfig, Weighting, format_config
from .tensorio import read_tensor, write_tensor

FORMATS = ("int4", "fp4", "nf4", "any4", "any3", "any2")
EVAL_FORMATS = FORMATS + ("int3", "int2", "int8")
INITS = {i.value: i for i in Init}
WEIGHTINGS = {"weights": Weighting.WEIGHTS_ONLY, "weights-acts": Weighting.WEIGHTS_ACTIVATIONS,
              "weights-acts-scales": Weighting.WEIGHTS_ACTIVATIONS_SCALES}


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _positive_int(flag):
    def parse(text):
        try:
            v = int(text)
        except ValueError:
            raise argparse.ArgumentTypeError(f"{flag} expects an integer, got {text!r}") from None
        if v < 0:
            raise argparse.ArgumentTypeError(f"{flag} must be non-negative, got {v}")
        return v
    return parse


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="anyq", description="Learned-LUT and fixed-codebook weight quantization.")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    c = sub.add_parser("calibrate", help="collect per-channel mean |activation| from a toy model")
    c.add_argument("--model", required=True, help="toy model JSON")
    c.add_argument("--inputs", required=True, help="dense M x input_dim tensor file")
    c.add_argument("--out", required=True, help="stats file to write")
    c.add_argument("--source", default=None, help="free-form description stored in the stats header")

    q = sub.add_parser("quantize", help="quantize a dense weight matrix to an ANYQ file")
    q.add_argument("--weights", required=True)
    q.add_argument("--format", default=None, help="|".join(FORMATS))
    q.add_argument("--group-size", type=_positive_int("--group-size"), default=None, help="0 selects rowwise scaling")
    q.add_argument("--symmetric", action="store_true", default=None)
    q.add_argument("--stats", default=None, help="activation stats file (learned formats)")
    q.add_argument("--module", default=None, help="stats entry to use; defaults to the only entry")
    q.add_argument("--seed", type=_positive_int("--seed"), default=None)
    q.add_argument("--out", required=True)
    q.add_argument("--layout", choices=("row", "ktiled"), default=None)
    q.add_argument("--tile-k", type=_positive_int("--tile-k"), default=None)
    q.add_argument("--lut-dtype", choices=("fp16", "bf16"), default=None)
    q.add_argument("--scale-dtype", choices=("fp16", "bf16", "fp32"), default=None)
    q.add_argument("--int-range", choices=("standard", "shifted"), default=None)
    q.add_argument("--init", choices=sorted(INITS), default=None)
    q.add_argument("--weighting", choices=sorted(WEIGHTINGS), default=None)
    q.add_argument("--restarts", type=_positive_int("--restarts"), default=None)
    q.add_argument("--max-iters", type=_positive_int("--max-iters"), default=None)
    q.add_argument("--threads", type=_positive_int("--threads"), default=None)
    q.add_argument("--config", default=None, help="JSON file of flag defaults; explicit flags win")

    d = sub.add_parser("dequantize", help="decode an ANYQ file to a dense tensor")
    d.add_argument("--in", dest="input", required=True)
    d.add_argument("--out", required=True)

    e = sub.add_parser("eval", help="compare formats on one weight matrix")
    e.add_argument("--weights", required=True)
    e.add_argument("--formats", default="int4,fp4,nf4,any4")
    e.add_argument("--stats", default=None)
    e.add_argument("--module", default=None)
    e.add_argument("--inputs", default=None, help="evaluation activations; default: synthetic from stats")
    e.add_argument("--group-size", type=_positive_int("--group-size"), default=128)
    e.add_argument("--symmetric", action="store_true")
    e.add_argument("--seed", type=_positive_int("--seed"), default=0)
    e.add_argument("--emit", choices=("csv", "json"), default="csv")
    e.add_argument("--out", default=None, help="write the report here instead of stdout")

    b = sub.add_parser("bench", help="time fused LUT GEMM against dense fp32")
    b.add_argument("--shapes", default="1x1024x1024", help="comma-separated MxNxK")
    b.add_argument("--formats", default="int4,nf4,any4")
    b.add_argument("--repeats", type=_positive_int("--repeats"), default=10)
    b.add_argument("--group-size", type=_positive_int("--group-size"), default=128)
    b.add_argument("--layout", choices=("row", "ktiled"), default="row")
    b.add_argument("--tile-k", type=_positive_int("--tile-k"), default=8)
    b.add_argument("--out", default=None)

    i = sub.add_parser("inspect", help="print an ANYQ header and size accounting, or a codebook")
    src = i.add_mutually_exclusive_group(required=True)
    src.add_argument("--in", dest="input")
    src.add_argument("--codebook", choices=("int2", "int3", "int4", "int8", "fp4", "nf4"))
    return p


def _split(text: str, allowed, flag: str) -> list[str]:
    items = [t.strip().lower() for t in text.split(",") if t.strip()]
    if not items:
        raise UsageError(f"{flag}: empty list")
    for t in items:
        if t not in allowed:
            raise UsageError(f"{flag}: unknown format {t!r}; expected one of {', '.join(allowed)}")
    return items


def _load(fn, path, what):
    try:
        return fn(path)
    except FileNotFoundError:
        raise DataError(f"{what} file not found: {path}") from None
    except (AnyqError, OSError, ValueError, KeyError) as exc:
        raise DataError(f"cannot read {what} {path}: {exc}") from exc


def _pick_stats(stats: calibration.ActivationStats, module: Optional[str], k: int, flag="--module") -> np.ndarray:
    if module is None:
        if len(stats.entries) != 1:
            raise UsageError(f"{flag}: stats file has {len(stats.entries)} entries, pick one of {list(stats.entries)}")
        module = next(iter(stats.entries))
    try:
        return stats.vector_for(module, k)
    except KeyError as exc:
        raise UsageError(f"{flag}: {exc.args[0]}") from None
    except ValueError as exc:
        raise DataError(str(exc)) from None


_QUANT_DEFAULTS = dict(format="any4", group_size=128, symmetric=False, seed=0, layout="row", tile_k=8,
                       lut_dtype="fp16", scale_dtype="fp16", int_range="standard", init="kmeans++",
                       weighting="weights-acts-scales", restarts=1, max_iters=100, threads=None)


def _merge_config(args) -> dict:
    merged = dict(_QUANT_DEFAULTS)
    if args.config:
        try:
            with open(args.config) as fh:
                file_cfg = json.load(fh)
        except (OSError, ValueError) as exc:
            raise UsageError(f"--config: cannot read {args.config}: {exc}") from None
        for key, value in file_cfg.items():
            key = key.replace("-", "_")
            if key not in merged:
                raise UsageError(f"--config: unknown key {key!r}")
            merged[key] = value
    for key in merged:
        value = getattr(args, key, None)
        if value is not None:
            merged[key] = value
    return merged


def _quant_config(opts: dict) -> QuantConfig:
    fmt = str(opts["format"]).lower()
    if fmt not in FORMATS:
        raise UsageError(f"--format: unknown format {fmt!r}; expected one of {', '.join(FORMATS)}")
    if opts["init"] not in INITS:
        raise UsageError(f"--init: unknown init {opts['init']!r}")
    if opts["weighting"] not in WEIGHTINGS:
        raise UsageError(f"--weighting: unknown weighting {opts['weighting']!r}")
    gs = int(opts["group_size"])
    if gs == 1:
        raise UsageError("--group-size: must be 0 (rowwise) or >= 2")
    try:
        learner = LearnerConfig(init=INITS[opts["init"]], weighting=WEIGHTINGS[opts["weighting"]],
                                restarts=int(opts["restarts"]), max_iters=int(opts["max_iters"]))
        return format_config(fmt, gs or None, symmetric=bool(opts["symmetric"]), seed=int(opts["seed"]),
                             learner=learner, lut_dtype=opts["lut_dtype"], scale_dtype=opts["scale_dtype"],
                             int_range=opts["int_range"])
    except ConfigError as exc:
        raise UsageError(f"invalid option: {exc}") from None


def cmd_calibrate(args) -> int:
    def read_model(path):
        with open(path) as fh:
            return calibration.ToyModel.from_json(json.load(fh))

    model = _load(read_model, args.model, "model")
    inputs = _load(read_tensor, args.inputs, "inputs")
    try:
        stats = calibration.collect_stats(model, inputs, source=args.source or f"toy-model:{os.path.basename(args.model)}")
    except (AnyqError, ValueError) as exc:
        raise DataError(str(exc)) from exc
    calibration.save_stats(stats, args.out)
    return 0


def cmd_quantize(args) -> int:
    opts = _merge_config(args)
    cfg = _quant_config(opts)
    if opts["layout"] not in ("row", "ktiled"):
        raise UsageError(f"--layout: unknown layout {opts['layout']!r}")
    if opts["layout"] == "ktiled" and int(opts["tile_k"]) < 1:
        raise UsageError("--tile-k: must be >= 1")
    w = _load(read_tensor, args.weights, "weights")
    if w.ndim != 2:
        raise DataError(f"weights must be 2-D, got shape {w.shape}")
    vec = None
    if args.stats:
        stats = _load(calibration.load_stats, args.stats, "stats")
        vec = _pick_stats(stats, args.module, w.shape[1])
    from .quantize import quantize

    try:
        qt = quantize(w, cfg, vec, workers=opts["threads"])
        if opts["layout"] == "ktiled":
            qt = pack.to_ktiled(qt, int(opts["tile_k"]))
        data = pack.to_bytes(qt)
    except (AnyqError, ValueError) as exc:
        raise DataError(str(exc)) from exc
    pack.atomic_write(args.out, data)
    return 0


def cmd_dequantize(args) -> int:
    qt = _load(pack.read_file, args.input, "ANYQ")
    write_tensor(qt.dequantize(), args.out)
    return 0


def _emit(text: str, out: Optional[str]):
    if out:
        pack.atomic_write(out, text.encode("utf-8"))
    else:
        sys.stdout.write(text if text.endswith("\n") else text + "\n")


def cmd_eval(args) -> int:
    from .evaluation import compare_formats

    formats = _split(args.formats, EVAL_FORMATS, "--formats")
    if args.group_size == 1:
        raise UsageError("--group-size: must be 0 (rowwise) or >= 2")
    w = _load(read_tensor, args.weights, "weights")
    if w.ndim != 2:
        raise DataError(f"weights must be 2-D, got shape {w.shape}")
    vec = None
    module = args.module or "w"
    if args.stats:
        stats = _load(calibration.load_stats, args.stats, "stats")
        vec = _pick_stats(stats, args.module, w.shape[1])
        module = args.module or next(iter(stats.entries))
    x = _load(read_tensor, args.inputs, "inputs") if args.inputs else None
    base = QuantConfig(symmetric=args.symmetric, seed=args.seed)
    try:
        report = compare_formats(w, formats, base, vec, x, group_size=args.group_size or None, module=module)
    except (AnyqError, ValueError) as exc:
        raise DataError(str(exc)) from exc
    _emit(report.to_csv() if args.emit == "csv" else report.to_json(), args.out)
    return 0


def cmd_bench(args) -> int:
    try:
        shapes = [qgemm.parse_shape(s) for s in args.shapes.split(",") if s.strip()]
    except ValueError as exc:
        raise UsageError(f"--shapes: {exc}") from None
    formats = _split(args.formats, EVAL_FORMATS, "--formats")
    if args.repeats < 1:
        raise UsageError("--repeats: must be >= 1")
    rows = qgemm.bench(shapes, formats, args.repeats, args.group_size, args.layout, args.tile_k)
    _emit(qgemm.bench_csv(rows), args.out)
    for r in rows:
        if r.format != "fp32":
            print(f"{r.shape} {r.format}: bytes/weight {r.bytes_per_weight / 4.0:.6f} of fp32, "
                  f"time {r.ratio_vs_dense:.2f}x dense, {r.bytes_per_s / 1e9:.3f} GB/s", file=sys.stderr)
    return 0


def cmd_inspect(args) -> int:
    if args.codebook:
        name = args.codebook
        if name == "fp4":
            cb = codebooks.fp4_table()
        elif name == "nf4":
            cb = codebooks.nf4_table()
        else:
            cb = codebooks.int_grid(int(name[3:]))
        print(json.dumps(cb.to_dict(), indent=2))
        return 0
    try:
        with open(args.input, "rb") as fh:
            data = fh.read()
    except OSError as exc:
        raise DataError(f"cannot read ANYQ {args.input}: {exc}") from None
    try:
        qt = pack.from_bytes(data)
    except AnyqError as exc:
        raise DataError(f"cannot read ANYQ {args.input}: {type(exc).__name__}: {exc}") from exc
    cfg = qt.cfg
    n, k = qt.shape
    lines = [
        ("format", cfg.name),
        ("shape", f"{n}x{k}"),
        ("bits", cfg.bits),
        ("granularity", str(cfg.granularity)),
        ("symmetric", str(cfg.symmetric).lower()),
        ("int_range", cfg.int_range),
        ("layout", str(qt.layout)),
        ("lut_dtype", cfg.lut_dtype if cfg.codebook.value == "any" else "none"),
        ("scale_dtype", cfg.scale_dtype),
        ("seed", cfg.seed),
        ("groups", len(qt.alphas)),
        ("header_bytes", pack.HEADER_SIZE),
        ("file_bytes", len(data)),
        ("bits_per_entry", repr(codebooks.storage_bits_per_entry(cfg, n, k))),
        ("file_bits_per_entry", repr(pack.payload_bits_per_entry(len(data), n, k))),
    ]
    for key, value in lines:
        print(f"{key}: {value}")
    return 0


COMMANDS = {
    "calibrate": cmd_calibrate,
    "quantize": cmd_quantize,
    "dequantize": cmd_dequantize,
    "eval": cmd_eval,
    "bench": cmd_bench,
    "inspect": cmd_inspect,
}


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except (AnyqError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()

