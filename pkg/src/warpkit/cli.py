"""Command-line front end.

Exit codes: 0 pass, 1 usage or parse error, 2 simulation timeout,
3 verification failure.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
import time
from dataclasses import asdict
from pathlib import Path

from . import isa
from .backend import emit_verilog, lint, size_report
from .checker import BoundExceeded, check_trace, exhaustive_pairs, fuzz
from .core import CoreConfig, ImageFormatError, build_design, read_image, simulate, write_image
from .harness import MalformedTrace, read_trace, write_trace
from .stagegraph import STAGES, Stage, StageError, StageMap

EXIT_OK, EXIT_USAGE, EXIT_TIMEOUT, EXIT_FAIL = 0, 1, 2, 3

_INT_KEYS = ("mem_latency", "mem_size", "max_cycles", "max_pending_loads")


class ConfigError(ValueError):
    pass


def parse_config(text: str, source: str = "config") -> CoreConfig:
    """Parse ``key=value`` lines into a :class:`CoreConfig`."""
    values: dict[str, int] = {}
    stage_keys: dict[Stage, int] = {}
    stages = None
    for lineno, line in enumerate(text.splitlines(), 1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        key, sep, raw = (part.strip() for part in body.partition("="))
        if not sep or not key:
            raise ConfigError(f"{source}:{lineno}: expected key=value, got {body!r}")
        try:
            value = int(raw, 0)
        except ValueError:
            raise ConfigError(f"{source}:{lineno}: {key} needs an integer, got {raw!r}") from None
        if key == "stages":
            stages = value
        elif key.startswith("stage."):
            name = key[len("stage."):].upper()
            if name not in Stage.__members__:
                raise ConfigError(f"{source}:{lineno}: unknown stage in key {key!r}")
            stage_keys[Stage[name]] = value
        elif key in _INT_KEYS:
            values[key] = value
        else:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
    try:
        if stage_keys:
            if stages is not None:
                raise ConfigError(f"{source}: give either stages= or stage.* keys, not both")
            missing = [s.name for s in STAGES if s not in stage_keys]
            if missing:
                raise ConfigError(f"{source}: stage map is missing {', '.join(missing)}")
            stage_map = StageMap.from_mapping(stage_keys, name=f"custom({Path(source).name})")
        else:
            stage_map = StageMap.preset(5 if stages is None else stages)
        return CoreConfig(stage_map=stage_map, **values)
    except (StageError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"{source}: {exc}") from None


def load_config(path: str | None) -> CoreConfig:
    if path is None:
        return CoreConfig()
    return parse_config(Path(path).read_text(), path)


def load_image(path: str) -> list[int]:
    with open(path) as fh:
        try:
            return read_image(fh)
        except ImageFormatError as exc:
            raise ImageFormatError(f"{path}: {exc}") from None


def _color() -> bool:
    return os.environ.get("WARPKIT_COLOR", "0") == "1"


def _write_json(path: str | None, obj) -> None:
    if path:
        Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


# --------------------------------------------------------------------------
# Commands

def cmd_run(args) -> int:
    config = load_config(args.config)
    image = load_image(args.image)
    trace, stats = simulate(config, image)
    if args.trace:
        with open(args.trace, "w") as fh:
            write_trace(trace.records, fh)
    print(f"config: {config.stage_map}, mem_latency={config.mem_latency}")
    for key, value in asdict(stats).items():
        print(f"{key}: {value}")
    _write_json(args.out, {"stats": asdict(stats), "complete": trace.complete})
    if not trace.complete:
        print(f"timeout after {stats.cycles} cycles; partial trace of {len(trace)} records", file=sys.stderr)
        return EXIT_TIMEOUT
    return EXIT_OK


def cmd_check(args) -> int:
    config = load_config(args.config)
    image = load_image(args.image)
    with open(args.trace) as fh:
        records = read_trace(fh)
    report = check_trace(records, image, config.mem_size)
    for v in report.violations:
        print(v)
    print(report.summary())
    _write_json(args.out, report.to_json())
    return EXIT_OK if report.passed else EXIT_FAIL


def cmd_fuzz(args) -> int:
    config = load_config(args.config)
    start = time.perf_counter()
    report = fuzz(config, args.seed, args.programs, args.length, jobs=args.jobs)
    for v in report.violations[:args.show]:
        print(v)
    print(f"seed {args.seed}: {report.summary()}")
    print(f"elapsed: {time.perf_counter() - start:.1f}s", file=sys.stderr)
    _write_json(args.out, {"seed": args.seed, "length": args.length, **report.to_json()})
    return EXIT_OK if report.passed else EXIT_FAIL


def cmd_pairs(args) -> int:
    config = load_config(args.config)
    kinds = [k.strip().upper() for k in args.kinds.split(",") if k.strip()]
    regs = [int(r) for r in args.regs.split(",") if r.strip()]
    imms = [int(i, 0) for i in args.imms.split(",") if i.strip()]
    start = time.perf_counter()
    report = exhaustive_pairs(config, kinds, regs, imms, bound=args.bound)
    elapsed = time.perf_counter() - start
    for v in report.violations[:args.show]:
        print(v)
    print(report.summary())
    print(f"sequences: {report.programs}, elapsed: {elapsed:.1f}s")
    _write_json(args.out, {"kinds": kinds, "regs": regs, "imms": imms, **report.to_json()})
    return EXIT_OK if report.passed else EXIT_FAIL


def cmd_gen(args) -> int:
    config = load_config(args.config)
    design = build_design(config)
    problems = lint(design)
    if problems:
        for p in problems:
            print(f"lint: {p}", file=sys.stderr)
        return EXIT_FAIL
    text = emit_verilog(design)
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    print(f"staging registers: {design.staging_registers} ({design.staging_bits} bits)", file=sys.stderr)
    return EXIT_OK


def cmd_report(args) -> int:
    if args.config:
        configs = [load_config(p) for p in args.config]
    else:
        configs = [CoreConfig(stage_map=StageMap.preset(n)) for n in (1, 5, 7)]
    report = size_report(configs)
    print(report.format_text(color=_color()))
    _write_json(args.out, report.to_json())
    return EXIT_OK


def cmd_asm(args) -> int:
    words = isa.assemble(Path(args.source).read_text())
    if args.out:
        with open(args.out, "w") as fh:
            write_image(words, fh)
    else:
        write_image(words, sys.stdout)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="warpkit", description="Stage-mapped RV32I core toolkit.")
    sub = p.add_subparsers(dest="command", required=True)

    def command(name, func, help_text):
        sp = sub.add_parser(name, help=help_text)
        sp.set_defaults(func=func)
        return sp

    sp = command("run", cmd_run, "simulate an image and write its RVFI trace")
    sp.add_argument("--config")
    sp.add_argument("--image", required=True)
    sp.add_argument("--trace")
    sp.add_argument("--out", help="write run statistics as JSON")

    sp = command("check", cmd_check, "check a trace against the golden model")
    sp.add_argument("--trace", required=True)
    sp.add_argument("--image", required=True)
    sp.add_argument("--config", help="only mem_size is used")
    sp.add_argument("--out", help="write the violation report as JSON")

    sp = command("fuzz", cmd_fuzz, "run random programs through simulation and checking")
    sp.add_argument("--config")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--programs", type=int, default=100)
    sp.add_argument("--length", type=int, default=100)
    sp.add_argument("--jobs", type=int, default=1)
    sp.add_argument("--show", type=int, default=20, help="violations to print")
    sp.add_argument("--out")

    sp = command("pairs", cmd_pairs, "check every two-instruction program over a small pool")
    sp.add_argument("--config")
    sp.add_argument("--kinds", default="ADDI,ADD,LW,SW,BEQ")
    sp.add_argument("--regs", default="1,2")
    sp.add_argument("--imms", default="0,1,-1")
    sp.add_argument("--bound", type=int, default=10 ** 6)
    sp.add_argument("--show", type=int, default=20)
    sp.add_argument("--out")

    sp = command("gen", cmd_gen, "emit Verilog for a configuration")
    sp.add_argument("--config")
    sp.add_argument("--out")

    sp = command("report", cmd_report, "size report across configurations")
    sp.add_argument("--config", action="append", help="repeatable; default: presets 1, 5, 7")
    sp.add_argument("--out")

    sp = command("asm", cmd_asm, "assemble a source file into a hex image")
    sp.add_argument("source")
    sp.add_argument("--out")
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    try:
        return args.func(args)
    except (ConfigError, ImageFormatError, MalformedTrace, isa.AssemblyError, BoundExceeded,
            OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
