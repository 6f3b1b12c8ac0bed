"""Command-line entry point.

Subcommands: train, eval, teacher-gen, decompose, visualize, gate-report,
ablate. Exit codes are part of the contract: 0 success, 1 usage error,
2 validation or format error, 3 runtime failure. Every error message names
the flag, file, or line it came from. All randomness flows from the
configured seed; no environment variables are consulted.
"""

from __future__ import annotations

import os

os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")
os.environ.setdefault("OMP_NUM_THREADS", "1")

import argparse  # noqa: E402
import sys  # noqa: E402
from pathlib import Path  # noqa: E402

import numpy as np  # noqa: E402

from .analysis import (  # noqa: E402
    AnnotationFormatError,
    evaluate,
    gate_trend,
    heatmap_pgm,
    human_map,
    read_annotation,
)
from .config import ConfigError, RunConfigFile, load_config  # noqa: E402
from .data import Dataset, gen_synthetic, load_dataset  # noqa: E402
from .interactions import MAX_VARS, format_table, harsanyi_and  # noqa: E402
from .model import CheckpointFormatError, load_checkpoint  # noqa: E402
from .teacher import TimFormatError, mask_teacher, read_tim, write_tim  # noqa: E402
from .training import ablate_grid, train  # noqa: E402

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_VALIDATION = 2
EXIT_RUNTIME = 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """argparse that reports usage problems through our exit-code scheme."""

    def error(self, message):  # noqa: D102
        raise UsageError(message)


def _build_parser() -> _Parser:
    p = _Parser(prog="ivit", description=__doc__)
    sub = p.add_subparsers(dest="command", metavar="COMMAND")

    t = sub.add_parser("train", help="run the configured training stage(s)")
    t.add_argument("--config", required=True, help="run configuration file")
    t.add_argument("--resume", help="checkpoint to continue from")
    t.add_argument("--out", default="run", help="output directory (default: run)")

    e = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True,
                   help="dataset directory or run configuration file")
    e.add_argument("--teachers", help="directory of per-sample TIM files")
    e.add_argument("--human", help="directory of per-sample annotation files")

    g = sub.add_parser("teacher-gen", help="write TIM files from ground-truth masks")
    g.add_argument("--data", required=True)
    g.add_argument("--out", required=True)
    g.add_argument("--sigma", type=float, default=None,
                   help="teacher noise (default: the dataset's noise_sigma)")

    d = sub.add_parser("decompose", help="emit the AND-interaction table of an oracle")
    d.add_argument("--n", type=int, required=True, help=f"variables, 1..{MAX_VARS}")
    d.add_argument("--oracle", required=True, choices=("addl", "and", "file"))
    d.add_argument("--file", help="oracle values, 2**n floats in bitmask order")

    v = sub.add_parser("visualize", help="render a TIM file as a portable graymap")
    v.add_argument("--tim", required=True)
    v.add_argument("--out", required=True)
    v.add_argument("--scale", choices=("map", "global"), default="map")
    v.add_argument("--upsample", type=int, default=8)

    r = sub.add_parser("gate-report", help="per-layer mean gate weights on a dataset")
    r.add_argument("--ckpt", required=True)
    r.add_argument("--data", required=True)

    a = sub.add_parser("ablate", help="run the 8-cell switch grid")
    a.add_argument("--config", required=True)
    a.add_argument("--grid", action="store_true",
                   help="run all switch combinations (required)")
    a.add_argument("--out", default="ablation", help="output directory")
    return p


def _load_run_config(path: str) -> RunConfigFile:
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"config file not found: {p}")
    return load_config(p)


def _load_data(arg: str) -> Dataset:
    """A dataset directory (manifest.txt) or a config file describing one."""
    p = Path(arg)
    if p.is_dir():
        return load_dataset(p)
    if not p.is_file():
        raise UsageError(f"--data path not found: {p}")
    cfgf = _load_run_config(arg)
    return _dataset_from_config(cfgf)


def _dataset_from_config(cfgf: RunConfigFile) -> Dataset:
    if cfgf.kind.startswith("dir:"):
        return load_dataset(cfgf.kind[len("dir:"):])
    return gen_synthetic(cfgf.run.data, cfgf.run.train.seed)


def _cmd_train(args) -> int:
    cfgf = _load_run_config(args.config)
    cfg = cfgf.run
    params = None
    if args.resume:
        rp = Path(args.resume)
        if not rp.is_file():
            raise UsageError(f"--resume checkpoint not found: {rp}")
        ck_cfg, params = load_checkpoint(rp)
        if ck_cfg != cfg.model:
            raise CheckpointFormatError(
                f"{rp}: checkpoint model {ck_cfg} does not match config model")
    ds = _dataset_from_config(cfgf)
    res = train(cfg, params=params, dataset=ds, out_dir=args.out,
                header=cfgf.echo_lines())
    last = res.history[-1]
    print(f"done steps={last.steps} train_acc={last.train_acc:.4f} "
          f"val_acc={last.val_acc:.4f} best_val={res.best_val:.4f} out={args.out}")
    return EXIT_OK


def _read_teacher_dir(path: str, ds: Dataset, indices: np.ndarray) -> np.ndarray:
    root = Path(path)
    if not root.is_dir():
        raise UsageError(f"--teachers directory not found: {root}")
    teachers = np.array(ds.teachers, copy=True)
    for i in indices:
        f = root / f"sample_{int(i):05d}.tim"
        if not f.is_file():
            raise TimFormatError(f"{f}: missing teacher for sample {int(i)} "
                                 "(index misalignment)")
        tmap = read_tim(f)
        if tmap.n != teachers.shape[1]:
            raise TimFormatError(f"{f}: {tmap.n} patches, dataset has "
                                 f"{teachers.shape[1]}")
        teachers[int(i)] = tmap.values
    return teachers


def _read_human_dir(path: str, indices: np.ndarray) -> dict:
    root = Path(path)
    if not root.is_dir():
        raise UsageError(f"--human directory not found: {root}")
    humans = {}
    for i in indices:
        f = root / f"ann_{int(i):05d}.txt"
        if f.is_file():
            humans[int(i)] = human_map(read_annotation(f))
    if not humans:
        raise AnnotationFormatError(f"{root}: no ann_XXXXX.txt files match the "
                                    "evaluated samples")
    return humans


def _cmd_eval(args) -> int:
    cfg_model, params = load_checkpoint(args.ckpt)
    ds = _load_data(args.data)
    if ds.spec.num_patches != cfg_model.num_patches:
        raise ConfigError(
            f"--data: dataset has {ds.spec.num_patches} patches but the "
            f"checkpoint expects {cfg_model.num_patches}")
    teachers = None
    if args.teachers:
        teachers = _read_teacher_dir(args.teachers, ds, ds.val_idx)
    humans = _read_human_dir(args.human, ds.val_idx) if args.human else None
    report = evaluate(params, cfg_model, ds, teachers=teachers, humans=humans)
    print("# similarity: cosine per image, averaged over layers then samples")
    print(report.format(), end="")
    return EXIT_OK


def _cmd_teacher_gen(args) -> int:
    ds = _load_data(args.data)
    sigma = ds.spec.noise_sigma if args.sigma is None else args.sigma
    if sigma < 0:
        raise UsageError(f"--sigma must be >= 0, got {args.sigma}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    g = ds.spec.grid
    for i in range(len(ds)):
        tmap = mask_teacher(ds.masks[i], sigma=sigma,
                            seed=ds.seed * 1_000_003 + i, grid_h=g, grid_w=g)
        write_tim(tmap, out / f"sample_{i:05d}.tim")
    (out / "teachers.txt").write_text(
        f"source = ground-truth masks\nseed = {ds.seed}\nsigma = {sigma}\n"
        f"count = {len(ds)}\n")
    print(f"wrote {len(ds)} teacher maps to {out}")
    return EXIT_OK


def _cmd_decompose(args) -> int:
    if not 1 <= args.n <= MAX_VARS:
        raise UsageError(f"--n must be in [1, {MAX_VARS}], got {args.n}")
    if args.oracle == "addl":
        oracle = lambda mask: float(bin(mask).count("1"))
    elif args.oracle == "and":
        if args.n < 2:
            raise UsageError("--oracle and needs --n >= 2")
        oracle = lambda mask: 1.0 if (mask & 0b11) == 0b11 else 0.0
    else:
        if not args.file:
            raise UsageError("--oracle file requires --file")
        fp = Path(args.file)
        if not fp.is_file():
            raise UsageError(f"--file not found: {fp}")
        vals = fp.read_text().split()
        if len(vals) != 1 << args.n:
            raise ConfigError(
                f"{fp}: expected {1 << args.n} values, got {len(vals)}")
        try:
            table_vals = [float(v) for v in vals]
        except ValueError as exc:
            raise ConfigError(f"{fp}: {exc}") from exc
        oracle = lambda mask: table_vals[mask]
    table = harsanyi_and(oracle, args.n)
    sys.stdout.write(format_table(table))
    return EXIT_OK


def _cmd_visualize(args) -> int:
    tmap = read_tim(args.tim)
    if args.upsample < 1:
        raise UsageError(f"--upsample must be >= 1, got {args.upsample}")
    scale = None if args.scale == "map" else 1.0
    pgm = heatmap_pgm(tmap.values, tmap.grid_h, tmap.grid_w,
                      scale=scale, upsample=args.upsample)
    Path(args.out).write_text(pgm)
    print(f"wrote {args.out}")
    return EXIT_OK


def _cmd_gate_report(args) -> int:
    cfg_model, params = load_checkpoint(args.ckpt)
    ds = _load_data(args.data)
    trend = gate_trend(params, cfg_model, ds)
    sys.stdout.write(trend.format())
    return EXIT_OK


def _cmd_ablate(args) -> int:
    if not args.grid:
        raise UsageError("ablate requires --grid")
    cfgf = _load_run_config(args.config)
    results = ablate_grid(cfgf.run, args.out,
                          header_fn=lambda cell: _cell_header(cfgf, cell))
    for sw, res in results:
        print(f"{sw.tag} final_val={res.history[-1].val_acc:.4f} "
              f"best_val={res.best_val:.4f}")
    print(f"summary written to {Path(args.out) / 'summary.txt'}")
    return EXIT_OK


def _cell_header(cfgf: RunConfigFile, cell_cfg) -> list[str]:
    values = dict(cfgf.values)
    values["switches.iq"] = cell_cfg.switches.iq
    values["switches.ic"] = cell_cfg.switches.ic
    values["switches.gc"] = cell_cfg.switches.gc
    return RunConfigFile(run=cell_cfg, kind=cfgf.kind, values=values).echo_lines()


_COMMANDS = {
    "train": _cmd_train,
    "eval": _cmd_eval,
    "teacher-gen": _cmd_teacher_gen,
    "decompose": _cmd_decompose,
    "visualize": _cmd_visualize,
    "gate-report": _cmd_gate_report,
    "ablate": _cmd_ablate,
}


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        if not args.command:
            raise UsageError("a subcommand is required "
                             f"(one of: {', '.join(_COMMANDS)})")
        return _COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"ivit: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FileNotFoundError as exc:
        print(f"ivit: file not found: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ConfigError, TimFormatError, CheckpointFormatError,
            AnnotationFormatError) as exc:
        print(f"ivit: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except ValueError as exc:
        print(f"ivit: invalid input: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except Exception as exc:  # noqa: BLE001
        print(f"ivit: runtime failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
