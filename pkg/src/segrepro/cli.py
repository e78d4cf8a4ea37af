"""Command-line interface: ``compare``, ``batch``, ``synth`` and ``selftest``.

Exit codes: 0 success, 2 usage or geometry error, 3 input parse error,
4 internal invariant violation.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from ._validation import GridMismatchError
from .harness import DatasetError, Policy, ResampleConfig, compare_volumes, resolve_jobs
from .metrics import DEFAULT_TOLERANCE_MM
from .report import RunConfig, check_output_consistency, run_batch, sig6
from .resample import AffineTransform, ReferenceGrid, TransformFormatError, read_affine_transform, resample_labels
from .roi import Side, default_registry, load_registry
from .selftest import run_selftest
from .synth import SynthSpecError, generate_dataset
from .volume_io import NiftiError, read_label_volume

EXIT_OK, EXIT_USAGE, EXIT_PARSE, EXIT_INTERNAL = 0, 2, 3, 4

logger = logging.getLogger("segrepro")

COMPARE_COLUMNS = ("roi", "side", "dice", "surface_dice", "hd95_mm", "vol_a_cm3", "vol_b_cm3", "vol_diff_cm3")


class UsageError(Exception):
    pass


def _parse_ref(values):
    if not values:
        return None
    kind = values[0]
    if kind == "first-session" and len(values) == 1:
        return ("first-session", None)
    if kind == "atlas" and len(values) == 2:
        return ("atlas", values[1])
    raise UsageError("--ref takes 'first-session' or 'atlas <path>'")


def _parse_sides(text: str):
    try:
        return tuple(Side(s.strip()) for s in text.split(",") if s.strip())
    except ValueError:
        raise UsageError(f"--sides must list left/right/both, got {text!r}") from None


def _load_registry(path):
    if not path:
        return default_registry()
    try:
        return load_registry(path)
    except (OSError, ValueError) as exc:
        raise NiftiError(f"registry {path}: {exc}") from None


def _cell(value, digits=3) -> str:
    return "NA" if value is None else f"{value:.{digits}f}"


def cmd_compare(args) -> int:
    registry = _load_registry(args.registry)
    sides = _parse_sides(args.sides)
    ref = _parse_ref(args.ref)
    vol_a = read_label_volume(args.volume_a)
    vol_b = read_label_volume(args.volume_b)
    t_a = read_affine_transform(args.transform_a) if args.transform_a else AffineTransform.identity()
    t_b = read_affine_transform(args.transform_b) if args.transform_b else AffineTransform.identity()
    if ref is not None:
        grid = ReferenceGrid.from_volume(vol_a if ref[0] == "first-session" else read_label_volume(ref[1]))
        vol_a = resample_labels(vol_a, t_a, grid)
        vol_b = resample_labels(vol_b, t_b, grid)
    elif not vol_a.same_grid(vol_b):
        raise GridMismatchError(
            f"{args.volume_b} is not on the grid of {args.volume_a} "
            f"(dims {vol_b.dims} vs {vol_a.dims}); pass --ref to resample"
        )
    results = compare_volumes(vol_a, vol_b, registry, sides, args.tolerance_mm)
    rows = []
    for spec, side, m in results:
        rows.append(
            {
                "roi": spec.name,
                "side": side.value,
                "dice": m.dice,
                "surface_dice": m.surface_dice,
                "hd95_mm": m.hd95,
                "vol_a_cm3": m.volume_a_cm3,
                "vol_b_cm3": m.volume_b_cm3,
                "vol_diff_cm3": m.volume_b_cm3 - m.volume_a_cm3,
                "undefined_reason": m.undefined_reason,
            }
        )
    width = max(len(r["roi"]) for r in rows)
    print(f"{'roi':<{width}}  {'side':<5}  " + "  ".join(f"{c:>12}" for c in COMPARE_COLUMNS[2:]))
    for r in rows:
        cells = [_cell(r["dice"]), _cell(r["surface_dice"]), _cell(r["hd95_mm"])]
        cells += [_cell(r[c], 4) for c in ("vol_a_cm3", "vol_b_cm3", "vol_diff_cm3")]
        print(f"{r['roi']:<{width}}  {r['side']:<5}  " + "  ".join(f"{c:>12}" for c in cells))
    if args.json:
        doc = {
            "volume_a": str(args.volume_a),
            "volume_b": str(args.volume_b),
            "tolerance_mm": float(args.tolerance_mm),
            "rows": [{k: sig6(v) if isinstance(v, float) else v for k, v in r.items()} for r in rows],
        }
        with open(args.json, "w") as fh:
            json.dump(doc, fh, indent=2)
            fh.write("\n")
    return EXIT_OK


def _batch_config(args) -> RunConfig:
    if args.config:
        try:
            cfg = RunConfig.load(args.config)
        except json.JSONDecodeError as exc:
            raise NiftiError(f"config {args.config}: {exc}") from None
        except (TypeError, ValueError) as exc:
            raise UsageError(f"config {args.config}: {exc}") from None
    else:
        if not args.root or not args.out:
            raise UsageError("batch needs a config file or both --root and --out")
        cfg = RunConfig(dataset_root=args.root, output_dir=args.out)
    if args.root:
        cfg.dataset_root = args.root
    if args.out:
        cfg.output_dir = args.out
    if args.policy:
        cfg.policy = Policy(args.policy).value
    if args.registry:
        cfg.registry_path = args.registry
    if args.tolerance_mm is not None:
        if args.tolerance_mm <= 0:
            raise UsageError("--tolerance-mm must be positive")
        cfg.tolerance_mm = float(args.tolerance_mm)
    if args.seed is not None:
        cfg.seed = args.seed
    ref = _parse_ref(args.ref)
    if ref is not None:
        prev = cfg.resample
        cfg.resample = ResampleConfig(
            reference=ref[0],
            atlas_path=ref[1],
            transforms=dict(prev.transforms) if prev else {},
            lps_to_ras=prev.lps_to_ras if prev else False,
        )
    return cfg


def cmd_batch(args) -> int:
    cfg = _batch_config(args)
    jobs = resolve_jobs(args.jobs if args.jobs is not None else cfg.jobs)
    records = run_batch(cfg, jobs=jobs)
    logger.info("wrote %d records to %s", len(records), cfg.output_dir)
    return EXIT_OK


def cmd_synth(args) -> int:
    manifest = generate_dataset(args.out, seed=args.seed, spec=args.spec)
    print(f"wrote {len(manifest['sessions'])} sessions to {args.out}")
    return EXIT_OK


def cmd_selftest(args) -> int:
    ok = run_selftest(seed=args.seed, n_pairs=args.n)
    if args.outputs:
        problems = check_output_consistency(args.outputs)
        for p in problems:
            print(f"FAIL {p}")
        print(f"{'PASS' if not problems else 'FAIL'} summary.json consistent with records.csv")
        ok &= not problems
    return EXIT_OK if ok else EXIT_INTERNAL


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="segrepro", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("compare", help="per-ROI agreement between two label volumes")
    p.add_argument("volume_a", type=Path)
    p.add_argument("volume_b", type=Path)
    p.add_argument("--tolerance-mm", type=float, default=DEFAULT_TOLERANCE_MM)
    p.add_argument("--registry", help="JSON ROI registry overriding the built-in 17 regions")
    p.add_argument("--sides", default="left,right", help="comma list of left/right/both")
    p.add_argument("--ref", nargs="+", metavar="REF", help="'first-session' (grid of volume_a) or 'atlas <path>'")
    p.add_argument("--transform-a", help="fixed-to-moving transform for volume_a")
    p.add_argument("--transform-b", help="fixed-to-moving transform for volume_b")
    p.add_argument("--json", help="also write the table as JSON")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("batch", help="evaluate a whole dataset and write reports")
    p.add_argument("config", nargs="?", help="JSON run configuration")
    p.add_argument("--root", help="dataset root (overrides config)")
    p.add_argument("--out", help="output directory (overrides config)")
    p.add_argument("--policy", choices=[x.value for x in Policy])
    p.add_argument("--registry")
    p.add_argument("--tolerance-mm", type=float)
    p.add_argument("--ref", nargs="+", metavar="REF")
    p.add_argument("--jobs", type=int, help="worker processes (env SEGREPRO_JOBS; default all cores)")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_batch)

    p = sub.add_parser("synth", help="write a seeded synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--spec", help="JSON spec of subjects, ROIs and perturbations")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("selftest", help="check fast kernels against brute-force oracles")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n", type=int, default=25, help="random mask pairs")
    p.add_argument("--outputs", help="batch output directory to check for consistency")
    p.set_defaults(func=cmd_selftest)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (UsageError, GridMismatchError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (NiftiError, TransformFormatError, DatasetError, SynthSpecError, FileNotFoundError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_PARSE
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except AssertionError as exc:
        print(f"internal error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
