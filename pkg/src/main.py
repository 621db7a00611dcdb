"""Command-line entry point of the pyramid convolution toolkit.

Reports are written to stdout (or --out); logs go to stderr. Exit codes: 0 on
success, 1 when a check fails, 2 on usage or input errors.

Synthetic inputs are band-limited noise: seeded uniform noise on [-1, 1)
blurred at scale --pre-blur (default 2), because the continuous scale-space
identities only hold approximately for band-limited images.
"""

import argparse
import os
import sys
from typing import List, Optional

import numpy as np

from .core.analysis import correlation_matrix, equivariance_suite, flops_report
from .core.config import BNMode, SepcVariant, SizeMode
from .core.gradcheck import SUITES, run_gradcheck_suites
from .core.pyramid import FeaturePyramid
from .core.scale_space import band_limited_noise, jump_composition_error, semigroup_error, verify_lemma1
from .core.tensor_io import pyramid_read, pyramid_write, tensor_read
from .core.training import PyramidHead
from .utils.config import (CALIBRATION_MARGIN, Calibration, ConfigValidationError, format_calibration,
                           load_calibration, load_cost_model, load_head_config, load_scale_space_settings,
                           read_key_value_file, split_sections, write_calibration)
from .utils.logging import setup_logger
from .utils.monitoring import collecting

logger = setup_logger(__name__)

EXIT_OK = 0
EXIT_CHECK_FAILED = 1
EXIT_USAGE = 2

PAPER_C_TOTAL = 1.4985
PAPER_HEAD_RATIO = 0.99925
FLOPS_CHECK_TOLERANCE = 5e-4
# Below this the Gaussian equivariance error counts as exact and separation is not required.
EXACT_ERROR = 1e-12
CALIBRATION_FLOOR = 1e-12

# A numpy head with 256 channels is slow; the demo defaults to a small one.
DEMO_HEAD_DEFAULTS = {"channels": 8, "stacks": 2}
DEMO_SIZE = 32
DEMO_LEVELS = 5


def _first(*values):
    return next(v for v in values if v is not None)


def _emit(text: str, out: Optional[str] = None):
    if out:
        with open(out, "w") as f:
            f.write(text)
        logger.info(f"Report written to {out}")
    else:
        sys.stdout.write(text)
        sys.stdout.flush()


def _fmt(value: float) -> str:
    return f"{value:.6g}"


def _status(passed: bool) -> str:
    return "ok" if passed else "FAIL"


def cmd_flops(args: argparse.Namespace) -> int:
    """Write the FLOPs report; with --check compare C_total and head_ratio to the published values."""
    cost_overrides = {
        "levels": args.levels,
        "size_mode": args.size_mode,
        "channels": args.channels,
        "img_height": args.img_height,
        "img_width": args.img_width,
        "include_upsample": True if args.include_upsample else None,
    }
    head_overrides = {
        "stacks": args.stacks,
        "combined": None if args.head is None else args.head == "combined",
        "sepc_variant": args.sepc_variant,
        "scale_kernel": args.scale_kernel,
        "extra_conv": args.extra_conv,
    }
    inp = load_cost_model(args.config, cost_overrides)
    cfg = load_head_config(args.config, head_overrides)
    report = flops_report(inp, cfg)
    _emit(report.to_csv(), args.out)
    if not args.check:
        return EXIT_OK
    deviations = {
        "C_total": abs(report.c_total - PAPER_C_TOTAL),
        "head_ratio": abs(report.head_ratio - PAPER_HEAD_RATIO),
    }
    failed = [name for name, dev in deviations.items() if dev > FLOPS_CHECK_TOLERANCE]
    if failed:
        logger.error(f"FLOPs check failed for {', '.join(failed)}: deviations {deviations}")
        return EXIT_CHECK_FAILED
    logger.info("FLOPs check passed")
    return EXIT_OK


def cmd_verify_scale_space(args: argparse.Namespace) -> int:
    """Lemma-1 discrepancy for (m, n), semigroup and jump-composition errors against the calibration."""
    cal = load_calibration(args.calibration)
    settings = load_scale_space_settings(args.config)
    s0 = _first(args.s0, settings.s0)
    if args.input:
        x = tensor_read(args.input)
    else:
        size = _first(args.size, settings.size)
        seed = _first(args.seed, cal.seed)
        x = band_limited_noise((1, 1, size, size), np.random.default_rng(seed), _first(args.pre_blur, settings.pre_blur))
    lemma_threshold = _first(args.tolerance, CALIBRATION_MARGIN * cal.lemma1_m1_n1)
    checks = [
        (f"lemma1_m{args.m}_n{args.n}", verify_lemma1(x, args.m, args.n, s0), lemma_threshold),
        ("semigroup", semigroup_error(x, cal.semigroup_t1, cal.semigroup_t2),
         CALIBRATION_MARGIN * cal.semigroup_max_abs),
        ("jump", jump_composition_error(x, s0), CALIBRATION_MARGIN * cal.jump_max_abs),
    ]
    rows = ["check,value,threshold,status"]
    passed = True
    for name, value, threshold in checks:
        ok = value <= threshold
        passed = passed and ok
        rows.append(f"{name},{_fmt(value)},{_fmt(threshold)},{_status(ok)}")
    _emit("\n".join(rows) + "\n", args.out)
    if not passed:
        logger.error("Scale-space verification failed")
        return EXIT_CHECK_FAILED
    return EXIT_OK


def cmd_equivariance(args: argparse.Namespace) -> int:
    """Gaussian vs. shuffled-control equivariance errors and their separation factor."""
    cal = load_calibration(args.calibration)
    settings = load_scale_space_settings(args.config)
    report = equivariance_suite(
        seed=_first(args.seed, cal.equivariance_seed),
        size=_first(args.size, cal.equivariance_size),
        levels=_first(args.levels, cal.equivariance_levels),
        m=_first(args.m, cal.equivariance_m),
        s0=_first(args.s0, settings.s0),
        pre_blur=_first(args.pre_blur, settings.pre_blur),
        constant=args.constant,
    )
    separation = "inf" if report.separation == float("inf") else _fmt(report.separation)
    _emit(f"gaussian,{_fmt(report.gaussian)}\ncontrol,{_fmt(report.control)}\nseparation,{separation}\n", args.out)
    if report.gaussian > CALIBRATION_MARGIN * cal.equivariance_gaussian_max:
        logger.error(f"Gaussian equivariance error {report.gaussian:.6g} exceeds its calibration")
        return EXIT_CHECK_FAILED
    if report.gaussian > EXACT_ERROR and report.separation < cal.equivariance_separation_min:
        logger.error(f"Separation {report.separation:.6g} is below {cal.equivariance_separation_min}")
        return EXIT_CHECK_FAILED
    return EXIT_OK


def cmd_gradcheck(args: argparse.Namespace) -> int:
    """Run the finite-difference gradient-check suites."""
    results = run_gradcheck_suites(args.seed, args.suite)
    rows = ["suite,max_rel_error,tolerance,status"]
    rows += [f"{r.suite},{r.max_relative_error:.3e},{r.tolerance:.0e},{_status(r.passed)}" for r in results]
    _emit("\n".join(rows) + "\n", args.out)
    return EXIT_OK if all(r.passed for r in results) else EXIT_CHECK_FAILED


def _demo_input(args: argparse.Namespace, channels: int, seed: int) -> FeaturePyramid:
    if args.input:
        return FeaturePyramid(tuple(pyramid_read(args.input)))
    size = _first(args.size, DEMO_SIZE)
    levels = _first(args.levels, DEMO_LEVELS)
    rng = np.random.default_rng([seed, 1])
    return FeaturePyramid.from_sizes(1, channels, size, size, levels, rng)


def cmd_demo_head(args: argparse.Namespace) -> int:
    """Run the configured head once; write cls/loc pyramids and optionally diff against a second variant."""
    overrides = {
        "channels": args.channels,
        "stacks": args.stacks,
        "num_classes": args.num_classes,
        "anchors": args.anchors,
        "bn_mode": args.bn_mode,
        "sepc_variant": args.variant,
        "seed": args.seed,
    }
    cfg = load_head_config(args.config, overrides, base=DEMO_HEAD_DEFAULTS)
    p = _demo_input(args, cfg.channels, cfg.seed)
    cls, loc = PyramidHead.create(cfg, len(p))(p)

    rows = ["branch,level,n,c,h,w"]
    for branch, out in (("cls", cls), ("loc", loc)):
        for name, level in zip(out.names, out.levels):
            rows.append(f"{branch},{name},{level.n},{level.c},{level.h},{level.w}")
    if args.compare_variant is not None:
        other = cfg.model_copy(update={"sepc_variant": SepcVariant(args.compare_variant)})
        cls2, loc2 = PyramidHead.create(other, len(p))(p)
        diff = max(float(np.max(np.abs(a.data - b.data)))
                   for a, b in zip(cls.levels + loc.levels, cls2.levels + loc2.levels))
        rows.append(f"max_abs_diff,{_fmt(diff)}")
    sys.stdout.write("\n".join(rows) + "\n")

    if args.out:
        os.makedirs(args.out, exist_ok=True)
        pyramid_write(cls.levels, os.path.join(args.out, "cls.spyr"))
        pyramid_write(loc.levels, os.path.join(args.out, "loc.spyr"))
        logger.info(f"Head outputs written to {args.out}")
    return EXIT_OK


def cmd_correlate(args: argparse.Namespace) -> int:
    """Write the level correlation matrix of a SPYR pyramid."""
    if args.config:
        # No tunables here; the file is still validated.
        split_sections(read_key_value_file(args.config))
    p = FeaturePyramid(tuple(pyramid_read(args.input)))
    _emit(correlation_matrix(p).to_csv(), args.out)
    return EXIT_OK


def measure_calibration(base: Calibration) -> Calibration:
    """Re-measure every golden quantity with the run parameters recorded in base."""
    x = band_limited_noise((1, 1, base.size, base.size), np.random.default_rng(base.seed), base.pre_blur)
    report = equivariance_suite(seed=base.equivariance_seed, size=base.equivariance_size,
                                levels=base.equivariance_levels, m=base.equivariance_m,
                                s0=base.s0, pre_blur=base.pre_blur)
    measured = {
        "lemma1_m1_n1": verify_lemma1(x, 1, 1, base.s0),
        "semigroup_max_abs": semigroup_error(x, base.semigroup_t1, base.semigroup_t2),
        "jump_max_abs": jump_composition_error(x, base.s0),
        "equivariance_gaussian_max": report.gaussian,
    }
    for name, value in measured.items():
        logger.info(f"calibrated {name} = {value:.6g}")
    return Calibration(**{**base.model_dump(), **{k: max(v, CALIBRATION_FLOOR) for k, v in measured.items()}})


def cmd_calibrate(args: argparse.Namespace) -> int:
    """Regenerate the calibration file (printed unless --out is given)."""
    calibration = measure_calibration(load_calibration(args.calibration))
    if args.out:
        write_calibration(calibration, args.out)
    else:
        sys.stdout.write(format_calibration(calibration))
    return EXIT_OK


def _add_common(parser: argparse.ArgumentParser, seed_default: Optional[int] = None):
    parser.add_argument("--seed", type=int, default=seed_default, help="Random seed")
    parser.add_argument("--out", help="Output path (stdout when omitted)")
    parser.add_argument("--config", help="key=value configuration file")


def _add_scale_space(parser: argparse.ArgumentParser):
    parser.add_argument("--size", type=int, help="Side of the synthetic square image")
    parser.add_argument("--s0", type=float, help="Base scale of the Gaussian pyramid")
    parser.add_argument("--pre-blur", type=float, help="Blur scale of the synthetic noise")
    parser.add_argument("--calibration", help="Calibration file (default config/calibration.txt)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pyramid-conv", description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)

    flops = sub.add_parser("flops", help="Analytical head FLOPs report (CSV)")
    _add_common(flops)
    flops.add_argument("--check", action="store_true", help="Compare C_total and head_ratio with 1.4985 / 0.99925")
    flops.add_argument("--levels", type=int)
    flops.add_argument("--size-mode", choices=[m.value for m in SizeMode])
    flops.add_argument("--head", choices=["combined", "separate"])
    flops.add_argument("--stacks", type=int)
    flops.add_argument("--sepc-variant", choices=[v.value for v in SepcVariant])
    flops.add_argument("--scale-kernel", type=int, choices=[1, 3])
    flops.add_argument("--extra-conv", action=argparse.BooleanOptionalAction, default=None)
    flops.add_argument("--channels", type=int)
    flops.add_argument("--img-height", type=int)
    flops.add_argument("--img-width", type=int)
    flops.add_argument("--include-upsample", action="store_true", help="Count 7 MACs per upsampled element")
    flops.set_defaults(func=cmd_flops)

    verify = sub.add_parser("verify-scale-space", help="Lemma-1, semigroup and jump checks")
    _add_common(verify)
    _add_scale_space(verify)
    verify.add_argument("--m", type=int, default=1)
    verify.add_argument("--n", type=int, default=1)
    verify.add_argument("--input", help="SPYT tensor to use instead of synthetic noise")
    verify.add_argument("--tolerance", type=float, help="Override the Lemma-1 threshold")
    verify.set_defaults(func=cmd_verify_scale_space)

    equiv = sub.add_parser("equivariance", help="PConv equivariance on a Gaussian vs. a shuffled pyramid")
    _add_common(equiv)
    _add_scale_space(equiv)
    equiv.add_argument("--levels", type=int)
    equiv.add_argument("--m", type=int)
    equiv.add_argument("--constant", type=float, help="Use a constant image of this value")
    equiv.set_defaults(func=cmd_equivariance)

    grad = sub.add_parser("gradcheck", help="Finite-difference gradient checks")
    _add_common(grad, seed_default=0)
    grad.add_argument("--suite", action="append", choices=list(SUITES), help="Suite to run (repeatable)")
    grad.set_defaults(func=cmd_gradcheck)

    demo = sub.add_parser("demo-head", help="Run the head once and write cls/loc pyramids")
    _add_common(demo)
    demo.add_argument("--variant", choices=[v.value for v in SepcVariant])
    demo.add_argument("--compare-variant", choices=[v.value for v in SepcVariant])
    demo.add_argument("--channels", type=int)
    demo.add_argument("--size", type=int, help=f"Bottom level side (default {DEMO_SIZE})")
    demo.add_argument("--levels", type=int, help=f"Pyramid levels (default {DEMO_LEVELS})")
    demo.add_argument("--stacks", type=int)
    demo.add_argument("--num-classes", type=int)
    demo.add_argument("--anchors", type=int)
    demo.add_argument("--bn-mode", choices=[m.value for m in BNMode] + ["off"])
    demo.add_argument("--input", help="SPYR pyramid to use instead of random features")
    demo.set_defaults(func=cmd_demo_head)

    corr = sub.add_parser("correlate", help="Correlation matrix of pyramid levels (CSV)")
    _add_common(corr)
    corr.add_argument("--input", required=True, help="SPYR pyramid")
    corr.set_defaults(func=cmd_correlate)

    calibrate = sub.add_parser("calibrate", help="Re-measure the golden thresholds")
    calibrate.add_argument("--calibration", help="Calibration whose run parameters are reused")
    calibrate.add_argument("--out", help="Calibration file to write (stdout when omitted)")
    calibrate.set_defaults(func=cmd_calibrate)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    """Application entry point."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code in (0, None) else EXIT_USAGE
    with collecting() as metrics:
        try:
            return args.func(args)
        except (ConfigValidationError, ValueError, OSError) as e:
            metrics.track_error(type(e).__name__)
            logger.error(f"{args.command} failed: {e}")
            return EXIT_USAGE
        finally:
            for op, summary in metrics.get_summary().items():
                logger.debug(f"{op}: {summary['calls']} calls, {summary['macs']} MACs, {summary['seconds']:.3f}s")


if __name__ == "__main__":
    sys.exit(main())
