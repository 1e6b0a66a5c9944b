"""Command line front end: ``manifold-control {validate,control,verify,all}``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from typing import List, Optional

from .config import PRESETS, dump_preset, load_config, preset_config
from .errors import ConfigError, ManifoldControlError, ValidationFailure

log = logging.getLogger("manifold_control")


def _float_list(text: str) -> List[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _grid(text: str):
    try:
        nx, ny = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected NXxNY, e.g. 512x256, got {text!r}") from None
    return nx, ny


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="manifold-control",
        description="Steer a stable or unstable manifold of a 2-D saddle onto a target curve family.",
    )
    ap.add_argument("-v", "--verbose", action="count", default=0, help="more logging (repeatable)")
    sub = ap.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    src = common.add_mutually_exclusive_group()
    src.add_argument("--config", help="scenario YAML file")
    src.add_argument("--preset", choices=PRESETS, help="built-in scenario (default taylor_green_stable)")
    common.add_argument("--eps", type=_float_list, help="comma-separated perturbation sizes")
    common.add_argument("--times", type=_float_list, help="comma-separated FTLE snapshot times")
    common.add_argument("--grid", type=_grid, help="FTLE seed grid as NXxNY")
    common.add_argument("--out", help="output directory (default from the config)")

    sub.add_parser("validate", parents=[common], help="check the target family before synthesis")
    sub.add_parser("control", parents=[common], help="validate, then tabulate the control")
    sub.add_parser("verify", parents=[common], help="simulate, bound and compute FTLE ridges")
    sub.add_parser("all", parents=[common], help="validate, control and verify")
    show = sub.add_parser("show-preset", help="print a preset as YAML")
    show.add_argument("name", choices=PRESETS)
    return ap


def _load(args):
    if args.config:
        cfg = load_config(args.config)
    else:
        cfg = preset_config(args.preset or "taylor_green_stable")
    if args.eps is not None:
        if not args.eps or any(e < 0 for e in args.eps):
            raise ConfigError("--eps needs nonnegative values")
        cfg.eps = args.eps
    if args.times is not None:
        cfg.times = args.times
    if args.grid is not None:
        nx, ny = args.grid
        if nx < 2 or ny < 2:
            raise ConfigError("--grid needs NX, NY >= 2")
        cfg.ftle.nx, cfg.ftle.ny = nx, ny
    return cfg


def run(argv: Optional[List[str]] = None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    logging.basicConfig(
        level=logging.WARNING - 10 * min(args.verbose, 2),
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    if args.command == "show-preset":
        sys.stdout.write(dump_preset(args.name))
        return 0

    from .pipeline import Run

    try:
        cfg = _load(args)
        r = Run(cfg, args.out)
        if args.command in ("validate", "control", "all"):
            if not r.validate():
                r.finish()
                raise ValidationFailure(f"target family failed validation; see {r.out / 'validation.json'}")
        if args.command in ("control", "all"):
            r.control()
        if args.command in ("verify", "all"):
            r.verify()
        report = r.finish()
    except ManifoldControlError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    summary = {k: report[k] for k in ("validation", "eps_scaling", "report_file") if k in report}
    print(json.dumps(summary, indent=2, default=str))
    return 0


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
