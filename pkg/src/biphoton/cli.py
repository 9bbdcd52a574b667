"""Command-line driver.

Each subcommand reads and writes files so stages can be rerun on their own::

    biphoton simulate --config exp.json --plane image --out run/
    biphoton correlate run/stack_image.bphs --out run/
    biphoton fit run/map_image.json --out run/
    biphoton witness run/fit_image.json run/fit_pupil.json --config exp.json --out run/
    biphoton pipeline --config exp.json --out run/ --threads 0
    biphoton sweep --config exp.json --aperture 12 --aperture 6.2 --out sweep/
    biphoton render run/map_image.json run/map_image_control.json --shared --out run/

Exit codes: 0 success, 1 validation error, 2 I/O error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import __version__
from .config import ConfigError, ExperimentConfig, load_config
from .core import Plane
from .estimator import FitError, GaussianFit, epr_witness, fit_map
from .pipeline import PipelineError, job_for, load_map, region_for, run_pipeline, run_sweep, save_map
from .correlator import accumulate
from .render import render_heatmap
from .simulator import simulate_stack
from .stackio import StackFormatError, read_stack, write_stack

log = logging.getLogger("biphoton")

EXIT_OK, EXIT_VALIDATION, EXIT_IO, EXIT_NUMERIC = 0, 1, 2, 3
PAPER_APERTURES_MM = (12.0, 6.2, 2.4, 2.0)


def _config(args) -> ExperimentConfig:
    config = load_config(args.config) if getattr(args, "config", None) else ExperimentConfig()
    changes = {}
    if getattr(args, "seed", None) is not None:
        changes["master_seed"] = args.seed
    if getattr(args, "plane", None):
        changes["plane"] = Plane.parse(args.plane)
    lag = None
    if getattr(args, "lag", None) is not None:
        lag = args.lag
    if getattr(args, "no_background", False):
        lag = 0
    if lag is not None:
        changes["correlation"] = replace(config.correlation, background_lag=lag)
    if changes:
        try:
            config = replace(config, **changes)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
    return config


def _out(args) -> Path:
    out = Path(args.out or ".")
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_simulate(args) -> int:
    config = _config(args)
    stack, truth = simulate_stack(
        config.source, config.optics, config.camera, config.n_frames, config.plane, config.master_seed, args.threads
    )
    path = _out(args) / f"stack_{config.plane.value}.bphs"
    write_stack(
        stack,
        path,
        meta={"experiment": config.to_dict(), "ground_truth": truth.to_dict(), "seed": config.master_seed},
    )
    print(path)
    return EXIT_OK


def cmd_correlate(args) -> int:
    config = _config(args)
    stack = read_stack(args.stack, mmap=True)
    cmap = accumulate(stack, job_for(config, stack.plane), threads=args.threads)
    out = _out(args)
    path = save_map(cmap, out / f"map_{stack.plane.value}.json")
    render_heatmap(cmap, out / f"map_{stack.plane.value}.pgm", png=args.png)
    print(path)
    return EXIT_OK


def cmd_fit(args) -> int:
    config = _config(args)
    cmap = load_map(args.map)
    fit = fit_map(cmap, region_for(config, cmap.plane))
    path = _out(args) / f"fit_{cmap.plane.value}.json"
    path.write_text(json.dumps(fit.to_dict(), indent=2, sort_keys=True))
    print(path)
    if not fit.converged:
        log.error("fit did not converge after %d iterations", fit.iterations)
        return EXIT_NUMERIC
    return EXIT_OK


def _load_fit(path) -> GaussianFit:
    return GaussianFit(**json.loads(Path(path).read_text()))


def cmd_witness(args) -> int:
    config = _config(args)
    image, pupil = _load_fit(args.image_fit), _load_fit(args.pupil_fit)
    result = {
        "epr": epr_witness(image, pupil, config.calibration, "x").to_dict(),
        "epr_y": epr_witness(image, pupil, config.calibration, "y").to_dict(),
    }
    path = _out(args) / "witness.json"
    path.write_text(json.dumps(result, indent=2, sort_keys=True))
    epr = result["epr"]
    print(
        f"product = {epr['product_hbar2']:.4g} hbar^2  bound = {epr['bound']}  "
        f"violated = {epr['violated']}  factor = {epr['violation_factor']:.3g}"
    )
    return EXIT_OK


def cmd_pipeline(args) -> int:
    config = _config(args)
    report = run_pipeline(config, _out(args), threads=args.threads, png=args.png)
    epr = report["epr"]
    print(f"product = {epr['product_hbar2']:.4g} hbar^2  violated = {epr['violated']}")
    return EXIT_OK


def cmd_sweep(args) -> int:
    config = _config(args)
    apertures_mm = args.aperture or list(PAPER_APERTURES_MM)
    rows = run_sweep(config, [a * 1e-3 for a in apertures_mm], _out(args), threads=args.threads, png=args.png)
    for row in rows:
        print(row["aperture_diameter_m"], row["sigma_x_px"], row["amplitude"], row["error"])
    return EXIT_NUMERIC if any(row["error"] for row in rows) else EXIT_OK


def cmd_render(args) -> int:
    maps = [load_map(p) for p in args.maps]
    out = _out(args)
    for path, cmap in zip(args.maps, maps):
        target = out / (Path(path).stem + ".pgm")
        render_heatmap(cmap, target, shared_with=maps if args.shared else None, png=args.png)
        print(target)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="experiment configuration (JSON)")
    common.add_argument("--seed", type=int, help="override master_seed")
    common.add_argument("--out", help="output directory (default: current directory)")
    common.add_argument("--threads", type=int, default=1, help="worker threads, 0 = auto")
    common.add_argument("--plane", choices=["image", "pupil"])
    common.add_argument("--lag", type=int, help="background frame lag (0 disables)")
    common.add_argument("--no-background", action="store_true", help="skip cross-frame background subtraction")
    common.add_argument("--png", action="store_true", help="also write PNG heatmaps")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="biphoton", description=__doc__.split("\n\n")[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", parents=[common], help="synthesize a frame stack")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("correlate", parents=[common], help="averaged correlation map of a stack")
    p.add_argument("stack")
    p.set_defaults(func=cmd_correlate)

    p = sub.add_parser("fit", parents=[common], help="fit a 2D Gaussian to a correlation map")
    p.add_argument("map")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("witness", parents=[common], help="EPR product from image and pupil fits")
    p.add_argument("image_fit")
    p.add_argument("pupil_fit")
    p.set_defaults(func=cmd_witness)

    p = sub.add_parser("sweep", parents=[common], help="image-plane peak versus iris diameter")
    p.add_argument("--aperture", type=float, action="append", help="iris diameter in mm (repeatable)")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("render", parents=[common], help="render correlation maps as PGM")
    p.add_argument("maps", nargs="+")
    p.add_argument("--shared", action="store_true", help="common brightness ceiling across maps")
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("pipeline", parents=[common], help="simulate, correlate, fit and witness")
    p.set_defaults(func=cmd_pipeline)
    return parser


def _exit_code(exc: BaseException) -> int:
    if isinstance(exc, PipelineError):
        return _exit_code(exc.cause)
    if isinstance(exc, (OSError, StackFormatError)):
        return EXIT_IO
    if isinstance(exc, FitError):
        return EXIT_NUMERIC
    if isinstance(exc, (ConfigError, ValueError, TypeError)):
        return EXIT_VALIDATION
    raise exc


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if args.threads < 0:
        log.error("--threads must be >= 0")
        return EXIT_VALIDATION
    try:
        return args.func(args)
    except Exception as exc:  # noqa: BLE001
        code = _exit_code(exc)
        log.error("%s", exc)
        return code


if __name__ == "__main__":
    sys.exit(main())
