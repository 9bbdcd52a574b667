"""End-to-end orchestration: simulate or load, correlate, fit, witness, control, sweep."""

from __future__ import annotations

import csv
import datetime as _dt
import json
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .config import ExperimentConfig
from .core import CorrelationMap, MapKind, Plane, Stack
from .correlator import CorrelationMode, accumulate
from .estimator import FitError, FitRegion, GaussianFit, compare_control, epr_witness, fit_map, peak_statistics
from .render import render_heatmap
from .simulator import GroundTruth, PsfModel, matched_flux_control, simulate_stack
from .stackio import read_stack

# control runs draw from a disjoint seed so they are statistically independent
CONTROL_SEED_OFFSET = 7919


class PipelineError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"{stage} stage failed: {cause}")
        self.stage = stage
        self.cause = cause


class _Stage:
    def __init__(self, name):
        self.name = name

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        if exc is not None and not isinstance(exc, PipelineError):
            raise PipelineError(self.name, exc) from exc
        return False


def job_for(config: ExperimentConfig, plane):
    return replace(config.correlation, mode=CorrelationMode.for_plane(plane))


def region_for(config: ExperimentConfig, plane) -> FitRegion:
    # the self-correlation spike only exists in the autocorrelation
    if Plane.parse(plane) is Plane.IMAGE:
        return config.fit_region
    return FitRegion(config.fit_region.diameter, exclude_center=False)


def acquire(config: ExperimentConfig, plane, control: bool = False, threads: int = 1) -> tuple[Stack, GroundTruth | None]:
    plane = Plane.parse(plane)
    key = plane.value + ("_control" if control else "")
    path = getattr(config.stacks, key, None) if config.stacks else None
    if path:
        with _Stage("load"):
            stack = read_stack(path)
            if stack.plane is not plane:
                raise ValueError(f"{path} holds a {stack.plane.value}-plane stack, expected {plane.value}")
        return stack, None
    source, optics = config.source, config.optics
    seed = config.master_seed
    if control:
        eta = config.control.eta
        if config.control.pump_compensation:
            source, optics = matched_flux_control(source, optics, eta)
        else:
            optics = replace(optics, transmission_eta=eta)
        seed += CONTROL_SEED_OFFSET
    with _Stage("simulate"):
        return simulate_stack(source, optics, config.camera, config.n_frames, plane, seed, threads=threads)


def analyse(
    config: ExperimentConfig, stack: Stack, threads: int = 1, init: GaussianFit | None = None
) -> tuple[CorrelationMap, GaussianFit]:
    """Correlate a stack and fit its peak; ``init`` seeds the fit (e.g. a control run from the main fit)."""
    with _Stage("correlate"):
        cmap = accumulate(stack, job_for(config, stack.plane), threads=threads)
    with _Stage("fit"):
        fit = fit_map(cmap, region_for(config, stack.plane), init=init)
        if not fit.converged:
            raise FitError(f"{stack.plane.value}-plane Gaussian fit did not converge after {fit.iterations} iterations")
    return cmap, fit


def predicted_volume_ratio(config: ExperimentConfig) -> float:
    """Control/main ratio of detected intact pairs per frame."""
    eta_main = config.optics.transmission_eta
    eta = config.control.eta
    pump = eta_main / eta if config.control.pump_compensation else 1.0
    return pump * (eta / eta_main) ** 2


def map_to_dict(cmap: CorrelationMap) -> dict:
    return {
        "kind": cmap.kind.value,
        "plane": cmap.plane.value,
        "frames_used": cmap.frames_used,
        "frames_background": cmap.frames_background,
        "background_lag": cmap.background_lag,
        "values": cmap.values.tolist(),
    }


def map_from_dict(data: dict) -> CorrelationMap:
    return CorrelationMap(
        np.array(data["values"], dtype=np.float64),
        kind=MapKind(data["kind"]),
        plane=Plane.parse(data["plane"]),
        frames_used=data.get("frames_used", 0),
        frames_background=data.get("frames_background", 0),
        background_lag=data.get("background_lag", 0),
    )


def save_map(cmap: CorrelationMap, path) -> Path:
    path = Path(path)
    path.write_text(json.dumps(map_to_dict(cmap)))
    return path


def load_map(path) -> CorrelationMap:
    return map_from_dict(json.loads(Path(path).read_text()))


def _fit_block(fit: GaussianFit, cal) -> dict:
    stats = peak_statistics(fit)
    return {
        "fit": fit.to_dict(),
        "peak": {"amplitude": stats.amplitude, "volume": stats.volume, "fwhm_x": stats.fwhm_x, "fwhm_y": stats.fwhm_y},
        "sigma_detector_m": [fit.sigma_x * cal.pixel_pitch, fit.sigma_y * cal.pixel_pitch],
    }


def run_pipeline(config: ExperimentConfig, out_dir=None, threads: int = 1, png: bool = False) -> dict:
    """Run the full chain and return the witness report as a JSON-ready dict.

    Everything except the ``timestamps`` field is a pure function of the
    configuration.
    """
    cal = config.calibration
    started = _dt.datetime.now(_dt.timezone.utc).isoformat()
    maps, fits, truths = {}, {}, {}
    for plane in (Plane.IMAGE, Plane.PUPIL):
        stack, truth = acquire(config, plane, threads=threads)
        maps[plane], fits[plane] = analyse(config, stack, threads)
        truths[plane] = truth
    with _Stage("witness"):
        epr_x = epr_witness(fits[Plane.IMAGE], fits[Plane.PUPIL], cal, "x")
        epr_y = epr_witness(fits[Plane.IMAGE], fits[Plane.PUPIL], cal, "y")

    report = {
        "epr": epr_x.to_dict(),
        "epr_y": epr_y.to_dict(),
        "image": _fit_block(fits[Plane.IMAGE], cal),
        "pupil": _fit_block(fits[Plane.PUPIL], cal),
        "ground_truth": {p.value: t.to_dict() for p, t in truths.items() if t is not None},
    }

    control_maps = {}
    if config.control is not None:
        report["control"] = {"eta": config.control.eta, "predicted_volume_ratio": predicted_volume_ratio(config)}
        for plane in (Plane.IMAGE, Plane.PUPIL):
            stack, _ = acquire(config, plane, control=True, threads=threads)
            # the attenuated peak is weak; start from the main-run fit
            control_maps[plane], fit = analyse(config, stack, threads, init=fits[plane])
            with _Stage("control"):
                amp_ratio, vol_ratio = compare_control(fits[plane], fit)
            report["control"][plane.value] = {
                **_fit_block(fit, cal),
                "amplitude_ratio": amp_ratio,
                "volume_ratio": vol_ratio,
            }

    report["provenance"] = {
        "config": config.to_dict(),
        "config_hash": config.hash(),
        "master_seed": config.master_seed,
        "n_frames": config.n_frames,
        "frames_used": {p.value: m.frames_used for p, m in maps.items()},
        "frames_background": {p.value: m.frames_background for p, m in maps.items()},
        "tool_version": __version__,
    }
    report["timestamps"] = {
        "started": started,
        "finished": _dt.datetime.now(_dt.timezone.utc).isoformat(),
    }

    if out_dir is not None:
        with _Stage("write"):
            out = Path(out_dir)
            out.mkdir(parents=True, exist_ok=True)
            for plane, cmap in maps.items():
                save_map(cmap, out / f"map_{plane.value}.json")
                group = [cmap] + ([control_maps[plane]] if plane in control_maps else [])
                render_heatmap(cmap, out / f"map_{plane.value}.pgm", shared_with=group, png=png)
                if plane in control_maps:
                    save_map(control_maps[plane], out / f"map_{plane.value}_control.json")
                    render_heatmap(control_maps[plane], out / f"map_{plane.value}_control.pgm", shared_with=group, png=png)
            (out / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True))
    return report


def reproducible_part(report: dict) -> dict:
    return {k: v for k, v in report.items() if k != "timestamps"}


SWEEP_FIELDS = [
    "aperture_diameter_m",
    "psf_sigma_m",
    "sigma_x_px",
    "sigma_y_px",
    "amplitude",
    "volume",
    "variance_object_m2",
    "error",
]


def sweep_optics(config: ExperimentConfig, diameter: float):
    """Optics for one sweep point; a Gaussian PSF width scales as 1/D from the base aperture."""
    optics = config.optics
    sigma = optics.psf_sigma
    if optics.psf_model is PsfModel.GAUSSIAN:
        sigma = optics.psf_sigma * optics.aperture_diameter / diameter
    return replace(optics, aperture_diameter=diameter, psf_sigma=sigma)


def run_sweep(config: ExperimentConfig, apertures, out_dir=None, threads: int = 1, png: bool = False) -> list[dict]:
    """Image-plane correlation peak versus iris diameter (meters), one row per aperture.

    All apertures share the master seed (common random numbers). A failing
    aperture records its error in the row and the sweep continues.
    """
    apertures = list(apertures)
    if len(apertures) < 2:
        raise ValueError("a sweep needs at least two apertures")
    cal = config.calibration
    rows, maps = [], []
    for d in apertures:
        row = dict.fromkeys(SWEEP_FIELDS, "")
        row["aperture_diameter_m"] = d
        try:
            optics = sweep_optics(config, d)
            row["psf_sigma_m"] = optics.psf_sigma
            stack, _ = simulate_stack(
                config.source, optics, config.camera, config.n_frames, Plane.IMAGE, config.master_seed, threads
            )
            cmap, fit = analyse(config, stack, threads)
            stats = peak_statistics(fit)
            sigma_obj = cal.pixel_pitch * cal.f1 / cal.f2
            row.update(
                sigma_x_px=fit.sigma_x,
                sigma_y_px=fit.sigma_y,
                amplitude=stats.amplitude,
                volume=stats.volume,
                variance_object_m2=0.5 * (fit.sigma_x**2 + fit.sigma_y**2) * sigma_obj**2,
            )
            maps.append((d, cmap))
        except Exception as exc:  # noqa: BLE001 - recorded per row by contract
            row["error"] = str(exc)
        rows.append(row)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_sweep_csv(rows, out / "sweep.csv")
        for i, (d, cmap) in enumerate(maps):
            stem = f"sweep_{i:02d}_{d * 1e3:g}mm"
            save_map(cmap, out / f"{stem}.json")
            render_heatmap(cmap, out / f"{stem}.pgm", png=png)
    return rows


def write_sweep_csv(rows, path) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=SWEEP_FIELDS)
        writer.writeheader()
        writer.writerows(rows)
    return path


def affine_fit(x, y) -> tuple[float, float]:
    """Least-squares slope and intercept."""
    slope, intercept = np.polyfit(np.asarray(x, float), np.asarray(y, float), 1)
    return float(slope), float(intercept)

