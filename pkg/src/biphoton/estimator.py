"""Gaussian peak fitting and the EPR witness."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from .core import (
    CalibrationConfig,
    CorrelationMap,
    EprResult,
    MapKind,
    displacement_to_object,
    pupil_position_to_momentum,
)

FWHM_PER_SIGMA = 2.0 * math.sqrt(2.0 * math.log(2.0))
N_PARAMS = 6


class FitError(RuntimeError):
    """A fit did not converge or cannot be used."""


@dataclass(frozen=True)
class FitRegion:
    diameter: float = 80.0
    exclude_center: bool = True

    def __post_init__(self):
        if not (math.isfinite(self.diameter) and self.diameter > 0):
            raise ValueError(f"diameter must be > 0, got {self.diameter!r}")

    @classmethod
    def for_kind(cls, kind, diameter: float = 80.0) -> "FitRegion":
        return cls(diameter, exclude_center=MapKind(kind) is MapKind.AUTOCORRELATION)


@dataclass(frozen=True)
class MaskedCells:
    """Map cells selected for fitting; offsets are relative to the map center."""

    dx: np.ndarray
    dy: np.ndarray
    values: np.ndarray

    def __len__(self):
        return self.values.size


@dataclass(frozen=True)
class GaussianFit:
    amplitude: float
    center_x: float
    center_y: float
    sigma_x: float
    sigma_y: float
    offset: float
    residual_ssd: float = 0.0
    converged: bool = True
    iterations: int = 0

    @property
    def params(self) -> np.ndarray:
        return np.array([self.amplitude, self.center_x, self.center_y, self.sigma_x, self.sigma_y, self.offset])

    def to_dict(self) -> dict:
        return asdict(self)


def circular_mask(cmap, region: FitRegion) -> MaskedCells:
    """Cells whose centers lie within ``diameter / 2`` of the map center."""
    values = cmap.values if isinstance(cmap, CorrelationMap) else np.asarray(cmap, dtype=np.float64)
    n = values.shape[0]
    c = n // 2
    radius = region.diameter / 2.0
    if radius > c + 0.5:
        raise ValueError(f"fit region of diameter {region.diameter} does not fit in a {n}x{n} map")
    yy, xx = np.mgrid[:n, :n]
    dy, dx = yy - c, xx - c
    inside = dx * dx + dy * dy <= radius * radius
    if region.exclude_center:
        inside[c, c] = False
    return MaskedCells(dx[inside].astype(float), dy[inside].astype(float), values[inside].astype(float))


def gaussian2d(params, dx, dy):
    a, x0, y0, sx, sy, b = params
    return a * np.exp(-0.5 * (((dx - x0) / sx) ** 2 + ((dy - y0) / sy) ** 2)) + b


def _jacobian(params, dx, dy):
    a, x0, y0, sx, sy, b = params
    ux = (dx - x0) / sx
    uy = (dy - y0) / sy
    g = np.exp(-0.5 * (ux * ux + uy * uy))
    ag = a * g
    return np.column_stack([g, ag * ux / sx, ag * uy / sy, ag * ux * ux / sx, ag * uy * uy / sy, np.ones_like(g)])


def initial_guess(cells: MaskedCells) -> np.ndarray:
    v = cells.values
    b = float(np.median(v))
    a = float(v.max() - b)
    # np.argmax returns the first maximum; sort cells row-major so ties go to the smallest index
    order = np.lexsort((cells.dx, cells.dy))
    k = order[np.argmax(v[order])]
    x0, y0 = float(cells.dx[k]), float(cells.dy[k])
    w = np.clip(v - b, 0.0, None)
    if w.sum() > 0:
        sx = math.sqrt(max(np.sum(w * (cells.dx - x0) ** 2) / w.sum(), 0.25))
        sy = math.sqrt(max(np.sum(w * (cells.dy - y0) ** 2) / w.sum(), 0.25))
    else:
        sx = sy = 1.0
    return np.array([a, x0, y0, sx, sy, b])


def fit_gaussian2d(
    cells: MaskedCells,
    init: GaussianFit | None = None,
    max_iter: int = 200,
    rtol: float = 1e-10,
) -> GaussianFit:
    """Least-squares fit of an axis-aligned 2D Gaussian plus offset.

    Levenberg-Marquardt with analytic derivatives. Iteration stops when an
    accepted step lowers the sum of squared differences by less than ``rtol``
    relative, when no damping yields a decrease, or after ``max_iter`` steps.

    Raises
    ------
    ValueError
        Fewer cells than parameters + 1.
    """
    if len(cells) < N_PARAMS + 1:
        raise ValueError(f"need at least {N_PARAMS + 1} cells to fit, got {len(cells)}")
    values = cells.values
    if np.all(values == values[0]):
        return GaussianFit(0.0, 0.0, 0.0, 1.0, 1.0, float(values[0]), 0.0, False, 0)

    # solve in normalized units so the damping schedule is scale free
    scale = float(np.max(np.abs(values)))
    y = values / scale
    dx, dy = cells.dx, cells.dy
    p = init.params.copy() if init is not None else initial_guess(cells)
    p[0] /= scale
    p[5] /= scale

    def ssd(q):
        r = y - gaussian2d(q, dx, dy)
        return float(r @ r)

    cost = ssd(p)
    lam = 1e-3
    converged = False
    iterations = 0
    for iterations in range(1, max_iter + 1):
        r = y - gaussian2d(p, dx, dy)
        jac = _jacobian(p, dx, dy)
        jtj = jac.T @ jac
        grad = jac.T @ r
        diag = np.diag(jtj).copy()
        diag[diag == 0] = 1.0
        accepted = False
        while lam < 1e16:
            try:
                step = np.linalg.solve(jtj + lam * np.diag(diag), grad)
            except np.linalg.LinAlgError:
                lam *= 10.0
                continue
            trial = p + step
            trial[3:5] = np.abs(trial[3:5])
            if np.all(trial[3:5] > 0) and np.all(np.isfinite(trial)):
                new_cost = ssd(trial)
                if new_cost <= cost:
                    accepted = True
                    break
            lam *= 10.0
        if not accepted:
            converged = True
            break
        decrease = cost - new_cost
        p, cost = trial, new_cost
        lam = max(lam / 10.0, 1e-12)
        if cost == 0.0 or decrease <= rtol * max(cost + decrease, np.finfo(float).tiny):
            converged = True
            break
    p[0] *= scale
    p[5] *= scale
    # a peak wider than the region or centered outside it is a failed fit
    extent = float(max(np.abs(dx).max(), np.abs(dy).max())) + 1.0
    inside = abs(p[1]) <= extent and abs(p[2]) <= extent and p[3] <= 2 * extent and p[4] <= 2 * extent
    converged = converged and inside
    return GaussianFit(
        amplitude=float(p[0]),
        center_x=float(p[1]),
        center_y=float(p[2]),
        sigma_x=float(p[3]),
        sigma_y=float(p[4]),
        offset=float(p[5]),
        residual_ssd=float(cost * scale * scale),
        converged=bool(converged and p[3] > 0 and p[4] > 0),
        iterations=iterations,
    )


def fit_map(cmap: CorrelationMap, region: FitRegion | None = None, init: GaussianFit | None = None) -> GaussianFit:
    if region is None:
        region = FitRegion.for_kind(cmap.kind)
    return fit_gaussian2d(circular_mask(cmap, region), init=init)


@dataclass(frozen=True)
class PeakStatistics:
    amplitude: float
    volume: float
    fwhm_x: float
    fwhm_y: float


def _require_converged(*fits: GaussianFit):
    for fit in fits:
        if not fit.converged:
            raise FitError("Gaussian fit did not converge")


def peak_statistics(fit: GaussianFit) -> PeakStatistics:
    _require_converged(fit)
    return PeakStatistics(
        amplitude=fit.amplitude,
        volume=2.0 * math.pi * fit.amplitude * fit.sigma_x * fit.sigma_y,
        fwhm_x=FWHM_PER_SIGMA * fit.sigma_x,
        fwhm_y=FWHM_PER_SIGMA * fit.sigma_y,
    )


def witness_from_widths(delta_x: float, delta_p: float) -> EprResult:
    """EPR product for an object-plane width (m) and a momentum width (hbar/m)."""
    return EprResult(delta_x2=delta_x**2, delta_p2=delta_p**2, product_hbar2=(delta_x * delta_p) ** 2)


def epr_witness(fit_image: GaussianFit, fit_pupil: GaussianFit, cal: CalibrationConfig, axis: str = "x") -> EprResult:
    """Evaluate the Reid product from fitted peak widths along one transverse axis.

    The fitted standard deviations are taken directly as the inference widths.
    """
    _require_converged(fit_image, fit_pupil)
    if axis not in ("x", "y"):
        raise ValueError(f"axis must be 'x' or 'y', got {axis!r}")
    sigma_image = getattr(fit_image, f"sigma_{axis}")
    sigma_pupil = getattr(fit_pupil, f"sigma_{axis}")
    delta_x = displacement_to_object(sigma_image, cal)
    delta_p = pupil_position_to_momentum(sigma_pupil * cal.pixel_pitch, cal)
    return witness_from_widths(delta_x, delta_p)


def compare_control(main: GaussianFit, control: GaussianFit) -> tuple[float, float]:
    """Control/main ratios of peak amplitude and peak volume."""
    _require_converged(main, control)
    a = peak_statistics(main)
    b = peak_statistics(control)
    return b.amplitude / a.amplitude, b.volume / a.volume
