"""Frame-stack correlation maps.

Image-plane stacks are reduced to the averaged autocorrelation of the
mean-subtracted frames, pupil-plane stacks to the averaged autoconvolution.
A cross-frame term between frames n and n + lag estimates the spurious,
artifact-driven part of the map and is subtracted.

All transforms are periodic. Maps are returned with zero displacement (or
zero position sum) at index ``n // 2`` along each axis, matching
:func:`numpy.fft.fftshift`.
"""

from __future__ import annotations

import enum
import math
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .core import CorrelationMap, Frame, MapKind, Plane

DEFAULT_CROP = 161


class CorrelationMode(str, enum.Enum):
    IMAGE_CORRELATION = "image"
    PUPIL_CONVOLUTION = "pupil"

    @classmethod
    def for_plane(cls, plane) -> "CorrelationMode":
        return cls.IMAGE_CORRELATION if Plane.parse(plane) is Plane.IMAGE else cls.PUPIL_CONVOLUTION


@dataclass(frozen=True)
class CorrelationJob:
    """``crop_size=None`` picks the largest odd size up to 161 that fits the frame."""

    mode: CorrelationMode = CorrelationMode.IMAGE_CORRELATION
    background_lag: int = 2
    crop_size: int | None = None
    boundary: str = "periodic"

    def __post_init__(self):
        object.__setattr__(self, "mode", CorrelationMode(self.mode))
        if int(self.background_lag) != self.background_lag or self.background_lag < 0:
            raise ValueError(f"background_lag must be an integer >= 0, got {self.background_lag!r}")
        if self.crop_size is not None and (self.crop_size < 1 or self.crop_size % 2 != 1):
            raise ValueError(f"crop_size must be a positive odd integer, got {self.crop_size!r}")
        if self.boundary != "periodic":
            raise ValueError(f"only periodic boundary is supported, got {self.boundary!r}")

    def resolve_crop(self, shape) -> int:
        limit = min(shape)
        if self.crop_size is None:
            size = min(DEFAULT_CROP, limit if limit % 2 else limit - 1)
            return size
        if self.crop_size > limit:
            raise ValueError(f"crop_size {self.crop_size} exceeds frame size {shape}")
        return self.crop_size


@dataclass
class AccumulatorState:
    """Running sums. The grids hold half-plane spectra (``rfft2`` layout);
    the maps are recovered with a single inverse transform at the end."""

    sum_signal: np.ndarray
    sum_background: np.ndarray
    frames_signal: int = 0
    frames_background: int = 0


def _values(frame) -> np.ndarray:
    values = frame.values if isinstance(frame, Frame) else frame
    return np.asarray(values, dtype=np.float64)


def _check_geometry(a: np.ndarray, b: np.ndarray):
    if a.shape != b.shape:
        raise ValueError(f"geometry mismatch: {a.shape} vs {b.shape}")


def _point_symmetrize(c: np.ndarray) -> np.ndarray:
    # average with the periodic reflection c(-d); makes the symmetry exact
    flipped = np.roll(c[::-1, ::-1], 1, axis=(0, 1))
    return 0.5 * (c + flipped)


def mean_projection(stack) -> Frame:
    """Pixel-wise mean over all frames of a stack, accumulated in double precision."""
    n = len(stack)
    if n == 0:
        raise ValueError("cannot take the mean projection of an empty stack")
    total = np.zeros(stack[0].shape)
    for frame in stack:
        total += frame.values
    return Frame(total / n, stack[0].plane)


def subtract_mean(frame: Frame, mean: Frame) -> Frame:
    a, b = _values(frame), _values(mean)
    _check_geometry(a, b)
    return Frame(a - b, frame.plane)


def autocorrelate(residual) -> np.ndarray:
    """Periodic autocorrelation ``C(d) = sum_x f(x) f(x + d)``, centered."""
    f = _values(residual)
    spec = np.fft.rfft2(f)
    c = np.fft.irfft2(spec.real**2 + spec.imag**2, s=f.shape)
    return np.fft.fftshift(_point_symmetrize(c))


def autoconvolve(residual) -> np.ndarray:
    """Periodic autoconvolution ``V(s) = sum_x f(x) f(s - x)``, centered."""
    f = _values(residual)
    spec = np.fft.rfft2(f)
    return np.fft.fftshift(np.fft.irfft2(spec * spec, s=f.shape))


def cross_correlate(a, b) -> np.ndarray:
    """Periodic cross-correlation ``X(d) = sum_x a(x) b(x + d)``, centered."""
    fa, fb = _values(a), _values(b)
    _check_geometry(fa, fb)
    if fa is fb or np.array_equal(fa, fb):
        return autocorrelate(fa)
    spec = np.conj(np.fft.rfft2(fa)) * np.fft.rfft2(fb)
    return np.fft.fftshift(np.fft.irfft2(spec, s=fa.shape))


def cross_convolve(a, b) -> np.ndarray:
    """Periodic cross-convolution ``sum_x a(x) b(s - x)``, centered."""
    fa, fb = _values(a), _values(b)
    _check_geometry(fa, fb)
    spec = np.fft.rfft2(fa) * np.fft.rfft2(fb)
    return np.fft.fftshift(np.fft.irfft2(spec, s=fa.shape))


def crop_center(grid: np.ndarray, size: int) -> np.ndarray:
    """Odd ``size`` window around the fftshift center of ``grid``."""
    cy, cx = grid.shape[0] // 2, grid.shape[1] // 2
    h = size // 2
    return grid[cy - h : cy + h + 1, cx - h : cx + h + 1]


def _spectra(frames, mean: np.ndarray, threads: int):
    def one(frame):
        return np.fft.rfft2(_values(frame) - mean)

    if threads == 1:
        for frame in frames:
            yield one(frame)
        return
    # batches keep at most a few spectra resident while the pool works
    batch = 4 * (threads or 8)
    with ThreadPoolExecutor(max_workers=threads or None) as pool:
        for start in range(0, len(frames), batch):
            chunk = [frames[i] for i in range(start, min(start + batch, len(frames)))]
            yield from pool.map(one, chunk)


def accumulate_state(stack, job: CorrelationJob, mean: Frame | None = None, threads: int = 1) -> AccumulatorState:
    """Stream through ``stack`` and return the summed signal and background spectra.

    At most ``background_lag + 1`` residual spectra are held at a time. Sums
    run in frame-index order, so the result does not depend on ``threads``.
    """
    n = len(stack)
    lag = job.background_lag
    if n == 0:
        raise ValueError("cannot accumulate an empty stack")
    if n <= lag:
        raise ValueError(f"stack of {n} frames is too short for background lag {lag}")
    if mean is None:
        mean = mean_projection(stack)
    mean_values = _values(mean)
    shape = mean_values.shape
    spec_shape = (shape[0], shape[1] // 2 + 1)
    state = AccumulatorState(np.zeros(spec_shape, complex), np.zeros(spec_shape, complex))
    convolve = job.mode is CorrelationMode.PUPIL_CONVOLUTION
    window: deque = deque(maxlen=lag + 1)
    for spec in _spectra(stack, mean_values, threads):
        window.append(spec)
        if convolve:
            state.sum_signal += spec * spec
        else:
            state.sum_signal += spec.real**2 + spec.imag**2
        state.frames_signal += 1
        if lag and len(window) == lag + 1:
            early = window[0]
            if convolve:
                state.sum_background += early * spec
            else:
                state.sum_background += np.conj(early) * spec
            state.frames_background += 1
    return state


def finish(state: AccumulatorState, shape, job: CorrelationJob, plane) -> tuple[np.ndarray, np.ndarray | None]:
    """Full-frame averaged signal and background maps (centered)."""
    signal = np.fft.irfft2(state.sum_signal, s=shape) / state.frames_signal
    if job.mode is CorrelationMode.IMAGE_CORRELATION:
        signal = _point_symmetrize(signal)
    background = None
    if state.frames_background:
        background = np.fft.irfft2(state.sum_background, s=shape) / state.frames_background
        if job.mode is CorrelationMode.IMAGE_CORRELATION:
            # X(d) and X(-d) estimate the same background; symmetrize like the signal
            background = _point_symmetrize(background)
        background = np.fft.fftshift(background)
    return np.fft.fftshift(signal), background


def accumulate(stack, job: CorrelationJob | None = None, threads: int = 1, full: bool = False) -> CorrelationMap:
    """Averaged, background-subtracted correlation map of a stack.

    Parameters
    ----------
    stack : Stack
        Frames of a single plane.
    job : CorrelationJob, optional
        Defaults to the mode matching the stack's plane with lag 2.
    threads : int
        Worker threads for the per-frame transforms; 0 means automatic.
    full : bool
        Return the uncropped full-frame map instead of the centered crop.
    """
    if job is None:
        job = CorrelationJob(mode=CorrelationMode.for_plane(stack.plane))
    shape = stack[0].shape if len(stack) else (0, 0)
    crop = job.resolve_crop(shape) if len(stack) else None
    state = accumulate_state(stack, job, threads=threads)
    signal, background = finish(state, shape, job, stack.plane)
    result = signal if background is None else signal - background
    kind = MapKind.AUTOCORRELATION if job.mode is CorrelationMode.IMAGE_CORRELATION else MapKind.AUTOCONVOLUTION
    if full:
        h, w = result.shape
        size = min(h, w) - (1 - min(h, w) % 2)
        result = crop_center(result, size) if (h, w) != (size, size) else result
    else:
        result = crop_center(result, crop)
    return CorrelationMap(
        result,
        kind=kind,
        plane=stack.plane,
        frames_used=state.frames_signal,
        frames_background=state.frames_background,
        background_lag=job.background_lag,
    )


def off_peak_rms(values: np.ndarray, inner_radius: float) -> float:
    """RMS of map cells farther than ``inner_radius`` from the center."""
    n = values.shape[0]
    c = n // 2
    yy, xx = np.mgrid[:n, :n]
    mask = np.hypot(yy - c, xx - c) > inner_radius
    return float(math.sqrt(np.mean(values[mask] ** 2)))
