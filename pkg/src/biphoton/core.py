"""Domain types, optical calibration and unit conversions.

All lengths are SI meters. Transverse momenta are expressed as wavenumbers in
1/m, i.e. in units of hbar per meter, so that a position width times a
momentum width is directly a multiple of hbar.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Any, Iterator, Mapping, Sequence

import numpy as np

#: Reid bound on the product of inference variances, in units of hbar^2.
EPR_BOUND = 0.25

#: Pump wavelength of the reference setup; metadata only, the pair model is
#: phenomenological.
PUMP_WAVELENGTH = 266e-9


class Plane(str, enum.Enum):
    IMAGE = "image"
    PUPIL = "pupil"

    @classmethod
    def parse(cls, value: "Plane | str") -> "Plane":
        if isinstance(value, Plane):
            return value
        try:
            return cls(str(value).lower())
        except ValueError:
            raise ValueError(f"unknown plane {value!r}; expected 'image' or 'pupil'") from None


class MapKind(str, enum.Enum):
    AUTOCORRELATION = "autocorrelation"
    AUTOCONVOLUTION = "autoconvolution"
    CROSS_BACKGROUND = "cross_background"


@dataclass(frozen=True)
class CalibrationConfig:
    """Optical geometry of the relay.

    Defaults follow the reference setup: 150 mm collection lens, 250 mm image
    relay, 57 mm pupil relay, 520 nm band-pass and 6.5 um pixels.
    """

    f1: float = 0.150
    f2: float = 0.250
    f3: float = 0.057
    wavelength: float = 520e-9
    pupil_relay_magnification: float = 1.0
    pixel_pitch: float = 6.5e-6

    def __post_init__(self):
        for name in ("f1", "f2", "f3", "wavelength", "pupil_relay_magnification", "pixel_pitch"):
            value = getattr(self, name)
            if not (math.isfinite(value) and value > 0):
                raise ValueError(f"{name} must be finite and > 0, got {value!r}")


def image_magnification(cal: CalibrationConfig) -> float:
    """Lateral magnification of the infinite-conjugate relay, f2/f1."""
    return cal.f2 / cal.f1


def displacement_to_object(delta, cal: CalibrationConfig):
    """Convert a detector displacement in pixels to an object-plane distance in meters."""
    return delta * cal.pixel_pitch * cal.f1 / cal.f2


def pupil_position_to_momentum(u_det, cal: CalibrationConfig):
    """Map a detector coordinate in the pupil configuration to transverse momentum.

    Uses the 2f Fourier relation ``p = 2*pi*u_iris / (lambda*f1)`` with
    ``u_iris = u_det / pupil_relay_magnification``. The result is in hbar/m.
    """
    u_iris = u_det / cal.pupil_relay_magnification
    return 2.0 * math.pi * u_iris / (cal.wavelength * cal.f1)


def momentum_to_pupil_position(p, cal: CalibrationConfig):
    """Inverse of :func:`pupil_position_to_momentum`."""
    return p * cal.wavelength * cal.f1 * cal.pupil_relay_magnification / (2.0 * math.pi)


@dataclass(frozen=True, eq=False)
class Frame:
    """One camera exposure. ``values`` has shape (height, width)."""

    values: np.ndarray
    plane: Plane = Plane.IMAGE

    def __post_init__(self):
        values = np.asarray(self.values)
        if values.ndim != 2:
            raise ValueError(f"frame values must be 2D, got shape {values.shape}")
        if values.shape[0] < 2 or values.shape[1] < 2:
            raise ValueError(f"frame must be at least 2x2, got {values.shape}")
        if not np.all(np.isfinite(values)):
            raise ValueError("frame values must be finite")
        if values.flags.writeable:
            values = values.copy() if values.base is not None else values
            values.setflags(write=False)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "plane", Plane.parse(self.plane))

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    def __eq__(self, other):
        if not isinstance(other, Frame):
            return NotImplemented
        return self.plane == other.plane and np.array_equal(self.values, other.values)


class Stack(Sequence[Frame]):
    """Ordered frames sharing geometry, plus calibration and provenance.

    ``frames`` may be any sequence, including a lazily loaded one backed by a
    memory map, so a stack can be larger than memory.
    """

    def __init__(
        self,
        frames: Sequence[Frame],
        calibration: CalibrationConfig | None = None,
        pixel_pitch: float | None = None,
        metadata: Mapping[str, Any] | None = None,
        check: bool = True,
    ):
        self.calibration = calibration if calibration is not None else CalibrationConfig()
        self.pixel_pitch = float(pixel_pitch if pixel_pitch is not None else self.calibration.pixel_pitch)
        if not (math.isfinite(self.pixel_pitch) and self.pixel_pitch > 0):
            raise ValueError(f"pixel_pitch must be > 0, got {self.pixel_pitch!r}")
        self.metadata = dict(metadata or {})
        self._frames = frames
        if check and len(frames):
            first = frames[0]
            for i, frame in enumerate(frames):
                if frame.shape != first.shape or frame.plane != first.plane:
                    raise ValueError(
                        f"frame {i} has shape {frame.shape}/{frame.plane.value}, "
                        f"expected {first.shape}/{first.plane.value}"
                    )

    def __len__(self) -> int:
        return len(self._frames)

    def __getitem__(self, index):
        return self._frames[index]

    def __iter__(self) -> Iterator[Frame]:
        for i in range(len(self._frames)):
            yield self._frames[i]

    @property
    def frames(self) -> Sequence[Frame]:
        return self._frames

    @property
    def shape(self) -> tuple[int, int]:
        return self._frames[0].shape

    @property
    def plane(self) -> Plane:
        return self._frames[0].plane

    def as_array(self) -> np.ndarray:
        return np.stack([f.values for f in self])


@dataclass(frozen=True, eq=False)
class CorrelationMap:
    """Centered, odd-sized correlation map.

    The cell ``(size // 2, size // 2)`` is zero displacement (image plane) or
    zero position sum (pupil plane).
    """

    values: np.ndarray
    kind: MapKind
    plane: Plane
    frames_used: int = 0
    frames_background: int = 0
    background_lag: int = 0

    def __post_init__(self):
        values = np.array(self.values, dtype=np.float64)
        if values.ndim != 2 or values.shape[0] != values.shape[1]:
            raise ValueError(f"correlation map must be square, got shape {values.shape}")
        if values.shape[0] % 2 != 1:
            raise ValueError(f"correlation map size must be odd, got {values.shape[0]}")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "kind", MapKind(self.kind))
        object.__setattr__(self, "plane", Plane.parse(self.plane))

    @property
    def size(self) -> int:
        return self.values.shape[0]

    @property
    def center(self) -> int:
        return self.size // 2


@dataclass(frozen=True)
class EprResult:
    delta_x2: float
    delta_p2: float
    product_hbar2: float
    bound: float = EPR_BOUND
    violated: bool = field(init=False)
    violation_factor: float = field(init=False)

    def __post_init__(self):
        if not self.product_hbar2 > 0:
            raise ValueError(f"product must be > 0, got {self.product_hbar2!r}")
        object.__setattr__(self, "violated", bool(self.product_hbar2 < self.bound))
        object.__setattr__(self, "violation_factor", self.bound / self.product_hbar2)

    @property
    def delta_x(self) -> float:
        return math.sqrt(self.delta_x2)

    @property
    def delta_p(self) -> float:
        return math.sqrt(self.delta_p2)

    def to_dict(self) -> dict:
        return {
            "delta_x2": self.delta_x2,
            "delta_p2": self.delta_p2,
            "delta_x": self.delta_x,
            "delta_p": self.delta_p,
            "product_hbar2": self.product_hbar2,
            "bound": self.bound,
            "violated": self.violated,
            "violation_factor": self.violation_factor,
        }


def pixel_index(coord, n: int, pitch: float):
    """Pixel index holding detector coordinate ``coord`` along an axis of ``n`` pixels.

    The origin sits at the center of pixel ``n // 2``, so position sums and
    differences of pixel indices are exact multiples of the pitch.
    """
    return np.floor(np.asarray(coord) / pitch + 0.5).astype(np.int64) + n // 2


def pixel_center(index, n: int, pitch: float):
    return (np.asarray(index) - n // 2) * pitch
