"""Monte Carlo synthesis of biphoton frame stacks.

Photon pairs are drawn from a double-Gaussian model, blurred by the
single-photon PSF, thinned by optical loss and quantum efficiency, binned
onto the sensor and passed through an sCMOS-like camera model with PRNU,
quadratic nonlinearity, read noise and an AR(1) illumination drift.

Every frame draws from its own RNG substream keyed by
``(master_seed, plane, frame_index)``; the drift chain is generated up front
from a separate substream. A stack is therefore a pure function of its
configuration and seed, whatever the number of worker threads.
"""

from __future__ import annotations

import enum
import hashlib
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np
from scipy import special, stats

from .core import (
    CalibrationConfig,
    Frame,
    Plane,
    Stack,
    image_magnification,
    momentum_to_pupil_position,
    pixel_index,
    pupil_position_to_momentum,
)

_PLANE_CODE = {Plane.IMAGE: 0, Plane.PUPIL: 1}
_DRIFT_STREAM = 1 << 20
_PRNU_STREAM = 1 << 21
ADC_MAX = 65535


class PsfModel(str, enum.Enum):
    GAUSSIAN = "gaussian"
    AIRY = "airy"


@dataclass(frozen=True)
class SourceConfig:
    """Phenomenological pair source. Positions in m (object plane), momenta in hbar/m."""

    sigma_pump: float = 150e-6
    sigma_pair: float = 6.49e-6
    sigma_psum: float = 6394.0
    sigma_pdiff: float = 15000.0
    pairs_per_frame_mean: float = 1000.0
    stray_photons_per_frame_mean: float = 0.0

    def __post_init__(self):
        for name in (
            "sigma_pump",
            "sigma_pair",
            "sigma_psum",
            "sigma_pdiff",
            "pairs_per_frame_mean",
            "stray_photons_per_frame_mean",
        ):
            value = getattr(self, name)
            if not (math.isfinite(value) and value >= 0):
                raise ValueError(f"{name} must be finite and >= 0, got {value!r}")

    @property
    def uncertainty_product(self) -> float:
        """sigma_pair * sigma_psum in units of hbar; below 0.5 means EPR-violating."""
        return self.sigma_pair * self.sigma_psum


@dataclass(frozen=True)
class OpticsSimConfig:
    aperture_diameter: float = 12e-3
    psf_model: PsfModel = PsfModel.GAUSSIAN
    psf_sigma: float = 3e-6
    transmission_eta: float = 1.0
    calibration: CalibrationConfig = field(default_factory=CalibrationConfig)

    def __post_init__(self):
        object.__setattr__(self, "psf_model", PsfModel(self.psf_model))
        if not (math.isfinite(self.aperture_diameter) and self.aperture_diameter > 0):
            raise ValueError(f"aperture_diameter must be > 0, got {self.aperture_diameter!r}")
        if not (math.isfinite(self.psf_sigma) and self.psf_sigma >= 0):
            raise ValueError(f"psf_sigma must be >= 0, got {self.psf_sigma!r}")
        if not 0.0 <= self.transmission_eta <= 1.0:
            raise ValueError(f"transmission_eta must lie in [0, 1], got {self.transmission_eta!r}")


@dataclass(frozen=True)
class CameraConfig:
    """sCMOS response. ``quantize`` rounds to integer ADU and clips to 16 bits."""

    width: int = 128
    height: int = 128
    qe: float = 0.8
    gain: float = 1.0
    read_noise_sigma: float = 1.5
    offset: float = 100.0
    prnu_amplitude: float = 0.0
    prnu_seed: int = 0
    nonlinearity_alpha: float = 0.0
    drift_rho: float = 0.0
    drift_amplitude: float = 0.0
    quantize: bool = True

    def __post_init__(self):
        if int(self.width) != self.width or int(self.height) != self.height:
            raise ValueError("width and height must be integers")
        if self.width < 2 or self.height < 2:
            raise ValueError(f"sensor must be at least 2x2, got {self.width}x{self.height}")
        if not 0.0 <= self.qe <= 1.0:
            raise ValueError(f"qe must lie in [0, 1], got {self.qe!r}")
        if not 0.0 <= self.drift_rho < 1.0:
            raise ValueError(f"drift_rho must lie in [0, 1), got {self.drift_rho!r}")
        for name in ("read_noise_sigma", "prnu_amplitude", "drift_amplitude", "gain"):
            value = getattr(self, name)
            if not (math.isfinite(value) and value >= 0):
                raise ValueError(f"{name} must be finite and >= 0, got {value!r}")
        if not (math.isfinite(self.offset) and math.isfinite(self.nonlinearity_alpha)):
            raise ValueError("offset and nonlinearity_alpha must be finite")


@dataclass(frozen=True)
class GroundTruth:
    source: SourceConfig
    optics: OpticsSimConfig
    camera: CameraConfig
    master_seed: int
    plane: Plane
    n_frames: int
    expected_peak_sigma_image: float
    expected_peak_sigma_pupil: float
    expected_pair_detection_rate: float
    expected_peak_sigma_detector: float
    in_sensor_fraction: float
    expected_mean_flux: float
    expected_peak_flux: float = 0.0

    def to_dict(self) -> dict:
        out = asdict(self)
        out["plane"] = self.plane.value
        out["optics"]["psf_model"] = self.optics.psf_model.value
        return out


@dataclass
class DriftState:
    """AR(1) illumination factor. ``current`` is filled in by :meth:`advance`."""

    previous: float = 1.0
    current: float | None = None

    def advance(self, camera: CameraConfig, rng: np.random.Generator) -> float:
        rho = camera.drift_rho
        noise = rng.normal(0.0, camera.drift_amplitude * math.sqrt(1.0 - rho * rho))
        self.current = 1.0 + rho * (self.previous - 1.0) + noise
        return self.current


# -- pair sampling -----------------------------------------------------------


def sample_pairs(source: SourceConfig, plane, cal: CalibrationConfig, n_pairs: int, rng: np.random.Generator):
    """Draw ``n_pairs`` photon pairs in ideal detector coordinates.

    Returns
    -------
    numpy.ndarray
        Shape ``(n_pairs, 2, 2)``: pair, photon, (x, y) in meters.
    """
    plane = Plane.parse(plane)
    if n_pairs < 0:
        raise ValueError(f"n_pairs must be >= 0, got {n_pairs}")
    if plane is Plane.IMAGE:
        centroid = rng.normal(0.0, 1.0, (n_pairs, 2)) * source.sigma_pump
        separation = rng.normal(0.0, 1.0, (n_pairs, 2)) * source.sigma_pair
        m = image_magnification(cal)
        first = (centroid + 0.5 * separation) * m
        second = (centroid - 0.5 * separation) * m
    else:
        psum = rng.normal(0.0, 1.0, (n_pairs, 2)) * source.sigma_psum
        q = rng.normal(0.0, 1.0, (n_pairs, 2)) * source.sigma_pdiff
        first = momentum_to_pupil_position(0.5 * psum + q, cal)
        second = momentum_to_pupil_position(0.5 * psum - q, cal)
    return np.stack([first, second], axis=1)


# -- Airy PSF ---------------------------------------------------------------

_AIRY_RINGS = 10
_AIRY_TABLE_SIZE = 20001


def _airy_table():
    # encircled energy of the Airy pattern: 1 - J0(v)^2 - J1(v)^2
    v_max = special.jn_zeros(1, _AIRY_RINGS)[-1]
    v = np.linspace(0.0, v_max, _AIRY_TABLE_SIZE)
    energy = 1.0 - special.j0(v) ** 2 - special.j1(v) ** 2
    return v, energy / energy[-1], energy[-1]


_AIRY_V, _AIRY_CDF, AIRY_TRUNCATED_ENERGY = _airy_table()


def airy_first_zero(aperture_diameter: float, wavelength: float, focal_length: float) -> float:
    """Radius of the first dark ring, 1.22 lambda f / D (exact Bessel zero)."""
    return special.jn_zeros(1, 1)[0] / math.pi * wavelength * focal_length / aperture_diameter


def sample_airy_radius(n: int, aperture_diameter: float, wavelength: float, focal_length: float, rng):
    """Radial distances drawn from the Airy intensity profile truncated at the 10th dark ring."""
    if not aperture_diameter > 0:
        raise ValueError(f"aperture_diameter must be > 0 for the Airy PSF, got {aperture_diameter!r}")
    v = np.interp(rng.random(n), _AIRY_CDF, _AIRY_V)
    return v * wavelength * focal_length / (math.pi * aperture_diameter)


def apply_psf_blur(positions: np.ndarray, optics: OpticsSimConfig, rng: np.random.Generator) -> np.ndarray:
    """Displace every photon independently by a draw from the PSF intensity profile.

    ``positions`` is any array whose last axis holds (x, y) detector coordinates.
    """
    positions = np.asarray(positions, dtype=np.float64)
    flat = positions.reshape(-1, 2)
    n = flat.shape[0]
    if optics.psf_model is PsfModel.GAUSSIAN:
        if optics.psf_sigma == 0:
            return positions.copy()
        shift = rng.normal(0.0, optics.psf_sigma, (n, 2))
    else:
        cal = optics.calibration
        r = sample_airy_radius(n, optics.aperture_diameter, cal.wavelength, cal.f2, rng)
        theta = rng.uniform(0.0, 2.0 * math.pi, n)
        shift = np.column_stack([r * np.cos(theta), r * np.sin(theta)])
    return (flat + shift).reshape(positions.shape)


def apply_loss(positions: np.ndarray, eta: float, rng: np.random.Generator):
    """Keep each photon independently with probability ``eta``.

    Returns
    -------
    tuple
        ``(pairs, singles)``: intact pairs with shape ``(k, 2, 2)`` and the
        surviving photons of broken pairs with shape ``(m, 2)``.
    """
    if not 0.0 <= eta <= 1.0:
        raise ValueError(f"eta must lie in [0, 1], got {eta!r}")
    positions = np.asarray(positions, dtype=np.float64).reshape(-1, 2, 2)
    if eta == 1.0:
        return positions.copy(), np.empty((0, 2))
    keep = rng.random(positions.shape[:2]) < eta
    both = keep.all(axis=1)
    one = keep.any(axis=1) & ~both
    singles = positions[one][keep[one]]
    return positions[both], singles.reshape(-1, 2)


def accumulate_counts(positions: np.ndarray, camera: CameraConfig, pixel_pitch: float, rng=None) -> np.ndarray:
    """Bin photons into a ``(height, width)`` count grid after QE thinning.

    Photons outside the sensor are dropped. ``rng`` is only needed when qe < 1.
    """
    xy = np.asarray(positions, dtype=np.float64).reshape(-1, 2)
    if camera.qe < 1.0:
        if camera.qe == 0.0:
            xy = xy[:0]
        else:
            xy = xy[rng.random(xy.shape[0]) < camera.qe]
    ix = pixel_index(xy[:, 0], camera.width, pixel_pitch)
    iy = pixel_index(xy[:, 1], camera.height, pixel_pitch)
    inside = (ix >= 0) & (ix < camera.width) & (iy >= 0) & (iy < camera.height)
    flat = iy[inside] * camera.width + ix[inside]
    counts = np.bincount(flat, minlength=camera.width * camera.height)
    return counts.reshape(camera.height, camera.width)


def prnu_map(camera: CameraConfig) -> np.ndarray:
    """Fixed per-pixel relative gain deviation, seeded by ``camera.prnu_seed``."""
    if camera.prnu_amplitude == 0:
        return np.zeros((camera.height, camera.width))
    rng = np.random.default_rng([camera.prnu_seed, _PRNU_STREAM])
    return rng.normal(0.0, camera.prnu_amplitude, (camera.height, camera.width))


def apply_camera(
    counts: np.ndarray,
    camera: CameraConfig,
    drift: DriftState,
    rng: np.random.Generator,
    plane=Plane.IMAGE,
    prnu: np.ndarray | None = None,
) -> Frame:
    """Convert a photon-count grid into camera output (ADU).

    If ``drift.current`` is unset the AR(1) chain is advanced with ``rng``.
    """
    s_t = drift.current if drift.current is not None else drift.advance(camera, rng)
    if prnu is None:
        prnu = prnu_map(camera)
    values = camera.offset + camera.gain * (1.0 + prnu) * s_t * counts
    if camera.nonlinearity_alpha:
        values = values + camera.nonlinearity_alpha * values * values
    if camera.read_noise_sigma:
        values = values + rng.normal(0.0, camera.read_noise_sigma, values.shape)
    if camera.quantize:
        values = np.clip(np.rint(values), 0, ADC_MAX)
    return Frame(values.astype(np.float64), plane)


def drift_chain(camera: CameraConfig, n_frames: int, master_seed: int) -> np.ndarray:
    """Pre-generated AR(1) illumination factors s_t, one per frame."""
    rng = np.random.default_rng([master_seed, _DRIFT_STREAM])
    out = np.empty(n_frames)
    state = DriftState()
    for i in range(n_frames):
        out[i] = state.advance(camera, rng)
        state = DriftState(previous=out[i])
    return out


# -- geometry bookkeeping ------------------------------------------------------


def illumination_sigma(source: SourceConfig, optics: OpticsSimConfig, plane) -> float:
    """Per-axis std of single-photon detector positions before PSF blur."""
    cal = optics.calibration
    if Plane.parse(plane) is Plane.IMAGE:
        return image_magnification(cal) * math.hypot(source.sigma_pump, 0.5 * source.sigma_pair)
    return momentum_to_pupil_position(math.hypot(0.5 * source.sigma_psum, source.sigma_pdiff), cal)


def _psf_sigma_for_bookkeeping(optics: OpticsSimConfig) -> float:
    # the truncated Airy profile is neglected in flux bookkeeping
    return optics.psf_sigma if optics.psf_model is PsfModel.GAUSSIAN else 0.0


def in_sensor_fraction(sigma: float, camera: CameraConfig, pitch: float) -> float:
    """Probability that a centered isotropic Gaussian point lands on the sensor."""

    def axis(n):
        lo = (-(n // 2) - 0.5) * pitch
        hi = (n - n // 2 - 0.5) * pitch
        if sigma == 0:
            return 1.0
        return stats.norm.cdf(hi / sigma) - stats.norm.cdf(lo / sigma)

    return float(axis(camera.width) * axis(camera.height))


def stray_radius(source: SourceConfig, optics: OpticsSimConfig, plane) -> float:
    return 3.0 * math.hypot(illumination_sigma(source, optics, plane), _psf_sigma_for_bookkeeping(optics))


def _stray_photons(n: int, radius: float, camera: CameraConfig, pitch: float, rng) -> np.ndarray:
    # uniform over the illuminated disk clipped to the sensor, by rejection
    half_w = np.array([camera.width // 2 + 0.5, camera.width - camera.width // 2 - 0.5]) * pitch
    half_h = np.array([camera.height // 2 + 0.5, camera.height - camera.height // 2 - 0.5]) * pitch
    out = np.empty((0, 2))
    while out.shape[0] < n:
        need = n - out.shape[0]
        batch = max(2 * need, 64)
        r = radius * np.sqrt(rng.random(batch))
        theta = rng.uniform(0.0, 2.0 * math.pi, batch)
        xy = np.column_stack([r * np.cos(theta), r * np.sin(theta)])
        ok = (xy[:, 0] >= -half_w[0]) & (xy[:, 0] < half_w[1]) & (xy[:, 1] >= -half_h[0]) & (xy[:, 1] < half_h[1])
        out = np.concatenate([out, xy[ok][:need]])
    return out


def ground_truth(source, optics, camera, n_frames, plane, master_seed) -> GroundTruth:
    plane = Plane.parse(plane)
    cal = optics.calibration
    m = image_magnification(cal)
    psf = _psf_sigma_for_bookkeeping(optics)
    sigma_image = math.sqrt(source.sigma_pair**2 + 2.0 * (psf / m) ** 2)
    sigma_sum_det = math.hypot(momentum_to_pupil_position(source.sigma_psum, cal), math.sqrt(2.0) * psf)
    sigma_pupil = pupil_position_to_momentum(sigma_sum_det, cal)
    if plane is Plane.IMAGE:
        sigma_det = m * sigma_image
    else:
        sigma_det = sigma_sum_det
    single = math.hypot(illumination_sigma(source, optics, plane), psf)
    frac = in_sensor_fraction(single, camera, cal.pixel_pitch)
    eta = optics.transmission_eta
    flux = (
        (2.0 * source.pairs_per_frame_mean * eta * frac + source.stray_photons_per_frame_mean)
        * camera.qe
        / (camera.width * camera.height)
    )
    # pair photons per frame on the pixel at the illumination center
    peak = 2.0 * source.pairs_per_frame_mean * eta * camera.qe * cal.pixel_pitch**2 / (2.0 * math.pi * single**2) if single > 0 else 0.0
    return GroundTruth(
        source=source,
        optics=optics,
        camera=camera,
        master_seed=int(master_seed),
        plane=plane,
        n_frames=int(n_frames),
        expected_peak_sigma_image=sigma_image,
        expected_peak_sigma_pupil=sigma_pupil,
        expected_pair_detection_rate=source.pairs_per_frame_mean * (eta * camera.qe) ** 2,
        expected_peak_sigma_detector=sigma_det,
        in_sensor_fraction=frac,
        expected_mean_flux=flux,
        expected_peak_flux=peak,
    )


def config_hash(*parts) -> str:
    blob = json.dumps([_jsonable(p) for p in parts], sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()


def _jsonable(obj):
    if hasattr(obj, "__dataclass_fields__"):
        return {k: _jsonable(v) for k, v in asdict(obj).items()}
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, enum.Enum):
        return obj.value
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    return obj


def render_frame(
    index: int,
    s_t: float,
    source: SourceConfig,
    optics: OpticsSimConfig,
    camera: CameraConfig,
    plane: Plane,
    master_seed: int,
    prnu: np.ndarray,
    stray_r: float,
) -> Frame:
    """Synthesize frame ``index`` from its own RNG substream."""
    rng = np.random.default_rng([master_seed, _PLANE_CODE[plane], index])
    cal = optics.calibration
    pitch = cal.pixel_pitch
    n_pairs = rng.poisson(max(s_t, 0.0) * source.pairs_per_frame_mean)
    pairs = sample_pairs(source, plane, cal, n_pairs, rng)
    pairs = apply_psf_blur(pairs, optics, rng)
    intact, singles = apply_loss(pairs, optics.transmission_eta, rng)
    n_stray = rng.poisson(source.stray_photons_per_frame_mean) if source.stray_photons_per_frame_mean else 0
    stray = _stray_photons(n_stray, stray_r, camera, pitch, rng) if n_stray else np.empty((0, 2))
    photons = np.concatenate([intact.reshape(-1, 2), singles, stray])
    counts = accumulate_counts(photons, camera, pitch, rng)
    return apply_camera(counts, camera, DriftState(current=s_t), rng, plane, prnu)


def simulate_stack(
    source: SourceConfig,
    optics: OpticsSimConfig,
    camera: CameraConfig,
    n_frames: int,
    plane=Plane.IMAGE,
    master_seed: int = 0,
    threads: int = 1,
) -> tuple[Stack, GroundTruth]:
    """Simulate a stack of ``n_frames`` frames and its ground-truth record."""
    plane = Plane.parse(plane)
    if n_frames < 1:
        raise ValueError(f"n_frames must be >= 1, got {n_frames}")
    radius = stray_radius(source, optics, plane)
    if source.stray_photons_per_frame_mean > 0 and radius == 0:
        raise ValueError("stray photons requested but the illuminated region has zero area")
    truth = ground_truth(source, optics, camera, n_frames, plane, master_seed)
    chain = drift_chain(camera, n_frames, master_seed)
    prnu = prnu_map(camera)

    def one(i):
        return render_frame(i, chain[i], source, optics, camera, plane, master_seed, prnu, radius)

    if threads == 1:
        frames = [one(i) for i in range(n_frames)]
    else:
        with ThreadPoolExecutor(max_workers=threads or None) as pool:
            frames = list(pool.map(one, range(n_frames)))
    metadata = {
        "master_seed": int(master_seed),
        "plane": plane.value,
        "config_hash": config_hash(source, optics, camera, n_frames, plane, master_seed),
        "drift": chain.tolist(),
    }
    return Stack(frames, optics.calibration, metadata=metadata, check=False), truth


def matched_flux_control(source: SourceConfig, optics: OpticsSimConfig, eta: float):
    """Attenuate downstream by ``eta`` and raise the pump so the detected flux is unchanged."""
    if not 0.0 < eta <= 1.0:
        raise ValueError(f"control eta must lie in (0, 1], got {eta!r}")
    ratio = optics.transmission_eta / eta
    return (
        replace(source, pairs_per_frame_mean=source.pairs_per_frame_mean * ratio),
        replace(optics, transmission_eta=eta),
    )
