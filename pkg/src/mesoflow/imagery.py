"""Frame data model, on-disk container, normalization, synthetic scenes.

The on-disk container ("GEOF") is a little-endian binary layout:

    magic "GEOF" | version u16=1 | reserved u16=0 | T u32 | C u32 | H u32 |
    W u32 | dtype u8=1 (float32) | 7 pad bytes | T*C*H*W float32 payload
    in (t, c, row, col) order

with a JSON sidecar ``<basename>.meta.json`` carrying band metadata,
timestamps, and optional normalization stats.  Round-trips are bit-exact.

All types are immutable after construction and safe to share across
threads.
"""

from __future__ import annotations

import dataclasses
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .errors import (
    ContractError,
    DegenerateDataError,
    FormatError,
    GridRangeError,
    ParameterError,
    ValidationError,
)
from .warpcore import FlowField, backward_warp

GEOF_MAGIC = b"GEOF"
GEOF_VERSION = 1
GEOF_DTYPE_FLOAT32 = 1
_HEADER = struct.Struct("<4sHHIIIIB7x")  # 32 bytes

MIN_DIM = 8
# Consecutive timestamps must be equally spaced to within this tolerance.
CADENCE_TOL_S = 1e-3


@dataclass(frozen=True)
class BandInfo:
    """Metadata for one spectral band.

    ``dynamic_range`` is the (min, max) physical range used as the PSNR
    peak; it is an artifact default, not an instrument calibration.
    """

    band_id: int
    central_wavelength_um: float
    spatial_resolution_km: float
    name: str
    dynamic_range: tuple[float, float]

    def __post_init__(self):
        if not 1 <= int(self.band_id) <= 16:
            raise ValidationError(f"band_id must be in 1..16, got {self.band_id}")
        lo, hi = self.dynamic_range
        if not lo < hi:
            raise ValidationError(f"dynamic_range min must be < max, got {self.dynamic_range}")

    @property
    def range_width(self) -> float:
        return float(self.dynamic_range[1] - self.dynamic_range[0])


def _band(band_id, wavelength, resolution, name):
    # Reflective bands live in [0, 1]; emissive bands get a brightness
    # temperature range in kelvin.  Defaults only; callers may override.
    rng = (0.0, 1.0) if band_id <= 6 else (180.0, 330.0)
    return BandInfo(band_id, wavelength, resolution, name, rng)


#: Default 16-band ABI-style band table (wavelength um, resolution km).
GOES_R_BANDS: dict[int, BandInfo] = {
    b.band_id: b
    for b in [
        _band(1, 0.47, 1.0, "Blue"),
        _band(2, 0.64, 0.5, "Red"),
        _band(3, 0.86, 1.0, "Veggie"),
        _band(4, 1.37, 1.0, "Cirrus"),
        _band(5, 1.6, 1.0, "Snow/Ice"),
        _band(6, 2.24, 2.0, "Cloud Particle Size"),
        _band(7, 3.9, 2.0, "Shortwave Window"),
        _band(8, 6.2, 2.0, "Upper-level Water Vapor"),
        _band(9, 6.9, 2.0, "Mid-level Water Vapor"),
        _band(10, 7.3, 2.0, "Low-Level Water Vapor"),
        _band(11, 8.4, 2.0, "Cloud-Top Phase"),
        _band(12, 9.6, 2.0, "Ozone"),
        _band(13, 10.3, 2.0, '"Clean" IR Longwave'),
        _band(14, 11.2, 2.0, "IR Longwave"),
        _band(15, 12.3, 2.0, '"Dirty" IR Longwave'),
        _band(16, 13.3, 2.0, "CO2 Longwave IR"),
    ]
}


def _freeze(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.flags.writeable = False
    return a


@dataclass(frozen=True)
class Frame:
    """A single-band image with a timestamp (seconds since epoch)."""

    pixels: np.ndarray
    band: BandInfo
    timestamp: float

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.float32)
        if px.ndim != 2:
            raise ValidationError(f"pixels must be 2-D, got shape {px.shape}")
        h, w = px.shape
        if h < MIN_DIM or w < MIN_DIM:
            raise ValidationError(f"frame must be at least {MIN_DIM}x{MIN_DIM}, got {h}x{w}")
        if not np.isfinite(px).all():
            raise ValidationError("frame contains non-finite pixels")
        object.__setattr__(self, "pixels", _freeze(px))

    @property
    def shape(self):
        return self.pixels.shape


@dataclass(frozen=True)
class FrameSequence:
    """Equally spaced frames sharing one band and one shape."""

    frames: tuple[Frame, ...]
    cadence_s: float = field(init=False)

    def __post_init__(self):
        frames = tuple(self.frames)
        if not frames:
            raise ValidationError("sequence must contain at least one frame")
        shape = frames[0].shape
        band = frames[0].band
        for f in frames[1:]:
            if f.shape != shape:
                raise ValidationError(f"all frames must share shape {shape}, got {f.shape}")
            if f.band.band_id != band.band_id:
                raise ValidationError("all frames must share one band")
        ts = np.array([f.timestamp for f in frames], dtype=np.float64)
        diffs = np.diff(ts)
        if len(diffs):
            if not (diffs > 0).all():
                raise ValidationError("timestamps must be strictly increasing")
            cadence = float(diffs[0])
            if np.abs(diffs - cadence).max() > CADENCE_TOL_S:
                raise ValidationError(
                    f"timestamps must be equally spaced within {CADENCE_TOL_S} s"
                )
        else:
            cadence = 0.0
        object.__setattr__(self, "frames", frames)
        object.__setattr__(self, "cadence_s", cadence)

    def __len__(self):
        return len(self.frames)

    def __getitem__(self, i) -> Frame:
        return self.frames[i]

    @property
    def band(self) -> BandInfo:
        return self.frames[0].band

    @property
    def shape(self):
        return self.frames[0].shape

    def pixel_stack(self) -> np.ndarray:
        """All frames as a (T, H, W) float32 array."""
        return np.stack([f.pixels for f in self.frames])

    def timestamps(self) -> np.ndarray:
        return np.array([f.timestamp for f in self.frames], dtype=np.float64)


@dataclass(frozen=True)
class NormStats:
    """Per-band standardization statistics (population std)."""

    mean: float
    std: float

    def __post_init__(self):
        if not np.isfinite(self.mean) or not np.isfinite(self.std):
            raise ValidationError("normalization stats must be finite")
        if self.std <= 0:
            raise DegenerateDataError(f"std must be > 0, got {self.std}")

    def normalize(self, x):
        return (x - self.mean) / self.std

    def denormalize(self, x):
        return x * self.std + self.mean


def compute_norm_stats(seqs: list[FrameSequence]) -> NormStats:
    """Mean/std over every pixel of every frame (population convention)."""
    if not seqs:
        raise ContractError("need at least one sequence")
    total = 0.0
    total_sq = 0.0
    count = 0
    for seq in seqs:
        px = seq.pixel_stack().astype(np.float64)
        total += float(px.sum())
        total_sq += float(np.square(px).sum())
        count += px.size
    mean = total / count
    var = total_sq / count - mean * mean
    std = float(np.sqrt(max(var, 0.0)))
    if std == 0.0:
        raise DegenerateDataError("pixels are constant; cannot standardize")
    return NormStats(mean=mean, std=std)


# ---------------------------------------------------------------------------
# GEOF container
# ---------------------------------------------------------------------------


def meta_path(path) -> Path:
    return Path(path).with_suffix(".meta.json")


def write_frames(seq: FrameSequence, path) -> None:
    """Write a sequence as a GEOF file plus its JSON metadata sidecar."""
    path = Path(path)
    t = len(seq)
    h, w = seq.shape
    header = _HEADER.pack(GEOF_MAGIC, GEOF_VERSION, 0, t, 1, h, w, GEOF_DTYPE_FLOAT32)
    payload = seq.pixel_stack().astype("<f4").tobytes()
    path.write_bytes(header + payload)

    band = seq.band
    meta = {
        "band_id": band.band_id,
        "name": band.name,
        "central_wavelength_um": band.central_wavelength_um,
        "resolution_km": band.spatial_resolution_km,
        "dynamic_range": list(band.dynamic_range),
        "timestamps": [f.timestamp for f in seq.frames],
        "norm": None,
    }
    meta_path(path).write_text(json.dumps(meta, indent=2))


def read_frames(path) -> FrameSequence:
    """Read a GEOF file; the inverse of :func:`write_frames`, bit-exact."""
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < _HEADER.size:
        raise FormatError(f"file too short for header ({len(raw)} bytes)", offset=len(raw))
    magic, version, _reserved, t, c, h, w, dtype = _HEADER.unpack_from(raw)
    if magic != GEOF_MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {GEOF_MAGIC!r}", offset=0)
    if version != GEOF_VERSION:
        raise FormatError(f"unsupported version {version}", offset=4)
    if c != 1:
        raise ValidationError(f"only single-channel files are supported, got C={c}")
    if t < 1:
        raise ValidationError(f"frame count must be >= 1, got {t}")
    if h < MIN_DIM or w < MIN_DIM:
        raise ValidationError(f"dimensions must be at least {MIN_DIM}, got H={h} W={w}")
    if dtype != GEOF_DTYPE_FLOAT32:
        raise FormatError(f"unsupported dtype code {dtype}", offset=24)
    expected = _HEADER.size + t * c * h * w * 4
    if len(raw) != expected:
        raise FormatError(
            f"payload size mismatch: file has {len(raw)} bytes, header implies {expected}",
            offset=_HEADER.size,
        )
    data = np.frombuffer(raw, dtype="<f4", offset=_HEADER.size).reshape(t, h, w).copy()
    if not np.isfinite(data).all():
        raise ValidationError("payload contains non-finite values")

    mp = meta_path(path)
    if not mp.exists():
        raise FormatError(f"missing metadata sidecar {mp.name}", offset=len(raw))
    meta = json.loads(mp.read_text())
    band = BandInfo(
        band_id=meta["band_id"],
        central_wavelength_um=meta["central_wavelength_um"],
        spatial_resolution_km=meta["resolution_km"],
        name=meta["name"],
        dynamic_range=tuple(meta["dynamic_range"]),
    )
    timestamps = meta["timestamps"]
    if len(timestamps) != t:
        raise ValidationError(
            f"sidecar lists {len(timestamps)} timestamps but file holds {t} frames"
        )
    frames = [Frame(pixels=data[k], band=band, timestamp=timestamps[k]) for k in range(t)]
    return FrameSequence(frames=tuple(frames))


def read_header(path) -> dict:
    """Parse just the fixed-size GEOF header into a dict."""
    raw = Path(path).read_bytes()[: _HEADER.size]
    if len(raw) < _HEADER.size:
        raise FormatError(f"file too short for header ({len(raw)} bytes)", offset=len(raw))
    magic, version, _reserved, t, c, h, w, dtype = _HEADER.unpack_from(raw)
    return {
        "magic": magic.decode("ascii", "replace"),
        "version": version,
        "frames": t,
        "channels": c,
        "height": h,
        "width": w,
        "dtype": dtype,
    }


def read_norm(path) -> NormStats | None:
    meta = json.loads(meta_path(path).read_text())
    if meta.get("norm"):
        return NormStats(mean=meta["norm"]["mean"], std=meta["norm"]["std"])
    return None


def write_norm(path, stats: NormStats) -> None:
    mp = meta_path(path)
    meta = json.loads(mp.read_text())
    meta["norm"] = {"mean": stats.mean, "std": stats.std}
    mp.write_text(json.dumps(meta, indent=2))


def flows_path(path) -> Path:
    return Path(path).with_suffix(".flows.npz")


def write_flows(flows: list[FlowField], path) -> None:
    """Store per-step ground-truth flows next to a GEOF file."""
    u = np.stack([f.u for f in flows])
    v = np.stack([f.v for f in flows])
    np.savez(flows_path(path), u=u, v=v)


def read_flows(path) -> list[FlowField]:
    with np.load(flows_path(path)) as z:
        u, v = z["u"], z["v"]
    return [FlowField(u=u[k], v=v[k]) for k in range(u.shape[0])]


# ---------------------------------------------------------------------------
# Synthetic advection scenes
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Translation:
    """Uniform motion, pixels per frame."""

    vx: float
    vy: float


@dataclass(frozen=True)
class Rotation:
    """Solid-body rotation about ``center`` (x, y), radians per frame."""

    center: tuple[float, float]
    omega: float


@dataclass(frozen=True)
class Vortex:
    """Gaussian vortex: tangential speed peaks near ``radius`` and decays."""

    center: tuple[float, float]
    strength: float
    radius: float


@dataclass(frozen=True)
class RampEvent:
    """Localized brightness ramp: ``delta`` added per frame inside ``radius``."""

    center: tuple[float, float]
    radius: float
    delta: float


@dataclass(frozen=True)
class TextureParams:
    """Gaussian-blob texture: blob count, sigma range (px), amplitude range."""

    count: int = 25
    sigma_range: tuple[float, float] = (3.0, 7.0)
    amplitude_range: tuple[float, float] = (0.4, 1.0)


@dataclass(frozen=True)
class SyntheticScene:
    """Deterministic moving-texture scene with known per-frame flows.

    Pixels live on a unit-ish scale; ``value_range`` becomes the emitted
    band's dynamic range so PSNR peaks match the data.
    """

    seed: int
    velocity_params: tuple = ()
    texture_params: TextureParams = TextureParams()
    ramp_events: tuple[RampEvent, ...] = ()
    T: int = 15
    H: int = 64
    W: int = 64
    band_id: int = 13
    cadence_s: float = 60.0
    t0: float = 0.0
    value_range: tuple[float, float] = (0.0, 2.0)

    def __post_init__(self):
        if self.T < 2:
            raise ParameterError(f"scene needs at least 2 frames, got T={self.T}")
        if self.H < MIN_DIM or self.W < MIN_DIM:
            raise ParameterError(f"scene must be at least {MIN_DIM}x{MIN_DIM}")


def velocity_field(scene: SyntheticScene) -> tuple[np.ndarray, np.ndarray]:
    """Per-frame displacement (u, v) at pixel centers, summed over primitives."""
    ys, xs = np.mgrid[0 : scene.H, 0 : scene.W].astype(np.float64)
    u = np.zeros((scene.H, scene.W), np.float64)
    v = np.zeros((scene.H, scene.W), np.float64)
    for prim in scene.velocity_params:
        if isinstance(prim, Translation):
            u += prim.vx
            v += prim.vy
        elif isinstance(prim, Rotation):
            cx, cy = prim.center
            u += -prim.omega * (ys - cy)
            v += prim.omega * (xs - cx)
        elif isinstance(prim, Vortex):
            cx, cy = prim.center
            dx = xs - cx
            dy = ys - cy
            r2 = dx * dx + dy * dy
            scale = prim.strength * np.exp(-r2 / (2.0 * prim.radius**2)) / prim.radius
            u += -scale * dy
            v += scale * dx
        else:
            raise ParameterError(f"unknown motion primitive {type(prim).__name__}")
    return u.astype(np.float32), v.astype(np.float32)


def _blob_texture(scene: SyntheticScene) -> np.ndarray:
    rng = np.random.default_rng(scene.seed)
    tp = scene.texture_params
    ys, xs = np.mgrid[0 : scene.H, 0 : scene.W].astype(np.float64)
    img = np.zeros((scene.H, scene.W), np.float64)
    for _ in range(tp.count):
        px = rng.uniform(0, scene.W)
        py = rng.uniform(0, scene.H)
        sigma = rng.uniform(*tp.sigma_range)
        amp = rng.uniform(*tp.amplitude_range)
        img += amp * np.exp(-((xs - px) ** 2 + (ys - py) ** 2) / (2.0 * sigma**2))
    return img.astype(np.float32)


def _ramp_profile(scene: SyntheticScene, ev: RampEvent) -> np.ndarray:
    # Flat core with a cosine taper over the outer 25% of the radius.
    ys, xs = np.mgrid[0 : scene.H, 0 : scene.W].astype(np.float64)
    cx, cy = ev.center
    r = np.sqrt((xs - cx) ** 2 + (ys - cy) ** 2)
    inner = 0.75 * ev.radius
    prof = np.zeros_like(r)
    prof[r <= inner] = 1.0
    taper = (r > inner) & (r <= ev.radius)
    prof[taper] = 0.5 * (1 + np.cos(np.pi * (r[taper] - inner) / (ev.radius - inner)))
    return prof.astype(np.float32)


def generate_synthetic(scene: SyntheticScene) -> tuple[FrameSequence, list[FlowField]]:
    """Build a scene whose per-step flows are known exactly.

    The last frame is an analytic Gaussian-blob texture; each earlier frame
    is produced by backward-warping its successor through the velocity
    field.  Warping frame k+1 by the returned flow therefore reproduces
    frame k exactly (the generator and the warp are the same operator),
    which is what makes these scenes usable as a flow oracle.  Ramp events
    add a per-frame brightness delta inside their disk on top of the
    advected texture.
    """
    u, v = velocity_field(scene)
    max_disp = float(np.sqrt(u.astype(np.float64) ** 2 + v.astype(np.float64) ** 2).max())
    limit = min(scene.H, scene.W) / 4.0
    if max_disp > limit:
        raise ParameterError(
            f"velocity_params displacement {max_disp:.2f} px/frame exceeds "
            f"min(H, W)/4 = {limit:.2f}"
        )

    flow_t = torch.stack([torch.from_numpy(u), torch.from_numpy(v)])
    frames_px = [None] * scene.T
    frames_px[scene.T - 1] = _blob_texture(scene)
    for k in range(scene.T - 2, -1, -1):
        nxt = torch.from_numpy(frames_px[k + 1])
        frames_px[k] = backward_warp(nxt, flow_t).numpy().astype(np.float32)

    if scene.ramp_events:
        ramp = np.zeros((scene.H, scene.W), np.float32)
        for ev in scene.ramp_events:
            ramp += ev.delta * _ramp_profile(scene, ev)
        for k in range(scene.T):
            frames_px[k] = frames_px[k] + np.float32(k) * ramp

    band = dataclasses.replace(GOES_R_BANDS[scene.band_id], dynamic_range=scene.value_range)
    frames = [
        Frame(pixels=frames_px[k], band=band, timestamp=scene.t0 + k * scene.cadence_s)
        for k in range(scene.T)
    ]
    flows = [FlowField(u=u, v=v) for _ in range(scene.T - 1)]
    return FrameSequence(frames=tuple(frames)), flows


def extract_point_series(seq: FrameSequence, pixel) -> list[tuple[float, float]]:
    """Nearest-pixel value series at ``pixel`` = (row, col), physical units."""
    h, w = seq.shape
    row = int(round(float(pixel[0])))
    col = int(round(float(pixel[1])))
    if not (0 <= row < h and 0 <= col < w):
        raise GridRangeError(f"pixel ({row}, {col}) outside grid {h}x{w}")
    return [(f.timestamp, float(f.pixels[row, col])) for f in seq.frames]
