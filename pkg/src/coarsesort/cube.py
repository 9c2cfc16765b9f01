"""Multispectral band model, capture containers and the MSC1 cube format.

The sensor node has three cameras (UV, VIS/NIR, SWIR) and thirteen filter
configurations. The unfiltered VIS/NIR capture is RGB, so a registered
cube carries 15 channels.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import InvalidInputError

CAMERAS = ("UV", "VISNIR", "SWIR")
N_CHANNELS = 15
WAVELENGTH_LIMITS_NM = (190.0, 1700.0)
MSC1_MAGIC = b"MSC1"


@dataclass(frozen=True)
class BandSpec:
    filter_index: int
    camera: str
    passbands_nm: tuple[tuple[float, float], ...]
    exposure_s: float
    channel_count: int = 1

    def __post_init__(self):
        if self.camera not in CAMERAS:
            raise InvalidInputError(f"unknown camera {self.camera!r}")
        if not 0 <= self.filter_index <= 12:
            raise InvalidInputError(f"filter_index {self.filter_index} outside 0..12")
        if not 1 <= len(self.passbands_nm) <= 2:
            raise InvalidInputError("a band has one or two passbands")
        lo_lim, hi_lim = WAVELENGTH_LIMITS_NM
        for lo, hi in self.passbands_nm:
            if not (lo_lim <= lo < hi <= hi_lim):
                raise InvalidInputError(f"bad passband ({lo}, {hi})")
        if self.channel_count not in (1, 3):
            raise InvalidInputError("channel_count must be 1 or 3")
        if self.exposure_s <= 0:
            raise InvalidInputError("exposure must be positive")


# (camera, passbands, exposure [s]) per filter index, lab setting
_TABLE = (
    ("UV", ((190, 1100),), 0.3),
    ("UV", ((290, 365),), 5.0),
    ("UV", ((375, 425), (745, 970)), 1.0),
    ("VISNIR", ((400, 1000),), 0.01),
    ("VISNIR", ((730, 755),), 0.05),
    ("VISNIR", ((830, 865),), 0.1),
    ("VISNIR", ((845, 930),), 0.1),
    ("VISNIR", ((928, 955),), 0.4),
    ("SWIR", ((400, 1700),), 0.04),
    ("SWIR", ((930, 1030),), 0.4),
    ("SWIR", ((1290, 1310),), 1.0),
    ("SWIR", ((1440, 1460),), 1.5),
    ("SWIR", ((1485, 1645),), 0.4),
)
RGB_FILTER_INDEX = 3


def canonical_band_table() -> list[BandSpec]:
    """The 13 filter configurations of the sensor node, in index order."""
    return [
        BandSpec(
            filter_index=i,
            camera=cam,
            passbands_nm=tuple((float(lo), float(hi)) for lo, hi in bands),
            exposure_s=exp,
            channel_count=3 if i == RGB_FILTER_INDEX else 1,
        )
        for i, (cam, bands, exp) in enumerate(_TABLE)
    ]


@dataclass(frozen=True)
class ChannelMeta:
    filter_index: int
    camera: str
    passbands_nm: tuple[tuple[float, float], ...]
    rgb_component: str | None = None

    def to_json(self) -> dict:
        return {
            "filter_index": self.filter_index,
            "camera": self.camera,
            "passbands_nm": [list(p) for p in self.passbands_nm],
            "rgb_component": self.rgb_component,
        }

    @classmethod
    def from_json(cls, d: dict) -> "ChannelMeta":
        return cls(
            filter_index=int(d["filter_index"]),
            camera=d["camera"],
            passbands_nm=tuple((float(lo), float(hi)) for lo, hi in d["passbands_nm"]),
            rgb_component=d.get("rgb_component"),
        )


def canonical_channel_meta() -> list[ChannelMeta]:
    """Per-channel metadata of a 15-channel cube (RGB capture expanded to R, G, B)."""
    meta = []
    for band in canonical_band_table():
        if band.channel_count == 3:
            meta.extend(
                ChannelMeta(band.filter_index, band.camera, band.passbands_nm, c) for c in "RGB"
            )
        else:
            meta.append(ChannelMeta(band.filter_index, band.camera, band.passbands_nm))
    return meta


def channels_for_camera(camera: str, include_unfiltered: bool = True) -> list[int]:
    """Cube channel indices recorded by ``camera``.

    ``include_unfiltered=False`` drops the camera's broadband capture
    (filter indices 0, 3 and 8).
    """
    broadband = {0, 3, 8}
    return [
        i
        for i, m in enumerate(canonical_channel_meta())
        if m.camera == camera and (include_unfiltered or m.filter_index not in broadband)
    ]


def format_band_table(table: list[BandSpec] | None = None) -> str:
    table = canonical_band_table() if table is None else table
    lines = [f"{'Index':>5}  {'Camera':<7} {'Spectrum[nm]':<22} {'Exposure[s]':>11}  {'Ch':>2}"]
    for b in table:
        spectrum = " ".join(f"{lo:g}-{hi:g}" for lo, hi in b.passbands_nm)
        lines.append(
            f"{b.filter_index:>5}  {b.camera:<7} {spectrum:<22} {b.exposure_s:>11g}  {b.channel_count:>2}"
        )
    lines.append(f"channels total: {sum(b.channel_count for b in table)}")
    return "\n".join(lines)


@dataclass(frozen=True)
class RawCapture:
    image: np.ndarray
    band: BandSpec
    exposure_used_s: float
    timestamp: float = 0.0
    series_id: str = ""

    def __post_init__(self):
        img = np.asarray(self.image, dtype=float)
        if img.ndim == 2:
            img = img[:, :, None]
        if img.ndim != 3 or img.shape[2] != self.band.channel_count:
            raise InvalidInputError(
                f"capture has {img.shape[-1] if img.ndim == 3 else '?'} channels, "
                f"band {self.band.filter_index} expects {self.band.channel_count}"
            )
        if not np.all(np.isfinite(img)) or np.any(img < 0):
            raise InvalidInputError("capture values must be finite and non-negative")
        img.setflags(write=False)
        object.__setattr__(self, "image", img)


def load_raw_capture(png_path: str | Path) -> RawCapture:
    """Read an 8/16-bit grayscale or RGB PNG plus its JSON sidecar.

    The sidecar lives next to the PNG with a ``.json`` suffix and names at
    least ``filter_index``; ``exposure_s``, ``timestamp`` and ``series_id``
    are optional.
    """
    from PIL import Image

    png_path = Path(png_path)
    sidecar = json.loads(png_path.with_suffix(".json").read_text())
    band = canonical_band_table()[int(sidecar["filter_index"])]
    with Image.open(png_path) as im:
        arr = np.asarray(im).astype(float)
    return RawCapture(
        image=arr,
        band=band,
        exposure_used_s=float(sidecar.get("exposure_s", band.exposure_s)),
        timestamp=float(sidecar.get("timestamp", 0.0)),
        series_id=str(sidecar.get("series_id", "")),
    )


def normalize_image(image: np.ndarray) -> np.ndarray:
    """Per-channel min-max scaling to [0, 1]; constant channels become zero."""
    img = np.asarray(image, dtype=float)
    if not np.all(np.isfinite(img)):
        raise InvalidInputError("image contains non-finite values")
    squeeze = img.ndim == 2
    if squeeze:
        img = img[:, :, None]
    lo = img.min(axis=(0, 1), keepdims=True)
    span = img.max(axis=(0, 1), keepdims=True) - lo
    out = np.zeros_like(img)
    ok = (span > 0).ravel()
    out[:, :, ok] = (img[:, :, ok] - lo[:, :, ok]) / span[:, :, ok]
    return out[:, :, 0] if squeeze else out


def bilinear_sample(image: np.ndarray, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    """Sample ``image`` (H×W or H×W×C) at float pixel coordinates.

    Coordinates are clamped to the image; integer coordinates return the
    stored pixel exactly.
    """
    h, w = image.shape[:2]
    xs = np.clip(xs, 0.0, w - 1.0)
    ys = np.clip(ys, 0.0, h - 1.0)
    x0 = np.floor(xs).astype(int)
    y0 = np.floor(ys).astype(int)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = xs - x0
    fy = ys - y0
    if image.ndim == 3:
        fx = fx[..., None]
        fy = fy[..., None]
    top = image[y0, x0] * (1 - fx) + image[y0, x1] * fx
    bot = image[y1, x0] * (1 - fx) + image[y1, x1] * fx
    return top * (1 - fy) + bot * fy


def crop_and_rescale(capture, roi, target_w: int, target_h: int) -> np.ndarray:
    """Crop ``roi = (x, y, w, h)`` and resample it bilinearly to target_w×target_h.

    ``capture`` is a RawCapture or a bare array. Pixel centres are aligned,
    so a full-image roi at source resolution is an exact copy.
    """
    img = capture.image if isinstance(capture, RawCapture) else np.asarray(capture, dtype=float)
    x, y, w, h = (int(v) for v in roi)
    H, W = img.shape[:2]
    if w <= 0 or h <= 0:
        raise InvalidInputError("roi has zero area")
    if x < 0 or y < 0 or x + w > W or y + h > H:
        raise InvalidInputError(f"roi {roi} exceeds image bounds {W}x{H}")
    if target_w <= 0 or target_h <= 0:
        raise InvalidInputError("target dimensions must be positive")
    crop = img[y : y + h, x : x + w]
    if (w, h) == (target_w, target_h):
        return crop.copy()
    xs = (np.arange(target_w) + 0.5) * (w / target_w) - 0.5
    ys = (np.arange(target_h) + 0.5) * (h / target_h) - 0.5
    gx, gy = np.meshgrid(xs, ys)
    return bilinear_sample(crop, gx, gy)


@dataclass(frozen=True)
class ExposureConfig:
    strategy: str = "MeanBrightness"
    target_mean: float = 0.45
    bracket_factors: tuple[float, ...] = (0.5, 1.0, 2.0)
    patch_roi: tuple[int, int, int, int] | None = None
    bounds_s: tuple[float, float] = (1e-4, 10.0)

    def __post_init__(self):
        if self.strategy not in ("MeanBrightness", "Bracketing", "CalibrationPatch"):
            raise InvalidInputError(f"unknown exposure strategy {self.strategy!r}")
        if not self.bounds_s[0] < self.bounds_s[1]:
            raise InvalidInputError("exposure bounds must satisfy min < max")
        if not 0 < self.target_mean < 1:
            raise InvalidInputError("target_mean must be in (0, 1)")
        f = np.asarray(self.bracket_factors, dtype=float)
        if f.size == 0 or np.any(f <= 0) or np.any(np.diff(f) <= 0):
            raise InvalidInputError("bracket factors must be positive and strictly increasing")


def patch_mean(image: np.ndarray, config: ExposureConfig, full_scale: float = 1.0) -> float:
    """Observed brightness fed to ``adapt_exposure`` as a fraction of full scale."""
    img = np.asarray(image, dtype=float)
    if config.strategy == "CalibrationPatch" and config.patch_roi is not None:
        x, y, w, h = config.patch_roi
        img = img[y : y + h, x : x + w]
    return float(img.mean() / full_scale)


def adapt_exposure(config: ExposureConfig, recent_means, current_exposure_s: float):
    """Next exposure time (or list of bracket exposures for ``Bracketing``)."""
    lo, hi = config.bounds_s
    if not lo <= current_exposure_s <= hi:
        raise InvalidInputError("current exposure outside configured bounds")
    if config.strategy == "Bracketing":
        return [current_exposure_s * f for f in config.bracket_factors]
    means = np.atleast_1d(np.asarray(recent_means, dtype=float))
    if means.size == 0:
        raise InvalidInputError("recent_means must not be empty")
    observed = float(means[-1])
    if observed <= 0:
        return hi
    return float(np.clip(current_exposure_s * config.target_mean / observed, lo, hi))


def merge_brackets(images, exposures, full_scale: float = 1.0) -> np.ndarray:
    """HDR merge: per pixel keep the bracket sample nearest mid-scale.

    The chosen sample is divided by its exposure, giving intensity per second.
    """
    stack = np.stack([np.asarray(im, dtype=float) for im in images])
    exp = np.asarray(exposures, dtype=float).reshape((-1,) + (1,) * (stack.ndim - 1))
    best = np.argmin(np.abs(stack - 0.5 * full_scale), axis=0)
    chosen = np.take_along_axis(stack / exp, best[None], axis=0)[0]
    return chosen


@dataclass(frozen=True)
class SpectralCube:
    channels: np.ndarray  # H×W×15
    channel_meta: tuple[ChannelMeta, ...]
    validity_mask: np.ndarray  # H×W bool
    normalized: bool = False
    extras: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        ch = np.asarray(self.channels, dtype=float)
        if ch.ndim != 3 or ch.shape[2] != N_CHANNELS:
            raise InvalidInputError(f"cube needs H×W×{N_CHANNELS} channels, got {ch.shape}")
        if len(self.channel_meta) != N_CHANNELS:
            raise InvalidInputError("channel_meta must have 15 entries")
        mask = np.asarray(self.validity_mask, dtype=bool)
        if mask.shape != ch.shape[:2]:
            raise InvalidInputError("mask shape does not match cube")
        if not np.all(np.isfinite(ch)):
            raise InvalidInputError("cube values must be finite")
        ch.setflags(write=False)
        mask.setflags(write=False)
        object.__setattr__(self, "channels", ch)
        object.__setattr__(self, "validity_mask", mask)
        object.__setattr__(self, "channel_meta", tuple(self.channel_meta))

    @property
    def height(self) -> int:
        return self.channels.shape[0]

    @property
    def width(self) -> int:
        return self.channels.shape[1]


def assemble_cube(registered_planes, channel_meta=None, masks=None, normalized=False) -> SpectralCube:
    """Stack 15 registered planes; the cube mask is the AND of plane masks."""
    planes = [np.asarray(p, dtype=float) for p in registered_planes]
    if len(planes) != N_CHANNELS:
        raise InvalidInputError(f"expected {N_CHANNELS} planes, got {len(planes)}")
    shape = planes[0].shape
    if any(p.shape != shape or p.ndim != 2 for p in planes):
        raise InvalidInputError("planes must be 2-D with identical dimensions")
    meta = canonical_channel_meta() if channel_meta is None else list(channel_meta)
    if [m.filter_index for m in meta] != sorted(m.filter_index for m in meta):
        raise InvalidInputError("channel_meta not in canonical filter order")
    mask = np.ones(shape, dtype=bool)
    if masks is not None:
        for m in masks:
            m = np.asarray(m, dtype=bool)
            if m.shape != shape:
                raise InvalidInputError("mask dimensions do not match planes")
            mask &= m
    return SpectralCube(np.stack(planes, axis=-1), tuple(meta), mask, normalized)


def write_cube(cube: SpectralCube, path: str | Path) -> None:
    header = json.dumps(
        {
            "width": cube.width,
            "height": cube.height,
            "channels": N_CHANNELS,
            "normalized": cube.normalized,
            "channel_meta": [m.to_json() for m in cube.channel_meta],
        },
        sort_keys=True,
    ).encode("utf-8")
    planes = np.ascontiguousarray(np.moveaxis(cube.channels, -1, 0), dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(MSC1_MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        fh.write(planes.tobytes())
        fh.write(cube.validity_mask.astype(np.uint8).tobytes())


def read_cube(path: str | Path) -> SpectralCube:
    data = Path(path).read_bytes()
    if data[:4] != MSC1_MAGIC:
        raise InvalidInputError(f"{path}: not an MSC1 file")
    (hlen,) = struct.unpack("<I", data[4:8])
    header = json.loads(data[8 : 8 + hlen].decode("utf-8"))
    w, h = int(header["width"]), int(header["height"])
    if int(header["channels"]) != N_CHANNELS:
        raise InvalidInputError("MSC1 file must hold 15 channels")
    off = 8 + hlen
    n = w * h
    if len(data) != off + 4 * n * N_CHANNELS + n:
        raise InvalidInputError(f"{path}: truncated or oversized MSC1 payload")
    planes = np.frombuffer(data, dtype="<f4", count=n * N_CHANNELS, offset=off)
    planes = planes.reshape(N_CHANNELS, h, w).astype(float)
    mask = np.frombuffer(data, dtype=np.uint8, count=n, offset=off + 4 * n * N_CHANNELS)
    return SpectralCube(
        np.moveaxis(planes, 0, -1),
        tuple(ChannelMeta.from_json(m) for m in header["channel_meta"]),
        mask.reshape(h, w).astype(bool),
        bool(header["normalized"]),
    )
