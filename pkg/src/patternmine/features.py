"""Feature pyramids: extraction, normalization, and the AMFP file format.

A feature pyramid is a per-image stack of feature grids at geometrically
spaced scales.  Every cell holds a C-dimensional descriptor; after
normalization each non-zero descriptor has unit L2 norm, so a plain dot
product between cells is their cosine similarity.  Pyramids are immutable
after load and safe to share read-only across parallel workers.
"""

from __future__ import annotations

import dataclasses
import json
import math
import struct
from dataclasses import dataclass

import numpy as np
from PIL import Image
from scipy.ndimage import gaussian_filter

CELL_STRIDE_PX = 16
DEFAULT_BASE_MAX_DIM = 40
DEFAULT_NUM_SCALES = 7
DEFAULT_PER_OCTAVE = 3

AMFP_MAGIC = b"AMFP"
AMFP_VERSION = 1

ORIENT_BINS = 8
BUILTIN_CHANNELS = ORIENT_BINS + 3


class FormatError(ValueError):
    """Raised for malformed feature data or pyramid files."""


@dataclass(frozen=True)
class ImageManifestEntry:
    """One row of the dataset manifest (JSON-lines on disk)."""

    image_id: str
    source_path: str
    pixel_width: int
    pixel_height: int
    pyramid_path: str

    def __post_init__(self):
        if self.pixel_width <= 0 or self.pixel_height <= 0:
            raise FormatError(
                f"manifest entry {self.image_id!r}: dimensions must be positive"
            )


@dataclass
class FeatureMap:
    """A single H x W grid of C-dimensional descriptors at one scale."""

    scale_factor: float
    values: np.ndarray  # (H, W, C) float32

    def __post_init__(self):
        if not (0.0 < self.scale_factor <= 1.0):
            raise FormatError(f"scale_factor {self.scale_factor} not in (0, 1]")
        if self.values.ndim != 3:
            raise FormatError("feature map values must be H x W x C")

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def channels(self) -> int:
        return self.values.shape[2]


@dataclass
class FeaturePyramid:
    """Ordered stack of FeatureMaps, scales strictly decreasing."""

    image_id: str
    maps: list[FeatureMap]
    cell_stride_px: int = CELL_STRIDE_PX

    def __post_init__(self):
        scales = [m.scale_factor for m in self.maps]
        if any(b >= a for a, b in zip(scales, scales[1:])):
            raise FormatError("pyramid scales must be strictly decreasing")
        channels = {m.channels for m in self.maps}
        if len(channels) > 1:
            raise FormatError("all maps in a pyramid must share C")

    @property
    def channels(self) -> int:
        return self.maps[0].channels

    def cell_to_pixel(self, scale_index: int, row: float, col: float) -> tuple[float, float]:
        """Center of a cell in base-frame pixels (x, y)."""
        s = self.maps[scale_index].scale_factor
        k = self.cell_stride_px / s
        return ((col + 0.5) * k, (row + 0.5) * k)


@dataclass(frozen=True)
class GridPos:
    """A cell address inside one pyramid: (scale_index, row, col), 0-based."""

    scale_index: int
    row: int
    col: int


def default_scales(num_scales: int = DEFAULT_NUM_SCALES,
                   per_octave: int = DEFAULT_PER_OCTAVE) -> list[float]:
    """Geometric scale ladder: factor k is 2**(-k / per_octave)."""
    if num_scales < 1 or per_octave < 1:
        raise ValueError("num_scales and per_octave must be >= 1")
    return [2.0 ** (-k / per_octave) for k in range(num_scales)]


def l2_normalize_map(fmap: FeatureMap) -> FeatureMap:
    """Scale every cell descriptor to unit L2 norm; all-zero cells stay zero.

    Idempotent within floating-point precision.  Raises FormatError on
    non-finite input.
    """
    values = np.asarray(fmap.values, dtype=np.float32)
    if not np.all(np.isfinite(values)):
        raise FormatError("non-finite feature values")
    norms = np.linalg.norm(values, axis=2, keepdims=True)
    out = np.divide(values, norms, out=np.zeros_like(values), where=norms > 0)
    return FeatureMap(scale_factor=fmap.scale_factor, values=out)


def normalize_pyramid(pyr: FeaturePyramid) -> FeaturePyramid:
    return FeaturePyramid(
        image_id=pyr.image_id,
        maps=[l2_normalize_map(m) for m in pyr.maps],
        cell_stride_px=pyr.cell_stride_px,
    )


def _to_rgb_array(image) -> np.ndarray:
    if isinstance(image, Image.Image):
        return np.asarray(image.convert("RGB"), dtype=np.float32)
    arr = np.asarray(image, dtype=np.float32)
    if arr.ndim == 2:
        arr = np.stack([arr] * 3, axis=-1)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise FormatError("expected an HxWx3 pixel grid or PIL image")
    return arr


def _resize(arr: np.ndarray, width: int, height: int) -> np.ndarray:
    img = Image.fromarray(np.clip(arr, 0, 255).astype(np.uint8))
    return np.asarray(img.resize((width, height), Image.BILINEAR), dtype=np.float32)


def _extract_map(arr: np.ndarray, stride: int) -> np.ndarray:
    """Per-cell descriptor: 8-bin gradient-orientation histogram + mean RGB."""
    h, w = arr.shape[:2]
    rows = math.ceil(h / stride)
    cols = math.ceil(w / stride)
    gray = arr @ np.array([0.299, 0.587, 0.114], dtype=np.float32)
    # Smooth before differencing: central differences on raw pixels are
    # dominated by sensor/compression noise, which would swamp the
    # orientation histogram of anything but razor-sharp structure.
    gray = gaussian_filter(gray, sigma=2.0, mode="nearest")
    gy, gx = np.gradient(gray)
    mag = np.hypot(gx, gy)
    ang = np.arctan2(gy, gx)  # [-pi, pi)
    bins = np.floor((ang + np.pi) / (2 * np.pi) * ORIENT_BINS).astype(np.int64)
    bins = np.clip(bins, 0, ORIENT_BINS - 1)

    out = np.zeros((rows, cols, BUILTIN_CHANNELS), dtype=np.float32)
    for r in range(rows):
        for c in range(cols):
            ys = slice(r * stride, min((r + 1) * stride, h))
            xs = slice(c * stride, min((c + 1) * stride, w))
            hist = np.bincount(
                bins[ys, xs].ravel(), weights=mag[ys, xs].ravel(),
                minlength=ORIENT_BINS,
            )
            hist /= stride * stride
            # Both blocks are centered before normalization; without this
            # every descriptor lives in the positive orthant and unrelated
            # cells already score ~0.99 cosine, leaving no contrast.
            out[r, c, :ORIENT_BINS] = hist - hist.mean()
            rgb = arr[ys, xs].reshape(-1, 3).mean(axis=0) / 255.0
            out[r, c, ORIENT_BINS:] = rgb - 0.5
    return out


def builtin_extract(image, scales: list[float] | None = None,
                    image_id: str = "",
                    base_max_dim: int = DEFAULT_BASE_MAX_DIM,
                    stride: int = CELL_STRIDE_PX) -> FeaturePyramid:
    """Extract a normalized multi-scale pyramid with the built-in descriptor.

    The image is first resized so the base feature grid's longest side is
    ``base_max_dim`` cells; each further scale resizes that base image by
    its scale factor and re-extracts.  Descriptors are an 8-bin
    gradient-orientation histogram plus mean RGB (C = 11), L2-normalized.
    """
    if scales is None:
        scales = default_scales()
    arr = _to_rgb_array(image)
    h, w = arr.shape[:2]
    if h < 1 or w < 1:
        raise FormatError("empty image")

    target_long = base_max_dim * stride
    ratio = target_long / max(h, w)
    base_w = max(1, round(w * ratio))
    base_h = max(1, round(h * ratio))
    if min(base_w, base_h) < stride:
        raise FormatError("image smaller than one feature cell after resize")
    base = _resize(arr, base_w, base_h)

    maps = []
    for s in scales:
        sw = max(stride, round(base_w * s))
        sh = max(stride, round(base_h * s))
        scaled = base if s == 1.0 else _resize(base, sw, sh)
        values = _extract_map(scaled, stride)
        maps.append(l2_normalize_map(FeatureMap(scale_factor=s, values=values)))
    return FeaturePyramid(image_id=image_id, maps=maps, cell_stride_px=stride)


def write_pyramid_file(path, pyr: FeaturePyramid) -> None:
    """Serialize a pyramid to the AMFP binary format (little-endian)."""
    with open(path, "wb") as fh:
        fh.write(AMFP_MAGIC)
        fh.write(struct.pack("<III", AMFP_VERSION, pyr.channels, len(pyr.maps)))
        for m in pyr.maps:
            if not np.all(np.isfinite(m.values)):
                raise FormatError("refusing to write non-finite features")
            fh.write(struct.pack("<fII", m.scale_factor, m.height, m.width))
            fh.write(np.ascontiguousarray(m.values, dtype="<f4").tobytes())


def read_pyramid_file(path, image_id: str | None = None) -> FeaturePyramid:
    """Parse an AMFP file.  Raises FormatError on any malformed input."""
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != AMFP_MAGIC:
        raise FormatError(f"{path}: bad magic {data[:4]!r}")
    if len(data) < 16:
        raise FormatError(f"{path}: truncated header")
    version, channels, num_scales = struct.unpack_from("<III", data, 4)
    if version != AMFP_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    offset = 16
    maps = []
    for _ in range(num_scales):
        if offset + 12 > len(data):
            raise FormatError(f"{path}: truncated scale header")
        scale, h, w = struct.unpack_from("<fII", data, offset)
        offset += 12
        nbytes = h * w * channels * 4
        if offset + nbytes > len(data):
            raise FormatError(f"{path}: truncated payload")
        values = np.frombuffer(data, dtype="<f4", count=h * w * channels,
                               offset=offset).reshape(h, w, channels).copy()
        offset += nbytes
        if not np.all(np.isfinite(values)):
            raise FormatError(f"{path}: non-finite values")
        maps.append(FeatureMap(scale_factor=scale, values=values))
    return FeaturePyramid(image_id=image_id or str(path), maps=maps)


def read_manifest(path) -> list[ImageManifestEntry]:
    """Load a JSON-lines manifest; image_ids must be unique."""
    entries = []
    seen = set()
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            obj = json.loads(line)
            known = {f.name for f in dataclasses.fields(ImageManifestEntry)}
            entry = ImageManifestEntry(
                **{k: v for k, v in obj.items() if k in known})
            if entry.image_id in seen:
                raise FormatError(f"duplicate image_id {entry.image_id!r}")
            seen.add(entry.image_id)
            entries.append(entry)
    return entries


def write_manifest(path, entries: list[ImageManifestEntry]) -> None:
    with open(path, "w") as fh:
        for e in entries:
            fh.write(json.dumps({
                "image_id": e.image_id,
                "source_path": e.source_path,
                "pixel_width": e.pixel_width,
                "pixel_height": e.pixel_height,
                "pyramid_path": e.pyramid_path,
            }) + "\n")
