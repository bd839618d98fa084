"""Export conv4 feature pyramids from a ResNet-18 backbone to AMFP files.

The exporter speaks two on-disk interfaces shared with the matching
engine and nothing else: the AMFP binary feature format and the
JSON-lines image manifest.  Features are written raw (pre-normalization);
the consumer owns L2 normalization so built-in and exported features go
through one code path.
"""

from __future__ import annotations

import functools
import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image
from torchvision.models import resnet18

logger = logging.getLogger(__name__)

AMFP_MAGIC = b"AMFP"
AMFP_VERSION = 1
BACKBONE_STRIDE = 16  # pixels per feature cell at the conv4 block output

# conv4 in ResNet nomenclature (conv4_x) is torchvision's `layer3`:
# total stride 16, 256 channels.
DEFAULT_LAYER = "layer3"

FALLBACK_SEED = 0  # deterministic random init when pretrained weights are absent


def default_scales(num_scales: int = 7, per_octave: int = 3) -> list[float]:
    return [2.0 ** (-k / per_octave) for k in range(num_scales)]


@dataclass
class ExportConfig:
    layer: str = DEFAULT_LAYER
    base_max_dim: int = 40
    scales: list[float] = field(default_factory=default_scales)
    output_dir: str | Path = "."

    def __post_init__(self):
        if self.base_max_dim < 8:
            raise ValueError("base_max_dim must be >= 8")


@functools.lru_cache(maxsize=2)
def load_backbone(layer: str = DEFAULT_LAYER) -> torch.nn.Module:
    """ResNet-18 truncated after `layer`, in eval mode.

    Tries ImageNet weights first; if they cannot be fetched (offline
    environments) falls back to a seed-fixed random initialization so
    exports stay deterministic, and logs a warning because retrieval
    quality will be far lower.
    """
    try:
        model = resnet18(weights="IMAGENET1K_V1")
    except Exception as exc:  # pragma: no cover - depends on network
        logger.warning(
            "pretrained ResNet-18 weights unavailable (%s); "
            "using seed-fixed random initialization", exc)
        torch.manual_seed(FALLBACK_SEED)
        model = resnet18(weights=None)
    names = []
    for name, child in model.named_children():
        names.append((name, child))
        if name == layer:
            break
    else:
        raise ValueError(f"unknown backbone layer {layer!r}")
    trunk = torch.nn.Sequential(*(m for _, m in names))
    trunk.eval()
    for p in trunk.parameters():
        p.requires_grad_(False)
    return trunk


# ImageNet normalization constants.
_MEAN = np.array([0.485, 0.456, 0.406], dtype=np.float32)
_STD = np.array([0.229, 0.224, 0.225], dtype=np.float32)


def _prepare(image: Image.Image, long_side: int) -> torch.Tensor:
    w, h = image.size
    ratio = long_side / max(w, h)
    tw = max(BACKBONE_STRIDE, round(w * ratio))
    th = max(BACKBONE_STRIDE, round(h * ratio))
    resized = image.convert("RGB").resize((tw, th), Image.BILINEAR)
    arr = np.asarray(resized, dtype=np.float32) / 255.0
    arr = (arr - _MEAN) / _STD
    return torch.from_numpy(arr.transpose(2, 0, 1))[None]


def extract_feature_maps(image: Image.Image,
                         cfg: ExportConfig) -> list[tuple[float, np.ndarray]]:
    """Raw conv activations per scale as (scale_factor, H x W x C) pairs.

    Per scale the image is resized so the feature grid's longest side is
    round(base_max_dim * scale); the backbone's ceil(dim/16) shape rule
    then yields exactly that many cells.
    """
    trunk = load_backbone(cfg.layer)
    out = []
    with torch.no_grad():
        for s in cfg.scales:
            grid_long = max(1, round(cfg.base_max_dim * s))
            feats = trunk(_prepare(image, grid_long * BACKBONE_STRIDE))
            values = feats[0].permute(1, 2, 0).numpy().astype("<f4")
            out.append((float(s), values))
    return out


def write_amfp(path: str | Path,
               maps: list[tuple[float, np.ndarray]]) -> None:
    """Write scale/array pairs in the AMFP binary format (little-endian)."""
    if not maps:
        raise ValueError("cannot write an empty pyramid")
    channels = maps[0][1].shape[2]
    with open(path, "wb") as fh:
        fh.write(AMFP_MAGIC)
        fh.write(struct.pack("<III", AMFP_VERSION, channels, len(maps)))
        for scale, values in maps:
            if values.shape[2] != channels:
                raise ValueError("all scales must share the channel count")
            if not np.all(np.isfinite(values)):
                raise ValueError("refusing to write non-finite features")
            h, w = values.shape[:2]
            fh.write(struct.pack("<fII", scale, h, w))
            fh.write(np.ascontiguousarray(values, dtype="<f4").tobytes())


def read_manifest(path: str | Path) -> list[dict]:
    entries = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if line:
                entries.append(json.loads(line))
    return entries


def write_manifest(path: str | Path, entries: list[dict]) -> None:
    with open(path, "w") as fh:
        for entry in entries:
            fh.write(json.dumps(entry) + "\n")


def export_pyramids(manifest_path: str | Path,
                    cfg: ExportConfig) -> list[dict]:
    """Export one AMFP file per manifest image; return the updated manifest.

    The updated manifest (also written to output_dir/manifest.jsonl)
    points pyramid_path at the new files and records the channel count
    and backbone layer.  Undecodable images are skipped with a log entry.
    """
    out_dir = Path(cfg.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    updated = []
    for entry in read_manifest(manifest_path):
        image_id = entry["image_id"]
        try:
            image = Image.open(entry["source_path"])
            image.load()
        except Exception as exc:
            logger.warning("skipping %s: cannot decode %s (%s)",
                           image_id, entry["source_path"], exc)
            continue
        maps = extract_feature_maps(image, cfg)
        pyramid_path = out_dir / f"{image_id}.amfp"
        write_amfp(pyramid_path, maps)
        updated.append({
            **entry,
            "pyramid_path": str(pyramid_path),
            "channels": maps[0][1].shape[2],
            "layer": cfg.layer,
        })
    write_manifest(out_dir / "manifest.jsonl", updated)
    return updated
