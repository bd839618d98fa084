"""Synthetic corpora with planted near-duplicates, for tests and demos.

Images are smooth random textures (low-resolution noise upsampled), so the
built-in descriptor sees distinctive gradients everywhere.  A planted copy
pastes a patch of one image into another, optionally through a "style"
perturbation: per-channel color jitter, Gaussian blur, and additive noise.
Every generator is a pure function of its rng.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from PIL import Image, ImageFilter


def texture_image(rng: np.random.Generator, width: int, height: int,
                  blobs: int = 24) -> np.ndarray:
    """Smooth random RGB texture (uint8 HxWx3)."""
    base = rng.uniform(0, 255, size=(blobs, max(2, blobs * width // (width + height)), 3))
    img = Image.fromarray(base.astype(np.uint8))
    img = img.resize((width, height), Image.BILINEAR)
    return np.array(img, dtype=np.uint8)


def color_jitter(img: np.ndarray, rng: np.random.Generator,
                 strength: float = 0.5,
                 transform: tuple[np.ndarray, np.ndarray] | None = None
                 ) -> np.ndarray:
    """Per-channel affine color distortion, the 'style' change.

    With ``transform`` given (a (scale, shift) pair), that fixed style is
    applied instead of a random draw — corpora use it to give every copy
    the same consistent style shift.
    """
    arr = img.astype(np.float64)
    if transform is None:
        scale = rng.uniform(1 - strength, 1 + strength, size=3)
        shift = rng.uniform(-64 * strength, 64 * strength, size=3)
    else:
        scale, shift = transform
    arr = arr * scale + shift
    return np.clip(arr, 0, 255).astype(np.uint8)


def style_transform(rng: np.random.Generator, strength: float,
                    magnitude: float = 1.0) -> tuple[np.ndarray, np.ndarray]:
    """A pure color-shift style along a fixed direction.

    The direction (per-channel signs) comes from the rng; ``magnitude``
    scales how far along it.  Shift-only styles leave image gradients
    untouched, so they perturb exactly the color part of a descriptor.
    """
    signs = rng.choice([-1.0, 1.0], size=3)
    shift = 255.0 * strength * magnitude * signs
    return np.ones(3), shift


def gaussian_blur(img: np.ndarray, radius: float) -> np.ndarray:
    out = Image.fromarray(img).filter(ImageFilter.GaussianBlur(radius))
    return np.asarray(out, dtype=np.uint8)


def add_noise(img: np.ndarray, rng: np.random.Generator,
              fraction: float = 0.05) -> np.ndarray:
    noise = rng.normal(0, 255 * fraction, size=img.shape)
    return np.clip(img.astype(np.float64) + noise, 0, 255).astype(np.uint8)


@dataclass
class PlantedCopy:
    """Ground truth for one planted duplicate region."""

    detail_id: str
    source_image_id: str
    source_box: tuple[int, int, int, int]  # x, y, w, h in image pixels
    target_image_id: str
    target_box: tuple[int, int, int, int]


@dataclass
class SyntheticCorpus:
    images: dict[str, np.ndarray]
    planted: list[PlantedCopy] = field(default_factory=list)

    def image_ids(self) -> list[str]:
        return sorted(self.images)


def plant_patch(dst: np.ndarray, patch: np.ndarray, x: int, y: int) -> None:
    h, w = patch.shape[:2]
    dst[y:y + h, x:x + w] = patch


def make_copy_corpus(rng: np.random.Generator,
                     n_images: int = 30,
                     n_copies: int = 20,
                     size_range: tuple[int, int] = (256, 640),
                     patch_cells: tuple[int, int] = (14, 20),
                     jitter_strength: float = 0.4,
                     jitter_range: tuple[float, float] | None = None,
                     blur_radius: float = 1.0,
                     noise_fraction: float = 0.05,
                     texture_blobs: int = 24,
                     shared_style: bool = False,
                     style_tau_range: tuple[float, float] = (0.1, 0.35),
                     scale_offset_octaves: float = 0.0) -> SyntheticCorpus:
    """Corpus of textured images with planted styled copies.

    Each copy takes a patch of ``patch_cells`` x ``patch_cells`` feature
    cells from one image and pastes a jittered, blurred, noisy version of
    it into another at the matching base-frame scale, aligned to the cell
    grid, so jitter, blur, and noise are the only perturbation.  All
    planted regions are kept mutually disjoint: a copy pasted over an
    earlier region would silently destroy that ground truth.

    ``scale_offset_octaves`` shrinks every pasted copy by that many
    octaves (e.g. -1/6 lands exactly between two pyramid scales), making
    the copies scale-misaligned with every pyramid level.
    """
    lo, hi = size_range
    steps = [s for s in (hi, round(hi * 2 ** (-1 / 3)),
                         round(hi * 2 ** (-2 / 3)), round(hi / 2))
             if s >= lo]
    images = {}
    sizes = {}
    for i in range(n_images):
        w = int(rng.choice(steps))
        h = int(rng.choice(steps))
        iid = f"img{i:03d}"
        images[iid] = texture_image(rng, w, h, blobs=texture_blobs)
        sizes[iid] = (w, h)

    def cell_px(iid: str) -> float:
        # one base-frame feature cell, in this image's original pixels
        return max(sizes[iid]) / 40.0

    def overlaps(iid: str, box) -> bool:
        x, y, w, h = box
        for ox, oy, ow, oh in occupied[iid]:
            if x < ox + ow and ox < x + w and y < oy + oh and oy < y + h:
                return True
        return False

    def aligned_box(iid: str, n_cells: int):
        # uniform over the aligned positions that don't collide, so dense
        # packings stay feasible
        w, h = sizes[iid]
        step = cell_px(iid)
        extent = round(n_cells * step)
        mx = int((w - extent) // step)
        my = int((h - extent) // step)
        if mx < 0 or my < 0:
            return None
        free = [(round(cx * step), round(cy * step))
                for cx in range(mx + 1) for cy in range(my + 1)
                if not overlaps(iid, (round(cx * step), round(cy * step),
                                      extent, extent))]
        if not free:
            return None
        x, y = free[int(rng.integers(0, len(free)))]
        return (x, y, extent, extent)

    ids = sorted(images)
    occupied: dict[str, list] = {iid: [] for iid in ids}
    # One style direction for the whole corpus; per-copy magnitudes range
    # from mild to extreme so copies span a difficulty spectrum.
    style_signs = rng.choice([-1.0, 1.0], size=3) if shared_style else None
    planted = []
    for k in range(n_copies):
        placed = False
        for _ in range(5000):
            src_id, dst_id = rng.choice(ids, size=2, replace=False)
            n_cells = int(rng.integers(patch_cells[0], patch_cells[1] + 1))
            t_cells = max(2, round(n_cells * 2.0 ** scale_offset_octaves))
            s_box = aligned_box(src_id, n_cells)
            d_box = aligned_box(dst_id, t_cells)
            if s_box is None or d_box is None:
                continue
            if overlaps(src_id, s_box) or overlaps(dst_id, d_box):
                continue
            placed = True
            break
        if not placed:
            raise ValueError("could not place disjoint planted copies; "
                             "reduce patch_cells or n_copies")
        sx, sy, pw, ph = s_box
        dx, dy, tw, th = d_box
        patch = images[src_id][sy:sy + ph, sx:sx + pw].copy()
        if (tw, th) != (pw, ph):
            resized = Image.fromarray(patch).resize((tw, th), Image.BILINEAR)
            patch = np.asarray(resized, dtype=np.uint8)
        if shared_style:
            # Every fourth copy is an extreme style outlier; the rest are
            # mild.  Identity features match the mild ones and miss the
            # extremes, so there is a real gap for training to close.
            tau = 1.0 if k % 4 == 0 else float(rng.uniform(*style_tau_range))
            style = (np.ones(3), 255.0 * jitter_strength * tau * style_signs)
            patch = color_jitter(patch, rng, transform=style)
        else:
            # per-copy strength spans a difficulty spectrum when a range
            # is given; otherwise every copy gets the same strength
            js = (float(rng.uniform(*jitter_range)) if jitter_range
                  else jitter_strength)
            patch = color_jitter(patch, rng, js)
        if blur_radius > 0:
            patch = gaussian_blur(patch, blur_radius)
        if noise_fraction > 0:
            patch = add_noise(patch, rng, noise_fraction)
        plant_patch(images[dst_id], patch, dx, dy)
        occupied[src_id].append(s_box)
        occupied[dst_id].append(d_box)
        planted.append(PlantedCopy(
            detail_id=f"detail{k:02d}",
            source_image_id=str(src_id), source_box=s_box,
            target_image_id=str(dst_id), target_box=d_box,
        ))
    return SyntheticCorpus(images=images, planted=planted)


def make_detail_corpus(rng: np.random.Generator,
                       n_images: int = 20,
                       details: dict[str, int] | None = None,
                       image_size: int = 512,
                       detail_size: int = 192,
                       jitter_strength: float = 0.3,
                       blur_radius: float = 0.8,
                       noise_fraction: float = 0.03) -> SyntheticCorpus:
    """Corpus where named details recur across disjoint image subsets.

    details maps detail_id -> number of images carrying it; carriers are
    disjoint across details so cluster purity is well-defined.  Details
    are pasted on the feature cell grid so the perturbations (not grid
    phase) are what discovery has to overcome.
    """
    details = details or {"detailA": 5}
    if sum(details.values()) > n_images:
        raise ValueError("not enough images for the requested details")
    images = {f"img{i:03d}": texture_image(rng, image_size, image_size)
              for i in range(n_images)}
    step = image_size / 40.0  # one base-frame feature cell in image pixels
    ids = sorted(images)
    order = list(rng.permutation(ids))
    planted = []
    cursor = 0
    for detail_id, count in sorted(details.items()):
        carriers = order[cursor:cursor + count]
        cursor += count
        master = texture_image(rng, detail_size, detail_size, blobs=12)
        for iid in carriers:
            img = images[iid]
            m = int((image_size - detail_size) // step)
            x = round(float(rng.integers(0, m + 1)) * step)
            y = round(float(rng.integers(0, m + 1)) * step)
            patch = color_jitter(master, rng, jitter_strength)
            if blur_radius > 0:
                patch = gaussian_blur(patch, blur_radius)
            if noise_fraction > 0:
                patch = add_noise(patch, rng, noise_fraction)
            plant_patch(img, patch, x, y)
            planted.append(PlantedCopy(
                detail_id=detail_id,
                source_image_id=str(iid),
                source_box=(x, y, detail_size, detail_size),
                target_image_id=str(iid),
                target_box=(x, y, detail_size, detail_size),
            ))
    return SyntheticCorpus(images=images, planted=planted)


def planted_affine_cloud(rng: np.random.Generator,
                         matrix: np.ndarray,
                         n_inliers: int = 20,
                         n_outliers: int = 0,
                         extent: float = 640.0,
                         outlier_min_offset: float = 100.0):
    """Correspondence cloud following an exact affine map, plus outliers.

    Outlier targets are displaced at least outlier_min_offset from the
    true mapping so the inlier/outlier partition is unambiguous.
    Returns (source Nx2, target Nx2, inlier_mask).
    """
    src_in = rng.uniform(0, extent, size=(n_inliers, 2))
    dst_in = src_in @ matrix[:, :2].T + matrix[:, 2]
    src_out = rng.uniform(0, extent, size=(n_outliers, 2))
    angle = rng.uniform(0, 2 * np.pi, size=n_outliers)
    radius = outlier_min_offset + rng.uniform(0, extent, size=n_outliers)
    dst_out = (src_out @ matrix[:, :2].T + matrix[:, 2]
               + np.stack([radius * np.cos(angle), radius * np.sin(angle)], axis=1))
    src = np.vstack([src_in, src_out])
    dst = np.vstack([dst_in, dst_out])
    mask = np.zeros(len(src), dtype=bool)
    mask[:n_inliers] = True
    perm = rng.permutation(len(src))
    return src[perm], dst[perm], mask[perm]
