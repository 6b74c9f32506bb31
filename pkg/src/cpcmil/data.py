"""Images, masks, patches, bags, and the planted-motif synthetic corpus.

The production path mirrors a weak-label histology pipeline: segment the
tissue-like foreground, cut patches whose centres fall inside the foreground
contours, and group each image's patches into a labeled bag. The synthetic
generator produces images where positive bags contain planted motif cells
(tight clusters of dark elliptical blobs) against a background texture shared
across classes, with exact per-instance truth recorded for evaluation.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from .config import AugmentConfig, SyntheticSpec
from .errors import ConfigurationError
from .seeding import STREAM_CORPUS, make_rng

log = logging.getLogger(__name__)

BASE_TISSUE = np.array([0.91, 0.73, 0.80])
BLOB_COLOR = np.array([0.42, 0.26, 0.52])
BLOB_ALPHA = 0.85


# ---------------------------------------------------------------------------
# Domain types
# ---------------------------------------------------------------------------

@dataclass
class RawImage:
    """An input image with pixel values in [0, 1] and an optional bag label."""

    pixels: np.ndarray          # (H, W, 3) float
    id: str
    label: int | None = None

    def __post_init__(self) -> None:
        if self.pixels.ndim != 3 or self.pixels.shape[2] != 3:
            raise ValueError(f"expected (H, W, 3) pixels, got {self.pixels.shape}")
        if not np.isfinite(self.pixels).all():
            raise ValueError(f"image {self.id}: non-finite pixel values")
        if self.pixels.min() < 0.0 or self.pixels.max() > 1.0:
            raise ValueError(f"image {self.id}: pixel values outside [0, 1]")

    @property
    def shape(self) -> tuple[int, int]:
        return self.pixels.shape[0], self.pixels.shape[1]


@dataclass
class ForegroundMask:
    mask: np.ndarray                      # (H, W) bool
    contours: list[np.ndarray] = field(default_factory=list)  # each (P, 2) row/col

    @property
    def is_empty(self) -> bool:
        return not bool(self.mask.any())


@dataclass
class Patch:
    pixels: np.ndarray          # (S, S, 3)
    origin: tuple[int, int]     # (row, col) in the source image
    source_id: str

    @property
    def size(self) -> int:
        return self.pixels.shape[0]


@dataclass
class PatchGrid:
    """Row-major R x C arrangement of sub-patches cut from one tile."""

    patches: np.ndarray         # (R, C, S, S, 3)
    origins: np.ndarray         # (R, C, 2) offsets inside the tile
    source_id: str

    @property
    def shape(self) -> tuple[int, int]:
        return self.patches.shape[0], self.patches.shape[1]


@dataclass
class Bag:
    """An unordered collection of instance patches with one binary label."""

    bag_id: str
    instances: np.ndarray               # (N, S, S, 3) float32
    coords: np.ndarray                  # (N, 2) patch origins
    bag_label: int
    instance_truth: np.ndarray | None = None  # (N,) int8, synthetic only
    source_id: str = ""

    def __post_init__(self) -> None:
        if len(self.instances) == 0:
            raise ValueError(f"bag {self.bag_id} is empty")
        if self.instance_truth is not None:
            implied = int(np.any(np.asarray(self.instance_truth) == 1))
            if implied != int(self.bag_label):
                raise ValueError(
                    f"bag {self.bag_id}: label {self.bag_label} inconsistent "
                    f"with instance truth (any positive = {implied})"
                )

    @property
    def n_instances(self) -> int:
        return len(self.instances)


@dataclass
class SyntheticImage:
    """Generated image plus the ground truth the generator planted."""

    image: RawImage
    truth_mask: np.ndarray              # (H, W) bool foreground truth
    motif_cells: list[tuple[int, int]]  # lattice cells holding a planted motif
    patch_size: int
    margin: int


# ---------------------------------------------------------------------------
# Tissue segmentation
# ---------------------------------------------------------------------------

@dataclass
class SegmentConfig:
    saturation_threshold: float = 0.08
    smooth: int = 5          # median filter window
    min_area: int = 32       # drop components smaller than this


def saturation(pixels: np.ndarray) -> np.ndarray:
    """HSV saturation channel: (max - min) / max, zero where max is zero."""
    mx = pixels.max(axis=2)
    mn = pixels.min(axis=2)
    out = np.zeros_like(mx)
    np.divide(mx - mn, mx, out=out, where=mx > 0)
    return out


def trace_boundary(component: np.ndarray) -> np.ndarray:
    """Ordered outer-boundary pixels of one connected component (Moore trace)."""
    points = np.argwhere(component)
    start = tuple(points[points[:, 0].argmin()][[0, 1]])
    # topmost-leftmost pixel of the topmost row
    top_row = points[points[:, 0] == start[0]]
    start = (int(start[0]), int(top_row[:, 1].min()))

    offs = [(0, -1), (-1, -1), (-1, 0), (-1, 1), (0, 1), (1, 1), (1, 0), (1, -1)]

    def neighbor(p, i):
        return p[0] + offs[i][0], p[1] + offs[i][1]

    def is_set(p):
        r, c = p
        return 0 <= r < component.shape[0] and 0 <= c < component.shape[1] and component[r, c]

    boundary = [start]
    current = start
    entry = 0  # came from the west
    seen_states = set()
    while True:
        found = None
        for step in range(1, 9):
            i = (entry + step) % 8
            if is_set(neighbor(current, i)):
                found = i
                break
        if found is None:
            break  # isolated pixel
        current = neighbor(current, found)
        entry = (found + 4 + 1) % 8  # restart scan just past the backtrack direction
        state = (current, found)
        if current == start and state in seen_states:
            break
        if state in seen_states and len(boundary) > 4 * component.size:
            break
        seen_states.add(state)
        if current == start:
            break
        boundary.append(current)
    return np.array(boundary, dtype=np.int64)


def segment_tissue(image: RawImage, config: SegmentConfig | None = None) -> ForegroundMask:
    """Threshold the saturation channel, smooth, fill holes, trace contours.

    A fully background image yields an empty, flagged mask rather than an
    exception; a uniformly saturated image yields a full mask with one contour.
    """
    config = config or SegmentConfig()
    sat = saturation(image.pixels)
    raw = sat > config.saturation_threshold
    if config.smooth > 1:
        raw = ndimage.median_filter(raw.astype(np.uint8), size=config.smooth) > 0
    filled = ndimage.binary_fill_holes(raw)
    labels, n = ndimage.label(filled, structure=np.ones((3, 3), dtype=int))
    mask = np.zeros_like(filled)
    contours = []
    for idx in range(1, n + 1):
        component = labels == idx
        if component.sum() < config.min_area:
            continue
        mask |= component
        contours.append(trace_boundary(component))
    if not contours:
        log.warning("image %s: segmentation found no foreground", image.id)
    return ForegroundMask(mask=mask, contours=contours)


# ---------------------------------------------------------------------------
# Patch extraction
# ---------------------------------------------------------------------------

def _stride_from_overlap(size: int, overlap: float) -> int:
    if not 0.0 <= overlap < 1.0:
        raise ConfigurationError(f"overlap must be in [0, 1), got {overlap}")
    stride = size * (1.0 - overlap)
    if abs(stride - round(stride)) > 1e-9 or round(stride) <= 0:
        raise ConfigurationError(
            f"size {size} with overlap {overlap} gives non-integer stride {stride}"
        )
    return int(round(stride))


def extract_patches(
    image: RawImage,
    mask: ForegroundMask,
    size: int,
    overlap: float = 0.0,
) -> list[Patch]:
    """Cut size x size patches on a stride lattice anchored at the mask bounding box.

    Patches are returned in raster-scan order; a patch qualifies only when its
    centre pixel lies inside the foreground. An empty mask yields an empty,
    flagged list.
    """
    stride = _stride_from_overlap(size, overlap)
    h, w = image.shape
    if h < size or w < size:
        raise ValueError(f"image {image.id} smaller than patch size {size}")
    if mask.is_empty:
        log.warning("image %s: empty mask, no patches extracted", image.id)
        return []
    rows, cols = np.nonzero(mask.mask)
    r0, r1 = int(rows.min()), int(rows.max()) + 1
    c0, c1 = int(cols.min()), int(cols.max()) + 1
    patches = []
    for r in range(r0, r1 - size + 1, stride):
        for c in range(c0, c1 - size + 1, stride):
            cy, cx = r + size // 2, c + size // 2
            if not mask.mask[cy, cx]:
                continue
            patches.append(
                Patch(
                    pixels=image.pixels[r : r + size, c : c + size].copy(),
                    origin=(r, c),
                    source_id=image.id,
                )
            )
    if not patches:
        log.warning("image %s: no patch centre fell inside the foreground", image.id)
    return patches


def make_cpc_grid(
    patch: Patch,
    sub_size: int,
    overlap: float = 0.5,
    jitter: int = 0,
    rng: np.random.Generator | None = None,
) -> PatchGrid:
    """Cut the overlapping sub-patch grid used for contrastive prediction.

    With jitter > 0 each sub-patch crop is offset by up to +-jitter pixels,
    clamped to the tile borders; the nominal lattice is unchanged.
    """
    size = patch.size
    stride = _stride_from_overlap(sub_size, overlap)
    if (size - sub_size) % stride != 0:
        raise ConfigurationError(
            f"tile size {size} minus sub-patch {sub_size} not divisible by stride {stride}"
        )
    n = (size - sub_size) // stride + 1
    patches = np.empty((n, n, sub_size, sub_size, 3), dtype=patch.pixels.dtype)
    origins = np.empty((n, n, 2), dtype=np.int64)
    for r in range(n):
        for c in range(n):
            y, x = r * stride, c * stride
            if jitter > 0 and rng is not None:
                y = int(np.clip(y + rng.integers(-jitter, jitter + 1), 0, size - sub_size))
                x = int(np.clip(x + rng.integers(-jitter, jitter + 1), 0, size - sub_size))
            patches[r, c] = patch.pixels[y : y + sub_size, x : x + sub_size]
            origins[r, c] = (y, x)
    return PatchGrid(patches=patches, origins=origins, source_id=patch.source_id)


# ---------------------------------------------------------------------------
# Augmentation
# ---------------------------------------------------------------------------

def hflip(pixels: np.ndarray) -> np.ndarray:
    return pixels[:, ::-1].copy()


def vflip(pixels: np.ndarray) -> np.ndarray:
    return pixels[::-1].copy()


def drop_channel(pixels: np.ndarray, channel: int) -> np.ndarray:
    out = pixels.copy()
    out[..., channel] = 0.0
    return out


def scale_channels(pixels: np.ndarray, factors: np.ndarray) -> np.ndarray:
    return np.clip(pixels * np.asarray(factors, dtype=pixels.dtype), 0.0, 1.0)


def shift_crop(pixels: np.ndarray, dy: int, dx: int) -> np.ndarray:
    """Translate patch content by (dy, dx) with edge replication at the borders."""
    j = max(abs(dy), abs(dx))
    if j == 0:
        return pixels.copy()
    padded = np.pad(pixels, ((j, j), (j, j), (0, 0)), mode="edge")
    s = pixels.shape[0]
    return padded[j + dy : j + dy + s, j + dx : j + dx + s].copy()


def augment(pixels: np.ndarray, config: AugmentConfig, rng: np.random.Generator) -> np.ndarray:
    """Apply the enabled transforms; pure in (pixels, config, rng state)."""
    out = pixels
    if config.hflip and rng.random() < 0.5:
        out = hflip(out)
    if config.vflip and rng.random() < 0.5:
        out = vflip(out)
    if config.channel_drop > 0 and rng.random() < config.channel_drop:
        out = drop_channel(out, int(rng.integers(0, 3)))
    if config.color_jitter > 0:
        out = scale_channels(out, 1.0 + rng.uniform(-config.color_jitter, config.color_jitter, 3))
    if config.spatial_jitter > 0:
        j = config.spatial_jitter
        limit = pixels.shape[0] // 2
        if j > limit:
            log.warning("spatial jitter %d exceeds patch margin, clamped to %d", j, limit)
            j = limit
        dy, dx = rng.integers(-j, j + 1, size=2)
        out = shift_crop(out, int(dy), int(dx))
    return out.copy() if out is pixels else out


# ---------------------------------------------------------------------------
# Synthetic corpus
# ---------------------------------------------------------------------------

def _smooth_field(rng: np.random.Generator, size: int, cells: int = 8) -> np.ndarray:
    """Low-frequency random field in roughly [-1, 1] via bilinear upsampling."""
    coarse = rng.normal(0.0, 1.0, (cells + 1, cells + 1))
    ts = np.linspace(0.0, cells, size)
    i0 = np.clip(np.floor(ts).astype(int), 0, cells - 1)
    f = ts - i0
    rows = coarse[i0] * (1 - f)[:, None] + coarse[i0 + 1] * f[:, None]
    out = rows[:, i0] * (1 - f)[None, :] + rows[:, i0 + 1] * f[None, :]
    return out


def _draw_blob(img: np.ndarray, cy: float, cx: float, radius: float,
               ecc: float, theta: float, color: np.ndarray) -> None:
    """Alpha-composite one soft-edged rotated ellipse in place."""
    a, b = radius, radius * ecc
    reach = int(np.ceil(radius + 1.5))
    h, w = img.shape[:2]
    r0, r1 = max(0, int(cy) - reach), min(h, int(cy) + reach + 1)
    c0, c1 = max(0, int(cx) - reach), min(w, int(cx) + reach + 1)
    if r0 >= r1 or c0 >= c1:
        return
    ys, xs = np.mgrid[r0:r1, c0:c1]
    dy, dx = ys - cy, xs - cx
    u = (dx * np.cos(theta) + dy * np.sin(theta)) / a
    v = (-dx * np.sin(theta) + dy * np.cos(theta)) / b
    d = np.sqrt(u * u + v * v)
    cover = np.clip(1.5 * (1.0 - d) + 0.5, 0.0, 1.0) * BLOB_ALPHA
    img[r0:r1, c0:c1] = img[r0:r1, c0:c1] * (1 - cover[..., None]) + color * cover[..., None]


def generate_synthetic_corpus(spec: SyntheticSpec) -> list[SyntheticImage]:
    """Deterministically synthesize the weakly labeled benchmark corpus.

    Class labels are assigned so exactly round(n * balance) images are
    positive. Every positive image receives at least one motif cell; negative
    images receive none, so the bag label equals OR(instance truth) exactly.
    """
    n = spec.n_images
    labels = np.zeros(n, dtype=np.int64)
    order = make_rng(spec.seed, STREAM_CORPUS, 0).permutation(n)
    labels[order[: spec.n_positive]] = 1

    size, patch, margin = spec.image_size, spec.patch_size, spec.margin
    n_cells = (size - 2 * margin) // patch
    images = []
    for idx in range(n):
        rng = make_rng(spec.seed, STREAM_CORPUS, 1, idx)
        base = BASE_TISSUE + rng.uniform(-0.02, 0.02, 3)
        img = np.ones((size, size, 3)) * base
        # low-frequency per-channel tint, the stand-in for stain variation;
        # coarse cells keep neighbouring patches strongly correlated
        tint = np.stack([_smooth_field(rng, size, cells=4) for _ in range(3)], axis=2)
        img += 0.08 * tint

        motif_cells: list[tuple[int, int]] = []
        if labels[idx] == 1:
            n_motifs = 1 + int(rng.poisson(spec.motif_density - 1.0))
            n_motifs = min(n_motifs, n_cells * n_cells)
            flat = rng.choice(n_cells * n_cells, size=n_motifs, replace=False)
            motif_cells = [(int(f) // n_cells, int(f) % n_cells) for f in flat]

        r_lo, r_hi = spec.blob_radius
        pad = r_hi + 1.0
        for ci in range(n_cells):
            for cj in range(n_cells):
                y0, x0 = margin + ci * patch, margin + cj * patch
                if (ci, cj) in motif_cells:
                    # dense cluster of blobs about the cell centre
                    n_blobs = int(rng.integers(spec.motif_blobs[0], spec.motif_blobs[1] + 1))
                    centre = np.array([y0 + patch / 2, x0 + patch / 2])
                    for _ in range(n_blobs):
                        cy, cx = centre + rng.normal(0.0, spec.cluster_spread, 2)
                        cy = float(np.clip(cy, y0 + pad, y0 + patch - pad))
                        cx = float(np.clip(cx, x0 + pad, x0 + patch - pad))
                        _draw_blob(
                            img, cy, cx,
                            radius=float(rng.uniform(r_lo, r_hi)),
                            ecc=float(rng.uniform(0.55, 1.0)),
                            theta=float(rng.uniform(0.0, np.pi)),
                            color=BLOB_COLOR + rng.uniform(-0.04, 0.04, 3),
                        )
                else:
                    # scattered background dots, heterogeneous rate across cells
                    lam = rng.gamma(spec.dot_dispersion, spec.dot_rate / spec.dot_dispersion)
                    for _ in range(int(rng.poisson(lam))):
                        cy = float(rng.uniform(y0 + pad, y0 + patch - pad))
                        cx = float(rng.uniform(x0 + pad, x0 + patch - pad))
                        _draw_blob(
                            img, cy, cx,
                            radius=float(rng.uniform(r_lo, r_hi)),
                            ecc=float(rng.uniform(0.55, 1.0)),
                            theta=float(rng.uniform(0.0, np.pi)),
                            color=BLOB_COLOR + rng.uniform(-0.04, 0.04, 3),
                        )

        img += rng.normal(0.0, spec.noise_std, img.shape)
        truth = np.zeros((size, size), dtype=bool)
        truth[margin : size - margin, margin : size - margin] = True
        if margin > 0:
            img[~truth] = 1.0
        img = np.round(np.clip(img, 0.0, 1.0) * 255.0) / 255.0

        images.append(
            SyntheticImage(
                image=RawImage(img.astype(np.float32), id=f"img{idx:04d}", label=int(labels[idx])),
                truth_mask=truth,
                motif_cells=motif_cells,
                patch_size=patch,
                margin=margin,
            )
        )
    return images


def build_bags(images: list[SyntheticImage]) -> list[Bag]:
    """Cut non-overlapping instance patches and attach exact instance truth.

    The generator's recorded foreground keeps the lattice aligned with the
    planted motif cells, so instance truth is exact by construction.
    """
    bags = []
    for item in images:
        mask = ForegroundMask(mask=item.truth_mask)
        patches = extract_patches(item.image, mask, size=item.patch_size, overlap=0.0)
        if not patches:
            continue
        coords = np.array([p.origin for p in patches], dtype=np.int64)
        cells = (coords - item.margin) // item.patch_size
        motifs = set(item.motif_cells)
        truth = np.array(
            [1 if (int(r), int(c)) in motifs else 0 for r, c in cells], dtype=np.int8
        )
        bags.append(
            Bag(
                bag_id=item.image.id,
                instances=np.stack([p.pixels for p in patches]).astype(np.float32),
                coords=coords,
                bag_label=int(item.image.label),
                instance_truth=truth,
                source_id=item.image.id,
            )
        )
    return bags


def build_cpc_tiles(
    images: list[SyntheticImage],
    tile_size: int,
    overlap: float = 0.5,
    per_image: int | None = None,
    seed: int = 0,
) -> list[Patch]:
    """Cut the overlapping unlabeled tiles used for contrastive pretraining.

    With `per_image` set, each image contributes a seeded random subset of
    its tiles (kept in raster order), bounding the pretraining epoch cost.
    """
    tiles = []
    for idx, item in enumerate(images):
        mask = ForegroundMask(mask=item.truth_mask)
        cut = extract_patches(item.image, mask, size=tile_size, overlap=overlap)
        if per_image is not None and len(cut) > per_image:
            rng = make_rng(seed, STREAM_CORPUS, 3, idx)
            keep = sorted(rng.choice(len(cut), size=per_image, replace=False).tolist())
            cut = [cut[i] for i in keep]
        tiles.extend(cut)
    return tiles


# ---------------------------------------------------------------------------
# Corpus and manifest persistence
# ---------------------------------------------------------------------------

def _save_png(path: Path, array: np.ndarray) -> None:
    if array.dtype != np.uint8:
        array = np.round(np.clip(array, 0.0, 1.0) * 255.0).astype(np.uint8)
    Image.fromarray(array).save(path, format="PNG")


def save_corpus(directory: str | Path, images: list[SyntheticImage], spec: SyntheticSpec) -> None:
    root = Path(directory)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    with open(root / "labels.jsonl", "w") as lab, open(root / "truth.jsonl", "w") as tru:
        for item in images:
            rel = f"images/{item.image.id}.png"
            _save_png(root / rel, item.image.pixels)
            _save_png(root / "masks" / f"{item.image.id}.png", item.truth_mask.astype(np.uint8) * 255)
            lab.write(json.dumps({"id": item.image.id, "path": rel, "label": item.image.label}) + "\n")
            tru.write(
                json.dumps(
                    {
                        "id": item.image.id,
                        "motif_cells": [list(c) for c in item.motif_cells],
                        "patch_size": item.patch_size,
                        "margin": item.margin,
                    }
                )
                + "\n"
            )
    with open(root / "spec.json", "w") as fh:
        json.dump({k: list(v) if isinstance(v, tuple) else v for k, v in vars(spec).items()}, fh, indent=2)


def load_corpus(directory: str | Path) -> list[SyntheticImage]:
    root = Path(directory)
    truth = {}
    with open(root / "truth.jsonl") as fh:
        for line in fh:
            rec = json.loads(line)
            truth[rec["id"]] = rec
    images = []
    with open(root / "labels.jsonl") as fh:
        for line in fh:
            rec = json.loads(line)
            pixels = np.asarray(Image.open(root / rec["path"]).convert("RGB"), dtype=np.float32) / 255.0
            mask = np.asarray(Image.open(root / "masks" / f"{rec['id']}.png")) > 127
            t = truth[rec["id"]]
            images.append(
                SyntheticImage(
                    image=RawImage(pixels, id=rec["id"], label=rec["label"]),
                    truth_mask=mask,
                    motif_cells=[tuple(c) for c in t["motif_cells"]],
                    patch_size=t["patch_size"],
                    margin=t["margin"],
                )
            )
    return images


def load_image_manifest(manifest: str | Path) -> list[RawImage]:
    """Read an external corpus: jsonl records {id, path, label} with paths relative to the manifest."""
    base = Path(manifest).parent
    images = []
    with open(manifest) as fh:
        for line in fh:
            rec = json.loads(line)
            pixels = np.asarray(Image.open(base / rec["path"]).convert("RGB"), dtype=np.float32) / 255.0
            images.append(RawImage(pixels, id=rec["id"], label=rec.get("label")))
    return images


def bags_from_images(images: list[RawImage], patch_size: int,
                     segment_config: SegmentConfig | None = None) -> list[Bag]:
    """Segmentation-driven bag construction for externally supplied images."""
    bags = []
    for image in images:
        mask = segment_tissue(image, segment_config)
        patches = extract_patches(image, mask, size=patch_size, overlap=0.0)
        if not patches:
            continue
        bags.append(
            Bag(
                bag_id=image.id,
                instances=np.stack([p.pixels for p in patches]).astype(np.float32),
                coords=np.array([p.origin for p in patches], dtype=np.int64),
                bag_label=int(image.label) if image.label is not None else 0,
                source_id=image.id,
            )
        )
    return bags


def write_bag_manifest(path: str | Path, bags: list[Bag]) -> None:
    with open(path, "w") as fh:
        for bag in bags:
            fh.write(
                json.dumps(
                    {
                        "bag_id": bag.bag_id,
                        "label": int(bag.bag_label),
                        "n_instances": bag.n_instances,
                        "patch_size": int(bag.instances.shape[1]),
                        "coords": bag.coords.tolist(),
                        "source_id": bag.source_id,
                    }
                )
                + "\n"
            )


def read_bag_manifest(path: str | Path) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh]
