"""Image preprocessing and the three chest-symmetry feature configurations.

Every network-bound image is resized to 224x224 first.  The half-image
configurations split that resized image at the vertical midline (odd widths
drop the center column), mirror the right half horizontally so both halves
share an orientation, and re-resize each 112x224 half back to 224x224 before
extraction.  "Left" means image-left (viewer's left) throughout.

The built-in extractor replaces a pretrained CNN pooling layer at desk scale:
a 32x32 grid of patch means over the 224x224 image, flattened row-major to
1024 values, so downstream dimensions match the 1024-wide deep features the
pipeline is designed around.  External deep features can be supplied instead
through a vector store keyed by record id (see ``ExternalStoreExtractor``).
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np
from PIL import Image

from .datamodel import FeatureConfig, FeatureVector, read_store_arrays
from .errors import MissingVectorError, ValidationError

NETWORK_SIZE = 224
BASELINE_GRID = 32
BASELINE_DIM = BASELINE_GRID * BASELINE_GRID  # 1024
BASELINE_EXTRACTOR_ID = "grid-mean-32x32"

# Part names in fixed concatenation order per configuration.
PART_LEFT = "left"
PART_RIGHT_FLIPPED = "right_flipped"
PART_WHOLE = "whole"

CONFIG_PARTS = {
    FeatureConfig.C1: (PART_WHOLE,),
    FeatureConfig.C2: (PART_LEFT, PART_RIGHT_FLIPPED),
    FeatureConfig.C3: (PART_LEFT, PART_RIGHT_FLIPPED, PART_WHOLE),
}

# Id suffixes for part vectors in an external store.
EXTERNAL_PART_KEYS = {PART_WHOLE: "", PART_LEFT: "#L", PART_RIGHT_FLIPPED: "#R"}


class ExtractorKind(str, Enum):
    BASELINE_POOL = "baseline_pool"
    EXTERNAL_FILE = "external_file"


@dataclass(frozen=True)
class ExtractorSpec:
    extractor_id: str
    base_dim: int
    kind: ExtractorKind
    store_path: str | None = None

    def __post_init__(self):
        if self.base_dim < 1:
            raise ValidationError("base_dim must be positive")
        if self.kind is ExtractorKind.BASELINE_POOL and self.base_dim != BASELINE_DIM:
            raise ValidationError(f"baseline extractor base_dim is fixed at {BASELINE_DIM}")
        if self.kind is ExtractorKind.EXTERNAL_FILE and not self.store_path:
            raise ValidationError("external extractor needs a store_path")


@dataclass(frozen=True)
class GrayImage:
    """Grayscale image, pixels in [0, 1], row-major (height, width)."""

    pixels: np.ndarray

    def __post_init__(self):
        px = np.ascontiguousarray(self.pixels, dtype=np.float64)
        if px.ndim != 2 or px.size == 0:
            raise ValidationError("image must be a non-empty 2-D array")
        if not np.all(np.isfinite(px)):
            raise ValidationError("image has non-finite pixels")
        if px.min() < 0.0 or px.max() > 1.0:
            raise ValidationError("pixel values must lie in [0, 1]")
        object.__setattr__(self, "pixels", px)

    @property
    def width(self) -> int:
        return int(self.pixels.shape[1])

    @property
    def height(self) -> int:
        return int(self.pixels.shape[0])


def to_gray(array: np.ndarray) -> GrayImage:
    """Convert an HxW or HxWx3/4 uint8/float array to a GrayImage.

    Color inputs use luminance weights 0.299/0.587/0.114.
    """
    arr = np.asarray(array)
    if arr.ndim == 3:
        rgb = arr[..., :3].astype(np.float64)
        arr = rgb @ np.array([0.299, 0.587, 0.114])
    else:
        arr = arr.astype(np.float64)
    if np.issubdtype(np.asarray(array).dtype, np.integer):
        arr = arr / 255.0
    return GrayImage(pixels=np.clip(arr, 0.0, 1.0))


def load_image(path) -> GrayImage:
    """Load an 8-bit PNG/PGM (or other Pillow-readable) image as grayscale."""
    with Image.open(path) as img:
        if img.mode in ("RGB", "RGBA"):
            return to_gray(np.asarray(img))
        return to_gray(np.asarray(img.convert("L")))


def save_image(image: GrayImage, path) -> None:
    data = np.round(image.pixels * 255.0).astype(np.uint8)
    Image.fromarray(data, mode="L").save(path)


def resize(image: GrayImage, width: int, height: int) -> GrayImage:
    """Bilinear resize with pixel-center alignment; output stays in [0, 1]."""
    if width < 1 or height < 1:
        raise ValidationError("target size must be at least 1x1")
    src = image.pixels
    sh, sw = src.shape
    if (sh, sw) == (height, width):
        return GrayImage(pixels=src.copy())

    x = (np.arange(width) + 0.5) * (sw / width) - 0.5
    y = (np.arange(height) + 0.5) * (sh / height) - 0.5
    x0 = np.clip(np.floor(x).astype(np.int64), 0, sw - 1)
    y0 = np.clip(np.floor(y).astype(np.int64), 0, sh - 1)
    x1 = np.minimum(x0 + 1, sw - 1)
    y1 = np.minimum(y0 + 1, sh - 1)
    fx = np.clip(x - x0, 0.0, 1.0)
    fy = np.clip(y - y0, 0.0, 1.0)

    top = src[y0][:, x0] * (1 - fx) + src[y0][:, x1] * fx
    bot = src[y1][:, x0] * (1 - fx) + src[y1][:, x1] * fx
    out = top * (1 - fy)[:, None] + bot * fy[:, None]
    return GrayImage(pixels=np.clip(out, 0.0, 1.0))


def split_and_flip(image: GrayImage) -> tuple[GrayImage, GrayImage]:
    """Split at the vertical midline and mirror the right half.

    Left = columns [0, floor(w/2)); right = columns [ceil(w/2), w) reversed.
    Odd widths drop the center column.
    """
    w = image.width
    if w < 2:
        raise ValidationError("image must be at least 2 pixels wide to split")
    half = w // 2
    left = image.pixels[:, :half]
    right = image.pixels[:, w - half:]
    return GrayImage(pixels=left.copy()), GrayImage(pixels=right[:, ::-1].copy())


def baseline_extract(image: GrayImage) -> np.ndarray:
    """Patch-mean features: 32x32 grid of 7x7 patch means, flattened row-major."""
    if image.height != NETWORK_SIZE or image.width != NETWORK_SIZE:
        raise ValidationError(
            f"baseline extractor expects a {NETWORK_SIZE}x{NETWORK_SIZE} image, "
            f"got {image.width}x{image.height}")
    patch = NETWORK_SIZE // BASELINE_GRID
    grid = image.pixels.reshape(BASELINE_GRID, patch, BASELINE_GRID, patch).mean(axis=(1, 3))
    return grid.reshape(-1)


class BaselinePoolExtractor:
    """Deterministic pixel-domain extractor (patch means over network-size crops)."""

    extractor_id = BASELINE_EXTRACTOR_ID
    base_dim = BASELINE_DIM

    def extract_parts(self, image: GrayImage, record_id: str, parts) -> list[np.ndarray]:
        whole = resize(image, NETWORK_SIZE, NETWORK_SIZE)
        out = []
        halves = None
        for part in parts:
            if part == PART_WHOLE:
                out.append(baseline_extract(whole))
            else:
                if halves is None:
                    left, right = split_and_flip(whole)
                    halves = {
                        PART_LEFT: resize(left, NETWORK_SIZE, NETWORK_SIZE),
                        PART_RIGHT_FLIPPED: resize(right, NETWORK_SIZE, NETWORK_SIZE),
                    }
                out.append(baseline_extract(halves[part]))
        return out


class ExternalStoreExtractor:
    """Feature source backed by a precomputed vector store.

    Part vectors are keyed by record id plus suffix: whole = ``<id>``,
    left = ``<id>#L``, flipped right = ``<id>#R``.
    """

    def __init__(self, store_path, extractor_id: str | None = None):
        fm = read_store_arrays(store_path)
        self._rows = {rid: fm.matrix[i] for i, rid in enumerate(fm.ids)}
        self.base_dim = fm.dim
        self.extractor_id = extractor_id or fm.extractor_id

    def extract_parts(self, image, record_id: str, parts) -> list[np.ndarray]:
        out = []
        for part in parts:
            key = record_id + EXTERNAL_PART_KEYS[part]
            row = self._rows.get(key)
            if row is None:
                raise MissingVectorError(
                    f"no vector for record {record_id!r} part {part!r} (key {key!r})")
            out.append(np.asarray(row, dtype=np.float64))
        return out


def open_extractor(spec: ExtractorSpec):
    if spec.kind is ExtractorKind.BASELINE_POOL:
        return BaselinePoolExtractor()
    return ExternalStoreExtractor(spec.store_path, extractor_id=spec.extractor_id)


def extract_config(image: GrayImage | None, config: FeatureConfig, extractor,
                   record_id: str = "") -> FeatureVector:
    """Extract the configured feature vector for one image/record.

    C1 = whole (n dims); C2 = left + flipped right (2n); C3 = left + flipped
    right + whole (3n).  Concatenation order is fixed.
    """
    if config not in CONFIG_PARTS:
        raise ValidationError(f"cannot extract config {config}")
    parts = CONFIG_PARTS[config]
    blocks = extractor.extract_parts(image, record_id, parts)
    values = np.concatenate([np.asarray(b, dtype=np.float32) for b in blocks])
    expected = extractor.base_dim * len(parts)
    if values.size != expected:
        raise ValidationError(
            f"extractor produced {values.size} values for {record_id!r}, expected {expected}")
    return FeatureVector(record_id=record_id, values=values, config=config,
                         extractor_id=extractor.extractor_id)
