"""Reproducible two-class synthetic data: X-ray-like images or raw feature vectors.

Images are lung-field ellipses on a noisy torso background.  Positives get a
bright apical rim on one randomly chosen lung (the asymmetry cue); a fraction
of the negatives get a central bright blob and carry a non-normal finding tag,
so the semi-automated manifest (pneumothorax vs. no-finding) is a strict
subset of the fully-automated one.  Every class cue scales with the
``separation`` parameter: at 0 the classes are indistinguishable and
downstream AUC sits at chance.

Vector mode skips pixels entirely and draws the three part vectors (left,
flipped right, whole) from class-dependent Gaussians, writing id-consistent
c1/c2/c3 stores plus a part-keyed store usable as an external feature source.

Everything is a pure function of (record id, seed), so regeneration is
byte-identical regardless of order or machine.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .datamodel import (DatasetMode, FeatureConfig, ImageRecord, Source,
                        assemble_manifest, assign_folds, derive_seed, save_listing,
                        save_manifest, write_store_arrays)
from .errors import ValidationError
from .imaging import EXTERNAL_PART_KEYS, GrayImage, save_image

SYNTH_VECTOR_EXTRACTOR = "synthetic-gaussian-parts"
FINDING_OTHER = "other_abnormality"


@dataclass(frozen=True)
class SynthResult:
    out_dir: Path
    listing_path: Path
    manifest_paths: dict
    records: tuple[ImageRecord, ...]
    store_paths: dict | None = None   # vectors mode
    images_dir: Path | None = None    # images mode
    parts_store_path: Path | None = None


def _plan_records(n_pos: int, n_neg: int, abnormal_frac: float, seed: int,
                  path_for) -> list[ImageRecord]:
    if n_pos < 1 or n_neg < 1:
        raise ValidationError("need at least one record per class")
    if not (0.0 <= abnormal_frac <= 1.0):
        raise ValidationError("abnormal_frac must lie in [0, 1]")
    records = []
    for i in range(n_pos):
        rid = f"syn-p{i:05d}"
        records.append(ImageRecord(id=rid, path=path_for(rid), label=1,
                                   source=Source.SYNTHETIC, finding="pneumothorax"))
    n_abnormal = int(round(n_neg * abnormal_frac))
    for i in range(n_neg):
        rid = f"syn-n{i:05d}"
        # Deterministic spread of abnormal negatives across the id range.
        abnormal = (derive_seed(seed, "abnormal", rid) % n_neg) < n_abnormal
        records.append(ImageRecord(id=rid, path=path_for(rid), label=0,
                                   source=Source.SYNTHETIC,
                                   finding=FINDING_OTHER if abnormal else "no_finding"))
    return records


def _write_manifests(records, out_dir: Path, folds: int | None, seed: int) -> dict:
    paths = {}
    for mode in (DatasetMode.SEMI_AUTOMATED, DatasetMode.FULLY_AUTOMATED):
        manifest = assemble_manifest(records, mode)
        if folds:
            manifest = assign_folds(manifest, folds, seed)
        path = out_dir / f"manifest_{mode.value}.csv"
        save_manifest(manifest, path)
        paths[mode.value] = path
    return paths


# ---------------------------------------------------------------------------
# image mode

def _ellipse_mask(yy, xx, cx, cy, rx, ry):
    return ((xx - cx) / rx) ** 2 + ((yy - cy) / ry) ** 2


def render_synthetic_image(record: ImageRecord, separation: float, seed: int,
                           size: int = 256) -> GrayImage:
    """Render one record's image; deterministic in (record.id, seed)."""
    rng = np.random.default_rng(derive_seed(seed, "image", record.id))
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) / size

    img = 0.45 + 0.18 * yy  # torso brightens toward the diaphragm
    jitter = lambda scale: 1.0 + scale * (rng.random() * 2.0 - 1.0)
    for cx in (0.30, 0.70):
        r = _ellipse_mask(yy, xx, cx * jitter(0.04), 0.52 * jitter(0.04),
                          0.16 * jitter(0.08), 0.30 * jitter(0.08))
        img = np.where(r <= 1.0, img - 0.22, img)

    rim_side = rng.random() < 0.5  # choose which lung carries the apical rim
    if record.label == 1 and separation > 0:
        cx = 0.30 if rim_side else 0.70
        r = _ellipse_mask(yy, xx, cx, 0.52, 0.16, 0.30)
        rim = (r >= 0.55) & (r <= 1.05) & (yy < 0.42)
        img = np.where(rim, img + 0.28 * separation, img)
    if record.finding == FINDING_OTHER and separation > 0:
        r = _ellipse_mask(yy, xx, 0.50, 0.62, 0.13, 0.13)
        img = np.where(r <= 1.0, img + 0.20 * separation, img)

    img += rng.normal(0.0, 0.04, size=img.shape)
    return GrayImage(pixels=np.clip(img, 0.0, 1.0))


def synth_images(out_dir, n_pos: int, n_neg: int, separation: float, seed: int, *,
                 image_size: int = 256, abnormal_frac: float = 0.2,
                 folds: int | None = None) -> SynthResult:
    if separation < 0:
        raise ValidationError("separation must be >= 0")
    out_dir = Path(out_dir)
    images_dir = out_dir / "images"
    images_dir.mkdir(parents=True, exist_ok=True)
    records = _plan_records(n_pos, n_neg, abnormal_frac, seed,
                            path_for=lambda rid: f"images/{rid}.png")
    for rec in records:
        save_image(render_synthetic_image(rec, separation, seed, size=image_size),
                   out_dir / rec.path)
    listing_path = out_dir / "listing.csv"
    save_listing(records, listing_path)
    manifest_paths = _write_manifests(records, out_dir, folds, seed)
    return SynthResult(out_dir=out_dir, listing_path=listing_path,
                       manifest_paths=manifest_paths, records=tuple(records),
                       images_dir=images_dir)


# ---------------------------------------------------------------------------
# vector mode

def _part_directions(seed: int, base_dim: int) -> dict:
    """Unit class-offset directions per part, plus the abnormal-blob directions."""
    out = {}
    for part in EXTERNAL_PART_KEYS:
        for kind in ("positive", "abnormal"):
            rng = np.random.default_rng(derive_seed(seed, "direction", kind, part))
            v = rng.normal(size=base_dim)
            out[(kind, part)] = v / np.linalg.norm(v)
    return out


def synthetic_part_vectors(record: ImageRecord, separation: float, seed: int,
                           base_dim: int, directions: dict) -> dict:
    """The three part vectors for one record, float32, deterministic in (id, seed)."""
    rng = np.random.default_rng(derive_seed(seed, "vector", record.id))
    parts = {}
    for part in EXTERNAL_PART_KEYS:  # insertion order: whole, left, right_flipped
        x = rng.normal(size=base_dim)
        if record.label == 1:
            x = x + separation * directions[("positive", part)]
        if record.finding == FINDING_OTHER:
            x = x + 0.5 * separation * directions[("abnormal", part)]
        parts[part] = x.astype(np.float32)
    return parts


def synth_vectors(out_dir, n_pos: int, n_neg: int, separation: float, seed: int, *,
                  base_dim: int = 1024, abnormal_frac: float = 0.2,
                  folds: int | None = None) -> SynthResult:
    """Write c1/c2/c3 stores (block-consistent) plus a part-keyed external store."""
    if separation < 0:
        raise ValidationError("separation must be >= 0")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    records = _plan_records(n_pos, n_neg, abnormal_frac, seed, path_for=lambda rid: "")
    directions = _part_directions(seed, base_dim)

    from .imaging import PART_LEFT, PART_RIGHT_FLIPPED, PART_WHOLE
    n = len(records)
    blocks = {p: np.empty((n, base_dim), dtype=np.float32)
              for p in (PART_LEFT, PART_RIGHT_FLIPPED, PART_WHOLE)}
    for i, rec in enumerate(records):
        parts = synthetic_part_vectors(rec, separation, seed, base_dim, directions)
        for p, v in parts.items():
            blocks[p][i] = v

    ids = [rec.id for rec in records]
    store_paths = {}
    configs = {
        FeatureConfig.C1: np.ascontiguousarray(blocks[PART_WHOLE]),
        FeatureConfig.C2: np.hstack([blocks[PART_LEFT], blocks[PART_RIGHT_FLIPPED]]),
        FeatureConfig.C3: np.hstack([blocks[PART_LEFT], blocks[PART_RIGHT_FLIPPED],
                                     blocks[PART_WHOLE]]),
    }
    for config, matrix in configs.items():
        path = out_dir / f"features_{config.value}.fv"
        write_store_arrays(ids, matrix, config, SYNTH_VECTOR_EXTRACTOR, path)
        store_paths[config.value] = path

    # Part-keyed store consumable through the external-extractor interface.
    part_ids, part_rows = [], []
    for i, rec in enumerate(records):
        for part, suffix in EXTERNAL_PART_KEYS.items():
            part_ids.append(rec.id + suffix)
            part_rows.append(blocks[part][i])
    parts_store_path = out_dir / "external_parts.fv"
    write_store_arrays(part_ids, np.stack(part_rows), FeatureConfig.C1,
                       SYNTH_VECTOR_EXTRACTOR, parts_store_path)

    listing_path = out_dir / "listing.csv"
    save_listing(records, listing_path)
    manifest_paths = _write_manifests(records, out_dir, folds, seed)
    return SynthResult(out_dir=out_dir, listing_path=listing_path,
                       manifest_paths=manifest_paths, records=tuple(records),
                       store_paths=store_paths, parts_store_path=parts_store_path)
