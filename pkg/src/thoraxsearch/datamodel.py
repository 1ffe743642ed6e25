"""Record types, manifest CSV handling, fold assignment, and the binary vector store.

Manifest CSV (UTF-8, comma-separated, header required)::

    id,path,label,source,fold

``label`` is ``pneumothorax`` or ``negative``; ``source`` is one of
``mimic_cxr``, ``chexpert``, ``chestxray14``, ``synthetic``; ``fold`` is
empty (unassigned) or an integer 0-9.  Parsing is case-insensitive, the
writer emits lowercase, and serialize -> parse -> serialize is
byte-idempotent.

Ingest listings are a separate CSV (``id,path,finding,source``) carrying the
original free-text finding tag, which is needed to assemble semi-automated
manifests (pneumothorax vs. no-finding only); the binary label alone cannot
distinguish a normal image from an abnormal non-pneumothorax one.

Vector store layout (little-endian)::

    magic "FVSTORE1" | u32 version=1 | u32 count | u32 dim | u8 config tag
    | 3 pad bytes | u64 reserved=0          -> 32-byte header
    count * dim float32, row-major           -> data block
    count id lines + 1 extractor-id line     -> newline-terminated trailer

Rows are addressable in O(1); write -> read -> write is bit-exact.
"""

from __future__ import annotations

import csv
import io
import struct
from dataclasses import dataclass, replace
from enum import Enum
from pathlib import Path

import numpy as np

from .errors import ManifestParseError, StoreFormatError, ValidationError

STORE_MAGIC = b"FVSTORE1"
STORE_VERSION = 1
STORE_HEADER_SIZE = 32

LABEL_POSITIVE = 1
LABEL_NEGATIVE = 0

# Finding tags admitted into a semi-automated manifest (normalized form).
FINDING_PNEUMOTHORAX = "pneumothorax"
FINDING_NO_FINDING = "no_finding"

MANIFEST_COLUMNS = ("id", "path", "label", "source", "fold")
LISTING_COLUMNS = ("id", "path", "finding", "source")


class Source(str, Enum):
    MIMIC_CXR = "mimic_cxr"
    CHEXPERT = "chexpert"
    CHESTXRAY14 = "chestxray14"
    SYNTHETIC = "synthetic"


class DatasetMode(str, Enum):
    # Semi-automated: archive restricted to pneumothorax vs. no-finding images.
    # Fully-automated: archive contains every record.
    SEMI_AUTOMATED = "semi_automated"
    FULLY_AUTOMATED = "fully_automated"


class FeatureConfig(str, Enum):
    C1 = "c1"          # whole image, base width n
    C2 = "c2"          # left half + flipped right half, 2n
    C3 = "c3"          # left half + flipped right half + whole, 3n
    ENCODED = "encoded"  # 256-dim compressed vectors


ENCODED_DIM = 256

_CONFIG_TAGS = {FeatureConfig.C1: 1, FeatureConfig.C2: 2, FeatureConfig.C3: 3,
                FeatureConfig.ENCODED: 4}
_TAG_CONFIGS = {v: k for k, v in _CONFIG_TAGS.items()}


# ---------------------------------------------------------------------------
# records and manifests

@dataclass(frozen=True)
class ImageRecord:
    """One labelled image. ``finding`` keeps the original tag when known;
    it is not serialized into manifest CSVs."""

    id: str
    path: str
    label: int
    source: Source
    fold: int | None = None
    finding: str | None = None

    def __post_init__(self):
        if not self.id:
            raise ValidationError("record id must be non-empty")
        if "\n" in self.id or "\r" in self.id:
            raise ValidationError(f"record id {self.id!r} contains a newline")
        if self.label not in (LABEL_POSITIVE, LABEL_NEGATIVE):
            raise ValidationError(f"record {self.id}: label must be 0 or 1, got {self.label!r}")
        if self.fold is not None and not (0 <= self.fold <= 9):
            raise ValidationError(f"record {self.id}: fold must lie in [0, 9], got {self.fold}")
        if not isinstance(self.source, Source):
            raise ValidationError(f"record {self.id}: bad source {self.source!r}")


@dataclass(frozen=True)
class DatasetManifest:
    records: tuple[ImageRecord, ...]
    mode: DatasetMode = DatasetMode.FULLY_AUTOMATED

    def __post_init__(self):
        object.__setattr__(self, "records", tuple(self.records))
        seen = set()
        for rec in self.records:
            if rec.id in seen:
                raise ValidationError(f"duplicate record id {rec.id!r}")
            seen.add(rec.id)
        if self.mode is DatasetMode.SEMI_AUTOMATED:
            for rec in self.records:
                if rec.finding is not None and rec.finding not in (
                        FINDING_PNEUMOTHORAX, FINDING_NO_FINDING):
                    raise ValidationError(
                        f"record {rec.id}: finding {rec.finding!r} not admitted "
                        f"in a semi-automated manifest")

    def __len__(self):
        return len(self.records)

    def counts(self) -> dict:
        """Per-class and per-source tallies, recomputed from the records."""
        by_source = {s.value: {"positive": 0, "negative": 0} for s in Source}
        pos = neg = 0
        for rec in self.records:
            key = "positive" if rec.label == LABEL_POSITIVE else "negative"
            by_source[rec.source.value][key] += 1
            if rec.label == LABEL_POSITIVE:
                pos += 1
            else:
                neg += 1
        by_source = {s: c for s, c in by_source.items() if c["positive"] or c["negative"]}
        return {"positive": pos, "negative": neg, "total": pos + neg, "by_source": by_source}

    def labels_by_id(self) -> dict[str, int]:
        return {rec.id: rec.label for rec in self.records}

    def record_by_id(self, record_id: str) -> ImageRecord:
        for rec in self.records:
            if rec.id == record_id:
                return rec
        raise KeyError(record_id)


def normalize_finding(tag: str) -> str:
    return "_".join(tag.strip().lower().split())


def assemble_manifest(records, mode: DatasetMode) -> DatasetManifest:
    """Build a manifest from a record pool, applying the mode's admission rule.

    Semi-automated keeps only records whose finding is pneumothorax or
    no-finding; fully-automated keeps everything.  Built from the same pool,
    the semi-automated manifest is a subset of the fully-automated one with
    an identical positive set.
    """
    if mode is DatasetMode.SEMI_AUTOMATED:
        kept = [r for r in records
                if r.finding in (FINDING_PNEUMOTHORAX, FINDING_NO_FINDING)]
    else:
        kept = list(records)
    return DatasetManifest(records=tuple(kept), mode=mode)


# ---------------------------------------------------------------------------
# manifest / listing CSV

_LABEL_TOKENS = {"pneumothorax": LABEL_POSITIVE, "negative": LABEL_NEGATIVE}
_LABEL_NAMES = {LABEL_POSITIVE: "pneumothorax", LABEL_NEGATIVE: "negative"}


def _parse_source(token: str, line_no: int) -> Source:
    try:
        return Source(token.strip().lower())
    except ValueError:
        raise ManifestParseError(line_no, f"unknown source {token!r}") from None


def parse_manifest_csv(text: str, mode: DatasetMode = DatasetMode.FULLY_AUTOMATED,
                       ) -> DatasetManifest:
    reader = csv.reader(io.StringIO(text))
    try:
        header = next(reader)
    except StopIteration:
        raise ManifestParseError(1, "empty manifest") from None
    if tuple(h.strip().lower() for h in header) != MANIFEST_COLUMNS:
        raise ManifestParseError(1, f"expected header {','.join(MANIFEST_COLUMNS)!r}")
    records = []
    for line_no, row in enumerate(reader, start=2):
        if not row:
            continue
        if len(row) != len(MANIFEST_COLUMNS):
            raise ManifestParseError(line_no, f"expected {len(MANIFEST_COLUMNS)} fields, got {len(row)}")
        rid, path, label_tok, source_tok, fold_tok = row
        label = _LABEL_TOKENS.get(label_tok.strip().lower())
        if label is None:
            raise ManifestParseError(line_no, f"unknown label {label_tok!r}")
        source = _parse_source(source_tok, line_no)
        fold_tok = fold_tok.strip()
        if fold_tok == "":
            fold = None
        else:
            try:
                fold = int(fold_tok)
            except ValueError:
                raise ManifestParseError(line_no, f"fold {fold_tok!r} is not an integer") from None
        try:
            records.append(ImageRecord(id=rid, path=path, label=label, source=source, fold=fold))
        except ValidationError as exc:
            raise ValidationError(f"line {line_no}: {exc}") from None
    return DatasetManifest(records=tuple(records), mode=mode)


def manifest_to_csv(manifest: DatasetManifest) -> str:
    out = io.StringIO()
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(MANIFEST_COLUMNS)
    for rec in manifest.records:
        writer.writerow([rec.id, rec.path, _LABEL_NAMES[rec.label], rec.source.value,
                         "" if rec.fold is None else str(rec.fold)])
    return out.getvalue()


def load_manifest(path, mode: DatasetMode = DatasetMode.FULLY_AUTOMATED) -> DatasetManifest:
    return parse_manifest_csv(Path(path).read_text(encoding="utf-8"), mode=mode)


def save_manifest(manifest: DatasetManifest, path) -> None:
    Path(path).write_text(manifest_to_csv(manifest), encoding="utf-8")


def parse_listing_csv(text: str) -> list[ImageRecord]:
    """Parse an ingest listing (``id,path,finding,source``) into records.

    The finding tag is normalized; the binary label is pneumothorax vs.
    everything else.  Folds start unassigned.
    """
    reader = csv.reader(io.StringIO(text))
    try:
        header = next(reader)
    except StopIteration:
        raise ManifestParseError(1, "empty listing") from None
    if tuple(h.strip().lower() for h in header) != LISTING_COLUMNS:
        raise ManifestParseError(1, f"expected header {','.join(LISTING_COLUMNS)!r}")
    records = []
    for line_no, row in enumerate(reader, start=2):
        if not row:
            continue
        if len(row) != len(LISTING_COLUMNS):
            raise ManifestParseError(line_no, f"expected {len(LISTING_COLUMNS)} fields, got {len(row)}")
        rid, path, finding_tok, source_tok = row
        finding = normalize_finding(finding_tok)
        if not finding:
            raise ManifestParseError(line_no, "empty finding tag")
        label = LABEL_POSITIVE if finding == FINDING_PNEUMOTHORAX else LABEL_NEGATIVE
        source = _parse_source(source_tok, line_no)
        try:
            records.append(ImageRecord(id=rid, path=path, label=label, source=source,
                                       fold=None, finding=finding))
        except ValidationError as exc:
            raise ValidationError(f"line {line_no}: {exc}") from None
    return records


def load_listing(path) -> list[ImageRecord]:
    return parse_listing_csv(Path(path).read_text(encoding="utf-8"))


def save_listing(records, path) -> None:
    out = io.StringIO()
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(LISTING_COLUMNS)
    for rec in records:
        writer.writerow([rec.id, rec.path, rec.finding or "", rec.source.value])
    Path(path).write_text(out.getvalue(), encoding="utf-8")


# ---------------------------------------------------------------------------
# deterministic hashing and fold assignment

_M64 = (1 << 64) - 1


def _splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & _M64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _M64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _M64
    return x ^ (x >> 31)


def _fnv1a64(data: bytes) -> int:
    h = 0xCBF29CE484222325
    for b in data:
        h = ((h ^ b) * 0x100000001B3) & _M64
    return h


def stable_id_hash(record_id: str, seed: int) -> int:
    """64-bit hash of a record id, a pure function of (id, seed)."""
    return _splitmix64(_fnv1a64(record_id.encode("utf-8")) ^ _splitmix64(seed & _M64))


def derive_seed(seed: int, *tokens) -> int:
    """Derive an independent 63-bit RNG seed for a named purpose (e.g. per fold)."""
    h = _splitmix64(seed & _M64)
    for tok in tokens:
        h = _splitmix64(h ^ _fnv1a64(str(tok).encode("utf-8")))
    return h & 0x7FFFFFFFFFFFFFFF

def assign_folds(manifest: DatasetManifest, folds: int, seed: int,
                 allow_reassign: bool = False) -> DatasetManifest:
    """Assign every record to one of ``folds`` groups, sizes differing by at most 1.

    Ids are keyed by ``stable_id_hash`` and dealt round-robin in key order, so
    the assignment depends only on the id set and the seed, never on record
    order.
    """
    if not (2 <= folds <= 10):
        raise ValidationError(f"folds must lie in [2, 10], got {folds}")
    if folds > len(manifest.records):
        raise ValidationError(f"cannot split {len(manifest.records)} records into {folds} folds")
    if not allow_reassign and any(r.fold is not None for r in manifest.records):
        raise ValidationError("manifest already has fold assignments (pass allow_reassign=True)")
    ranked = sorted((rec.id for rec in manifest.records),
                    key=lambda rid: (stable_id_hash(rid, seed), rid))
    fold_of = {rid: i % folds for i, rid in enumerate(ranked)}
    new_records = tuple(replace(rec, fold=fold_of[rec.id]) for rec in manifest.records)
    return DatasetManifest(records=new_records, mode=manifest.mode)


# ---------------------------------------------------------------------------
# feature vectors and the binary store

@dataclass(frozen=True)
class FeatureVector:
    record_id: str
    values: np.ndarray  # float32, 1-D
    config: FeatureConfig
    extractor_id: str

    def __post_init__(self):
        values = np.ascontiguousarray(self.values, dtype=np.float32)
        if values.ndim != 1 or values.size == 0:
            raise ValidationError(f"vector {self.record_id}: values must be a non-empty 1-D array")
        if not np.all(np.isfinite(values)):
            raise ValidationError(f"vector {self.record_id}: non-finite values")
        if self.config is FeatureConfig.ENCODED and values.size != ENCODED_DIM:
            raise ValidationError(
                f"vector {self.record_id}: encoded vectors must have dim {ENCODED_DIM}, "
                f"got {values.size}")
        if not self.extractor_id or "\n" in self.extractor_id:
            raise ValidationError("extractor_id must be non-empty and newline-free")
        object.__setattr__(self, "values", values)

    @property
    def dim(self) -> int:
        return int(self.values.size)


@dataclass(frozen=True)
class FeatureMatrix:
    """Id-aligned matrix view of one store: row i belongs to ids[i]."""

    ids: tuple[str, ...]
    matrix: np.ndarray  # (count, dim) float32
    config: FeatureConfig
    extractor_id: str

    @property
    def dim(self) -> int:
        return int(self.matrix.shape[1])

    def __len__(self):
        return len(self.ids)


def write_store_arrays(ids, matrix: np.ndarray, config: FeatureConfig,
                       extractor_id: str, path) -> None:
    ids = list(ids)
    matrix = np.ascontiguousarray(matrix, dtype=np.float32)
    if matrix.ndim != 2 or matrix.shape[0] != len(ids):
        raise ValidationError("matrix rows must align with ids")
    if len(set(ids)) != len(ids):
        raise ValidationError("store ids must be unique")
    for rid in ids:
        if not rid or "\n" in rid or "\r" in rid:
            raise ValidationError(f"store id {rid!r} must be non-empty and newline-free")
    if not extractor_id or "\n" in extractor_id:
        raise ValidationError("extractor_id must be non-empty and newline-free")
    count, dim = matrix.shape
    header = STORE_MAGIC + struct.pack("<IIIB3xQ", STORE_VERSION, count, dim,
                                       _CONFIG_TAGS[config], 0)
    assert len(header) == STORE_HEADER_SIZE
    trailer = "\n".join(list(ids) + [extractor_id]).encode("utf-8") + b"\n"
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(matrix.tobytes(order="C"))
        fh.write(trailer)


def read_store_arrays(path) -> FeatureMatrix:
    raw = Path(path).read_bytes()
    if len(raw) < STORE_HEADER_SIZE:
        raise StoreFormatError(f"{path}: file shorter than the {STORE_HEADER_SIZE}-byte header")
    if raw[:8] != STORE_MAGIC:
        raise StoreFormatError(f"{path}: bad magic {raw[:8]!r}")
    version, count, dim, tag, _reserved = struct.unpack("<IIIB3xQ", raw[8:STORE_HEADER_SIZE])
    if version != STORE_VERSION:
        raise StoreFormatError(f"{path}: unsupported version {version}")
    if tag not in _TAG_CONFIGS:
        raise StoreFormatError(f"{path}: unknown config tag {tag}")
    block_size = count * dim * 4
    if len(raw) < STORE_HEADER_SIZE + block_size:
        raise StoreFormatError(f"{path}: truncated data block")
    block = raw[STORE_HEADER_SIZE:STORE_HEADER_SIZE + block_size]
    trailer = raw[STORE_HEADER_SIZE + block_size:]
    if not trailer.endswith(b"\n"):
        raise StoreFormatError(f"{path}: truncated id table")
    lines = trailer.decode("utf-8").split("\n")[:-1]
    if len(lines) != count + 1:
        raise StoreFormatError(f"{path}: id table has {len(lines)} lines, expected {count + 1}")
    ids, extractor_id = lines[:count], lines[count]
    if len(set(ids)) != count:
        raise StoreFormatError(f"{path}: duplicate ids in id table")
    matrix = np.frombuffer(block, dtype="<f4").reshape(count, dim).copy()
    return FeatureMatrix(ids=tuple(ids), matrix=matrix, config=_TAG_CONFIGS[tag],
                         extractor_id=extractor_id)


def write_store(vectors, path) -> None:
    """Write FeatureVectors sharing one (dim, config, extractor) to a store file."""
    vectors = list(vectors)
    if not vectors:
        raise ValidationError("cannot write an empty store")
    dim = vectors[0].dim
    config = vectors[0].config
    extractor_id = vectors[0].extractor_id
    for v in vectors:
        if v.dim != dim:
            raise ValidationError(f"vector {v.record_id}: dim {v.dim} != {dim}")
        if v.config is not config:
            raise ValidationError(f"vector {v.record_id}: config {v.config} != {config}")
        if v.extractor_id != extractor_id:
            raise ValidationError(f"vector {v.record_id}: extractor {v.extractor_id!r} != {extractor_id!r}")
    matrix = np.stack([v.values for v in vectors])
    write_store_arrays([v.record_id for v in vectors], matrix, config, extractor_id, path)


def read_store(path) -> list[FeatureVector]:
    fm = read_store_arrays(path)
    return [FeatureVector(record_id=rid, values=fm.matrix[i], config=fm.config,
                          extractor_id=fm.extractor_id)
            for i, rid in enumerate(fm.ids)]
