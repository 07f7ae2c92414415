"""Dataset records, location encoding, folds and augmentation.

On-disk layout::

    root/images/<id>.png      8-bit grayscale patch
    root/metadata.csv         id,filename,label,pos_x,pos_y,organ,
                              bbox_x0,bbox_y0,bbox_x1,bbox_y1,empty_bbox
    root/regions.csv          optional: organ,x0,y0,x1,y1,priority

Bounding boxes are half-open integer rectangles ``[x0, x1) x [y0, y1)`` in
patch pixel coordinates; x grows rightward and y grows downward.
"""

from __future__ import annotations

import csv
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image
from scipy import ndimage

from .errors import ConfigError, DataError, DomainError

LABELS = ("US", "PS", "RS", "OC", "NS")
ORGANS = ("RK", "LK", "BL", "OR")
LABEL_INDEX = {name: i for i, name in enumerate(LABELS)}
ORGAN_INDEX = {name: i for i, name in enumerate(ORGANS)}

METADATA_COLUMNS = (
    "id", "filename", "label", "pos_x", "pos_y", "organ",
    "bbox_x0", "bbox_y0", "bbox_x1", "bbox_y1", "empty_bbox",
)
REGION_COLUMNS = ("organ", "x0", "y0", "x1", "y1", "priority")


@dataclass
class PatchRecord:
    id: str
    image: np.ndarray  # float32, h x w, values in [0, 1]
    bbox: tuple[int, int, int, int]
    label: str
    pos_x: float
    pos_y: float
    organ: str
    empty_bbox: bool = False
    patient: str | None = None

    @property
    def label_index(self) -> int:
        return LABEL_INDEX[self.label]

    @property
    def location(self) -> np.ndarray:
        return encode_location(self.organ, self.pos_x, self.pos_y)


def _check_unit(name: str, value: float) -> float:
    value = float(value)
    if not (0.0 <= value <= 1.0) or value != value:
        raise DomainError(f"{name}={value!r} outside [0, 1]")
    return value


def encode_location(organ: str, pos_x: float, pos_y: float) -> np.ndarray:
    """Return ``[RK, LK, BL, OR, pos_x, pos_y]`` as a float32 vector."""
    if organ not in ORGAN_INDEX:
        raise DomainError(f"unknown organ {organ!r}; expected one of {ORGANS}")
    vec = np.zeros(6, dtype=np.float32)
    vec[ORGAN_INDEX[organ]] = 1.0
    vec[4] = _check_unit("pos_x", pos_x)
    vec[5] = _check_unit("pos_y", pos_y)
    return vec


def decode_location(vec: Sequence[float]) -> tuple[str, float, float]:
    vec = np.asarray(vec, dtype=np.float64)
    if vec.shape != (6,):
        raise DomainError(f"location vector must have 6 components, got shape {vec.shape}")
    onehot = vec[:4]
    if not (np.all((onehot == 0) | (onehot == 1)) and onehot.sum() == 1):
        raise DomainError(f"organ one-hot block is not one-hot: {onehot.tolist()}")
    return ORGANS[int(np.argmax(onehot))], float(vec[4]), float(vec[5])


@dataclass
class RegionMap:
    """Organ rectangles in normalized global coordinates, checked in priority order."""

    regions: list[tuple[str, tuple[float, float, float, float]]]

    def __post_init__(self):
        for organ, rect in self.regions:
            if organ not in ORGAN_INDEX or organ == "OR":
                raise ConfigError(f"region map cannot declare organ {organ!r}")
            x0, y0, x1, y1 = rect
            if not (0 <= x0 <= x1 <= 1 and 0 <= y0 <= y1 <= 1):
                raise ConfigError(f"region {organ} rectangle {rect} not inside the unit square")

    @classmethod
    def default(cls) -> "RegionMap":
        # "RK" sits at larger x by convention (viewer's left is the patient's right).
        return cls([
            ("RK", (0.55, 0.20, 0.85, 0.50)),
            ("LK", (0.15, 0.20, 0.45, 0.50)),
            ("BL", (0.35, 0.65, 0.65, 0.95)),
        ])

    @classmethod
    def from_csv(cls, path: str | Path) -> "RegionMap":
        rows = []
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            if tuple(reader.fieldnames or ()) != REGION_COLUMNS:
                raise DataError(f"{path}: header must be {','.join(REGION_COLUMNS)}")
            for row in reader:
                try:
                    rect = tuple(float(row[k]) for k in ("x0", "y0", "x1", "y1"))
                    rows.append((int(row["priority"]), row["organ"], rect))
                except ValueError as exc:
                    raise DataError(f"{path}: bad region row {row}: {exc}") from exc
        rows.sort(key=lambda r: r[0])
        return cls([(organ, rect) for _, organ, rect in rows])

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(REGION_COLUMNS)
            for priority, (organ, (x0, y0, x1, y1)) in enumerate(self.regions):
                writer.writerow([organ, x0, y0, x1, y1, priority])


def assign_organ_region(pos_x: float, pos_y: float, region_map: RegionMap | None = None) -> str:
    """First region (closed rectangle) containing the point, else ``"OR"``."""
    pos_x = _check_unit("pos_x", pos_x)
    pos_y = _check_unit("pos_y", pos_y)
    region_map = region_map or RegionMap.default()
    for organ, (x0, y0, x1, y1) in region_map.regions:
        if x0 <= pos_x <= x1 and y0 <= pos_y <= y1:
            return organ
    return "OR"


def bbox_to_mask(record: PatchRecord) -> np.ndarray:
    h, w = record.image.shape
    mask = np.zeros((h, w), dtype=np.float32)
    if not record.empty_bbox:
        x0, y0, x1, y1 = record.bbox
        mask[y0:y1, x0:x1] = 1.0
    return mask


# ---------------------------------------------------------------- preprocessing

def normalize_center(bbox: Sequence[float], width: int, height: int) -> tuple[float, float]:
    """Center of a full-image bbox divided by the full image size."""
    x0, y0, x1, y1 = bbox
    return (x0 + x1) / 2.0 / width, (y0 + y1) / 2.0 / height


def extract_patch(full_image: np.ndarray, bbox: Sequence[int], margin: float = 2.0):
    """Crop a square patch centered on ``bbox`` with side ``margin * max(bbox side)``.

    Pixels outside the radiograph are edge-padded. Returns the patch and the
    bbox translated into patch coordinates.
    """
    x0, y0, x1, y1 = (int(v) for v in bbox)
    if x1 <= x0 or y1 <= y0:
        raise DomainError(f"degenerate bbox {bbox}")
    side = int(np.ceil(margin * max(x1 - x0, y1 - y0)))
    cx, cy = (x0 + x1) / 2.0, (y0 + y1) / 2.0
    px0 = int(np.floor(cx - side / 2.0))
    py0 = int(np.floor(cy - side / 2.0))
    pad = side
    padded = np.pad(full_image, pad, mode="edge")
    patch = padded[py0 + pad:py0 + pad + side, px0 + pad:px0 + pad + side]
    local = (x0 - px0, y0 - py0, x1 - px0, y1 - py0)
    return patch.copy(), local


def preprocess_annotation(
    full_image: np.ndarray,
    bbox: Sequence[int],
    label: str,
    record_id: str,
    region_map: RegionMap | None = None,
    margin: float = 2.0,
) -> PatchRecord:
    """Turn one annotated box on a full radiograph into a :class:`PatchRecord`.

    Patch extraction first, then location: the normalized bbox center and its
    organ region.
    """
    if label not in LABEL_INDEX:
        raise DomainError(f"unknown label {label!r}")
    image = np.asarray(full_image, dtype=np.float32)
    if image.max() > 1.0:
        image = image / 255.0
    patch, local = extract_patch(image, bbox, margin)
    height, width = image.shape
    pos_x, pos_y = normalize_center(bbox, width, height)
    pos_x, pos_y = min(max(pos_x, 0.0), 1.0), min(max(pos_y, 0.0), 1.0)
    return PatchRecord(
        id=record_id,
        image=patch,
        bbox=local,
        label=label,
        pos_x=pos_x,
        pos_y=pos_y,
        organ=assign_organ_region(pos_x, pos_y, region_map),
        empty_bbox=(label == "NS"),
    )


# ---------------------------------------------------------------- folds

@dataclass
class FoldAssignment:
    k: int
    assignment: dict[str, int]

    def test_ids(self, fold: int) -> set[str]:
        return {rid for rid, f in self.assignment.items() if f == fold}

    def train_ids(self, fold: int) -> set[str]:
        return {rid for rid, f in self.assignment.items() if f != fold}

    def to_dict(self) -> dict:
        return {"k": self.k, "assignment": dict(sorted(self.assignment.items()))}


def make_folds(
    records: Sequence[PatchRecord],
    k: int = 5,
    seed: int = 0,
    group_by_patient: bool = False,
) -> FoldAssignment:
    """Stratified k-fold partition of record ids.

    Within a label, shuffled ids are dealt round-robin; the dealing position
    carries over between labels so total fold sizes stay balanced too.
    With ``group_by_patient`` whole patients are dealt instead of records.
    """
    if k < 2:
        raise ConfigError(f"k must be >= 2, got {k}")
    units: dict[str, list[tuple[str, list[str]]]] = {}
    if group_by_patient:
        groups: dict[str, list[PatchRecord]] = {}
        for rec in records:
            if rec.patient is None:
                raise ConfigError(f"record {rec.id} has no patient id; cannot group by patient")
            groups.setdefault(rec.patient, []).append(rec)
        for pid in sorted(groups):
            labels = [r.label for r in groups[pid]]
            major = max(sorted(set(labels)), key=labels.count)
            units.setdefault(major, []).append((pid, [r.id for r in groups[pid]]))
    else:
        for rec in records:
            units.setdefault(rec.label, []).append((rec.id, [rec.id]))

    for label, items in units.items():
        if len(items) < k:
            raise ConfigError(f"label {label} has {len(items)} units, fewer than k={k}")

    rng = np.random.default_rng(seed)
    assignment: dict[str, int] = {}
    cursor = 0
    for label in LABELS:
        items = sorted(units.get(label, []))
        order = rng.permutation(len(items))
        for j, idx in enumerate(order):
            for rid in items[idx][1]:
                assignment[rid] = (cursor + j) % k
        cursor = (cursor + len(items)) % k
    return FoldAssignment(k=k, assignment=assignment)


# ---------------------------------------------------------------- augmentation

@dataclass
class AugmentConfig:
    """Probabilities and ranges of the online augmentations.

    Inputs are single-channel, so color jitter reduces to brightness and
    contrast, and random grayscale is the identity.
    """

    jitter_p: float = 0.8
    brightness: float = 0.2
    contrast: float = 0.2
    grayscale_p: float = 0.2
    blur_p: float = 0.3
    blur_sigma: tuple[float, float] = (0.1, 1.0)
    flip_p: float = 0.5

    @classmethod
    def off(cls) -> "AugmentConfig":
        return cls(jitter_p=0.0, grayscale_p=0.0, blur_p=0.0, flip_p=0.0)


def adjust_brightness(image: np.ndarray, factor: float) -> np.ndarray:
    return np.clip(image * factor, 0.0, 1.0)


def adjust_contrast(image: np.ndarray, factor: float) -> np.ndarray:
    mean = float(image.mean())
    return np.clip((image - mean) * factor + mean, 0.0, 1.0)


def augment_rng(base_seed: int, epoch: int, record_id: str) -> np.random.Generator:
    return np.random.default_rng([base_seed, epoch, zlib.crc32(record_id.encode())])


def augment(image: np.ndarray, rng: np.random.Generator, config: AugmentConfig, mask: np.ndarray | None = None):
    """Apply jitter, grayscale, blur and horizontal flip; clamp to [0, 1].

    Geometric ops are mirrored on ``mask`` when given, in which case an
    ``(image, mask)`` tuple is returned.
    """
    out = np.asarray(image, dtype=np.float32)
    if rng.random() < config.jitter_p:
        b = rng.uniform(max(0.0, 1 - config.brightness), 1 + config.brightness)
        c = rng.uniform(max(0.0, 1 - config.contrast), 1 + config.contrast)
        if rng.random() < 0.5:
            out = adjust_contrast(adjust_brightness(out, b), c)
        else:
            out = adjust_brightness(adjust_contrast(out, c), b)
    if rng.random() < config.grayscale_p:
        pass  # already single-channel
    if rng.random() < config.blur_p:
        sigma = rng.uniform(*config.blur_sigma)
        out = ndimage.gaussian_filter(out, sigma=sigma, mode="reflect")
    if rng.random() < config.flip_p:
        out = out[:, ::-1]
        if mask is not None:
            mask = mask[:, ::-1]
    out = np.ascontiguousarray(np.clip(out, 0.0, 1.0), dtype=np.float32)
    if mask is None:
        return out
    return out, np.ascontiguousarray(mask)


def resize_image(image: np.ndarray, size: int, nearest: bool = False) -> np.ndarray:
    if image.shape == (size, size):
        return image
    resample = Image.NEAREST if nearest else Image.BILINEAR
    pil = Image.fromarray(np.asarray(image, dtype=np.float32), mode="F")
    return np.array(pil.resize((size, size), resample), dtype=np.float32)


# ---------------------------------------------------------------- disk IO

def _fmt_coord(v: float) -> str:
    return f"{v:.6f}"


def load_image(path: str | Path) -> np.ndarray:
    """Grayscale float32 image in [0, 1]."""
    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("L"), dtype=np.float32) / 255.0
    except OSError as exc:
        raise DataError(f"cannot read image {path}: {exc}") from exc


def write_dataset(root: str | Path, records: Iterable[PatchRecord]) -> Path:
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    rows = []
    for rec in records:
        filename = f"images/{rec.id}.png"
        pixels = np.round(np.clip(rec.image, 0, 1) * 255).astype(np.uint8)
        Image.fromarray(pixels, mode="L").save(root / filename)
        x0, y0, x1, y1 = rec.bbox
        rows.append([rec.id, filename, rec.label, _fmt_coord(rec.pos_x), _fmt_coord(rec.pos_y),
                     rec.organ, x0, y0, x1, y1, int(rec.empty_bbox)])
    with open(root / "metadata.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(METADATA_COLUMNS)
        writer.writerows(rows)
    return root


def _parse_row(row: dict, root: Path, lineno: int) -> PatchRecord:
    rid = row.get("id") or f"<line {lineno}>"

    def fail(msg: str):
        raise DataError(f"metadata row {rid!r} (line {lineno}): {msg}")

    if row["label"] not in LABEL_INDEX:
        fail(f"bad label {row['label']!r}, expected one of {LABELS}")
    if row["organ"] not in ORGAN_INDEX:
        fail(f"bad organ {row['organ']!r}, expected one of {ORGANS}")
    try:
        pos_x, pos_y = float(row["pos_x"]), float(row["pos_y"])
        bbox = tuple(int(row[k]) for k in ("bbox_x0", "bbox_y0", "bbox_x1", "bbox_y1"))
        empty = int(row["empty_bbox"])
    except ValueError as exc:
        fail(f"unparseable field: {exc}")
    for name, v in (("pos_x", pos_x), ("pos_y", pos_y)):
        if not 0.0 <= v <= 1.0:
            fail(f"{name}={v} outside [0, 1]")
    if empty not in (0, 1):
        fail(f"empty_bbox must be 0 or 1, got {empty}")
    path = root / row["filename"]
    if not path.is_file():
        fail(f"missing image file {path}")
    image = load_image(path)
    h, w = image.shape
    x0, y0, x1, y1 = bbox
    if not empty and not (0 <= x0 < x1 <= w and 0 <= y0 < y1 <= h):
        fail(f"bbox {bbox} outside image bounds {w}x{h}")
    return PatchRecord(
        id=row["id"], image=image, bbox=bbox, label=row["label"], pos_x=pos_x, pos_y=pos_y,
        organ=row["organ"], empty_bbox=bool(empty), patient=row.get("patient") or None,
    )


def load_dataset(root: str | Path) -> list[PatchRecord]:
    root = Path(root)
    meta = root / "metadata.csv"
    if not meta.is_file():
        raise DataError(f"missing {meta}")
    with open(meta, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = [c for c in METADATA_COLUMNS if c not in (reader.fieldnames or ())]
        if missing:
            raise DataError(f"{meta}: header lacks columns {missing}")
        records = [_parse_row(row, root, lineno) for lineno, row in enumerate(reader, start=2)]
    ids = [r.id for r in records]
    if len(set(ids)) != len(ids):
        raise DataError(f"{meta}: duplicate record ids")
    return records


def load_region_map(root: str | Path) -> RegionMap:
    path = Path(root) / "regions.csv"
    return RegionMap.from_csv(path) if path.is_file() else RegionMap.default()


@dataclass
class Batch:
    images: np.ndarray      # B x 1 x H x W
    masks: np.ndarray       # B x 1 x H x W
    locations: np.ndarray   # B x 6
    labels: np.ndarray      # B
    ids: list[str] = field(default_factory=list)


def collate(records: Sequence[PatchRecord], image_size: int, aug: AugmentConfig | None = None,
            seed: int = 0, epoch: int = 0) -> Batch:
    images, masks = [], []
    for rec in records:
        img, mask = rec.image, bbox_to_mask(rec)
        if aug is not None:
            img, mask = augment(img, augment_rng(seed, epoch, rec.id), aug, mask=mask)
        images.append(resize_image(img, image_size))
        masks.append(resize_image(mask, image_size, nearest=True))
    return Batch(
        images=np.stack(images)[:, None],
        masks=np.stack(masks)[:, None],
        locations=np.stack([rec.location for rec in records]),
        labels=np.array([rec.label_index for rec in records], dtype=np.int64),
        ids=[rec.id for rec in records],
    )
