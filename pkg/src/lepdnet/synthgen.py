"""Procedural KUB-like patch generator.

Each record is rendered from a per-record seed so the dataset is a pure
function of :class:`SynthSpec`, independent of worker count. Three modes
isolate different sources of class evidence:

``full``
    shape, intensity and location all depend on the label.
``location_only``
    US and PS share one recipe and one image seed per index, so matched
    US/PS images are pixel-identical and only the location metadata differs.
``region_only``
    locations are label-independent and the label only changes what is
    inside the bbox; border distractors mimic random stone shapes.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np
from scipy import ndimage

from .dataio import LABELS, LABEL_INDEX, PatchRecord, RegionMap, assign_organ_region, write_dataset
from .errors import ConfigError, DomainError

log = logging.getLogger(__name__)

MODES = ("full", "location_only", "region_only")
BORDER_FRACTION = 0.25
# stream ids for SeedSequence; never reorder
_IMAGE_STREAM, _LOCATION_STREAM = 1, 2


@dataclass
class SynthSpec:
    n_per_class: int | Mapping[str, int] = 100
    image_size: int = 64
    seed: int = 0
    mode: str = "full"
    distractor_density: float = 0.3
    noise_sigma: float = 0.04
    workers: int = 1

    def __post_init__(self):
        counts = self.counts()
        if any(n < 1 for n in counts.values()):
            raise ConfigError(f"n_per_class must be >= 1 for every label, got {counts}")
        if self.image_size < 32:
            raise ConfigError(f"image_size must be >= 32, got {self.image_size}")
        if not 0.0 <= self.distractor_density <= 1.0:
            raise ConfigError(f"distractor_density must lie in [0, 1], got {self.distractor_density}")
        if self.noise_sigma < 0:
            raise ConfigError(f"noise_sigma must be >= 0, got {self.noise_sigma}")
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")

    def counts(self) -> dict[str, int]:
        if isinstance(self.n_per_class, Mapping):
            unknown = set(self.n_per_class) - set(LABELS)
            if unknown:
                raise ConfigError(f"unknown labels in n_per_class: {sorted(unknown)}")
            return {lab: int(self.n_per_class.get(lab, 0)) for lab in LABELS}
        return {lab: int(self.n_per_class) for lab in LABELS}


def scaled_counts(ratio: Mapping[str, float], total: int) -> dict[str, int]:
    """Largest-remainder rounding of ``ratio`` to integer counts summing to ``total``."""
    weights = np.array([float(ratio[lab]) for lab in LABELS])
    exact = weights / weights.sum() * total
    counts = np.floor(exact).astype(int)
    for i in np.argsort(-(exact - counts), kind="stable")[: total - counts.sum()]:
        counts[i] += 1
    return dict(zip(LABELS, counts.tolist()))


# Class roster counts of the clinical cohort, used for the imbalanced preset.
CLINICAL_RATIO = {"US": 139, "PS": 448, "RS": 296, "OC": 91, "NS": 410}


# ---------------------------------------------------------------- recipes

@dataclass(frozen=True)
class ClassRecipe:
    """Geometry, brightness and global-location prior of one label.

    ``shape`` keys depend on ``shape["kind"]``; all lengths are fractions of
    the patch side. ``location_prior`` is a list of weighted mixture
    components in normalized radiograph coordinates.
    """

    label: str
    shape: dict = field(default_factory=dict)
    intensity_range: tuple[float, float] = (0.7, 0.9)
    location_prior: tuple = ()


RECIPES = {
    "RS": ClassRecipe(
        "RS",
        {"kind": "ellipse", "a": (0.17, 0.22), "b": (0.11, 0.15), "theta": (0.0, math.pi)},
        (0.82, 0.95),
        (("gauss", 0.5, (0.30, 0.35), 0.05), ("gauss", 0.5, (0.70, 0.35), 0.05)),
    ),
    "US": ClassRecipe(
        "US",
        {"kind": "ellipse", "a": (0.12, 0.17), "b": (0.045, 0.065), "theta": (math.pi / 2 - 0.35, math.pi / 2 + 0.35)},
        (0.66, 0.82),
        (("segment", 0.5, (0.33, 0.45), (0.42, 0.70), 0.015), ("segment", 0.5, (0.67, 0.45), (0.58, 0.70), 0.015)),
    ),
    "PS": ClassRecipe(
        "PS",
        {"kind": "ringed", "r": (0.09, 0.13), "aspect": (1.0, 1.12), "core": 0.45, "core_drop": (0.25, 0.4)},
        (0.66, 0.84),
        (("pelvic", 1.0, (0.50, 0.84), (0.10, 0.035)),),
    ),
    "OC": ClassRecipe(
        "OC",
        {"kind": "lobes", "n": (3, 5), "r": (0.05, 0.08), "spread": (0.04, 0.08)},
        (0.55, 0.80),
        (("uniform", 1.0, (0.05, 0.05), (0.95, 0.95)),),
    ),
    "NS": ClassRecipe(
        "NS",
        {"kind": "none"},
        (0.0, 0.0),
        (("uniform", 1.0, (0.05, 0.05), (0.95, 0.95)),),
    ),
}

UNIFORM_PRIOR = (("uniform", 1.0, (0.05, 0.05), (0.95, 0.95)),)


def sample_location(prior, rng: np.random.Generator) -> tuple[float, float]:
    weights = np.array([c[1] for c in prior], dtype=float)
    comp = prior[int(rng.choice(len(prior), p=weights / weights.sum()))]
    kind = comp[0]
    if kind == "gauss":
        _, _, (mx, my), sigma = comp
        x, y = rng.normal(mx, sigma), rng.normal(my, sigma)
    elif kind == "segment":
        _, _, (ax, ay), (bx, by), jitter = comp
        t = rng.random()
        x = ax + t * (bx - ax) + rng.normal(0, jitter)
        y = ay + t * (by - ay) + rng.normal(0, jitter)
    elif kind == "pelvic":
        _, _, (mx, my), (sx, sy) = comp
        x, y = rng.normal(mx, sx), rng.normal(my, sy)
    elif kind == "uniform":
        _, _, (x0, y0), (x1, y1) = comp
        x, y = rng.uniform(x0, x1), rng.uniform(y0, y1)
    else:
        raise ConfigError(f"unknown prior component {kind!r}")
    return float(np.clip(x, 0.0, 1.0)), float(np.clip(y, 0.0, 1.0))


# ---------------------------------------------------------------- drawing

def _ellipse_alpha(size: int, cx: float, cy: float, a: float, b: float, theta: float, soft: float = 1.2) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    dx, dy = xx - cx, yy - cy
    c, s = math.cos(theta), math.sin(theta)
    u = (dx * c + dy * s) / a
    v = (-dx * s + dy * c) / b
    rr = np.sqrt(u * u + v * v)
    return np.clip((1.0 - rr) * min(a, b) / soft, 0.0, 1.0)


def _sample_lobes(recipe: ClassRecipe, rng: np.random.Generator, scale: float = 1.0):
    """Sample the blob as a list of ``(dx, dy, a, b, theta)`` in patch-side fractions."""
    sh = recipe.shape
    kind = sh["kind"]
    if kind == "ellipse":
        a, b = rng.uniform(*sh["a"]), rng.uniform(*sh["b"])
        return [(0.0, 0.0, a * scale, b * scale, rng.uniform(*sh["theta"]))], None
    if kind == "ringed":
        r = rng.uniform(*sh["r"])
        asp = rng.uniform(*sh["aspect"])
        theta = rng.uniform(0, math.pi)
        core = (sh["core"], rng.uniform(*sh["core_drop"]))
        return [(0.0, 0.0, r * asp * scale, r * scale, theta)], core
    if kind == "lobes":
        n = int(rng.integers(sh["n"][0], sh["n"][1]))
        base = rng.uniform(0, 2 * math.pi)
        lobes = []
        for i in range(n):
            ang = base + 2 * math.pi * i / n + rng.normal(0, 0.3)
            dist = rng.uniform(*sh["spread"])
            r = rng.uniform(*sh["r"])
            lobes.append((dist * math.cos(ang) * scale, dist * math.sin(ang) * scale,
                          r * scale, r * rng.uniform(0.75, 1.0) * scale, rng.uniform(0, math.pi)))
        return lobes, None
    return [], None


def _lobe_extent(lobes) -> float:
    return max(math.hypot(dx, dy) + max(a, b) for dx, dy, a, b, _ in lobes)


def _draw(size: int, center: tuple[float, float], lobes, core):
    """Return (alpha, value-modulation) for a blob at ``center`` (pixels)."""
    alpha = np.zeros((size, size))
    cx, cy = center
    for dx, dy, a, b, theta in lobes:
        alpha = np.maximum(alpha, _ellipse_alpha(size, cx + dx * size, cy + dy * size, a * size, b * size, theta))
    mod = np.ones((size, size))
    if core is not None:
        frac, drop = core
        dx, dy, a, b, theta = lobes[0]
        inner = _ellipse_alpha(size, cx + dx * size, cy + dy * size, a * frac * size, b * frac * size, theta, soft=1.5)
        mod = 1.0 - drop * inner
    return alpha, mod


def _background(size: int, rng: np.random.Generator) -> np.ndarray:
    img = np.zeros((size, size))
    for cells, amp in ((4, 1.0), (8, 0.5), (16, 0.25)):
        grid = rng.random((cells + 3, cells + 3))
        up = ndimage.zoom(grid, size / cells, order=3, mode="reflect")
        off = int(size / cells)
        img += amp * up[off:off + size, off:off + size]
    img = (img - img.min()) / max(img.max() - img.min(), 1e-9)
    lo = rng.uniform(0.15, 0.25)
    return lo + img * rng.uniform(0.15, 0.25)


def _place_distractor(size: int, lobes, rng: np.random.Generator) -> tuple[float, float]:
    band = BORDER_FRACTION * size
    ext = _lobe_extent(lobes) * size
    side = int(rng.integers(4))
    perp = rng.uniform(ext, band - ext) if band - ext > ext else band / 2
    along = rng.uniform(ext, size - ext)
    if side == 0:
        return along, perp
    if side == 1:
        return along, size - perp
    if side == 2:
        return perp, along
    return size - perp, along


def render_patch(
    recipe: ClassRecipe,
    location: tuple[float, float],
    rng: np.random.Generator,
    image_size: int = 64,
    distractor_density: float = 0.3,
    noise_sigma: float = 0.04,
):
    """Render one patch; returns ``(image, bbox, empty_flag)``.

    ``location`` is validated but does not influence pixels: patches are
    generated directly, with the global position carried as metadata.
    """
    if recipe.label not in LABEL_INDEX:
        raise DomainError(f"unknown recipe label {recipe.label!r}")
    if len(location) != 2 or not all(0.0 <= float(v) <= 1.0 for v in location):
        raise DomainError(f"location {location!r} must be two values in [0, 1]")
    size = image_size
    img = _background(size, rng)

    n_distractors = int(rng.binomial(4, distractor_density))
    for _ in range(n_distractors):
        mimic = RECIPES[("US", "PS", "RS", "OC")[int(rng.integers(4))]]
        lobes, core = _sample_lobes(mimic, rng)
        max_ext = 0.45 * BORDER_FRACTION
        lobes, core = _sample_lobes(mimic, rng, scale=min(1.0, max_ext / _lobe_extent(lobes)))
        alpha, mod = _draw(size, _place_distractor(size, lobes, rng), lobes, core)
        value = rng.uniform(0.6, 0.95) * mod
        img = img * (1 - alpha) + alpha * value

    lobes, core = _sample_lobes(recipe, rng)
    if lobes:
        center = (size / 2.0, size / 2.0)
        alpha, mod = _draw(size, center, lobes, core)
        ys, xs = np.nonzero(alpha > 0)
        # re-center asymmetric blobs on the patch center
        shift_x = size / 2.0 - (xs.min() + xs.max() + 1) / 2.0
        shift_y = size / 2.0 - (ys.min() + ys.max() + 1) / 2.0
        if shift_x or shift_y:
            center = (center[0] + shift_x, center[1] + shift_y)
            alpha, mod = _draw(size, center, lobes, core)
            ys, xs = np.nonzero(alpha > 0)
        value = rng.uniform(*recipe.intensity_range) * mod
        img = img * (1 - alpha) + alpha * value
        bbox = (int(xs.min()), int(ys.min()), int(xs.max()) + 1, int(ys.max()) + 1)
        empty = False
    else:
        bbox, empty = (0, 0, size, size), True

    if noise_sigma > 0:
        img = img + rng.normal(0.0, noise_sigma, img.shape)
    return np.clip(img, 0.0, 1.0).astype(np.float32), bbox, empty


# ---------------------------------------------------------------- dataset

def _record_task(args):
    spec, label, index, region_map = args
    mode = spec.mode
    recipe = RECIPES[label]
    image_key = LABEL_INDEX[label]
    if mode == "location_only" and label in ("US", "PS"):
        recipe = ClassRecipe(label, RECIPES["US"].shape, RECIPES["US"].intensity_range)
        image_key = LABEL_INDEX["US"]
    prior = UNIFORM_PRIOR if mode == "region_only" else RECIPES[label].location_prior

    loc_rng = np.random.default_rng(np.random.SeedSequence([spec.seed, _LOCATION_STREAM, LABEL_INDEX[label], index]))
    pos_x, pos_y = sample_location(prior, loc_rng)
    img_rng = np.random.default_rng(np.random.SeedSequence([spec.seed, _IMAGE_STREAM, image_key, index]))
    image, bbox, empty = render_patch(recipe, (pos_x, pos_y), img_rng, spec.image_size,
                                      spec.distractor_density, spec.noise_sigma)
    return PatchRecord(
        id=f"{label}_{index:05d}", image=image, bbox=bbox, label=label,
        pos_x=pos_x, pos_y=pos_y, organ=assign_organ_region(pos_x, pos_y, region_map),
        empty_bbox=empty,
    )


def generate_records(spec: SynthSpec, region_map: RegionMap | None = None) -> list[PatchRecord]:
    region_map = region_map or RegionMap.default()
    tasks = [(spec, label, i, region_map) for label, n in spec.counts().items() for i in range(n)]
    if spec.workers > 1:
        with ProcessPoolExecutor(spec.workers) as pool:
            return list(pool.map(_record_task, tasks, chunksize=16))
    return [_record_task(t) for t in tasks]


def generate_dataset(spec: SynthSpec, root: str | Path, region_map: RegionMap | None = None) -> Path:
    records = generate_records(spec, region_map)
    log.info("writing %d synthetic records (mode=%s) to %s", len(records), spec.mode, root)
    try:
        return write_dataset(root, records)
    except OSError as exc:
        raise OSError(f"cannot write dataset to {root}: {exc}") from exc
