"""Dataset ingestion, patch mining, balanced batching, and a synthetic
multi-domain corpus generator.

Domains play one of three roles: labeled_source (train with labels),
unlabeled_source (train without labels, perceptual/domain terms only), and
labeled_target (never trained on, evaluation only). The synthetic generator
stands in for a multi-scanner shift: shared cell content, per-domain color
transforms.

Manifest schema (JSON, unknown fields rejected, paths relative to the
manifest file):

    {"domains": [{"id": 0, "name": "ScannerA", "role": "labeled_source"}, ...],
     "images":  [{"path": "rel/img.png", "domain": 0,
                  "annotations": [{"x_min":.., "y_min":.., "x_max":.., "y_max":..,
                                   "class": "mitotic_figure" | "hard_negative"}]}]}

An annotation may instead carry point fields {"x":.., "y":.., "class":..};
it is converted to a fixed-size square box around the point.
"""

from __future__ import annotations

import dataclasses
import json
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from PIL import Image

from .boxgeom import BBox, CLASS_NAMES
from .errors import ConfigError, DatasetError

LABELED_SOURCE = "labeled_source"
UNLABELED_SOURCE = "unlabeled_source"
LABELED_TARGET = "labeled_target"
ROLES = (LABELED_SOURCE, UNLABELED_SOURCE, LABELED_TARGET)

SPLITS = ("train", "val", "test")

_CLASS_IDS = {name: i for i, name in enumerate(CLASS_NAMES)}


@dataclass(frozen=True)
class Domain:
    domain_id: int
    name: str
    role: str

    def __post_init__(self):
        if self.role not in ROLES:
            raise DatasetError(f"unknown domain role '{self.role}' "
                               f"(expected one of {ROLES})")


@dataclass(frozen=True)
class DomainTable:
    """All domains of a dataset; ids must be dense from 0."""

    domains: tuple[Domain, ...]

    def __post_init__(self):
        ids = sorted(d.domain_id for d in self.domains)
        if ids != list(range(len(self.domains))):
            raise DatasetError(f"domain ids must be dense from 0, got {ids}")

    def __len__(self) -> int:
        return len(self.domains)

    def by_id(self, domain_id: int) -> Domain:
        for d in self.domains:
            if d.domain_id == domain_id:
                return d
        raise KeyError(domain_id)

    def role_ids(self, role: str) -> list[int]:
        return sorted(d.domain_id for d in self.domains if d.role == role)

    def training_ids(self, include_unlabeled: bool = False) -> list[int]:
        """Domains that feed training batches, in classifier-index order."""
        ids = self.role_ids(LABELED_SOURCE)
        if include_unlabeled:
            ids += self.role_ids(UNLABELED_SOURCE)
        return sorted(ids)


@dataclass(frozen=True)
class Annotation:
    box: BBox
    class_id: int

    def __post_init__(self):
        if self.class_id not in range(len(CLASS_NAMES)):
            raise DatasetError(f"class_id must index {CLASS_NAMES}, got {self.class_id}")


@dataclass
class PatchRecord:
    """One training/eval sample: an image (in memory or on disk), its
    domain, and its annotations."""

    domain_id: int
    annotations: tuple[Annotation, ...]
    image: np.ndarray | None = None
    image_path: str | None = None
    split: str = "train"

    def load_image(self) -> np.ndarray:
        if self.image is not None:
            return self.image
        if self.image_path is None:
            raise DatasetError("record has neither in-memory image nor a path")
        return load_image(self.image_path)

    def gt_arrays(self) -> tuple[np.ndarray, np.ndarray]:
        """(G,4) boxes and (G,) class ids of this record's annotations."""
        if not self.annotations:
            return np.zeros((0, 4)), np.zeros(0, dtype=np.int64)
        boxes = np.stack([a.box.as_array() for a in self.annotations])
        classes = np.array([a.class_id for a in self.annotations], dtype=np.int64)
        return boxes, classes


def load_image(path) -> np.ndarray:
    """Read an 8-bit RGB raster into float32 (H, W, 3) in [0, 1]."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32)
    return arr / 255.0


def save_image(path, image: np.ndarray) -> None:
    """Write a float [0, 1] (H, W, 3) array as an 8-bit PNG."""
    arr = np.clip(np.asarray(image) * 255.0 + 0.5, 0, 255).astype(np.uint8)
    Image.fromarray(arr).save(path, format="PNG")


# ---------------------------------------------------------------------------
# Manifest I/O

def _require_keys(obj: dict, required: set[str], optional: set[str], where: str):
    keys = set(obj)
    missing = required - keys
    unknown = keys - required - optional
    if missing:
        raise DatasetError(f"{where}: missing field(s) {sorted(missing)}")
    if unknown:
        raise DatasetError(f"{where}: unknown field(s) {sorted(unknown)}")


def _parse_annotation(entry: dict, where: str, point_box_size: float) -> Annotation:
    if not isinstance(entry, dict):
        raise DatasetError(f"{where}: annotation must be an object")
    cls_name = entry.get("class")
    if cls_name not in _CLASS_IDS:
        raise DatasetError(f"{where}.class: unknown class name {cls_name!r} "
                           f"(expected one of {list(CLASS_NAMES)})")
    if "x" in entry or "y" in entry:
        _require_keys(entry, {"x", "y", "class"}, set(), where)
        half = point_box_size / 2.0
        x, y = float(entry["x"]), float(entry["y"])
        box = BBox(x - half, y - half, x + half, y + half)
    else:
        _require_keys(entry, {"x_min", "y_min", "x_max", "y_max", "class"}, set(), where)
        try:
            box = BBox(float(entry["x_min"]), float(entry["y_min"]),
                       float(entry["x_max"]), float(entry["y_max"]))
        except ValueError as e:
            raise DatasetError(f"{where}: {e}") from e
    return Annotation(box, _CLASS_IDS[cls_name])


def _clamp_annotation(ann: Annotation, width: int, height: int,
                      where: str) -> Annotation:
    b = ann.box
    x0, y0 = max(0.0, b.x_min), max(0.0, b.y_min)
    x1, y1 = min(float(width), b.x_max), min(float(height), b.y_max)
    if not (x0 < x1 and y0 < y1):
        raise DatasetError(f"{where}: box lies outside the {width}x{height} image")
    return Annotation(BBox(x0, y0, x1, y1), ann.class_id)


def load_dataset(manifest_path, point_box_size: float = 50.0
                 ) -> tuple[DomainTable, list[PatchRecord]]:
    """Parse and validate a manifest; returns the domain table and records.

    Every referenced image must exist; annotation boxes are clamped to the
    image bounds. Distinct failure modes raise DatasetError with the
    offending field or path in the message.
    """
    manifest_path = Path(manifest_path)
    if not manifest_path.exists():
        raise DatasetError(f"manifest not found: {manifest_path}")
    try:
        doc = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as e:
        raise DatasetError(f"{manifest_path}: invalid JSON ({e})") from e
    if not isinstance(doc, dict):
        raise DatasetError(f"{manifest_path}: top level must be an object")
    _require_keys(doc, {"domains", "images"}, set(), str(manifest_path))

    domains = []
    for i, entry in enumerate(doc["domains"]):
        where = f"domains[{i}]"
        _require_keys(entry, {"id", "name", "role"}, set(), where)
        domains.append(Domain(int(entry["id"]), str(entry["name"]), entry["role"]))
    table = DomainTable(tuple(domains))

    root = manifest_path.parent
    records = []
    for i, entry in enumerate(doc["images"]):
        where = f"images[{i}]"
        _require_keys(entry, {"path", "domain", "annotations"}, set(), where)
        domain_id = int(entry["domain"])
        if domain_id not in range(len(table)):
            raise DatasetError(f"{where}.domain: no such domain id {domain_id}")
        path = root / entry["path"]
        if not path.exists():
            raise DatasetError(f"{where}.path: image not found: {path}")
        with Image.open(path) as im:
            width, height = im.size
        anns = []
        for j, a in enumerate(entry["annotations"]):
            aw = f"{where}.annotations[{j}]"
            anns.append(_clamp_annotation(_parse_annotation(a, aw, point_box_size),
                                          width, height, aw))
        records.append(PatchRecord(domain_id=domain_id, annotations=tuple(anns),
                                   image_path=str(path)))
    return table, records


def save_manifest(manifest_path, table: DomainTable,
                  records: Sequence[PatchRecord]) -> None:
    """Write a manifest for records whose image_path is set; paths are
    stored relative to the manifest location."""
    root = Path(manifest_path).parent
    doc = {
        "domains": [{"id": d.domain_id, "name": d.name, "role": d.role}
                    for d in sorted(table.domains, key=lambda d: d.domain_id)],
        "images": [],
    }
    for rec in records:
        if rec.image_path is None:
            raise DatasetError("cannot write manifest for an in-memory-only record")
        doc["images"].append({
            "path": str(Path(rec.image_path).resolve().relative_to(root.resolve())),
            "domain": rec.domain_id,
            "annotations": [
                {"x_min": a.box.x_min, "y_min": a.box.y_min,
                 "x_max": a.box.x_max, "y_max": a.box.y_max,
                 "class": CLASS_NAMES[a.class_id]}
                for a in rec.annotations
            ],
        })
    Path(manifest_path).write_text(json.dumps(doc, indent=2) + "\n")


# ---------------------------------------------------------------------------
# Patch mining

def mine_patches(image: np.ndarray, annotations: Sequence[Annotation],
                 domain_id: int, patch_size: int = 512) -> list[PatchRecord]:
    """One patch per annotation, centered on it and clamped to the image.

    Each patch carries every annotation whose center falls inside its
    window, rebased to patch coordinates; by construction every input
    annotation survives into at least its own patch.
    """
    height, width = image.shape[:2]
    if height < patch_size or width < patch_size:
        raise ConfigError(f"image {width}x{height} smaller than patch size {patch_size}")
    centers = [a.box.center for a in annotations]
    out = []
    for ann in annotations:
        cx, cy = ann.box.center
        x0 = int(min(max(round(cx - patch_size / 2), 0), width - patch_size))
        y0 = int(min(max(round(cy - patch_size / 2), 0), height - patch_size))
        kept = []
        for other, (ox, oy) in zip(annotations, centers):
            if x0 <= ox < x0 + patch_size and y0 <= oy < y0 + patch_size:
                b = other.box
                rebased = BBox(max(b.x_min - x0, 0.0), max(b.y_min - y0, 0.0),
                               min(b.x_max - x0, float(patch_size)),
                               min(b.y_max - y0, float(patch_size)))
                kept.append(Annotation(rebased, other.class_id))
        patch = image[y0:y0 + patch_size, x0:x0 + patch_size].copy()
        out.append(PatchRecord(domain_id=domain_id, annotations=tuple(kept),
                               image=patch))
    return out


# ---------------------------------------------------------------------------
# Batch composition

def compose_batch(records_by_domain: Mapping[int, Sequence[PatchRecord]],
                  batch_size: int = 12, seed: int = 0, step: int = 0
                  ) -> list[PatchRecord]:
    """Equal-per-domain batch, deterministic in (seed, step).

    Every domain contributes batch_size / num_domains records; within a
    domain, records are drawn without replacement from a per-epoch
    permutation, so the whole schedule is a pure function of the seed and
    the step counter (which is what makes resume exact).
    """
    domain_ids = sorted(records_by_domain)
    if not domain_ids:
        raise ConfigError("no training domains")
    if batch_size % len(domain_ids):
        raise ConfigError(f"batch_size {batch_size} not divisible by "
                          f"{len(domain_ids)} training domains")
    per = batch_size // len(domain_ids)
    batch = []
    for d in domain_ids:
        records = records_by_domain[d]
        n = len(records)
        if n == 0:
            raise ConfigError(f"domain {d} has no training records")
        pos = step * per
        epoch, offset = divmod(pos, n)
        taken = 0
        while taken < per:
            perm = np.random.default_rng([seed, d, epoch]).permutation(n)
            take = min(per - taken, n - offset)
            batch.extend(records[i] for i in perm[offset:offset + take])
            taken += take
            offset = 0
            epoch += 1
    return batch


# ---------------------------------------------------------------------------
# Splitting

def split_dataset(records: Sequence[PatchRecord], table: DomainTable,
                  fractions: tuple[float, float, float] = (0.8, 0.1, 0.1),
                  seed: int = 0) -> list[PatchRecord]:
    """Assign train/val/test splits; labeled_target domains go entirely to
    test, source domains are split per-domain at the given fractions."""
    if abs(sum(fractions) - 1.0) > 1e-9 or any(f < 0 for f in fractions):
        raise ConfigError(f"fractions must be non-negative and sum to 1, got {fractions}")
    out = [dataclasses.replace(r) for r in records]
    for domain in table.domains:
        idx = [i for i, r in enumerate(out) if r.domain_id == domain.domain_id]
        if domain.role == LABELED_TARGET:
            for i in idx:
                out[i].split = "test"
            continue
        n = len(idx)
        perm = np.random.default_rng([seed, domain.domain_id]).permutation(n)
        n_train = int(round(fractions[0] * n))
        n_val = min(int(round(fractions[1] * n)), n - n_train)
        if n > 0 and n_train == 0:
            warnings.warn(f"domain {domain.domain_id} ({domain.name}) has no "
                          f"train records under fractions {fractions}")
        for k, p in enumerate(perm):
            if k < n_train:
                split = "train"
            elif k < n_train + n_val:
                split = "val"
            else:
                split = "test"
            out[idx[p]].split = split
    return out


def records_for_split(records: Sequence[PatchRecord], split: str) -> list[PatchRecord]:
    if split not in SPLITS:
        raise ConfigError(f"unknown split '{split}'")
    return [r for r in records if r.split == split]


# ---------------------------------------------------------------------------
# Synthetic corpus

# Per-domain (gain, bias, gamma) triples, one RGB triple each. The first
# three lean red/green/blue; the fourth is a washed-out low-contrast
# appearance meant to act as the held-out scanner.
_DEFAULT_TRANSFORMS = (
    ((1.10, 0.80, 0.88), (0.06, -0.02, 0.00), (0.92, 1.18, 1.05)),
    ((0.78, 1.08, 0.84), (-0.02, 0.05, 0.00), (1.18, 0.90, 1.10)),
    ((0.82, 0.86, 1.12), (0.00, 0.00, 0.06), (1.12, 1.06, 0.88)),
    ((0.28, 0.25, 0.28), (0.68, 0.66, 0.68), (0.90, 0.95, 0.90)),
    ((1.04, 1.02, 0.76), (0.03, 0.02, -0.03), (0.94, 0.94, 1.25)),
    ((0.90, 0.90, 0.90), (0.02, 0.02, 0.02), (1.05, 1.05, 1.05)),
)


def default_color_transforms(num_domains: int) -> tuple:
    """Deterministic per-domain color transforms; beyond the built-in set
    the parameters are cycled with a small shift."""
    out = []
    for d in range(num_domains):
        gain, bias, gamma = _DEFAULT_TRANSFORMS[d % len(_DEFAULT_TRANSFORMS)]
        cycle = d // len(_DEFAULT_TRANSFORMS)
        if cycle:
            gain = tuple(g * (1.0 + 0.07 * cycle) for g in gain)
        out.append((tuple(gain), tuple(bias), tuple(gamma)))
    return tuple(out)


@dataclass(frozen=True)
class SynthSpec:
    """Deterministic synthetic corpus: identical spec + seed means
    byte-identical rasters and annotations."""

    num_domains: int = 3
    images_per_domain: int | tuple[int, ...] = 50
    patch_size: int = 64
    cells_min: int = 2
    cells_max: int = 6
    mitotic_fraction: float = 0.5
    radius_range: tuple[float, float] = (3.5, 7.0)
    mitotic_color: tuple[float, float, float] = (0.16, 0.10, 0.26)
    negative_color: tuple[float, float, float] = (0.50, 0.40, 0.58)
    mitotic_eccentricity: tuple[float, float] = (1.6, 2.6)
    negative_eccentricity: tuple[float, float] = (1.05, 1.35)
    color_transforms: tuple | None = None
    roles: tuple[str, ...] | None = None
    seed: int = 0

    def __post_init__(self):
        if self.num_domains < 1:
            raise ConfigError("num_domains must be >= 1")
        if self.patch_size < 16:
            raise ConfigError("patch_size must be >= 16")
        if not (0 <= self.cells_min <= self.cells_max):
            raise ConfigError("need 0 <= cells_min <= cells_max")
        if self.roles is not None and len(self.roles) != self.num_domains:
            raise ConfigError("roles must list one role per domain")
        if isinstance(self.images_per_domain, tuple) \
                and len(self.images_per_domain) != self.num_domains:
            raise ConfigError("images_per_domain tuple must match num_domains")

    def count_for(self, domain_id: int) -> int:
        if isinstance(self.images_per_domain, tuple):
            return self.images_per_domain[domain_id]
        return self.images_per_domain

    def role_for(self, domain_id: int) -> str:
        if self.roles is not None:
            return self.roles[domain_id]
        return LABELED_SOURCE

    def transform_for(self, domain_id: int):
        transforms = self.color_transforms or default_color_transforms(self.num_domains)
        return transforms[domain_id]


def _bilinear_field(rng: np.random.Generator, size: int, grid: int = 5,
                    amp: float = 0.05) -> np.ndarray:
    """Smooth low-frequency scalar field in [-amp, amp]."""
    coarse = rng.uniform(-amp, amp, size=(grid, grid))
    xs = np.linspace(0, grid - 1, size)
    i0 = np.clip(xs.astype(int), 0, grid - 2)
    frac = xs - i0
    rows = coarse[i0, :] * (1 - frac[:, None]) + coarse[i0 + 1, :] * frac[:, None]
    cols = rows[:, i0] * (1 - frac[None, :]) + rows[:, i0 + 1] * frac[None, :]
    return cols


def _render_cell(canvas: np.ndarray, rng: np.random.Generator, spec: SynthSpec
                 ) -> Annotation | None:
    size = spec.patch_size
    mitotic = rng.random() < spec.mitotic_fraction
    radius = rng.uniform(*spec.radius_range)
    margin = radius * 2.2 + 1
    if 2 * margin >= size:
        return None
    cx = rng.uniform(margin, size - margin)
    cy = rng.uniform(margin, size - margin)
    ecc = rng.uniform(*(spec.mitotic_eccentricity if mitotic
                        else spec.negative_eccentricity))
    a, b = radius * np.sqrt(ecc), radius / np.sqrt(ecc)
    theta = rng.uniform(0, np.pi)
    lobes = int(rng.integers(3, 6)) if mitotic else int(rng.integers(2, 4))
    mod_amp = 0.25 if mitotic else 0.06
    phase = rng.uniform(0, 2 * np.pi)
    base_color = np.array(spec.mitotic_color if mitotic else spec.negative_color)
    color = np.clip(base_color + rng.normal(0, 0.03, 3), 0, 1)

    ys, xs = np.mgrid[0:size, 0:size]
    dx, dy = xs - cx, ys - cy
    xr = dx * np.cos(theta) + dy * np.sin(theta)
    yr = -dx * np.sin(theta) + dy * np.cos(theta)
    rho = np.sqrt((xr / a) ** 2 + (yr / b) ** 2)
    ang = np.arctan2(yr / b, xr / a)
    boundary = 1.0 + mod_amp * np.sin(lobes * ang + phase)
    edge = 0.6 / radius
    coverage = np.clip((boundary - rho) / edge, 0.0, 1.0)

    mask = coverage > 0.5
    if not mask.any():
        return None
    canvas += coverage[:, :, None] * (color[None, None, :] - canvas)
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    box = BBox(float(cols[0]), float(rows[0]), float(cols[-1] + 1), float(rows[-1] + 1))
    return Annotation(box, int(mitotic))


def _apply_color_transform(img: np.ndarray, transform) -> np.ndarray:
    gain, bias, gamma = (np.asarray(t, dtype=np.float64) for t in transform)
    out = np.clip(img * gain[None, None, :] + bias[None, None, :], 0.0, 1.0)
    return out ** gamma[None, None, :]


def synth_image(spec: SynthSpec, domain_id: int, index: int
                ) -> tuple[np.ndarray, tuple[Annotation, ...]]:
    """Render one synthetic patch; deterministic in (spec.seed, domain, index)."""
    rng = np.random.default_rng([spec.seed, domain_id, index])
    size = spec.patch_size
    base = np.array([0.86, 0.74, 0.82])
    canvas = np.empty((size, size, 3), dtype=np.float64)
    canvas[:] = base[None, None, :]
    for c in range(3):
        canvas[:, :, c] += _bilinear_field(rng, size)
    canvas += rng.normal(0, 0.008, size=(size, size, 1))
    canvas = np.clip(canvas, 0, 1)

    anns = []
    for _ in range(int(rng.integers(spec.cells_min, spec.cells_max + 1))):
        ann = _render_cell(canvas, rng, spec)
        if ann is not None:
            anns.append(ann)
    out = _apply_color_transform(np.clip(canvas, 0, 1), spec.transform_for(domain_id))
    return out.astype(np.float32), tuple(anns)


def synth_dataset(spec: SynthSpec, out_dir=None
                  ) -> tuple[DomainTable, list[PatchRecord]]:
    """Generate the synthetic corpus; optionally write rasters + manifest.

    With `out_dir` set, PNGs land in out_dir/images and a manifest in
    out_dir/manifest.json; records keep their pixels in memory either way.
    """
    table = DomainTable(tuple(
        Domain(d, f"domain{d}", spec.role_for(d)) for d in range(spec.num_domains)))
    records = []
    img_dir = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        img_dir = out_dir / "images"
        img_dir.mkdir(parents=True, exist_ok=True)
    for d in range(spec.num_domains):
        for i in range(spec.count_for(d)):
            img, anns = synth_image(spec, d, i)
            path = None
            if img_dir is not None:
                path = img_dir / f"d{d}_{i:04d}.png"
                save_image(path, img)
            records.append(PatchRecord(domain_id=d, annotations=anns, image=img,
                                       image_path=None if path is None else str(path)))
    if out_dir is not None:
        save_manifest(Path(out_dir) / "manifest.json", table, records)
    return table, records
