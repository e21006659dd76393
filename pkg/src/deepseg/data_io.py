"""Slice files, dataset manifests, preprocessing and a synthetic phantom generator.

Slices are stored in a small raw format (``.dseg``):

====== ===== ===========================================
offset bytes field
====== ===== ===========================================
0      4     magic ``b"DSEG"``
4      2     version, uint16 LE (= 1)
6      1     dtype code: 0 = float32, 1 = uint8
7      4     height, uint32 LE
11     4     width, uint32 LE
15     ...   row-major payload, little-endian
====== ===== ===========================================

A manifest is a UTF-8 JSON file ``{"version", "cases": [{"case_id",
"images": [...], "masks": [...]}], "extent", "provenance"}`` whose paths are
relative to the manifest's directory.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

DSEG_MAGIC = b"DSEG"
DSEG_VERSION = 1
_HEADER = struct.Struct("<4sHBII")
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("u1")}
_CODES = {np.dtype("float32"): 0, np.dtype("uint8"): 1}
# refuse headers claiming more than 64k pixels on a side
MAX_EXTENT = 1 << 16
MANIFEST_VERSION = 1
TUMOR_LABELS = (1, 2, 4)


class DataError(ValueError):
    pass


class BadMagicError(DataError):
    pass


class TruncatedError(DataError):
    pass


class ExtentError(DataError):
    pass


class ManifestError(DataError):
    pass


# ---------------------------------------------------------------------------
# DSEG files
# ---------------------------------------------------------------------------


def encode_slice(array) -> bytes:
    arr = np.asarray(array)
    if arr.ndim != 2:
        raise DataError(f"slices are 2-D, got shape {arr.shape}")
    if arr.dtype not in _CODES:
        raise DataError(f"unsupported slice dtype {arr.dtype}; use float32 or uint8")
    code = _CODES[arr.dtype]
    h, w = arr.shape
    if not (0 < h <= MAX_EXTENT and 0 < w <= MAX_EXTENT):
        raise ExtentError(f"extent {h}x{w} outside 1..{MAX_EXTENT}")
    payload = np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes()
    return _HEADER.pack(DSEG_MAGIC, DSEG_VERSION, code, h, w) + payload


def decode_slice(blob: bytes, source: str = "<bytes>") -> np.ndarray:
    if len(blob) < 4 or blob[:4] != DSEG_MAGIC:
        raise BadMagicError(f"{source}: bad magic {blob[:4]!r}, expected {DSEG_MAGIC!r}")
    if len(blob) < _HEADER.size:
        raise TruncatedError(f"{source}: truncated header ({len(blob)} of {_HEADER.size} bytes)")
    _, version, code, h, w = _HEADER.unpack_from(blob)
    if version != DSEG_VERSION:
        raise DataError(f"{source}: unsupported DSEG version {version}")
    if code not in _DTYPES:
        raise DataError(f"{source}: unknown dtype code {code}")
    if not (0 < h <= MAX_EXTENT and 0 < w <= MAX_EXTENT):
        raise ExtentError(f"{source}: header extent {h}x{w} outside 1..{MAX_EXTENT}")
    dtype = _DTYPES[code]
    need = h * w * dtype.itemsize
    have = len(blob) - _HEADER.size
    if have < need:
        raise TruncatedError(f"{source}: truncated payload ({have} of {need} bytes)")
    if have > need:
        raise DataError(f"{source}: {have - need} trailing bytes after payload")
    arr = np.frombuffer(blob, dtype=dtype, count=h * w, offset=_HEADER.size).reshape(h, w)
    return arr.astype(dtype.newbyteorder("="), copy=True)


def save_slice(path, array) -> None:
    Path(path).write_bytes(encode_slice(array))


def load_slice(path) -> np.ndarray:
    return decode_slice(Path(path).read_bytes(), str(path))


# ---------------------------------------------------------------------------
# Preprocessing
# ---------------------------------------------------------------------------


def normalize_slice(raw) -> np.ndarray:
    """Zero mean, unit (population) standard deviation; constant slices map to zeros."""
    x = np.asarray(raw, dtype=np.float64)
    # test constancy directly: the computed std of a constant slice can be a
    # rounding residue rather than exactly zero
    std = x.std()
    if x.size == 0 or x.max() == x.min() or not std > 0:
        return np.zeros(x.shape, dtype=np.float32)
    return ((x - x.mean()) / std).astype(np.float32)


def is_empty_slice(raw) -> bool:
    return float(np.max(raw)) == 0.0


def binarize_labels(mask) -> np.ndarray:
    """Merge tumour labels {1, 2, 4} into 1; anything else but 0 is an error."""
    m = np.asarray(mask)
    bad = ~np.isin(m, (0,) + TUMOR_LABELS)
    if bad.any():
        raise DataError(f"unknown label value {m[bad].flat[0]!r}; expected one of 0, 1, 2, 4")
    return (m != 0).astype(np.uint8)


def _align_corners(n_in: int, n_out: int) -> np.ndarray:
    if n_out == 1 or n_in == 1:
        return np.zeros(n_out)
    return np.arange(n_out) * ((n_in - 1) / (n_out - 1))


def resize_bilinear(image, mask, extent: int = 224) -> tuple[np.ndarray, np.ndarray]:
    """Rescale both to ``extent x extent``: image bilinear, mask nearest neighbour.

    Corner pixels map onto corner pixels, so corner values are preserved.
    """
    image = np.asarray(image)
    mask = np.asarray(mask)
    if image.shape != mask.shape or image.ndim != 2 or min(image.shape) < 1:
        raise DataError(f"cannot resize image {image.shape} with mask {mask.shape}")
    if extent < 1:
        raise DataError(f"target extent must be positive, got {extent}")
    h, w = image.shape
    if (h, w) == (extent, extent):
        return image.copy(), mask.copy()
    ys = _align_corners(h, extent)
    xs = _align_corners(w, extent)
    y0 = np.minimum(np.floor(ys).astype(int), h - 1)
    x0 = np.minimum(np.floor(xs).astype(int), w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]
    img = image.astype(np.float64)
    top = img[np.ix_(y0, x0)] * (1 - fx) + img[np.ix_(y0, x1)] * fx
    bot = img[np.ix_(y1, x0)] * (1 - fx) + img[np.ix_(y1, x1)] * fx
    out = top * (1 - fy) + bot * fy
    yn = np.minimum(np.floor(ys + 0.5).astype(int), h - 1)
    xn = np.minimum(np.floor(xs + 0.5).astype(int), w - 1)
    return out.astype(image.dtype if image.dtype.kind == "f" else np.float32), mask[np.ix_(yn, xn)]


@dataclass(frozen=True)
class SliceRecord:
    case_id: str
    slice_index: int
    image: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        if self.image.ndim != 2 or self.image.shape != self.mask.shape:
            raise DataError(
                f"{self.case_id}[{self.slice_index}]: image {self.image.shape} and mask {self.mask.shape} differ"
            )
        if not np.isin(self.mask, (0, 1)).all():
            raise DataError(f"{self.case_id}[{self.slice_index}]: mask is not binary")


def preprocess_slice(raw_image, raw_mask, extent: int = 224):
    """read -> binarize -> empty filter -> normalize -> resize; None for empty slices."""
    mask = binarize_labels(raw_mask)
    if is_empty_slice(raw_image):
        return None
    image = normalize_slice(raw_image)
    if image.shape != (extent, extent):
        image, mask = resize_bilinear(image, mask, extent)
    return image.astype(np.float32), mask.astype(np.uint8)


# ---------------------------------------------------------------------------
# Manifests
# ---------------------------------------------------------------------------


@dataclass
class CaseEntry:
    case_id: str
    images: list[str]
    masks: list[str]


@dataclass
class DatasetManifest:
    cases: list[CaseEntry]
    extent: int | None = None
    provenance: str = ""
    version: int = MANIFEST_VERSION
    root: Path = field(default_factory=Path)

    @property
    def case_ids(self) -> list[str]:
        return [c.case_id for c in self.cases]

    def to_dict(self) -> dict:
        return {
            "version": self.version,
            "cases": [{"case_id": c.case_id, "images": c.images, "masks": c.masks} for c in self.cases],
            "extent": self.extent,
            "provenance": self.provenance,
        }

    def write(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n", encoding="utf-8")

    def validate(self) -> None:
        seen = set()
        for c in self.cases:
            if c.case_id in seen:
                raise ManifestError(f"duplicate case_id {c.case_id!r}")
            seen.add(c.case_id)
            if len(c.images) != len(c.masks):
                raise ManifestError(f"case {c.case_id}: {len(c.images)} images but {len(c.masks)} masks")
            for rel in c.images + c.masks:
                if not (self.root / rel).is_file():
                    raise ManifestError(f"case {c.case_id}: missing file {rel}")


def read_manifest(path) -> DatasetManifest:
    path = Path(path)
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ManifestError(f"{path}: not valid JSON ({exc})") from exc
    if not isinstance(raw, dict) or not isinstance(raw.get("cases"), list):
        raise ManifestError(f"{path}: manifest needs a 'cases' list")
    if raw.get("version") != MANIFEST_VERSION:
        raise ManifestError(f"{path}: unsupported manifest version {raw.get('version')!r}")
    try:
        cases = [CaseEntry(str(c["case_id"]), list(c["images"]), list(c["masks"])) for c in raw["cases"]]
    except (KeyError, TypeError) as exc:
        raise ManifestError(f"{path}: malformed case entry ({exc})") from exc
    m = DatasetManifest(cases, raw.get("extent"), raw.get("provenance", ""), raw["version"], path.parent)
    m.validate()
    return m


def load_case(manifest: DatasetManifest, case: CaseEntry, extent: int = 224) -> list[SliceRecord]:
    out = []
    for idx, (img_rel, mask_rel) in enumerate(zip(case.images, case.masks)):
        image = load_slice(manifest.root / img_rel)
        mask = load_slice(manifest.root / mask_rel)
        if image.shape != mask.shape:
            raise DataError(f"case {case.case_id} slice {idx}: image {image.shape} vs mask {mask.shape}")
        done = preprocess_slice(image, mask, extent)
        if done is not None:
            out.append(SliceRecord(case.case_id, idx, *done))
    return out


def load_dataset(manifest_path, extent: int = 224, case_ids=None) -> list[SliceRecord]:
    """All non-empty slices of the manifest (optionally only ``case_ids``), preprocessed."""
    manifest = read_manifest(manifest_path)
    wanted = None if case_ids is None else set(case_ids)
    records = []
    for case in manifest.cases:
        if wanted is None or case.case_id in wanted:
            records.extend(load_case(manifest, case, extent))
    return records


# ---------------------------------------------------------------------------
# Synthetic phantoms
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PhantomSpec:
    """Brain-like ellipses with bright Gaussian "tumour" blobs.

    Sizes are fractions of the extent. Blobs are confined to the ellipse by
    rejection sampling on their pixel support.
    """

    extent: int = 224
    brain_axes: tuple[float, float] = (0.30, 0.45)  # semi-axis range
    brain_intensity: tuple[float, float] = (0.4, 0.6)
    max_blobs: int = 3
    blob_radius: tuple[float, float] = (0.03, 0.07)
    blob_intensity: tuple[float, float] = (0.5, 0.9)
    noise: float = 0.03
    seed: int = 0

    def __post_init__(self):
        if self.extent < 8:
            raise DataError("phantom extent must be at least 8")
        if self.max_blobs < 1:
            raise DataError("max_blobs must be >= 1")
        if not 0 < self.blob_radius[0] <= self.blob_radius[1] < self.brain_axes[0]:
            raise DataError("blob radii must be positive and smaller than the brain")

    def to_dict(self) -> dict:
        return {k: (list(v) if isinstance(v, tuple) else v) for k, v in self.__dict__.items()}

    @classmethod
    def from_dict(cls, d: dict) -> "PhantomSpec":
        return cls(**{k: (tuple(v) if isinstance(v, list) else v) for k, v in d.items()})


def phantom_slice(spec: PhantomSpec, gen: np.random.Generator):
    """One (image float32, label mask uint8 with values in {0,1,2,4}, blob count)."""
    n = spec.extent
    yy, xx = np.mgrid[0:n, 0:n].astype(np.float64)
    c = (n - 1) / 2
    ay, ax = gen.uniform(*spec.brain_axes, size=2) * n
    cy, cx = c + gen.uniform(-0.05, 0.05, size=2) * n
    brain = ((yy - cy) / ay) ** 2 + ((xx - cx) / ax) ** 2 <= 1.0
    level = gen.uniform(*spec.brain_intensity)
    image = np.where(brain, level + spec.noise * gen.standard_normal((n, n)), 0.0)
    image = np.where(brain, np.maximum(image, 1e-3), 0.0)
    labels = np.zeros((n, n), np.uint8)
    count = int(gen.integers(1, spec.max_blobs + 1))
    placed = 0
    while placed < count:
        r = gen.uniform(*spec.blob_radius) * n
        by = gen.uniform(cy - ay, cy + ay)
        bx = gen.uniform(cx - ax, cx + ax)
        d2 = (yy - by) ** 2 + (xx - bx) ** 2
        support = d2 <= r * r
        if not support.any() or not brain[support].all():
            continue
        amp = gen.uniform(*spec.blob_intensity)
        image += np.where(brain, amp * np.exp(-d2 / (r * r)), 0.0)
        # outer ring as oedema (2), core as label 1 or 4
        ring = support & (labels == 0)
        labels[ring] = 2
        core = d2 <= (0.5 * r) ** 2
        labels[core] = int(gen.choice([1, 4]))
        placed += 1
    return image.astype(np.float32), labels, count


def generate_phantom_dataset(spec: PhantomSpec, case_count: int, slices_per_case: int, out_dir) -> DatasetManifest:
    """Write ``case_count`` cases of ``slices_per_case`` slices and a ``manifest.json``."""
    if case_count < 1 or slices_per_case < 1:
        raise DataError("case_count and slices_per_case must be >= 1")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    cases = []
    seeds = np.random.SeedSequence(spec.seed).spawn(case_count)
    for ci, ss in enumerate(seeds):
        gen = np.random.Generator(np.random.Philox(ss))
        case_id = f"phantom_{ci:04d}"
        (out_dir / case_id).mkdir(exist_ok=True)
        images, masks = [], []
        for si in range(slices_per_case):
            img, lab, _ = phantom_slice(spec, gen)
            img_rel = f"{case_id}/slice_{si:03d}_image.dseg"
            mask_rel = f"{case_id}/slice_{si:03d}_mask.dseg"
            save_slice(out_dir / img_rel, img)
            save_slice(out_dir / mask_rel, lab)
            images.append(img_rel)
            masks.append(mask_rel)
        cases.append(CaseEntry(case_id, images, masks))
    manifest = DatasetManifest(
        cases, spec.extent, f"synthetic phantoms, seed {spec.seed}, spec {json.dumps(spec.to_dict())}", root=out_dir
    )
    manifest.write(out_dir / "manifest.json")
    return manifest
