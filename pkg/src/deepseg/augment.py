"""On-the-fly geometric augmentation applied jointly to a slice and its mask.

Images are resampled bilinearly and masks with nearest neighbour, so mask
outputs never contain labels that were not in the input (plus the 0 fill
used for out-of-bounds samples). Every random draw comes from a stream
derived from a per-sample seed, which makes the pipeline a pure function of
``(image, mask, spec, sample_seed)``.

Coordinates follow the array layout: ``x`` is the column index and ``y`` the
row index (pointing down). A 2x3 matrix ``[[a, b, tx], [c, d, ty]]`` maps an
input pixel position to its output position.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import correlate1d

from deepseg.tensor_core import RngStream

# keys for the per-component child streams of a sample seed
_FLIP_KEY, _AFFINE_KEY, _ELASTIC_KEY = 1, 2, 3
_SNAP = 1e-6


class AugmentError(ValueError):
    pass


@dataclass(frozen=True)
class ElasticParams:
    alpha: float = 720.0
    sigma: float = 24.0

    def __post_init__(self):
        if self.alpha < 0:
            raise AugmentError(f"elastic alpha must be >= 0, got {self.alpha}")
        if self.sigma <= 0:
            raise AugmentError(f"elastic sigma must be > 0, got {self.sigma}")


@dataclass(frozen=True)
class AugmentSpec:
    """Ranges are half-widths of symmetric intervals around the identity.

    ``scale_range`` 0.2 means factors in [0.8, 1.2] (drawn per axis);
    ``translate_range`` is a fraction of the extent; angles are in degrees.
    """

    flip_h_prob: float = 0.2
    flip_v_prob: float = 0.2
    scale_range: float = 0.2
    translate_range: float = 0.2
    rotate_range: float = 25.0
    shear_range: float = 8.0
    elastic: ElasticParams = field(default_factory=ElasticParams)
    affine_prob: float = 0.5
    elastic_prob: float = 0.5
    enabled: bool = True

    def __post_init__(self):
        for name in ("flip_h_prob", "flip_v_prob", "affine_prob", "elastic_prob"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise AugmentError(f"{name} must lie in [0, 1], got {p}")
        for name in ("scale_range", "translate_range", "rotate_range", "shear_range"):
            if getattr(self, name) < 0:
                raise AugmentError(f"{name} is a half-width and must be >= 0")
        if self.scale_range >= 1:
            raise AugmentError("scale_range must be < 1 so scale factors stay positive")
        if abs(self.shear_range) >= 90:
            raise AugmentError("shear_range must be below 90 degrees")

    @classmethod
    def identity(cls) -> "AugmentSpec":
        return cls(flip_h_prob=0.0, flip_v_prob=0.0, affine_prob=0.0, elastic_prob=0.0)

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in self.__dataclass_fields__ if k != "elastic"}
        d["elastic"] = {"alpha": self.elastic.alpha, "sigma": self.elastic.sigma}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "AugmentSpec":
        d = dict(d)
        if "elastic" in d:
            d["elastic"] = ElasticParams(**d["elastic"])
        return cls(**d)


# ---------------------------------------------------------------------------
# Resampling
# ---------------------------------------------------------------------------


def _snap(c: np.ndarray) -> np.ndarray:
    r = np.round(c)
    return np.where(np.abs(c - r) <= _SNAP, r, c)


def sample_bilinear(image: np.ndarray, ys: np.ndarray, xs: np.ndarray) -> np.ndarray:
    """Bilinear samples at float positions; neighbours outside the image count as 0."""
    h, w = image.shape
    ys, xs = _snap(ys), _snap(xs)
    y0 = np.floor(ys).astype(np.int64)
    x0 = np.floor(xs).astype(np.int64)
    fy = (ys - y0).astype(image.dtype)
    fx = (xs - x0).astype(image.dtype)
    padded = np.pad(image, 1)

    def tap(yy, xx):
        inside = (yy >= -1) & (yy <= h) & (xx >= -1) & (xx <= w)
        v = padded[np.clip(yy + 1, 0, h + 1), np.clip(xx + 1, 0, w + 1)]
        return np.where(inside, v, 0)

    top = tap(y0, x0) * (1 - fx) + tap(y0, x0 + 1) * fx
    bottom = tap(y0 + 1, x0) * (1 - fx) + tap(y0 + 1, x0 + 1) * fx
    out = top * (1 - fy) + bottom * fy
    # skip the second row/column entirely when the weight is exactly zero so
    # that integral positions reproduce the input bit for bit
    out = np.where(fy == 0, top, out)
    return out.astype(image.dtype, copy=False)


def sample_nearest(mask: np.ndarray, ys: np.ndarray, xs: np.ndarray) -> np.ndarray:
    """Nearest-neighbour samples (ties round up); outside positions give 0."""
    h, w = mask.shape
    yi = np.floor(_snap(ys) + 0.5).astype(np.int64)
    xi = np.floor(_snap(xs) + 0.5).astype(np.int64)
    inside = (yi >= 0) & (yi < h) & (xi >= 0) & (xi < w)
    v = mask[np.clip(yi, 0, h - 1), np.clip(xi, 0, w - 1)]
    return np.where(inside, v, 0).astype(mask.dtype, copy=False)


def _check_pair(image, mask):
    image = np.asarray(image)
    mask = np.asarray(mask)
    if image.ndim != 2 or image.shape != mask.shape:
        raise AugmentError(f"image {image.shape} and mask {mask.shape} must be equal 2-D extents")
    if not np.issubdtype(image.dtype, np.floating):
        image = image.astype(np.float32)
    return image, mask


def affine_transform(image, mask, matrix) -> tuple[np.ndarray, np.ndarray]:
    """Warp ``image`` (bilinear) and ``mask`` (nearest) by a forward 2x3 affine map."""
    image, mask = _check_pair(image, mask)
    m = np.asarray(matrix, dtype=np.float64)
    if m.shape != (2, 3):
        raise AugmentError(f"affine matrix must be 2x3, got {m.shape}")
    (a, b, tx), (c, d, ty) = m
    det = a * d - b * c
    if not np.isfinite(m).all() or abs(det) < 1e-12:
        raise AugmentError(f"affine matrix is singular (det={det:g})")
    h, w = image.shape
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    # inverse map: output position -> source position
    u, v = xx - tx, yy - ty
    xs = (d * u - b * v) / det
    ys = (-c * u + a * v) / det
    return sample_bilinear(image, ys, xs), sample_nearest(mask, ys, xs)


def _about_center(linear: np.ndarray, h: int, w: int, shift=(0.0, 0.0)) -> np.ndarray:
    cx, cy = (w - 1) / 2.0, (h - 1) / 2.0
    center = np.array([cx, cy])
    t = center - linear @ center + np.asarray(shift, dtype=np.float64)
    return np.hstack([linear, t[:, None]])


def flip_matrix(h: int, w: int, horizontal: bool = True) -> np.ndarray:
    lin = np.diag([-1.0, 1.0]) if horizontal else np.diag([1.0, -1.0])
    return _about_center(lin, h, w)


def rotation_matrix(degrees: float, h: int, w: int) -> np.ndarray:
    """Rotation about the image centre; positive angles turn clockwise on screen."""
    t = math.radians(degrees)
    lin = np.array([[math.cos(t), -math.sin(t)], [math.sin(t), math.cos(t)]])
    return _about_center(lin, h, w)


@dataclass(frozen=True)
class AffineParams:
    scale_x: float = 1.0
    scale_y: float = 1.0
    shear_deg: float = 0.0
    rotate_deg: float = 0.0
    shift_x: float = 0.0  # pixels
    shift_y: float = 0.0

    def matrix(self, h: int, w: int) -> np.ndarray:
        scale = np.diag([self.scale_x, self.scale_y])
        shear = np.array([[1.0, math.tan(math.radians(self.shear_deg))], [0.0, 1.0]])
        t = math.radians(self.rotate_deg)
        rot = np.array([[math.cos(t), -math.sin(t)], [math.sin(t), math.cos(t)]])
        # scale first, then shear, rotate, and finally translate
        lin = rot @ shear @ scale
        return _about_center(lin, h, w, (self.shift_x, self.shift_y))


def sample_affine_params(spec: AugmentSpec, gen: np.random.Generator, h: int, w: int) -> AffineParams:
    """Draw each transform uniformly within its range (always six draws)."""
    u = gen.uniform(-1.0, 1.0, size=6)
    return AffineParams(
        scale_x=1.0 + spec.scale_range * u[0],
        scale_y=1.0 + spec.scale_range * u[1],
        shear_deg=spec.shear_range * u[2],
        rotate_deg=spec.rotate_range * u[3],
        shift_x=spec.translate_range * w * u[4],
        shift_y=spec.translate_range * h * u[5],
    )


def compose_random_affine(spec: AugmentSpec, rng, shape=(224, 224)) -> np.ndarray:
    """A random 2x3 matrix for an image of ``shape``; ``rng`` is a Generator or RngStream."""
    gen = rng.generator() if isinstance(rng, RngStream) else rng
    return sample_affine_params(spec, gen, *shape).matrix(*shape)


# ---------------------------------------------------------------------------
# Elastic deformation
# ---------------------------------------------------------------------------


def gaussian_kernel(sigma: float) -> np.ndarray:
    """Normalised 1-D Gaussian truncated at 3 sigma."""
    if sigma <= 0:
        raise AugmentError(f"sigma must be > 0, got {sigma}")
    radius = max(1, int(math.ceil(3.0 * sigma)))
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def displacement_fields(shape, params: ElasticParams, gen: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Two smoothed uniform(-1, 1) fields scaled by alpha: (dx, dy)."""
    kernel = gaussian_kernel(params.sigma)
    raw = gen.uniform(-1.0, 1.0, size=(2, *shape))
    out = []
    for f in raw:
        f = correlate1d(f, kernel, axis=0, mode="reflect")
        f = correlate1d(f, kernel, axis=1, mode="reflect")
        out.append(f * params.alpha)
    return out[0], out[1]


def elastic_transform(image, mask, params: ElasticParams, rng) -> tuple[np.ndarray, np.ndarray]:
    image, mask = _check_pair(image, mask)
    gen = rng.generator() if isinstance(rng, RngStream) else rng
    dx, dy = displacement_fields(image.shape, params, gen)
    if params.alpha == 0:
        return image.copy(), mask.copy()
    h, w = image.shape
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    ys, xs = yy + dy, xx + dx
    return sample_bilinear(image, ys, xs), sample_nearest(mask, ys, xs)


# ---------------------------------------------------------------------------
# Pipeline
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AugmentPlan:
    flip_h: bool
    flip_v: bool
    affine: AffineParams | None
    elastic: bool


def draw_augment_plan(spec: AugmentSpec, sample_seed: int, shape) -> AugmentPlan:
    """Decide which transforms fire for one sample.

    Each component reads its own child stream, so changing one probability
    never shifts the draws of another.
    """
    root = RngStream(int(sample_seed))
    flips = root.child(_FLIP_KEY).generator().random(2)
    agen = root.child(_AFFINE_KEY).generator()
    apply_affine = agen.random() < spec.affine_prob
    affine = sample_affine_params(spec, agen, *shape)
    apply_elastic = root.child(_ELASTIC_KEY).generator().random() < spec.elastic_prob
    return AugmentPlan(
        flip_h=bool(flips[0] < spec.flip_h_prob),
        flip_v=bool(flips[1] < spec.flip_v_prob),
        affine=affine if apply_affine else None,
        elastic=bool(apply_elastic),
    )


def augment_sample(image, mask, spec: AugmentSpec, sample_seed: int) -> tuple[np.ndarray, np.ndarray]:
    image, mask = _check_pair(image, mask)
    if not spec.enabled:
        return image.copy(), mask.copy()
    plan = draw_augment_plan(spec, sample_seed, image.shape)
    if plan.flip_h:
        image, mask = image[:, ::-1], mask[:, ::-1]
    if plan.flip_v:
        image, mask = image[::-1, :], mask[::-1, :]
    if plan.affine is not None:
        image, mask = affine_transform(image, mask, plan.affine.matrix(*image.shape))
    if plan.elastic:
        fields_rng = RngStream(int(sample_seed)).child(_ELASTIC_KEY, 1)
        image, mask = elastic_transform(image, mask, spec.elastic, fields_rng)
    return np.ascontiguousarray(image), np.ascontiguousarray(mask)
