"""Procedural garment / person / try-on triples with analytic warp ground truth.

Every sample is a pure function of ``(dataset seed, sample index)``.  The
garment-to-body deformation is a thin-plate spline whose control points are
known, so the warp, its inverse and every mask can be checked exactly.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import io, kernels
from ._glyphs import GLYPH_H, GLYPH_W, GLYPHS
from .errors import (DegenerateSampleError, GeometryError, NumericalError,
                     ParameterRangeError, ShapeError, ValidationError)
from .flowwarp.fields import (apply_flow, compose_flows, identity_grid, jacobian_min_det,
                              tps_flow, tps_inverse_flow)

log = logging.getLogger(__name__)

DATASET_VERSION = "1"
AGNOSTIC_FILL = 0.5
AA_TOL = 2.0 / 255.0
MAX_WARP_RETRIES = 50
ROUND_TRIP_TOL = 0.5  # px, inverse-after-forward on the try-on region interior

PATTERN_KINDS = ("solid", "stripes", "checker", "glyph-text", "logo-patch")

# Reference geometry is laid out for a 64x48 canvas and scaled to others.
_REF_H, _REF_W = 64.0, 48.0
_HIP_Y = 44.0
_SW0, _TH0 = 28.0, 26.0  # canonical shoulder width / torso height
_GARMENT_TEMPLATE = np.array([
    [-12.9, 19.0], [-3.5, 19.0], [0.0, 22.0], [3.5, 19.0],
    [12.9, 19.0], [10.3, 43.0], [-10.3, 43.0],
])  # x relative to the vertical axis, y absolute


def _check_canvas(canvas):
    H, W = canvas
    if H * 3 != W * 4:
        raise ValidationError(f"canvas must be 4:3 (H:W), got {H}x{W}")
    return int(H), int(W)


def _scale(canvas):
    H, W = canvas
    return W / _REF_W, H / _REF_H


def _axis_x(W):
    return (W - 1) / 2.0


def garment_template(canvas):
    """Flat-garment polygon (x, y) in pixel coordinates."""
    H, W = _check_canvas(canvas)
    su, sv = _scale((H, W))
    poly = _GARMENT_TEMPLATE.copy()
    poly[:, 0] = _axis_x(W) + poly[:, 0] * su
    poly[:, 1] = poly[:, 1] * sv
    return poly


# --------------------------------------------------------------------------
# garments


@dataclass
class GarmentSpec:
    pattern_kind: str = "solid"
    base_color: tuple = (0.8, 0.2, 0.2)
    pattern_params: dict = field(default_factory=dict)
    canvas: tuple = (64, 48)

    def validate(self):
        _check_canvas(self.canvas)
        if self.pattern_kind not in PATTERN_KINDS:
            raise ParameterRangeError(f"unknown pattern_kind {self.pattern_kind!r}")
        c = np.asarray(self.base_color, dtype=float)
        if c.shape != (3,) or np.any(c < 0) or np.any(c > 1):
            raise ParameterRangeError(f"base_color must be an RGB triple in [0, 1], got {self.base_color}")
        H, W = self.canvas
        p = self.pattern_params
        ranges = _PARAM_RANGES[self.pattern_kind]
        unknown = set(p) - set(ranges)
        if unknown:
            raise ParameterRangeError(f"unknown pattern_params for {self.pattern_kind}: {sorted(unknown)}")
        for key, (lo, hi) in ranges.items():
            if key not in p:
                continue
            hi = W if hi == "W" else hi
            if not lo <= p[key] <= hi:
                raise ParameterRangeError(f"{self.pattern_kind}.{key}={p[key]} outside [{lo}, {hi}]")
        return self


_PARAM_RANGES = {
    "solid": {},
    "stripes": {"stripe_width": (1, "W"), "vertical": (0, 1)},
    "checker": {"cell": (1, "W")},
    "glyph-text": {"glyph_count": (1, 3)},
    "logo-patch": {"patch_x": (0.0, 1.0), "patch_y": (0.0, 1.0), "patch_size": (2, 12)},
}


def _accent_color(base, rng):
    accent = rng.uniform(0.05, 0.95, size=3)
    # keep the accent visibly different from the base colour
    if np.abs(accent - base).max() < 0.35:
        accent = 1.0 - base
    return accent


def gen_garment(spec: GarmentSpec, seed: int):
    """Render a flat garment.  Returns ``(image (H, W, 3), m_cp (H, W))``.

    The background outside the garment is 0; ``m_cp`` is 1 exactly on the
    rasterized garment template.
    """
    spec.validate()
    H, W = spec.canvas
    rng = np.random.default_rng(seed)
    base = np.asarray(spec.base_color, dtype=np.float64)
    accent = _accent_color(base, rng)
    poly = garment_template((H, W))
    m_cp = kernels.raster_polygon(poly, (H, W)).astype(np.float32)

    x0, y0 = poly[:, 0].min(), poly[:, 1].min()
    x1, y1 = poly[:, 0].max(), poly[:, 1].max()
    jj, ii = np.meshgrid(np.arange(W, dtype=np.float64), np.arange(H, dtype=np.float64))
    accent_mask = np.zeros((H, W), dtype=bool)
    p = spec.pattern_params
    kind = spec.pattern_kind
    if kind == "stripes":
        width = p.get("stripe_width", 3)
        coord = (jj - np.ceil(x0)) if p.get("vertical", 0) else (ii - np.ceil(y0))
        accent_mask = (np.floor(coord / width) % 2) == 1
    elif kind == "checker":
        cell = p.get("cell", 4)
        cx = np.floor((jj - np.ceil(x0)) / cell)
        cy = np.floor((ii - np.ceil(y0)) / cell)
        accent_mask = ((cx + cy) % 2) == 1
    elif kind == "glyph-text":
        n = int(p.get("glyph_count", 2))
        letters = rng.choice(sorted(GLYPHS), size=n)
        text_w = n * GLYPH_W + (n - 1)
        left = int(round((x0 + x1) / 2.0 - text_w / 2.0))
        top = int(round(y0 + 0.35 * (y1 - y0)))
        for k, ch in enumerate(letters):
            for r, row in enumerate(GLYPHS[ch]):
                for c, px in enumerate(row):
                    if px == "#":
                        yy, xx = top + r, left + k * (GLYPH_W + 1) + c
                        if 0 <= yy < H and 0 <= xx < W:
                            accent_mask[yy, xx] = True
    elif kind == "logo-patch":
        size = int(p.get("patch_size", 5))
        px_ = x0 + p.get("patch_x", 0.5) * (x1 - x0 - size)
        py_ = y0 + p.get("patch_y", 0.3) * (y1 - y0 - size)
        accent_mask = (jj >= round(px_)) & (jj < round(px_) + size) & \
                      (ii >= round(py_)) & (ii < round(py_) + size)

    img = np.where(accent_mask[..., None], accent, base) * m_cp[..., None]
    return _quantize(img).astype(np.float32), m_cp


def random_garment_spec(rng, canvas=(64, 48)):
    H, W = canvas
    kind = PATTERN_KINDS[int(rng.integers(len(PATTERN_KINDS)))]
    base = tuple(float(v) for v in np.round(rng.uniform(0.05, 0.95, size=3), 4))
    if kind == "stripes":
        params = {"stripe_width": int(rng.integers(2, 6)), "vertical": int(rng.integers(2))}
    elif kind == "checker":
        params = {"cell": int(rng.integers(3, 8))}
    elif kind == "glyph-text":
        params = {"glyph_count": int(rng.integers(1, 4))}
    elif kind == "logo-patch":
        params = {"patch_x": float(np.round(rng.uniform(0.1, 0.9), 3)),
                  "patch_y": float(np.round(rng.uniform(0.1, 0.8), 3)),
                  "patch_size": int(rng.integers(4, 10))}
    else:
        params = {}
    return GarmentSpec(kind, base, params, (H, W))


# --------------------------------------------------------------------------
# people


@dataclass
class PersonSpec:
    shoulder_width: float = 28.0  # px at the reference 48-px width
    torso_height: float = 26.0  # px at the reference 64-px height
    lean: float = 0.0  # degrees, positive rotates the upper body clockwise on screen
    skin_tone: tuple = (0.85, 0.65, 0.5)
    seed: int = 0
    canvas: tuple = (64, 48)

    def validate(self):
        _check_canvas(self.canvas)
        if not -15.0 <= self.lean <= 15.0:
            raise GeometryError(f"lean {self.lean} outside [-15, 15] degrees")
        if self.shoulder_width <= 0 or self.torso_height <= 0:
            raise GeometryError("shoulder_width and torso_height must be positive")
        c = np.asarray(self.skin_tone, dtype=float)
        if c.shape != (3,) or np.any(c < 0) or np.any(c > 1):
            raise ParameterRangeError(f"skin_tone must be RGB in [0, 1], got {self.skin_tone}")
        return self


@dataclass
class PersonContext:
    """Rendered person plus the geometry needed to dress it."""

    spec: PersonSpec
    image: np.ndarray  # P, bare body on background
    body: np.ndarray  # body mask
    region: np.ndarray  # try-on region m
    pose_map: np.ndarray  # (H, W, K) soft keypoints
    hip: np.ndarray  # rotation centre (x, y)
    affine: np.ndarray  # 2x2 linear part mapping canonical torso -> body

    def to_body(self, pts):
        return self.hip + (np.asarray(pts) - self.hip) @ self.affine.T

    def to_canonical(self, pts):
        return self.hip + (np.asarray(pts) - self.hip) @ np.linalg.inv(self.affine).T


def _rot(deg):
    t = math.radians(deg)
    return np.array([[math.cos(t), -math.sin(t)], [math.sin(t), math.cos(t)]])


def _ellipse(cx, cy, rx, ry, n=32):
    t = np.linspace(0.0, 2 * np.pi, n, endpoint=False)
    return np.stack([cx + rx * np.cos(t), cy + ry * np.sin(t)], axis=1)


def _quad_along(p0, p1, half_width):
    d = np.asarray(p1, float) - np.asarray(p0, float)
    n = np.array([-d[1], d[0]]) / (np.linalg.norm(d) + 1e-12) * half_width
    return np.array([p0 + n, p1 + n, p1 - n, p0 - n])


def _person_geometry(spec: PersonSpec):
    H, W = spec.canvas
    su, sv = _scale((H, W))
    sw = spec.shoulder_width * su
    th = spec.torso_height * sv
    hip = np.array([_axis_x(W), _HIP_Y * sv])
    R = _rot(spec.lean)

    def upper(local):  # local coords relative to the hip, rotated with the lean
        return hip + np.asarray(local, float) @ R.T

    parts = {}
    parts["torso"] = upper([[-sw / 2, -th], [sw / 2, -th], [0.4 * sw, 0.0], [-0.4 * sw, 0.0]])
    parts["neck"] = upper([[-3 * su, -th - 4 * sv], [3 * su, -th - 4 * sv],
                           [3 * su, -th + 1], [-3 * su, -th + 1]])
    parts["head"] = upper(_ellipse(0.0, -th - 8.5 * sv, 4.5 * su, 5.5 * sv))
    arms_upper, arms = [], []
    for s in (-1.0, 1.0):
        shoulder = np.array([s * (sw / 2 + 1.5 * su), -th + 2.5 * sv])
        hand = np.array([s * (sw / 2 + 4.0 * su), -0.05 * th])
        elbow = (shoulder + hand) / 2.0
        arms.append(upper(_quad_along(shoulder, hand, 2.25 * su)))
        arms_upper.append(upper(_quad_along(shoulder, elbow, 2.25 * su)))
    parts["arm_l"], parts["arm_r"] = arms
    bottom = H - 1 - 1.5 * sv
    for s, name in ((-1.0, "leg_l"), (1.0, "leg_r")):
        parts[name] = np.array([
            [hip[0] + s * 0.4 * sw, hip[1] - 1.0],
            [hip[0] + s * 0.5 * su, hip[1] - 1.0],
            [hip[0] + s * 1.5 * su, bottom],
            [hip[0] + s * (0.4 * sw - 1.0 * su), bottom],
        ])
    keypoints = np.array([
        upper([0.0, -th - 8.5 * sv]),  # head
        upper([0.0, -th]),  # neck base
        upper([-sw / 2, -th]),
        upper([sw / 2, -th]),
        upper([-0.4 * sw, 0.0]),
        upper([0.4 * sw, 0.0]),
    ])
    affine = R @ np.diag([spec.shoulder_width / _SW0, spec.torso_height / _TH0])
    return parts, arms_upper, keypoints, hip, affine


def _seed_colors(seed):
    rng = np.random.default_rng(np.random.SeedSequence([int(seed) & (2**64 - 1), 7]))
    background = rng.uniform(0.7, 0.95, size=3)
    pants = rng.uniform(0.05, 0.45, size=3)
    return background, pants


def render_person(spec: PersonSpec) -> PersonContext:
    spec.validate()
    H, W = spec.canvas
    parts, arms_upper, keypoints, hip, affine = _person_geometry(spec)
    for name, poly in parts.items():
        if poly[:, 0].min() < 0 or poly[:, 0].max() > W - 1 or \
                poly[:, 1].min() < 0 or poly[:, 1].max() > H - 1:
            raise GeometryError(f"person part {name!r} exceeds the {H}x{W} canvas")
    masks = {k: kernels.raster_polygon(v, (H, W)).astype(bool) for k, v in parts.items()}
    body = np.zeros((H, W), dtype=bool)
    for m in masks.values():
        body |= m
    legs = masks["leg_l"] | masks["leg_r"]

    background, pants = _seed_colors(spec.seed)
    img = np.empty((H, W, 3))
    img[:] = background
    img[body] = np.asarray(spec.skin_tone)
    img[legs & ~masks["torso"]] = pants

    region = masks["torso"].copy()
    for q in arms_upper:
        region |= kernels.raster_polygon(q, (H, W)).astype(bool)
    region = ndimage.binary_dilation(region, iterations=1)

    su, _ = _scale((H, W))
    sigma = 2.0 * su
    grid = identity_grid((H, W))
    heat = np.exp(-((grid[:, :, None, :] - keypoints[None, None]) ** 2).sum(-1) / (2 * sigma**2))
    heat /= np.maximum(1.0, heat.sum(-1, keepdims=True))

    return PersonContext(spec, _quantize(img).astype(np.float32), body.astype(np.float32),
                         region.astype(np.float32), heat.astype(np.float32), hip, affine)


def gen_person(spec: PersonSpec):
    """Returns ``(person image, body mask, pose_map)``."""
    ctx = render_person(spec)
    return ctx.image, ctx.body, ctx.pose_map


def random_person_spec(rng, canvas=(64, 48)):
    return PersonSpec(
        shoulder_width=float(np.round(rng.uniform(25.0, 31.0), 3)),
        torso_height=float(np.round(rng.uniform(23.0, 29.0), 3)),
        lean=float(np.round(rng.uniform(-6.0, 6.0), 3)),
        skin_tone=tuple(float(v) for v in np.round(rng.uniform([0.45, 0.3, 0.2], [0.95, 0.8, 0.7]), 4)),
        seed=int(rng.integers(0, 2**63 - 1)),
        canvas=tuple(canvas),
    )


# --------------------------------------------------------------------------
# ground-truth warps


@dataclass
class TruthWarp:
    flow: np.ndarray  # F_gt: try-on pixel -> offset to flat-garment pixel
    inverse: np.ndarray  # F_gt_inv: flat-garment pixel -> offset to try-on pixel
    src: np.ndarray  # control points in try-on space
    dst: np.ndarray  # matching points in flat-garment space


def truth_warp_from_points(src, dst, resolution):
    """Build ``(F_gt, F_gt_inv)`` from control correspondences, with checks."""
    H, W = resolution
    flow = tps_flow(src, dst, (H, W))
    if jacobian_min_det(flow) <= 0.0:
        raise NumericalError("sampled deformation folds over (negative Jacobian)")
    inverse = tps_inverse_flow(src, dst, (H, W))
    return TruthWarp(flow, inverse, np.asarray(src, float), np.asarray(dst, float))


def torso_lattice(canvas):
    """3x3 control lattice inside the canonical torso."""
    H, W = canvas
    su, sv = _scale((H, W))
    xs = _axis_x(W) + np.array([-8.0, 0.0, 8.0]) * su
    ys = np.array([_HIP_Y - _TH0 + 3.0, _HIP_Y - _TH0 / 2.0, _HIP_Y - 3.0]) * sv
    return np.array([[x, y] for y in ys for x in xs])


def gen_truth_warp(person: PersonContext, seed, jitter_frac=0.04, max_disp_frac=0.15,
                   retries=MAX_WARP_RETRIES) -> TruthWarp:
    """Sample a TPS body warp: canonical-to-body affine plus Gaussian jitter.

    Control points sit on a 3x3 torso lattice; each flat-garment target is
    jittered with sigma ``jitter_frac * W``.  Draws that fold over, fail to
    invert or exceed ``max_disp_frac * W`` displacement inside the try-on
    region are redrawn (the spline extrapolates affinely towards the canvas
    corners, which no garment pixel ever samples).  A draw also counts as
    failing to invert when the grid-sampled inverse does not undo the
    forward flow to within ``ROUND_TRIP_TOL`` on the region interior: near
    folds the inverse varies too fast for bilinear lookup.
    """
    H, W = person.spec.canvas
    rng = np.random.default_rng(seed)
    lattice = torso_lattice((H, W))
    src = person.to_body(lattice)
    last = None
    for _ in range(retries):
        dst = lattice + rng.normal(0.0, jitter_frac * W, size=lattice.shape)
        try:
            warp = truth_warp_from_points(src, dst, (H, W))
        except NumericalError as exc:
            last = exc
            continue
        region = person.region > 0.5
        max_disp = np.sqrt((warp.flow**2).sum(-1))[region].max()
        if max_disp > max_disp_frac * W:
            last = NumericalError(f"max displacement {max_disp:.2f}px > {max_disp_frac * W:.2f}px")
            continue
        interior = ndimage.binary_erosion(region, iterations=1)
        # stored flows are float32; check the round trip at that precision
        comp = compose_flows(warp.inverse.astype(np.float32).astype(np.float64),
                             warp.flow.astype(np.float32).astype(np.float64))
        err = np.sqrt((comp**2).sum(-1))[interior].max() if interior.any() else 0.0
        if err >= ROUND_TRIP_TOL:
            last = NumericalError(f"round-trip error {err:.2f}px >= {ROUND_TRIP_TOL}px")
            continue
        return warp
    raise NumericalError(f"no valid warp after {retries} draws: {last}")


def invert_flow(flow, iters=100, tol=1e-9):
    """Numeric inverse of a dense flow by fixed-point iteration on the grid."""
    H, W, _ = flow.shape
    grid = identity_grid((H, W)).reshape(-1, 2)
    g = np.zeros_like(grid)
    for _ in range(iters):
        new = -kernels.lookup_clamped(flow, grid + g)
        step = np.abs(new - g).max() if g.size else 0.0
        g = new
        if step < tol:
            break
    return g.reshape(H, W, 2)


# --------------------------------------------------------------------------
# samples


@dataclass
class SamplePair:
    C: np.ndarray
    m_cp: np.ndarray
    P: np.ndarray
    P_a: np.ndarray
    m: np.ndarray
    m_C: np.ndarray
    T: np.ndarray
    C_w_gt: np.ndarray
    F_gt: np.ndarray
    F_gt_inv: np.ndarray
    pose_map: np.ndarray
    sample_id: str = ""


IMAGE_FIELDS = ("C", "P", "P_a", "T", "C_w_gt")
MASK_FIELDS = ("m_cp", "m", "m_C")
TENSOR_FIELDS = ("F_gt", "F_gt_inv", "pose_map")
SAMPLE_FIELDS = IMAGE_FIELDS + MASK_FIELDS + TENSOR_FIELDS + ("sample_id",)


def _quantize(img):
    return np.round(np.clip(img, 0.0, 1.0) * 255.0) / 255.0


def agnostic(P, m, fill=AGNOSTIC_FILL):
    m3 = np.asarray(m, dtype=np.float32)[..., None]
    return (P * (1.0 - m3) + fill * m3).astype(np.float32)


def compose_sample(garment, person: PersonContext, F_gt, F_gt_inv=None, sample_id=""):
    """Dress ``person`` in ``garment = (C, m_cp)`` using the warp ``F_gt``."""
    C, m_cp = garment
    H, W = person.image.shape[:2]
    if C.shape[:2] != (H, W) or np.shape(F_gt)[:2] != (H, W):
        raise ShapeError("garment, person and flow must share the canvas size")
    if F_gt_inv is None:
        F_gt_inv = invert_flow(np.asarray(F_gt, dtype=np.float64))
    warped = _quantize(apply_flow(C.astype(np.float64), F_gt))
    m_w = apply_flow(m_cp.astype(np.float64), F_gt) >= 0.5
    m_C = m_w & (person.body > 0.5) & (person.region > 0.5)
    if not m_C.any():
        raise DegenerateSampleError("warped garment does not overlap the body")
    mc3 = m_C[..., None]
    C_w_gt = np.where(mc3, warped, 0.0).astype(np.float32)
    T = np.where(mc3, C_w_gt, person.image).astype(np.float32)
    P_a = _quantize(agnostic(person.image, person.region)).astype(np.float32)
    return SamplePair(C=C.astype(np.float32), m_cp=m_cp.astype(np.float32), P=person.image,
                      P_a=P_a, m=person.region.astype(np.float32), m_C=m_C.astype(np.float32),
                      T=T, C_w_gt=C_w_gt, F_gt=np.asarray(F_gt, np.float32),
                      F_gt_inv=np.asarray(F_gt_inv, np.float32), pose_map=person.pose_map,
                      sample_id=sample_id)


def make_sample(seed, index, canvas=(64, 48)):
    """Generate sample ``index`` of a dataset seeded with ``seed``."""
    ss = np.random.SeedSequence([int(seed), int(index)])
    s_person, s_garment, s_gseed, s_warp = ss.spawn(4)
    pspec = random_person_spec(np.random.default_rng(s_person), canvas)
    gspec = random_garment_spec(np.random.default_rng(s_garment), canvas)
    person = render_person(pspec)
    garment = gen_garment(gspec, np.random.default_rng(s_gseed).integers(2**63 - 1))
    warp = gen_truth_warp(person, np.random.default_rng(s_warp).integers(2**63 - 1))
    sample = compose_sample(garment, person, warp.flow, warp.inverse, sample_id=f"s{index:05d}")
    return sample, pspec, gspec


# --------------------------------------------------------------------------
# datasets on disk


@dataclass
class DatasetManifest:
    version: str
    seed: int
    count: int
    canvas: tuple
    records: list
    splits: dict = field(default_factory=dict)
    root: Path | None = None


def save_sample(sample: SamplePair, directory):
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    rec = {"sample_id": sample.sample_id}
    for name in IMAGE_FIELDS + MASK_FIELDS:
        fn = f"{name}.png"
        io.save_png(d / fn, getattr(sample, name))
        rec[name] = str(Path(d.name) / fn)
    for name in TENSOR_FIELDS:
        fn = f"{name}.f32"
        io.save_tensor(d / fn, getattr(sample, name), name)
        rec[name] = str(Path(d.name) / fn)
    return rec


def derangement(n, rng):
    """Uniform random cyclic permutation (Sattolo); no fixed points for n >= 2."""
    if n < 2:
        raise ValidationError("an unpaired listing needs at least 2 test samples")
    perm = np.arange(n)
    for i in range(n - 1, 0, -1):
        j = int(rng.integers(0, i))
        perm[i], perm[j] = perm[j], perm[i]
    return perm


def build_dataset(out_dir, count, seed, canvas=(64, 48), train_fraction=0.8):
    """Write ``count`` samples plus ``dataset.json`` and ``manifest.jsonl``."""
    canvas = _check_canvas(canvas)
    if count < 1:
        raise ValidationError("count must be >= 1")
    if not 0.0 < train_fraction <= 1.0:
        raise ValidationError("train_fraction must lie in (0, 1]")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    records = []
    for i in range(count):
        sample, pspec, gspec = make_sample(seed, i, canvas)
        rec = save_sample(sample, out / sample.sample_id)
        records.append(rec)
        if (i + 1) % 100 == 0:
            log.info("generated %d/%d samples", i + 1, count)
    ids = [r["sample_id"] for r in records]
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 2**31]))
    perm = rng.permutation(count)
    n_train = int(round(count * train_fraction))
    train = sorted(ids[k] for k in perm[:n_train])
    test = sorted(ids[k] for k in perm[n_train:])
    unpaired = []
    if len(test) >= 2:
        d = derangement(len(test), rng)
        unpaired = [[test[i], test[int(d[i])]] for i in range(len(test))]
    splits = {"train": train, "test": test, "unpaired": unpaired}
    io.write_jsonl(out / "manifest.jsonl", records)
    header = {"version": DATASET_VERSION, "seed": int(seed), "count": int(count),
              "canvas": list(canvas), "train_fraction": float(train_fraction), "splits": splits}
    io.write_json(out / "dataset.json", header)
    return DatasetManifest(DATASET_VERSION, int(seed), int(count), canvas, records, splits, out)


def read_manifest(root) -> DatasetManifest:
    root = Path(root)
    header = io.read_json(root / "dataset.json")
    records = io.read_jsonl(root / "manifest.jsonl")
    return DatasetManifest(header["version"], header["seed"], header["count"],
                           tuple(header["canvas"]), records, header["splits"], root)


def load_sample(root, record) -> SamplePair:
    root = Path(root)
    vals = {"sample_id": record["sample_id"]}
    for name in IMAGE_FIELDS + MASK_FIELDS:
        vals[name] = io.load_png(root / record[name])
    for name in TENSOR_FIELDS:
        vals[name] = io.load_tensor(root / record[name])
    return SamplePair(**vals)


class Dataset:
    """In-memory arrays for a manifest, stacked per field (``N`` first)."""

    def __init__(self, root):
        self.manifest = read_manifest(root)
        self.root = Path(root)
        self.ids = [r["sample_id"] for r in self.manifest.records]
        self.index = {sid: k for k, sid in enumerate(self.ids)}
        samples = [load_sample(self.root, r) for r in self.manifest.records]
        self.arrays = {name: np.stack([getattr(s, name) for s in samples])
                       for name in SAMPLE_FIELDS if name != "sample_id"}
        self.splits = self.manifest.splits

    def __len__(self):
        return len(self.ids)

    def __getitem__(self, name):
        return self.arrays[name]

    def split_indices(self, split):
        if split not in self.splits or (split != "unpaired" and not self.splits[split]):
            raise ValidationError(f"dataset has no {split!r} split")
        if split == "unpaired":
            return [(self.index[p], self.index[g]) for p, g in self.splits["unpaired"]]
        return [self.index[s] for s in self.splits[split]]
