"""Procedural aerial scenes with analytic depth.

World frame: ground plane z = 0, z up. The camera sits at ``position`` and looks
down, tilted forward (towards +y) by ``pitch_deg`` from nadir. Camera axes are
x right, y down, z along the optical axis; since each pixel ray is ``R @ (u', v', 1)``
the ray parameter at a hit is the z-depth directly.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .dataio import BoundingBox, DepthMap, Sample, SceneMeta

BUILDING, BRIDGE = 1, 2
SUN_ELEVATION_DEG = 45.0
SUN_AZIMUTH_DEG = 30.0
AMBIENT = 0.35


class GenerationError(RuntimeError):
    pass


@dataclass
class Structure:
    """Axis-aligned box standing on the ground: footprint (x0, y0, x1, y1) in meters."""

    footprint: tuple[float, float, float, float]
    height: float
    albedo: tuple[float, float, float]
    class_id: int


@dataclass
class Distractor:
    """Tree-like hemisphere; gets depth but never a box."""

    center: tuple[float, float]
    radius: float
    albedo: tuple[float, float, float]


@dataclass
class SceneSpec:
    width: int
    height: int
    position: tuple[float, float, float]
    pitch_deg: float
    fx: float
    fy: float
    cx: float
    cy: float
    structures: list[Structure] = field(default_factory=list)
    distractors: list[Distractor] = field(default_factory=list)
    ground_albedo: tuple[float, float, float] = (0.45, 0.5, 0.35)
    seed: int = 0

    def check(self) -> None:
        if self.fx <= 0 or self.fy <= 0:
            raise GenerationError("focal lengths must be positive")
        top = max((s.height for s in self.structures), default=0.0)
        top = max([top] + [d.radius for d in self.distractors])
        if self.position[2] <= top:
            raise GenerationError("camera must fly above every structure")
        rects = [s.footprint for s in self.structures]
        for i in range(len(rects)):
            for j in range(i + 1, len(rects)):
                if rects_overlap(rects[i], rects[j]):
                    raise GenerationError(f"structures {i} and {j} overlap")


@dataclass
class GeneratorParams:
    size: tuple[int, int] = (320, 240)
    hfov_deg: float = 60.0
    altitude: tuple[float, float] = (40.0, 80.0)
    pitch_deg: tuple[float, float] = (0.0, 20.0)
    n_structures: tuple[int, int] = (1, 3)
    building_side: tuple[float, float] = (8.0, 16.0)
    building_height: tuple[float, float] = (5.0, 30.0)
    bridge_length: tuple[float, float] = (16.0, 26.0)
    bridge_width: tuple[float, float] = (5.0, 8.0)
    bridge_height: tuple[float, float] = (5.0, 12.0)
    bridge_prob: float = 0.35
    n_distractors: tuple[int, int] = (0, 5)
    distractor_radius: tuple[float, float] = (1.5, 3.5)
    min_gap: float = 2.5
    max_retries: int = 200

    def check(self) -> None:
        for name in ("altitude", "pitch_deg", "building_side", "building_height", "bridge_length",
                     "bridge_width", "bridge_height", "distractor_radius"):
            lo, hi = getattr(self, name)
            if lo > hi or lo < 0:
                raise ValueError(f"bad range {name}={lo, hi}")
        if self.n_structures[0] > self.n_structures[1] or self.n_distractors[0] > self.n_distractors[1]:
            raise ValueError("bad count range")
        if self.altitude[0] <= max(self.building_height[1], self.bridge_height[1]):
            raise ValueError("minimum altitude must exceed the tallest structure")


def rects_overlap(a, b, gap: float = 0.0) -> bool:
    return not (a[2] + gap <= b[0] or b[2] + gap <= a[0] or a[3] + gap <= b[1] or b[3] + gap <= a[1])


def camera_rotation(pitch_deg: float) -> np.ndarray:
    """Columns are the camera x, y, z axes expressed in world coordinates."""
    t = math.radians(pitch_deg)
    x = np.array([1.0, 0.0, 0.0])
    z = np.array([0.0, math.sin(t), -math.cos(t)])
    y = np.cross(z, x)
    return np.stack([x, y, z], axis=1)


def pixel_rays(spec: SceneSpec) -> np.ndarray:
    """World-frame ray directions (H, W, 3) through pixel centers, scaled to unit z-depth."""
    u = (np.arange(spec.width) + 0.5 - spec.cx) / spec.fx
    v = (np.arange(spec.height) + 0.5 - spec.cy) / spec.fy
    uu, vv = np.meshgrid(u, v)
    d_cam = np.stack([uu, vv, np.ones_like(uu)], axis=-1)
    return d_cam @ camera_rotation(spec.pitch_deg).T


def project(spec: SceneSpec, points: np.ndarray) -> np.ndarray:
    """Pinhole projection of world points (N, 3) to pixel coordinates (N, 2) and depth (N,)."""
    rot = camera_rotation(spec.pitch_deg)
    cam = (np.asarray(points, float) - np.asarray(spec.position, float)) @ rot
    u = spec.fx * cam[:, 0] / cam[:, 2] + spec.cx
    v = spec.fy * cam[:, 1] / cam[:, 2] + spec.cy
    return np.stack([u, v], axis=1), cam[:, 2]


def ground_footprint(spec: SceneSpec) -> tuple[float, float, float, float]:
    """Bounding rectangle of the ground area seen by the camera."""
    corners = np.array([[0, 0], [spec.width, 0], [0, spec.height], [spec.width, spec.height]], float)
    rot = camera_rotation(spec.pitch_deg)
    d = np.column_stack([(corners[:, 0] - spec.cx) / spec.fx, (corners[:, 1] - spec.cy) / spec.fy,
                         np.ones(4)]) @ rot.T
    if np.any(d[:, 2] >= 0):
        raise GenerationError("camera sees the horizon; reduce pitch or field of view")
    t = -spec.position[2] / d[:, 2]
    pts = np.asarray(spec.position[:2]) + t[:, None] * d[:, :2]
    return (pts[:, 0].min(), pts[:, 1].min(), pts[:, 0].max(), pts[:, 1].max())


def sample_scene(seed: int, params: GeneratorParams | None = None) -> SceneSpec:
    params = params or GeneratorParams()
    params.check()
    rng = np.random.default_rng(seed)
    w, h = params.size
    fx = (w / 2) / math.tan(math.radians(params.hfov_deg) / 2)
    altitude = rng.uniform(*params.altitude)
    pitch = rng.uniform(*params.pitch_deg)
    spec = SceneSpec(width=w, height=h, position=(0.0, 0.0, float(altitude)), pitch_deg=float(pitch),
                     fx=fx, fy=fx, cx=w / 2, cy=h / 2, seed=seed)
    spec.ground_albedo = tuple(float(c) for c in rng.uniform([0.35, 0.4, 0.25], [0.5, 0.55, 0.35]))
    region = ground_footprint(spec)

    placed: list[tuple[float, float, float, float]] = []

    def place(sx: float, sy: float):
        # structures may hang over the frame edge by up to a quarter of their size
        for _ in range(params.max_retries):
            mx, my = sx / 4, sy / 4
            cx_ = rng.uniform(region[0] + mx, region[2] - mx)
            cy_ = rng.uniform(region[1] + my, region[3] - my)
            rect = (cx_ - sx / 2, cy_ - sy / 2, cx_ + sx / 2, cy_ + sy / 2)
            if not any(rects_overlap(rect, r, params.min_gap) for r in placed):
                placed.append(rect)
                return tuple(float(c) for c in rect)
        return None

    n_struct = int(rng.integers(params.n_structures[0], params.n_structures[1] + 1))
    for _ in range(n_struct):
        if rng.random() < params.bridge_prob:
            length, width = rng.uniform(*params.bridge_length), rng.uniform(*params.bridge_width)
            sx, sy = (length, width) if rng.random() < 0.5 else (width, length)
            height = rng.uniform(*params.bridge_height)
            albedo = rng.uniform([0.55, 0.55, 0.55], [0.7, 0.7, 0.72])
            cls = BRIDGE
        else:
            sx, sy = rng.uniform(*params.building_side, size=2)
            height = rng.uniform(*params.building_height)
            albedo = rng.uniform([0.5, 0.25, 0.2], [0.85, 0.5, 0.45])
            cls = BUILDING
        rect = place(sx, sy)
        if rect is None:
            raise GenerationError(f"seed {seed}: could not place structure after {params.max_retries} tries")
        spec.structures.append(Structure(rect, float(height), tuple(float(a) for a in albedo), cls))

    n_dis = int(rng.integers(params.n_distractors[0], params.n_distractors[1] + 1))
    for _ in range(n_dis):
        r = rng.uniform(*params.distractor_radius)
        rect = place(2 * r, 2 * r)
        if rect is None:
            break  # trees are optional clutter
        centre = ((rect[0] + rect[2]) / 2, (rect[1] + rect[3]) / 2)
        albedo = rng.uniform([0.1, 0.3, 0.08], [0.2, 0.5, 0.15])
        spec.distractors.append(Distractor(centre, float(r), tuple(float(a) for a in albedo)))
    spec.check()
    return spec


def _ray_box(origin, dirs, lo, hi):
    """Slab test. Returns entry distance (inf on miss) and the axis of the entry face."""
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
        t0 = (lo - origin) * inv
        t1 = (hi - origin) * inv
    tmin = np.minimum(t0, t1)
    tmax = np.maximum(t0, t1)
    # axis-parallel rays outside a slab produce nan; treat as miss
    tmin = np.where(np.isnan(tmin), -np.inf, tmin)
    tmax = np.where(np.isnan(tmax), np.inf, tmax)
    t_near = tmin.max(axis=-1)
    t_far = tmax.min(axis=-1)
    hit = (t_near <= t_far) & (t_near > 0)
    return np.where(hit, t_near, np.inf), tmin.argmax(axis=-1)


def _ray_hemisphere(origin, dirs, centre, radius):
    oc = origin - centre
    b = dirs @ oc
    a = np.einsum("...i,...i->...", dirs, dirs)
    c = oc @ oc - radius ** 2
    disc = b * b - a * c
    with np.errstate(invalid="ignore"):
        t = (-b - np.sqrt(disc)) / a
    pz = origin[2] + t * dirs[..., 2]
    hit = (disc >= 0) & (t > 0) & (pz >= 0)
    return np.where(hit, t, np.inf)


def sun_direction() -> np.ndarray:
    el, az = math.radians(SUN_ELEVATION_DEG), math.radians(SUN_AZIMUTH_DEG)
    return np.array([math.cos(el) * math.cos(az), math.cos(el) * math.sin(az), math.sin(el)])


def render(spec: SceneSpec) -> Sample:
    """Ray-cast the scene. Returns a Sample without sparse depth."""
    spec.check()
    dirs = pixel_rays(spec)
    origin = np.asarray(spec.position, float)
    h, w = spec.height, spec.width

    depth = -origin[2] / dirs[..., 2]
    if np.any(~np.isfinite(depth)) or np.any(depth <= 0):
        raise GenerationError("some pixel rays miss the ground plane")
    normal = np.zeros((h, w, 3))
    normal[..., 2] = 1.0
    albedo = np.broadcast_to(np.asarray(spec.ground_albedo), (h, w, 3)).copy()
    ids = np.full((h, w), -1, dtype=np.int64)

    # mild seeded texture so the ground is not a flat colour
    tex_rng = np.random.default_rng(spec.seed + 7919)
    albedo *= 1.0 + 0.06 * tex_rng.standard_normal((h, w, 1))

    for k, s in enumerate(spec.structures):
        x0, y0, x1, y1 = s.footprint
        t, axis = _ray_box(origin, dirs, np.array([x0, y0, 0.0]), np.array([x1, y1, s.height]))
        closer = t < depth
        depth = np.where(closer, t, depth)
        ids[closer] = k
        face_n = np.zeros((h, w, 3))
        sign = -np.sign(np.take_along_axis(dirs, axis[..., None], -1))[..., 0]
        np.put_along_axis(face_n, axis[..., None], sign[..., None], -1)
        normal[closer] = face_n[closer]
        albedo[closer] = s.albedo

    for d in spec.distractors:
        centre = np.array([d.center[0], d.center[1], 0.0])
        t = _ray_hemisphere(origin, dirs, centre, d.radius)
        closer = t < depth
        depth = np.where(closer, t, depth)
        ids[closer] = -2
        hit = origin + t[..., None] * dirs
        n = (hit - centre) / d.radius
        normal[closer] = n[closer]
        albedo[closer] = d.albedo

    shade = AMBIENT + (1 - AMBIENT) * np.clip(normal @ sun_direction(), 0.0, None)
    rgb = np.clip(albedo * shade[..., None] * 255.0 + 0.5, 0, 255).astype(np.uint8)

    boxes = []
    for k, s in enumerate(spec.structures):
        rows, cols = np.nonzero(ids == k)
        if rows.size == 0:
            continue
        boxes.append(BoundingBox(float(cols.min()), float(rows.min()), float(cols.max() + 1),
                                 float(rows.max() + 1), class_id=s.class_id))

    meta = SceneMeta(fx=spec.fx, fy=spec.fy, cx=spec.cx, cy=spec.cy, seed=spec.seed,
                     provenance={"generator": "scenegen", "altitude": spec.position[2],
                                 "pitch_deg": spec.pitch_deg, "n_structures": len(spec.structures),
                                 "n_distractors": len(spec.distractors)})
    return Sample(rgb=rgb, dense_depth=DepthMap(depth.astype(np.float32)), sparse_depth=None,
                  boxes=boxes, meta=meta)


def spec_to_dict(spec: SceneSpec) -> dict:
    return asdict(spec)
