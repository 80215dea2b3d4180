"""Synthetic sphere/box scenes and an analytic ray caster for them."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import InputError
from ..geometry import (
    NO_HIT,
    CameraIntrinsics,
    RigidPose,
    camera_rays,
    compose_pose,
    look_at,
    rotation_about_axis,
)


@dataclass(frozen=True)
class Sphere:
    center: tuple
    radius: float
    color: tuple

    def __post_init__(self):
        if not self.radius > 0:
            raise InputError("sphere radius must be positive")


@dataclass(frozen=True)
class Box:
    lo: tuple
    hi: tuple
    color: tuple

    def __post_init__(self):
        if not all(a < b for a, b in zip(self.lo, self.hi)):
            raise InputError("box min corner must be below max corner on every axis")


@dataclass(frozen=True)
class Camera:
    intrinsics: CameraIntrinsics
    pose: RigidPose  # camera-to-world


@dataclass
class SyntheticScene:
    spheres: list = field(default_factory=list)
    boxes: list = field(default_factory=list)
    cameras: list = field(default_factory=list)

    @property
    def objects(self):
        return list(self.spheres) + list(self.boxes)

    def to_dict(self):
        return {
            "spheres": [{"center": list(s.center), "radius": s.radius, "color": list(s.color)}
                        for s in self.spheres],
            "boxes": [{"min": list(b.lo), "max": list(b.hi), "color": list(b.color)}
                      for b in self.boxes],
            "cameras": [{"intrinsics": c.intrinsics.to_dict(), "pose": c.pose.to_dict()}
                        for c in self.cameras],
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            [Sphere(tuple(s["center"]), float(s["radius"]), tuple(s["color"])) for s in d["spheres"]],
            [Box(tuple(b["min"]), tuple(b["max"]), tuple(b["color"])) for b in d["boxes"]],
            [Camera(CameraIntrinsics.from_dict(c["intrinsics"]), RigidPose.from_dict(c["pose"]))
             for c in d["cameras"]],
        )


@dataclass(frozen=True)
class SceneSpec:
    """Knobs for :func:`synth_scene`.

    Objects are scattered in a cube of side ``extent`` centred ``distance``
    metres in front of the first camera. The second camera orbits the cube
    centre by at most ``max_orbit_deg`` and is then shifted by at most
    ``max_shift`` metres.
    """

    n_spheres: int = 25
    n_boxes: int = 10
    width: int = 64
    height: int = 64
    fov_deg: float = 60.0
    distance: float = 5.0
    extent: float = 3.0
    radius_range: tuple = (0.1, 0.3)
    box_size_range: tuple = (0.1, 0.4)
    max_orbit_deg: float = 15.0
    max_shift: float = 0.2

    def __post_init__(self):
        if self.n_spheres < 0 or self.n_boxes < 0:
            raise InputError("object counts must be >= 0")


def _hit_spheres(origin, dirs, spheres):
    """Nearest positive ray parameter per ray (inf where nothing is hit)."""
    best = np.full(dirs.shape[0], np.inf)
    label = np.full(dirs.shape[0], -1)
    a = np.einsum("ij,ij->i", dirs, dirs)
    for n, s in enumerate(spheres):
        oc = origin - np.asarray(s.center, dtype=np.float64)
        b = dirs @ oc
        c = oc @ oc - s.radius ** 2
        disc = b * b - a * c
        ok = disc >= 0
        sq = np.sqrt(np.where(ok, disc, 0.0))
        t0 = (-b - sq) / a
        t1 = (-b + sq) / a
        t = np.where(t0 > 0, t0, t1)
        ok &= t > 0
        closer = ok & (t < best)
        best[closer] = t[closer]
        label[closer] = n
    return best, label


def _hit_boxes(origin, dirs, boxes, offset):
    best = np.full(dirs.shape[0], np.inf)
    label = np.full(dirs.shape[0], -1)
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
    for n, bx in enumerate(boxes):
        lo = np.asarray(bx.lo, dtype=np.float64)
        hi = np.asarray(bx.hi, dtype=np.float64)
        with np.errstate(invalid="ignore"):
            ta = (lo - origin) * inv
            tb = (hi - origin) * inv
        # zero direction components: inside the slab -> unbounded, outside -> miss
        par = dirs == 0
        inslab = (origin >= lo) & (origin <= hi)
        tmin_ax = np.where(par, np.where(inslab, -np.inf, np.inf), np.minimum(ta, tb))
        tmax_ax = np.where(par, np.where(inslab, np.inf, -np.inf), np.maximum(ta, tb))
        t_enter = tmin_ax.max(axis=1)
        t_exit = tmax_ax.min(axis=1)
        ok = (t_enter <= t_exit) & (t_exit > 0)
        t = np.where(t_enter > 0, t_enter, t_exit)
        closer = ok & (t < best)
        best[closer] = t[closer]
        label[closer] = n + offset
    return best, label


def render_depth(scene, camera):
    """Ray-cast ``scene`` from ``camera``.

    Returns ``(depth, rgb)``: z-depth ``(H, W)`` with 0 where no object is
    hit, and the colour of the nearest object ``(H, W, 3)`` (black on misses).
    """
    k = camera.intrinsics
    rays = camera_rays(k).reshape(-1, 3)
    dirs = rays @ camera.pose.rotation.T
    origin = camera.pose.translation
    ts, ls = _hit_spheres(origin, dirs, scene.spheres)
    tb, lb = _hit_boxes(origin, dirs, scene.boxes, len(scene.spheres))
    t = np.minimum(ts, tb)
    label = np.where(tb < ts, lb, ls)
    hit = np.isfinite(t)
    # rays have unit z in the camera frame, so the ray parameter is z-depth
    depth = np.where(hit, t, NO_HIT).reshape(k.height, k.width)
    palette = np.array([o.color for o in scene.objects], dtype=np.float64).reshape(-1, 3)
    rgb = np.zeros((k.height * k.width, 3))
    if hit.any():
        rgb[hit] = palette[label[hit]]
    return depth, rgb.reshape(k.height, k.width, 3)


def _random_rotation(rng, max_angle):
    axis = rng.normal(size=3)
    angle = rng.uniform(-max_angle, max_angle)
    return rotation_about_axis(axis, angle)


def synth_scene(seed, spec=SceneSpec()):
    """Deterministic random scene with two cameras looking at it."""
    rng = np.random.default_rng(seed)
    k = CameraIntrinsics.from_fov(spec.width, spec.height, spec.fov_deg)
    center = np.array([0.0, 0.0, spec.distance])
    half = spec.extent / 2.0
    spheres = []
    for _ in range(spec.n_spheres):
        c = center + rng.uniform(-half, half, size=3)
        r = rng.uniform(*spec.radius_range)
        spheres.append(Sphere(tuple(c), float(r), tuple(rng.uniform(0.0, 1.0, size=3))))
    boxes = []
    for _ in range(spec.n_boxes):
        c = center + rng.uniform(-half, half, size=3)
        size = rng.uniform(*spec.box_size_range, size=3)
        boxes.append(Box(tuple(c - size / 2), tuple(c + size / 2), tuple(rng.uniform(0.0, 1.0, size=3))))

    # first camera near the world origin, jittered, looking at the cube centre
    eye_a = rng.uniform(-0.3, 0.3, size=3) * np.array([1.0, 1.0, 0.0])
    pose_a = look_at(eye_a, center + rng.uniform(-0.2, 0.2, size=3))
    orbit = _random_rotation(rng, np.deg2rad(spec.max_orbit_deg))
    # rotate about the cube centre, then shift
    shift = rng.normal(size=3)
    shift *= rng.uniform(0.0, spec.max_shift) / np.linalg.norm(shift)
    delta = RigidPose(orbit, center - orbit @ center + shift)
    pose_b = compose_pose(delta, pose_a)
    return SyntheticScene(spheres, boxes, [Camera(k, pose_a), Camera(k, pose_b)])
