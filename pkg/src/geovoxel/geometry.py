"""Pinhole cameras, rigid poses and dense 3D feature grids.

Camera frame convention: +z forward, +x right, +y down, pixel (0, 0) at the
top-left corner of the image, ``u`` indexes columns and ``v`` rows. Depth
images store z-depth (distance along the optical axis) and use 0 to mark
pixels with no surface hit.

Grids are axis-aligned lattices in whatever frame their ``GridSpec`` lives
in. ``origin`` is the centre of voxel (0, 0, 0); voxel ``(i, j, k)`` has its
centre at ``origin + voxel_size * (i, j, k)``. Feature arrays are indexed
``data[i, j, k, c]``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InputError

NO_HIT = 0.0
DEFAULT_DIMS = (32, 32, 32)
DEFAULT_FOV_DEG = 60.0
_SNAP_TOL = 1e-9


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise InputError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise InputError("principal point must lie inside the image")

    @classmethod
    def from_fov(cls, width, height, fov_deg=DEFAULT_FOV_DEG):
        """Square-pixel camera with the given horizontal field of view."""
        fx = 0.5 * width / np.tan(np.deg2rad(fov_deg) / 2.0)
        return cls(fx, fx, (width - 1) / 2.0, (height - 1) / 2.0, int(width), int(height))

    def to_dict(self):
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
                "width": self.width, "height": self.height}

    @classmethod
    def from_dict(cls, d):
        return cls(float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]),
                   int(d["width"]), int(d["height"]))


@dataclass(frozen=True, eq=False)
class RigidPose:
    """Rigid transform ``x -> rotation @ x + translation``."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        r = np.array(self.rotation, dtype=np.float64)
        t = np.array(self.translation, dtype=np.float64).reshape(-1)
        if r.shape != (3, 3) or t.shape != (3,):
            raise InputError("rotation must be 3x3 and translation a 3-vector")
        if not np.allclose(r.T @ r, np.eye(3), atol=1e-6) or abs(np.linalg.det(r) - 1.0) > 1e-6:
            raise InputError("rotation must be orthonormal with determinant +1")
        r.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls):
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_translation(cls, t):
        return cls(np.eye(3), t)

    @classmethod
    def from_matrix(cls, m):
        m = np.asarray(m, dtype=np.float64)
        return cls(m[:3, :3], m[:3, 3])

    def matrix(self):
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def apply(self, points):
        """Transform an ``(..., 3)`` array of points."""
        return np.asarray(points, dtype=np.float64) @ self.rotation.T + self.translation

    def is_identity(self):
        return np.array_equal(self.rotation, np.eye(3)) and not self.translation.any()

    def to_dict(self):
        return {"rotation": self.rotation.tolist(), "translation": self.translation.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(np.array(d["rotation"]), np.array(d["translation"]))


def invert_pose(p):
    rt = p.rotation.T
    return RigidPose(rt, -rt @ p.translation)


def compose_pose(a, b):
    """Pose equivalent to applying ``b`` first, then ``a``."""
    return RigidPose(a.rotation @ b.rotation, a.rotation @ b.translation + a.translation)


def rotation_about_axis(axis, angle):
    """Rodrigues rotation matrix."""
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    x, y, z = axis
    k = np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])
    return np.eye(3) + np.sin(angle) * k + (1.0 - np.cos(angle)) * (k @ k)


def look_at(eye, target, up=(0.0, -1.0, 0.0)):
    """Camera-to-world pose for a camera at ``eye`` looking at ``target``.

    ``up`` is the world direction that should appear upward in the image;
    with +y down in the camera frame it maps to camera -y.
    """
    eye = np.asarray(eye, dtype=np.float64)
    fwd = np.asarray(target, dtype=np.float64) - eye
    fwd /= np.linalg.norm(fwd)
    up = np.asarray(up, dtype=np.float64)
    right = np.cross(fwd, up)
    if np.linalg.norm(right) < 1e-9:
        right = np.cross(fwd, np.array([1.0, 0.0, 0.0]))
    right /= np.linalg.norm(right)
    down = np.cross(fwd, right)
    return RigidPose(np.stack([right, down, fwd], axis=1), eye)


@dataclass(frozen=True, eq=False)
class GridSpec:
    origin: np.ndarray
    voxel_size: float
    dims: tuple

    def __post_init__(self):
        o = np.array(self.origin, dtype=np.float64).reshape(-1)
        dims = tuple(int(d) for d in self.dims)
        if o.shape != (3,) or len(dims) != 3:
            raise InputError("origin must be a 3-vector and dims a triple")
        if not self.voxel_size > 0:
            raise InputError("voxel_size must be positive")
        if min(dims) < 1:
            raise InputError("grid dims must be >= 1")
        o.setflags(write=False)
        object.__setattr__(self, "origin", o)
        object.__setattr__(self, "voxel_size", float(self.voxel_size))
        object.__setattr__(self, "dims", dims)

    def __eq__(self, other):
        return (isinstance(other, GridSpec) and np.array_equal(self.origin, other.origin)
                and self.voxel_size == other.voxel_size and self.dims == other.dims)

    __hash__ = None

    def centers(self):
        idx = np.stack(np.meshgrid(*[np.arange(d) for d in self.dims], indexing="ij"), axis=-1)
        return self.origin + self.voxel_size * idx

    def to_index(self, points):
        """Continuous grid coordinates of world points."""
        return (np.asarray(points, dtype=np.float64) - self.origin) / self.voxel_size

    def to_dict(self):
        return {"origin": self.origin.tolist(), "voxel_size": self.voxel_size, "dims": list(self.dims)}

    @classmethod
    def from_dict(cls, d):
        return cls(np.array(d["origin"]), float(d["voxel_size"]), tuple(d["dims"]))


def grid_spec_from_points(points, dims=DEFAULT_DIMS, margin=1.2):
    """Axis-aligned grid centred on the mean of ``points``.

    The voxel size is chosen so the cube covers every point with a ``margin``
    factor of slack around the mean.
    """
    points = np.asarray(points, dtype=np.float64)
    if len(points) == 0:
        raise InputError("cannot place a grid around an empty point cloud")
    center = points.mean(axis=0)
    half = margin * float(np.abs(points - center).max())
    n = max(dims)
    voxel_size = 2.0 * half / max(n - 1, 1) if half > 0 else 1.0
    origin = center - voxel_size * (np.asarray(dims, dtype=np.float64) - 1) / 2.0
    return GridSpec(origin, voxel_size, tuple(dims))


@dataclass(eq=False)
class VoxelGrid:
    spec: GridSpec
    data: np.ndarray
    occupancy: np.ndarray = field(default=None)

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim == 3:
            self.data = self.data[..., None]
        if self.data.shape[:3] != self.spec.dims:
            raise InputError(f"data shape {self.data.shape} does not match dims {self.spec.dims}")
        if self.occupancy is None:
            self.occupancy = np.ones(self.spec.dims)
        self.occupancy = np.asarray(self.occupancy, dtype=np.float64)
        if self.occupancy.shape != self.spec.dims:
            raise InputError("occupancy shape does not match grid dims")

    @property
    def channels(self):
        return self.data.shape[-1]

    @classmethod
    def empty(cls, spec, channels):
        return cls(spec, np.zeros(spec.dims + (channels,)), np.zeros(spec.dims))


def _check_image_dims(k, *images):
    for img in images:
        if img.shape[:2] != (k.height, k.width):
            raise InputError(f"image shape {img.shape[:2]} does not match intrinsics "
                             f"({k.height}, {k.width})")


def camera_rays(k):
    """Per-pixel ray directions with unit z component, shape (H, W, 3)."""
    u = np.arange(k.width, dtype=np.float64)
    v = np.arange(k.height, dtype=np.float64)
    uu, vv = np.meshgrid(u, v)
    return np.stack([(uu - k.cx) / k.fx, (vv - k.cy) / k.fy, np.ones_like(uu)], axis=-1)


def unproject_depth(depth, k, cam_to_world):
    """Back-project every valid depth pixel into the world frame.

    Returns ``(points, pixels)``: an ``(N, 3)`` float array and the matching
    ``(N, 2)`` integer array of ``(u, v)`` pixel coordinates, in row-major
    pixel order. Sentinel pixels are omitted.
    """
    depth = np.asarray(depth, dtype=np.float64)
    _check_image_dims(k, depth)
    v, u = np.nonzero(depth != NO_HIT)
    d = depth[v, u]
    cam = np.stack([(u - k.cx) * d / k.fx, (v - k.cy) * d / k.fy, d], axis=-1)
    return cam_to_world.apply(cam), np.stack([u, v], axis=-1)


def _corner_weights(g, dims):
    """Eight trilinear corners for continuous grid coords ``g`` (N, 3).

    Returns ``(inside, flat_idx (8, N), weights (8, N))``; rows for points
    outside ``[0, D-1]`` on any axis are meaningless and must be masked with
    ``inside``.
    """
    dims_arr = np.asarray(dims)
    # coordinates within round-off of a lattice node are snapped onto it
    nearest = np.rint(g)
    g = np.where(np.abs(g - nearest) <= _SNAP_TOL, nearest, g)
    inside = np.all((g >= 0) & (g <= dims_arr - 1), axis=-1)
    gc = np.where(inside[:, None], g, 0.0)
    i0 = np.clip(np.floor(gc), 0, np.maximum(dims_arr - 2, 0)).astype(np.int64)
    f = gc - i0
    i1 = np.minimum(i0 + 1, dims_arr - 1)
    idx, w = [], []
    for cx in (0, 1):
        for cy in (0, 1):
            for cz in (0, 1):
                ix = i1[:, 0] if cx else i0[:, 0]
                iy = i1[:, 1] if cy else i0[:, 1]
                iz = i1[:, 2] if cz else i0[:, 2]
                wx = f[:, 0] if cx else 1.0 - f[:, 0]
                wy = f[:, 1] if cy else 1.0 - f[:, 1]
                wz = f[:, 2] if cz else 1.0 - f[:, 2]
                idx.append((ix * dims[1] + iy) * dims[2] + iz)
                w.append(wx * wy * wz)
    return inside, np.stack(idx), np.stack(w)


def splat_points(points, values, spec):
    """Trilinear scatter of per-point ``values`` (N, C) into ``spec``.

    Returns the unnormalised value sums ``(Dx, Dy, Dz, C)`` and accumulated
    weights ``(Dx, Dy, Dz)``. Points outside the lattice are dropped.
    """
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    values = np.asarray(values, dtype=np.float64)
    values = values.reshape(len(points), values.shape[-1] if values.ndim > 1 else 1)
    n_vox = int(np.prod(spec.dims))
    inside, idx, w = _corner_weights(spec.to_index(points), spec.dims)
    idx, w, values = idx[:, inside], w[:, inside], values[inside]
    flat = idx.ravel()
    wsum = np.bincount(flat, weights=w.ravel(), minlength=n_vox)
    sums = np.empty((n_vox, values.shape[1]))
    for c in range(values.shape[1]):
        sums[:, c] = np.bincount(flat, weights=(w * values[:, c]).ravel(), minlength=n_vox)
    return sums.reshape(spec.dims + (values.shape[1],)), wsum.reshape(spec.dims)


def lift_to_grid(rgb, depth, k, cam_to_world, spec):
    """Back-project an RGB-D view and splat its colours into a voxel grid.

    Features are weight-normalised colour averages; occupancy is the
    accumulated trilinear weight clipped to 1.
    """
    rgb = np.asarray(rgb, dtype=np.float64)
    depth = np.asarray(depth, dtype=np.float64)
    _check_image_dims(k, rgb, depth)
    points, pix = unproject_depth(depth, k, cam_to_world)
    n_ch = rgb.shape[2] if rgb.ndim == 3 else 1
    colors = rgb[pix[:, 1], pix[:, 0]].reshape(len(points), n_ch)
    sums, wsum = splat_points(points, colors, spec)
    data = np.zeros_like(sums)
    hit = wsum > 0
    data[hit] = sums[hit] / wsum[hit][:, None]
    return VoxelGrid(spec, data, np.minimum(wsum, 1.0))


def sample_index_coords(grid, g):
    """Trilinear samples of ``grid`` at continuous index coords ``g`` (N, 3)."""
    g = np.asarray(g, dtype=np.float64).reshape(-1, 3)
    inside, idx, w = _corner_weights(g, grid.spec.dims)
    w = w * inside
    flat_data = grid.data.reshape(-1, grid.channels)
    flat_occ = grid.occupancy.reshape(-1)
    feat = np.zeros((len(g), grid.channels))
    weight = np.zeros(len(g))
    for c in range(8):
        feat += w[c][:, None] * flat_data[idx[c]]
        weight += w[c] * flat_occ[idx[c]]
    return feat, weight


def trilinear_sample(grid, world_point):
    """Interpolated ``(feature, occupancy)`` at a world point.

    Accepts a single 3-vector or an ``(N, 3)`` array. Points outside the
    lattice yield a zero feature and zero weight.
    """
    p = np.asarray(world_point, dtype=np.float64)
    feat, weight = sample_index_coords(grid, grid.spec.to_index(p.reshape(-1, 3)))
    if p.ndim == 1:
        return feat[0], float(weight[0])
    return feat, weight


def warp_grid(src, src_to_dst, dst_spec):
    """Resample ``src`` into ``dst_spec`` after moving it by ``src_to_dst``.

    Destination voxel centre ``x`` receives the source sample at
    ``invert_pose(src_to_dst).apply(x)``. The mapping is carried out in
    index space so that an identity pose between identical specs lands
    exactly on the lattice nodes.
    """
    inv = invert_pose(src_to_dst)
    s, d = src.spec, dst_spec
    a = inv.rotation * (d.voxel_size / s.voxel_size)
    b = (inv.apply(d.origin) - s.origin) / s.voxel_size
    idx = np.stack(np.meshgrid(*[np.arange(n, dtype=np.float64) for n in d.dims],
                               indexing="ij"), axis=-1).reshape(-1, 3)
    g = idx @ a.T + b
    feat, weight = sample_index_coords(src, g)
    return VoxelGrid(d, feat.reshape(d.dims + (src.channels,)), weight.reshape(d.dims))


def _surface_band(centers, depth, pose, k, half_band):
    cam = invert_pose(pose).apply(centers)
    z = cam[:, 2]
    ok = z > 0
    zs = np.where(ok, z, 1.0)
    u = np.rint(cam[:, 0] * k.fx / zs + k.cx)
    v = np.rint(cam[:, 1] * k.fy / zs + k.cy)
    ok &= (u >= 0) & (u < k.width) & (v >= 0) & (v < k.height)
    ui = np.where(ok, u, 0).astype(np.int64)
    vi = np.where(ok, v, 0).astype(np.int64)
    observed = depth[vi, ui]
    ok &= observed != NO_HIT
    ok &= np.abs(z - observed) <= half_band
    return ok


def covisibility_mask(spec, depth_a, pose_a, depth_b, pose_b, k):
    """Voxels whose centres sit on the observed surface in both views.

    A centre counts as seen by a view when it projects (nearest pixel) inside
    the image and its z-depth is within half a voxel of that pixel's depth.
    """
    depth_a = np.asarray(depth_a, dtype=np.float64)
    depth_b = np.asarray(depth_b, dtype=np.float64)
    _check_image_dims(k, depth_a, depth_b)
    centers = spec.centers().reshape(-1, 3)
    half = spec.voxel_size / 2.0
    seen_a = _surface_band(centers, depth_a, pose_a, k, half)
    seen_b = _surface_band(centers, depth_b, pose_b, k, half)
    return (seen_a & seen_b).reshape(spec.dims)
