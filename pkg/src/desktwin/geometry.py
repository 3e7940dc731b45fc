"""Ground-plane recovery, gravity alignment, background completion, height-map meshing."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .depth import CameraIntrinsics, PointCloud
from .errors import EmptyCloud, NoConsensus, NonUnitNormal, TooFewPoints

RANSAC_ITERATIONS = 500
RANSAC_THRESHOLD = 0.01
MIN_INLIER_RATIO = 0.2
DEFAULT_CELL_SIZE = 0.01


@dataclass
class Plane:
    """Plane {x : normal . x = offset} with unit normal."""

    normal: np.ndarray
    offset: float
    inlier_indices: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=int))
    trial_inlier_counts: np.ndarray | None = None

    def __post_init__(self):
        self.normal = np.asarray(self.normal, dtype=np.float64).reshape(3)
        n = np.linalg.norm(self.normal)
        if abs(n - 1.0) > 1e-9:
            self.normal = self.normal / n
        self.inlier_indices = np.asarray(self.inlier_indices, dtype=int)

    def signed_distance(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points) @ self.normal - self.offset


@dataclass
class TriangleMesh:
    vertices: np.ndarray
    triangles: np.ndarray
    colors: np.ndarray | None = None

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.triangles = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        if self.triangles.size and (
            self.triangles.min() < 0 or self.triangles.max() >= len(self.vertices)
        ):
            raise ValueError("triangle index out of range")

    def triangle_areas(self) -> np.ndarray:
        a = self.vertices[self.triangles[:, 0]]
        b = self.vertices[self.triangles[:, 1]]
        c = self.vertices[self.triangles[:, 2]]
        return 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)

    def aabb(self) -> tuple[np.ndarray, np.ndarray]:
        return self.vertices.min(axis=0), self.vertices.max(axis=0)


@dataclass
class SceneBounds:
    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        self.lo = np.asarray(self.lo, dtype=np.float64).reshape(3)
        self.hi = np.asarray(self.hi, dtype=np.float64).reshape(3)
        if not np.all(self.lo < self.hi):
            raise ValueError("bounds min must be < max componentwise")

    @classmethod
    def from_cloud(cls, cloud: PointCloud, inflate: float = 0.1) -> "SceneBounds":
        lo = cloud.points.min(axis=0)
        hi = cloud.points.max(axis=0)
        pad = (hi - lo) * inflate + 1e-9
        return cls(lo - pad, hi + pad)

    def contains(self, points: np.ndarray, tol: float = 0.0) -> np.ndarray:
        p = np.asarray(points).reshape(-1, 3)
        return np.all((p >= self.lo - tol) & (p <= self.hi + tol), axis=1)


def fit_ground_plane(
    cloud: PointCloud,
    iterations: int = RANSAC_ITERATIONS,
    inlier_threshold: float = RANSAC_THRESHOLD,
    seed: int = 0,
    camera_origin=(0.0, 0.0, 0.0),
) -> Plane:
    """RANSAC plane fit refined by least squares on the winning inlier set.

    The normal is oriented so the camera origin lies on the positive side.
    Deterministic under a fixed seed; ties resolved by lowest trial index.
    """
    pts = cloud.points
    n_pts = len(pts)
    if n_pts < 3:
        raise TooFewPoints(f"plane fit needs >= 3 points, got {n_pts}")
    rng = np.random.Generator(np.random.PCG64(seed))
    best_count = 0
    best_inliers = None
    trial_counts = np.zeros(iterations, dtype=int)
    for trial in range(iterations):
        idx = rng.choice(n_pts, size=3, replace=False)
        a, b, c = pts[idx]
        normal = np.cross(b - a, c - a)
        norm = np.linalg.norm(normal)
        if norm < 1e-12:
            continue
        normal /= norm
        dist = np.abs((pts - a) @ normal)
        inliers = dist <= inlier_threshold
        count = int(inliers.sum())
        trial_counts[trial] = count
        if count > best_count:
            best_count = count
            best_inliers = inliers

    if best_inliers is None or best_count < MIN_INLIER_RATIO * n_pts:
        raise NoConsensus(f"best inlier count {best_count} of {n_pts}")

    inlier_pts = pts[best_inliers]
    centroid = inlier_pts.mean(axis=0)
    cov = (inlier_pts - centroid).T @ (inlier_pts - centroid)
    eigvals, eigvecs = np.linalg.eigh(cov)
    normal = eigvecs[:, 0]
    offset = float(normal @ centroid)
    cam = np.asarray(camera_origin, dtype=np.float64)
    if cam @ normal - offset < 0:
        normal = -normal
        offset = -offset
    return Plane(
        normal,
        offset,
        inlier_indices=np.nonzero(best_inliers)[0],
        trial_inlier_counts=trial_counts,
    )


def _skew(u: np.ndarray) -> np.ndarray:
    return np.array(
        [[0.0, -u[2], u[1]], [u[2], 0.0, -u[0]], [-u[1], u[0], 0.0]]
    )


def gravity_rotation(n) -> np.ndarray:
    """Minimal rotation taking the unit normal n onto the world up axis e_z.

    Rodrigues about u = (n x e_z)/|n x e_z| by theta = arccos(n . e_z).
    Near-identity returns I; the antipodal normal maps to a 180-degree
    rotation about e_x (any fixed perpendicular axis is valid there).
    """
    n = np.asarray(n, dtype=np.float64).reshape(3)
    if abs(np.linalg.norm(n) - 1.0) > 1e-6:
        raise NonUnitNormal(f"|n| = {np.linalg.norm(n):.6g}")
    n = n / np.linalg.norm(n)
    ez = np.array([0.0, 0.0, 1.0])
    cos_t = float(np.clip(n @ ez, -1.0, 1.0))
    theta = np.arccos(cos_t)
    if theta < 1e-8:
        return np.eye(3)
    if np.pi - theta < 1e-8:
        return np.diag([1.0, -1.0, -1.0])  # 180 degrees about e_x
    axis = np.cross(n, ez)
    axis /= np.linalg.norm(axis)
    k = _skew(axis)
    return np.eye(3) + np.sin(theta) * k + (1.0 - cos_t) * (k @ k)


def rotation_angle(r: np.ndarray) -> float:
    return float(np.arccos(np.clip((np.trace(r) - 1.0) / 2.0, -1.0, 1.0)))


def _ray_box(dirs: np.ndarray, bounds: SceneBounds) -> np.ndarray:
    """Smallest positive ray parameter hitting the box surface from the origin."""
    with np.errstate(divide="ignore", invalid="ignore"):
        t_lo = bounds.lo / dirs
        t_hi = bounds.hi / dirs
    t_near = np.minimum(t_lo, t_hi)
    t_far = np.maximum(t_lo, t_hi)
    # axes with zero direction never bound the slab interval
    zero = np.abs(dirs) < 1e-300
    t_near = np.where(zero, -np.inf, t_near)
    t_far = np.where(zero, np.inf, t_far)
    t_enter = t_near.max(axis=1)
    t_exit = t_far.min(axis=1)
    hit = t_exit >= np.maximum(t_enter, 0.0)
    t = np.where(t_enter > 1e-12, t_enter, t_exit)
    return np.where(hit & (t > 1e-12), t, np.inf)


def complete_background(
    cloud: PointCloud,
    object_mask: np.ndarray,
    plane: Plane,
    bounds: SceneBounds,
    k: CameraIntrinsics | None = None,
) -> tuple[PointCloud, int]:
    """Fills object-occluded pixels with ray hits on the support plane or bounds.

    Rays are cast from the camera origin through each object point; the fill
    point is the nearest positive intersection with the plane or the bounds
    box. Returns the completed cloud and the count of dropped (ray-miss) rays.
    """
    mask = np.asarray(object_mask, dtype=bool).reshape(-1)
    pts = cloud.points
    background = pts[~mask]
    obj = pts[mask]
    if len(obj) == 0:
        return PointCloud(background.copy()), 0

    dirs = obj / np.linalg.norm(obj, axis=1, keepdims=True)
    denom = dirs @ plane.normal
    with np.errstate(divide="ignore", invalid="ignore"):
        t_plane = plane.offset / denom
    t_plane = np.where((np.abs(denom) > 1e-12) & (t_plane > 1e-12), t_plane, np.inf)
    t_box = _ray_box(dirs, bounds)
    t = np.minimum(t_plane, t_box)
    hit = np.isfinite(t)
    fills = dirs[hit] * t[hit, None]
    dropped = int((~hit).sum())
    return PointCloud(np.vstack([background, fills])), dropped


def heightmap_mesh(cloud: PointCloud, cell_size: float = DEFAULT_CELL_SIZE) -> TriangleMesh:
    """Triangulates an x-y grid of per-cell minimum heights.

    Minimum z per cell keeps objects resting on the surface from inflating
    the background; empty cells are filled from their nearest occupied cell.
    Vertices sit at cell centers, so re-meshing a mesh's own vertices at the
    same cell size is height-idempotent.
    """
    if len(cloud) == 0:
        raise EmptyCloud("cannot mesh an empty cloud")
    if cell_size <= 0:
        raise ValueError("cell_size must be positive")
    pts = cloud.points
    lo = pts[:, :2].min(axis=0)
    hi = pts[:, :2].max(axis=0)
    nx = max(int(np.floor((hi[0] - lo[0]) / cell_size)) + 1, 1)
    ny = max(int(np.floor((hi[1] - lo[1]) / cell_size)) + 1, 1)
    ix = np.clip(((pts[:, 0] - lo[0]) / cell_size).astype(int), 0, nx - 1)
    iy = np.clip(((pts[:, 1] - lo[1]) / cell_size).astype(int), 0, ny - 1)

    heights = np.full((nx, ny), np.inf)
    np.minimum.at(heights, (ix, iy), pts[:, 2])
    filled = np.isfinite(heights)
    if not filled.all():
        _, (fi, fj) = ndimage.distance_transform_edt(
            ~filled, return_distances=True, return_indices=True
        )
        heights = heights[fi, fj]

    # cell centers: re-rasterized vertices fall one-per-cell, keeping heights fixed
    cx = lo[0] + (np.arange(nx) + 0.5) * cell_size
    cy = lo[1] + (np.arange(ny) + 0.5) * cell_size
    gx, gy = np.meshgrid(cx, cy, indexing="ij")
    vertices = np.column_stack([gx.ravel(), gy.ravel(), heights.ravel()])

    tris = []
    for i in range(nx - 1):
        for j in range(ny - 1):
            v00 = i * ny + j
            v10 = (i + 1) * ny + j
            v01 = i * ny + j + 1
            v11 = (i + 1) * ny + j + 1
            tris.append((v00, v10, v11))
            tris.append((v00, v11, v01))
    triangles = np.asarray(tris, dtype=np.int64).reshape(-1, 3)
    return TriangleMesh(vertices, triangles)


def save_obj(path: str | Path, mesh: TriangleMesh) -> None:
    """ASCII Wavefront OBJ; per-vertex colors as extended 'v x y z r g b' lines."""
    lines = []
    for i, v in enumerate(mesh.vertices):
        if mesh.colors is not None:
            c = mesh.colors[i]
            lines.append(f"v {v[0]:.9g} {v[1]:.9g} {v[2]:.9g} {c[0]:.6g} {c[1]:.6g} {c[2]:.6g}")
        else:
            lines.append(f"v {v[0]:.9g} {v[1]:.9g} {v[2]:.9g}")
    for t in mesh.triangles:
        lines.append(f"f {t[0] + 1} {t[1] + 1} {t[2] + 1}")
    Path(path).write_text("\n".join(lines) + "\n")


def load_obj(path: str | Path) -> TriangleMesh:
    vertices = []
    colors = []
    triangles = []
    for line in Path(path).read_text().splitlines():
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "v":
            vals = [float(x) for x in parts[1:]]
            vertices.append(vals[:3])
            if len(vals) >= 6:
                colors.append(vals[3:6])
        elif parts[0] == "f":
            idx = [int(p.split("/")[0]) - 1 for p in parts[1:4]]
            triangles.append(idx)
    color_arr = np.asarray(colors) if len(colors) == len(vertices) and colors else None
    return TriangleMesh(np.asarray(vertices), np.asarray(triangles, dtype=np.int64), color_arr)
