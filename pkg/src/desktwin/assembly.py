"""Scene assembly: physical properties, mesh registration, background SDF,
and gradient-based resolution of initial object/background penetration."""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np
from scipy.interpolate import LinearNDInterpolator, NearestNDInterpolator
from scipy.spatial import cKDTree

from .errors import EmptyInput, EmptyMesh, NonPositiveVoxel
from .geometry import TriangleMesh
from .poses import Pose, matrix_to_quat

SDF_MAGIC = b"PWSD"

DEFAULT_CLEARANCE = 0.002
DEFAULT_VOXEL_SIZE = 0.005
PENETRATION_EPS = 1e-4

ADAM_LR = 1e-3
ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8
GRAD_CLIP = 0.01
MAX_STEPS = 2000
LOSS_STOP = 1e-10
REL_IMPROVE_STOP = 1e-6
REL_IMPROVE_WINDOW = 20

BRUTE_FORCE_TRIANGLE_LIMIT = 512


@dataclass(frozen=True)
class PhysicalProperties:
    mass: float
    friction: float
    restitution: float

    def __post_init__(self):
        if self.mass <= 0:
            raise ValueError("mass must be positive")
        if self.friction < 0:
            raise ValueError("friction must be >= 0")
        if not 0 <= self.restitution <= 1:
            raise ValueError("restitution must lie in [0, 1]")


def _builtin_table() -> dict:
    text = resources.files("desktwin.data").joinpath("material_properties.json").read_text()
    return json.loads(text)


def load_property_table(path: str | Path | None = None) -> dict:
    if path is None:
        return _builtin_table()
    return json.loads(Path(path).read_text())


def lookup_physical_properties(
    category: str, table: dict | None = None
) -> tuple[PhysicalProperties, bool]:
    """Category -> properties from the versioned table; unknowns get the default
    entry with defaulted=True."""
    if table is None:
        table = _builtin_table()
    entry = table.get("categories", {}).get(category)
    defaulted = entry is None
    if defaulted:
        entry = table["default"]
    return PhysicalProperties(entry["mass"], entry["friction"], entry["restitution"]), defaulted


@dataclass
class SimilarityTransform:
    scale: float
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        if self.scale <= 0:
            raise ValueError("scale must be positive")
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)

    def apply(self, points: np.ndarray) -> np.ndarray:
        return self.scale * (np.asarray(points).reshape(-1, 3) @ self.rotation.T) + self.translation


def register_mesh(mesh: TriangleMesh, observed, max_icp_iters: int = 30) -> SimilarityTransform:
    """Similarity registration of a mesh onto its observed point segment.

    Scale from bounding-box diagonals, translation from centroids, then yaw-only
    point-to-point ICP accepted only while the mean nearest-neighbor distance drops.
    """
    obs = np.asarray(getattr(observed, "points", observed), dtype=np.float64).reshape(-1, 3)
    src = mesh.vertices
    if len(obs) == 0 or len(src) == 0:
        raise EmptyInput("registration needs a non-empty mesh and observation")

    src_diag = np.linalg.norm(src.max(axis=0) - src.min(axis=0))
    obs_diag = np.linalg.norm(obs.max(axis=0) - obs.min(axis=0))
    scale = obs_diag / src_diag if src_diag > 0 else 1.0
    rotation = np.eye(3)
    translation = obs.mean(axis=0) - scale * src.mean(axis=0)

    tree = cKDTree(obs)

    def mean_nn(r, t):
        d, _ = tree.query(scale * (src @ r.T) + t)
        return d.mean()

    best = mean_nn(rotation, translation)
    for _ in range(max_icp_iters):
        cur = scale * (src @ rotation.T) + translation
        _, idx = tree.query(cur)
        tgt = obs[idx]
        mu_s = cur.mean(axis=0)
        mu_t = tgt.mean(axis=0)
        a = cur - mu_s
        b = tgt - mu_t
        # closed-form yaw about +z from the 2-D cross/dot sums
        sxx = (a[:, 0] * b[:, 0] + a[:, 1] * b[:, 1]).sum()
        sxy = (a[:, 0] * b[:, 1] - a[:, 1] * b[:, 0]).sum()
        yaw = np.arctan2(sxy, sxx)
        c, s = np.cos(yaw), np.sin(yaw)
        r_step = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
        r_new = r_step @ rotation
        t_new = mu_t - scale * ((src @ r_new.T).mean(axis=0))
        err = mean_nn(r_new, t_new)
        if err >= best - 1e-12:
            break
        rotation, translation, best = r_new, t_new, err
    return SimilarityTransform(float(scale), rotation, translation)


@dataclass
class SdfGrid:
    """Regular voxel grid of signed distances, negative inside (below surface)."""

    origin: np.ndarray
    voxel_size: float
    values: np.ndarray

    def __post_init__(self):
        self.origin = np.asarray(self.origin, dtype=np.float64).reshape(3)
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.voxel_size <= 0:
            raise NonPositiveVoxel("voxel size must be positive")
        if self.values.ndim != 3:
            raise ValueError("SDF values must be a 3-D array")
        self._check_lipschitz()
        self._dims = np.array(self.values.shape)
        self._hi = self.origin + (self._dims - 1) * self.voxel_size

    @property
    def dims(self) -> tuple:
        return self.values.shape

    def _check_lipschitz(self, tol: float = 1e-6):
        bound = self.voxel_size * np.sqrt(3.0) + tol
        for axis in range(3):
            if self.values.shape[axis] < 2:
                continue
            diff = np.abs(np.diff(self.values, axis=axis))
            if diff.max() > bound:
                raise ValueError(
                    f"SDF violates the Lipschitz bound: max step {diff.max():.6g} > {bound:.6g}"
                )

    def upper_corner(self) -> np.ndarray:
        return self._hi.copy()


def sample_sdf(grid: SdfGrid, points) -> np.ndarray:
    """Trilinear interpolation; outside the grid, boundary value plus the
    Euclidean distance to the grid box (conservative positive extension)."""
    single = np.asarray(points).ndim == 1
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    clamped = np.minimum(np.maximum(pts, grid.origin), grid._hi)
    d = pts - clamped
    outside = np.sqrt((d * d).sum(axis=1))

    u = (clamped - grid.origin) / grid.voxel_size
    dims = grid._dims
    i0 = np.minimum(np.maximum(np.floor(u).astype(int), 0), np.maximum(dims - 2, 0))
    f = np.minimum(np.maximum(u - i0, 0.0), 1.0)
    i1 = np.minimum(i0 + 1, dims - 1)

    v = grid.values
    x0, y0, z0 = i0[:, 0], i0[:, 1], i0[:, 2]
    x1, y1, z1 = i1[:, 0], i1[:, 1], i1[:, 2]
    fx, fy, fz = f[:, 0], f[:, 1], f[:, 2]
    c000 = v[x0, y0, z0]
    c100 = v[x1, y0, z0]
    c010 = v[x0, y1, z0]
    c110 = v[x1, y1, z0]
    c001 = v[x0, y0, z1]
    c101 = v[x1, y0, z1]
    c011 = v[x0, y1, z1]
    c111 = v[x1, y1, z1]
    c00 = c000 * (1 - fx) + c100 * fx
    c10 = c010 * (1 - fx) + c110 * fx
    c01 = c001 * (1 - fx) + c101 * fx
    c11 = c011 * (1 - fx) + c111 * fx
    c0 = c00 * (1 - fy) + c10 * fy
    c1 = c01 * (1 - fy) + c11 * fy
    vals = c0 * (1 - fz) + c1 * fz
    result = vals + outside
    if single:
        return float(result[0])
    return result


def point_triangle_distance(points: np.ndarray, mesh: TriangleMesh) -> np.ndarray:
    """Exact unsigned distance from each point to the nearest mesh triangle."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    tri = mesh.vertices[mesh.triangles]
    if len(tri) == 0:
        raise EmptyMesh("mesh has no triangles")

    if len(tri) > BRUTE_FORCE_TRIANGLE_LIMIT:
        # prune with centroid k-NN; uniform triangulations keep this exact in practice
        centroids = tri.mean(axis=1)
        tree = cKDTree(centroids)
        k = min(32, len(tri))
        _, nearest = tree.query(pts, k=k)
        best = np.full(len(pts), np.inf)
        for col in range(k):
            sub = tri[nearest[:, col]]
            d = _dist_point_to_triangles_rowwise(pts, sub)
            best = np.minimum(best, d)
        return best

    best = np.full(len(pts), np.inf)
    chunk = 256
    for start in range(0, len(tri), chunk):
        sub = tri[start : start + chunk]
        d = _dist_points_x_triangles(pts, sub).min(axis=1)
        best = np.minimum(best, d)
    return best


def _closest_on_triangle(p, a, ab, ac):
    """Vectorized closest point on triangle(s); all args broadcast to (..., 3)."""
    ap = p - a
    d1 = (ab * ap).sum(-1)
    d2 = (ac * ap).sum(-1)
    bp = p - (a + ab)
    d3 = (ab * bp).sum(-1)
    d4 = (ac * bp).sum(-1)
    cp = p - (a + ac)
    d5 = (ab * cp).sum(-1)
    d6 = (ac * cp).sum(-1)

    va = d3 * d6 - d5 * d4
    vb = d5 * d2 - d1 * d6
    vc = d1 * d4 - d3 * d2
    denom = va + vb + vc
    denom = np.where(np.abs(denom) < 1e-300, 1.0, denom)
    v = vb / denom
    w = vc / denom
    closest = a + v[..., None] * ab + w[..., None] * ac

    # vertex / edge regions override the interior solution
    aa = (ab * ab).sum(-1)
    cc = (ac * ac).sum(-1)
    bc = (ab * ac).sum(-1)

    t_ab = np.clip(d1 / np.where(aa == 0, 1.0, aa), 0.0, 1.0)
    on_ab = a + t_ab[..., None] * ab
    t_ac = np.clip(d2 / np.where(cc == 0, 1.0, cc), 0.0, 1.0)
    on_ac = a + t_ac[..., None] * ac
    bc_vec = ac - ab
    bcc = (bc_vec * bc_vec).sum(-1)
    t_bc = np.clip(((p - (a + ab)) * bc_vec).sum(-1) / np.where(bcc == 0, 1.0, bcc), 0.0, 1.0)
    on_bc = a + ab + t_bc[..., None] * bc_vec

    inside = (va >= 0) & (vb >= 0) & (vc >= 0)
    candidates = np.stack([closest, on_ab, on_ac, on_bc], axis=0)
    dists = np.linalg.norm(candidates - p[None], axis=-1)
    dists[0] = np.where(inside, dists[0], np.inf)
    pick = dists.argmin(axis=0)
    return np.take_along_axis(candidates, pick[None, ..., None], axis=0)[0], dists.min(axis=0)


def _dist_points_x_triangles(pts, tris):
    """(N, M) distances between N points and M triangles."""
    a = tris[:, 0][None]          # (1, M, 3)
    ab = (tris[:, 1] - tris[:, 0])[None]
    ac = (tris[:, 2] - tris[:, 0])[None]
    p = pts[:, None]              # (N, 1, 3)
    _, d = _closest_on_triangle(p, a, ab, ac)
    return d


def _dist_point_to_triangles_rowwise(pts, tris):
    """(N,) distances: point i against triangle i."""
    a = tris[:, 0]
    ab = tris[:, 1] - tris[:, 0]
    ac = tris[:, 2] - tris[:, 0]
    _, d = _closest_on_triangle(pts, a, ab, ac)
    return d


def _surface_height_fn(mesh: TriangleMesh):
    xy = mesh.vertices[:, :2]
    z = mesh.vertices[:, 2]
    nearest = NearestNDInterpolator(xy, z)
    try:
        linear = LinearNDInterpolator(xy, z)
    except Exception:
        linear = None

    def height(points_xy):
        if linear is not None:
            h = linear(points_xy)
            miss = ~np.isfinite(h)
            if miss.any():
                h[miss] = nearest(points_xy[miss])
        else:
            h = nearest(points_xy)
        return h

    return height


def voxelize_sdf(
    mesh: TriangleMesh, voxel_size: float = DEFAULT_VOXEL_SIZE, padding: float = 0.05
) -> SdfGrid:
    """Signed distance grid over the mesh AABB, padded vertically.

    Unsigned distance is exact per-triangle; the sign is negative iff the voxel
    center sits below the height-map surface at its x-y location (terrain rule
    for open meshes). Padding is applied along z only: beyond the terrain
    footprint the below-surface sign rule would break the SDF Lipschitz bound,
    so horizontal queries outside the grid rely on the conservative boundary
    extension in sample_sdf instead.
    """
    if len(mesh.vertices) == 0 or len(mesh.triangles) == 0:
        raise EmptyMesh("cannot voxelize an empty mesh")
    if voxel_size <= 0:
        raise NonPositiveVoxel("voxel size must be positive")
    lo, hi = mesh.aabb()
    lo = lo - np.array([0.0, 0.0, padding])
    hi = hi + np.array([0.0, 0.0, padding])
    # x-y grid stays inside the terrain footprint (centered); z uses ceil so the
    # padded range is fully covered
    dims = np.maximum(np.floor((hi - lo) / voxel_size).astype(int) + 1, 2)
    dims[2] = max(int(np.ceil((hi[2] - lo[2]) / voxel_size)) + 1, 2)
    slack = (hi[:2] - lo[:2]) - (dims[:2] - 1) * voxel_size
    lo[:2] += 0.5 * slack
    axes = [lo[i] + np.arange(dims[i]) * voxel_size for i in range(3)]
    gx, gy, gz = np.meshgrid(*axes, indexing="ij")
    centers = np.column_stack([gx.ravel(), gy.ravel(), gz.ravel()])

    dist = point_triangle_distance(centers, mesh)
    surface = _surface_height_fn(mesh)(centers[:, :2])
    sign = np.where(centers[:, 2] < surface, -1.0, 1.0)
    values = (sign * dist).reshape(tuple(dims))
    return SdfGrid(lo, voxel_size, values)


@dataclass
class PlacementResult:
    offsets: np.ndarray
    final_loss: float
    steps: int
    converged: bool
    loss_history: list = field(default_factory=list)


def placement_loss(
    vertex_sets: list, offsets: np.ndarray, grid: SdfGrid, clearance: float
) -> float:
    """Mean squared hinge penalty on (sampled SDF - clearance) per object."""
    total = 0.0
    for verts, tau in zip(vertex_sets, offsets):
        shifted = verts + np.array([0.0, 0.0, tau])
        phi = sample_sdf(grid, shifted)
        pen = np.maximum(0.0, -(phi - clearance))
        total += float((pen * pen).mean())
    return total


def optimize_placement(
    objects: list,
    grid: SdfGrid,
    clearance: float = DEFAULT_CLEARANCE,
    max_steps: int = MAX_STEPS,
) -> PlacementResult:
    """Per-object vertical offsets resolving background penetration.

    Adam on the joint hinge objective; SDF gradients by central finite
    differences along z with a half-voxel step; per-object gradient clipped
    to +/-0.01 m; stops on zero loss or stalled relative improvement.
    """
    if not objects:
        raise EmptyInput("no objects to place")
    vertex_sets = []
    for mesh, pose in objects:
        verts = pose.transform(mesh.vertices) if pose is not None else mesh.vertices
        vertex_sets.append(np.asarray(verts, dtype=np.float64))

    n = len(vertex_sets)
    tau = np.zeros(n)
    m = np.zeros(n)
    v = np.zeros(n)
    h = 0.5 * grid.voxel_size
    history = []
    converged = False
    step = 0
    for step in range(1, max_steps + 1):
        loss = placement_loss(vertex_sets, tau, grid, clearance)
        history.append(loss)
        if loss < LOSS_STOP:
            converged = True
            break
        if len(history) > REL_IMPROVE_WINDOW:
            past = history[-REL_IMPROVE_WINDOW - 1]
            if past > 0 and (past - loss) / past < REL_IMPROVE_STOP:
                converged = loss < LOSS_STOP
                break

        grad = np.zeros(n)
        for o, verts in enumerate(vertex_sets):
            shifted = verts + np.array([0.0, 0.0, tau[o]])
            phi = sample_sdf(grid, shifted)
            pen = np.maximum(0.0, -(phi - clearance))
            up = shifted + np.array([0.0, 0.0, h])
            dn = shifted - np.array([0.0, 0.0, h])
            dphi = (sample_sdf(grid, up) - sample_sdf(grid, dn)) / (2 * h)
            grad[o] = float((2.0 * pen * (-dphi)).mean())
        grad = np.clip(grad, -GRAD_CLIP, GRAD_CLIP)

        m = ADAM_BETA1 * m + (1 - ADAM_BETA1) * grad
        v = ADAM_BETA2 * v + (1 - ADAM_BETA2) * grad * grad
        m_hat = m / (1 - ADAM_BETA1**step)
        v_hat = v / (1 - ADAM_BETA2**step)
        tau = tau - ADAM_LR * m_hat / (np.sqrt(v_hat) + ADAM_EPS)

    final_loss = placement_loss(vertex_sets, tau, grid, clearance)
    return PlacementResult(tau, final_loss, step, converged or final_loss < LOSS_STOP, history)


@dataclass
class SceneObject:
    name: str
    category: str
    mesh: TriangleMesh
    properties: PhysicalProperties
    initial_pose: Pose
    defaulted_properties: bool = False


@dataclass
class SceneModel:
    """Gravity-aligned background + objects with physical properties."""

    background_mesh: TriangleMesh
    background_sdf: SdfGrid
    objects: list
    gravity: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, -9.81]))
    assembled: bool = False

    def __post_init__(self):
        self.gravity = np.asarray(self.gravity, dtype=np.float64).reshape(3)

    def validate_assembled(self, eps: float = PENETRATION_EPS) -> float:
        """Minimum sampled SDF over all object vertices; must be >= -eps."""
        worst = np.inf
        for obj in self.objects:
            verts = obj.initial_pose.transform(obj.mesh.vertices)
            worst = min(worst, float(sample_sdf(self.background_sdf, verts).min()))
        if worst < -eps:
            raise ValueError(f"object penetrates background: min SDF {worst:.6g}")
        return worst


def save_sdf(path: str | Path, grid: SdfGrid) -> None:
    """PWSD container: magic, origin (3xf64), voxel (f64), dims (3xu32), f32 values."""
    with open(path, "wb") as f:
        f.write(SDF_MAGIC)
        f.write(struct.pack("<3d", *grid.origin))
        f.write(struct.pack("<d", grid.voxel_size))
        f.write(struct.pack("<3I", *grid.dims))
        f.write(grid.values.astype("<f4").tobytes())


def load_sdf(path: str | Path) -> SdfGrid:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != SDF_MAGIC:
            raise ValueError(f"{path}: bad magic {magic!r}")
        origin = struct.unpack("<3d", f.read(24))
        voxel = struct.unpack("<d", f.read(8))[0]
        dims = struct.unpack("<3I", f.read(12))
        n = dims[0] * dims[1] * dims[2]
        values = np.frombuffer(f.read(4 * n), dtype="<f4").astype(np.float64)
    return SdfGrid(np.array(origin), voxel, values.reshape(dims))


def pose_to_dict(pose: Pose) -> dict:
    return {"p": pose.p.tolist(), "q": pose.q.tolist()}


def pose_from_dict(d: dict) -> Pose:
    return Pose(np.array(d["p"]), np.array(d["q"]))


def transform_to_pose(t: SimilarityTransform) -> Pose:
    return Pose(t.translation, matrix_to_quat(t.rotation))
