"""Pose and quaternion math, pose trajectories, and the analytic baseline planner.

Quaternions are (w, x, y, z), sign-canonicalized to w >= 0 on construction.
Rotation composition is left-applied: q_new = q_rot * q_old.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import EmptyMesh
from .geometry import TriangleMesh

DEFAULT_PRE_GRASP_OFFSET = 0.10
DEFAULT_GRIP_DEPTH = 0.02
MAX_FRAME_STEP = 0.2


def quat_normalize(q) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64).reshape(4)
    q = q / np.sqrt(q @ q)
    if q[0] < 0 or (q[0] == 0 and q[np.argmax(np.abs(q))] < 0):
        q = -q
    return q


def quat_mul(a, b) -> np.ndarray:
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ]
    )


def quat_conj(q) -> np.ndarray:
    return np.array([q[0], -q[1], -q[2], -q[3]])


def quat_rotate(q, v) -> np.ndarray:
    """Rotates vector v by unit quaternion q."""
    w = q[0]
    u = np.asarray(q[1:], dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    t = 2.0 * np.cross(u, v)
    return v + w * t + np.cross(u, t)


def quat_to_matrix(q) -> np.ndarray:
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def matrix_to_quat(r) -> np.ndarray:
    r = np.asarray(r, dtype=np.float64)
    tr = np.trace(r)
    if tr > 0:
        s = np.sqrt(tr + 1.0) * 2
        q = np.array(
            [0.25 * s, (r[2, 1] - r[1, 2]) / s, (r[0, 2] - r[2, 0]) / s, (r[1, 0] - r[0, 1]) / s]
        )
    else:
        i = int(np.argmax(np.diag(r)))
        j, k = (i + 1) % 3, (i + 2) % 3
        s = np.sqrt(max(r[i, i] - r[j, j] - r[k, k] + 1.0, 0.0)) * 2
        q = np.empty(4)
        q[0] = (r[k, j] - r[j, k]) / s
        q[1 + i] = 0.25 * s
        q[1 + j] = (r[j, i] + r[i, j]) / s
        q[1 + k] = (r[k, i] + r[i, k]) / s
    return quat_normalize(q)


def quat_exp(omega) -> np.ndarray:
    """Unit quaternion of the rotation vector omega (Taylor-safe near zero)."""
    omega = np.asarray(omega, dtype=np.float64).reshape(3)
    angle = np.linalg.norm(omega)
    half = 0.5 * angle
    if angle < 1e-12:
        # sin(half)/angle ~ 0.5 - half^2/12
        k = 0.5 - half * half / 12.0
    else:
        k = np.sin(half) / angle
    return quat_normalize(np.array([np.cos(half), *(k * omega)]))


def quat_distance(q1, q2) -> float:
    """Sign-minimized Euclidean quaternion distance (double-cover safe)."""
    q1 = np.asarray(q1, dtype=np.float64)
    q2 = np.asarray(q2, dtype=np.float64)
    return float(min(np.linalg.norm(q1 - q2), np.linalg.norm(q1 + q2)))


def slerp(q1, q2, s: float) -> np.ndarray:
    """Shortest-arc spherical interpolation between unit quaternions."""
    q1 = np.asarray(q1, dtype=np.float64).copy()
    q2 = np.asarray(q2, dtype=np.float64).copy()
    dot = float(q1 @ q2)
    if dot < 0:
        q2 = -q2
        dot = -dot
    dot = min(dot, 1.0)
    if dot > 1.0 - 1e-12:
        return quat_normalize((1 - s) * q1 + s * q2)
    theta = np.arccos(dot)
    return quat_normalize(
        (np.sin((1 - s) * theta) * q1 + np.sin(s * theta) * q2) / np.sin(theta)
    )


@dataclass
class Pose:
    p: np.ndarray
    q: np.ndarray

    def __post_init__(self):
        self.p = np.asarray(self.p, dtype=np.float64).reshape(3)
        self.q = quat_normalize(self.q)

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.zeros(3), np.array([1.0, 0, 0, 0]))

    def compose(self, other: "Pose") -> "Pose":
        """Rigid composition self * other (apply other first, then self)."""
        return Pose(self.p + quat_rotate(self.q, other.p), quat_mul(self.q, other.q))

    def inverse(self) -> "Pose":
        qi = quat_conj(self.q)
        return Pose(-quat_rotate(qi, self.p), qi)

    def transform(self, points: np.ndarray) -> np.ndarray:
        r = quat_to_matrix(self.q)
        return np.asarray(points).reshape(-1, 3) @ r.T + self.p

    def flat(self) -> np.ndarray:
        return np.concatenate([self.p, self.q])

    def copy(self) -> "Pose":
        return Pose(self.p.copy(), self.q.copy())


@dataclass
class PoseTrajectory:
    """Time-ordered object poses, the tracking target for policy learning."""

    frames: list  # (frame_index, Pose)
    max_step: float = MAX_FRAME_STEP

    def __post_init__(self):
        if len(self.frames) < 2:
            raise ValueError("trajectory needs >= 2 frames")
        t_prev = None
        p_prev = None
        for t, pose in self.frames:
            if t_prev is not None:
                if t <= t_prev:
                    raise ValueError("frame indices must be strictly increasing")
                if np.linalg.norm(pose.p - p_prev) > self.max_step:
                    raise ValueError("consecutive positions exceed the velocity bound")
            t_prev, p_prev = t, pose.p

    def __len__(self) -> int:
        return len(self.frames)

    def pose(self, i: int) -> Pose:
        return self.frames[i][1]

    @property
    def poses(self) -> list:
        return [f[1] for f in self.frames]


@dataclass
class BaselinePlan:
    """Scripted grasp-approach-track-release end-effector schedule."""

    grasp: Pose
    pre_grasp_offset: float
    planned: list  # per-step Pose
    gripper_schedule: list  # per-step closed flag
    target_frame_index: list = field(default_factory=list)
    close_step: int = 0

    def __post_init__(self):
        if self.pre_grasp_offset < 0:
            raise ValueError("pre-grasp offset must be >= 0")
        if len(self.planned) != len(self.gripper_schedule):
            raise ValueError("planned poses and gripper schedule must align")

    def __len__(self) -> int:
        return len(self.planned)


TOP_DOWN_QUAT = quat_normalize([0.0, 1.0, 0.0, 0.0])  # gripper z points down


def propose_grasp(
    object_mesh: TriangleMesh,
    object_pose: Pose,
    grip_depth: float = DEFAULT_GRIP_DEPTH,
    pre_grasp_offset: float = DEFAULT_PRE_GRASP_OFFSET,
) -> tuple[Pose, float]:
    """Top-down grasp at the world AABB centroid, yaw on the shorter horizontal axis."""
    if len(object_mesh.vertices) == 0:
        raise EmptyMesh("cannot propose a grasp for an empty mesh")
    world = object_pose.transform(object_mesh.vertices)
    lo = world.min(axis=0)
    hi = world.max(axis=0)
    center = 0.5 * (lo + hi)
    extent = hi - lo
    pos = np.array([center[0], center[1], hi[2] - grip_depth])
    # closing line along gripper x; align it with the shorter horizontal extent
    yaw = 0.0 if extent[0] <= extent[1] else np.pi / 2
    q = quat_mul(quat_exp([0.0, 0.0, yaw]), TOP_DOWN_QUAT)
    return Pose(pos, q), pre_grasp_offset


def _resample(poses: list, n: int) -> list:
    """Linear position + slerp orientation resampling of a pose path to n steps."""
    if n <= 0:
        return []
    if len(poses) == 1:
        return [poses[0].copy() for _ in range(n)]
    out = []
    m = len(poses) - 1
    for i in range(n):
        s = i / (n - 1) if n > 1 else 0.0
        x = s * m
        j = min(int(np.floor(x)), m - 1)
        f = x - j
        p = (1 - f) * poses[j].p + f * poses[j + 1].p
        q = slerp(poses[j].q, poses[j + 1].q, f)
        out.append(Pose(p, q))
    return out


def make_baseline(
    grasp: Pose,
    d_pre: float,
    target: PoseTrajectory,
    steps_approach: int = 20,
    steps_descend: int = 10,
    steps_track: int | None = None,
    steps_hold: int = 10,
    home: Pose | None = None,
) -> BaselinePlan:
    """Builds the four-phase baseline plan.

    Approach home -> pre-grasp (open), descend to grasp (close at phase end),
    track the target's rigid-attachment transport of the grasp pose (closed),
    then hold the final pose open.
    """
    if home is None:
        home = Pose(grasp.p + np.array([0.0, 0.0, 0.3]), grasp.q)
    pre_grasp = Pose(grasp.p + np.array([0.0, 0.0, d_pre]), grasp.q)
    if steps_track is None:
        steps_track = len(target)

    planned: list[Pose] = []
    schedule: list[bool] = []
    frame_idx: list[int] = []

    approach = _resample([home, pre_grasp], steps_approach)
    planned += approach
    schedule += [False] * len(approach)
    frame_idx += [0] * len(approach)

    descend = _resample([pre_grasp, grasp], steps_descend)
    planned += descend
    schedule += [False] * (len(descend) - 1) + [True]
    frame_idx += [0] * len(descend)
    close_step = len(planned) - 1

    t0_inv = target.pose(0).inverse()
    track_poses = [target.pose(i).compose(t0_inv).compose(grasp) for i in range(len(target))]
    track = _resample(track_poses, steps_track)
    planned += track
    schedule += [True] * len(track)
    n_frames = len(target)
    for i in range(steps_track):
        s = i / (steps_track - 1) if steps_track > 1 else 0.0
        frame_idx.append(int(round(s * (n_frames - 1))))

    final = planned[-1]
    planned += [final.copy() for _ in range(steps_hold)]
    schedule += [False] * steps_hold
    frame_idx += [n_frames - 1] * steps_hold

    return BaselinePlan(grasp, d_pre, planned, schedule, frame_idx, close_step)


def save_trajectory(path: str | Path, traj: PoseTrajectory) -> None:
    """PWTJ line format: frame index, p (3), q (4, w-first) per line."""
    lines = ["# PWTJ"]
    for t, pose in traj.frames:
        vals = " ".join(f"{v:.17g}" for v in pose.flat())
        lines.append(f"{t} {vals}")
    Path(path).write_text("\n".join(lines) + "\n")


def load_trajectory(path: str | Path) -> PoseTrajectory:
    frames = []
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        t = int(parts[0])
        vals = [float(x) for x in parts[1:8]]
        if len(vals) != 7:
            raise ValueError(f"{path}: malformed PWTJ record {line!r}")
        frames.append((t, Pose(vals[:3], vals[3:])))
    return PoseTrajectory(frames)
