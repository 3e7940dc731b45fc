"""Metric depth calibration and point-cloud unprojection.

A raw (up-to-scale) depth sequence is calibrated against a single metric
reference frame by a robust scale/shift fit, then unprojected into camera-frame
point clouds with pinhole intrinsics.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DegenerateDepth, EmptyOverlap, NegativeScale

DEPTH_MAGIC = b"PWDM"

MIN_OVERLAP = 10
HUBER_EFFICIENCY = 1.345
MAD_SCALE = 1.4826
IRLS_TOL = 1e-8
IRLS_MAX_ITERS = 50


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")


@dataclass
class DepthMap:
    """Per-pixel depth in meters (or arbitrary units before calibration)."""

    values: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.values.shape != self.mask.shape or self.values.ndim != 2:
            raise ValueError("values and mask must share a 2-D shape")
        valid = self.values[self.mask]
        if valid.size and (not np.all(np.isfinite(valid)) or np.any(valid <= 0)):
            raise ValueError("valid depths must be finite and > 0")

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True)
class CalibrationResult:
    alpha: float
    beta: float
    inlier_count: int
    final_residual: float
    residual_history: tuple = field(default=(), compare=False)

    def __post_init__(self):
        if self.alpha <= 0:
            raise ValueError("alpha must be positive")


@dataclass
class PointCloud:
    points: np.ndarray
    colors: np.ndarray | None = None

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        if not np.all(np.isfinite(self.points)):
            raise ValueError("point cloud contains non-finite coordinates")
        if self.colors is not None:
            self.colors = np.asarray(self.colors, dtype=np.float64).reshape(-1, 3)

    def __len__(self) -> int:
        return len(self.points)


def _solve_weighted(raw, ref, w):
    # 2x2 weighted normal equations for alpha*raw + beta ~ ref
    sw = w.sum()
    sx = (w * raw).sum()
    sxx = (w * raw * raw).sum()
    sy = (w * ref).sum()
    sxy = (w * raw * ref).sum()
    det = sw * sxx - sx * sx
    if abs(det) < 1e-300:
        raise DegenerateDepth("zero variance in raw depth over the valid set")
    alpha = (sw * sxy - sx * sy) / det
    beta = (sxx * sy - sx * sxy) / det
    return alpha, beta


def fit_scale_shift(raw: DepthMap, reference: DepthMap) -> CalibrationResult:
    """Robust scale/shift fit via IRLS with Huber weights.

    Minimizes sum_p w_p (alpha*raw(p) + beta - ref(p))^2 over the jointly
    valid pixel set, reweighting with w_p = min(1, delta/|r_p|) where delta is
    the 95%-efficiency Huber threshold on MAD-scaled residuals.
    """
    if raw.values.shape != reference.values.shape:
        raise ValueError("raw and reference maps must share dimensions")
    omega = raw.mask & reference.mask
    if omega.sum() < MIN_OVERLAP:
        raise EmptyOverlap(f"need >= {MIN_OVERLAP} jointly valid pixels, got {omega.sum()}")
    x = raw.values[omega]
    y = reference.values[omega]
    if np.ptp(x) == 0.0:
        raise DegenerateDepth("raw depth constant over the valid set")

    w = np.ones_like(x)
    alpha, beta = _solve_weighted(x, y, w)
    history = []
    delta = np.inf
    for _ in range(IRLS_MAX_ITERS):
        r = alpha * x + beta - y
        mad = np.median(np.abs(r - np.median(r)))
        delta = HUBER_EFFICIENCY * MAD_SCALE * mad
        if delta > 0:
            absr = np.abs(r)
            w = np.minimum(1.0, delta / np.maximum(absr, 1e-300))
        else:
            w = np.ones_like(x)
        history.append(float(np.sqrt((w * r * r).sum() / w.sum())))
        a_new, b_new = _solve_weighted(x, y, w)
        change = max(abs(a_new - alpha), abs(b_new - beta))
        scale = max(abs(alpha), abs(beta), 1e-12)
        alpha, beta = a_new, b_new
        if change / scale < IRLS_TOL:
            break

    if alpha <= 0:
        raise NegativeScale(f"fitted alpha = {alpha:.6g}")
    r = alpha * x + beta - y
    robust_rms = float(np.sqrt((w * r * r).sum() / w.sum()))
    history.append(robust_rms)
    inliers = int(np.sum(np.abs(r) <= delta)) if np.isfinite(delta) and delta > 0 else len(r)
    return CalibrationResult(float(alpha), float(beta), inliers, robust_rms, tuple(history))


def apply_calibration(seq: list[DepthMap], calib: CalibrationResult) -> list[DepthMap]:
    """Applies alpha*d + beta to every valid pixel; non-positive results are invalidated."""
    out = []
    for dm in seq:
        values = calib.alpha * dm.values + calib.beta
        mask = dm.mask & (values > 0)
        values = np.where(mask, values, 0.0)
        out.append(DepthMap(values, mask))
    return out


def unproject(depth: DepthMap, k: CameraIntrinsics) -> PointCloud:
    """Unprojects valid pixels to camera-frame 3-D points."""
    v, u = np.nonzero(depth.mask)
    d = depth.values[v, u]
    x = d * (u - k.cx) / k.fx
    y = d * (v - k.cy) / k.fy
    return PointCloud(np.column_stack([x, y, d]))


def forward_project(points: np.ndarray, k: CameraIntrinsics) -> np.ndarray:
    """Projects camera-frame points back to (u, v, depth) rows."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    d = pts[:, 2]
    u = pts[:, 0] * k.fx / d + k.cx
    v = pts[:, 1] * k.fy / d + k.cy
    return np.column_stack([u, v, d])


def save_depth(path: str | Path, depth: DepthMap) -> None:
    """Writes the PWDM binary container (f32 LE row-major + mask bytes)."""
    with open(path, "wb") as f:
        f.write(DEPTH_MAGIC)
        f.write(struct.pack("<II", depth.width, depth.height))
        f.write(depth.values.astype("<f4").tobytes())
        f.write(depth.mask.astype(np.uint8).tobytes())


def load_depth(path: str | Path) -> DepthMap:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != DEPTH_MAGIC:
            raise ValueError(f"{path}: bad magic {magic!r}, expected {DEPTH_MAGIC!r}")
        width, height = struct.unpack("<II", f.read(8))
        n = width * height
        values = np.frombuffer(f.read(4 * n), dtype="<f4").astype(np.float64)
        mask = np.frombuffer(f.read(n), dtype=np.uint8).astype(bool)
    values = values.reshape(height, width)
    mask = mask.reshape(height, width)
    values = np.where(mask, values, 0.0)
    return DepthMap(values, mask)
