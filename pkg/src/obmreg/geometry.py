"""Rigid motions, the point-cloud container and registration error metrics."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

ORTHO_TOL = 1e-9
NORMAL_TOL = 1e-6
DEFAULT_OVERLAP_THRESHOLD = 0.05


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=np.float64, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class PointCloud:
    points: np.ndarray
    normals: np.ndarray | None = None

    def __post_init__(self):
        pts = _frozen(self.points)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise ValueError(f"points must be (N, 3), got {pts.shape}")
        if len(pts) < 1:
            raise ValueError("a point cloud needs at least one point")
        if not np.isfinite(pts).all():
            raise ValueError("point coordinates must be finite")
        object.__setattr__(self, "points", pts)
        if self.normals is not None:
            nrm = _frozen(self.normals)
            if nrm.shape != pts.shape:
                raise ValueError("normals must match points in shape")
            if np.abs(np.linalg.norm(nrm, axis=1) - 1.0).max() > NORMAL_TOL:
                raise ValueError("normals must have unit length")
            object.__setattr__(self, "normals", nrm)

    def __len__(self) -> int:
        return len(self.points)

    def subset(self, idx) -> "PointCloud":
        idx = np.asarray(idx)
        nrm = None if self.normals is None else self.normals[idx]
        return PointCloud(self.points[idx], nrm)

    def centroid(self) -> np.ndarray:
        return self.points.mean(axis=0)


@dataclass(frozen=True, eq=False)
class RigidTransform:
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        R = _frozen(self.rotation)
        t = _frozen(np.reshape(self.translation, -1))
        if R.shape != (3, 3) or t.shape != (3,):
            raise ValueError("rotation must be 3x3 and translation a 3-vector")
        if not (np.isfinite(R).all() and np.isfinite(t).all()):
            raise ValueError("transform entries must be finite")
        if np.abs(R.T @ R - np.eye(3)).max() > ORTHO_TOL:
            raise ValueError("rotation is not orthonormal")
        if abs(np.linalg.det(R) - 1.0) > ORTHO_TOL:
            raise ValueError("rotation must have determinant +1")
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_axis_angle(cls, axis, angle_deg: float, translation=(0.0, 0.0, 0.0)) -> "RigidTransform":
        return cls(axis_angle_matrix(axis, angle_deg), np.asarray(translation, dtype=np.float64))

    @classmethod
    def from_matrix(cls, m) -> "RigidTransform":
        """From a 4x4 homogeneous matrix; the rotation block is re-orthonormalised."""
        m = np.asarray(m, dtype=np.float64)
        if m.shape != (4, 4):
            raise ValueError("expected a 4x4 matrix")
        return cls(orthonormalize(m[:3, :3]), m[:3, 3])

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def apply(self, pts: np.ndarray) -> np.ndarray:
        return np.asarray(pts) @ self.rotation.T + self.translation

    def inverse(self) -> "RigidTransform":
        return invert(self)

    def angle_deg(self) -> float:
        return rotation_angle_deg(self.rotation)

    def __matmul__(self, other: "RigidTransform") -> "RigidTransform":
        return compose(self, other)


def rot_z(deg: float) -> RigidTransform:
    return RigidTransform.from_axis_angle((0.0, 0.0, 1.0), deg)


def axis_angle_matrix(axis, angle_deg: float) -> np.ndarray:
    """Rodrigues' formula."""
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    th = np.deg2rad(angle_deg)
    K = np.array(
        [[0.0, -axis[2], axis[1]], [axis[2], 0.0, -axis[0]], [-axis[1], axis[0], 0.0]]
    )
    return np.eye(3) + np.sin(th) * K + (1.0 - np.cos(th)) * (K @ K)


def orthonormalize(R: np.ndarray) -> np.ndarray:
    u, _, vt = np.linalg.svd(R)
    d = np.sign(np.linalg.det(u @ vt))
    return u @ np.diag([1.0, 1.0, d]) @ vt


def rotation_angle_deg(R: np.ndarray) -> float:
    """Geodesic angle of R in degrees.

    atan2 of the skew and trace parts keeps full precision near 0 and 180,
    where arccos of the trace alone loses about half the digits.
    """
    R = np.asarray(R, dtype=np.float64)
    skew = np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    s = 0.5 * np.linalg.norm(skew)
    c = 0.5 * (np.trace(R) - 1.0)
    return float(np.degrees(np.arctan2(s, c)))


def apply_transform(cloud: PointCloud, xf: RigidTransform) -> PointCloud:
    nrm = None if cloud.normals is None else cloud.normals @ xf.rotation.T
    return PointCloud(xf.apply(cloud.points), nrm)


def compose(a: RigidTransform, b: RigidTransform) -> RigidTransform:
    """The transform that applies ``b`` first, then ``a``."""
    return RigidTransform(a.rotation @ b.rotation, a.rotation @ b.translation + a.translation)


def invert(xf: RigidTransform) -> RigidTransform:
    Rt = xf.rotation.T
    return RigidTransform(Rt, -Rt @ xf.translation)


def euler_zyx_deg(R: np.ndarray) -> np.ndarray:
    """Intrinsic Z-Y-X angles (yaw, pitch, roll) in degrees, R = Rz @ Ry @ Rx."""
    yaw = np.arctan2(R[1, 0], R[0, 0])
    pitch = np.arcsin(np.clip(-R[2, 0], -1.0, 1.0))
    roll = np.arctan2(R[2, 1], R[2, 2])
    return np.degrees(np.array([yaw, pitch, roll]))


@dataclass(frozen=True)
class RegistrationMetrics:
    mae_r: float
    mae_t: float
    mie_r: float
    mie_t: float

    def as_dict(self) -> dict[str, float]:
        return {"mae_r": self.mae_r, "mae_t": self.mae_t, "mie_r": self.mie_r, "mie_t": self.mie_t}


def registration_metrics(pred: RigidTransform, gt: RigidTransform) -> RegistrationMetrics:
    """MAE/MIE rotation (degrees) and translation errors.

    MAE(R) averages the absolute ZYX Euler-angle differences, each wrapped to
    [-180, 180).  MIE(R) is the geodesic angle of R_pred^T R_gt, MIE(t) the
    Euclidean norm of the translation difference.
    """
    mie_r = rotation_angle_deg(pred.rotation.T @ gt.rotation)
    dt = pred.translation - gt.translation
    mie_t = float(np.linalg.norm(dt))
    de = euler_zyx_deg(pred.rotation) - euler_zyx_deg(gt.rotation)
    de = (de + 180.0) % 360.0 - 180.0
    mae_r = float(np.mean(np.abs(de)))
    mae_t = float(np.mean(np.abs(dt)))
    return RegistrationMetrics(mae_r, mae_t, mie_r, mie_t)


def nearest_distances(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Distance from every row of ``a`` to its nearest row of ``b``."""
    d, _ = cKDTree(b).query(a, k=1)
    return d


def overlap_ratio(a: PointCloud, b: PointCloud, threshold: float = DEFAULT_OVERLAP_THRESHOLD) -> float:
    """Fraction of points of ``a`` whose nearest neighbour in ``b`` is within ``threshold``."""
    if threshold <= 0:
        raise ValueError("threshold must be positive")
    pa = a.points if isinstance(a, PointCloud) else np.asarray(a, dtype=np.float64)
    pb = b.points if isinstance(b, PointCloud) else np.asarray(b, dtype=np.float64)
    if len(pa) == 0 or len(pb) == 0:
        raise ValueError("overlap_ratio needs non-empty clouds")
    return float(np.mean(nearest_distances(pa, pb) <= threshold))
