"""Rigid/similarity transforms, closed-form point-set alignment, SE(3) exp/log, metrics."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .sdf import Array

EXHAUSTIVE_NN_LIMIT = 5000


class DegenerateConfiguration(ValueError):
    """Point sets do not determine a unique alignment."""


@dataclass(frozen=True, eq=False)
class Pose:
    rotation: Array
    translation: Array

    def __post_init__(self):
        object.__setattr__(self, "rotation", np.asarray(self.rotation, dtype=float).reshape(3, 3))
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=float).reshape(3))

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.eye(3), np.zeros(3))

    def apply(self, points) -> Array:
        return np.asarray(points, dtype=float) @ self.rotation.T + self.translation

    def compose(self, other: "Pose") -> "Pose":
        """``self ∘ other`` (apply ``other`` first)."""
        return Pose(self.rotation @ other.rotation, self.rotation @ other.translation + self.translation)

    def inverse(self) -> "Pose":
        return Pose(self.rotation.T, -self.rotation.T @ self.translation)

    def orthonormalized(self) -> "Pose":
        U, _, Vt = np.linalg.svd(self.rotation)
        R = U @ np.diag([1.0, 1.0, np.linalg.det(U @ Vt)]) @ Vt
        return Pose(R, self.translation)

    def as_vector(self) -> list[float]:
        """Row-major rotation followed by translation (12 numbers)."""
        return [*self.rotation.ravel().tolist(), *self.translation.tolist()]

    @classmethod
    def from_vector(cls, v) -> "Pose":
        v = np.asarray(v, dtype=float)
        return cls(v[:9].reshape(3, 3), v[9:12])


@dataclass(frozen=True, eq=False)
class SimPose:
    scale: float
    rotation: Array
    translation: Array

    def apply(self, points) -> Array:
        return self.scale * np.asarray(points, dtype=float) @ self.rotation.T + self.translation


@dataclass(frozen=True)
class Twist:
    omega: tuple[float, float, float]
    v: tuple[float, float, float]

    def as_array(self) -> Array:
        return np.concatenate([np.asarray(self.omega, float), np.asarray(self.v, float)])

    @classmethod
    def from_array(cls, xi) -> "Twist":
        xi = np.asarray(xi, dtype=float)
        return cls(tuple(xi[:3]), tuple(xi[3:6]))


def hat(w) -> Array:
    wx, wy, wz = np.asarray(w, dtype=float)
    return np.array([[0.0, -wz, wy], [wz, 0.0, -wx], [-wy, wx, 0.0]])


def _centered(X, Z):
    X = np.asarray(X, dtype=float)
    Z = np.asarray(Z, dtype=float)
    if X.shape != Z.shape or X.ndim != 2 or X.shape[1] != 3:
        raise ValueError("point sets must both be (n, 3)")
    if len(X) < 3:
        raise DegenerateConfiguration("need at least 3 correspondences")
    xm, zm = X.mean(axis=0), Z.mean(axis=0)
    return X - xm, Z - zm, xm, zm


def _rotation_from_cov(H):
    U, S, Vt = np.linalg.svd(H)
    scale = max(S[0], 1e-300)
    if S[1] <= 1e-12 * scale:
        raise DegenerateConfiguration("cross-covariance rank < 2")
    d = np.sign(np.linalg.det(Vt.T @ U.T)) or 1.0
    D = np.diag([1.0, 1.0, d])
    return Vt.T @ D @ U.T, S, D


def arun_fit(X, Z) -> Pose:
    """Least-squares rigid fit ``z_i ≈ R x_i + t`` (SVD with reflection guard)."""
    Xc, Zc, xm, zm = _centered(X, Z)
    R, _, _ = _rotation_from_cov(Xc.T @ Zc)
    return Pose(R, zm - R @ xm)


def umeyama_fit(X, Z) -> SimPose:
    """Least-squares similarity fit ``z_i ≈ s R x_i + t``."""
    Xc, Zc, xm, zm = _centered(X, Z)
    R, S, D = _rotation_from_cov(Xc.T @ Zc)
    var_x = float(np.sum(Xc**2))
    s = float(np.sum(S * np.diag(D)) / var_x)
    return SimPose(s, R, zm - s * R @ xm)


def rigid_residual(pose: Pose, X, Z) -> float:
    return float(np.sum((pose.apply(X) - np.asarray(Z)) ** 2))


def similarity_residual(sp: SimPose, X, Z) -> float:
    return float(np.sum((sp.apply(X) - np.asarray(Z)) ** 2))


def so3_exp(omega) -> Array:
    w = np.asarray(omega, dtype=float)
    th = np.linalg.norm(w)
    K = hat(w)
    if th < 1e-8:
        return np.eye(3) + K + 0.5 * K @ K
    return np.eye(3) + np.sin(th) / th * K + (1 - np.cos(th)) / th**2 * K @ K


def so3_log(R) -> Array:
    R = np.asarray(R, dtype=float)
    c = np.clip((np.trace(R) - 1.0) / 2.0, -1.0, 1.0)
    th = np.arccos(c)
    v = np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    if th < 1e-8:
        return 0.5 * v
    if np.pi - th < 1e-6:
        # near pi the antisymmetric part vanishes; read the axis off R + I
        M = (R + np.eye(3)) / 2.0
        k = int(np.argmax(np.diag(M)))
        axis = M[:, k] / np.sqrt(M[k, k])
        if axis @ v < 0:
            axis = -axis
        return th * axis
    return th / (2.0 * np.sin(th)) * v


def _left_jacobian(omega) -> Array:
    th = np.linalg.norm(omega)
    K = hat(omega)
    if th < 1e-8:
        return np.eye(3) + 0.5 * K + K @ K / 6.0
    return np.eye(3) + (1 - np.cos(th)) / th**2 * K + (th - np.sin(th)) / th**3 * K @ K


def exp_se3(xi) -> Pose:
    """Exponential map; accepts a :class:`Twist` or a 6-vector ``(omega, v)``."""
    xi = xi.as_array() if isinstance(xi, Twist) else np.asarray(xi, dtype=float)
    return Pose(so3_exp(xi[:3]), _left_jacobian(xi[:3]) @ xi[3:])


def log_se3(pose: Pose) -> Twist:
    w = so3_log(pose.rotation)
    v = np.linalg.solve(_left_jacobian(w), pose.translation)
    return Twist.from_array(np.concatenate([w, v]))


def rotation_error_deg(Ra, Rb) -> float:
    c = (np.trace(np.asarray(Ra).T @ np.asarray(Rb)) - 1.0) / 2.0
    return float(np.degrees(np.arccos(np.clip(c, -1.0, 1.0))))


def rotation_about(axis, angle: float) -> Array:
    a = np.asarray(axis, dtype=float)
    return so3_exp(a / np.linalg.norm(a) * angle)


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------


def _nn_distances(A: Array, B: Array, norm: str = "L2") -> Array:
    """Distance from every row of ``A`` to its nearest row of ``B``."""
    p = 1 if norm == "L1" else 2
    if len(A) * len(B) <= EXHAUSTIVE_NN_LIMIT**2 and max(len(A), len(B)) <= EXHAUSTIVE_NN_LIMIT:
        out = np.empty(len(A))
        step = max(1, 4_000_000 // max(len(B), 1))
        for s in range(0, len(A), step):
            diff = A[s : s + step, None, :] - B[None, :, :]
            d = np.abs(diff).sum(-1) if p == 1 else np.sqrt((diff**2).sum(-1))
            out[s : s + step] = d.min(axis=1)
        return out
    return cKDTree(B).query(A, p=p)[0]


def adds_metric(pose_est: Pose, pose_gt: Pose, model) -> float:
    """Mean closest-point distance between the model under the two poses."""
    model = np.atleast_2d(np.asarray(model, dtype=float))
    if len(model) == 0:
        raise ValueError("empty model")
    return float(_nn_distances(pose_est.apply(model), pose_gt.apply(model)).mean())


def adds_auc(values, max_threshold: float = 0.1) -> float:
    """Normalised area under the accuracy-versus-threshold curve on ``[0, max_threshold]``.

    The curve is the fraction of errors below each threshold; its integral
    has the closed form ``mean(max(0, 1 - e / max_threshold))``.
    """
    e = np.asarray(values, dtype=float)
    if e.size == 0 or max_threshold <= 0:
        raise ValueError("need errors and a positive threshold")
    return float(np.mean(np.clip(1.0 - e / max_threshold, 0.0, 1.0)))


def chamfer(A, B, norm: str = "L2") -> float:
    """Symmetric chamfer distance: mean of the two directional mean NN distances.

    ``norm`` selects the point-to-point distance (``"L1"`` Manhattan,
    ``"L2"`` Euclidean).
    """
    if norm not in ("L1", "L2"):
        raise ValueError("norm must be 'L1' or 'L2'")
    A = np.atleast_2d(np.asarray(A, dtype=float))
    B = np.atleast_2d(np.asarray(B, dtype=float))
    if len(A) == 0 or len(B) == 0:
        raise ValueError("empty point cloud")
    return 0.5 * (float(_nn_distances(A, B, norm).mean()) + float(_nn_distances(B, A, norm).mean()))


def save_points_csv(points, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["x", "y", "z"])
        for p in np.asarray(points, dtype=float):
            w.writerow([repr(float(c)) for c in p])


def load_points_csv(path) -> Array:
    with open(Path(path), newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0] != ["x", "y", "z"]:
        raise ValueError(f"{path}: missing 'x,y,z' header")
    return np.array([[float(c) for c in r] for r in rows[1:]], dtype=float).reshape(-1, 3)
