"""Synthetic scenes with exact ground truth, perturbed estimates and metrics.

Poses map camera-frame depth points to the pose-normalised object frame,
``z_i = R x_i + t``.  The camera centre therefore sits at ``t`` in object
coordinates, which is what hemisphere culling uses.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial.transform import Rotation

from . import sdf
from .corrector import CorrectionResult
from .geometry import (
    Pose,
    adds_metric,
    chamfer,
    load_points_csv,
    rotation_about,
    rotation_error_deg,
    save_points_csv,
)
from .sdf import Array
from .shapes import Decoder, ShapeBasis, decoder_from_dict, project_simplex


@dataclass
class SceneConfig:
    n_points: int = 200
    n_views: int = 1
    noise_sigma: float = 0.0
    outlier_fraction: float = 0.0
    outlier_radius: float = 0.5
    distance_range: tuple[float, float] = (1.5, 2.5)
    # Dirichlet concentration for the ground-truth code
    code_concentration: float = 1.0
    gt_alpha: list[float] | None = None
    # unit directions (object frame) from which each view looks at the object
    view_dirs: list[list[float]] | None = None
    cull: bool = True
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.outlier_fraction < 1.0:
            raise ValueError("outlier_fraction must be in [0, 1)")
        n_in = self.n_points - int(round(self.outlier_fraction * self.n_points))
        if n_in < 3:
            raise ValueError("fewer than 3 inlier points per view")
        if self.n_views < 1 or self.noise_sigma < 0 or self.outlier_radius <= 0:
            raise ValueError("invalid scene configuration")
        if self.view_dirs is not None and len(self.view_dirs) != self.n_views:
            raise ValueError("view_dirs must list one direction per view")
        self.distance_range = tuple(self.distance_range)


@dataclass(eq=False)
class Frame:
    X: Array
    gt_pose: Pose
    gt_alpha: Array
    gt_Z: Array
    object_id: int = 0
    view_id: int = 0
    outlier_idx: Array = field(default_factory=lambda: np.zeros(0, dtype=int))

    @property
    def inlier_mask(self) -> Array:
        m = np.ones(len(self.X), dtype=bool)
        m[self.outlier_idx] = False
        return m


@dataclass
class PerturbationModel:
    z_noise_sigma: float = 0.0
    rot_deg: float = 0.0
    trans_m: float = 0.0
    # L1 size of the sum-zero code offset, applied before simplex projection
    code_perturb: float = 0.0
    seed: int = 0


def _visible_surface(fld, n: int, camera: Array, rng, cull: bool) -> Array:
    out: list[Array] = []
    have = 0
    for attempt in range(50):
        pts = sdf.sample_surface(fld, 4 * n, seed=int(rng.integers(2**31)))
        if cull:
            g = fld.gradient(pts)
            pts = pts[np.einsum("ij,ij->i", g, camera - pts) > 0]
        out.append(pts)
        have += len(pts)
        if have >= n:
            pts = np.concatenate(out)
            return pts[rng.permutation(len(pts))[:n]]
    raise sdf.SurfaceNotFound("could not collect enough visible surface points")


def make_scene(basis: ShapeBasis, decoder: Decoder, cfg: SceneConfig, scene_index: int = 0) -> list[Frame]:
    """All views of one object; the RNG stream is keyed on ``(seed, scene_index)``."""
    rng = np.random.default_rng([cfg.seed, scene_index])
    if cfg.gt_alpha is not None:
        alpha = project_simplex(cfg.gt_alpha)
    else:
        alpha = rng.dirichlet(np.full(basis.K, cfg.code_concentration))
    fld = decoder.decode(alpha)
    frames = []
    n_out = int(round(cfg.outlier_fraction * cfg.n_points))
    for v in range(cfg.n_views):
        R = Rotation.random(random_state=rng).as_matrix()
        d = rng.uniform(*cfg.distance_range)
        if cfg.view_dirs is not None:
            u = np.asarray(cfg.view_dirs[v], dtype=float)
            u = u / np.linalg.norm(u)
        else:
            u = rng.normal(size=3)
            u /= np.linalg.norm(u)
        t = d * u
        pose = Pose(R, t)
        Zs = _visible_surface(fld, cfg.n_points, t, rng, cfg.cull)
        X = pose.inverse().apply(Zs)
        if cfg.noise_sigma > 0:
            X = X + rng.normal(scale=cfg.noise_sigma, size=X.shape)
        out_idx = np.sort(rng.choice(cfg.n_points, size=n_out, replace=False)) if n_out else np.zeros(0, dtype=int)
        if n_out:
            centroid = X.mean(axis=0)
            dirs = rng.normal(size=(n_out, 3))
            dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
            radii = cfg.outlier_radius * rng.uniform(size=n_out) ** (1.0 / 3.0)
            X[out_idx] = centroid + dirs * radii[:, None]
        frames.append(Frame(X, pose, alpha.copy(), pose.apply(X), scene_index, v, out_idx))
    return frames


def random_rotation_by(angle_deg: float, rng) -> Array:
    axis = rng.normal(size=3)
    return rotation_about(axis, np.radians(angle_deg))


def pose_perturbation(frame: Frame, pm: PerturbationModel) -> Pose:
    """The rigid offset ``dT`` applied (in the object frame) to the true coordinates."""
    rng = np.random.default_rng([pm.seed, frame.object_id, frame.view_id, 1])
    R = random_rotation_by(pm.rot_deg, rng) if pm.rot_deg else np.eye(3)
    u = rng.normal(size=3)
    t = pm.trans_m * u / np.linalg.norm(u)
    # rotate about the observed centroid so rotation and translation stay decoupled
    c = frame.gt_Z.mean(axis=0)
    return Pose(R, c - R @ c + t)


def code_perturbation(K: int, magnitude: float, rng) -> Array:
    if K < 2 or magnitude == 0:
        return np.zeros(K)
    d = rng.normal(size=K)
    d -= d.mean()
    return magnitude * d / np.abs(d).sum()


def synth_estimates(frame: Frame, pm: PerturbationModel) -> tuple[Array, Array]:
    """Stand-in network output: perturbed coordinates and a perturbed code."""
    Z = pose_perturbation(frame, pm).apply(frame.gt_Z)
    if pm.z_noise_sigma > 0:
        rng = np.random.default_rng([pm.seed, frame.object_id, frame.view_id, 2])
        Z = Z + rng.normal(scale=pm.z_noise_sigma, size=Z.shape)
    crng = np.random.default_rng([pm.seed, frame.object_id, 3])
    alpha = project_simplex(frame.gt_alpha + code_perturbation(len(frame.gt_alpha), pm.code_perturb, crng))
    return Z, alpha


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------


@dataclass
class MetricsRecord:
    adds: float
    chamfer_l1: float
    chamfer_l2: float
    code_error: float
    rot_err_deg: float
    trans_err: float


def surface_model(decoder: Decoder, alpha, n: int = 500, seed: int = 7) -> Array:
    return sdf.sample_surface(decoder.decode(alpha), n, seed=seed)


def evaluate_pose_code(pose_est: Pose, code_est, frame: Frame, decoder: Decoder, n_model: int = 500, seed: int = 7) -> MetricsRecord:
    gt_model = surface_model(decoder, frame.gt_alpha, n_model, seed)
    est_model = surface_model(decoder, code_est, n_model, seed)
    # object-to-camera transforms
    T_est, T_gt = pose_est.inverse(), frame.gt_pose.inverse()
    return MetricsRecord(
        adds=adds_metric(T_est, T_gt, gt_model),
        chamfer_l1=chamfer(est_model, gt_model, "L1"),
        chamfer_l2=chamfer(est_model, gt_model, "L2"),
        code_error=float(np.linalg.norm(np.asarray(code_est) - frame.gt_alpha)),
        rot_err_deg=rotation_error_deg(T_est.rotation, T_gt.rotation),
        trans_err=float(np.linalg.norm(T_est.translation - T_gt.translation)),
    )


def evaluate(result: CorrectionResult, frame: Frame, decoder: Decoder, view: int = 0, **kw) -> MetricsRecord:
    """Metrics of view ``view`` of a correction against the frame's ground truth."""
    return evaluate_pose_code(result.poses[view], result.code, frame, decoder, **kw)


# ---------------------------------------------------------------------------
# Scene directories
# ---------------------------------------------------------------------------


def save_scene(path, objects: list[list[Frame]], basis: ShapeBasis, decoder: Decoder, cfg: SceneConfig, extra: dict | None = None) -> None:
    """Write ``scene.json`` plus one ``obj{o}_view{v}.csv`` per view."""
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    records = []
    for frames in objects:
        for f in frames:
            name = f"obj{f.object_id}_view{f.view_id}.csv"
            save_points_csv(f.X, root / name)
            records.append(
                {
                    "object_id": f.object_id,
                    "view_id": f.view_id,
                    "points": name,
                    "gt_pose": f.gt_pose.as_vector(),
                    "gt_alpha": f.gt_alpha.tolist(),
                    "outlier_idx": f.outlier_idx.tolist(),
                }
            )
    doc = {
        "config": asdict(cfg),
        "basis": basis.to_manifest(),
        "decoder": decoder.to_dict(),
        "frames": records,
    }
    if extra:
        doc.update(extra)
    (root / "scene.json").write_text(json.dumps(doc, indent=2, sort_keys=True))


def load_scene(path):
    """Returns ``(objects, basis, decoder, doc)`` with frames grouped per object."""
    root = Path(path)
    doc = json.loads((root / "scene.json").read_text())
    basis = ShapeBasis.from_manifest(doc["basis"])
    decoder = decoder_from_dict(doc["decoder"], basis)
    grouped: dict[int, list[Frame]] = {}
    for r in doc["frames"]:
        X = load_points_csv(root / r["points"])
        pose = Pose.from_vector(r["gt_pose"])
        fr = Frame(
            X,
            pose,
            np.array(r["gt_alpha"]),
            pose.apply(X),
            r["object_id"],
            r["view_id"],
            np.array(r["outlier_idx"], dtype=int),
        )
        grouped.setdefault(r["object_id"], []).append(fr)
    objects = [sorted(grouped[k], key=lambda f: f.view_id) for k in sorted(grouped)]
    return objects, basis, decoder, doc
