"""Correct-and-certify self-training with a parametric stand-in estimator.

The estimator is a ground-truth oracle corrupted by a trainable bias (a
rigid offset of the coordinates and an offset of the code), so training
progress is measured directly as the bias shrinking.  The supervised loss
utilities used for training the coordinate and shape networks are also
exposed here as pure functions with analytic gradients.
"""

from __future__ import annotations

import abc
import csv
import os
from dataclasses import dataclass, field

import numpy as np

from .certification import YCBV_CERT, CertificateConfig, oc_certificate
from .corrector import CorrectorConfig, MultiViewBuffer, bcd_correct, lsq_correct
from .geometry import arun_fit, hat, so3_exp
from .sdf import Array
from .shapes import Decoder, ShapeBasis, project_simplex, simplex_projection_jacobian
from .simulator import Frame

CORRECTOR_KINDS = ("bcd", "lsq", "none")


def so3_exp_derivatives(omega) -> Array:
    """``dR/d omega_k`` for ``R = exp(hat(omega))``, stacked as ``(3, 3, 3)``."""
    w = np.asarray(omega, dtype=float)
    R = so3_exp(w)
    th2 = float(w @ w)
    E = np.eye(3)
    if th2 < 1e-20:
        return np.stack([hat(E[k]) for k in range(3)])
    out = []
    for k in range(3):
        M = w[k] * hat(w) + hat(np.cross(w, (E - R) @ E[k]))
        out.append(M @ R / th2)
    return np.stack(out)


class Estimator(abc.ABC):
    """Predicts coordinates and a code for a frame; adapts to pseudo-labels."""

    @abc.abstractmethod
    def predict(self, frame: Frame) -> tuple[Array, Array]: ...

    @abc.abstractmethod
    def update(self, labels: list["PseudoLabel"], lr_z: float, lr_h: float) -> dict: ...


@dataclass
class BiasedOracleEstimator(Estimator):
    """Ground truth distorted by a rigid coordinate bias and a code bias.

    ``z = exp(hat(bias_rot)) z_gt + bias_trans (+ noise)`` and
    ``h = P(h_gt + bias_code)`` with ``P`` the simplex projection.
    """

    bias_rot: Array = field(default_factory=lambda: np.zeros(3))
    bias_trans: Array = field(default_factory=lambda: np.zeros(3))
    bias_code: Array | None = None
    noise_sigma: float = 0.0
    train_pose: bool = True
    train_code: bool = True
    seed: int = 0

    def __post_init__(self):
        self.bias_rot = np.asarray(self.bias_rot, dtype=float).copy()
        self.bias_trans = np.asarray(self.bias_trans, dtype=float).copy()
        if self.bias_code is not None:
            self.bias_code = np.asarray(self.bias_code, dtype=float).copy()

    def _code_bias(self, K: int) -> Array:
        if self.bias_code is None:
            self.bias_code = np.zeros(K)
        return self.bias_code

    def params(self) -> Array:
        code = np.zeros(0) if self.bias_code is None else self.bias_code
        return np.concatenate([self.bias_rot, self.bias_trans, code])

    def bias_norm(self) -> float:
        return float(np.linalg.norm(self.params()))

    def _noise(self, frame: Frame) -> Array:
        if self.noise_sigma <= 0:
            return np.zeros_like(frame.gt_Z)
        rng = np.random.default_rng([self.seed, frame.object_id, frame.view_id])
        return rng.normal(scale=self.noise_sigma, size=frame.gt_Z.shape)

    def predict(self, frame: Frame) -> tuple[Array, Array]:
        R = so3_exp(self.bias_rot)
        Z = frame.gt_Z @ R.T + self.bias_trans + self._noise(frame)
        h = project_simplex(frame.gt_alpha + self._code_bias(len(frame.gt_alpha)))
        return Z, h

    def losses(self, label: "PseudoLabel") -> tuple[float, float]:
        """``(L_h, L_z)`` of the current prediction against one label."""
        Z, h = self.predict(label.frame)
        return float(np.sum((h - label.code_hat) ** 2)), float(np.sum((Z - label.Z_hat) ** 2))

    def loss_gradients(self, label: "PseudoLabel") -> tuple[Array, Array, Array]:
        """Gradients of ``L_z`` w.r.t. rotation and translation bias and of ``L_h`` w.r.t. the code bias."""
        frame = label.frame
        Z, h = self.predict(frame)
        E = Z - label.Z_hat
        dR = so3_exp_derivatives(self.bias_rot)
        g_rot = 2.0 * np.array([np.sum(E * (frame.gt_Z @ dR[k].T)) for k in range(3)])
        g_trans = 2.0 * E.sum(axis=0)
        J = simplex_projection_jacobian(frame.gt_alpha + self._code_bias(len(h)))
        g_code = J.T @ (2.0 * (h - label.code_hat))
        return g_rot, g_trans, g_code

    def update(self, labels, lr_z: float, lr_h: float) -> dict:
        """One plain SGD step per label, in label order."""
        Lh, Lz = [], []
        for lab in labels:
            lh, lz = self.losses(lab)
            Lh.append(lh)
            Lz.append(lz)
            g_rot, g_trans, g_code = self.loss_gradients(lab)
            if self.train_pose:
                self.bias_rot -= lr_z * g_rot
                self.bias_trans -= lr_z * g_trans
            if self.train_code:
                self.bias_code = self._code_bias(len(g_code)) - lr_h * g_code
        return {
            "mean_Lh": float(np.mean(Lh)) if Lh else 0.0,
            "mean_Lz": float(np.mean(Lz)) if Lz else 0.0,
        }


@dataclass(eq=False)
class PseudoLabel:
    frame: Frame
    Z_hat: Array
    code_hat: Array
    certified: bool = True

    @property
    def frame_id(self) -> tuple[int, int]:
        return self.frame.object_id, self.frame.view_id


@dataclass
class EpochStats:
    epoch: int
    certified_fraction: float
    mean_Lh: float
    mean_Lz: float
    bias_norm: float
    n_labels: int = 0


def _group(dataset) -> list[list[Frame]]:
    """Frames grouped per object; a flat list is one object per frame."""
    out = []
    for item in dataset:
        out.append(list(item) if isinstance(item, (list, tuple)) else [item])
    return out


def correct_and_certify(
    frames: list[Frame],
    estimator: Estimator,
    corrector_kind: str,
    decoder: Decoder,
    basis: ShapeBasis | None = None,
    cert_cfg: CertificateConfig = YCBV_CERT,
    corr_cfg: CorrectorConfig | None = None,
):
    """Predict every view, correct them jointly, certify the joint result.

    Returns ``(Z_hats, code_hat, certified)``.  With ``corrector_kind ==
    "none"`` the estimate is only projected onto the rigid family
    (``Z = R X + t`` with the least-squares fit) before certification.
    """
    if corrector_kind not in CORRECTOR_KINDS:
        raise ValueError(f"corrector_kind must be one of {CORRECTOR_KINDS}")
    preds = [estimator.predict(f) for f in frames]
    buf = MultiViewBuffer([(f.X, Z) for f, (Z, _) in zip(frames, preds)], capacity=max(50, len(frames)))
    # the views share one object, so their code estimates are averaged
    h_est = project_simplex(np.mean([h for _, h in preds], axis=0))
    if corrector_kind == "none":
        Zs = [arun_fit(X, Z).apply(X) for X, Z in buf]
        code = h_est
    elif corrector_kind == "bcd":
        res = bcd_correct(buf, h_est, decoder, corr_cfg)
        Zs, code = res.Z_hat, res.code
    else:
        if basis is None:
            raise ValueError("the lsq corrector needs the shape basis")
        res = lsq_correct(buf, h_est, basis, decoder, corr_cfg)
        Zs, code = res.Z_hat, res.code
    return Zs, code, oc_certificate(Zs, code, decoder, cert_cfg)


def generate_pseudo_labels(
    dataset,
    estimator: Estimator,
    corrector_kind: str,
    decoder: Decoder,
    basis: ShapeBasis | None = None,
    cert_cfg: CertificateConfig = YCBV_CERT,
    corr_cfg: CorrectorConfig | None = None,
) -> tuple[list[PseudoLabel], float]:
    """Labels for every certified object, plus the certified fraction of objects."""
    objects = _group(dataset)
    if not objects:
        raise ValueError("empty dataset")
    labels: list[PseudoLabel] = []
    n_cert = 0
    for frames in objects:
        Zs, code, ok = correct_and_certify(frames, estimator, corrector_kind, decoder, basis, cert_cfg, corr_cfg)
        if not ok:
            continue
        n_cert += 1
        labels.extend(PseudoLabel(f, Z, code.copy(), True) for f, Z in zip(frames, Zs))
    return labels, n_cert / len(objects)


def self_train_epoch(
    estimator: Estimator,
    dataset,
    corrector_kind: str,
    decoder: Decoder,
    basis: ShapeBasis | None = None,
    cert_cfg: CertificateConfig = YCBV_CERT,
    lr_z: float = 3e-4,
    lr_h: float = 3e-4,
    corr_cfg: CorrectorConfig | None = None,
    epoch: int = 0,
    label_pool: dict | None = None,
) -> EpochStats:
    """Regenerate pseudo-labels with the current estimator and train on them.

    With ``label_pool`` (a dict kept by the caller across epochs) labels
    accumulate: each frame keeps its most recent certified label and the
    step trains on every frame certified so far.
    """
    labels, frac = generate_pseudo_labels(dataset, estimator, corrector_kind, decoder, basis, cert_cfg, corr_cfg)
    if label_pool is not None:
        label_pool.update((lab.frame_id, lab) for lab in labels)
        labels = [label_pool[k] for k in sorted(label_pool)]
    assert all(lab.certified for lab in labels)
    stats = estimator.update(labels, lr_z, lr_h)
    norm = estimator.bias_norm() if hasattr(estimator, "bias_norm") else float("nan")
    return EpochStats(epoch, frac, stats["mean_Lh"], stats["mean_Lz"], norm, len(labels))


def self_train(
    estimator: Estimator, dataset, epochs: int, corrector_kind: str, decoder: Decoder, accumulate: bool = False, **kw
) -> list[EpochStats]:
    """Several epochs; labels are regenerated each epoch unless ``accumulate``."""
    pool = {} if accumulate else None
    return [
        self_train_epoch(estimator, dataset, corrector_kind, decoder, epoch=e, label_pool=pool, **kw)
        for e in range(1, epochs + 1)
    ]


EPOCH_COLUMNS = ["epoch", "certified_fraction", "mean_Lh", "mean_Lz", "bias_norm"]


def append_epoch_csv(path, stats: EpochStats, header_comment: str | None = None) -> None:
    new = not os.path.exists(path) or os.path.getsize(path) == 0
    with open(path, "a", newline="") as fh:
        if new and header_comment:
            fh.write(f"# {header_comment}\r\n")
        w = csv.writer(fh)
        if new:
            w.writerow(EPOCH_COLUMNS)
        w.writerow([stats.epoch, *(repr(float(getattr(stats, c))) for c in EPOCH_COLUMNS[1:])])


# ---------------------------------------------------------------------------
# Supervised losses
# ---------------------------------------------------------------------------


def loss_pnc_soft_l1(Z, Z_star, zeta: float = 0.1) -> float:
    """Mean over points of the Huber-style soft-L1 of the point error norm."""
    return float(np.mean(_soft_l1_terms(Z, Z_star, zeta)[0]))


def _soft_l1_terms(Z, Z_star, zeta):
    D = np.atleast_2d(np.asarray(Z, dtype=float) - np.asarray(Z_star, dtype=float))
    if zeta <= 0:
        raise ValueError("zeta must be > 0")
    e = np.linalg.norm(D, axis=1)
    val = np.where(e < zeta, e**2 / (2 * zeta), e - zeta / 2)
    return val, D, e


def loss_pnc_soft_l1_grad(Z, Z_star, zeta: float = 0.1) -> Array:
    """Gradient of :func:`loss_pnc_soft_l1` w.r.t. ``Z``."""
    _, D, e = _soft_l1_terms(Z, Z_star, zeta)
    scale = np.where(e < zeta, 1.0 / zeta, 1.0 / np.maximum(e, 1e-300))
    return D * scale[:, None] / len(D)


SDF_GAMMAS = (3e3, 2e2, 50.0)
SDF_PSI_A = 100.0


def loss_sdf_terms(field_values, gt_values, off_manifold_values, gradients, gammas=SDF_GAMMAS, a: float = SDF_PSI_A) -> Array:
    """Weighted ``(on-manifold, off-manifold, eikonal)`` terms; empty sets give 0."""
    f = np.asarray(field_values, dtype=float).ravel()
    g_t = np.asarray(gt_values, dtype=float).ravel()
    off = np.asarray(off_manifold_values, dtype=float).ravel()
    G = np.asarray(gradients, dtype=float).reshape(-1, 3)
    g1, g2, g3 = gammas
    t1 = g1 * np.mean(np.abs(f - g_t)) if f.size else 0.0
    t2 = g2 * np.mean(np.exp(-a * np.abs(off))) if off.size else 0.0
    t3 = g3 * np.mean(np.abs(np.linalg.norm(G, axis=1) - 1.0)) if len(G) else 0.0
    return np.array([t1, t2, t3], dtype=float)


def loss_sdf(field_values, gt_values, off_manifold_values, gradients, gammas=SDF_GAMMAS, a: float = SDF_PSI_A) -> float:
    return float(loss_sdf_terms(field_values, gt_values, off_manifold_values, gradients, gammas, a).sum())


def loss_sdf_grads(field_values, gt_values, off_manifold_values, gradients, gammas=SDF_GAMMAS, a: float = SDF_PSI_A):
    """Gradients of :func:`loss_sdf` w.r.t. field values, off-manifold values and gradients."""
    f = np.asarray(field_values, dtype=float).ravel()
    g_t = np.asarray(gt_values, dtype=float).ravel()
    off = np.asarray(off_manifold_values, dtype=float).ravel()
    G = np.asarray(gradients, dtype=float).reshape(-1, 3)
    g1, g2, g3 = gammas
    d_f = g1 * np.sign(f - g_t) / max(f.size, 1)
    d_off = -a * g2 * np.sign(off) * np.exp(-a * np.abs(off)) / max(off.size, 1)
    nrm = np.linalg.norm(G, axis=1)
    d_G = g3 * (np.sign(nrm - 1.0) / np.maximum(nrm, 1e-300))[:, None] * G / max(len(G), 1)
    return d_f, d_off, d_G
