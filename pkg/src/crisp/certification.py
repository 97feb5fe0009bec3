"""Observable-correctness certificate and the spectral shape-degeneracy check."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from .sdf import Array
from .shapes import Decoder


@dataclass(frozen=True)
class CertificateConfig:
    epsilon: float = 1e-2
    p: float = 0.98

    def __post_init__(self):
        if not self.epsilon > 0 or not 0 < self.p <= 1:
            raise ValueError("need epsilon > 0 and 0 < p <= 1")


YCBV_CERT = CertificateConfig(1e-2, 0.98)
SPE3R_CERT = CertificateConfig(2e-2, 0.97)


def nearest_rank_quantile(values, p: float) -> float:
    """Element ``ceil(p * n)`` (1-based) of the sorted values."""
    v = np.sort(np.asarray(values, dtype=float).ravel())
    if v.size == 0:
        raise ValueError("empty residual set")
    k = max(1, math.ceil(p * v.size))
    return float(v[k - 1])


def certify_residuals(residuals, cfg: CertificateConfig) -> bool:
    return nearest_rank_quantile(np.abs(residuals), cfg.p) < cfg.epsilon


def oc_residuals(Z_hat, code_hat, decoder: Decoder) -> Array:
    Z = np.concatenate(Z_hat) if isinstance(Z_hat, (list, tuple)) else np.asarray(Z_hat, dtype=float)
    return np.abs(decoder.evaluate(code_hat, Z))


def oc_certificate(Z_hat, code_hat, decoder: Decoder, cfg: CertificateConfig = YCBV_CERT) -> bool:
    """True when the p-quantile of ``|f(z_i | code)|`` is below epsilon."""
    return certify_residuals(oc_residuals(Z_hat, code_hat, decoder), cfg)


# ---------------------------------------------------------------------------
# Symmetric eigenvalues
# ---------------------------------------------------------------------------


def jacobi_eigh(A, tol: float = 1e-15, max_sweeps: int = 100) -> tuple[Array, Array]:
    """Cyclic Jacobi eigendecomposition of a symmetric matrix.

    Returns ascending eigenvalues and the matching orthonormal eigenvectors
    (columns), so that ``A = V diag(w) V^T``.
    """
    A = np.array(A, dtype=float)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ValueError("expected a square matrix")
    A = 0.5 * (A + A.T)
    n = A.shape[0]
    V = np.eye(n)
    scale = np.linalg.norm(A)
    if scale == 0.0:
        return np.zeros(n), V
    for _ in range(max_sweeps):
        off = np.sqrt(np.sum(np.tril(A, -1) ** 2))
        if off <= tol * scale:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = A[p, q]
                if abs(apq) <= 1e-300:
                    continue
                theta = (A[q, q] - A[p, p]) / (2.0 * apq)
                t = math.copysign(1.0, theta) / (abs(theta) + math.sqrt(theta * theta + 1.0))
                c = 1.0 / math.sqrt(t * t + 1.0)
                s = t * c
                # A <- J^T A J with the rotation acting on rows/cols p and q
                ap, aq = A[:, p].copy(), A[:, q].copy()
                A[:, p] = c * ap - s * aq
                A[:, q] = s * ap + c * aq
                ap, aq = A[p, :].copy(), A[q, :].copy()
                A[p, :] = c * ap - s * aq
                A[q, :] = s * ap + c * aq
                A[p, q] = A[q, p] = 0.0
                vp, vq = V[:, p].copy(), V[:, q].copy()
                V[:, p] = c * vp - s * vq
                V[:, q] = s * vp + c * vq
    w = np.diag(A).copy()
    order = np.argsort(w)
    return w[order], V[:, order]


@dataclass(frozen=True)
class DegeneracyReport:
    lambda_min: float
    lambda_max: float
    gram_condition: float
    is_degenerate: bool
    threshold: float


DEGENERACY_FLOOR = 1e-12


def simplex_tangent_basis(m: int) -> Array:
    """Orthonormal ``(m, m-1)`` basis of the sum-zero directions."""
    if m < 2:
        return np.zeros((m, 0))
    # Helmert contrasts
    N = np.zeros((m, m - 1))
    for j in range(1, m):
        N[:j, j - 1] = 1.0
        N[j, j - 1] = -float(j)
        N[:, j - 1] /= np.sqrt(j * (j + 1.0))
    return N


def degeneracy_report(F, threshold: float | None = None, restrict: str = "none") -> DegeneracyReport:
    """Smallest eigenvalue of the Gram matrix ``F^T F`` and a singularity flag.

    ``restrict="simplex"`` uses ``N^T F^T F N`` instead, with ``N`` an
    orthonormal basis of the sum-zero directions: the simplex-constrained
    least-squares coefficients are unique exactly when this matrix is
    nonsingular.  Observations lying on a shape inside the basis span make
    the unrestricted Gram matrix singular whatever the views, since the
    true coefficients are then a null vector of ``F``.

    The default threshold is ``1e-6`` times the mean diagonal of ``F^T F``,
    but never below ``DEGENERACY_FLOOR`` so that an ``F`` which vanishes to
    rounding is still flagged.
    """
    F = np.atleast_2d(np.asarray(F, dtype=float))
    if restrict not in ("none", "simplex"):
        raise ValueError("restrict must be 'none' or 'simplex'")
    G = F.T @ F
    scale = float(np.mean(np.diag(G)))
    if restrict == "simplex":
        N = simplex_tangent_basis(G.shape[0])
        G = N.T @ G @ N
    w, _ = jacobi_eigh(G)
    lam_min, lam_max = float(w[0]), float(w[-1])
    if threshold is None:
        threshold = max(1e-6 * scale, DEGENERACY_FLOOR)
    cond = lam_max / lam_min if lam_min > 0 else math.inf
    return DegeneracyReport(lam_min, lam_max, cond, lam_min < threshold, threshold)


def write_degeneracy_csv(path, rows, header_comment: str | None = None) -> None:
    """``rows`` are ``(n_frames, DegeneracyReport)`` pairs."""
    with open(path, "w", newline="") as fh:
        if header_comment:
            fh.write(f"# {header_comment}\r\n")
        w = csv.writer(fh)
        w.writerow(["n_frames", "lambda_min", "condition"])
        for n, rep in rows:
            w.writerow([n, repr(rep.lambda_min), repr(rep.gram_condition)])
