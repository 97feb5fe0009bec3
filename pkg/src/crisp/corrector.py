"""Bi-level pose/shape corrector.

The corrector minimises ``F(Z | a) = sum_i f(R x_i + t | a)^2`` where
``(R, t)`` is the least-squares rigid fit of the depth points ``X`` to the
coordinates ``Z``.  Two solvers are provided:

* :func:`bcd_correct` alternates pose descent per view with projected
  gradient descent on the code over all views.
* :func:`lsq_correct` runs the pose descent once and then solves a
  simplex-constrained linear least squares problem over the active shape
  decoder (estimate column plus basis columns).

The pose block is descended on SE(3) directly; the returned coordinates are
``R X + t``, which attain the same objective as the relaxed problem.
"""

from __future__ import annotations

import json
import time
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from . import sdf
from .geometry import Pose, arun_fit, exp_se3
from .sdf import Array
from .shapes import (
    Decoder,
    ShapeBasis,
    build_F_matrix,
    normalization_diag,
    project_simplex,
)

LSQ_RIDGE = 1e-10


@dataclass
class CorrectorConfig:
    z_step: float = 1e-3
    z_iters: int = 50
    h_step: float = 1e-2
    h_iters: int = 25
    outer_rounds: int = 3
    convergence_tol: float = 1e-6
    # accepted steps grow by this factor; 1.0 gives a fixed step with halving only
    step_growth: float = 2.0
    grad_tol: float = 1e-12
    # scale the pose gradient by the damped Gauss-Newton metric (J^T J + mu I)^-1
    z_precondition: bool = False
    z_damping: float = 1e-6
    lsq_tol: float = 1e-9
    lsq_max_iters: int = 20000

    def __post_init__(self):
        if min(self.z_step, self.h_step) <= 0 or min(self.z_iters, self.h_iters, self.outer_rounds) < 1:
            raise ValueError("corrector steps must be > 0 and iteration counts >= 1")
        if self.step_growth < 1.0:
            raise ValueError("step_growth must be >= 1")


class MultiViewBuffer:
    """Bounded FIFO of ``(X, Z)`` observations of one object."""

    def __init__(self, frames=(), capacity: int = 50):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self._frames: deque = deque(maxlen=capacity)
        for X, Z in frames:
            self.append(X, Z)

    def append(self, X, Z) -> None:
        X = np.asarray(X, dtype=float)
        Z = np.asarray(Z, dtype=float)
        if X.shape != Z.shape or X.ndim != 2 or X.shape[1] != 3:
            raise ValueError("X and Z must be matching (n, 3) arrays")
        self._frames.append((X, Z))

    @property
    def frames(self) -> list[tuple[Array, Array]]:
        return list(self._frames)

    def __len__(self):
        return len(self._frames)

    def __iter__(self):
        return iter(self._frames)


def _as_buffer(frames) -> MultiViewBuffer:
    if isinstance(frames, MultiViewBuffer):
        return frames
    if isinstance(frames, tuple) and len(frames) == 2 and np.ndim(frames[0]) == 2:
        frames = [frames]
    buf = MultiViewBuffer(capacity=max(len(frames), 1))
    for X, Z in frames:
        buf.append(X, Z)
    return buf


@dataclass
class CorrectionResult:
    Z_hat: list[Array]
    code: Array
    poses: list[Pose]
    objective_trace: list[float]
    iterations: dict = field(default_factory=dict)
    coeffs: Array | None = None
    certified: bool | None = None
    solver: str = ""
    wall_time: float = 0.0

    @property
    def pose(self) -> Pose:
        return self.poses[0]

    def to_json(self) -> str:
        return json.dumps(
            {
                "solver": self.solver,
                "poses": [p.as_vector() for p in self.poses],
                "code": np.asarray(self.code).tolist(),
                "coeffs": None if self.coeffs is None else np.asarray(self.coeffs).tolist(),
                "objective_trace": [float(v) for v in self.objective_trace],
                "certified": self.certified,
            }
        )


# ---------------------------------------------------------------------------
# Objective and its gradients
# ---------------------------------------------------------------------------


def objective_F(Z, alpha, X, decoder: Decoder) -> float:
    """Bi-level objective: fit ``(R, t)`` to ``(X, Z)``, sum squared SDF at ``R X + t``."""
    pose = arun_fit(X, Z)
    r = decoder.evaluate(alpha, pose.apply(X))
    return float(r @ r)


def pose_objective(pose: Pose, X, alpha, decoder: Decoder) -> float:
    r = decoder.evaluate(alpha, pose.apply(X))
    return float(r @ r)


def pose_residual_jacobian(pose: Pose, X, alpha, decoder: Decoder) -> tuple[Array, Array]:
    """Residuals ``f(R x_i + t)`` and their ``(n, 6)`` left-twist Jacobian."""
    Y = pose.apply(X)
    r, g = decoder.value_and_spatial_gradient(alpha, Y)
    return r, np.hstack([np.cross(Y, g), g])


def pose_gradient(pose: Pose, X, alpha, decoder: Decoder) -> tuple[float, Array]:
    """Objective and its derivative w.r.t. a left twist ``exp(xi) ∘ pose`` at 0.

    Returns ``(G, grad)`` with ``grad = (d/d omega, d/d v)``.
    """
    r, J = pose_residual_jacobian(pose, X, alpha, decoder)
    return float(r @ r), 2.0 * J.T @ r


def code_objective(Z, alpha, decoder: Decoder) -> float:
    r = decoder.evaluate(alpha, Z)
    return float(r @ r)


def code_gradient(Z, alpha, decoder: Decoder) -> tuple[float, Array]:
    r, J = decoder.value_and_grad_code(alpha, Z)
    return float(r @ r), 2.0 * r @ J


# ---------------------------------------------------------------------------
# Block updates
# ---------------------------------------------------------------------------


def z_update(X, Z_init, alpha, decoder: Decoder, cfg: CorrectorConfig | None = None, pose_init: Pose | None = None):
    """Pose block: gradient descent over SE(3) from ``arun_fit(X, Z_init)``.

    Returns ``(pose, Z_hat, info)`` with ``Z_hat = R X + t`` and ``info``
    holding the initial and final objective and the iteration count.
    """
    cfg = cfg or CorrectorConfig()
    X = np.asarray(X, dtype=float)
    pose = pose_init if pose_init is not None else arun_fit(X, Z_init)

    def state(p):
        r, J = pose_residual_jacobian(p, X, alpha, decoder)
        return float(r @ r), r, J

    def direction(r, J):
        grad = 2.0 * J.T @ r
        if not cfg.z_precondition:
            return grad, grad
        H = 2.0 * J.T @ J
        H[np.diag_indices(6)] += cfg.z_damping * (np.trace(H) / 6.0 + 1e-12)
        return grad, np.linalg.solve(H, grad)

    G, r, J = state(pose)
    G0 = G
    step = 1.0 if cfg.z_precondition else cfg.z_step
    max_step = 1.0 if cfg.z_precondition else np.inf
    it = 0
    for it in range(1, cfg.z_iters + 1):
        grad, dirn = direction(r, J)
        if float(grad @ grad) <= cfg.grad_tol**2 or G == 0.0:
            it -= 1
            break
        accepted = False
        for _ in range(40):
            cand = exp_se3(-step * dirn).compose(pose)
            G_new, r_new, J_new = state(cand)
            if G_new < G:
                accepted = True
                break
            step *= 0.5
        if not accepted:
            it -= 1
            break
        pose, G, r, J = cand, G_new, r_new, J_new
        step = min(step * cfg.step_growth, max_step)
        if it % 100 == 0:
            pose = pose.orthonormalized()
    pose = pose.orthonormalized()
    return pose, pose.apply(X), {"G0": G0, "G": pose_objective(pose, X, alpha, decoder), "iters": it}


def shape_update_pgd(Z_hat, alpha_init, decoder: Decoder, cfg: CorrectorConfig | None = None, trace=None) -> Array:
    """Projected gradient descent on the code over the simplex.

    ``trace``, if given, receives every iterate (for feasibility checks).
    """
    cfg = cfg or CorrectorConfig()
    Z = np.concatenate(Z_hat) if isinstance(Z_hat, (list, tuple)) else np.asarray(Z_hat, dtype=float)
    alpha = project_simplex(alpha_init)
    obj, grad = code_gradient(Z, alpha, decoder)
    step = cfg.h_step
    if trace is not None:
        trace.append(alpha.copy())
    for _ in range(cfg.h_iters):
        accepted = False
        for _ in range(40):
            cand = project_simplex(alpha - step * grad)
            if np.array_equal(cand, alpha):
                break
            obj_new = code_objective(Z, cand, decoder)
            if obj_new < obj:
                accepted = True
                break
            step *= 0.5
        if not accepted:
            break
        alpha = cand
        obj, grad = code_gradient(Z, alpha, decoder)
        step *= cfg.step_growth
        if trace is not None:
            trace.append(alpha.copy())
    return alpha


def kkt_residual(c, grad, eta: float) -> float:
    """Norm of the projected-gradient map ``c - P(c - eta * grad)``."""
    return float(np.linalg.norm(c - project_simplex(c - eta * grad)))


def _eqp_on_support(B, S):
    """Minimiser of ``|B c|^2`` with ``sum(c_S) = 1`` and ``c`` zero off ``S``.

    Solved in the null space of the sum constraint as a least-squares
    problem in ``B`` (not its Gram matrix), which keeps precision when the
    Gram matrix is nearly singular.
    """
    k = len(S)
    c = np.zeros(B.shape[1])
    c0 = np.full(k, 1.0 / k)
    if k > 1:
        # columns e_i - e_k: exactly sum-zero in floating point
        N = np.vstack([np.eye(k - 1), -np.ones((1, k - 1))])
        Bs = B[:, S]
        y = np.linalg.lstsq(Bs @ N, -Bs @ c0, rcond=None)[0]
        c0 = c0 + N @ y
    c[S] = c0
    return c


def _active_set(B, tol: float, max_iters: int = 200):
    """Primal active-set method for ``min |B c|^2`` over the simplex."""
    m = B.shape[1]
    Q = B.T @ B
    c = np.full(m, 1.0 / m)
    S = list(range(m))
    for _ in range(max_iters):
        target = _eqp_on_support(B, S)
        d = target - c
        neg = [i for i in S if target[i] < 0]
        if neg:
            # ratio test: walk towards the subproblem solution until a weight hits zero
            ratios = [(c[i] / -d[i], i) for i in neg if d[i] < 0]
            tau, drop = min(ratios)
            c = np.maximum(c + tau * d, 0.0)
            c[drop] = 0.0
            S = [i for i in S if i != drop and c[i] > 0]
            c = c / c.sum()
            continue
        c = np.maximum(target, 0.0)
        c = c / c.sum()
        g = Q @ c
        lam = g[S].mean()
        out = [j for j in range(m) if j not in S]
        if not out:
            return c
        j = min(out, key=lambda j: g[j])
        if g[j] >= lam - tol * max(1.0, abs(lam)):
            return c
        S = sorted(S + [j])
    return c


def _accelerated_pgd(Q, c, eta, tol, max_iters):
    y, t = c.copy(), 1.0
    res, it = np.inf, 0
    for it in range(1, max_iters + 1):
        c_new = project_simplex(y - eta * (Q @ y))
        t_new = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * t * t))
        # restart momentum when it points uphill
        if (Q @ y) @ (c_new - c) > 0:
            t_new, y = 1.0, c_new.copy()
        else:
            y = c_new + (t - 1.0) / t_new * (c_new - c)
        c, t = c_new, t_new
        res = kkt_residual(c, Q @ c, eta)
        if res < tol:
            break
    return c, it, res


def solve_simplex_lsq(A, ridge: float = LSQ_RIDGE, tol: float = 1e-9, max_iters: int = 20000):
    """Minimise ``|A c|^2 + ridge |c|^2`` over the probability simplex.

    An exact primal active-set pass runs first; its output is accepted when
    the projected-gradient (KKT) residual with step ``1/L`` is below ``tol``,
    otherwise accelerated projected gradient continues from it.  Returns
    ``(c, info)``.
    """
    A = np.asarray(A, dtype=float)
    m = A.shape[1]
    Q = 2.0 * (A.T @ A + ridge * np.eye(m))
    L = float(np.linalg.eigvalsh(Q)[-1])
    eta = 1.0 / L
    c = _active_set(np.vstack([A, np.sqrt(ridge) * np.eye(m)]), tol=1e-12)
    res = kkt_residual(c, Q @ c, eta)
    it = 0
    if not res < tol:
        c, it, res = _accelerated_pgd(Q, c, eta, tol, max_iters)
    return c, {"iters": it, "kkt": res, "eta": eta, "objective": float(np.sum((A @ c) ** 2))}


def shape_update_lsq(Z_hat, basis: ShapeBasis, h_est, decoder: Decoder, D=None, ridge: float = LSQ_RIDGE, tol: float = 1e-9):
    """Active-shape coefficients minimising ``|F(Z) D c|^2`` over the simplex.

    ``D`` is the diagonal of the normalisation (length K+1); identity if None.
    Returns ``(c, info)``.
    """
    Z = np.concatenate(Z_hat) if isinstance(Z_hat, (list, tuple)) else np.asarray(Z_hat, dtype=float)
    F = build_F_matrix(Z, basis, h_est, decoder)
    d = np.ones(F.shape[1]) if D is None else np.asarray(D, dtype=float)
    if d.ndim == 2:
        d = np.diag(d)
    c, info = solve_simplex_lsq(F * d, ridge=ridge, tol=tol)
    info["F"] = F
    info["D"] = d
    return c, info


def recombine_code(c, h_est, D) -> Array:
    """Code of the active-shape field, renormalised to sum to one.

    For a decoder linear in the code this keeps the zero level set of the
    active-shape field exactly.
    """
    c = np.asarray(c, dtype=float)
    d = np.asarray(D, dtype=float)
    K = len(c) - 1
    h = c[0] * d[0] * np.asarray(h_est, dtype=float) + c[1:] * d[1:]
    s = h.sum()
    if s <= 0:
        return project_simplex(h)
    out = np.maximum(h / s, 0.0)
    return out / out.sum() if K > 0 else out


# ---------------------------------------------------------------------------
# Solvers
# ---------------------------------------------------------------------------


def _total(poses, buf, alpha, decoder):
    return sum(pose_objective(p, X, alpha, decoder) for p, (X, _) in zip(poses, buf))


def bcd_correct(frames, alpha_init, decoder: Decoder, cfg: CorrectorConfig | None = None) -> CorrectionResult:
    """Block coordinate descent: per-view pose descent, then shared code PGD."""
    cfg = cfg or CorrectorConfig()
    t0 = time.perf_counter()
    buf = _as_buffer(frames)
    if len(buf) == 0:
        raise ValueError("empty buffer")
    alpha = project_simplex(alpha_init)
    poses = [arun_fit(X, Z) for X, Z in buf]
    Zs = [p.apply(X) for p, (X, _) in zip(poses, buf)]
    trace = [_total(poses, buf, alpha, decoder)]
    z_iters, rounds = 0, 0
    for rounds in range(1, cfg.outer_rounds + 1):
        new_poses = []
        for pose, (X, _) in zip(poses, buf):
            p, _, info = z_update(X, None, alpha, decoder, cfg, pose_init=pose)
            new_poses.append(p)
            z_iters += info["iters"]
        poses = new_poses
        Zs = [p.apply(X) for p, (X, _) in zip(poses, buf)]
        alpha = shape_update_pgd(Zs, alpha, decoder, cfg)
        obj = _total(poses, buf, alpha, decoder)
        prev = trace[-1]
        trace.append(obj)
        if prev <= 0 or (prev - obj) / prev < cfg.convergence_tol:
            break
    return CorrectionResult(
        Z_hat=Zs,
        code=alpha,
        poses=poses,
        objective_trace=trace,
        iterations={"outer": rounds, "z": z_iters},
        solver="bcd",
        wall_time=time.perf_counter() - t0,
    )


def lsq_correct(
    frames,
    h_est,
    basis: ShapeBasis,
    decoder: Decoder,
    cfg: CorrectorConfig | None = None,
    d0_diameter: float | None = None,
    normalize: bool = True,
    use_estimate: bool = True,
) -> CorrectionResult:
    """Pose descent per view, one simplex LSQ over the active shape decoder.

    ``objective_trace`` is reported in the active-decoder scale
    ``|F D c|^2``: the pose-block values are multiplied by ``d_0^2`` so the
    entries are comparable with the final least-squares value.
    ``d0_diameter`` is measured from the decoded estimate when not given.
    """
    cfg = cfg or CorrectorConfig()
    t0 = time.perf_counter()
    buf = _as_buffer(frames)
    if len(buf) == 0:
        raise ValueError("empty buffer")
    h_est = project_simplex(h_est)
    if normalize:
        if d0_diameter is None:
            d0_diameter = sdf.bounding_box_diameter(decoder.decode(h_est), n=1000)
        D = normalization_diag(basis, d0_diameter)
    else:
        D = np.ones(basis.K + 1)
    d0 = D[0] if use_estimate else 1.0
    poses = [arun_fit(X, Z) for X, Z in buf]
    trace = [d0**2 * _total(poses, buf, h_est, decoder)]
    z_iters = 0
    new_poses = []
    for pose, (X, _) in zip(poses, buf):
        p, _, info = z_update(X, None, h_est, decoder, cfg, pose_init=pose)
        new_poses.append(p)
        z_iters += info["iters"]
    poses = new_poses
    Zs = [p.apply(X) for p, (X, _) in zip(poses, buf)]
    trace.append(d0**2 * _total(poses, buf, h_est, decoder))
    if use_estimate:
        c, info = shape_update_lsq(Zs, basis, h_est, decoder, D, tol=cfg.lsq_tol)
    else:
        # basis-only ablation: the estimate column is dropped
        F = build_F_matrix(np.concatenate(Zs), basis)
        cb, info = solve_simplex_lsq(F * D[1:], tol=cfg.lsq_tol)
        c = np.concatenate([[0.0], cb])
    trace.append(info["objective"])
    alpha = recombine_code(c, h_est, D)
    return CorrectionResult(
        Z_hat=Zs,
        code=alpha,
        poses=poses,
        objective_trace=trace,
        iterations={"outer": 1, "z": z_iters, "lsq": info["iters"]},
        coeffs=c,
        solver="lsq",
        wall_time=time.perf_counter() - t0,
    )
