"""Shape-code space: SDF basis, blend decoders, simplex geometry, active shape matrix.

Latent codes live directly in barycentric coordinates over the basis, so the
code of basis shape ``k`` is the canonical vector ``e_k``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import sdf
from .geometry import rotation_about
from .sdf import Array, SdfField


def project_simplex(v) -> Array:
    """Euclidean projection onto ``{a >= 0, sum(a) = 1}`` (sort and threshold)."""
    v = np.asarray(v, dtype=float)
    if v.ndim != 1 or v.size == 0 or not np.all(np.isfinite(v)):
        raise ValueError("expected a finite, non-empty vector")
    u = np.sort(v)[::-1]
    css = np.cumsum(u) - 1.0
    ind = np.arange(1, v.size + 1)
    rho = np.nonzero(u - css / ind > 0)[0][-1]
    theta = css[rho] / (rho + 1.0)
    w = np.maximum(v - theta, 0.0)
    # clean up the rounding so the sum is exactly feasible to 1e-15
    return w / w.sum()


def simplex_projection_jacobian(v) -> Array:
    """Jacobian of :func:`project_simplex` at ``v`` (valid off the kinks)."""
    w = project_simplex(v)
    s = (w > 0).astype(float)
    return np.diag(s) - np.outer(s, s) / s.sum()


def is_simplex(alpha, tol: float = 1e-9) -> bool:
    a = np.asarray(alpha, dtype=float)
    return bool(np.all(a >= -tol) and abs(a.sum() - 1.0) <= tol)


@dataclass(frozen=True, eq=False)
class ShapeBasis:
    fields: tuple[SdfField, ...]
    diameters: Array
    names: tuple[str, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "fields", tuple(self.fields))
        d = np.asarray(self.diameters, dtype=float)
        if len(self.fields) < 1 or d.shape != (len(self.fields),) or np.any(d <= 0):
            raise ValueError("basis needs K >= 1 fields with positive diameters")
        object.__setattr__(self, "diameters", d)
        if not self.names:
            object.__setattr__(self, "names", tuple(f"shape{k}" for k in range(len(self.fields))))

    @classmethod
    def from_fields(cls, fields, names=(), seed: int = 0) -> "ShapeBasis":
        fields = tuple(fields)
        diam = [sdf.bounding_box_diameter(f, seed=seed) for f in fields]
        return cls(fields, np.array(diam), tuple(names))

    @property
    def K(self) -> int:
        return len(self.fields)

    def values(self, p) -> Array:
        """``(..., K)`` array of basis field values."""
        return np.stack([f.evaluate(p) for f in self.fields], axis=-1)

    def gradients(self, p) -> Array:
        """``(..., K, 3)`` array of basis field gradients."""
        return np.stack([f.gradient(p) for f in self.fields], axis=-2)

    def values_and_gradients(self, p) -> tuple[Array, Array]:
        vg = [f.value_and_gradient(p) for f in self.fields]
        return np.stack([v for v, _ in vg], axis=-1), np.stack([g for _, g in vg], axis=-2)

    def to_manifest(self) -> dict:
        return {
            "K": self.K,
            "shapes": [
                {"name": n, "field": f.to_dict(), "diameter": float(d)}
                for n, f, d in zip(self.names, self.fields, self.diameters)
            ],
        }

    @classmethod
    def from_manifest(cls, m: dict) -> "ShapeBasis":
        shapes = m["shapes"]
        return cls(
            tuple(sdf.field_from_dict(s["field"]) for s in shapes),
            np.array([s["diameter"] for s in shapes]),
            tuple(s.get("name", f"shape{i}") for i, s in enumerate(shapes)),
        )

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_manifest(), indent=2))

    @classmethod
    def load(cls, path) -> "ShapeBasis":
        return cls.from_manifest(json.loads(Path(path).read_text()))


# ---------------------------------------------------------------------------
# Decoders
# ---------------------------------------------------------------------------


class Decoder:
    """Maps a code ``alpha`` (K-vector) to a signed distance field."""

    basis: ShapeBasis

    def weights(self, alpha) -> Array:
        raise NotImplementedError

    def weights_jacobian(self, alpha) -> Array:
        """``(K, K)`` matrix ``d w_k / d alpha_j``."""
        raise NotImplementedError

    def evaluate(self, alpha, p) -> Array:
        return self.basis.values(p) @ self.weights(alpha)

    def spatial_gradient(self, alpha, p) -> Array:
        return np.einsum("...kc,k->...c", self.basis.gradients(p), self.weights(alpha))

    def value_and_spatial_gradient(self, alpha, p) -> tuple[Array, Array]:
        w = self.weights(alpha)
        v, g = self.basis.values_and_gradients(p)
        return v @ w, np.einsum("...kc,k->...c", g, w)

    def grad_code(self, alpha, p) -> Array:
        """``(..., K)`` derivative of the decoded value w.r.t. the code."""
        return self.basis.values(p) @ self.weights_jacobian(alpha)

    def value_and_grad_code(self, alpha, p) -> tuple[Array, Array]:
        v = self.basis.values(p)
        return v @ self.weights(alpha), v @ self.weights_jacobian(alpha)

    def decode(self, alpha) -> "DecodedField":
        return DecodedField(self, np.array(alpha, dtype=float))

    def to_dict(self) -> dict:
        raise NotImplementedError


@dataclass(frozen=True, eq=False)
class LinearBlend(Decoder):
    """``f(p | a) = sum_k a_k f_k(p)``."""

    basis: ShapeBasis

    def weights(self, alpha) -> Array:
        return np.asarray(alpha, dtype=float)

    def weights_jacobian(self, alpha) -> Array:
        return np.eye(self.basis.K)

    def grad_code(self, alpha, p) -> Array:
        return self.basis.values(p)

    def to_dict(self):
        return {"kind": "linear"}


@dataclass(frozen=True, eq=False)
class KernelBlend(Decoder):
    """``f(p | a) = sum_k w_k(a) f_k(p)``, ``w = softmax(-|a - e_k|^2 / tau)``.

    Nonlinear in the code; at a vertex ``e_k`` the other weights are at most
    ``exp(-2 / tau)``.
    """

    basis: ShapeBasis
    tau: float = 0.05

    def _scores(self, alpha):
        a = np.asarray(alpha, dtype=float)
        diff = a[None, :] - np.eye(self.basis.K)
        return -np.sum(diff**2, axis=1) / self.tau, diff

    def weights(self, alpha) -> Array:
        s, _ = self._scores(alpha)
        e = np.exp(s - s.max())
        return e / e.sum()

    def weights_jacobian(self, alpha) -> Array:
        s, diff = self._scores(alpha)
        w = self.weights(alpha)
        ds = -2.0 * diff / self.tau  # ds_k / d alpha
        return w[:, None] * (ds - w @ ds)

    def to_dict(self):
        return {"kind": "kernel", "tau": self.tau}


def decoder_from_dict(d: dict, basis: ShapeBasis) -> Decoder:
    if d["kind"] == "linear":
        return LinearBlend(basis)
    if d["kind"] == "kernel":
        return KernelBlend(basis, d.get("tau", 0.05))
    raise ValueError(f"unknown decoder {d['kind']!r}")


@dataclass(frozen=True, eq=False)
class DecodedField(SdfField):
    decoder: Decoder
    alpha: Array

    def evaluate(self, p) -> Array:
        return self.decoder.evaluate(self.alpha, p)

    def gradient(self, p) -> Array:
        return self.decoder.spatial_gradient(self.alpha, p)

    def value_and_gradient(self, p):
        return self.decoder.value_and_spatial_gradient(self.alpha, p)

    def _bounds(self):
        w = self.decoder.weights(self.alpha)
        boxes = [f.bounds for f, wk in zip(self.decoder.basis.fields, w) if abs(wk) > 1e-12]
        if not boxes:
            boxes = [f.bounds for f in self.decoder.basis.fields]
        return np.min([b[0] for b in boxes], axis=0), np.max([b[1] for b in boxes], axis=0)


def decode_eval(decoder: Decoder, alpha, p) -> Array:
    return decoder.evaluate(alpha, p)


def decode_grad_code(decoder: Decoder, alpha, p) -> Array:
    return decoder.grad_code(alpha, p)


# ---------------------------------------------------------------------------
# Active shape decoder
# ---------------------------------------------------------------------------


def build_F_matrix(Z, basis: ShapeBasis, h_est=None, decoder: Decoder | None = None) -> Array:
    """Rows ``[f(z_i | h_est), f_1(z_i), ..., f_K(z_i)]``.

    With ``h_est=None`` only the K basis columns are returned.
    """
    Z = np.atleast_2d(np.asarray(Z, dtype=float))
    cols = basis.values(Z)
    if h_est is None:
        return cols
    if decoder is None:
        raise ValueError("decoder required for the estimate column")
    return np.column_stack([decoder.evaluate(h_est, Z), cols])


def normalization_diag(basis: ShapeBasis, d0_diameter: float | None = None) -> Array:
    """Diagonal of D: inverse bounding-box diameters (estimate column first)."""
    d = 1.0 / basis.diameters
    if d0_diameter is None:
        return d
    return np.concatenate([[1.0 / d0_diameter], d])


def active_eval(coeffs, F_row, D=None) -> Array:
    """Active-shape value ``F_row · D · c`` (``D`` given as its diagonal)."""
    c = np.asarray(coeffs, dtype=float)
    F_row = np.asarray(F_row, dtype=float)
    d = np.ones_like(c) if D is None else np.asarray(D, dtype=float)
    if d.ndim == 2:
        d = np.diag(d)
    return F_row @ (d * c)


# ---------------------------------------------------------------------------
# Ready-made bases
# ---------------------------------------------------------------------------


def _capsule_handle():
    body = sdf.Capsule([0, 0, -0.25], [0, 0, 0.25], 0.3)
    handle = sdf.Transformed(sdf.Torus(0.15, 0.05), rotation_about([1, 0, 0], np.pi / 2), [0.32, 0.0, 0.05])
    return sdf.Union(body, handle, k=0.05)


def _box_knob():
    return sdf.Union(sdf.Box([0.35, 0.25, 0.2]), sdf.Sphere(0.15, [0.3, 0.2, 0.15]), k=0.05)


def _bent_capsule():
    a = sdf.Capsule([-0.35, -0.1, 0.0], [0.3, -0.1, 0.0], 0.18)
    b = sdf.Capsule([0.3, -0.1, 0.0], [0.3, 0.3, 0.15], 0.14)
    return sdf.Union(a, b, k=0.05)


def _blob():
    body = sdf.Sphere(0.38, [0.0, 0.0, 0.0])
    bump = sdf.Capsule([0.1, 0.1, 0.2], [-0.25, 0.3, 0.35], 0.12)
    return sdf.Union(body, bump, k=0.08)


def _wedge():
    core = sdf.Box([0.3, 0.3, 0.12], [0.0, 0.0, -0.1])
    fin = sdf.Capsule([-0.25, -0.25, 0.0], [0.2, 0.25, 0.25], 0.1)
    return sdf.Union(core, fin, k=0.06)


def _ring_post():
    ring = sdf.Torus(0.3, 0.09)
    post = sdf.Capsule([0.3, 0.0, 0.0], [0.3, 0.0, 0.35], 0.09)
    return sdf.Union(ring, post, k=0.05)


_ASYMMETRIC = [
    ("mug", _capsule_handle),
    ("box_knob", _box_knob),
    ("bent_capsule", _bent_capsule),
    ("blob", _blob),
    ("wedge", _wedge),
    ("ring_post", _ring_post),
]


def asymmetric_fields(K: int) -> tuple[list[SdfField], list[str]]:
    """K distinct shapes without continuous or discrete rotational symmetry.

    The first six are hand-built; beyond that, scaled and rotated copies of
    them are appended.
    """
    fields, names = [], []
    for k in range(K):
        name, make = _ASYMMETRIC[k % len(_ASYMMETRIC)]
        f = make()
        if k >= len(_ASYMMETRIC):
            rep = k // len(_ASYMMETRIC)
            R = rotation_about([1.0, 0.5, 0.3 * rep], 0.7 * rep)
            f = sdf.Transformed(f, R)
            name = f"{name}_{rep}"
        fields.append(f)
        names.append(name)
    return fields, names


def asymmetric_basis(K: int = 4) -> ShapeBasis:
    fields, names = asymmetric_fields(K)
    return ShapeBasis.from_fields(fields, names)


def bump_basis(radius: float = 0.4, bump_radius: float = 0.12) -> ShapeBasis:
    """Sphere and the same sphere with a small bump on the +x side."""
    sphere = sdf.Sphere(radius)
    bumped = sdf.Union(sdf.Sphere(radius), sdf.Sphere(bump_radius, [radius + 0.05, 0.0, 0.0]))
    return ShapeBasis.from_fields([sphere, bumped], ["sphere", "bumped_sphere"])


def basis_from_config(cfg: dict) -> ShapeBasis:
    """Build a basis from a config block: ``{"kind": "asymmetric", "K": 4}`` etc."""
    kind = cfg.get("kind", "asymmetric")
    if kind == "asymmetric":
        return asymmetric_basis(int(cfg.get("K", 4)))
    if kind == "bump":
        return bump_basis()
    if kind == "manifest":
        return ShapeBasis.from_manifest(cfg["manifest"])
    if kind == "fields":
        return ShapeBasis.from_fields([sdf.field_from_dict(d) for d in cfg["fields"]])
    raise ValueError(f"unknown basis kind {kind!r}")


def eikonal_violation_fraction(decoder: Decoder, alpha, n: int = 500, seed: int = 0, band: float = 0.05) -> float:
    """Fraction of probes near the decoded surface with ``|grad f|`` outside [0.5, 2].

    Probes are basis-surface samples jittered by up to ``band``; for
    extrapolated codes the decoded surface may not exist, so the basis
    surfaces serve as a code-independent probe set.
    """
    rng = np.random.default_rng(seed)
    per = max(1, n // decoder.basis.K)
    pts = np.concatenate([sdf.sample_surface(f, per, seed=seed + i) for i, f in enumerate(decoder.basis.fields)])
    pts = pts + rng.uniform(-band, band, size=pts.shape)
    g = np.linalg.norm(decoder.spatial_gradient(alpha, pts), axis=-1)
    return float(np.mean((g < 0.5) | (g > 2.0)))
