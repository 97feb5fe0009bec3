"""Signed distance fields: analytic primitives, CSG combinators, baked grids.

Every field maps a ``(..., 3)`` point array to a ``(...,)`` array of signed
distances (negative inside, positive outside) and exposes a spatial gradient
of shape ``(..., 3)``.  Fields are immutable once built.

Primitive formulas follow the standard closed forms (sphere, box, torus,
capsule).  The superquadric uses a radial-scaling approximation: its value is
the distance to the surface measured along the ray through the origin, which
has the correct sign and zero set and bounds the true distance from above in
magnitude.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import numpy.typing as npt

Array = npt.NDArray[np.float64]

SURFACE_TOL = 1e-6
H_FD = 1e-4


class SurfaceNotFound(RuntimeError):
    """Raised when a field's zero level set cannot be located."""


def _as_points(p) -> Array:
    p = np.asarray(p, dtype=float)
    if p.shape[-1] != 3:
        raise ValueError(f"expected points with trailing dimension 3, got {p.shape}")
    return p


def fd_gradient(fn, p: Array, h: float = H_FD) -> Array:
    """Central finite-difference gradient of a batched scalar field."""
    p = _as_points(p)
    g = np.empty(p.shape, dtype=float)
    for k in range(3):
        e = np.zeros(3)
        e[k] = h
        g[..., k] = (fn(p + e) - fn(p - e)) / (2.0 * h)
    return g


class SdfField:
    """Base class for signed distance fields.

    Subclasses implement :meth:`evaluate` and :meth:`_bounds`; the default
    :meth:`gradient` falls back to central differences with step ``H_FD``.
    """

    def evaluate(self, p) -> Array:
        raise NotImplementedError

    def gradient(self, p) -> Array:
        return fd_gradient(self.evaluate, _as_points(p))

    def value_and_gradient(self, p) -> tuple[Array, Array]:
        return self.evaluate(p), self.gradient(p)

    def __call__(self, p) -> Array:
        return self.evaluate(p)

    def _bounds(self) -> tuple[Array, Array]:
        raise NotImplementedError

    @property
    def bounds(self) -> tuple[Array, Array]:
        """Axis-aligned box ``(lo, hi)`` enclosing the zero level set."""
        return self._bounds()

    def to_dict(self) -> dict:
        raise NotImplementedError


# ---------------------------------------------------------------------------
# Analytic primitives
# ---------------------------------------------------------------------------


def _vec3(v) -> Array:
    a = np.asarray(v, dtype=float).reshape(3)
    if not np.all(np.isfinite(a)):
        raise ValueError("non-finite vector")
    return a


@dataclass(frozen=True, eq=False)
class Sphere(SdfField):
    radius: float
    offset: Array = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        if not self.radius > 0:
            raise ValueError("radius must be positive")
        object.__setattr__(self, "offset", _vec3(self.offset))

    def evaluate(self, p) -> Array:
        q = _as_points(p) - self.offset
        return np.linalg.norm(q, axis=-1) - self.radius

    def gradient(self, p) -> Array:
        q = _as_points(p) - self.offset
        n = np.linalg.norm(q, axis=-1, keepdims=True)
        # the centre is on the medial axis; pick +x there
        safe = np.where(n > 0, n, 1.0)
        g = q / safe
        return np.where(n > 0, g, np.array([1.0, 0.0, 0.0]))

    def _bounds(self):
        r = np.full(3, self.radius)
        return self.offset - r, self.offset + r

    def to_dict(self):
        return {"kind": "sphere", "radius": self.radius, "offset": self.offset.tolist()}


@dataclass(frozen=True, eq=False)
class Box(SdfField):
    half_extents: Array
    offset: Array = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        he = _vec3(self.half_extents)
        if np.any(he <= 0):
            raise ValueError("half extents must be positive")
        object.__setattr__(self, "half_extents", he)
        object.__setattr__(self, "offset", _vec3(self.offset))

    def evaluate(self, p) -> Array:
        q = np.abs(_as_points(p) - self.offset) - self.half_extents
        outside = np.linalg.norm(np.maximum(q, 0.0), axis=-1)
        inside = np.minimum(np.max(q, axis=-1), 0.0)
        return outside + inside

    def gradient(self, p) -> Array:
        d = _as_points(p) - self.offset
        s = np.where(d >= 0, 1.0, -1.0)
        q = np.abs(d) - self.half_extents
        qpos = np.maximum(q, 0.0)
        n = np.linalg.norm(qpos, axis=-1, keepdims=True)
        g_out = s * qpos / np.where(n > 0, n, 1.0)
        k = np.argmax(q, axis=-1)
        g_in = np.zeros_like(d)
        np.put_along_axis(g_in, k[..., None], np.take_along_axis(s, k[..., None], -1), -1)
        return np.where(n > 0, g_out, g_in)

    def _bounds(self):
        return self.offset - self.half_extents, self.offset + self.half_extents

    def to_dict(self):
        return {
            "kind": "box",
            "half_extents": self.half_extents.tolist(),
            "offset": self.offset.tolist(),
        }


@dataclass(frozen=True, eq=False)
class Torus(SdfField):
    """Torus in the xy-plane: ring radius ``major``, tube radius ``minor``."""

    major: float
    minor: float
    offset: Array = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        if not (self.major > 0 and self.minor > 0):
            raise ValueError("torus radii must be positive")
        object.__setattr__(self, "offset", _vec3(self.offset))

    def _tube_vector(self, p):
        q = _as_points(p) - self.offset
        rho = np.hypot(q[..., 0], q[..., 1])
        return q, rho, np.stack([rho - self.major, q[..., 2]], axis=-1)

    def evaluate(self, p) -> Array:
        _, _, w = self._tube_vector(p)
        return np.linalg.norm(w, axis=-1) - self.minor

    def gradient(self, p) -> Array:
        q, rho, w = self._tube_vector(p)
        wn = np.linalg.norm(w, axis=-1)
        wn = np.where(wn > 0, wn, 1.0)
        safe_rho = np.where(rho > 0, rho, 1.0)
        cx = np.where(rho > 0, q[..., 0] / safe_rho, 1.0)
        cy = np.where(rho > 0, q[..., 1] / safe_rho, 0.0)
        a = w[..., 0] / wn
        return np.stack([a * cx, a * cy, w[..., 1] / wn], axis=-1)

    def _bounds(self):
        r = self.major + self.minor
        ext = np.array([r, r, self.minor])
        return self.offset - ext, self.offset + ext

    def to_dict(self):
        return {
            "kind": "torus",
            "major": self.major,
            "minor": self.minor,
            "offset": self.offset.tolist(),
        }


@dataclass(frozen=True, eq=False)
class Capsule(SdfField):
    """Segment ``a``-``b`` swept by a ball of ``radius``."""

    a: Array
    b: Array
    radius: float
    offset: Array = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        if not self.radius > 0:
            raise ValueError("radius must be positive")
        for name in ("a", "b", "offset"):
            object.__setattr__(self, name, _vec3(getattr(self, name)))

    def _closest(self, p):
        q = _as_points(p) - self.offset
        ba = self.b - self.a
        denom = float(ba @ ba)
        t = np.zeros(q.shape[:-1]) if denom == 0 else np.clip(((q - self.a) @ ba) / denom, 0.0, 1.0)
        return q - (self.a + t[..., None] * ba)

    def evaluate(self, p) -> Array:
        return np.linalg.norm(self._closest(p), axis=-1) - self.radius

    def gradient(self, p) -> Array:
        return self.value_and_gradient(p)[1]

    def value_and_gradient(self, p):
        d = self._closest(p)
        n = np.sqrt(np.einsum("...c,...c->...", d, d))[..., None]
        g = np.where(n > 0, d / np.where(n > 0, n, 1.0), np.array([1.0, 0.0, 0.0]))
        return n[..., 0] - self.radius, g

    def _bounds(self):
        lo = np.minimum(self.a, self.b) - self.radius
        hi = np.maximum(self.a, self.b) + self.radius
        return self.offset + lo, self.offset + hi

    def to_dict(self):
        return {
            "kind": "capsule",
            "a": self.a.tolist(),
            "b": self.b.tolist(),
            "radius": self.radius,
            "offset": self.offset.tolist(),
        }


@dataclass(frozen=True, eq=False)
class Superquadric(SdfField):
    """Superquadric with semi-axes ``scales`` and shape exponents ``eps1``, ``eps2``.

    The value is ``|p| (1 - G(p)^(-eps1/2))`` with ``G`` the inside-outside
    function, i.e. the signed radial distance to the surface.  It is exact for
    spheres; in general ``|f(p)| >= dist(p, surface)`` with equality along
    the principal axes, and the relative overestimate grows with the
    anisotropy of ``scales``.  The gradient is taken numerically.
    """

    scales: Array
    eps1: float = 1.0
    eps2: float = 1.0
    offset: Array = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        s = _vec3(self.scales)
        if np.any(s <= 0) or not (self.eps1 > 0 and self.eps2 > 0):
            raise ValueError("superquadric parameters must be positive")
        object.__setattr__(self, "scales", s)
        object.__setattr__(self, "offset", _vec3(self.offset))

    def evaluate(self, p) -> Array:
        q = _as_points(p) - self.offset
        u = np.abs(q) / self.scales
        e1, e2 = self.eps1, self.eps2
        xy = (u[..., 0] ** (2 / e2) + u[..., 1] ** (2 / e2)) ** (e2 / e1)
        g = xy + u[..., 2] ** (2 / e1)
        r = np.linalg.norm(q, axis=-1)
        with np.errstate(divide="ignore", invalid="ignore"):
            scale = np.where(g > 0, g ** (-e1 / 2), np.inf)
            out = r * (1.0 - scale)
        return np.where(r > 0, out, -float(self.scales.min()))

    def _bounds(self):
        return self.offset - self.scales, self.offset + self.scales

    def to_dict(self):
        return {
            "kind": "superquadric",
            "scales": self.scales.tolist(),
            "eps1": self.eps1,
            "eps2": self.eps2,
            "offset": self.offset.tolist(),
        }


# ---------------------------------------------------------------------------
# Combinators
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class Transformed(SdfField):
    """Rigidly moved field: ``f(p) = child(R^T (p - t))``."""

    child: SdfField
    rotation: Array
    translation: Array = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=float).reshape(3, 3)
        if not np.allclose(R.T @ R, np.eye(3), atol=1e-9) or np.linalg.det(R) < 0:
            raise ValueError("rotation must be a proper orthonormal matrix")
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", _vec3(self.translation))

    def _local(self, p):
        return (_as_points(p) - self.translation) @ self.rotation

    def evaluate(self, p) -> Array:
        return self.child.evaluate(self._local(p))

    def gradient(self, p) -> Array:
        return self.child.gradient(self._local(p)) @ self.rotation.T

    def value_and_gradient(self, p):
        v, g = self.child.value_and_gradient(self._local(p))
        return v, g @ self.rotation.T

    def _bounds(self):
        lo, hi = self.child.bounds
        corners = np.array([[x, y, z] for x in (lo[0], hi[0]) for y in (lo[1], hi[1]) for z in (lo[2], hi[2])])
        world = corners @ self.rotation.T + self.translation
        return world.min(axis=0), world.max(axis=0)

    def to_dict(self):
        return {
            "kind": "transformed",
            "child": self.child.to_dict(),
            "rotation": self.rotation.tolist(),
            "translation": self.translation.tolist(),
        }


@dataclass(frozen=True, eq=False)
class Union(SdfField):
    """Hard (``k == 0``) or polynomial smooth (``k > 0``) union of two fields."""

    first: SdfField
    second: SdfField
    k: float = 0.0

    def _blend(self, a, b):
        if self.k <= 0:
            return np.where(a <= b, 1.0, 0.0)
        return np.clip(0.5 + 0.5 * (b - a) / self.k, 0.0, 1.0)

    def evaluate(self, p) -> Array:
        a, b = self.first.evaluate(p), self.second.evaluate(p)
        if self.k <= 0:
            return np.minimum(a, b)
        h = self._blend(a, b)
        return h * a + (1.0 - h) * b - self.k * h * (1.0 - h)

    def gradient(self, p) -> Array:
        return self.value_and_gradient(p)[1]

    def value_and_gradient(self, p):
        # d/da = h and d/db = 1 - h for the polynomial smooth minimum
        a, ga = self.first.value_and_gradient(p)
        b, gb = self.second.value_and_gradient(p)
        h = self._blend(a, b)
        if self.k <= 0:
            v = np.minimum(a, b)
        else:
            v = h * a + (1.0 - h) * b - self.k * h * (1.0 - h)
        h = h[..., None]
        return v, h * ga + (1.0 - h) * gb

    def _bounds(self):
        (l1, h1), (l2, h2) = self.first.bounds, self.second.bounds
        return np.minimum(l1, l2), np.maximum(h1, h2)

    def to_dict(self):
        return {"kind": "union", "first": self.first.to_dict(), "second": self.second.to_dict(), "k": self.k}


@dataclass(frozen=True, eq=False)
class Constant(SdfField):
    """Field with a constant value; has no surface unless the value is 0."""

    value: float
    lo: Array = field(default_factory=lambda: -np.ones(3))
    hi: Array = field(default_factory=lambda: np.ones(3))

    def evaluate(self, p) -> Array:
        return np.full(_as_points(p).shape[:-1], float(self.value))

    def gradient(self, p) -> Array:
        return np.zeros(_as_points(p).shape)

    def _bounds(self):
        return np.asarray(self.lo, float), np.asarray(self.hi, float)

    def to_dict(self):
        return {"kind": "constant", "value": self.value, "lo": list(map(float, self.lo)), "hi": list(map(float, self.hi))}


# ---------------------------------------------------------------------------
# Baked grids
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class GridSdf(SdfField):
    """Field sampled on a regular grid and trilinearly interpolated.

    ``values`` is indexed ``[i, j, k]`` along x, y, z.  Queries outside the
    bounds return the value at the clamped point plus the distance to the box.
    """

    lo: Array
    hi: Array
    values: Array

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.ndim != 3 or min(v.shape) < 2:
            raise ValueError("grid needs at least 2 samples per axis")
        lo, hi = _vec3(self.lo), _vec3(self.hi)
        if np.any(hi <= lo):
            raise ValueError("empty grid bounds")
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "_nodal", None)
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    @classmethod
    def bake(cls, source: SdfField, lo, hi, resolution) -> "GridSdf":
        res = np.broadcast_to(np.asarray(resolution, dtype=int), (3,))
        axes = [np.linspace(l, h, n) for l, h, n in zip(_vec3(lo), _vec3(hi), res)]
        pts = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)
        return cls(lo, hi, source.evaluate(pts))

    @property
    def resolution(self) -> tuple[int, int, int]:
        return tuple(self.values.shape)

    @property
    def voxel_size(self) -> Array:
        return (self.hi - self.lo) / (np.array(self.values.shape) - 1)

    def _interp(self, table: Array, c: Array) -> Array:
        """Trilinear interpolation of ``table[i, j, k, ...]`` at in-box points ``c``."""
        n = np.array(self.values.shape)
        u = (c - self.lo) / self.voxel_size
        i0 = np.clip(np.floor(u).astype(int), 0, n - 2)
        f = u - i0
        out = np.zeros(c.shape[:-1] + table.shape[3:])
        extra = (None,) * (table.ndim - 3)
        for dx in (0, 1):
            wx = f[..., 0] if dx else 1.0 - f[..., 0]
            for dy in (0, 1):
                wy = f[..., 1] if dy else 1.0 - f[..., 1]
                for dz in (0, 1):
                    wz = f[..., 2] if dz else 1.0 - f[..., 2]
                    w = (wx * wy * wz)[(...,) + extra]
                    out += w * table[i0[..., 0] + dx, i0[..., 1] + dy, i0[..., 2] + dz]
        return out

    def evaluate(self, p) -> Array:
        p = _as_points(p)
        c = np.clip(p, self.lo, self.hi)
        return self._interp(self.values, c) + np.linalg.norm(p - c, axis=-1)

    def gradient(self, p) -> Array:
        """Trilinear interpolation of nodal central-difference gradients.

        Outside the box the clamped axes drop out and the unit direction
        away from the box is added.
        """
        p = _as_points(p)
        c = np.clip(p, self.lo, self.hi)
        if self._nodal is None:
            nodal = np.stack(np.gradient(self.values, *self.voxel_size), axis=-1)
            object.__setattr__(self, "_nodal", nodal)
        g = self._interp(self._nodal, c)
        d = p - c
        dist = np.linalg.norm(d, axis=-1, keepdims=True)
        inside_axis = (p >= self.lo) & (p <= self.hi)
        return np.where(inside_axis, g, 0.0) + np.where(dist > 0, d / np.where(dist > 0, dist, 1.0), 0.0)

    def _bounds(self):
        return self.lo.copy(), self.hi.copy()

    def to_dict(self):
        raise TypeError("grid fields serialize through save_grid/load_grid")


_GSDF_MAGIC = b"GSDF"
_GSDF_VERSION = 1


def save_grid(grid: GridSdf, path) -> None:
    """Write ``grid`` in the little-endian GSDF binary layout (x fastest)."""
    nx, ny, nz = grid.resolution
    header = _GSDF_MAGIC + struct.pack("<I", _GSDF_VERSION)
    header += struct.pack("<6d", *grid.lo, *grid.hi)
    header += struct.pack("<3I", nx, ny, nz)
    body = np.ascontiguousarray(grid.values.transpose(2, 1, 0), dtype="<f4").tobytes()
    Path(path).write_bytes(header + body)


def load_grid(path) -> GridSdf:
    data = Path(path).read_bytes()
    if data[:4] != _GSDF_MAGIC:
        raise ValueError("not a GSDF file")
    (version,) = struct.unpack_from("<I", data, 4)
    if version != _GSDF_VERSION:
        raise ValueError(f"unsupported GSDF version {version}")
    bounds = struct.unpack_from("<6d", data, 8)
    nx, ny, nz = struct.unpack_from("<3I", data, 56)
    vals = np.frombuffer(data, dtype="<f4", offset=68, count=nx * ny * nz)
    vals = vals.reshape(nz, ny, nx).transpose(2, 1, 0).astype(float)
    return GridSdf(np.array(bounds[:3]), np.array(bounds[3:]), vals)


# ---------------------------------------------------------------------------
# Surface sampling
# ---------------------------------------------------------------------------


def project_to_surface(fld: SdfField, p: Array, steps: int = 20, tol: float = SURFACE_TOL):
    """Newton-project points onto the zero set; returns ``(points, converged)``."""
    p = np.array(p, dtype=float)
    done = np.zeros(p.shape[0], dtype=bool)
    for _ in range(steps):
        act = ~done
        if not act.any():
            break
        q = p[act]
        val = fld.evaluate(q)
        ok = np.abs(val) < tol
        idx = np.flatnonzero(act)
        done[idx[ok]] = True
        q, val = q[~ok], val[~ok]
        if q.size == 0:
            break
        g = fld.gradient(q)
        g2 = np.einsum("ij,ij->i", g, g)
        g2 = np.where(g2 > 1e-12, g2, np.nan)
        p[idx[~ok]] = q - (val / g2)[:, None] * g
    act = ~done & np.all(np.isfinite(p), axis=1)
    if act.any():
        done[np.flatnonzero(act)[np.abs(fld.evaluate(p[act])) < tol]] = True
    return p, done


def sample_surface(
    fld: SdfField,
    n: int,
    seed: int = 0,
    tol: float = SURFACE_TOL,
    max_batches: int = 20,
) -> Array:
    """Draw ``n`` points with ``|f| < tol`` by Newton projection of uniform seeds.

    Seeds are drawn in the field's bounds padded by 10%.  Raises
    :class:`SurfaceNotFound` if too few seeds converge.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(seed)
    lo, hi = fld.bounds
    pad = 0.1 * (hi - lo) + 1e-3
    lo, hi = lo - pad, hi + pad
    got: list[Array] = []
    count = 0
    batch = max(2 * n, 256)
    for _ in range(max_batches):
        seeds = rng.uniform(lo, hi, size=(batch, 3))
        # project to a much tighter tolerance when Newton allows it
        pts, _ = project_to_surface(fld, seeds, steps=30, tol=min(tol, 1e-13))
        ok = np.all(np.isfinite(pts), axis=1)
        ok[ok] = np.abs(fld.evaluate(pts[ok])) < tol
        pts = pts[ok]
        got.append(pts)
        count += len(pts)
        if count >= n:
            return np.concatenate(got)[:n]
    raise SurfaceNotFound(f"only {count} of {n} surface points converged")


def bounding_box_diameter(fld: SdfField, n: int = 2000, seed: int = 0) -> float:
    """Diagonal of the axis-aligned box around ``n`` surface samples."""
    pts = sample_surface(fld, max(n, 1000), seed=seed)
    return float(np.linalg.norm(pts.max(axis=0) - pts.min(axis=0)))


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------


def field_from_dict(d: dict) -> SdfField:
    kind = d["kind"]
    if kind == "sphere":
        return Sphere(d["radius"], d.get("offset", [0, 0, 0]))
    if kind == "box":
        return Box(d["half_extents"], d.get("offset", [0, 0, 0]))
    if kind == "torus":
        return Torus(d["major"], d["minor"], d.get("offset", [0, 0, 0]))
    if kind == "capsule":
        return Capsule(d["a"], d["b"], d["radius"], d.get("offset", [0, 0, 0]))
    if kind == "superquadric":
        return Superquadric(d["scales"], d.get("eps1", 1.0), d.get("eps2", 1.0), d.get("offset", [0, 0, 0]))
    if kind == "transformed":
        return Transformed(field_from_dict(d["child"]), d["rotation"], d.get("translation", [0, 0, 0]))
    if kind == "union":
        return Union(field_from_dict(d["first"]), field_from_dict(d["second"]), d.get("k", 0.0))
    if kind == "constant":
        return Constant(d["value"], np.asarray(d["lo"]), np.asarray(d["hi"]))
    raise ValueError(f"unknown field kind {kind!r}")
