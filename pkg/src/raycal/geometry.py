"""Triangle-mesh scenes, ray casting, mirroring and surface sampling.

Intersection is a brute-force scan over all triangles (vectorized with
numpy). Desk-scale scenes have tens of triangles, so the linear scan doubles
as its own correctness reference.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .constants import BARYCENTRIC_TOL, OCCLUSION_EPS

MATERIAL_MODELS = ("fixed", "embedding", "neural")
FIXED_KEYS = ("eps_r", "sigma", "S", "Kx")


class SceneError(ValueError):
    pass


@dataclass(frozen=True)
class Ray:
    origin: np.ndarray
    direction: np.ndarray
    t_min: float = 0.0
    t_max: float = np.inf

    def __post_init__(self):
        if not (0.0 <= self.t_min < self.t_max):
            raise ValueError(f"invalid ray interval [{self.t_min}, {self.t_max}]")


@dataclass(frozen=True)
class Hit:
    triangle_id: int
    t: float
    point: np.ndarray
    barycentric: tuple


@dataclass(frozen=True)
class Aabb:
    center: np.ndarray
    edge: float

    @property
    def degenerate(self) -> bool:
        return not self.edge > 0.0

    def normalize(self, p):
        """Map points into the unit cube centred at the origin."""
        if self.degenerate:
            raise SceneError("cannot normalize with a degenerate bounding box")
        return (np.asarray(p, dtype=float) - self.center) / self.edge


@dataclass
class Scene:
    """Immutable triangle mesh with one material name per triangle."""

    vertices: np.ndarray
    triangles: np.ndarray
    triangle_material: np.ndarray
    materials: list = field(default_factory=list)  # list of dicts with at least "name" and "model"

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=float).reshape(-1, 3)
        self.triangles = np.asarray(self.triangles, dtype=int).reshape(-1, 3)
        self.triangle_material = np.asarray(self.triangle_material, dtype=int).reshape(-1)
        if len(self.triangle_material) != len(self.triangles):
            raise SceneError("one material index per triangle required")
        if len(self.triangles):
            if self.triangles.min() < 0 or self.triangles.max() >= len(self.vertices):
                raise SceneError("triangle references a missing vertex")
            if self.triangle_material.min() < 0 or self.triangle_material.max() >= len(self.materials):
                raise SceneError("triangle references a missing material")
        v = self.vertices[self.triangles] if len(self.triangles) else np.zeros((0, 3, 3))
        self.v0 = v[:, 0]
        self.e1 = v[:, 1] - v[:, 0]
        self.e2 = v[:, 2] - v[:, 0]
        cross = np.cross(self.e1, self.e2)
        norm = np.linalg.norm(cross, axis=1)
        if np.any(norm <= 0):
            bad = int(np.argmin(norm))
            raise SceneError(f"triangle {bad} is degenerate")
        self.normals = cross / norm[:, None] if len(norm) else np.zeros((0, 3))
        self.areas = 0.5 * norm
        for arr in (self.vertices, self.triangles, self.triangle_material, self.v0, self.e1, self.e2,
                    self.normals, self.areas):
            arr.setflags(write=False)

    @property
    def n_triangles(self) -> int:
        return len(self.triangles)

    @property
    def material_names(self) -> list:
        return [m["name"] for m in self.materials]

    def material_of(self, triangle_id: int) -> str:
        return self.materials[self.triangle_material[triangle_id]]["name"]

    @property
    def total_area(self) -> float:
        return float(self.areas.sum())

    # -- serialization -----------------------------------------------------

    @classmethod
    def from_dict(cls, data: dict) -> "Scene":
        unknown = set(data) - {"vertices", "triangles", "materials"}
        if unknown:
            raise SceneError(f"unknown scene keys: {sorted(unknown)}")
        materials = []
        for m in data.get("materials", []):
            extra = set(m) - {"name", "model", *FIXED_KEYS}
            if extra:
                raise SceneError(f"unknown material keys: {sorted(extra)}")
            model = m.get("model", "fixed")
            if model not in MATERIAL_MODELS:
                raise SceneError(f"material '{m.get('name')}' has unknown model '{model}'")
            if model == "fixed" and not all(k in m for k in FIXED_KEYS):
                raise SceneError(f"fixed material '{m.get('name')}' needs {FIXED_KEYS}")
            materials.append(dict(m, model=model))
        index = {m["name"]: i for i, m in enumerate(materials)}
        tris, mats = [], []
        for t in data.get("triangles", []):
            if set(t) - {"v", "material"}:
                raise SceneError(f"unknown triangle keys: {sorted(set(t) - {'v', 'material'})}")
            if t["material"] not in index:
                raise SceneError(f"unknown material '{t['material']}'")
            tris.append(t["v"])
            mats.append(index[t["material"]])
        return cls(np.array(data.get("vertices", []), dtype=float), np.array(tris, dtype=int),
                   np.array(mats, dtype=int), materials)

    def to_dict(self) -> dict:
        return {
            "vertices": self.vertices.tolist(),
            "triangles": [{"v": [int(i) for i in t], "material": self.materials[m]["name"]}
                          for t, m in zip(self.triangles, self.triangle_material)],
            "materials": [dict(m) for m in self.materials],
        }


def load_scene(path) -> Scene:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"scene not found: {path}")
    return Scene.from_dict(json.loads(path.read_text()))


def save_scene(scene: Scene, path) -> None:
    Path(path).write_text(json.dumps(scene.to_dict(), indent=1))


class MeshBuilder:
    """Accumulates quads/triangles into a :class:`Scene`."""

    def __init__(self):
        self.vertices: list = []
        self.triangles: list = []
        self.tri_material: list = []
        self.materials: list = []

    def material(self, name: str, model: str = "fixed", **params) -> str:
        if name not in [m["name"] for m in self.materials]:
            self.materials.append({"name": name, "model": model, **params})
        return name

    def triangle(self, a, b, c, material: str) -> None:
        base = len(self.vertices)
        self.vertices.extend([list(map(float, a)), list(map(float, b)), list(map(float, c))])
        self.triangles.append([base, base + 1, base + 2])
        self.tri_material.append([m["name"] for m in self.materials].index(material))

    def quad(self, a, b, c, d, material: str) -> None:
        """Planar quad a-b-c-d (in order) split along a-c."""
        self.triangle(a, b, c, material)
        self.triangle(a, c, d, material)

    def box(self, lo, hi, material: str) -> None:
        """Closed axis-aligned box."""
        x0, y0, z0 = lo
        x1, y1, z1 = hi
        p = [(x0, y0, z0), (x1, y0, z0), (x1, y1, z0), (x0, y1, z0),
             (x0, y0, z1), (x1, y0, z1), (x1, y1, z1), (x0, y1, z1)]
        for i, j, k, l in [(0, 3, 2, 1), (4, 5, 6, 7), (0, 1, 5, 4), (2, 3, 7, 6), (1, 2, 6, 5), (0, 4, 7, 3)]:
            self.quad(p[i], p[j], p[k], p[l], material)

    def build(self) -> Scene:
        return Scene(np.array(self.vertices).reshape(-1, 3), np.array(self.triangles, dtype=int).reshape(-1, 3),
                     np.array(self.tri_material, dtype=int), [dict(m) for m in self.materials])


# ---------------------------------------------------------------------------
# ray casting

def intersect_many(scene: Scene, origins, directions, t_min=0.0, t_max=np.inf):
    """Nearest hit for a batch of rays.

    Returns ``(tri_ids, t, u, v)``; ``tri_ids`` is -1 for a miss. Ties resolve
    to the lowest triangle id.
    """
    o = np.atleast_2d(np.asarray(origins, dtype=float))
    d = np.atleast_2d(np.asarray(directions, dtype=float))
    n = max(len(o), len(d))
    o = np.broadcast_to(o, (n, 3))
    d = np.broadcast_to(d, (n, 3))
    t_min = np.broadcast_to(np.asarray(t_min, dtype=float), (n,))
    t_max = np.broadcast_to(np.asarray(t_max, dtype=float), (n,))
    ids = np.full(n, -1, dtype=int)
    best_t = np.full(n, np.inf)
    best_u = np.zeros(n)
    best_v = np.zeros(n)
    if scene.n_triangles == 0 or n == 0:
        return ids, best_t, best_u, best_v
    chunk = max(1, 2_000_000 // max(1, scene.n_triangles))
    for lo in range(0, n, chunk):
        sl = slice(lo, min(n, lo + chunk))
        tid, t, u, v = _moller_trumbore(scene, o[sl], d[sl], t_min[sl], t_max[sl])
        ids[sl], best_t[sl], best_u[sl], best_v[sl] = tid, t, u, v
    return ids, best_t, best_u, best_v


def _mt_tables(scene):
    """Per-triangle constants for the expanded Moller-Trumbore test (cached on the scene)."""
    tab = scene.__dict__.get("_mt_tables")
    if tab is None:
        c = scene.vertices.mean(axis=0) if len(scene.vertices) else np.zeros(3)
        v0 = scene.v0 - c
        N = np.cross(scene.e1, scene.e2)
        tab = {"c": c, "N": N.T.copy(), "e1": scene.e1.T.copy(), "e2": scene.e2.T.copy(),
               "e2xv0": np.cross(scene.e2, v0).T.copy(), "v0xe1": np.cross(v0, scene.e1).T.copy(),
               "v0N": np.sum(v0 * N, axis=1)}
        scene.__dict__["_mt_tables"] = tab
    return tab


def _moller_trumbore(scene, o, d, t_min, t_max):
    # scalar-triple-product form of the Moller-Trumbore test: every term is a
    # (rays x 3) @ (3 x triangles) product, relative to the scene centroid
    tab = _mt_tables(scene)
    o = o - tab["c"]
    oxd = np.cross(o, d)
    det = -(d @ tab["N"])
    parallel = np.abs(det) < 1e-15
    inv = 1.0 / np.where(parallel, 1.0, det)
    u = (oxd @ tab["e2"] - d @ tab["e2xv0"]) * inv
    v = (-(oxd @ tab["e1"]) - d @ tab["v0xe1"]) * inv
    t = (o @ tab["N"] - tab["v0N"]) * inv
    ok = (~parallel & (u >= 0) & (v >= 0) & (u + v <= 1)
          & (t > t_min[:, None]) & (t < t_max[:, None]))
    t = np.where(ok, t, np.inf)
    tid = np.argmin(t, axis=1)
    rows = np.arange(len(o))
    best = t[rows, tid]
    hit = np.isfinite(best)
    return (np.where(hit, tid, -1), best, np.where(hit, u[rows, tid], 0.0), np.where(hit, v[rows, tid], 0.0))


def intersect(scene: Scene, ray: Ray) -> Hit | None:
    ids, t, u, v = intersect_many(scene, ray.origin, ray.direction, ray.t_min, ray.t_max)
    if ids[0] < 0:
        return None
    point = np.asarray(ray.origin, float) + t[0] * np.asarray(ray.direction, float)
    return Hit(int(ids[0]), float(t[0]), point, (1.0 - u[0] - v[0], float(u[0]), float(v[0])))


def occluded_many(scene: Scene, a, b, ignore=None, eps: float = OCCLUSION_EPS) -> np.ndarray:
    """Visibility test for segments ``a[i] -> b[i]``.

    ``ignore`` is an int array of shape (n, k) of triangle ids (use -1 for
    padding) that never block their segment. The segment is trimmed by
    ``eps`` metres at both ends.
    """
    a = np.atleast_2d(np.asarray(a, dtype=float))
    b = np.atleast_2d(np.asarray(b, dtype=float))
    n = max(len(a), len(b))
    a = np.broadcast_to(a, (n, 3))
    b = np.broadcast_to(b, (n, 3))
    if scene.n_triangles == 0 or n == 0:
        return np.zeros(n, dtype=bool)
    if ignore is None:
        ignore = np.full((n, 1), -1, dtype=int)
    ignore = np.asarray(ignore, dtype=int).reshape(n, -1)
    seg = b - a
    length = np.linalg.norm(seg, axis=1)
    d = seg / np.where(length > 0, length, 1.0)[:, None]
    out = np.zeros(n, dtype=bool)
    chunk = max(1, 2_000_000 // scene.n_triangles)
    tri = np.arange(scene.n_triangles)
    for lo in range(0, n, chunk):
        sl = slice(lo, min(n, lo + chunk))
        o, dd = a[sl], d[sl]
        e1, e2, v0 = scene.e1[None], scene.e2[None], scene.v0[None]
        pvec = np.cross(dd[:, None, :], e2)
        det = np.einsum("rtk,rtk->rt", np.broadcast_to(e1, pvec.shape), pvec)
        parallel = np.abs(det) < 1e-15
        inv = 1.0 / np.where(parallel, 1.0, det)
        tvec = o[:, None, :] - v0
        u = np.einsum("rtk,rtk->rt", tvec, pvec) * inv
        qvec = np.cross(tvec, np.broadcast_to(e1, tvec.shape))
        v = np.einsum("rk,rtk->rt", dd, qvec) * inv
        t = np.einsum("rtk,rtk->rt", np.broadcast_to(e2, qvec.shape), qvec) * inv
        blocked = (~parallel & (u >= 0) & (v >= 0) & (u + v <= 1)
                   & (t > eps) & (t < length[sl, None] - eps))
        skip = (tri[None, :, None] == ignore[sl, None, :]).any(axis=2)
        out[sl] = (blocked & ~skip).any(axis=1)
    return out


def occluded(scene: Scene, a, b, ignore=(), eps: float = OCCLUSION_EPS) -> bool:
    a, b = np.asarray(a, float), np.asarray(b, float)
    if np.allclose(a, b, atol=0.0, rtol=0.0):
        raise ValueError("segment endpoints coincide")
    ign = np.array([list(ignore) or [-1]], dtype=int)
    return bool(occluded_many(scene, a, b, ign, eps)[0])


# ---------------------------------------------------------------------------
# planes, mirroring, barycentrics

def mirror(point, scene: Scene, triangle_id: int) -> np.ndarray:
    """Reflect ``point`` across the supporting plane of a triangle."""
    n = scene.normals[triangle_id]
    p = np.asarray(point, dtype=float)
    return p - 2.0 * np.dot(p - scene.v0[triangle_id], n) * n


def barycentric(scene: Scene, triangle_id: int, p) -> tuple:
    """Barycentric coordinates of a point assumed to lie on the triangle's plane."""
    e1, e2 = scene.e1[triangle_id], scene.e2[triangle_id]
    w = np.asarray(p, float) - scene.v0[triangle_id]
    d11, d12, d22 = e1 @ e1, e1 @ e2, e2 @ e2
    w1, w2 = w @ e1, w @ e2
    den = d11 * d22 - d12 * d12
    u = (d22 * w1 - d12 * w2) / den
    v = (d11 * w2 - d12 * w1) / den
    return 1.0 - u - v, u, v


def inside_triangle(scene: Scene, triangle_id: int, p, tol: float = BARYCENTRIC_TOL) -> bool:
    return min(barycentric(scene, triangle_id, p)) >= -tol


# ---------------------------------------------------------------------------
# sampling and bounds

def sample_surface(scene: Scene, count: int, rng_seed: int):
    """Stratified, area-weighted points on the scene surface.

    Returns ``(points, normals, triangle_ids, dA)`` where every sample carries
    the same area element ``total_area / count``.
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    if scene.n_triangles == 0:
        raise SceneError("cannot sample an empty scene")
    rng = np.random.default_rng(rng_seed)
    cdf = np.cumsum(scene.areas)
    cdf /= cdf[-1]
    strata = (np.arange(count) + rng.random(count)) / count
    tri = np.minimum(np.searchsorted(cdf, strata, side="right"), scene.n_triangles - 1)
    r1 = np.sqrt(rng.random(count))
    r2 = rng.random(count)
    u = r1 * (1.0 - r2)
    v = r1 * r2
    points = scene.v0[tri] + u[:, None] * scene.e1[tri] + v[:, None] * scene.e2[tri]
    dA = scene.total_area / count
    return points, scene.normals[tri].copy(), tri, dA


def compute_aabb(scene: Scene) -> Aabb:
    if len(scene.vertices) == 0:
        raise SceneError("scene has no vertices")
    lo, hi = scene.vertices.min(axis=0), scene.vertices.max(axis=0)
    return Aabb(0.5 * (lo + hi), float(np.max(hi - lo)))
