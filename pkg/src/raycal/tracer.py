"""Geometric path search: line of sight, specular chains, first-order diffuse.

Paths carry geometry only. Field values are computed downstream, which lets
training reuse the same traced paths for every parameter update.
"""
from __future__ import annotations

import json
import warnings
from dataclasses import asdict, dataclass, field
from itertools import product
from pathlib import Path

import numpy as np

from .constants import BARYCENTRIC_TOL, OCCLUSION_EPS, SPEED_OF_LIGHT
from .geometry import Scene, intersect_many, occluded_many, sample_surface

PATH_CACHE_FORMAT = "raycal-paths"
PATH_CACHE_VERSION = 1
DEDUP_TOL = 1e-7  # metres; interaction points closer than this are the same path
TRACER_VERSION = "1.0"


@dataclass(frozen=True)
class Interaction:
    kind: str  # "specular" or "diffuse"
    triangle_id: int
    point: np.ndarray
    normal: np.ndarray  # oriented so that -k_in . normal > 0
    k_in: np.ndarray
    k_out: np.ndarray
    dA: float = 0.0

    @property
    def cos_incidence(self) -> float:
        return float(-self.k_in @ self.normal)


@dataclass(frozen=True)
class PropagationPath:
    tx: np.ndarray
    rx: np.ndarray
    interactions: tuple = ()

    @property
    def points(self) -> np.ndarray:
        return np.array([self.tx, *[i.point for i in self.interactions], self.rx], dtype=float)

    @property
    def segment_lengths(self) -> np.ndarray:
        return np.linalg.norm(np.diff(self.points, axis=0), axis=1)

    @property
    def length(self) -> float:
        return float(self.segment_lengths.sum())

    @property
    def delay(self) -> float:
        return self.length / SPEED_OF_LIGHT

    @property
    def order(self) -> int:
        return len(self.interactions)

    @property
    def sequence(self) -> tuple:
        return tuple(int(i.triangle_id) for i in self.interactions)

    @property
    def kinds(self) -> tuple:
        return tuple(i.kind for i in self.interactions)

    @property
    def is_diffuse(self) -> bool:
        return bool(self.interactions) and self.interactions[-1].kind == "diffuse"

    @property
    def k_depart(self) -> np.ndarray:
        seg = self.points[1] - self.points[0]
        return seg / np.linalg.norm(seg)

    @property
    def k_arrive(self) -> np.ndarray:
        """Propagation direction of the last segment (pointing into the receiver)."""
        seg = self.points[-1] - self.points[-2]
        return seg / np.linalg.norm(seg)

    @property
    def departure_angles(self) -> tuple:
        return theta_phi(self.k_depart)

    @property
    def arrival_angles(self) -> tuple:
        return theta_phi(-self.k_arrive)

    def key(self) -> tuple:
        return (self.kinds, self.sequence) if not self.is_diffuse else (self.kinds, self.sequence,
                                                                          tuple(self.interactions[-1].point))


def theta_phi(v) -> tuple:
    v = np.asarray(v, dtype=float)
    theta = float(np.arccos(np.clip(v[2] / np.linalg.norm(v), -1.0, 1.0)))
    phi = float(np.mod(np.arctan2(v[1], v[0]), 2 * np.pi))
    return theta, phi


def make_path(tx, rx, hops) -> PropagationPath:
    """Build a path from ``(kind, triangle_id, point, normal, dA)`` hops.

    Directions follow from the points; normals are flipped to face the
    incoming ray.
    """
    tx, rx = np.asarray(tx, float), np.asarray(rx, float)
    pts = [tx, *[np.asarray(h[2], float) for h in hops], rx]
    ks = []
    for a, b in zip(pts[:-1], pts[1:]):
        seg = b - a
        ks.append(seg / np.linalg.norm(seg))
    inter = []
    for j, (kind, tri, point, normal, dA) in enumerate(hops):
        n = np.asarray(normal, float)
        k_in = ks[j]
        if k_in @ n > 0:
            n = -n
        inter.append(Interaction(kind, int(tri), np.asarray(point, float), n, k_in, ks[j + 1], float(dA)))
    return PropagationPath(tx, rx, tuple(inter))


@dataclass(frozen=True)
class TraceConfig:
    max_order: int = 3
    ray_count: int = 20000
    diffuse_samples: int = 0
    seed: int = 0
    exhaustive: bool = False

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TraceConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown trace config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class PathSet:
    tx: np.ndarray
    rx: np.ndarray
    paths: list = field(default_factory=list)
    config: TraceConfig = field(default_factory=TraceConfig)

    def __len__(self):
        return len(self.paths)

    def __iter__(self):
        return iter(self.paths)

    def specular_sequences(self) -> set:
        return {p.sequence for p in self.paths if not p.is_diffuse}


# ---------------------------------------------------------------------------
# line of sight

def trace_los(scene: Scene, tx, rx) -> PropagationPath | None:
    tx, rx = np.asarray(tx, float), np.asarray(rx, float)
    if np.array_equal(tx, rx):
        raise ValueError("tx and rx coincide")
    if occluded_many(scene, tx, rx)[0]:
        return None
    return PropagationPath(tx, rx, ())


# ---------------------------------------------------------------------------
# shooting and bouncing rays

def fibonacci_directions(count: int, seed: int) -> np.ndarray:
    """Fibonacci-sphere lattice, rigidly rotated by a seed-derived rotation."""
    i = np.arange(count) + 0.5
    z = 1.0 - 2.0 * i / count
    r = np.sqrt(np.maximum(0.0, 1.0 - z * z))
    phi = np.pi * (3.0 - np.sqrt(5.0)) * i
    dirs = np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=1)
    q, rr = np.linalg.qr(np.random.default_rng(seed).normal(size=(3, 3)))
    q = q * np.sign(np.diag(rr))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return dirs @ q.T


def sbr_candidates(scene: Scene, tx, max_order: int, ray_count: int, seed: int) -> set:
    """Triangle-id sequences (every prefix) visited by specularly bouncing rays."""
    if max_order < 1:
        raise ValueError("max_order must be >= 1")
    if ray_count <= 0:
        warnings.warn("sbr_candidates called with ray_count=0; no candidates", RuntimeWarning, stacklevel=2)
        return set()
    if scene.n_triangles == 0:
        return set()
    d = fibonacci_directions(ray_count, seed)
    o = np.broadcast_to(np.asarray(tx, float), d.shape).copy()
    seq = np.full((ray_count, max_order), -1, dtype=int)
    alive = np.ones(ray_count, dtype=bool)
    out: set = set()
    for bounce in range(max_order):
        idx = np.flatnonzero(alive)
        if len(idx) == 0:
            break
        tid, t, _, _ = intersect_many(scene, o[idx], d[idx], t_min=1e-7)
        hit = tid >= 0
        alive[idx[~hit]] = False
        idx, tid, t = idx[hit], tid[hit], t[hit]
        seq[idx, bounce] = tid
        for row in np.unique(seq[idx, :bounce + 1], axis=0):
            out.add(tuple(int(x) for x in row))
        n = scene.normals[tid]
        o[idx] = o[idx] + t[:, None] * d[idx]
        d[idx] = d[idx] - 2.0 * np.sum(d[idx] * n, axis=1)[:, None] * n
    return out


def exhaustive_candidates(scene: Scene, max_order: int) -> set:
    """All ordered sequences without immediate repeats, lengths 1..max_order."""
    out = set()
    ids = range(scene.n_triangles)
    for q in range(1, max_order + 1):
        for s in product(ids, repeat=q):
            if all(s[k] != s[k + 1] for k in range(q - 1)):
                out.add(s)
    return out


# ---------------------------------------------------------------------------
# image method

def refine_many(scene: Scene, tx, rx, sequences) -> tuple:
    """Image-method validation for sequences of equal length.

    Returns ``(valid, points)`` with ``points`` of shape (n, Q, 3).
    """
    seqs = np.asarray(sequences, dtype=int)
    n, q = seqs.shape
    tx, rx = np.asarray(tx, float), np.asarray(rx, float)
    normals = scene.normals[seqs]
    v0 = scene.v0[seqs]
    images = np.empty((n, q + 1, 3))
    images[:, 0] = tx
    for k in range(q):
        prev = images[:, k]
        dist = np.sum((prev - v0[:, k]) * normals[:, k], axis=1)
        images[:, k + 1] = prev - 2.0 * dist[:, None] * normals[:, k]
    valid = np.ones(n, dtype=bool)
    points = np.zeros((n, q, 3))
    target = np.broadcast_to(rx, (n, 3)).copy()
    for k in range(q - 1, -1, -1):
        nk = normals[:, k]
        direction = images[:, k + 1] - target
        denom = np.sum(direction * nk, axis=1)
        safe = np.abs(denom) > 1e-15
        t = np.sum((v0[:, k] - target) * nk, axis=1) / np.where(safe, denom, 1.0)
        valid &= safe & (t > 1e-12) & (t < 1.0 - 1e-12)
        p = target + t[:, None] * direction
        valid &= _inside(scene, seqs[:, k], p)
        points[:, k] = p
        target = p
    if not np.any(valid):
        return valid, points
    idx = np.flatnonzero(valid)
    chain = np.concatenate([np.broadcast_to(tx, (len(idx), 1, 3)), points[idx],
                            np.broadcast_to(rx, (len(idx), 1, 3))], axis=1)
    seg_len = np.linalg.norm(np.diff(chain, axis=1), axis=2)
    ok = np.all(seg_len > 2 * OCCLUSION_EPS, axis=1)
    a = chain[:, :-1].reshape(-1, 3)
    b = chain[:, 1:].reshape(-1, 3)
    pad = np.full((len(idx), 1), -1, dtype=int)
    sq = seqs[idx]
    ign = np.stack([np.concatenate([pad, sq], axis=1), np.concatenate([sq, pad], axis=1)], axis=2).reshape(-1, 2)
    blocked = occluded_many(scene, a, b, ign).reshape(len(idx), q + 1).any(axis=1)
    valid[idx] = ok & ~blocked
    return valid, points


def _inside(scene, tri, p, tol=BARYCENTRIC_TOL):
    e1, e2 = scene.e1[tri], scene.e2[tri]
    w = p - scene.v0[tri]
    d11 = np.sum(e1 * e1, 1)
    d12 = np.sum(e1 * e2, 1)
    d22 = np.sum(e2 * e2, 1)
    w1 = np.sum(w * e1, 1)
    w2 = np.sum(w * e2, 1)
    den = d11 * d22 - d12 * d12
    u = (d22 * w1 - d12 * w2) / den
    v = (d11 * w2 - d12 * w1) / den
    return (u >= -tol) & (v >= -tol) & (u + v <= 1.0 + tol)


def _specular_path(scene, tx, rx, seq, pts) -> PropagationPath:
    hops = [("specular", t, p, scene.normals[t], 0.0) for t, p in zip(seq, pts)]
    return make_path(tx, rx, hops)


def refine_specular(scene: Scene, tx, rx, sequence) -> PropagationPath | None:
    seq = tuple(int(s) for s in sequence)
    if not seq:
        raise ValueError("sequence must contain at least one triangle")
    valid, pts = refine_many(scene, tx, rx, [seq])
    if not valid[0]:
        return None
    return _specular_path(scene, tx, rx, seq, pts[0])


def refine_all(scene: Scene, tx, rx, candidates) -> list:
    """Validate a candidate set; returns paths sorted by (order, sequence).

    A reflection point on an edge shared by coplanar triangles is accepted by
    each of them; such geometrically identical paths are kept once, under
    the lowest triangle sequence.
    """
    by_len: dict = {}
    seen = set()
    for s in candidates:
        by_len.setdefault(len(s), []).append(tuple(s))
    out = []
    for q in sorted(by_len):
        seqs = sorted(by_len[q])
        for lo in range(0, len(seqs), 20000):
            chunk = seqs[lo:lo + 20000]
            valid, pts = refine_many(scene, tx, rx, chunk)
            for k in np.flatnonzero(valid):
                key = tuple(np.round(np.asarray(pts[k], float).reshape(-1) / DEDUP_TOL).astype(np.int64).tolist())
                if key in seen:
                    continue
                seen.add(key)
                out.append(_specular_path(scene, tx, rx, chunk[k], pts[k]))
    return out


# ---------------------------------------------------------------------------
# diffuse

def trace_diffuse(scene: Scene, tx, rx, sample_count: int, seed: int) -> list:
    """First-order diffuse paths through visible surface samples."""
    if sample_count < 0:
        raise ValueError("sample_count must be >= 0")
    if sample_count == 0 or scene.n_triangles == 0:
        return []
    tx, rx = np.asarray(tx, float), np.asarray(rx, float)
    pts, normals, tri, dA = sample_surface(scene, sample_count, seed)
    side_tx = np.sum((tx - pts) * normals, axis=1)
    side_rx = np.sum((rx - pts) * normals, axis=1)
    front = (side_tx * side_rx > 0) & (np.abs(side_tx) > OCCLUSION_EPS) & (np.abs(side_rx) > OCCLUSION_EPS)
    idx = np.flatnonzero(front)
    if len(idx) == 0:
        return []
    ign = tri[idx, None]
    ok = ~occluded_many(scene, np.broadcast_to(tx, (len(idx), 3)), pts[idx], ign)
    ok &= ~occluded_many(scene, pts[idx], np.broadcast_to(rx, (len(idx), 3)), ign)
    return [make_path(tx, rx, [("diffuse", tri[k], pts[k], normals[k], dA)]) for k in idx[ok]]


def trace_all(scene: Scene, tx, rx, config: TraceConfig = TraceConfig()) -> PathSet:
    tx, rx = np.asarray(tx, float), np.asarray(rx, float)
    paths = []
    los = trace_los(scene, tx, rx)
    if los is not None:
        paths.append(los)
    if config.max_order >= 1 and scene.n_triangles:
        if config.exhaustive:
            cands = exhaustive_candidates(scene, config.max_order)
        else:
            cands = sbr_candidates(scene, tx, config.max_order, config.ray_count, config.seed)
        paths.extend(refine_all(scene, tx, rx, cands))
    paths.extend(trace_diffuse(scene, tx, rx, config.diffuse_samples, config.seed))
    return PathSet(tx, rx, paths, config)


# ---------------------------------------------------------------------------
# path cache

def _path_to_dict(p: PropagationPath) -> dict:
    return {
        "interactions": [{"kind": i.kind, "triangle": i.triangle_id, "point": i.point.tolist(),
                          "normal": i.normal.tolist(), "dA": i.dA} for i in p.interactions],
        "segment_lengths": p.segment_lengths.tolist(),
    }


def _path_from_dict(tx, rx, d: dict) -> PropagationPath:
    hops = [(i["kind"], i["triangle"], i["point"], i["normal"], i["dA"]) for i in d["interactions"]]
    return make_path(tx, rx, hops)


def pathsets_to_json(pathsets: list) -> str:
    doc = {
        "format": PATH_CACHE_FORMAT,
        "version": PATH_CACHE_VERSION,
        "tracer": TRACER_VERSION,
        "positions": [{"tx": ps.tx.tolist(), "rx": ps.rx.tolist(), "config": ps.config.to_dict(),
                       "paths": [_path_to_dict(p) for p in ps.paths]} for ps in pathsets],
    }
    return json.dumps(doc, separators=(",", ":"))


def pathsets_from_json(text: str) -> list:
    doc = json.loads(text)
    if doc.get("format") != PATH_CACHE_FORMAT:
        raise ValueError("not a path cache file")
    if doc.get("version") != PATH_CACHE_VERSION:
        raise ValueError(f"unsupported path cache version {doc.get('version')}")
    out = []
    for pos in doc["positions"]:
        tx, rx = np.array(pos["tx"], float), np.array(pos["rx"], float)
        out.append(PathSet(tx, rx, [_path_from_dict(tx, rx, p) for p in pos["paths"]],
                           TraceConfig.from_dict(pos["config"])))
    return out


def save_path_cache(pathsets: list, path) -> None:
    Path(path).write_text(pathsets_to_json(pathsets))


def load_path_cache(path) -> list:
    return pathsets_from_json(Path(path).read_text())
