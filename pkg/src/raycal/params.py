"""Trainable parametrizations: SG-mixture antennas, HG scattering patterns,
material embeddings and neural materials, plus the parameter store and
checkpoint format.
"""
from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .constants import SMALL_CONCENTRATION
from .em import MaterialParams

CHECKPOINT_FORMAT = "raycal-checkpoint"
CHECKPOINT_VERSION = 1


class ParameterStore:
    """Ordered mapping of parameter identifiers to raw float64 arrays."""

    def __init__(self, values: dict | None = None):
        self.values: dict[str, np.ndarray] = {}
        for k, v in (values or {}).items():
            self.add(k, v)

    def add(self, name: str, value) -> None:
        arr = np.array(value, dtype=float)
        if not np.all(np.isfinite(arr)):
            raise ValueError(f"parameter '{name}' has non-finite values")
        self.values[name] = arr

    def __contains__(self, name):
        return name in self.values

    def __getitem__(self, name):
        return self.values[name]

    def __len__(self):
        return len(self.values)

    @property
    def names(self) -> list:
        return list(self.values)

    @property
    def size(self) -> int:
        return int(sum(v.size for v in self.values.values()))

    def bind(self, tape: ad.Tape | None = None, trainable=None) -> dict:
        """Values as Vars on ``tape`` (only names in ``trainable`` if given) or plain arrays."""
        out = {}
        for k, v in self.values.items():
            if tape is not None and (trainable is None or k in trainable):
                out[k] = tape.param(k, v)
            else:
                out[k] = v
        return out

    def copy(self) -> "ParameterStore":
        return ParameterStore({k: v.copy() for k, v in self.values.items()})

    def update(self, other: dict) -> None:
        for k, v in other.items():
            self.add(k, v)

    def to_dict(self) -> dict:
        return {k: {"shape": list(v.shape), "values": v.reshape(-1).tolist()} for k, v in self.values.items()}

    @classmethod
    def from_dict(cls, d: dict) -> "ParameterStore":
        return cls({k: np.array(e["values"], dtype=float).reshape(e["shape"]) for k, e in d.items()})


# ---------------------------------------------------------------------------
# spherical-Gaussian antennas

def fibonacci_sphere(n: int) -> np.ndarray:
    i = np.arange(n) + 0.5
    z = 1.0 - 2.0 * i / n
    phi = np.pi * (3.0 - np.sqrt(5.0)) * i
    r = np.sqrt(1.0 - z * z)
    return np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=1)


def _sg_inverse_norm(lam):
    """lam / (2 pi (1 - exp(-2 lam))), i.e. exp(lam) / a with the series limit 1/(4 pi) near 0."""
    small = ad.value(lam) < SMALL_CONCENTRATION
    safe = ad.where(small, np.ones_like(ad.value(lam)), lam)
    exact = safe / (2.0 * np.pi * ad.neg(ad.expm1(-2.0 * safe)))
    series = (1.0 + lam) / (4.0 * np.pi)
    return ad.where(small, series, exact)


@dataclass
class SGMixtureAntenna:
    """Gain ``4 pi eta sum_i w_i/a_i exp(lam_i mu_i . r)`` with raw unconstrained parameters."""

    name: str = "antenna"
    M: int = 3

    def keys(self):
        n = self.name
        return [f"{n}.logits", f"{n}.log_lambda", f"{n}.mu", f"{n}.efficiency_logit"]

    def init(self, store: ParameterStore, rng: np.random.Generator | None = None) -> None:
        n = self.name
        store.add(f"{n}.logits", np.zeros(self.M))
        store.add(f"{n}.log_lambda", np.zeros(self.M))
        store.add(f"{n}.mu", fibonacci_sphere(self.M))
        store.add(f"{n}.efficiency_logit", 0.0)

    def set(self, store: ParameterStore, weights, lambdas, means, efficiency: float) -> None:
        """Store raw values that realize the given constrained parameters."""
        w = np.asarray(weights, float)
        n = self.name
        store.add(f"{n}.logits", np.log(w / w.sum()))
        store.add(f"{n}.log_lambda", np.log(np.asarray(lambdas, float)))
        store.add(f"{n}.mu", np.asarray(means, float).reshape(self.M, 3))
        store.add(f"{n}.efficiency_logit", np.log(efficiency / (1.0 - efficiency)))

    def weights(self, p):
        return ad.softmax(p[f"{self.name}.logits"])

    def concentrations(self, p):
        return ad.exp(p[f"{self.name}.log_lambda"])

    def means(self, p):
        return ad.normalize(p[f"{self.name}.mu"], axis=-1)

    def efficiency(self, p):
        return ad.sigmoid(p[f"{self.name}.efficiency_logit"])

    def gain(self, p, dirs):
        dirs = np.atleast_2d(np.asarray(dirs, float))
        w, lam, mu = self.weights(p), self.concentrations(p), self.means(p)
        cos = ad.matmul(dirs, ad.transpose(mu))  # (n, M)
        lobes = ad.exp(lam * (cos - 1.0)) * (w * _sg_inverse_norm(lam))
        return ad.vsum(lobes, axis=1) * (4.0 * np.pi) * self.efficiency(p)

    def to_dict(self):
        return {"kind": "sg_mixture", "name": self.name, "M": self.M}


def sg_gain(antenna: SGMixtureAntenna, p, theta, phi):
    from .em import r_hat
    return antenna.gain(p, r_hat(np.atleast_1d(theta), np.atleast_1d(phi)))


# ---------------------------------------------------------------------------
# hemispherical-Gaussian scattering patterns

def hg_normalization(lam, cos_beta):
    """Approximate hemispherical integral of ``exp(lam (cos(gamma) - 1))``.

    ``cos_beta`` is the cosine between the lobe axis and the surface normal.
    Multiplying by ``exp(lam)`` gives the integral of ``exp(lam cos(gamma))``.
    The limit for ``lam -> 0`` is ``2 pi``.
    """
    cos_beta = np.asarray(cos_beta, dtype=float)
    lam_v = ad.value(lam)
    small = lam_v < SMALL_CONCENTRATION
    safe = ad.where(small, np.ones_like(lam_v), lam)
    lam2 = safe * safe
    t = ad.sqrt(safe) * (lam2 * 1.6988 + safe * 10.8438) / (lam2 + safe * 6.2201 + 10.2415)
    num = ad.expm1(t * (1.0 + cos_beta))
    den = ad.expm1(t) * (ad.exp(t * cos_beta) + 1.0)
    s = num / den
    e1 = ad.exp(ad.neg(safe))
    upper = 1.0 - e1  # axis along the normal
    lower = e1 - e1 * e1  # axis against the normal
    exact = (s * upper + (1.0 - s) * lower) * (2.0 * np.pi) / safe
    return ad.where(small, np.full(np.broadcast(lam_v, cos_beta).shape, 2.0 * np.pi), exact)


def reflect(k_i, n):
    k_i, n = np.atleast_2d(k_i), np.atleast_2d(n)
    return k_i - 2.0 * np.sum(k_i * n, 1, keepdims=True) * n


def hg_pattern_values(w, lam2, lam3, k_i, k_s, n, normalization: str = "axis"):
    """Evaluate the three-component pattern for given constrained parameters.

    ``w`` has shape (3,) or (n, 3); ``lam2``, ``lam3`` are scalars or (n,).
    ``normalization`` selects the lobe cosine fed to :func:`hg_normalization`:
    ``"axis"`` uses the angle between lobe axis and normal, ``"printed"``
    uses the angle between lobe axis and the outgoing direction.
    """
    k_i, k_s, n = (np.atleast_2d(np.asarray(x, float)) for x in (k_i, k_s, n))
    k_r = reflect(k_i, n)
    c_n = np.sum(k_s * n, 1)
    c_i = np.sum(k_s * k_i, 1)
    c_r = np.sum(k_s * k_r, 1)
    if normalization == "axis":
        b2, b3 = np.sum(k_i * n, 1), np.sum(k_r * n, 1)
    elif normalization == "printed":
        b2, b3 = c_i, c_r
    else:
        raise ValueError(f"unknown normalization '{normalization}'")
    if ad.value(w).ndim == 1:
        w1, w2, w3 = w[0], w[1], w[2]
    else:
        w1, w2, w3 = w[:, 0], w[:, 1], w[:, 2]
    lobe2 = ad.exp(lam2 * (c_i - 1.0)) / hg_normalization(lam2, b2)
    lobe3 = ad.exp(lam3 * (c_r - 1.0)) / hg_normalization(lam3, b3)
    return w1 * (c_n / np.pi) + w2 * lobe2 + w3 * lobe3


@dataclass
class HGScatteringPattern:
    name: str = "scattering"
    normalization: str = "axis"

    def keys(self):
        return [f"{self.name}.logits", f"{self.name}.log_lambda"]

    def init(self, store: ParameterStore, rng=None) -> None:
        store.add(f"{self.name}.logits", np.zeros(3))
        store.add(f"{self.name}.log_lambda", np.zeros(2))

    def set(self, store: ParameterStore, weights, lambdas) -> None:
        w = np.asarray(weights, float)
        store.add(f"{self.name}.logits", np.log(w / w.sum()))
        store.add(f"{self.name}.log_lambda", np.log(np.asarray(lambdas, float)))

    def weights(self, p):
        return ad.softmax(p[f"{self.name}.logits"])

    def concentrations(self, p):
        return ad.exp(p[f"{self.name}.log_lambda"])

    def evaluate(self, p, k_i, k_s, n, material_index=None, points=None):
        lam = self.concentrations(p)
        return hg_pattern_values(self.weights(p), lam[0], lam[1], k_i, k_s, n, self.normalization)

    def to_dict(self):
        return {"kind": "hg", "name": self.name, "normalization": self.normalization}


# ---------------------------------------------------------------------------
# material embeddings

def material_from_embedding(v, w) -> MaterialParams:
    """``w`` holds the four embeddings as rows (4, L)."""
    x = ad.matmul(w, v)
    return MaterialParams(eps_r=1.0 + ad.exp(x[1]), sigma=ad.exp(x[0]), S=ad.sigmoid(x[2]), Kx=ad.sigmoid(x[3]))


def _transform_heads(x):
    """Map raw outputs (..., 4) ordered (sigma, eps_r, S, Kx) to MaterialParams."""
    return MaterialParams(eps_r=1.0 + ad.exp(x[..., 1]), sigma=ad.exp(x[..., 0]),
                          S=ad.sigmoid(x[..., 2]), Kx=ad.sigmoid(x[..., 3]))


def raw_from_material(m: MaterialParams) -> np.ndarray:
    """Inverse of the head transforms for fixed values."""
    return np.array([np.log(m.sigma), np.log(m.eps_r - 1.0), np.log(m.S / (1 - m.S)), np.log(m.Kx / (1 - m.Kx))])


@dataclass
class EmbeddingMaterials:
    """One embedding (v, w_1..w_4) per named material."""

    names: list
    L: int = 30
    prefix: str = "material"

    def key(self, name, part):
        return f"{self.prefix}.{name}.{part}"

    def keys(self):
        return [self.key(n, part) for n in self.names for part in ("v", "w")]

    def init(self, store: ParameterStore, rng: np.random.Generator) -> None:
        bound = 0.5 / np.sqrt(self.L)
        for n in self.names:
            store.add(self.key(n, "v"), rng.uniform(-bound, bound, self.L))
            store.add(self.key(n, "w"), rng.uniform(-bound, bound, (4, self.L)))

    def set(self, store: ParameterStore, name: str, m: MaterialParams) -> None:
        v = np.zeros(self.L)
        v[0] = 1.0
        w = np.zeros((4, self.L))
        w[:, 0] = raw_from_material(m)
        store.add(self.key(name, "v"), v)
        store.add(self.key(name, "w"), w)

    def raw(self, p):
        """(n_materials, 4) raw inner products."""
        rows = [ad.matmul(p[self.key(n, "w")], p[self.key(n, "v")]) for n in self.names]
        return ad.stack(rows, axis=0)

    def material(self, p, name) -> MaterialParams:
        return material_from_embedding(p[self.key(name, "v")], p[self.key(name, "w")])

    def evaluate(self, p, material_index, points=None) -> MaterialParams:
        x = ad.take(self.raw(p), np.asarray(material_index, dtype=int), axis=0)
        return _transform_heads(x)

    def to_dict(self):
        return {"kind": "embedding", "names": list(self.names), "L": self.L}


# ---------------------------------------------------------------------------
# neural materials

def positional_encode(pbar, L: int, warn: bool = True) -> np.ndarray:
    """Sinusoidal features of unit-cube coordinates, 2L per coordinate."""
    pbar = np.atleast_2d(np.asarray(pbar, dtype=float))
    if warn and np.any(np.abs(pbar) > 0.5 + 1e-9):
        warnings.warn("positional encoding input outside the unit cube", stacklevel=2)
    freq = (2.0 ** np.arange(1, L + 1)) * np.pi  # (L,)
    arg = pbar[:, :, None] * freq  # (n, d, L)
    feats = np.stack([np.sin(arg), np.cos(arg)], axis=-1)  # (n, d, L, 2)
    return feats.reshape(len(pbar), -1)


MATERIAL_HEADS = ("sigma", "eps_r", "S", "Kx")
PATTERN_HEADS = ("w1", "w2", "w3", "log_lambda2", "log_lambda3")


@dataclass
class NeuralMaterialNet:
    L_enc: int = 10
    hidden: tuple = (128, 128, 128, 128)
    pattern_heads: bool = False
    prefix: str = "neural"

    @property
    def heads(self) -> tuple:
        return MATERIAL_HEADS + (PATTERN_HEADS if self.pattern_heads else ())

    @property
    def layer_shapes(self) -> list:
        sizes = [6 * self.L_enc, *self.hidden, len(self.heads)]
        return [(a, b) for a, b in zip(sizes[:-1], sizes[1:])]

    def keys(self):
        return [f"{self.prefix}.{kind}{k}" for k in range(len(self.layer_shapes)) for kind in ("W", "b")]

    def init(self, store: ParameterStore, rng: np.random.Generator) -> None:
        for k, (fan_in, fan_out) in enumerate(self.layer_shapes):
            bound = 1.0 / np.sqrt(fan_in)
            store.add(f"{self.prefix}.W{k}", rng.uniform(-bound, bound, (fan_in, fan_out)))
            store.add(f"{self.prefix}.b{k}", rng.uniform(-bound, bound, fan_out))

    def forward(self, p, features):
        x = features
        n_layers = len(self.layer_shapes)
        for k in range(n_layers):
            x = ad.matmul(x, p[f"{self.prefix}.W{k}"]) + p[f"{self.prefix}.b{k}"]
            if k < n_layers - 1:
                x = ad.relu(x)
        return x

    def to_dict(self):
        return {"kind": "neural", "L_enc": self.L_enc, "hidden": list(self.hidden),
                "pattern_heads": self.pattern_heads, "layer_shapes": [list(s) for s in self.layer_shapes]}


class ConfigurationError(ValueError):
    pass


class NeuralMaterials:
    """Material (and optionally scattering) parameters predicted per interaction point."""

    def __init__(self, net: NeuralMaterialNet, aabb, normalization: str = "axis"):
        if aabb.degenerate:
            raise ConfigurationError("scene bounding box is degenerate")
        self.net = net
        self.aabb = aabb
        self.normalization = normalization
        self._features: dict = {}
        self._outputs: tuple | None = None

    def keys(self):
        return self.net.keys()

    def init(self, store, rng):
        self.net.init(store, rng)

    def features(self, points) -> np.ndarray:
        key = id(points)
        hit = self._features.get(key)
        if hit is None or hit[0] is not points:
            pbar = self.aabb.normalize(np.atleast_2d(points))
            hit = (points, positional_encode(pbar, self.net.L_enc, warn=False))
            if len(self._features) > 64:
                self._features.clear()
            self._features[key] = hit
        return hit[1]

    def raw(self, p, points):
        # the same points are queried for material and pattern heads in one pass
        if self._outputs is not None and self._outputs[0] is p and self._outputs[1] is points:
            return self._outputs[2]
        out = self.net.forward(p, self.features(points))
        self._outputs = (p, points, out)
        return out

    def evaluate(self, p, material_index, points) -> MaterialParams:
        return _transform_heads(self.raw(p, points))

    def pattern(self, p, k_i, k_s, n, material_index=None, points=None):
        if not self.net.pattern_heads:
            raise ConfigurationError("network has no scattering-pattern heads")
        out = self.raw(p, points)
        w = ad.softmax(out[:, 4:7], axis=-1)
        lam = ad.exp(out[:, 7:9])
        return hg_pattern_values(w, lam[:, 0], lam[:, 1], k_i, k_s, n, self.normalization)

    def to_dict(self):
        return {**self.net.to_dict(), "aabb": {"center": self.aabb.center.tolist(), "edge": float(self.aabb.edge)}}


class NeuralScattering:
    """Scattering-pattern adaptor reading the pattern heads of a neural material."""

    def __init__(self, materials: NeuralMaterials):
        self.materials = materials

    def evaluate(self, p, k_i, k_s, n, material_index=None, points=None):
        return self.materials.pattern(p, k_i, k_s, n, material_index, points)

    def to_dict(self):
        return {"kind": "neural_hg", "normalization": self.materials.normalization}


def neural_material_query(net: NeuralMaterialNet, aabb, p, points):
    """Material parameters (and raw pattern outputs when present) at world points."""
    if aabb.degenerate:
        raise ConfigurationError("scene bounding box is degenerate")
    out = net.forward(p, positional_encode(aabb.normalize(np.atleast_2d(points)), net.L_enc))
    m = _transform_heads(out[:, :4])
    if net.pattern_heads:
        return m, out[:, 4:]
    return m


# ---------------------------------------------------------------------------
# checkpoints

def save_checkpoint(path, store: ParameterStore, model: dict, optimizer: dict | None = None,
                    metadata: dict | None = None) -> None:
    doc = {"format": CHECKPOINT_FORMAT, "version": CHECKPOINT_VERSION, "model": model,
           "params": store.to_dict(), "optimizer": optimizer or {}, "metadata": metadata or {}}
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=1, sort_keys=False)
        fh.write("\n")


@dataclass
class Checkpoint:
    store: ParameterStore
    model: dict
    optimizer: dict = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)


def load_checkpoint(path) -> Checkpoint:
    with open(path) as fh:
        doc = json.load(fh)
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path} is not a checkpoint")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {doc.get('version')}")
    return Checkpoint(ParameterStore.from_dict(doc["params"]), doc["model"], doc.get("optimizer", {}),
                      doc.get("metadata", {}))


# ---------------------------------------------------------------------------
# fixed patterns described by constrained values (dataset manifests)

class FrozenAntennaPattern:
    """An SG mixture with constant parameters."""

    def __init__(self, antenna: SGMixtureAntenna, store: ParameterStore, description: dict):
        self.antenna = antenna
        self.store = store
        self.description = description

    def gain(self, p, dirs):
        return self.antenna.gain(self.store.values, dirs)

    def to_dict(self):
        return dict(self.description)


class FrozenScattering:
    def __init__(self, pattern: HGScatteringPattern, store: ParameterStore, description: dict):
        self.pattern = pattern
        self.store = store
        self.description = description

    def evaluate(self, p, k_i, k_s, n, material_index=None, points=None):
        return self.pattern.evaluate(self.store.values, k_i, k_s, n)

    def to_dict(self):
        return dict(self.description)


def pattern_from_dict(d: dict):
    """Antenna gain pattern from its description."""
    from .em import DipolePattern, IsotropicPattern
    kind = d.get("kind")
    if kind == "isotropic":
        return IsotropicPattern()
    if kind == "dipole":
        return DipolePattern()
    if kind == "sg_mixture" and "weights" in d:
        M = len(d["weights"])
        ant = SGMixtureAntenna(name="fixed_antenna", M=M)
        store = ParameterStore()
        ant.set(store, d["weights"], d["lambdas"], d["means"], d["efficiency"])
        return FrozenAntennaPattern(ant, store, d)
    raise ValueError(f"unknown antenna pattern description: {d}")


def sg_description(weights, lambdas, means, efficiency) -> dict:
    return {"kind": "sg_mixture", "weights": [float(x) for x in weights], "lambdas": [float(x) for x in lambdas],
            "means": np.asarray(means, float).tolist(), "efficiency": float(efficiency)}


def antenna_from_dict(d: dict):
    from .em import AntennaConfig
    unknown = set(d) - {"pattern", "slant", "rotation"}
    if unknown:
        raise ValueError(f"unknown antenna keys: {sorted(unknown)}")
    return AntennaConfig(pattern_from_dict(d.get("pattern", {"kind": "isotropic"})), float(d.get("slant", 0.0)),
                         np.array(d.get("rotation", np.eye(3)), dtype=float))


def scattering_from_dict(d: dict):
    from .em import BackscatterPattern, LambertPattern
    kind = d.get("kind")
    if kind == "backscatter":
        return BackscatterPattern(int(d["alpha_r"]), int(d["alpha_s"]), float(d["lambda"]))
    if kind == "lambert":
        return LambertPattern()
    if kind == "hg" and "weights" in d:
        pat = HGScatteringPattern(name="fixed_scattering", normalization=d.get("normalization", "axis"))
        store = ParameterStore()
        pat.set(store, d["weights"], d["lambdas"])
        return FrozenScattering(pat, store, d)
    raise ValueError(f"unknown scattering description: {d}")


def hg_description(weights, lambdas, normalization="axis") -> dict:
    return {"kind": "hg", "weights": [float(x) for x in weights], "lambdas": [float(x) for x in lambdas],
            "normalization": normalization}
