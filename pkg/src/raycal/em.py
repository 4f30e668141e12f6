"""Differentiable field computation: path coefficients, CFR and CIR.

Every step that touches a material, antenna or scattering parameter runs on
:mod:`raycal.autodiff` values. Geometry (directions, bases, distances) is
fixed after tracing and enters as numpy constants.

Jones vectors are tuples ``(E_p, E_q)`` of :class:`~raycal.autodiff.CVar`
expressed in an explicit orthonormal basis transverse to the propagation
direction.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import CVar
from .constants import SPEED_OF_LIGHT, UNIT_NORM_TOL, VACUUM_PERMITTIVITY


@dataclass(frozen=True)
class WaveformConfig:
    frequency: float = 3.438e9
    n_subcarriers: int = 128
    spacing: float = 50e6 / 128

    def __post_init__(self):
        if self.n_subcarriers < 2 or self.n_subcarriers % 2:
            raise ValueError("number of subcarriers must be even")
        if not self.spacing > 0 or not self.frequency > 0:
            raise ValueError("frequency and subcarrier spacing must be positive")

    @property
    def bandwidth(self) -> float:
        return self.n_subcarriers * self.spacing

    @property
    def wavelength(self) -> float:
        return SPEED_OF_LIGHT / self.frequency

    @property
    def subcarrier_indices(self) -> np.ndarray:
        n = self.n_subcarriers
        return np.arange(-n // 2, n // 2)

    @property
    def frequencies(self) -> np.ndarray:
        return self.frequency + self.subcarrier_indices * self.spacing

    def to_dict(self) -> dict:
        return {"frequency": self.frequency, "n_subcarriers": self.n_subcarriers, "spacing": self.spacing}

    @classmethod
    def from_dict(cls, d: dict) -> "WaveformConfig":
        unknown = set(d) - {"frequency", "n_subcarriers", "spacing"}
        if unknown:
            raise ValueError(f"unknown waveform keys: {sorted(unknown)}")
        return cls(float(d["frequency"]), int(d["n_subcarriers"]), float(d["spacing"]))


@dataclass
class MaterialParams:
    """Relative permittivity, conductivity (S/m), scattering and XPD coefficients."""

    eps_r: object
    sigma: object
    S: object
    Kx: object

    def check(self) -> "MaterialParams":
        e, s, sc, k = (ad.value(x) for x in (self.eps_r, self.sigma, self.S, self.Kx))
        if np.any(e < 1) or np.any(s < 0) or np.any((sc < 0) | (sc > 1)) or np.any((k < 0) | (k > 1)):
            raise ValueError(f"material parameters out of range: eps_r={e}, sigma={s}, S={sc}, Kx={k}")
        return self

    @property
    def R(self):
        return ad.sqrt(1.0 - self.S * self.S)


# ---------------------------------------------------------------------------
# reflection physics

def complex_permittivity(eps_r, sigma, frequency: float) -> CVar:
    omega = 2.0 * np.pi * frequency
    return CVar(eps_r, ad.neg(ad.div(sigma, VACUUM_PERMITTIVITY * omega)))


def fresnel(eta: CVar, cos_i) -> tuple:
    """Perpendicular and parallel reflection coefficients for incidence from vacuum."""
    cos_i = np.asarray(cos_i, dtype=float)
    sin2 = 1.0 - cos_i * cos_i
    root = ad.csqrt(eta - sin2)
    r_perp = (cos_i - root) / (root + cos_i)
    eta_cos = eta * cos_i
    r_par = (eta_cos - root) / (eta_cos + root)
    return r_perp, r_par


def spreading_factor_specular(distance_before, d_next):
    """Spherical-wave spreading across a planar reflector.

    Chained with the initial ``1/d_1`` this yields ``1 / (total unfolded length)``.
    """
    return distance_before / (distance_before + d_next)


def _phase(d_next, wavelength):
    return CVar.const(np.exp(-2j * np.pi * np.asarray(d_next, dtype=float) / wavelength))


def specular_transfer(E: tuple, R, r_perp: CVar, r_par: CVar, spreading, d_next, wavelength: float,
                      with_phase: bool = True) -> tuple:
    """Reflect a Jones vector given in the incidence basis (perpendicular, parallel)."""
    scale = R * spreading if ad.isvar(R) or ad.isvar(spreading) else np.asarray(R) * np.asarray(spreading)
    out_p = r_perp * E[0] * scale
    out_q = r_par * E[1] * scale
    if with_phase:
        ph = _phase(d_next, wavelength)
        out_p, out_q = out_p * ph, out_q * ph
    return out_p, out_q


def diffuse_transfer(E: tuple, r_perp: CVar, r_par: CVar, S, Kx, cos_i, dA, f_s, d_next,
                     wavelength: float, chi=(0.0, 0.0), with_phase: bool = True) -> tuple:
    """Scattered Jones vector in the (perpendicular, parallel) basis of the scattered ray.

    Uses ``||E_s||^2 = ||E_in||^2 cos(theta_i) dA S^2 Gamma^2 f_s`` with
    ``Gamma ||E_in|| = ||diag(r_perp, r_par) E_in||``.
    """
    if np.any(ad.value(f_s) < 0):
        raise ValueError("scattering pattern returned a negative value")
    reflected = ad.sqrt((r_perp * E[0]).abs2() + (r_par * E[1]).abs2())
    mag = S * ad.sqrt(ad.mul(f_s, np.asarray(cos_i, float) * np.asarray(dA, float))) * reflected
    mag = mag / np.asarray(d_next, float)
    c1 = np.exp(1j * np.asarray(chi[0], dtype=float))
    c2 = np.exp(1j * np.asarray(chi[1], dtype=float))
    out_p = CVar.const(c1) * (ad.sqrt(1.0 - Kx) * mag)
    out_q = CVar.const(c2) * (ad.sqrt(Kx) * mag)
    if with_phase:
        ph = _phase(d_next, wavelength)
        out_p, out_q = out_p * ph, out_q * ph
    return out_p, out_q


# ---------------------------------------------------------------------------
# bases

def _unit(v):
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def _perp_fallback(n):
    """Some unit vector orthogonal to ``n`` (row-wise)."""
    helper = np.where(np.abs(n[..., :1]) < 0.9, np.array([1.0, 0, 0]), np.array([0, 1.0, 0]))
    return _unit(np.cross(n, helper))


def plane_basis(k, n):
    """(e_perp, e_par) for direction ``k`` relative to the plane spanned by ``k`` and ``n``."""
    k, n = np.atleast_2d(k), np.atleast_2d(n)
    c = np.cross(k, n)
    norm = np.linalg.norm(c, axis=-1, keepdims=True)
    e_perp = np.where(norm > 1e-12, c / np.where(norm > 1e-12, norm, 1.0), _perp_fallback(n))
    e_par = np.cross(e_perp, k)
    return e_perp, e_par


def spherical_basis(d):
    """(theta_hat, phi_hat) of unit directions ``d``."""
    d = np.atleast_2d(d)
    theta = np.arccos(np.clip(d[:, 2], -1.0, 1.0))
    phi = np.arctan2(d[:, 1], d[:, 0])
    th = np.stack([np.cos(theta) * np.cos(phi), np.cos(theta) * np.sin(phi), -np.sin(theta)], axis=1)
    ph = np.stack([-np.sin(phi), np.cos(phi), np.zeros_like(phi)], axis=1)
    return th, ph


def r_hat(theta, phi):
    theta, phi = np.asarray(theta, float), np.asarray(phi, float)
    return np.stack([np.sin(theta) * np.cos(phi), np.sin(theta) * np.sin(phi), np.cos(theta) * np.ones_like(phi)],
                    axis=-1)


class BasisError(ValueError):
    pass


def basis_transform(in_basis, out_basis, k=None) -> np.ndarray:
    """Matrix taking components in ``in_basis`` to components in ``out_basis``.

    Entry ``[a, b]`` is ``out_a . in_b``. Both bases must be orthonormal and
    span the same plane (transverse to ``k`` when given).
    """
    ip, iq = (np.asarray(v, float) for v in in_basis)
    op, oq = (np.asarray(v, float) for v in out_basis)
    for name, (a, b) in {"in": (ip, iq), "out": (op, oq)}.items():
        if abs(a @ a - 1) > 1e-9 or abs(b @ b - 1) > 1e-9 or abs(a @ b) > 1e-9:
            raise BasisError(f"{name} basis is not orthonormal")
        if k is not None and (abs(a @ k) > 1e-9 or abs(b @ k) > 1e-9):
            raise BasisError(f"{name} basis is not transverse to the propagation direction")
    D = np.array([[op @ ip, op @ iq], [oq @ ip, oq @ iq]])
    if np.max(np.abs(D.T @ D - np.eye(2))) > 1e-9:
        raise BasisError("bases do not span the same transverse plane")
    return D


def basis_matrices(in_p, in_q, out_p, out_q) -> np.ndarray:
    """Row-wise version of :func:`basis_transform` without validation; shape (n, 2, 2)."""
    D = np.empty((len(in_p), 2, 2))
    D[:, 0, 0] = np.sum(out_p * in_p, 1)
    D[:, 0, 1] = np.sum(out_p * in_q, 1)
    D[:, 1, 0] = np.sum(out_q * in_p, 1)
    D[:, 1, 1] = np.sum(out_q * in_q, 1)
    return D


def apply_basis(D, E: tuple) -> tuple:
    D = np.asarray(D, float)
    return (E[0] * D[..., 0, 0] + E[1] * D[..., 0, 1], E[0] * D[..., 1, 0] + E[1] * D[..., 1, 1])


# ---------------------------------------------------------------------------
# antenna and scattering patterns with no trainable parameters

class IsotropicPattern:
    def gain(self, p, dirs):
        return np.ones(len(np.atleast_2d(dirs)))

    def to_dict(self):
        return {"kind": "isotropic"}


class DipolePattern:
    """Short dipole along the local z axis: G = 1.5 sin^2(theta)."""

    def gain(self, p, dirs):
        d = np.atleast_2d(dirs)
        return 1.5 * (1.0 - d[:, 2] ** 2)

    def to_dict(self):
        return {"kind": "dipole"}


@dataclass
class AntennaConfig:
    pattern: object = field(default_factory=IsotropicPattern)
    slant: float = 0.0  # 0 vertical, pi/2 horizontal
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))

    def local(self, dirs):
        """Global directions expressed in the antenna frame."""
        return np.atleast_2d(dirs) @ np.asarray(self.rotation, float)

    def field_basis(self, dirs):
        """Global (theta_hat, phi_hat) of the antenna frame at global directions."""
        th, ph = spherical_basis(self.local(dirs))
        R = np.asarray(self.rotation, float)
        return th @ R.T, ph @ R.T

    def to_dict(self):
        return {"pattern": self.pattern.to_dict(), "slant": self.slant,
                "rotation": np.asarray(self.rotation, float).tolist()}


def antenna_field(config: AntennaConfig, theta, phi, params=None) -> tuple:
    """Antenna pattern (C_theta, C_phi) at angles given in the antenna frame."""
    dirs = r_hat(np.atleast_1d(theta), np.atleast_1d(phi))
    G = config.pattern.gain(params, dirs)
    if np.any(ad.value(G) < 0):
        raise ValueError("antenna gain is negative")
    amp = ad.sqrt(G)
    return amp * np.cos(config.slant), amp * np.sin(config.slant)


_GL_CACHE: dict = {}


def hemisphere_quadrature(n_theta: int = 64, n_phi: int = 64):
    """Gauss-Legendre nodes on the upper hemisphere: (directions, solid-angle weights)."""
    key = (n_theta, n_phi)
    if key not in _GL_CACHE:
        xt, wt = np.polynomial.legendre.leggauss(n_theta)
        xp, wp = np.polynomial.legendre.leggauss(n_phi)
        theta = 0.25 * np.pi * (xt + 1.0)
        phi = np.pi * (xp + 1.0)
        T, P = np.meshgrid(theta, phi, indexing="ij")
        W = np.outer(wt * 0.25 * np.pi * np.sin(theta), wp * np.pi)
        _GL_CACHE[key] = (r_hat(T, P).reshape(-1, 3), W.reshape(-1))
    return _GL_CACHE[key]


_LOBE_CACHE: dict = {}


def backscatter_lobe_integrals(cos_i, alpha_r: int, alpha_s: int, n_theta: int = 64, n_phi: int = 64):
    """Hemispherical integrals of the specular and incident lobes (normal = +z).

    Results are memoized per incidence cosine since traced geometry is reused
    across training iterations.
    """
    cos_i = np.atleast_1d(np.asarray(cos_i, dtype=float))
    uniq, inv = np.unique(cos_i, return_inverse=True)
    cache = _LOBE_CACHE.setdefault((alpha_r, alpha_s, n_theta, n_phi), {})
    if len(cache) > 2_000_000:
        cache.clear()
    missing = np.array([c for c in uniq.tolist() if c not in cache])
    if len(missing):
        dirs, w = hemisphere_quadrature(n_theta, n_phi)
        su = np.sqrt(np.maximum(0.0, 1.0 - missing ** 2))
        for lo in range(0, len(missing), 512):
            sl = slice(lo, lo + 512)
            k_r = np.stack([su[sl], np.zeros_like(su[sl]), missing[sl]], axis=1)
            k_i = np.stack([su[sl], np.zeros_like(su[sl]), -missing[sl]], axis=1)
            Fr = (((1.0 + k_r @ dirs.T) / 2.0) ** alpha_r) @ w
            Fs = (((1.0 + k_i @ dirs.T) / 2.0) ** alpha_s) @ w
            cache.update(zip(missing[sl].tolist(), zip(Fr.tolist(), Fs.tolist())))
    F = np.array([cache[c] for c in uniq.tolist()]).reshape(-1, 2)
    return F[inv, 0], F[inv, 1]


def backscatter_pattern(k_i, k_s, n, alpha_r: int = 5, alpha_s: int = 8, lam=0.8):
    """Two-lobe scattering pattern normalized over the hemisphere by quadrature.

    ``lam`` may be a Var; the lobe exponents are fixed integers.
    """
    k_i, k_s, n = (np.atleast_2d(np.asarray(x, float)) for x in (k_i, k_s, n))
    cos_i = -np.sum(k_i * n, 1)
    k_r = k_i - 2.0 * np.sum(k_i * n, 1)[:, None] * n
    lobe_r = ((1.0 + np.sum(k_r * k_s, 1)) / 2.0) ** alpha_r
    lobe_s = ((1.0 + np.sum(k_i * k_s, 1)) / 2.0) ** alpha_s
    Fr, Fs = backscatter_lobe_integrals(cos_i, alpha_r, alpha_s)
    num = lam * lobe_r + (1.0 - lam) * lobe_s if ad.isvar(lam) else lam * lobe_r + (1.0 - lam) * lobe_s
    den = lam * Fr + (1.0 - lam) * Fs
    return num / den


@dataclass
class BackscatterPattern:
    alpha_r: int = 5
    alpha_s: int = 8
    lam: float = 0.8

    def evaluate(self, p, k_i, k_s, n, material_index=None, points=None):
        return backscatter_pattern(k_i, k_s, n, self.alpha_r, self.alpha_s, self.lam)

    def to_dict(self):
        return {"kind": "backscatter", "alpha_r": self.alpha_r, "alpha_s": self.alpha_s, "lambda": self.lam}


class LambertPattern:
    def evaluate(self, p, k_i, k_s, n, material_index=None, points=None):
        return np.maximum(np.sum(np.atleast_2d(k_s) * np.atleast_2d(n), 1), 0.0) / np.pi

    def to_dict(self):
        return {"kind": "lambert"}


@dataclass
class FixedMaterials:
    """Per-material constants keyed by material index (order of ``names``)."""

    names: list
    table: dict  # name -> MaterialParams or (eps_r, sigma, S, Kx)

    def __post_init__(self):
        rows = []
        for n in self.names:
            m = self.table[n]
            rows.append((m.eps_r, m.sigma, m.S, m.Kx) if isinstance(m, MaterialParams) else tuple(m))
        self._arr = np.array(rows, dtype=float).reshape(-1, 4)
        for row, n in zip(self._arr, self.names):
            MaterialParams(*row).check()

    def evaluate(self, p, material_index, points=None) -> MaterialParams:
        r = self._arr[np.asarray(material_index, int)]
        return MaterialParams(r[:, 0], r[:, 1], r[:, 2], r[:, 3])

    @classmethod
    def from_scene(cls, scene) -> "FixedMaterials":
        table = {}
        for m in scene.materials:
            if m.get("model", "fixed") != "fixed":
                raise ValueError(f"material '{m['name']}' has no fixed parameters")
            table[m["name"]] = (m["eps_r"], m["sigma"], m["S"], m["Kx"])
        return cls(scene.material_names, table)


@dataclass
class SceneModel:
    """Everything that maps traced geometry to path coefficients."""

    materials: object
    scattering: object = field(default_factory=BackscatterPattern)
    tx: AntennaConfig = field(default_factory=AntennaConfig)
    rx: AntennaConfig = field(default_factory=AntennaConfig)


# ---------------------------------------------------------------------------
# single-path evaluation (reference route)

def path_coefficient(path, scene, model: SceneModel, wavelength: float, params=None, chi=(0.0, 0.0)):
    """Complex coefficient ``a`` and delay of one path.

    Follows the field hop by hop, applying every propagation phase, and
    removes the total phase ``exp(-j 2 pi f tau)`` at the end so ``a`` is
    frequency independent.
    """
    lengths = path.segment_lengths
    k1 = path.k_depart[None]
    th_t, ph_t = model.tx.field_basis(k1)
    G_t = model.tx.pattern.gain(params, model.tx.local(k1))
    amp_t = ad.sqrt(G_t)
    E = (CVar(amp_t * np.cos(model.tx.slant), np.zeros(1)), CVar(amp_t * np.sin(model.tx.slant), np.zeros(1)))
    E = tuple(e * (1.0 / lengths[0]) for e in E)
    ph0 = _phase(lengths[0], wavelength)
    E = (E[0] * ph0, E[1] * ph0)
    basis = (th_t, ph_t)
    travelled = lengths[0]
    for j, inter in enumerate(path.interactions):
        k_i, n = inter.k_in[None], inter.normal[None]
        e_perp, e_par = plane_basis(k_i, n)
        D = basis_transform((basis[0][0], basis[1][0]), (e_perp[0], e_par[0]), k=k_i[0])
        E = apply_basis(D, E)
        m = model.materials.evaluate(params, [scene.triangle_material[inter.triangle_id]], inter.point[None])
        eta = complex_permittivity(m.eps_r, m.sigma, SPEED_OF_LIGHT / wavelength)
        cos_i = np.array([inter.cos_incidence])
        r_perp, r_par = fresnel(eta, cos_i)
        d_next = lengths[j + 1]
        if inter.kind == "specular":
            A = spreading_factor_specular(travelled, d_next)
            E = specular_transfer(E, m.R, r_perp, r_par, A, d_next, wavelength)
            k_r = inter.k_out[None]
            basis = (e_perp, np.cross(e_perp, k_r))
        else:
            f_s = model.scattering.evaluate(params, k_i, inter.k_out[None], n,
                                            [scene.triangle_material[inter.triangle_id]], inter.point[None])
            E = diffuse_transfer(E, r_perp, r_par, m.S, m.Kx, cos_i, inter.dA, f_s, d_next, wavelength, chi)
            # the transfer rebuilds the field from its magnitude; restore the phase accrued so far
            ph = _phase(travelled, wavelength)
            E = (E[0] * ph, E[1] * ph)
            basis = plane_basis(inter.k_out[None], n)
        travelled += d_next
    k_last = path.k_arrive[None]
    arrival = -k_last
    th_r, ph_r = model.rx.field_basis(arrival)
    D = basis_transform((basis[0][0], basis[1][0]), (th_r[0], ph_r[0]), k=k_last[0])
    E = apply_basis(D, E)
    G_r = model.rx.pattern.gain(params, model.rx.local(arrival))
    amp_r = ad.sqrt(G_r)
    a = (E[0] * (amp_r * np.cos(model.rx.slant)) + E[1] * (amp_r * np.sin(model.rx.slant))) * (wavelength / (4 * np.pi))
    a = a * CVar.const(np.exp(2j * np.pi * travelled / wavelength))
    return a[0], path.delay


# ---------------------------------------------------------------------------
# CFR / CIR

def cfr(coefficients, delays, waveform: WaveformConfig):
    """H[n] = sum_i a_i exp(-j 2 pi (f + n df) tau_i), n = -N/2..N/2-1.

    ``coefficients`` is a complex numpy array or a CVar of shape (P,).
    """
    delays = np.asarray(delays, dtype=float)
    phase = np.exp(-2j * np.pi * np.outer(delays, waveform.frequencies)) if len(delays) else \
        np.zeros((0, waveform.n_subcarriers), complex)
    if isinstance(coefficients, CVar):
        return ad.cmatmul(coefficients, phase)
    return np.asarray(coefficients, dtype=complex) @ phase


def idft_matrix(n: int, order: str = "natural") -> np.ndarray:
    """Matrix F with h = H @ F for H indexed n = -N/2..N/2-1.

    ``natural`` returns taps l = 0..N-1 (negative taps wrap to the end);
    ``centered`` returns l = -N/2..N/2-1.
    """
    k = np.arange(-n // 2, n // 2)
    ell = np.arange(n) if order == "natural" else k
    return np.exp(2j * np.pi * np.outer(k, ell) / n) / np.sqrt(n)


def cir(H, order: str = "centered"):
    """N-point IDFT of a CFR; see :func:`idft_matrix` for tap ordering."""
    if isinstance(H, CVar):
        return ad.cmatmul(H, idft_matrix(H.shape[-1], order))
    H = np.asarray(H, dtype=complex)
    return H @ idft_matrix(H.shape[-1], order)


def centered_to_natural(h):
    """Reorder taps from l = -N/2..N/2-1 to l mod N."""
    h = np.asarray(h)
    return np.roll(h, -(h.shape[-1] // 2), axis=-1)


@dataclass
class ChannelResponse:
    H: np.ndarray
    h: np.ndarray  # natural tap order

    @classmethod
    def from_paths(cls, coefficients, delays, waveform):
        H = cfr(np.asarray(coefficients, complex), delays, waveform)
        return cls(H, cir(H, "natural"))


# ---------------------------------------------------------------------------
# batched engine

def _spherical_basis_local(antenna: AntennaConfig, dirs):
    return antenna.field_basis(dirs)


@dataclass
class _Group:
    """Paths sharing one interaction signature, evaluated together."""

    kinds: tuple
    index: np.ndarray  # position in the flat path list
    d1: np.ndarray
    tx_local: np.ndarray
    rx_local: np.ndarray
    D: list  # per hop (n,2,2), plus the final transform to the rx basis
    material: list
    points: list
    cos_i: list
    spreading: list  # specular hops
    diffuse: dict  # k_i, k_s, n, dA, d_next, chi

    def subset(self, rows) -> "_Group":
        pick = lambda x: None if x is None else x[rows]  # noqa: E731
        return _Group(self.kinds, self.index[rows], self.d1[rows], self.tx_local[rows], self.rx_local[rows],
                      [d[rows] for d in self.D], [m[rows] for m in self.material], [q[rows] for q in self.points],
                      [c[rows] for c in self.cos_i], [pick(a) for a in self.spreading],
                      {k: v[rows] for k, v in self.diffuse.items()})


class CompiledPaths:
    """Geometry of many path sets flattened into arrays for fast repeated evaluation."""

    def __init__(self, scene, pathsets, waveform: WaveformConfig, tx: AntennaConfig, rx: AntennaConfig,
                 chi: list | None = None, cache_taps: bool = True):
        self.scene = scene
        self.cache_taps = cache_taps
        self._taps: dict = {}
        self._idft = idft_matrix(waveform.n_subcarriers, "natural")
        self.waveform = waveform
        self.tx, self.rx = tx, rx
        self.offsets = np.zeros(len(pathsets) + 1, dtype=int)
        flat = []
        for b, ps in enumerate(pathsets):
            flat.extend(ps.paths)
            self.offsets[b + 1] = len(flat)
        self.paths = flat
        self.n_paths = len(flat)
        self.example_of = np.repeat(np.arange(len(pathsets)), np.diff(self.offsets))
        self.delays = np.array([p.delay for p in flat], dtype=float)
        chi = chi if chi is not None else [(0.0, 0.0)] * self.n_paths
        self.chi = np.asarray(chi, dtype=float).reshape(self.n_paths, 2) if self.n_paths else np.zeros((0, 2))
        groups: dict = {}
        for i, p in enumerate(flat):
            groups.setdefault(p.kinds, []).append(i)
        self.groups = [self._compile_group(k, np.array(v, dtype=int)) for k, v in sorted(groups.items())]
        self.order = np.argsort(np.concatenate([g.index for g in self.groups])) if self.groups else np.zeros(0, int)

    def _compile_group(self, kinds, index):
        paths = [self.paths[i] for i in index]
        pts = np.array([p.points for p in paths])  # (n, q+2, 3)
        seg = np.diff(pts, axis=1)
        lengths = np.linalg.norm(seg, axis=2)
        k = seg / lengths[..., None]
        n_hops = len(kinds)
        th, ph = self.tx.field_basis(k[:, 0])
        basis = (th, ph)
        D, mats, points, cos_i, spreading, diffuse = [], [], [], [], [], {}
        travelled = lengths[:, 0].copy()
        for j in range(n_hops):
            inter = [p.interactions[j] for p in paths]
            normal = np.array([it.normal for it in inter])
            k_i, k_o = k[:, j], k[:, j + 1]
            e_perp, e_par = plane_basis(k_i, normal)
            D.append(basis_matrices(basis[0], basis[1], e_perp, e_par))
            mats.append(self.scene.triangle_material[[it.triangle_id for it in inter]])
            points.append(pts[:, j + 1])
            cos_i.append(-np.sum(k_i * normal, 1))
            d_next = lengths[:, j + 1]
            if kinds[j] == "specular":
                spreading.append(spreading_factor_specular(travelled, d_next))
                basis = (e_perp, np.cross(e_perp, k_o))
            else:
                spreading.append(None)
                diffuse = {"k_i": k_i, "k_s": k_o, "n": normal, "dA": np.array([it.dA for it in inter]),
                           "d_next": d_next, "chi": self.chi[index]}
                basis = plane_basis(k_o, normal)
            travelled = travelled + d_next
        arrival = -k[:, -1]
        th_r, ph_r = self.rx.field_basis(arrival)
        D.append(basis_matrices(basis[0], basis[1], th_r, ph_r))
        return _Group(kinds, index, lengths[:, 0], self.tx.local(k[:, 0]), self.rx.local(arrival), D, mats,
                      points, cos_i, spreading, diffuse)

    def resample_chi(self, rng: np.random.Generator) -> None:
        """Draw fresh uniform phases for every diffuse path."""
        self.chi = rng.uniform(0.0, 2.0 * np.pi, self.chi.shape)
        for g in self.groups:
            if g.diffuse:
                g.diffuse["chi"] = self.chi[g.index]

    def coefficients(self, model: SceneModel, params=None) -> CVar:
        """Path coefficients for every compiled path, in input order."""
        lam = self.waveform.wavelength
        parts_re, parts_im = [], []
        for g in self.groups:
            a = self._group_coefficients(g, model, params, lam)
            parts_re.append(a.re)
            parts_im.append(a.im)
        if not parts_re:
            return CVar(np.zeros(0), np.zeros(0))
        re = ad.concat(parts_re)
        im = ad.concat(parts_im)
        return CVar(ad.take(re, self.order), ad.take(im, self.order))

    def _group_coefficients(self, g: _Group, model: SceneModel, params, lam) -> CVar:
        n = len(g.index)
        amp = ad.sqrt(model.tx.pattern.gain(params, g.tx_local)) / g.d1
        zero = np.zeros(n)
        E = (CVar(amp * np.cos(model.tx.slant), zero), CVar(amp * np.sin(model.tx.slant), zero))
        for j, kind in enumerate(g.kinds):
            E = apply_basis(g.D[j], E)
            m = model.materials.evaluate(params, g.material[j], g.points[j])
            eta = complex_permittivity(m.eps_r, m.sigma, self.waveform.frequency)
            r_perp, r_par = fresnel(eta, g.cos_i[j])
            if kind == "specular":
                E = specular_transfer(E, m.R, r_perp, r_par, g.spreading[j], None, lam, with_phase=False)
            else:
                dd = g.diffuse
                f_s = model.scattering.evaluate(params, dd["k_i"], dd["k_s"], dd["n"], g.material[j], g.points[j])
                E = diffuse_transfer(E, r_perp, r_par, m.S, m.Kx, g.cos_i[j], dd["dA"], f_s, dd["d_next"], lam,
                                     (dd["chi"][:, 0], dd["chi"][:, 1]), with_phase=False)
        E = apply_basis(g.D[-1], E)
        amp_r = ad.sqrt(model.rx.pattern.gain(params, g.rx_local)) * (lam / (4 * np.pi))
        return E[0] * (amp_r * np.cos(model.rx.slant)) + E[1] * (amp_r * np.sin(model.rx.slant))

    def tap_matrix(self, example: int) -> np.ndarray:
        """Constant (P_b, N) matrix mapping one example's path coefficients to its CIR."""
        hit = self._taps.get(example)
        if hit is not None:
            return hit
        lo, hi = self.offsets[example], self.offsets[example + 1]
        ph = np.exp(-2j * np.pi * np.outer(self.delays[lo:hi], self.waveform.frequencies))
        M = ph @ self._idft
        if self.cache_taps:
            self._taps[example] = M
        return M

    def select(self, model: SceneModel, params, paths: np.ndarray) -> CVar:
        """Coefficients of the given flat path indices (in that order)."""
        member = np.full(self.n_paths, -1, dtype=int)
        member[paths] = np.arange(len(paths))
        parts_re, parts_im, where_ = [], [], []
        lam = self.waveform.wavelength
        for g in self.groups:
            rows = np.nonzero(member[g.index] >= 0)[0]
            if len(rows) == 0:
                continue
            sub = g if len(rows) == len(g.index) else g.subset(rows)
            a = self._group_coefficients(sub, model, params, lam)
            parts_re.append(a.re)
            parts_im.append(a.im)
            where_.append(member[g.index[rows]])
        if not parts_re:
            return CVar(np.zeros(0), np.zeros(0))
        order = np.argsort(np.concatenate(where_))
        return CVar(ad.take(ad.concat(parts_re), order), ad.take(ad.concat(parts_im), order))

    def cir(self, model: SceneModel, params=None, examples=None):
        """CIRs (natural tap order) of the selected examples, shape (B, N)."""
        examples = np.arange(len(self.offsets) - 1) if examples is None else np.asarray(examples, dtype=int)
        B, N = len(examples), self.waveform.n_subcarriers
        counts = self.offsets[examples + 1] - self.offsets[examples]
        if counts.sum() == 0:
            return CVar(np.zeros((B, N)), np.zeros((B, N)))
        paths = np.concatenate([np.arange(self.offsets[b], self.offsets[b + 1]) for b in examples])
        a = self.select(model, params, paths)
        pmax = int(counts.max())
        M = np.zeros((B, pmax, N), dtype=complex)
        pad = np.full((B, pmax), len(paths), dtype=int)
        start = 0
        for r, (b, c) in enumerate(zip(examples, counts)):
            if c:
                M[r, :c] = self.tap_matrix(b)
                pad[r, :c] = np.arange(start, start + c)
            start += c
        zero = np.zeros(1)
        a_pad = CVar(ad.reshape(ad.take(ad.concat([a.re, zero]), pad), (B, 1, pmax)),
                     ad.reshape(ad.take(ad.concat([a.im, zero]), pad), (B, 1, pmax)))
        h = ad.cmatmul(a_pad, M)
        return CVar(ad.reshape(h.re, (B, N)), ad.reshape(h.im, (B, N)))
