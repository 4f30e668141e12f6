"""Built-in gradient-check suite: primitives, modules and end-to-end pipelines.

Every check compares reverse-mode gradients with central differences and
reports the worst relative error. The suite passes when every check is
within ``tolerance``.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .calibration import example_loss
from .em import (AntennaConfig, BackscatterPattern, CompiledPaths, MaterialParams, SceneModel, WaveformConfig,
                 fresnel, complex_permittivity)
from .geometry import MeshBuilder, compute_aabb
from .params import (EmbeddingMaterials, HGScatteringPattern, NeuralMaterialNet, NeuralMaterials, ParameterStore,
                     SGMixtureAntenna, positional_encode)
from .tracer import TraceConfig, trace_all

TOLERANCE = 1e-4
FIELDS = ("eps_r", "sigma", "S", "Kx")


@dataclass
class CheckResult:
    name: str
    max_rel_error: float
    worst_param: str | None
    n_params: int
    seconds: float

    def passed(self, tolerance: float = TOLERANCE) -> bool:
        return bool(np.isfinite(self.max_rel_error) and self.max_rel_error <= tolerance)


@dataclass
class SuiteReport:
    results: list = field(default_factory=list)
    tolerance: float = TOLERANCE

    @property
    def passed(self) -> bool:
        return all(r.passed(self.tolerance) for r in self.results)

    @property
    def worst(self) -> CheckResult | None:
        return max(self.results, key=lambda r: r.max_rel_error if np.isfinite(r.max_rel_error) else np.inf,
                   default=None)

    @property
    def failures(self) -> list:
        return [r for r in self.results if not r.passed(self.tolerance)]

    def to_dict(self) -> dict:
        w = self.worst
        return {"passed": self.passed, "tolerance": self.tolerance,
                "worst": None if w is None else {"check": w.name, "param": w.worst_param,
                                                 "max_rel_error": w.max_rel_error},
                "checks": [{"name": r.name, "max_rel_error": r.max_rel_error, "worst_param": r.worst_param,
                            "n_params": r.n_params, "passed": r.passed(self.tolerance),
                            "seconds": round(r.seconds, 3)} for r in self.results]}


def _run(name, f, point, **kw) -> CheckResult:
    t0 = time.perf_counter()
    rep = ad.finite_diff_check(f, point, **kw)
    err = rep.max_rel_error if not rep.nan_params else float("inf")
    worst = rep.nan_params[0] if rep.nan_params else rep.worst
    return CheckResult(name, err, worst, int(sum(np.size(v) for v in point.values())), time.perf_counter() - t0)


# ---------------------------------------------------------------------------
# primitives

def _weighted(out, seed: int):
    """Scalar sum(w * out) with fixed random weights, so every output entry matters."""
    w = np.random.default_rng(seed).normal(size=np.shape(ad.value(out)))
    return ad.vsum(ad.mul(out, w))


def _cweighted(z: ad.CVar, seed: int):
    return ad.add(_weighted(z.re, seed), _weighted(z.im, seed + 1))


def primitive_checks() -> list:
    """(name, f, point) triples covering every differentiable primitive."""
    rng = np.random.default_rng(1)
    x = rng.uniform(0.5, 1.5, (3, 4))
    y = rng.uniform(0.5, 1.5, (3, 4))
    s = rng.normal(size=(3, 4))
    A = rng.normal(size=(3, 4))
    B = rng.normal(size=(4, 2))
    M = rng.normal(size=(4, 3)) + 1j * rng.normal(size=(4, 3))
    one = lambda fn: (lambda p: _weighted(fn(p["x"]), 7))  # noqa: E731
    two = lambda fn: (lambda p: _weighted(fn(p["x"], p["y"]), 7))  # noqa: E731
    cond = rng.uniform(size=(3, 4)) > 0.5
    return [
        ("add", two(ad.add), {"x": x, "y": y[0]}),
        ("sub", two(ad.sub), {"x": x, "y": y}),
        ("mul", two(ad.mul), {"x": x, "y": y[:, :1]}),
        ("div", two(ad.div), {"x": x, "y": y}),
        ("neg", one(ad.neg), {"x": s}),
        ("exp", one(ad.exp), {"x": s}),
        ("expm1", one(ad.expm1), {"x": s}),
        ("log", one(ad.log), {"x": x}),
        ("sqrt", one(ad.sqrt), {"x": x}),
        ("sin", one(ad.sin), {"x": s}),
        ("cos", one(ad.cos), {"x": s}),
        ("power", one(lambda a: ad.power(a, 2.5)), {"x": x}),
        ("sigmoid", one(ad.sigmoid), {"x": s}),
        ("relu", one(ad.relu), {"x": s + np.sign(s) * 0.1}),
        ("absolute", one(ad.absolute), {"x": s + np.sign(s) * 0.1}),
        ("where", two(lambda a, b: ad.where(cond, a, b)), {"x": s, "y": x}),
        ("vsum", one(lambda a: ad.vsum(ad.mul(a, a), axis=1)), {"x": s}),
        ("mean", one(lambda a: ad.mean(ad.mul(a, a), axis=0)), {"x": s}),
        ("dot", two(lambda a, b: ad.dot(a, b)), {"x": s, "y": x}),
        ("reshape", one(lambda a: ad.mul(ad.reshape(a, (4, 3)), np.arange(12.0).reshape(4, 3))), {"x": s}),
        ("transpose", one(lambda a: ad.mul(ad.transpose(a), np.arange(12.0).reshape(4, 3))), {"x": s}),
        ("getitem", one(lambda a: ad.mul(ad.getitem(a, (slice(None), [0, 2, 2])), np.arange(9.0).reshape(3, 3))), {"x": s}),
        ("take", one(lambda a: ad.take(a, np.array([[0, 2], [2, 1]]), axis=0)), {"x": s}),
        ("stack", two(lambda a, b: ad.mul(ad.stack([a, b], axis=1), 1.5)), {"x": s, "y": x}),
        ("concat", two(lambda a, b: ad.concat([a, b], axis=0)), {"x": s, "y": x}),
        ("matmul", lambda p: _weighted(ad.matmul(p["x"], p["y"]), 7), {"x": A, "y": B}),
        ("softmax", one(lambda a: ad.softmax(a, axis=1)), {"x": s}),
        ("normalize", one(lambda a: ad.normalize(a, axis=1)), {"x": s}),
        ("csqrt", lambda p: _cweighted(ad.csqrt(ad.CVar(p["x"], p["y"])), 3), {"x": s, "y": x}),
        ("cexp_j", lambda p: _cweighted(ad.cexp_j(p["x"]), 3), {"x": s}),
        ("cmatmul", lambda p: _cweighted(ad.cmatmul(ad.CVar(p["x"], p["y"]), M), 3), {"x": A, "y": A[::-1]}),
        ("cdiv", lambda p: _cweighted(ad.CVar(p["x"], p["y"]) / ad.CVar(p["y"], p["x"]), 3), {"x": x, "y": y}),
        ("abs2", lambda p: _weighted(ad.CVar(p["x"], p["y"]).abs2(), 3), {"x": s, "y": x}),
    ]


# ---------------------------------------------------------------------------
# modules

def module_checks() -> list:
    rng = np.random.default_rng(2)
    wl = WaveformConfig().wavelength
    cos_i = rng.uniform(0.05, 1.0, 6)
    sg = SGMixtureAntenna("a", 3)
    sg_store = ParameterStore()
    sg.init(sg_store, rng)
    dirs = rng.normal(size=(20, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    hg = HGScatteringPattern("hg")
    hg_store = ParameterStore({"hg.logits": [0.2, -0.1, 0.3], "hg.log_lambda": [0.5, 1.0]})
    n = np.tile([0.0, 0.0, 1.0], (8, 1))
    k_i = np.column_stack([rng.uniform(-0.8, 0.8, 8), rng.uniform(-0.5, 0.5, 8), -np.ones(8)])
    k_i /= np.linalg.norm(k_i, axis=1, keepdims=True)
    k_s = rng.normal(size=(8, 3))
    k_s[:, 2] = np.abs(k_s[:, 2]) + 0.2
    k_s /= np.linalg.norm(k_s, axis=1, keepdims=True)
    net = NeuralMaterialNet(4, (16, 16))
    net_store = ParameterStore()
    net.init(net_store, rng)
    pts = rng.uniform(-0.4, 0.4, (5, 3))

    def fresnel_loss(p):
        eta = complex_permittivity(p["eps_r"], p["sigma"], 3.5e9)
        r_perp, r_par = fresnel(eta, cos_i)
        return ad.add(_weighted(r_perp.abs2(), 1), _cweighted(r_par, 2))

    def net_loss(p):
        out = net.forward(p, positional_encode(pts, net.L_enc))
        return _weighted(out, 4)

    return [
        ("fresnel", fresnel_loss, {"eps_r": np.array(4.0), "sigma": np.array(0.05)}),
        ("sg_antenna", lambda p: _weighted(sg.gain(p, dirs), 5), dict(sg_store.values)),
        ("hg_pattern", lambda p: _weighted(hg.evaluate(p, k_i, k_s, n), 6), dict(hg_store.values)),
        ("backscatter_lambda", lambda p: _weighted(BackscatterPattern(5, 8, p["lam"]).evaluate(None, k_i, k_s, n), 6),
         {"lam": np.array(0.7)}),
        ("neural_net", net_loss, dict(net_store.values)),
    ] + [("wavelength", lambda p: ad.mul(p["x"], wl), {"x": np.array(1.0)})]


# ---------------------------------------------------------------------------
# end-to-end pipelines

class DirectMaterials:
    """Material parameters used directly as leaves (``{name}.eps_r`` etc.)."""

    def __init__(self, names):
        self.names = list(names)

    def evaluate(self, p, material_index, points=None) -> MaterialParams:
        idx = np.asarray(material_index, dtype=int)
        cols = [ad.take(ad.stack([_leaf(p[f"{n}.{f}"]) for n in self.names]), idx) for f in FIELDS]
        return MaterialParams(*cols)


def _leaf(x):
    return ad.reshape(x, ()) if ad.isvar(x) else np.reshape(x, ())


def two_ray_scene():
    mb = MeshBuilder()
    mb.material("Ground", "embedding")
    mb.quad((-20, -20, 0), (40, -20, 0), (40, 20, 0), (-20, 20, 0), "Ground")
    return mb.build()


def corridor_mini_scene():
    from .synth import corridor_scene
    return corridor_scene(leg_a=(8.0, 3.0), leg_b=(3.0, 5.0), cell=3.0)


def _pipeline(scene, positions, rx, trace_cfg, model_fn, point, target_shift, name, **kw):
    waveform = WaveformConfig(n_subcarriers=32, spacing=50e6 / 32)
    pathsets = [trace_all(scene, tx, rx, trace_cfg) for tx in positions]
    model, tx_ant = model_fn()
    compiled = CompiledPaths(scene, pathsets, waveform, tx_ant, AntennaConfig())
    shifted = {k: v + target_shift * np.random.default_rng(9).normal(size=np.shape(v)) for k, v in point.items()}
    measured = compiled.cir(model, shifted).numpy()

    def f(p):
        h_hat = compiled.cir(model, p)
        total, _, _ = example_loss(measured, h_hat, waveform.bandwidth)
        return ad.mean(total)
    return _run(name, f, point, **kw)


def pipeline_checks(quick: bool = False) -> list:
    """Loss gradients through tracing output, EM transfer, antennas and patterns."""
    out = []
    tr = two_ray_scene()
    truth = {"eps_r": 5.24, "sigma": 0.121, "S": 0.3, "Kx": 0.2}
    direct = DirectMaterials(["Ground"])
    point = {f"Ground.{k}": np.array(v) for k, v in truth.items()}
    cfg = TraceConfig(max_order=1, ray_count=2000, diffuse_samples=12, seed=0)

    def two_ray_model():
        tx = AntennaConfig()
        return SceneModel(direct, BackscatterPattern(), tx, AntennaConfig()), tx
    out.append(_pipeline(tr, [np.array([0.0, 0.0, 2.0]), np.array([3.0, 4.0, 1.2])], np.array([10.0, 0.0, 1.5]),
                         cfg, two_ray_model, point, 0.02, "two_ray:materials", floor=1e-8))

    sg = SGMixtureAntenna("tx_antenna", 3)
    hg = HGScatteringPattern("scattering")
    store = ParameterStore()
    rng = np.random.default_rng(3)
    sg.init(store, rng)
    hg.init(store, rng)

    def two_ray_patterns():
        tx = AntennaConfig(sg)
        return SceneModel(direct, hg, tx, AntennaConfig()), tx
    pt = dict(store.values)
    out.append(_pipeline(tr, [np.array([0.0, 0.0, 2.0])], np.array([10.0, 0.0, 1.5]), cfg,
                         lambda: _two_ray_fixed(two_ray_patterns, point), pt, 0.05, "two_ray:sg_hg", floor=1e-8))

    cor = corridor_mini_scene()
    positions = [np.array([1.5, 1.5, 1.5]), np.array([6.0, 1.0, 1.2])]
    rx = np.array([6.5, 6.0, 1.8])
    ccfg = TraceConfig(max_order=2 if quick else 3, ray_count=3000, diffuse_samples=10, seed=0)
    emb = EmbeddingMaterials(cor.material_names, 6)
    estore = ParameterStore()
    emb.init(estore, np.random.default_rng(4))

    def cor_emb():
        tx = AntennaConfig()
        return SceneModel(emb, BackscatterPattern(), tx, AntennaConfig()), tx
    out.append(_pipeline(cor, positions, rx, ccfg, cor_emb, dict(estore.values), 0.05, "corridor:embedding",
                         floor=1e-8))

    net = NeuralMaterialNet(3, (12, 12))
    neural = NeuralMaterials(net, compute_aabb(cor))
    nstore = ParameterStore()
    net.init(nstore, np.random.default_rng(5))

    def cor_neural():
        tx = AntennaConfig()
        return SceneModel(neural, BackscatterPattern(), tx, AntennaConfig()), tx
    out.append(_pipeline(cor, positions[:1], rx, ccfg, cor_neural, dict(nstore.values), 0.05,
                         "corridor:neural_weights", sample=6, floor=1e-8))
    return out


def _two_ray_fixed(model_fn, material_point):
    """Wrap a model so material leaves come from constants, leaving pattern params trainable."""
    model, tx = model_fn()
    inner = model.materials

    class _Bound:
        def evaluate(self, p, material_index, points=None):
            return inner.evaluate({**material_point, **p}, material_index, points)
    model.materials = _Bound()
    return model, tx


def run_suite(primitives: bool = True, modules: bool = True, pipelines: bool = True, quick: bool = False,
              tolerance: float = TOLERANCE) -> SuiteReport:
    report = SuiteReport(tolerance=tolerance)
    if primitives:
        report.results += [_run(f"primitive:{n}", f, pt) for n, f, pt in primitive_checks()]
    if modules:
        report.results += [_run(f"module:{n}", f, pt, sample=8, floor=1e-9) for n, f, pt in module_checks()]
    if pipelines:
        report.results += pipeline_checks(quick)
    return report
