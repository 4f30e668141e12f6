"""End-to-end acceptance checks, one test per criterion.

Each test prints a single ``[ACCEPTANCE Cn] PASS|FAIL ...`` line. The two recovery runs are marked slow;
together they take roughly ten minutes on a desktop CPU.
"""
import json
import time

import numpy as np
import pytest

from raycal import autodiff as ad
from raycal.autodiff import CVar
from raycal.calibration import (Calibrator, ScalingState, TrainingConfig, estimate_scale_batch, load_dataset, train,
                                update_scale)
from raycal.cli import main
from raycal.constants import SPEED_OF_LIGHT
from raycal.em import (AntennaConfig, BackscatterPattern, FixedMaterials, SceneModel, WaveformConfig,
                       backscatter_pattern, cfr, cir, complex_permittivity, fresnel, hemisphere_quadrature,
                       path_coefficient, r_hat)
from raycal.geometry import MeshBuilder, Scene, mirror
from raycal.gradcheck import run_suite
from raycal.params import (ParameterStore, SGMixtureAntenna, HGScatteringPattern, hg_description,
                           hg_pattern_values, sg_description)
from raycal.synth import GROUND_TRUTH, SynthConfig, default_scene, generate
from raycal.tracer import TraceConfig, exhaustive_candidates, refine_all, sbr_candidates, trace_all

from conftest import small_config

WF = WaveformConfig()


def report(capsys, n: int, ok: bool, detail: str) -> None:
    with capsys.disabled():
        print(f"\n[ACCEPTANCE C{n}] {'PASS' if ok else 'FAIL'} {detail}")


@pytest.fixture(scope="module")
def full_dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("acceptance") / "syn256"
    result = generate(default_scene(), SynthConfig(), out)
    return out, result


# --- 1. material recovery ----------------------------------------------------------------------

@pytest.mark.slow
def test_c1_material_recovery(full_dataset, capsys):
    out, result = full_dataset
    scene = default_scene()
    # at a constant rate of 0.01 the Adam jitter masks the weakly observable ceiling conductivity
    cfg = TrainingConfig(iterations=5000, lr_final=1e-4)
    cal = Calibrator(scene, load_dataset(out), result.pathsets, cfg)
    t0 = time.perf_counter()
    res = train(cal)
    found = cal.material_values(res.store)
    errors = []
    for name, truth in GROUND_TRUTH.items():
        got = found[name]
        errors.append(abs(got["eps_r"] / truth["eps_r"] - 1) <= 0.05)
        errors.append(abs(got["sigma"] / truth["sigma"] - 1) <= 0.15)
        errors.append(abs(got["S"] - truth["S"]) <= 0.05)
        errors.append(abs(got["Kx"] - truth["Kx"]) <= 0.05)
    ok = all(errors) and res.iterations <= 5000
    summary = "; ".join(f"{n} " + " ".join(f"{k}={v:.4g}" for k, v in found[n].items()) for n in GROUND_TRUTH)
    report(capsys, 1, ok, f"{res.iterations} iterations, {time.perf_counter() - t0:.0f} s: {summary}")
    assert ok


# --- 2. antenna and scattering pattern recovery ------------------------------------------------

SG_TRUTH = dict(weights=[0.5, 0.3, 0.2], lambdas=[3.0, 1.5, 2.0],
                means=[[1, 0, 0], [0, 1, 0.3], [-0.5, -0.5, 0.7]], efficiency=0.8)
HG_TRUTH = dict(weights=[0.4, 0.25, 0.35], lambdas=[3.0, 8.0])


@pytest.mark.slow
def test_c2_pattern_recovery(full_dataset, tmp_path, capsys):
    _, base = full_dataset
    scene = default_scene()
    cfg = SynthConfig(tx_antenna={"pattern": sg_description(**SG_TRUTH), "slant": 0.0},
                      scattering=hg_description(**HG_TRUTH))
    generate(scene, cfg, tmp_path / "data", pathsets=base.pathsets)
    fixed = {n: tuple(m.values()) for n, m in GROUND_TRUTH.items()}
    tc = TrainingConfig(model="fixed", antenna="sg", scattering="hg", iterations=3000, patience=40)
    cal = Calibrator(scene, load_dataset(tmp_path / "data"), base.pathsets, tc, fixed)
    store = train(cal).store.values

    th = (np.arange(64) + 0.5) * np.pi / 64
    ph = (np.arange(128) + 0.5) * 2 * np.pi / 128
    T, P = np.meshgrid(th, ph, indexing="ij")
    dirs = r_hat(T, P).reshape(-1, 3)
    truth = ParameterStore()
    SGMixtureAntenna("truth", 3).set(truth, *SG_TRUTH.values())
    G = ad.value(SGMixtureAntenna("tx_antenna", 3).gain(store, dirs))
    G0 = ad.value(SGMixtureAntenna("truth", 3).gain(truth.values, dirs))
    gain_db = float(np.mean(np.abs(10 * np.log10(G / G0))))

    hemi, _ = hemisphere_quadrature(64, 64)
    n = np.broadcast_to([0.0, 0.0, 1.0], hemi.shape)
    pattern = HGScatteringPattern("scattering")
    mae = []
    for theta_i in (15, 30, 45, 60, 75):
        t = np.radians(theta_i)
        k_i = np.broadcast_to([np.sin(t), 0.0, -np.cos(t)], hemi.shape)
        f = ad.value(pattern.evaluate(store, k_i, hemi, n))
        f0 = ad.value(hg_pattern_values(np.array(HG_TRUTH["weights"]), *HG_TRUTH["lambdas"], k_i, hemi, n))
        mae.append(np.mean(np.abs(f - f0)) / f0.max())
    ok = gain_db <= 0.5 and max(mae) <= 0.05
    report(capsys, 2, ok, f"gain mean |dB| = {gain_db:.4f}; pattern MAE/peak max = {max(mae):.2e}")
    assert ok


# --- 3. gradient correctness -------------------------------------------------------------------

def test_c3_gradcheck_suite(capsys):
    t0 = time.perf_counter()
    rep = run_suite()
    elapsed = time.perf_counter() - t0
    worst = max(rep.results, key=lambda r: r.max_rel_error)
    ok = rep.passed and elapsed <= 60
    report(capsys, 3, ok, f"{len(rep.results)} checks, worst {worst.name} {worst.max_rel_error:.2e}, "
                          f"{elapsed:.1f} s")
    assert ok


# --- 4. normalization suite --------------------------------------------------------------------

def sphere_quadrature(n_theta=200, n_phi=400):
    x, w = np.polynomial.legendre.leggauss(n_theta)
    theta = 0.5 * np.pi * (x + 1)
    phi = (np.arange(n_phi) + 0.5) * 2 * np.pi / n_phi
    T, P = np.meshgrid(theta, phi, indexing="ij")
    W = np.outer(w * 0.5 * np.pi * np.sin(theta), np.full(n_phi, 2 * np.pi / n_phi))
    return r_hat(T, P).reshape(-1, 3), W.reshape(-1)


def fine_hemisphere(n_theta=400, n_phi=800):
    th = (np.arange(n_theta) + 0.5) * (np.pi / 2) / n_theta
    ph = (np.arange(n_phi) + 0.5) * 2 * np.pi / n_phi
    T, P = np.meshgrid(th, ph, indexing="ij")
    w = np.sin(T) * (np.pi / 2 / n_theta) * (2 * np.pi / n_phi)
    return r_hat(T, P).reshape(-1, 3), w.reshape(-1)


def test_c4_normalization_suite(capsys):
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    dirs, w = sphere_quadrature()
    sg_err = []
    for _ in range(100):
        M = int(rng.integers(1, 4))
        ant, store = SGMixtureAntenna("a", M), ParameterStore()
        ant.set(store, rng.dirichlet(np.ones(M)), rng.uniform(0.1, 50, M), rng.normal(size=(M, 3)),
                rng.uniform(0.3, 0.99))
        total = np.sum(ad.value(ant.gain(store.values, dirs)) * w)
        sg_err.append(abs(total / (4 * np.pi * ad.value(ant.efficiency(store.values))) - 1))

    hemi, wq = hemisphere_quadrature(128, 128)
    n = np.broadcast_to([0.0, 0.0, 1.0], hemi.shape)
    hg_err = []
    for _ in range(100):
        t = np.radians(rng.uniform(0, 75))
        k_i = np.broadcast_to([np.sin(t), 0.0, -np.cos(t)], hemi.shape)
        f = ad.value(hg_pattern_values(rng.dirichlet(np.ones(3)), rng.uniform(0.1, 4.0), rng.uniform(0.1, 50.0),
                                       k_i, hemi, n))
        hg_err.append(abs(np.sum(f * wq) - 1))

    fine, wf = fine_hemisphere()
    nf = np.broadcast_to([0.0, 0.0, 1.0], fine.shape)
    bs_err = []
    for theta_i in (0.0, 20.0, 40.0, 60.0, 80.0):
        t = np.radians(theta_i)
        k_i = np.broadcast_to([np.sin(t), 0.0, -np.cos(t)], fine.shape)
        bs_err.append(abs(np.sum(backscatter_pattern(k_i, fine, nf, 5, 8, 0.8) * wf) - 1))
    elapsed = time.perf_counter() - t0
    ok = max(sg_err) <= 0.01 and max(hg_err) <= 0.05 and max(bs_err) <= 0.005 and elapsed <= 60
    report(capsys, 4, ok, f"SG max {max(sg_err):.2e}, HG max {max(hg_err):.2e}, backscatter max "
                          f"{max(bs_err):.2e}, {elapsed:.1f} s")
    assert ok


# --- 5. physics oracles ------------------------------------------------------------------------

def _c(z):
    return complex(np.asarray(z.numpy()).reshape(-1)[0]) if isinstance(z, CVar) else complex(z)


def _model(scene, slant):
    mats = FixedMaterials.from_scene(scene) if scene.materials else FixedMaterials([], {})
    return SceneModel(mats, BackscatterPattern(), AntennaConfig(slant=slant), AntennaConfig(slant=slant))


def test_c5_physics_oracles(capsys):
    checks = {}
    empty = Scene(np.zeros((0, 3)), np.zeros((0, 3), int), np.zeros(0, int), [])
    friis = []
    for d in (1.0, 10.0, 37.5):
        path = trace_all(empty, [0, 0, 1.0], [d, 0, 1.0], TraceConfig(max_order=0)).paths[0]
        a, _ = path_coefficient(path, empty, _model(empty, 0.0), WF.wavelength)
        friis.append(abs(abs(_c(a)) / (WF.wavelength / (4 * np.pi * d)) - 1))
    checks["friis"] = max(friis) <= 1e-9

    mb = MeshBuilder()
    mb.material("Ground", "fixed", eps_r=4.0, sigma=0.0, S=0.0, Kx=0.0)
    mb.quad((-100, -100, 0), (100, -100, 0), (100, 100, 0), (-100, 100, 0), "Ground")
    ground = mb.build()
    h1, h2, d = 2.0, 1.5, 10.0
    ps = trace_all(ground, [0, 0, h1], [d, 0, h2], TraceConfig(max_order=1, ray_count=4000))
    coeffs = [path_coefficient(p, ground, _model(ground, np.pi / 2), WF.wavelength) for p in ps]
    H = np.abs(cfr(np.array([_c(a) for a, _ in coeffs]), [t for _, t in coeffs], WF))
    d1, d2 = np.hypot(d, h1 - h2), np.hypot(d, h1 + h2)
    cos_i = (h1 + h2) / d2
    root = np.sqrt(4.0 - (1 - cos_i ** 2))
    r_perp = (cos_i - root) / (cos_i + root)
    f = WF.frequencies
    ref = WF.wavelength / (4 * np.pi) * np.abs(np.exp(-2j * np.pi * f * d1 / SPEED_OF_LIGHT) / d1
                                               + r_perp * np.exp(-2j * np.pi * f * d2 / SPEED_OF_LIGHT) / d2)
    checks["two-ray"] = len(ps) == 2 and np.max(np.abs(H / ref - 1)) <= 1e-6

    rp, rl = fresnel(CVar.const(4.0), np.array([1.0]))
    _, rb = fresnel(CVar.const(2.25), np.array([np.cos(np.arctan(1.5))]))
    checks["fresnel"] = abs(_c(rp) + 1 / 3) <= 1e-9 and abs(_c(rl) - 1 / 3) <= 1e-9 and abs(_c(rb)) <= 1e-9

    E, S, C = np.meshgrid(np.linspace(1, 80, 100), np.r_[0.0, np.logspace(-4, 2, 99)], np.linspace(0.01, 1, 50),
                          indexing="ij")
    rp, rl = fresnel(complex_permittivity(E.ravel(), S.ravel(), WF.frequency), C.ravel())
    checks["passivity"] = np.max(np.abs(rp.numpy())) <= 1 + 1e-12 and np.max(np.abs(rl.numpy())) <= 1 + 1e-12

    Hr = np.random.default_rng(1).normal(size=128) + 1j * np.random.default_rng(2).normal(size=128)
    checks["parseval"] = abs(np.sum(np.abs(cir(Hr, "natural")) ** 2) / np.sum(np.abs(Hr) ** 2) - 1) <= 1e-9

    ok = all(checks.values())
    report(capsys, 5, ok, ", ".join(f"{k} {'ok' if v else 'FAILED'}" for k, v in checks.items()))
    assert ok


# --- 6. path tracer oracle ---------------------------------------------------------------------

def room(seed):
    """Random box room with a few tilted panels inside, at most 50 triangles."""
    rng = np.random.default_rng(seed)
    mb = MeshBuilder()
    mb.material("M", "embedding")
    L = rng.uniform([4, 3, 2.5], [10, 8, 4])
    mb.box((0, 0, 0), tuple(L), "M")
    for _ in range(int(rng.integers(2, 8))):
        c = rng.uniform(0.2 * L, 0.8 * L)
        u, v = rng.normal(size=3), rng.normal(size=3)
        u *= rng.uniform(0.5, 1.5) / np.linalg.norm(u)
        v -= u * (u @ v) / (u @ u)
        v *= rng.uniform(0.5, 1.5) / np.linalg.norm(v)
        mb.quad(c - u - v, c + u - v, c + u + v, c - u + v, "M")
    return mb.build(), rng.uniform(0.1 * L, 0.9 * L), rng.uniform(0.1 * L, 0.9 * L)


@pytest.mark.slow
def test_c6_tracer_oracle(capsys):
    mismatched, worst_unfold, n_paths = [], 0.0, 0
    for seed in range(20):
        scene, tx, rx = room(100 + seed)
        assert len(scene.triangles) <= 50
        exact = refine_all(scene, tx, rx, exhaustive_candidates(scene, 3))
        sbr = refine_all(scene, tx, rx, sbr_candidates(scene, tx, 3, 100_000, seed))
        if {p.sequence for p in exact} != {p.sequence for p in sbr}:
            mismatched.append(seed)
        for p in exact:
            img = np.asarray(tx, float)
            for tri in p.sequence:
                img = mirror(img, scene, tri)
            worst_unfold = max(worst_unfold, abs(p.length - np.linalg.norm(rx - img)))
            n_paths += 1
    ok = not mismatched and worst_unfold <= 1e-9
    report(capsys, 6, ok, f"20 rooms, {n_paths} exact paths, mismatched rooms {mismatched}, "
                          f"max unfolding error {worst_unfold:.1e} m")
    assert ok


# --- 7. scaling estimator ----------------------------------------------------------------------

def brute_force_scale(P, P_hat):
    """Grid scan of sum (a P - P_hat)^2, then bisection on the sign of its slope."""
    f = lambda a: np.sum((a * P - P_hat) ** 2)  # noqa: E731
    slope = lambda a: np.sum(P * (a * P - P_hat))  # noqa: E731
    grid = np.linspace(0, 2 * P_hat.sum() / P.sum() + 1, 2001)
    k = int(np.argmin([f(a) for a in grid]))
    lo, hi = grid[max(k - 1, 0)], grid[min(k + 1, len(grid) - 1)]
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if slope(mid) > 0:
            hi = mid
        else:
            lo = mid
    return 0.5 * (lo + hi)


def test_c7_scaling_estimator(capsys):
    rng = np.random.default_rng(7)
    worst = 0.0
    for _ in range(100):
        P = rng.uniform(0.1, 2, int(rng.integers(1, 64)))
        P_hat = rng.uniform(0.1, 10) * P * rng.lognormal(0, 0.3, len(P))
        worst = max(worst, abs(estimate_scale_batch(P, P_hat) / brute_force_scale(P, P_hat) - 1))
    delta, target = 0.9, 3.0
    s = update_scale(ScalingState(), 1.0, delta)
    err = [abs(s.alpha - target)]
    for _ in range(100):
        s = update_scale(s, target, delta)
        err.append(abs(s.alpha - target))
    err = np.array(err)
    # the ratio is exact until the error reaches double-precision roundoff of the target
    live = err[:-1] > 1e-13
    ratio_dev = float(np.max(np.abs(err[1:][live] / err[:-1][live] - delta)))
    ok = worst <= 1e-9 and ratio_dev <= 1e-6 and err[-1] <= 1e-4 * err[0]
    report(capsys, 7, ok, f"closed form vs brute force max rel {worst:.1e}; EMA ratio deviation {ratio_dev:.1e} "
                          f"over {int(live.sum())} live steps")
    assert ok


# --- 8. determinism ----------------------------------------------------------------------------

def test_c8_determinism(tmp_path, capsys):
    synth = tmp_path / "synth.json"
    synth.write_text(json.dumps(small_config(positions=10).to_dict()))
    files = {}
    for run in ("a", "b"):
        root = tmp_path / run
        assert main(["generate", "--synth", str(synth), "--seed", "11", "--out", str(root / "data"),
                     "--threads", "1"]) == 0
        assert main(["calibrate", "--data", str(root / "data"), "--out", str(root / "cal"), "--iters", "30",
                     "--batch", "4", "--embedding-dim", "4", "--seed", "5"]) == 0
        assert main(["evaluate", "--checkpoint", str(root / "cal" / "checkpoint.json"), "--data",
                     str(root / "data"), "--out", str(root / "eval"), "--split", "all"]) == 0
        files[run] = {p.relative_to(root).as_posix(): p.read_bytes()
                      for p in [*(root / "data").iterdir(), root / "cal" / "checkpoint.json",
                                root / "eval" / "metrics.json"]}
    differ = sorted(k for k in files["a"] if files["a"][k] != files["b"].get(k))
    ok = not differ and files["a"].keys() == files["b"].keys()
    report(capsys, 8, ok, f"{len(files['a'])} files compared, differing: {differ or 'none'}")
    assert ok
