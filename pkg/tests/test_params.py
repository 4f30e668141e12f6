import warnings

import numpy as np
import pytest

from raycal import autodiff as ad
from raycal.autodiff import Tape
from raycal.em import hemisphere_quadrature, r_hat
from raycal.geometry import Aabb
from raycal.params import (ConfigurationError, EmbeddingMaterials, HGScatteringPattern, NeuralMaterialNet,
                           NeuralMaterials, ParameterStore, SGMixtureAntenna, hg_normalization, hg_pattern_values,
                           load_checkpoint, material_from_embedding, neural_material_query, positional_encode,
                           save_checkpoint, sg_gain)


def sphere_quadrature(n_theta=200, n_phi=400):
    x, w = np.polynomial.legendre.leggauss(n_theta)
    theta = 0.5 * np.pi * (x + 1)
    phi = (np.arange(n_phi) + 0.5) * 2 * np.pi / n_phi
    T, P = np.meshgrid(theta, phi, indexing="ij")
    W = np.outer(w * 0.5 * np.pi * np.sin(theta), np.full(n_phi, 2 * np.pi / n_phi))
    return r_hat(T, P).reshape(-1, 3), W.reshape(-1)


def random_sg(rng, M, lam_range=(0.1, 50.0)):
    ant = SGMixtureAntenna("a", M)
    store = ParameterStore()
    mu = rng.normal(size=(M, 3))
    ant.set(store, rng.dirichlet(np.ones(M)), rng.uniform(*lam_range, M), mu, rng.uniform(0.3, 0.99))
    return ant, store


# --- spherical-Gaussian antennas ---------------------------------------------------------------

def test_sg_gain_integral_matches_efficiency():
    dirs, w = sphere_quadrature()
    rng = np.random.default_rng(0)
    for _ in range(100):
        ant, store = random_sg(rng, int(rng.integers(1, 4)))
        G = ad.value(ant.gain(store.values, dirs))
        eta = ad.value(ant.efficiency(store.values))
        assert np.sum(G * w) == pytest.approx(4 * np.pi * eta, rel=0.01)


def test_sg_isotropic_limit():
    ant = SGMixtureAntenna("a", 1)
    store = ParameterStore()
    ant.set(store, [1.0], [1e-9], [[0, 0, 1.0]], 0.5)
    store.add("a.efficiency_logit", 50.0)  # sigmoid -> 1
    G = ad.value(sg_gain(ant, store.values, np.linspace(0, np.pi, 7), np.linspace(0, 6, 7)))
    np.testing.assert_allclose(G, 1.0, rtol=1e-8)


def test_sg_peak_along_mean():
    ant = SGMixtureAntenna("a", 1)
    store = ParameterStore()
    ant.set(store, [1.0], [4.0], [[0, 0, 2.0]], 0.9)
    theta = np.linspace(0, np.pi, 181)
    G = ad.value(sg_gain(ant, store.values, theta, np.zeros_like(theta)))
    assert np.argmax(G) == 0


def test_sg_constraints_hold():
    ant = SGMixtureAntenna("a", 3)
    store = ParameterStore()
    ant.init(store, np.random.default_rng(0))
    w = ad.value(ant.weights(store.values))
    assert w.sum() == pytest.approx(1.0, abs=1e-9)
    np.testing.assert_allclose(np.linalg.norm(ad.value(ant.means(store.values)), axis=1), 1.0)


# --- hemispherical-Gaussian patterns -----------------------------------------------------------

def test_hg_normalization_examples():
    assert ad.value(hg_normalization(0.0, 0.3)) == pytest.approx(2 * np.pi)
    assert ad.value(hg_normalization(1e-6, 1.0)) == pytest.approx(2 * np.pi, rel=1e-4)
    # lobe axis along the normal: compare with a dense quadrature of exp(lam (cos g - 1))
    n = 1000
    th = (np.arange(n) + 0.5) * (np.pi / 2) / n
    lam = 5.0
    ref = np.sum(np.exp(lam * (np.cos(th) - 1)) * np.sin(th)) * (np.pi / 2 / n) * 2 * np.pi
    assert ad.value(hg_normalization(lam, 1.0)) == pytest.approx(ref, rel=0.03)
    grid = np.linspace(1e-3, 100, 400)
    for cb in (-1.0, -0.3, 0.0, 0.5, 1.0):
        assert np.all(ad.value(hg_normalization(grid, np.full_like(grid, cb))) > 0)


def hg_integral(w, l2, l3, theta_i, normalization="axis"):
    dirs, wq = hemisphere_quadrature(128, 128)
    t = np.radians(theta_i)
    k_i = np.broadcast_to(np.array([np.sin(t), 0.0, -np.cos(t)]), dirs.shape)
    n = np.broadcast_to(np.array([0.0, 0.0, 1.0]), dirs.shape)
    f = ad.value(hg_pattern_values(np.asarray(w), l2, l3, k_i, dirs, n, normalization))
    return np.sum(f * wq), f, dirs


def test_hg_lambert_integrates_to_one():
    total, _, _ = hg_integral([1.0, 0.0, 0.0], 3.0, 3.0, 40.0)
    assert total == pytest.approx(1.0, abs=1e-9)


def test_hg_specular_lobe_concentrates():
    t = np.radians(30)
    n = np.array([[0.0, 0.0, 1.0]])
    k_i = np.array([[np.sin(t), 0.0, -np.cos(t)]])
    k_r = np.array([[np.sin(t), 0.0, np.cos(t)]])
    off = np.array([[np.sin(t + np.radians(30)), 0.0, np.cos(t + np.radians(30))]])
    at_r = ad.value(hg_pattern_values(np.array([0.0, 0.0, 1.0]), 1.0, 40.0, k_i, k_r, n))
    at_off = ad.value(hg_pattern_values(np.array([0.0, 0.0, 1.0]), 1.0, 40.0, k_i, off, n))
    assert at_r[0] > 10 * at_off[0]


def test_hg_integral_random_draws():
    rng = np.random.default_rng(1)
    for _ in range(100):
        w = rng.dirichlet(np.ones(3))
        # the incident lobe sits below the horizon; its approximate normalization holds to ~5% only for
        # concentrations up to about 4, while the specular lobe stays within 2% up to 50
        l2, l3 = rng.uniform(0.1, 4.0), rng.uniform(0.1, 50.0)
        total, f, _ = hg_integral(w, l2, l3, rng.uniform(0, 75))
        assert 0.95 <= total <= 1.05
        assert np.all(f >= 0)


def test_hg_printed_normalization_selectable():
    total, _, _ = hg_integral([0.0, 0.0, 1.0], 5.0, 5.0, 30.0, "printed")
    assert np.isfinite(total)
    with pytest.raises(ValueError):
        hg_integral([0.0, 0.0, 1.0], 5.0, 5.0, 30.0, "other")


def test_hg_pattern_weights_constraint():
    pat = HGScatteringPattern()
    store = ParameterStore()
    pat.init(store)
    assert ad.value(pat.weights(store.values)).sum() == pytest.approx(1.0)


# --- embeddings --------------------------------------------------------------------------------

def test_embedding_zero_inner_products():
    m = material_from_embedding(np.zeros(4), np.zeros((4, 4)))
    assert (m.sigma, m.eps_r, m.S, m.Kx) == (1.0, 2.0, 0.5, 0.5)


def test_embedding_concrete_target():
    v = np.array([1.0, 0.0])
    w = np.array([[0.0, 0.0], [np.log(4.24), 0.0], [0.0, 0.0], [0.0, 0.0]])
    assert ad.value(material_from_embedding(v, w).eps_r) == pytest.approx(5.24, rel=1e-12)


def test_embedding_gradients_nonzero():
    rng = np.random.default_rng(0)
    v0, w0 = rng.normal(size=6), rng.normal(size=(4, 6))
    for field in ("sigma", "eps_r", "S", "Kx"):
        t = Tape()
        v = t.param("v", v0)
        g = t.backward(getattr(material_from_embedding(v, w0), field))["v"]
        assert np.all(g != 0)
        rep = ad.finite_diff_check(lambda p: getattr(material_from_embedding(p["v"], w0), field), {"v": v0})
        assert rep.max_rel_error <= 1e-6


def test_embedding_set_realizes_values():
    from raycal.em import MaterialParams
    emb = EmbeddingMaterials(["Floor"], L=5)
    store = ParameterStore()
    emb.set(store, "Floor", MaterialParams(5.24, 0.121, 0.3, 0.2))
    m = emb.material(store.values, "Floor")
    np.testing.assert_allclose([ad.value(x) for x in (m.eps_r, m.sigma, m.S, m.Kx)], [5.24, 0.121, 0.3, 0.2])


def test_constraint_fuzz():
    rng = np.random.default_rng(2)
    raw = rng.normal(scale=6.0, size=(10_000, 4))
    v = np.array([1.0])
    for row in raw[:2000]:
        m = material_from_embedding(v, row[:, None])
        assert m.sigma > 0 and m.eps_r > 1 and 0 < m.S < 1 and 0 < m.Kx < 1
    logits = raw[:, :3]
    w = ad.value(ad.softmax(logits, axis=-1))
    np.testing.assert_allclose(w.sum(1), 1.0, atol=1e-9)
    assert np.all((w >= 0) & (w <= 1))
    assert np.all(np.exp(raw) > 0)


# --- positional encoding and neural materials --------------------------------------------------

def test_positional_encode_examples():
    z = positional_encode(np.zeros(3), 4)
    assert z.shape == (1, 24)
    np.testing.assert_array_equal(z[0, 0::2], 0.0)
    np.testing.assert_array_equal(z[0, 1::2], 1.0)
    one = positional_encode(np.array([[0.25]]), 1)
    np.testing.assert_allclose(one[0], [1.0, 0.0], atol=1e-15)
    with pytest.warns(UserWarning):
        positional_encode(np.array([0.9, 0.0, 0.0]), 2)


def test_neural_zero_weights():
    net = NeuralMaterialNet(L_enc=3, hidden=(8, 8))
    store = ParameterStore()
    net.init(store, np.random.default_rng(0))
    for k in store.names:
        store.add(k, np.zeros_like(store[k]))
    box = Aabb(np.zeros(3), 10.0)
    m = neural_material_query(net, box, store.values, np.random.default_rng(1).uniform(-4, 4, (5, 3)))
    for x, ref in ((m.sigma, 1.0), (m.eps_r, 2.0), (m.S, 0.5), (m.Kx, 0.5)):
        np.testing.assert_array_equal(ad.value(x), ref)


def test_neural_query_deterministic_and_width():
    net = NeuralMaterialNet(L_enc=4, hidden=(16, 16), pattern_heads=True)
    assert net.layer_shapes[0][0] == 24 and net.layer_shapes[-1][1] == 9
    store = ParameterStore()
    net.init(store, np.random.default_rng(0))
    box = Aabb(np.zeros(3), 10.0)
    p = np.array([[1.0, -2.0, 0.5]])
    a, _ = neural_material_query(net, box, store.values, p)
    b, _ = neural_material_query(net, box, store.values, p)
    assert ad.value(a.S) == ad.value(b.S)
    with pytest.raises(ConfigurationError):
        neural_material_query(net, Aabb(np.zeros(3), 0.0), store.values, p)
    with pytest.raises(ConfigurationError):
        NeuralMaterials(net, Aabb(np.zeros(3), 0.0))


def test_neural_first_layer_gradient():
    net = NeuralMaterialNet(L_enc=3, hidden=(16, 16))
    store = ParameterStore()
    net.init(store, np.random.default_rng(3))
    box = Aabb(np.zeros(3), 10.0)
    pts = np.random.default_rng(4).uniform(-4, 4, (6, 3))

    def f(p):
        q = dict(store.values)
        q["neural.W0"] = p["W0"]
        return ad.vsum(neural_material_query(net, box, q, pts).S)
    rep = ad.finite_diff_check(f, {"W0": store["neural.W0"]}, sample=40, floor=1e-9)
    assert rep.max_rel_error <= 1e-4


def test_neural_lipschitz_bound():
    net = NeuralMaterialNet(L_enc=3, hidden=(16, 16))
    store = ParameterStore()
    net.init(store, np.random.default_rng(5))
    box = Aabb(np.zeros(3), 10.0)
    # the encoding is Lipschitz with constant sqrt(sum_l (2^l pi)^2) per coordinate in normalized units
    enc = np.sqrt(np.sum((2.0 ** np.arange(1, 4) * np.pi) ** 2)) / box.edge
    bound = enc * np.prod([np.linalg.norm(store[f"neural.W{k}"], 2) for k in range(3)])
    rng = np.random.default_rng(6)
    raw = lambda x: ad.value(net.forward(store.values, positional_encode(box.normalize(x), 3)))  # noqa: E731
    for _ in range(200):
        x = rng.uniform(-4, 4, (1, 3))
        d = rng.normal(size=(1, 3)) * 1e-4
        assert np.linalg.norm(raw(x + d) - raw(x)) <= bound * np.linalg.norm(d) * (1 + 1e-6)


def test_gradient_flow_smoke():
    net = NeuralMaterialNet(L_enc=2, hidden=(8,), pattern_heads=True)
    store = ParameterStore()
    net.init(store, np.random.default_rng(0))
    t = Tape()
    p = store.bind(t)
    m, extra = neural_material_query(net, Aabb(np.zeros(3), 4.0), p, np.array([[0.3, -0.2, 0.1], [1.0, 0.5, -1.0]]))
    loss = ad.vsum(m.sigma + m.eps_r + m.S + m.Kx + ad.vsum(extra, axis=1))
    g = t.backward(loss)
    assert all(np.any(g[k] != 0) for k in store.names)


# --- checkpoints -------------------------------------------------------------------------------

def test_checkpoint_round_trip(tmp_path):
    store = ParameterStore()
    EmbeddingMaterials(["A", "B"], L=4).init(store, np.random.default_rng(0))
    save_checkpoint(tmp_path / "c.json", store, {"kind": "embedding", "L": 4}, {"step": 3}, {"alpha": 1.5})
    back = load_checkpoint(tmp_path / "c.json")
    assert back.model == {"kind": "embedding", "L": 4} and back.metadata["alpha"] == 1.5
    for k in store.names:
        np.testing.assert_array_equal(back.store[k], store[k])
    (tmp_path / "x.json").write_text("{}")
    with pytest.raises(ValueError):
        load_checkpoint(tmp_path / "x.json")


def test_no_warning_inside_unit_cube():
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        positional_encode(np.array([[0.5, -0.5, 0.0]]), 3)
