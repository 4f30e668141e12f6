import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from raycal import autodiff as ad
from raycal.autodiff import CVar, GradientError, Tape, TapeError
from raycal.calibration import smape


def test_record_values_and_partials():
    t = Tape()
    x, y = t.param("x", 2.0), t.param("y", 3.0)
    s = t.record("add", [x, y], 5.0, [1.0, 1.0])
    p = t.record("mul", [x, y], 6.0, [3.0, 2.0])
    e = t.record("exp", [t.param("z", 0.0)], 1.0, [1.0])
    assert (float(s.value), float(p.value), float(e.value)) == (5.0, 6.0, 1.0)
    g = t.backward(ad.add(s, p))
    assert g["x"] == pytest.approx(4.0) and g["y"] == pytest.approx(3.0)


def test_record_rejects_mismatched_partials_and_foreign_tape():
    t1, t2 = Tape(), Tape()
    x = t1.param("x", 1.0)
    with pytest.raises(TapeError):
        t1.record("add", [x], 1.0, [1.0, 1.0])
    with pytest.raises(TapeError):
        t2.record("neg", [x], -1.0, [-1.0])


def test_topological_order():
    t = Tape()
    x = t.param("x", 1.5)
    y = ad.mul(ad.sin(x), ad.exp(x))
    ad.log(ad.add(y, 3.0))
    assert all(all(p < i for p in ps) for i, ps in enumerate(t.parents))


@pytest.mark.parametrize("fn, x0, expected", [
    (lambda x: ad.mul(x, x), 3.0, 6.0),
    (ad.sigmoid, 0.0, 0.25),
])
def test_backward_examples(fn, x0, expected):
    t = Tape()
    x = t.param("x", x0)
    assert t.backward(fn(x))["x"] == pytest.approx(expected, rel=1e-12)


def test_complex_magnitude_gradient_wrt_distance():
    f, tau = 3.5e9, 7e-9
    t = Tape()
    d = t.param("d", 2.0)
    h = ad.cexp_j(-2 * np.pi * f * tau) / d
    g = t.backward(h.abs2())["d"]
    assert g == pytest.approx(-2 / 2.0 ** 3, rel=1e-12)


def test_unused_parameter_gets_zero():
    t = Tape()
    x, y = t.param("x", 1.0), t.param("y", 2.0)
    g = t.backward(ad.mul(x, 4.0))
    assert g["y"] == 0.0


def test_nan_loss_raises_with_provenance():
    t = Tape(check_finite=False)
    x = t.param("x", -1.0)
    with np.errstate(invalid="ignore"):
        loss = ad.log(x)
    with pytest.raises(GradientError, match="log"):
        t.backward(loss)


def test_nonfinite_value_raises_during_recording():
    t = Tape()
    x = t.param("x", 0.0)
    with pytest.raises(GradientError):
        with np.errstate(divide="ignore"):
            ad.log(x)


def test_loss_must_be_scalar():
    t = Tape()
    x = t.param("x", np.ones(3))
    with pytest.raises(TapeError):
        t.backward(x)


def test_finite_diff_check_sum_of_squares():
    rng = np.random.default_rng(0)
    rep = ad.finite_diff_check(lambda p: ad.vsum(ad.mul(p["t"], p["t"])), {"t": rng.normal(size=5)}, step=1e-5)
    assert rep.max_rel_error <= 1e-6


def test_finite_diff_check_smape_of_exp():
    rep = ad.finite_diff_check(lambda p: smape(ad.exp(p["t"]), 1.0), {"t": np.array(0.3)})
    assert rep.max_rel_error <= 1e-5


def test_finite_diff_check_constant():
    rep = ad.finite_diff_check(lambda p: ad.mul(p["t"], 0.0), {"t": np.array(1.0)})
    assert rep.analytic["t"] == 0.0 and rep.numeric["t"] == 0.0


def test_finite_diff_check_flags_nan():
    with np.errstate(invalid="ignore"):
        rep = ad.finite_diff_check(lambda p: ad.log(p["t"]), {"t": np.array(-1.0)})
    assert rep.nan_params == ["t"]


def test_finite_diff_check_sampling_limits_entries():
    rep = ad.finite_diff_check(lambda p: ad.vsum(ad.exp(p["t"])), {"t": np.zeros(50)}, sample=5)
    assert np.sum(np.isfinite(rep.numeric["t"])) == 5
    assert rep.max_rel_error < 1e-8


PRIMITIVES = {
    "add": lambda p: ad.add(p["a"], p["b"]),
    "sub": lambda p: ad.sub(p["a"], p["b"]),
    "mul": lambda p: ad.mul(p["a"], p["b"]),
    "div": lambda p: ad.div(p["a"], p["b"]),
    "exp": lambda p: ad.exp(p["a"]),
    "log": lambda p: ad.log(p["a"]),
    "sqrt": lambda p: ad.sqrt(p["a"]),
    "sin": lambda p: ad.sin(p["a"]),
    "cos": lambda p: ad.cos(p["a"]),
    "power": lambda p: ad.power(p["a"], 3.3),
    "sigmoid": lambda p: ad.sigmoid(p["a"]),
    "dot": lambda p: ad.dot(p["a"], p["b"]),
    "abs2": lambda p: CVar(p["a"], p["b"]).abs2(),
}


@pytest.mark.parametrize("name", sorted(PRIMITIVES))
@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_primitive_gradients(name, seed):
    rng = np.random.default_rng(seed)
    point = {"a": rng.uniform(0.3, 2.0, 4), "b": rng.uniform(0.3, 2.0, 4)}
    w = rng.normal(size=4)

    def f(p):
        out = PRIMITIVES[name](p)
        return ad.vsum(ad.mul(out, w if np.ndim(ad.value(out)) else 1.0))
    rep = ad.finite_diff_check(f, point, floor=1e-9)
    assert rep.max_rel_error <= 1e-5


@settings(max_examples=25, deadline=None)
@given(a=st.floats(-3, 3), b=st.floats(-3, 3), seed=st.integers(0, 1000))
def test_linearity_of_backward(a, b, seed):
    x0 = np.random.default_rng(seed).normal(size=3)

    def grads(fn):
        t = Tape()
        x = t.param("x", x0)
        return t.backward(fn(x))["x"]
    f = lambda x: ad.vsum(ad.sin(x))  # noqa: E731
    g = lambda x: ad.vsum(ad.mul(x, ad.exp(x)))  # noqa: E731
    lhs = grads(lambda x: ad.add(ad.mul(f(x), a), ad.mul(g(x), b)))
    np.testing.assert_allclose(lhs, a * grads(f) + b * grads(g), rtol=1e-12, atol=1e-12)


def test_abs2_gradient_is_exact():
    t = Tape()
    re, im = t.param("re", 1.25), t.param("im", -0.75)
    g = t.backward(CVar(re, im).abs2())
    assert g["re"] == 2 * 1.25 and g["im"] == 2 * -0.75


def test_numpy_defers_to_var_operators():
    t = Tape()
    x = t.param("x", np.ones(3))
    out = np.arange(3.0) - x
    assert isinstance(out, ad.Var)
    z = np.array([1.0, 2.0]) * CVar.const([1j, 1.0])
    assert isinstance(z, CVar)


def test_gradcheck_suite_passes():
    from raycal.gradcheck import run_suite
    report = run_suite(pipelines=False)
    assert report.passed, report.to_dict()["worst"]
