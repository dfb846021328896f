import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from reverbfl import autodiff as ad


def _single(op, *args, **kw):
    g = ad.Graph()
    names = [g.input(f"in{i}") for i in range(len(args))]
    getattr(g, op)("out", *names, **kw)
    return g, {f"in{i}": np.asarray(a, dtype=np.float64) for i, a in enumerate(args)}


def test_relu_forward():
    g, b = _single("relu", [-1.0, 0.0, 2.0])
    np.testing.assert_array_equal(ad.evaluate(g, b, ["out"])["out"], [0, 0, 2])


def test_softmax_ll_uniform_logits():
    g = ad.Graph()
    g.input("z")
    g.input("y")
    g.softmax_ll("ce", "z", "y")
    out = ad.evaluate(g, {"z": np.zeros((1, 2)), "y": np.array([[1.0, 0.0]])}, ["ce"])["ce"]
    assert float(out) == pytest.approx(math.log(2), abs=1e-12)


def test_valid_conv_of_ones():
    g, b = _single("conv2d", np.ones((1, 3, 3, 1)), np.ones((2, 2, 1, 1)), padding="valid")
    out = ad.evaluate(g, b, ["out"])["out"]
    assert out.shape == (1, 2, 2, 1)
    np.testing.assert_array_equal(out, 4.0)


def test_same_conv_preserves_spatial_shape():
    g, b = _single("conv2d", np.ones((2, 5, 4, 3)), np.ones((3, 3, 3, 6)))
    assert ad.evaluate(g, b, ["out"])["out"].shape == (2, 5, 4, 6)


def test_square_derivative():
    g = ad.Graph()
    g.input("x")
    g.mul("sq", "x", "x")
    assert ad.gradients(g, {"x": np.array(3.0)}, "sq", ["x"])["x"] == pytest.approx(6.0)


def test_softmax_ce_gradient_identity():
    rng = np.random.default_rng(1)
    z = rng.standard_normal((4, 5))
    y = np.eye(5)[[0, 3, 1, 4]]
    g = ad.Graph()
    g.input("z")
    g.input("y")
    g.softmax_ll("ce", "z", "y")
    grad = ad.gradients(g, {"z": z, "y": y}, "ce", ["z"])["z"]
    p = np.exp(z - z.max(axis=1, keepdims=True))
    p /= p.sum(axis=1, keepdims=True)
    np.testing.assert_allclose(grad, (p - y) / 4, atol=1e-14)


def _two_layer(rng):
    g = ad.Graph()
    g.input("x")
    g.input("y")
    for n in ("w1", "b1", "w2", "b2"):
        g.param(n)
    g.affine("h", "x", "w1", "b1")
    g.relu("a", "h")
    g.affine("z", "a", "w2", "b2")
    g.softmax_ll("loss", "z", "y")
    b = {"x": rng.standard_normal((6, 3)), "y": np.eye(2)[rng.integers(0, 2, 6)],
         "w1": rng.standard_normal((3, 3)), "b1": rng.standard_normal(3),
         "w2": rng.standard_normal((3, 2)), "b2": rng.standard_normal(2)}
    return g, b


def test_two_layer_net_matches_finite_differences():
    g, b = _two_layer(np.random.default_rng(2))
    assert ad.finite_difference_check(g, b, "loss", ["w1", "b1", "w2", "b2"], step=1e-5) < 1e-4


def test_fd_linear_loss_is_exact():
    g = ad.Graph()
    g.input("x")
    g.param("w")
    g.matmul("xw", "x", "w")
    g.mean("loss", "xw")
    rng = np.random.default_rng(3)
    b = {"x": rng.standard_normal((4, 3)), "w": rng.standard_normal((3, 2))}
    assert ad.finite_difference_check(g, b, "loss", step=0.37) < 1e-10


def test_fd_quadratic_loss():
    g = ad.Graph()
    g.input("x")
    g.sumsq("loss", "x", scale=0.5)
    b = {"x": np.random.default_rng(4).standard_normal(7)}
    assert ad.finite_difference_check(g, b, "loss", step=1e-5) < 1e-8


def test_fd_rejects_bad_step():
    g = ad.Graph()
    g.input("x")
    g.sumsq("loss", "x")
    with pytest.raises(ValueError):
        ad.finite_difference_check(g, {"x": np.ones(2)}, "loss", step=0.0)


def test_micro_cnn_gradients(micro_arch):
    from reverbfl import model as M
    rng = np.random.default_rng(5)
    params = M.init_params(micro_arch, 5)
    g = M.build_graph(micro_arch, True, 1e-3)
    b = M._bindings(micro_arch, params, rng.uniform(-1, 1, (3, 8, 8, 2)), rng.integers(0, 3, 3), True, rng)
    wrt = M.trainable_names(micro_arch) + ["x"]
    assert ad.finite_difference_check(g, b, "loss", wrt, step=1e-5, max_coords=12, rng=rng) < 1e-4


def test_errors():
    g, b = _single("add", np.ones((2, 3)), np.ones((4, 3)))
    with pytest.raises(ad.ShapeError):
        ad.evaluate(g, b, ["out"])
    g, _ = _single("relu", [1.0])
    with pytest.raises(ad.UnboundNodeError):
        ad.evaluate(g, {}, ["out"])
    g, b = _single("relu", [np.inf])
    with pytest.raises(ad.NonFiniteError):
        ad.evaluate(g, b, ["out"])
    g, b = _single("relu", [1.0, 2.0])
    with pytest.raises(ad.ShapeError):
        ad.gradients(g, b, "out", ["in0"])


def test_disconnected_wrt_gets_zeros():
    g = ad.Graph()
    g.input("x")
    g.param("unused")
    g.sumsq("loss", "x")
    grads = ad.gradients(g, {"x": np.ones(3), "unused": np.ones((2, 2))}, "loss", ["unused"])
    np.testing.assert_array_equal(grads["unused"], np.zeros((2, 2)))


def test_maxpool_floors_odd_sizes():
    g, b = _single("maxpool2x2", np.arange(1 * 5 * 3 * 1, dtype=float).reshape(1, 5, 3, 1))
    out = ad.evaluate(g, b, ["out"])["out"]
    assert out.shape == (1, 2, 1, 1)
    np.testing.assert_array_equal(out[0, :, 0, 0], [4.0, 10.0])


@settings(max_examples=25, deadline=None)
@given(st.floats(-3, 3), st.floats(-3, 3), st.integers(0, 2 ** 31 - 1))
def test_gradient_linearity(a, c, seed):
    rng = np.random.default_rng(seed)
    g = ad.Graph()
    g.input("x")
    g.param("w")
    g.matmul("xw", "x", "w")
    g.relu("r", "xw")
    g.mean("f", "r")
    g.sumsq("h", "w")
    g.scale("af", "f", a)
    g.scale("ch", "h", c)
    g.add("combo", "af", "ch")
    b = {"x": rng.standard_normal((4, 3)), "w": rng.standard_normal((3, 2))}
    gf = ad.gradients(g, b, "f", ["w"])["w"]
    gh = ad.gradients(g, b, "h", ["w"])["w"]
    combo = ad.gradients(g, b, "combo", ["w"])["w"]
    np.testing.assert_allclose(combo, a * gf + c * gh, atol=1e-12)


def test_determinism_across_threads(micro_arch):
    from concurrent.futures import ThreadPoolExecutor

    from reverbfl import model as M
    rng = np.random.default_rng(6)
    params = M.init_params(micro_arch, 6)
    x, y = rng.uniform(-1, 1, (4, 8, 8, 2)), rng.integers(0, 3, 4)
    ref = M.grad_input(micro_arch, params, x, y)
    with ThreadPoolExecutor(4) as pool:
        outs = list(pool.map(lambda _: M.grad_input(micro_arch, params, x, y), range(8)))
    for o in outs:
        assert np.array_equal(o, ref)
