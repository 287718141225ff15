import numpy as np
import pytest

from grc.errors import ConfigError, OracleError
from grc.oracle import (finite_diff_grad, layer_params, oracle_agreement, random_layer_instance, reference_grc_step,
                        relative_error, tiny_instance)


def test_fd_square():
    g = finite_diff_grad(lambda t: float(t[0] ** 2), np.array([3.0]))
    assert abs(g[0] - 6.0) < 1e-8


def test_fd_linear():
    coef = np.array([[1.5, -2.0], [0.25, 4.0]])
    g = finite_diff_grad(lambda t: float((coef * t).sum()), np.zeros((2, 2)))
    assert np.abs(g - coef).max() < 1e-9


def test_fd_non_finite_names_coordinate():
    def f(t):
        return float("nan") if t[1] > 0 else 0.0
    with pytest.raises(OracleError, match=r"\(1,\)"):
        finite_diff_grad(f, np.zeros(3))


def test_relative_error_floor():
    assert relative_error(np.array([0.0]), np.array([0.0]))[0] == 0.0
    assert relative_error(np.array([1e-13]), np.array([0.0]))[0] == pytest.approx(0.1)
    assert relative_error(np.array([2.0]), np.array([1.0]))[0] == 0.5


def zero_params(d, d_m, heads):
    shapes = {"q_w": (d, d), "q_b": (d,), "k_w": (d, d), "v_w": (d, d), "v_b": (d,), "out_w": (d, d),
              "out_b": (d,), "qb_w": (d_m, d_m), "qb_b": (d_m,), "kb_w": (d_m, d_m), "vb_w": (d_m, d),
              "vb_b": (d,), "w_u": (2 * d_m, d_m), "b_u": (d_m,), "w_r": (2 * d_m, d_m), "b_r": (d_m,),
              "w_c": (2 * d_m, d_m), "b_c": (d_m,), "lam": (heads,)}
    return {k: np.zeros(s).tolist() for k, s in shapes.items()}


def test_reference_zero_everything():
    x = np.zeros((1, 2, 4)).tolist()
    c, o = reference_grc_step(x, zero_params(4, 2, 2), np.zeros((2, 2)).tolist(), 2)
    assert np.all(np.array(c) == 0) and np.all(np.array(o) == 0)


def test_reference_lambda_zero_is_midpoint():
    layer, x = random_layer_instance(np.random.default_rng(0))
    params = layer_params(layer)
    params["lam"] = [0.0] * layer.heads
    params["out_w"] = np.eye(layer.d_model).tolist()
    params["out_b"] = [0.0] * layer.d_model
    _, o, selfs, mems = reference_grc_step(x.tolist(), params, layer.cache.C.tolist(), layer.heads,
                                           return_branches=True)
    np.testing.assert_allclose(np.array(o), (np.array(selfs) + np.array(mems)) / 2, atol=1e-12)


def test_reference_size_cap():
    with pytest.raises(OracleError):
        reference_grc_step(np.zeros((5, 2, 4)).tolist(), zero_params(4, 2, 2), np.zeros((2, 2)).tolist(), 2)
    with pytest.raises(OracleError):
        reference_grc_step(np.zeros((1, 2, 10)).tolist(), zero_params(10, 5, 1), np.zeros((2, 5)).tolist(), 1)


def test_reference_matches_library_on_a_few_instances():
    assert oracle_agreement(10, seed=3) < 1e-10


def test_tiny_instance_rejects_indivisible_cache():
    with pytest.raises(ConfigError):
        tiny_instance(d_model=4, d_cache=3, heads=2)
