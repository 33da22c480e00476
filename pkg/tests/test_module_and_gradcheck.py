import numpy as np
import pytest

from wsanet.errors import GradCheckError, ShapeError
from wsanet.gradcheck import SignFlipped, finite_diff_check
from wsanet.module import Activation, Conv2d, GroupNorm, Module, Sequential
from wsanet.suite import default_registry, gradcheck_suite


def test_param_order_is_depth_first_registration_order():
    net = Sequential(Conv2d(2, 4, 3, padding=1), GroupNorm(4, 2), Activation("relu"), Conv2d(4, 2, 1))
    names = [p.name for p in net.param_specs()]
    assert names == ["0.weight", "0.bias", "1.gamma", "1.beta", "3.weight", "3.bias"]


def test_init_bounds_and_constants():
    conv = Conv2d(3, 5, 3, groups=1)
    p = conv.init_params(seed=11)
    bound = np.sqrt(6.0 / (3 * 9))
    assert np.all(np.abs(p["weight"]) <= bound)
    assert np.array_equal(p["bias"], np.zeros(5))
    gn = GroupNorm(4, 2).init_params()
    assert np.array_equal(gn["gamma"], np.ones(4)) and np.array_equal(gn["beta"], np.zeros(4))


def test_grouped_conv_fan_in_uses_channels_per_group():
    dw = Conv2d(8, 8, 3, groups=8)
    w = dw.init_params(seed=3)["weight"]
    assert w.shape == (8, 1, 3, 3)
    assert np.abs(w).max() <= np.sqrt(6.0 / 9)


def test_init_is_seed_deterministic():
    net = Sequential(Conv2d(2, 4, 3), Conv2d(4, 4, 1))
    a, b, c = net.init_params(5), net.init_params(5), net.init_params(6)
    assert all(np.array_equal(a[k], b[k]) for k in a)
    assert not np.array_equal(a["0.weight"], c["0.weight"])


def test_conv_module_checks_channels():
    with pytest.raises(ShapeError):
        Conv2d(3, 4).forward(np.zeros((1, 2, 4, 4)), Conv2d(3, 4).init_params())


def _conv_case():
    m = Conv2d(2, 3, 3, padding=1)
    rng = np.random.default_rng(0)
    return m, rng.standard_normal((1, 2, 4, 4)), m.init_params(1)


def test_finite_diff_accepts_correct_vjp():
    m, x, p = _conv_case()
    assert finite_diff_check(m, x, p) < 1e-7


def test_finite_diff_catches_sign_flip():
    m, x, p = _conv_case()
    assert finite_diff_check(SignFlipped(m), x, p) > 1.0


def test_finite_diff_requires_float64():
    m, x, p = _conv_case()
    with pytest.raises(GradCheckError):
        finite_diff_check(m, x.astype(np.float32), p)


def test_finite_diff_reports_missing_vjp_and_missing_grads():
    class NoVjp(Module):
        def forward(self, x, params):
            return 2 * x, None

    with pytest.raises(GradCheckError):
        finite_diff_check(NoVjp(), np.ones((1, 1, 2, 2)))

    class Forgetful(Module):
        def forward(self, x, params):
            return x * params["s"], None

        def backward(self, cache, gy):
            return gy, {}

    with pytest.raises(GradCheckError):
        finite_diff_check(Forgetful(), np.ones((1, 1, 2, 2)), {"s": np.ones(1)})


def test_registry_covers_required_ops_at_three_shapes():
    reg = default_registry()
    names = {e.name for e in reg}
    required = {"conv2d", "conv2d_strided", "conv2d_depthwise", "conv2d_strip", "group_norm", "relu",
                "sigmoid", "scaled_dot_attention", "pconv", "faster_block", "gpa", "rla", "sma", "sga",
                "lwga_apply", "sru", "cru", "scconv", "caa"}
    assert required <= names
    assert all(len({tuple(s) for s in e.shapes}) >= 3 for e in reg)


def test_empty_registry_is_an_error():
    with pytest.raises(GradCheckError, match="nothing to check"):
        gradcheck_suite(0, registry=[])


@pytest.mark.parametrize("victim", ["sigmoid", "lwga_apply", "cru"])
def test_injected_sign_error_fails_exactly_that_op(victim):
    reg = [e for e in default_registry() if e.name in {"conv2d", "sigmoid", "lwga_apply", "cru", "gpa"}]
    rep = gradcheck_suite(0, registry=reg, inject=[victim])
    assert rep["failed"] == [victim]
    assert not rep["passed"]


def test_inject_unknown_op_is_rejected():
    with pytest.raises(GradCheckError):
        gradcheck_suite(0, inject=["nope"])
