import numpy as np
import pytest

from lagr import autodiff as ad
from lagr.autodiff import DiffValue, GraphError, backward
from lagr.gradcheck import (
    GradReport,
    OracleError,
    check_gradient,
    finite_diff,
    report_to_csv,
    run_case,
)


class TestBackwardBasics:
    def test_square(self):
        x = DiffValue(3.0, requires_grad=True)
        y = x * x
        backward(y)
        assert float(x.grad) == pytest.approx(6.0)

    def test_product_rule(self):
        x = DiffValue(2.0, requires_grad=True)
        y = DiffValue(5.0, requires_grad=True)
        backward(x * y)
        assert float(x.grad) == pytest.approx(5.0)
        assert float(y.grad) == pytest.approx(2.0)

    def test_sum_of_delta_conv_is_all_ones(self):
        x = DiffValue(np.random.default_rng(0).standard_normal((1, 1, 4, 4)),
                      requires_grad=True)
        k = np.zeros((1, 1, 3, 3))
        k[0, 0, 1, 1] = 1.0
        backward(ad.conv2d(x, DiffValue(k)).sum())
        np.testing.assert_array_equal(x.grad, np.ones((1, 1, 4, 4)))

    def test_non_scalar_root_rejected(self):
        x = DiffValue(np.ones(3), requires_grad=True)
        with pytest.raises(GraphError):
            backward(x * 2.0)

    def test_diamond_graph_accumulates(self):
        x = DiffValue(2.0, requires_grad=True)
        y = x * x + x * 3.0  # dy/dx = 2x + 3 = 7
        backward(y)
        assert float(x.grad) == pytest.approx(7.0)

    def test_constant_branch_gets_no_grad(self):
        x = DiffValue(1.0, requires_grad=True)
        c = DiffValue(4.0)
        backward(x * c)
        assert c.grad is None

    def test_deep_chain_no_recursion_limit(self):
        x = DiffValue(1.0, requires_grad=True)
        y = x
        for _ in range(5000):
            y = y + 1.0
        backward(y)
        assert float(x.grad) == pytest.approx(1.0)

    def test_repeated_backward_on_fresh_graphs_deterministic(self):
        def once():
            x = DiffValue(np.array([1.0, 2.0]), requires_grad=True)
            backward(((x * x).sum() + x.sum()).sqrt())
            return x.grad.copy()

        np.testing.assert_array_equal(once(), once())


class TestFiniteDiff:
    def test_constant_function_zero(self):
        g = finite_diff(lambda x: 7.0, np.ones(4))
        np.testing.assert_array_equal(g, 0.0)

    def test_linear_sum_exact(self):
        g = finite_diff(lambda x: float(np.sum(x)), np.random.default_rng(1).standard_normal(6))
        np.testing.assert_allclose(g, 1.0, rtol=0, atol=1e-9)

    def test_quadratic_form(self):
        rng = np.random.default_rng(2)
        a = rng.standard_normal((5, 5))
        a = (a + a.T) / 2
        x0 = rng.standard_normal(5)
        g = finite_diff(lambda x: 0.5 * float(x @ a @ x), x0)
        np.testing.assert_allclose(g, a @ x0, atol=1e-8)

    def test_non_finite_probe_raises(self):
        with np.errstate(invalid="ignore"):
            with pytest.raises(OracleError):
                finite_diff(lambda x: float(np.log(x[0])), np.array([1e-6]), h=1e-5)


class TestCheckGradient:
    def test_polynomial_composition(self):
        def f(leaf):
            x = leaf.reshape(2, 3)
            return ((x * x).sum() + (x.exp() * 0.1).sum()) ** 2

        rep = check_gradient(f, np.random.default_rng(3).standard_normal(6))
        assert rep.max_rel_err < 1e-6

    def test_constant_function_both_zero(self):
        rep = check_gradient(lambda _leaf: DiffValue(6.0), np.ones(3))
        np.testing.assert_array_equal(rep.analytic, 0.0)
        np.testing.assert_array_equal(rep.numeric, 0.0)
        assert rep.max_rel_err == 0.0

    def test_csv_report_shape(self):
        rep = check_gradient(lambda x: (x * x).sum(), np.array([1.0, 2.0]))
        text = report_to_csv(rep)
        lines = text.splitlines()
        assert lines[0] == "param_index,analytic,numeric,rel_err"
        assert len(lines) == 3
        assert text.endswith("\n")


class TestStructuredOps:
    def test_conv2d_both_arguments(self):
        b, cin, cout, h, w, k = 1, 2, 2, 4, 4, 3
        nx = b * cin * h * w
        probe = np.cos(np.arange(b * cout * h * w)).reshape(b, cout, h, w)

        def f(leaf):
            x = leaf[:nx].reshape(b, cin, h, w)
            kern = leaf[nx:].reshape(cout, cin, k, k)
            return (ad.conv2d(x, kern) * probe).sum()

        rep = check_gradient(f, np.random.default_rng(4).standard_normal(nx + cout * cin * k * k))
        assert rep.max_rel_err < 1e-6

    def test_resize_bilinear(self):
        probe = np.sin(np.arange(2 * 7 * 3)).reshape(1, 2, 7, 3)

        def f(leaf):
            return (ad.resize_bilinear(leaf.reshape(1, 2, 4, 5), 7, 3) * probe).sum()

        rep = check_gradient(f, np.random.default_rng(5).standard_normal(40))
        assert rep.max_rel_err < 1e-6

    def test_grid_sample_field_and_grid(self):
        hs = ws = 6
        ho = wo = 3
        nf = 2 * hs * ws
        probe = np.sin(np.arange(2 * ho * wo)).reshape(1, 2, ho, wo)

        def f(leaf):
            fld = leaf[:nf].reshape(1, 2, hs, ws)
            grid = leaf[nf:].reshape(2, ho, wo)
            return (ad.grid_sample(fld, grid) * probe).sum()

        def sample(rng):
            fld = rng.standard_normal(nf)
            raw = np.stack([rng.uniform(1, ws - 2, (ho, wo)), rng.uniform(1, hs - 2, (ho, wo))])
            frac = raw - np.floor(raw)
            raw = np.floor(raw) + np.clip(frac, 0.25, 0.75)  # stay clear of pixel edges
            return np.concatenate([fld, raw.ravel()])

        rep = run_case(f, sample, np.random.default_rng(6))
        assert rep.max_rel_err < 1e-6

    def test_homography_grid_through_inverse(self):
        probe = np.sin(np.arange(2 * 4 * 4)).reshape(2, 4, 4)

        def f(leaf):
            minv = ad.inv3(leaf.reshape(3, 3))
            return (ad.homography_grid(minv, 4, 4) * probe).sum()

        def sample(rng):
            m = np.eye(3) + 0.05 * rng.standard_normal((3, 3))
            m[2, 2] = 1.0
            return m.ravel()

        rep = run_case(f, sample, np.random.default_rng(7))
        assert rep.max_rel_err < 1e-6

    def test_matmul_matrix_vector(self):
        def f(leaf):
            w = leaf[:6].reshape(2, 3)
            v = leaf[6:]
            return ((w @ v) ** 2).sum()

        rep = check_gradient(f, np.random.default_rng(8).standard_normal(9))
        assert rep.max_rel_err < 1e-6

    def test_softmax_and_getitem(self):
        def f(leaf):
            s = ad.softmax(leaf)
            return s[0] * 2.0 + s[2]

        rep = check_gradient(f, np.array([0.3, -1.2, 0.8]))
        assert rep.max_rel_err < 1e-6

    def test_gradient_linearity_over_loss_sum(self):
        # grad(a + b) == grad(a) + grad(b) exactly, by construction of the tape
        rng = np.random.default_rng(9)
        x0 = rng.standard_normal(8)

        def fa(leaf):
            return (leaf * leaf).sum()

        def fb(leaf):
            return (leaf.relu() * 3.0).sum()

        def fsum(leaf):
            return fa(leaf) + fb(leaf)

        ga = check_gradient(fa, x0).analytic
        gb = check_gradient(fb, x0).analytic
        gs = check_gradient(fsum, x0).analytic
        np.testing.assert_allclose(gs, ga + gb, atol=1e-10)


class TestKinkHandling:
    def test_relu_near_zero_triggers_resample(self):
        calls = {"n": 0}

        def sampler(rng):
            calls["n"] += 1
            if calls["n"] < 3:
                return np.array([1e-9])  # sits on the kink
            return np.array([0.5])

        rep = run_case(lambda x: x.relu().sum(), sampler, np.random.default_rng(0))
        assert calls["n"] == 3
        assert rep.max_rel_err < 1e-6

    def test_exhausted_resamples_raise(self):
        with pytest.raises(OracleError):
            run_case(lambda x: x.abs().sum(), lambda rng: np.zeros(2),
                     np.random.default_rng(0), max_resamples=3)


class TestSoftmaxProperties:
    def test_simplex(self):
        s = ad.softmax(DiffValue(np.array([3.0, -1.0, 0.5])))
        assert float(s.value.sum()) == pytest.approx(1.0, abs=1e-12)
        assert (s.value >= 0).all()

    def test_shift_invariance(self):
        v = np.array([0.2, 1.4, -0.7])
        a = ad.softmax(DiffValue(v)).value
        b = ad.softmax(DiffValue(v + 100.0)).value
        np.testing.assert_allclose(a, b, atol=1e-12)
