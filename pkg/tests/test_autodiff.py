"""Gradient-engine verification.

The analytic constants here were worked out independently of the engine:
d(x*x)/dx = 2x (6 at x=3); for f=x^2, d/dx (df/dx)^2 = 8x (8 at x=1); for
f=sum(x^3), d/dx sum((df/dx)^2) = d/dx sum(9x^4) = 36x^3.  Everything else is
checked against the central finite-difference oracle.
"""

import numpy as np
import pytest

import minergy.autodiff as ad


@pytest.fixture(autouse=True)
def _double_precision():
    ad.set_precision(64)
    yield
    ad.set_precision(64)


def rand(shape, seed=0, lo=-1.0, hi=1.0):
    rng = ad.make_rng(seed)
    return rng.uniform(lo, hi, size=shape)


class TestGradBasics:
    def test_square_at_three(self):
        x = ad.Value(3.0, requires_grad=True)
        (g,) = ad.grad(ad.mul(x, x), [x])
        assert g.item() == pytest.approx(6.0, abs=1e-12)

    def test_second_order_composition(self):
        # f = x^2, g = (df/dx)^2 = 4x^2, dg/dx = 8x -> 8 at x=1
        x = ad.Value(1.0, requires_grad=True)
        (df,) = ad.grad(ad.mul(x, x), [x], create_higher_order_graph=True)
        (dg,) = ad.grad(ad.mul(df, df), [x])
        assert dg.item() == pytest.approx(8.0, abs=1e-12)

    def test_second_order_cubic_36x3(self):
        x = ad.Value(rand((4, 3), seed=11, lo=-2, hi=2), requires_grad=True)
        (df,) = ad.grad(ad.sum_(ad.pow_const(x, 3.0)), [x], create_higher_order_graph=True)
        (d2,) = ad.grad(ad.sum_(ad.square(df)), [x])
        np.testing.assert_allclose(d2.data, 36.0 * x.data ** 3, rtol=0, atol=1e-8)

    def test_linearity(self):
        rng = ad.make_rng(5)
        x = ad.Value(rng.normal(size=(3, 4)), requires_grad=True)
        a, b = rng.normal(), rng.normal()
        f = ad.sum_(ad.exp(x))
        g = ad.sum_(ad.mul(x, x))
        (grad_combined,) = ad.grad(ad.add(ad.mul(f, a), ad.mul(g, b)), [x])
        (gf,) = ad.grad(ad.sum_(ad.exp(x)), [x])
        (gg,) = ad.grad(ad.sum_(ad.mul(x, x)), [x])
        np.testing.assert_allclose(grad_combined.data, a * gf.data + b * gg.data, atol=1e-10)

    def test_unreached_input_gradient_exactly_zero(self):
        x = ad.Value(rand((2, 2)), requires_grad=True)
        y = ad.Value(rand((2, 2), seed=1), requires_grad=True)
        (gy,) = ad.grad(ad.sum_(ad.mul(x, x)), [y])
        assert np.all(gy.data == 0.0)

    def test_fanout_accumulates_by_summation(self):
        # z = x*x + x -> dz/dx = 2x + 1
        x = ad.Value(np.array([[1.5, -0.5]]), requires_grad=True)
        (g,) = ad.grad(ad.sum_(ad.add(ad.mul(x, x), x)), [x])
        np.testing.assert_allclose(g.data, 2 * x.data + 1, atol=1e-14)

    def test_determinism_bit_identical(self):
        def run():
            x = ad.Value(rand((4, 4), seed=9), requires_grad=True)
            w = ad.Value(rand((4, 4), seed=10), requires_grad=True)
            y = ad.sum_(ad.softmax(ad.matmul(x, w), axis=-1) * ad.exp(x))
            gx, gw = ad.grad(y, [x, w])
            return y.data.copy(), gx.data.copy(), gw.data.copy()

        first, second = run(), run()
        for a, b in zip(first, second):
            assert np.array_equal(a, b)

    def test_non_scalar_output_rejected(self):
        x = ad.Value(rand((2, 3)), requires_grad=True)
        with pytest.raises(ad.ContractViolation):
            ad.grad(ad.mul(x, x), [x])

    def test_grad_request_dataclass(self):
        x = ad.Value(2.0, requires_grad=True)
        req = ad.GradRequest(output=ad.mul(x, x), wrt=[x])
        (g,) = req.run()
        assert g.item() == pytest.approx(4.0)

    def test_values_are_immutable(self):
        v = ad.Value(np.zeros((2, 2)))
        with pytest.raises(ValueError):
            v.data[0, 0] = 1.0

    def test_precision_modes(self):
        with ad.precision(32):
            assert ad.Value(1.0).dtype == np.float32
        assert ad.Value(1.0).dtype == np.float64

    def test_detach_severs_history(self):
        x = ad.Value(rand((2, 2)), requires_grad=True)
        y = ad.mul(x, x).detach(requires_grad=True)
        z = ad.sum_(ad.mul(y, y))
        (gx,) = ad.grad(z, [x])
        assert np.all(gx.data == 0.0)


class TestPrimitiveVJPs:
    """Every primitive's VJP against central finite differences.

    Random projections turn each op into a scalar objective, so the check
    exercises the full Jacobian action, not one direction.
    """

    TOL = 1e-4

    def _proj(self, seed, shape):
        return ad.Value(rand(shape, seed=seed + 1000))

    def check(self, f, x_arr, seed=0):
        err = ad.finite_difference_check(f, ad.Value(x_arr))
        assert err < self.TOL, f"fd error {err}"

    @pytest.mark.parametrize("seed", range(3))
    def test_add(self, seed):
        other = ad.Value(rand((3, 4), seed=seed + 50))
        w = self._proj(seed, (3, 4))
        self.check(lambda v: ad.sum_(ad.mul(ad.add(v, other), w)), rand((3, 4), seed=seed))

    @pytest.mark.parametrize("seed", range(3))
    def test_add_broadcast(self, seed):
        other = ad.Value(rand((1, 4), seed=seed + 50))
        w = self._proj(seed, (3, 4))
        self.check(lambda v: ad.sum_(ad.mul(ad.add(v, other), w)), rand((3, 4), seed=seed))
        w2 = self._proj(seed, (3, 4))
        self.check(lambda v: ad.sum_(ad.mul(ad.add(ad.Value(rand((3, 4), seed=seed + 60)), v), w2)),
                   rand((1, 4), seed=seed))

    @pytest.mark.parametrize("seed", range(3))
    def test_mul(self, seed):
        other = ad.Value(rand((3, 4), seed=seed + 51))
        w = self._proj(seed, (3, 4))
        self.check(lambda v: ad.sum_(ad.mul(ad.mul(v, other), w)), rand((3, 4), seed=seed))

    @pytest.mark.parametrize("seed", range(3))
    def test_div(self, seed):
        denom = ad.Value(rand((3, 4), seed=seed + 52, lo=0.5, hi=2.0))
        w = self._proj(seed, (3, 4))
        self.check(lambda v: ad.sum_(ad.mul(ad.div(v, denom), w)), rand((3, 4), seed=seed))
        numer = ad.Value(rand((3, 4), seed=seed + 53))
        self.check(lambda v: ad.sum_(ad.mul(ad.div(numer, v), w)),
                   rand((3, 4), seed=seed, lo=0.5, hi=2.0))

    @pytest.mark.parametrize("seed", range(3))
    def test_matmul_both_sides(self, seed):
        b = ad.Value(rand((4, 3), seed=seed + 54))
        w = self._proj(seed, (3, 3))
        self.check(lambda v: ad.sum_(ad.mul(ad.matmul(v, b), w)), rand((3, 4), seed=seed))
        a = ad.Value(rand((3, 4), seed=seed + 55))
        self.check(lambda v: ad.sum_(ad.mul(ad.matmul(a, v), w)), rand((4, 3), seed=seed))

    @pytest.mark.parametrize("seed", range(3))
    def test_matmul_batched(self, seed):
        b = ad.Value(rand((2, 4, 3), seed=seed + 56))
        w = self._proj(seed, (2, 3, 3))
        self.check(lambda v: ad.sum_(ad.mul(ad.matmul(v, b), w)), rand((2, 3, 4), seed=seed))

    @pytest.mark.parametrize("seed", range(3))
    def test_softmax(self, seed):
        w = self._proj(seed, (3, 4))
        self.check(lambda v: ad.sum_(ad.mul(ad.softmax(v, axis=-1), w)), rand((3, 4), seed=seed))

    @pytest.mark.parametrize("seed", range(3))
    def test_exp_log_sqrt(self, seed):
        w = self._proj(seed, (3, 4))
        self.check(lambda v: ad.sum_(ad.mul(ad.exp(v), w)), rand((3, 4), seed=seed))
        pos = rand((3, 4), seed=seed, lo=0.3, hi=2.0)
        self.check(lambda v: ad.sum_(ad.mul(ad.log(v), w)), pos)
        self.check(lambda v: ad.sum_(ad.mul(ad.sqrt(v), w)), pos)

    @pytest.mark.parametrize("seed", range(3))
    def test_mean_sum(self, seed):
        w = self._proj(seed, (3, 1))
        self.check(lambda v: ad.sum_(ad.mul(ad.mean(v, axis=1, keepdims=True), w)),
                   rand((3, 4), seed=seed))
        self.check(lambda v: ad.mul(ad.sum_(v), 0.7), rand((3, 4), seed=seed))

    @pytest.mark.parametrize("seed", range(3))
    def test_concat_slice(self, seed):
        other = ad.Value(rand((3, 2), seed=seed + 57))
        w = self._proj(seed, (3, 6))
        self.check(lambda v: ad.sum_(ad.mul(ad.concat([v, other], axis=1), w)),
                   rand((3, 4), seed=seed))
        w2 = self._proj(seed, (2, 2))
        self.check(lambda v: ad.sum_(ad.mul(v[0:2, 1:3], w2)), rand((3, 4), seed=seed))

    @pytest.mark.parametrize("seed", range(3))
    def test_strided_slice_and_unslice(self, seed):
        w = self._proj(seed, (3, 2))
        self.check(lambda v: ad.sum_(ad.mul(v[:, 0::2], w)), rand((3, 4), seed=seed))
        key = (slice(None), slice(1, None, 2))
        w3 = self._proj(seed, (3, 4))
        self.check(lambda v: ad.sum_(ad.mul(ad.unslice(v, key, (3, 4)), w3)),
                   rand((3, 2), seed=seed))

    @pytest.mark.parametrize("seed", range(3))
    def test_masked_fill(self, seed):
        rng = ad.make_rng(seed + 70)
        mask = rng.random((3, 4)) < 0.4
        w = self._proj(seed, (3, 4))
        self.check(lambda v: ad.sum_(ad.mul(ad.masked_fill(v, mask, -1e30), ad.mul(w, ad.Value((~mask).astype(float))))),
                   rand((3, 4), seed=seed))

    @pytest.mark.parametrize("seed", range(3))
    def test_gather_scatter(self, seed):
        rng = ad.make_rng(seed + 71)
        ids = rng.integers(0, 3, size=(5,))
        w = self._proj(seed, (5, 4))
        self.check(lambda v: ad.sum_(ad.mul(ad.gather_rows(v, ids), w)), rand((3, 4), seed=seed))
        w2 = self._proj(seed, (3, 4))
        self.check(lambda v: ad.sum_(ad.mul(ad.scatter_rows(v, ids, 3), w2)),
                   rand((5, 4), seed=seed))

    @pytest.mark.parametrize("seed", range(3))
    def test_transpose(self, seed):
        w = self._proj(seed, (4, 3))
        self.check(lambda v: ad.sum_(ad.mul(ad.transpose(v), w)), rand((3, 4), seed=seed))

    @pytest.mark.parametrize("seed", range(3))
    def test_clamp(self, seed):
        w = self._proj(seed, (3, 4))
        # bounds off the sample grid so the kink never sits on a probe point
        self.check(lambda v: ad.sum_(ad.mul(ad.clamp(v, -0.437, 0.517), w)),
                   rand((3, 4), seed=seed))

    @pytest.mark.parametrize("seed", range(3))
    def test_sigmoid_pow_broadcast(self, seed):
        w = self._proj(seed, (3, 4))
        self.check(lambda v: ad.sum_(ad.mul(ad.sigmoid(v), w)), rand((3, 4), seed=seed))
        self.check(lambda v: ad.sum_(ad.mul(ad.pow_const(v, 3.0), w)), rand((3, 4), seed=seed))
        w2 = self._proj(seed, (3, 4))
        self.check(lambda v: ad.sum_(ad.mul(ad.broadcast_to(v, (3, 4)), w2)),
                   rand((1, 4), seed=seed))

    @pytest.mark.parametrize("seed", range(3))
    def test_composites(self, seed):
        w = self._proj(seed, (3, 1))
        self.check(lambda v: ad.sum_(ad.mul(ad.logsumexp(v, axis=-1, keepdims=True), w)),
                   rand((3, 4), seed=seed))
        w2 = self._proj(seed, (3, 4))
        self.check(lambda v: ad.sum_(ad.mul(ad.smooth_l1(v, beta=0.731), w2)),
                   rand((3, 4), seed=seed, lo=-2, hi=2))
        self.check(lambda v: ad.sum_(ad.mul(ad.silu(v), w2)), rand((3, 4), seed=seed))


class TestSecondOrderThroughPrimitives:
    """phi(x) = sum(grad(f)(x)^2) is an ordinary scalar function; checking it
    against finite differences validates the backward-of-backward rules."""

    TOL = 1e-4

    def _phi(self, f):
        def phi(v):
            if not v.requires_grad:  # numeric probes arrive as constants
                v = v.detach(requires_grad=True)
            (g,) = ad.grad(f(v), [v], create_higher_order_graph=True)
            return ad.sum_(ad.square(g))
        return phi

    @pytest.mark.parametrize("seed", range(3))
    def test_softmax_second_order(self, seed):
        w = ad.Value(rand((2, 3), seed=seed + 80))
        f = lambda v: ad.sum_(ad.mul(ad.softmax(v, axis=-1), w))
        err = ad.finite_difference_check(self._phi(f), ad.Value(rand((2, 3), seed=seed)))
        assert err < self.TOL

    @pytest.mark.parametrize("seed", range(3))
    def test_matmul_exp_second_order(self, seed):
        w = ad.Value(rand((3, 3), seed=seed + 81))
        f = lambda v: ad.sum_(ad.exp(ad.mul(ad.matmul(v, w), 0.5)))
        err = ad.finite_difference_check(self._phi(f), ad.Value(rand((2, 3), seed=seed)))
        assert err < self.TOL

    @pytest.mark.parametrize("seed", range(3))
    def test_gather_second_order(self, seed):
        ids = ad.make_rng(seed + 82).integers(0, 4, size=(6,))
        f = lambda v: ad.sum_(ad.square(ad.gather_rows(v, ids)))
        err = ad.finite_difference_check(self._phi(f), ad.Value(rand((4, 2), seed=seed)))
        assert err < self.TOL


class TestTrivialIdentities:
    def test_softmax_symmetry(self):
        out = ad.softmax(ad.Value(np.zeros(3)), axis=-1)
        assert np.all(out.data == out.data[0])
        assert out.data[0] == np.float64(1.0) / np.float64(3.0)

    def test_matmul_identity(self):
        a = rand((4, 4), seed=3)
        out = ad.matmul(ad.Value(np.eye(4)), ad.Value(a))
        assert np.array_equal(out.data, a)

    def test_shape_mismatch_reports_both_shapes(self):
        with pytest.raises(ad.ContractViolation) as exc:
            ad.matmul(ad.Value(np.zeros((2, 3))), ad.Value(np.zeros((2, 3))))
        assert "(2, 3)" in str(exc.value)


class TestFiniteDifferenceOracle:
    def test_sum_of_x(self):
        err = ad.finite_difference_check(ad.sum_, ad.Value(rand((3, 4), seed=2)))
        assert err < 1e-10

    def test_cubic_against_analytic(self):
        x = ad.Value(np.array([1.0, 2.0]), requires_grad=True)
        (g,) = ad.grad(ad.sum_(ad.pow_const(x, 3.0)), [x])
        np.testing.assert_allclose(g.data, [3.0, 12.0], atol=1e-12)
        err = ad.finite_difference_check(lambda v: ad.sum_(ad.pow_const(v, 3.0)),
                                         ad.Value(np.array([1.0, 2.0])))
        assert err < 1e-6

    def test_nonfinite_reported_with_element(self):
        bad = np.array([1.0, np.inf])
        with pytest.raises(ad.NonFiniteValue) as exc:
            ad.finite_difference_check(ad.sum_, ad.Value(bad))
        assert "(1,)" in str(exc.value)

    def test_eps_must_be_positive(self):
        with pytest.raises(ad.ContractViolation):
            ad.finite_difference_check(ad.sum_, ad.Value(np.ones(2)), eps=0.0)
