import numpy as np
import pytest

from pointfusion import autodiff as ad
from pointfusion.autodiff import Tensor
from pointfusion.errors import ShapeError

RNG = np.random.default_rng(0)


def gradcheck(fn, shape, h=1e-5, tol=1e-4, scale=1.0, offset=0.0, seed=None):
    rng = np.random.default_rng(seed if seed is not None else RNG.integers(2**31))
    x = rng.normal(size=shape) * scale + offset
    err = ad.check_gradient(fn, x, h=h)
    assert err < tol, f"rel err {err}"


class TestPrimitivesForward:
    def test_relu(self):
        out = ad.relu(Tensor([-1.0, 2.0]))
        assert np.array_equal(out.values, [0.0, 2.0])

    def test_relu_grad_mask(self):
        x = Tensor([-1.0, 2.0], requires_grad=True)
        ad.sum_all(ad.relu(x)).backward()
        assert np.array_equal(x.grad, [0.0, 1.0])

    def test_sigmoid_midpoint(self):
        assert ad.sigmoid(Tensor(0.0)).item() == pytest.approx(0.5)

    def test_matmul(self):
        a = np.arange(6.0).reshape(2, 3)
        b = np.arange(12.0).reshape(3, 4)
        assert np.array_equal(ad.matmul(Tensor(a), Tensor(b)).values, a @ b)

    def test_concat(self):
        out = ad.concat([Tensor([[1.0]]), Tensor([[2.0]])], axis=1)
        assert np.array_equal(out.values, [[1.0, 2.0]])

    def test_max_over_axis_permutation_invariant(self):
        x = RNG.normal(size=(20, 8))
        perm = RNG.permutation(20)
        a = ad.max_over_axis(Tensor(x), axis=0).values
        b = ad.max_over_axis(Tensor(x[perm]), axis=0).values
        assert np.array_equal(a, b)

    def test_max_backward_one_hot_first_index_on_ties(self):
        x = Tensor([[1.0, 3.0], [3.0, 2.0], [3.0, 1.0]], requires_grad=True)
        ad.sum_all(ad.max_over_axis(x, axis=0)).backward()
        # Column 0 ties at rows 1 and 2: gradient goes to row 1 only.
        assert np.array_equal(x.grad, [[0, 1], [1, 0], [0, 0]])

    def test_nan_forward_raises(self):
        with pytest.raises(FloatingPointError):
            ad.log(Tensor([-1.0]))


class TestGradientsAgainstFiniteDifferences:
    """Every primitive vs central differences, rel err < 1e-4."""

    def test_add_bias_broadcast(self):
        b = RNG.normal(size=4)
        gradcheck(lambda x: ad.sum_all(ad.mul(ad.add(x, Tensor(b)),
                                              ad.add(x, Tensor(b)))), (3, 4))

    def test_sub(self):
        c = RNG.normal(size=(3, 4))
        gradcheck(lambda x: ad.frobenius_sq(ad.sub(x, Tensor(c))), (3, 4))

    def test_mul(self):
        c = RNG.normal(size=(5,))
        gradcheck(lambda x: ad.sum_all(ad.mul(x, ad.mul(x, Tensor(c)))), (5,))

    def test_matmul_left_and_right(self):
        b = RNG.normal(size=(4, 2))
        gradcheck(lambda x: ad.sum_all(ad.matmul(x, Tensor(b))), (3, 4))
        a = RNG.normal(size=(3, 4))
        gradcheck(lambda x: ad.frobenius_sq(ad.matmul(Tensor(a), x)), (4, 2))

    def test_transpose_reshape(self):
        gradcheck(lambda x: ad.frobenius_sq(
            ad.matmul(ad.transpose(x), x)), (3, 4))
        gradcheck(lambda x: ad.sum_all(ad.reshape(x, (6,))), (2, 3))

    def test_concat(self):
        c = RNG.normal(size=(2, 3))
        gradcheck(lambda x: ad.frobenius_sq(
            ad.concat([x, Tensor(c)], axis=1)), (2, 4))

    def test_slice_cols(self):
        gradcheck(lambda x: ad.frobenius_sq(ad.slice_cols(x, 1, 3)), (4, 5))

    def test_repeat_rows(self):
        gradcheck(lambda x: ad.frobenius_sq(ad.repeat_rows(x, 7)), (1, 5))

    def test_relu(self):
        # Keep inputs away from the kink.
        gradcheck(lambda x: ad.sum_all(ad.relu(x)), (4, 4), offset=0.5)

    def test_sigmoid_log(self):
        gradcheck(lambda x: ad.sum_all(ad.sigmoid(x)), (10,))
        gradcheck(lambda x: ad.sum_all(ad.log(x)), (10,), scale=0.2, offset=2.0)

    def test_reductions(self):
        gradcheck(lambda x: ad.mean(x), (3, 5))
        gradcheck(lambda x: ad.frobenius_sq(ad.sum_over_axis(x, 1)), (3, 5))
        gradcheck(lambda x: ad.sum_all(ad.max_over_axis(x, 0)), (6, 4))

    def test_frobenius_sq(self):
        gradcheck(lambda x: ad.frobenius_sq(x), (3, 3))

    def test_smooth_l1(self):
        t = RNG.normal(size=(4, 6)) * 2
        gradcheck(lambda x: ad.smooth_l1(x, Tensor(t)), (4, 6), scale=2.0)
        gradcheck(lambda x: ad.smooth_l1(x, Tensor(t), reduction="mean"),
                  (4, 6), scale=2.0)

    def test_binary_cross_entropy(self):
        y = (RNG.random(8) > 0.5).astype(float)
        gradcheck(lambda x: ad.binary_cross_entropy(x, Tensor(y)),
                  (8,), scale=0.1, offset=0.5)

    def test_im2col(self):
        gradcheck(lambda x: ad.frobenius_sq(ad.im2col(x, 3, 2)), (7, 7, 2))

    def test_randomized_shapes_including_single_point(self):
        for n in (1, 2, 17):
            b = RNG.normal(size=(3, 8))
            gradcheck(lambda x: ad.sum_all(
                ad.max_over_axis(ad.relu(ad.matmul(x, Tensor(b))), 0)),
                (n, 3), offset=1.0)


class TestSmoothL1ClosedForm:
    def test_zero(self):
        assert ad.smooth_l1(Tensor([1.0]), Tensor([1.0])).item() == 0.0

    def test_quadratic_region(self):
        assert ad.smooth_l1(Tensor([0.5]), Tensor([0.0])).item() == \
            pytest.approx(0.125)

    def test_linear_region(self):
        assert ad.smooth_l1(Tensor([2.0]), Tensor([0.0])).item() == \
            pytest.approx(1.5)


class TestBceClosedForm:
    def test_match_is_near_zero(self):
        out = ad.binary_cross_entropy(Tensor([1.0, 0.0]), Tensor([1.0, 0.0]))
        assert out.item() < 1e-5

    def test_half_is_ln2(self):
        out = ad.binary_cross_entropy(Tensor([0.5]), Tensor([1.0]))
        assert out.item() == pytest.approx(np.log(2.0))


class TestBackwardStructure:
    def test_square_derivative(self):
        x = Tensor([3.0], requires_grad=True)
        ad.sum_all(ad.mul(x, x)).backward()
        assert np.allclose(x.grad, [6.0])

    def test_shared_node_gradient_doubles(self):
        x = Tensor([2.0], requires_grad=True)
        y = ad.mul(x, Tensor([5.0]))
        ad.sum_all(ad.add(y, y)).backward()
        assert np.allclose(x.grad, [10.0])

    def test_construction_order_independence(self):
        def build(order_swap):
            x = Tensor([[1.0, 2.0], [3.0, 4.0]], requires_grad=True)
            a = ad.relu(x)
            b = ad.transpose(x)
            terms = [ad.frobenius_sq(a), ad.frobenius_sq(b)]
            if order_swap:
                terms.reverse()
            ad.add(terms[0], terms[1]).backward()
            return x.grad
        assert np.array_equal(build(False), build(True))

    def test_backward_requires_scalar(self):
        x = Tensor([[1.0, 2.0]], requires_grad=True)
        with pytest.raises(ShapeError):
            ad.relu(x).backward()


class TestAdam:
    def test_zero_gradient_leaves_params(self):
        params = {"w": np.array([1.0, 2.0])}
        state = ad.adam_init(params)
        ad.adam_step(params, {"w": np.zeros(2)}, state)
        assert np.array_equal(params["w"], [1.0, 2.0])
        assert state["step"] == 1

    def test_first_step_magnitude_bounded(self):
        params = {"w": np.array([0.0])}
        state = ad.adam_init(params)
        ad.adam_step(params, {"w": np.array([123.0])}, state, lr=0.01)
        assert abs(params["w"][0]) <= 0.01 * (1 + 1e-6)

    def test_quadratic_convergence(self):
        # Minimize (w - 3)^2 in at most 500 steps.
        params = {"w": np.array([-4.0])}
        state = ad.adam_init(params)
        for _ in range(500):
            ad.adam_step(params, {"w": 2 * (params["w"] - 3.0)}, state,
                         lr=0.05)
        assert abs(params["w"][0] - 3.0) < 1e-2


class TestCheckpointContainer:
    def test_round_trip(self, tmp_path):
        arrays = {"a.w": RNG.normal(size=(3, 4)), "b": np.array(2.5),
                  "z.long.name": RNG.normal(size=7)}
        path = tmp_path / "ckpt.bin"
        ad.save_arrays(path, arrays)
        back = ad.load_arrays(path)
        assert set(back) == set(arrays)
        for k in arrays:
            assert np.array_equal(back[k], np.asarray(arrays[k]))

    def test_byte_identical_rewrite(self, tmp_path):
        arrays = {"w": RNG.normal(size=(5, 5))}
        p1, p2 = tmp_path / "a.bin", tmp_path / "b.bin"
        ad.save_arrays(p1, arrays)
        ad.save_arrays(p2, ad.load_arrays(p1))
        assert p1.read_bytes() == p2.read_bytes()
        assert (tmp_path / "a.bin.json").read_text() == \
            (tmp_path / "b.bin.json").read_text()
