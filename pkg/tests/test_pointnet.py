import numpy as np
import pytest

from pointfusion import autodiff as ad
from pointfusion import pointnet
from pointfusion.autodiff import Tensor
from pointfusion.errors import EmptyInput

WIDTHS = (8, 8, 16, 32)


def make_params(seed=0, widths=WIDTHS):
    return pointnet.init_params(np.random.default_rng(seed), widths)


class TestInit:
    def test_stn_starts_at_identity(self):
        params = make_params()
        pts = np.random.default_rng(1).normal(size=(12, 3))
        transformed, A = pointnet.stn_forward(Tensor(pts), _tensors(params))
        assert np.allclose(A.values, np.eye(3))
        assert np.allclose(transformed.values, pts)

    def test_trunk_is_affine_only(self):
        # The trunk must carry nothing but weights and biases: no running
        # means, variances, or per-channel scale state.
        kinds = pointnet.layer_inventory(make_params())
        assert kinds == ["bias", "weight"]


def _tensors(params):
    return {k: Tensor(v) for k, v in params.items()}


class TestForward:
    def test_shapes(self):
        params = make_params()
        out = pointnet.pointnet_forward(np.zeros((7, 3)), params, WIDTHS)
        assert out.point_features.shape == (7, WIDTHS[1])
        assert out.global_feature.shape == (1, WIDTHS[3])
        assert out.stn_matrix.shape == (3, 3)

    def test_empty_input_raises(self):
        with pytest.raises(EmptyInput):
            pointnet.pointnet_forward(np.zeros((0, 3)), make_params(), WIDTHS)

    def test_global_feature_permutation_invariant_exactly(self):
        rng = np.random.default_rng(2)
        params = make_params()
        pts = rng.normal(size=(50, 3))
        base = pointnet.pointnet_forward(pts, params, WIDTHS)
        for _ in range(5):
            perm = rng.permutation(50)
            out = pointnet.pointnet_forward(pts[perm], params, WIDTHS)
            assert np.array_equal(out.global_feature.values,
                                  base.global_feature.values)
            # Per-point features track their point through the permutation.
            assert np.array_equal(out.point_features.values,
                                  base.point_features.values[perm])

    def test_single_point(self):
        out = pointnet.pointnet_forward(np.ones((1, 3)), make_params(), WIDTHS)
        assert out.global_feature.shape == (1, WIDTHS[3])

    def test_duplicate_points_do_not_change_global_feature(self):
        params = make_params()
        pts = np.random.default_rng(3).normal(size=(10, 3))
        a = pointnet.pointnet_forward(pts, params, WIDTHS)
        b = pointnet.pointnet_forward(np.vstack([pts, pts[:4]]), params,
                                      WIDTHS)
        assert np.array_equal(a.global_feature.values,
                              b.global_feature.values)


class TestStnLoss:
    def test_zero_for_orthogonal(self):
        theta = 0.7
        R = np.array([[np.cos(theta), -np.sin(theta), 0],
                      [np.sin(theta), np.cos(theta), 0],
                      [0, 0, 1.0]])
        assert pointnet.stn_loss(Tensor(R)).item() < 1e-12

    def test_closed_form_for_scaled_identity(self):
        # A = 2I: ||I - 4I||_F^2 = 9 * 3 = 27.
        assert pointnet.stn_loss(Tensor(2.0 * np.eye(3))).item() == \
            pytest.approx(27.0)

    def test_gradient(self):
        A0 = np.random.default_rng(4).normal(size=(3, 3))
        err = ad.check_gradient(lambda t: pointnet.stn_loss(t), A0)
        assert err < 1e-4


class TestEndToEndGradient:
    def test_loss_through_trunk_matches_finite_differences(self):
        rng = np.random.default_rng(5)
        widths = (4, 4, 6, 8)
        params = pointnet.init_params(rng, widths)
        # Move the STN off its zero initialization so its gradient is live.
        params["pointnet.stn.w3"] = rng.normal(size=(32, 9)) * 0.05
        pts = rng.normal(size=(9, 3))

        def loss_wrt(name):
            def fn(t):
                p = _tensors(params)
                p[name] = t
                out = pointnet.pointnet_forward(pts, p, widths)
                return ad.add(ad.sum_all(out.global_feature),
                              pointnet.stn_loss(out.stn_matrix))
            return fn

        for name in ["pointnet.w1", "pointnet.w4", "pointnet.b2",
                     "pointnet.stn.w1", "pointnet.stn.w3",
                     "pointnet.stn.b3"]:
            err = ad.check_gradient(loss_wrt(name), params[name])
            assert err < 1e-3, f"{name}: rel err {err}"
