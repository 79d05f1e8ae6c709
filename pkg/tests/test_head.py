import numpy as np
import pytest

from vltrack.autodiff import Tensor
from vltrack.gradcheck import finite_diff_check
from vltrack.head import CornerHead, corner_boxes, soft_argmax


@pytest.fixture
def head():
    h = CornerHead(32, depth=4)
    h.initialize(0)
    return h


class TestCornerHead:
    def test_output_maps_shape_and_normalization(self, head):
        rng = np.random.default_rng(0)
        feat = Tensor(rng.normal(size=(2, 32, 4, 4)))
        tl, br = head(feat)
        assert tl.shape == (2, 4, 4) and br.shape == (2, 4, 4)
        np.testing.assert_allclose(tl.data.sum(axis=(1, 2)), 1.0, atol=1e-7)
        np.testing.assert_allclose(br.data.sum(axis=(1, 2)), 1.0, atol=1e-7)

    def test_full_scale_spatial_size(self):
        head = CornerHead(384, depth=4)
        head.initialize(0)
        head.eval()
        feat = Tensor(np.random.default_rng(1).normal(size=(1, 384, 20, 20)))
        tl, br = head(feat)
        assert tl.shape == (1, 20, 20)

    def test_uniform_logits_give_uniform_maps(self):
        # bypass the conv stacks: softmax of constant logits is uniform
        from vltrack import autodiff as ad
        logits = Tensor(np.zeros((1, 16)))
        prob = ad.softmax(logits, axis=-1).reshape(1, 4, 4)
        np.testing.assert_allclose(prob.data, 1 / 16)


class TestSoftArgmax:
    def test_one_hot_corners(self):
        tl = np.zeros((1, 4, 4))
        tl[0, 0, 0] = 1.0
        br = np.zeros((1, 4, 4))
        br[0, 3, 3] = 1.0
        box = corner_boxes(Tensor(tl), Tensor(br))
        np.testing.assert_allclose(box.data[0], [0.125, 0.125, 0.875, 0.875])

    def test_uniform_maps_center(self):
        prob = Tensor(np.full((1, 5, 5), 1 / 25))
        xy = soft_argmax(prob)
        np.testing.assert_allclose(xy.data[0], [0.5, 0.5], atol=1e-12)

    def test_hand_expectation_2x2(self):
        # p = [[0.5, 0.5], [0, 0]]: E[x] = 0.5*(0.25) + 0.5*(0.75) = 0.5,
        # E[y] = 1.0 * 0.25 = 0.25 under half-pixel cell centers
        prob = Tensor(np.array([[[0.5, 0.5], [0.0, 0.0]]]))
        xy = soft_argmax(prob)
        np.testing.assert_allclose(xy.data[0], [0.5, 0.25], atol=1e-12)

    def test_peak_translation_shifts_by_cell_pitch(self):
        for i in range(3):
            prob = np.zeros((1, 4, 4))
            prob[0, 0, i] = 1.0
            xy = soft_argmax(Tensor(prob))
            assert xy.data[0, 0] == pytest.approx((i + 0.5) / 4, abs=1e-12)

    def test_box_always_in_unit_square(self):
        rng = np.random.default_rng(2)
        for _ in range(50):
            logits = rng.normal(size=(1, 16)) * 5
            from vltrack import autodiff as ad
            prob = ad.softmax(Tensor(logits), axis=-1).reshape(1, 4, 4)
            xy = soft_argmax(prob)
            assert np.all(xy.data >= 0) and np.all(xy.data <= 1)

    def test_gradient_of_box_wrt_logits(self):
        rng = np.random.default_rng(3)
        logits = Tensor(rng.normal(size=(1, 16)), requires_grad=True)
        probe = Tensor(rng.normal(size=(1, 2)))

        def f():
            from vltrack import autodiff as ad
            prob = ad.softmax(logits, axis=-1).reshape(1, 4, 4)
            return (soft_argmax(prob) * probe).sum()

        report = finite_diff_check(f, [("logits", logits)], h=1e-5)
        assert report.max_rel_error < 1e-6


def test_head_gradients_end_to_end(head):
    rng = np.random.default_rng(4)
    feat = Tensor(rng.normal(size=(2, 32, 4, 4)), requires_grad=True)
    probe = Tensor(rng.normal(size=(2, 4)))

    def f():
        tl, br = head(feat)
        return (corner_boxes(tl, br) * probe).sum()

    params = [("feat", feat)] + list(head.named_parameters())
    report = finite_diff_check(f, params, h=1e-5, samples_per_param=4,
                               rng=np.random.default_rng(0))
    assert report.max_rel_error < 1e-6
