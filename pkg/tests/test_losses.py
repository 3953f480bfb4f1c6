import numpy as np
import pytest
from skimage.metrics import structural_similarity

from dgnet import tensor as T
from dgnet.clahe import ClaheConfig, clahe
from dgnet.errors import ConfigurationError, DimensionError
from dgnet.gradcheck import check_gradients
from dgnet.losses import (LossWeights, dynamic_tuning_loss, gaussian_window, l1_loss, ssim_loss, ssim_map,
                          total_loss)
from dgnet.tensor import Tensor


def skimage_ssim(x, y):
    """Mean SSIM over the valid region, per channel, averaged."""
    vals = []
    for c in range(x.shape[0]):
        _, full = structural_similarity(x[c], y[c], gaussian_weights=True, sigma=1.5, use_sample_covariance=False,
                                        data_range=1.0, full=True)
        vals.append(full[5:-5, 5:-5])
    return float(np.mean(vals))


@pytest.fixture
def pair(rng):
    x = rng.random((1, 3, 24, 20))
    y = np.clip(x + rng.normal(0, 0.1, x.shape), 0, 1)
    return x, y


def test_gaussian_window():
    win = gaussian_window()
    assert win.shape == (11, 11)
    assert win.sum() == pytest.approx(1.0)
    assert np.array_equal(win, win.T) and win[5, 5] == win.max()


def test_ssim_matches_skimage(pair, f64):
    x, y = pair
    got = T.mean(ssim_map(Tensor(x), Tensor(y))).item()
    assert got == pytest.approx(skimage_ssim(x[0], y[0]), abs=1e-6)


def test_ssim_self_is_one(pair, f64):
    x, _ = pair
    assert ssim_loss(Tensor(x), Tensor(x)).item() == pytest.approx(0.0, abs=1e-12)


def test_ssim_rejects_small_images():
    with pytest.raises(ConfigurationError):
        ssim_map(Tensor(np.zeros((1, 3, 8, 8))), Tensor(np.zeros((1, 3, 8, 8))))


def test_l1_value_and_errors(f64):
    a = Tensor(np.array([[[[0.0, 1.0]]]]))
    b = Tensor(np.array([[[[0.5, 0.0]]]]))
    assert l1_loss(a, b).item() == 0.75
    with pytest.raises(DimensionError):
        l1_loss(a, Tensor(np.zeros((1, 1, 2, 1))))


def test_ssim_loss_gradient(pair, f64):
    x, y = pair
    xt = Tensor(x, requires_grad=True)
    assert check_gradients(lambda: ssim_loss(xt, Tensor(y)), [xt], samples=40).ok()


def test_dynamic_loss_gradient_with_fixed_label(pair, f64):
    x, _ = pair
    xt = Tensor(x, requires_grad=True)
    label = clahe(T.detach(xt))
    assert check_gradients(lambda: dynamic_tuning_loss(xt, pseudo_label=label), [xt], samples=40).ok()


def test_dynamic_loss_gradient_is_plain_l1(pair, f64):
    """The pseudo-label contributes no gradient: d L_d / d pred = sign(pred - label) / N."""
    x, _ = pair
    xt = Tensor(x, requires_grad=True)
    T.backward(dynamic_tuning_loss(xt))
    label = clahe(Tensor(x)).data
    np.testing.assert_array_equal(xt.grad, np.sign(x - label) / x.size)


def test_total_loss_bookkeeping(pair, f64):
    x, y = pair
    w = LossWeights(0.7, 1.3, 0.35)
    loss, parts = total_loss(Tensor(x), Tensor(y), w)
    want = w.alpha * parts["l1"] + w.beta * parts["ssim"] + w.gamma * parts["dynamic"]
    assert loss.item() == pytest.approx(want, abs=1e-12)
    assert parts["l1"] == pytest.approx(np.mean(np.abs(x - y)))


def test_zero_gamma_skips_dynamic_term_bitwise(pair):
    x, y = pair
    grads = []
    for gamma in (None, 0.0):
        xt = Tensor(x, requires_grad=True)
        if gamma is None:
            loss, parts = total_loss(xt, Tensor(y), LossWeights(1, 1, 0))
        else:
            loss, parts = total_loss(xt, Tensor(y), LossWeights(1, 1, 0.35), gamma=gamma)
        assert parts["dynamic"] == 0.0
        T.backward(loss)
        grads.append(xt.grad)
    np.testing.assert_array_equal(grads[0], grads[1])


def test_all_zero_weights_give_zero_gradient(pair):
    x, y = pair
    xt = Tensor(x, requires_grad=True)
    loss, _ = total_loss(xt, Tensor(y), LossWeights(0, 0, 0))
    T.backward(loss)
    assert loss.item() == 0.0 and not np.any(xt.grad)


def test_negative_weights_rejected():
    with pytest.raises(ConfigurationError):
        LossWeights(gamma=-0.1)
    with pytest.raises(ConfigurationError):
        total_loss(Tensor(np.zeros((1, 3, 16, 16))), Tensor(np.zeros((1, 3, 16, 16))), gamma=-1.0)


def test_custom_clahe_config_used(pair, f64):
    x, _ = pair
    cfg = ClaheConfig(tiles=2, clip_limit=4.0)
    got = dynamic_tuning_loss(Tensor(x), cfg).item()
    assert got == pytest.approx(np.mean(np.abs(x - clahe(Tensor(x), cfg).data)))
