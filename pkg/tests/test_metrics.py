import math

import numpy as np
import pytest

from msbdn.metrics import NumericError, grad_check, psnr, quantize, ssim
from msbdn.tensor import Tensor, conv2d, mse_loss


def psnr_loop(a, b):
    total = 0.0
    for x, y in zip(a.ravel().tolist(), b.ravel().tolist()):
        total += (x - y) ** 2
    return 10 * math.log10(1.0 / (total / a.size))


def ssim_loop(x, y):
    """Direct double loop over 11x11 Gaussian windows of one 2-D channel."""
    g1 = [math.exp(-((i - 5) ** 2) / (2 * 1.5**2)) for i in range(11)]
    s = sum(g1)
    g = [[a * b / (s * s) for b in g1] for a in g1]
    c1, c2 = 0.01**2, 0.03**2
    h, w = x.shape
    vals = []
    for r in range(h - 10):
        for c in range(w - 10):
            mx = my = sxx = syy = sxy = 0.0
            for i in range(11):
                for j in range(11):
                    wgt = g[i][j]
                    a, b = x[r + i, c + j], y[r + i, c + j]
                    mx += wgt * a
                    my += wgt * b
                    sxx += wgt * a * a
                    syy += wgt * b * b
                    sxy += wgt * a * b
            sxx -= mx * mx
            syy -= my * my
            sxy -= mx * my
            vals.append(((2 * mx * my + c1) * (2 * sxy + c2)) / ((mx * mx + my * my + c1) * (sxx + syy + c2)))
    return sum(vals) / len(vals)


def test_psnr_identity_and_extremes():
    a = np.full((3, 8, 8), 0.3)
    assert psnr(a, a) == 99.0
    assert psnr(np.zeros((3, 4, 4)), np.ones((3, 4, 4))) == 0.0


def test_psnr_matches_loop(rng):
    a, b = rng.uniform(size=(2, 3, 9, 9))
    assert abs(psnr(a, b) - psnr_loop(a, b)) < 1e-6


def test_psnr_symmetric_and_monotone(rng):
    a = rng.uniform(size=(3, 16, 16))
    n = rng.normal(size=a.shape)
    values = [psnr(a, a + amp * n) for amp in (0.01, 0.05, 0.2)]
    assert values[0] > values[1] > values[2]
    b = a + 0.1 * n
    assert psnr(a, b) == psnr(b, a)


def test_psnr_quantized_mode(rng):
    a = rng.uniform(-0.2, 1.2, size=(3, 8, 8))
    assert psnr(a, quantize(a), quantized=True) == 99.0


def test_psnr_shape_mismatch():
    with pytest.raises(ValueError):
        psnr(np.zeros((2, 2)), np.zeros((2, 3)))


def test_ssim_identity(rng):
    a = rng.uniform(size=(3, 16, 16))
    assert ssim(a, a) == pytest.approx(1.0, abs=1e-12)


def test_ssim_negative_image_low():
    yy, xx = np.mgrid[0:24, 0:24]
    pattern = np.where((yy // 4 + xx // 4) % 2 == 0, 0.1, 0.9)[None]
    assert ssim(pattern, 1 - pattern) < 0.5


def test_ssim_matches_window_loop(rng):
    a, b = rng.uniform(size=(2, 14, 15))
    assert abs(ssim(a, b) - ssim_loop(a, b)) < 1e-5


def test_ssim_rgb_is_channel_mean(rng):
    a, b = rng.uniform(size=(2, 3, 12, 12))
    per = [ssim_loop(a[c], b[c]) for c in range(3)]
    assert abs(ssim(a, b) - sum(per) / 3) < 1e-5


def test_ssim_symmetric_and_bounded(rng):
    a, b = rng.uniform(size=(2, 3, 16, 16))
    assert ssim(a, b) == pytest.approx(ssim(b, a), abs=1e-12)
    assert -1 <= ssim(a, b) <= 1


def test_ssim_too_small():
    with pytest.raises(ValueError):
        ssim(np.zeros((3, 10, 10)), np.zeros((3, 10, 10)))


def test_grad_check_square():
    w = Tensor(np.array([3.0]), requires_grad=True)
    sq = lambda: Tensor(w.data[0] * w.data[0])  # value only; analytic gradient supplied
    r = grad_check(sq, {"w": w}, eps=1e-3, analytic={"w": np.array([6.0])})
    assert r.max_rel_err < 1e-7


def test_grad_check_conv_layer(rng):
    p = {"w": Tensor(rng.normal(size=(2, 3, 3, 3)), requires_grad=True), "b": Tensor(rng.normal(size=2), requires_grad=True)}
    x = Tensor(rng.normal(size=(1, 3, 6, 6)))
    y = Tensor(rng.normal(size=(1, 2, 6, 6)))
    r = grad_check(lambda: mse_loss(conv2d(x, p["w"], p["b"], 1, 1), y), p)
    assert r.max_rel_err < 1e-3


def test_grad_check_detects_planted_fault(rng):
    p = {"w": Tensor(rng.normal(size=(2, 3, 3, 3)), requires_grad=True)}
    x = Tensor(rng.normal(size=(1, 3, 6, 6)))
    y = Tensor(rng.normal(size=(1, 2, 6, 6)))
    f = lambda: mse_loss(conv2d(x, p["w"], None, 1, 1), y)
    f().backward()
    doubled = {"w": 2 * p["w"].grad}
    r = grad_check(f, p, analytic=doubled)
    assert r.max_rel_err == pytest.approx(0.5, abs=1e-3)
    assert r.name == "w"


def test_grad_check_non_finite():
    w = Tensor(np.array([0.0]), requires_grad=True)
    with pytest.raises(NumericError), np.errstate(divide="ignore"):
        grad_check(lambda: Tensor(np.log(w.data[0])), {"w": w})
