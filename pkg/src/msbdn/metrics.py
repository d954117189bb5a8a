"""PSNR / SSIM image metrics and a central-difference gradient checker."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from msbdn.tensor import Tensor

PSNR_CAP = 99.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


class NumericError(ArithmeticError):
    """A non-finite value turned up where a finite one was required."""


def _array(x):
    return np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)


def quantize(x):
    """Clamp to [0, 1] and round to the 8-bit grid, as saved images would be."""
    return np.floor(np.clip(_array(x), 0.0, 1.0) * 255.0 + 0.5) / 255.0


def psnr(a, b, peak=1.0, quantized=False):
    """Peak signal-to-noise ratio in dB; identical inputs return ``PSNR_CAP``."""
    a, b = _array(a), _array(b)
    if a.shape != b.shape:
        raise ValueError(f"psnr: shape mismatch {a.shape} vs {b.shape}")
    if quantized:
        a, b = quantize(a), quantize(b)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * np.log10(peak * peak / mse))


def gaussian_window(size=SSIM_WINDOW, sigma=SSIM_SIGMA):
    x = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(x * x) / (2.0 * sigma * sigma))
    return g / g.sum()


def _filter_valid(img, g):
    # separable 'valid' filtering over the last two axes
    k = g.size
    cols = np.tensordot(sliding_window_view(img, k, axis=-2), g, axes=([-1], [0]))
    return np.tensordot(sliding_window_view(cols, k, axis=-1), g, axes=([-1], [0]))


def ssim_map(x, y, data_range=1.0):
    """Local SSIM over 2-D arrays (or stacks thereof), 'valid' region only."""
    g = gaussian_window()
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    mu_x = _filter_valid(x, g)
    mu_y = _filter_valid(y, g)
    sxx = _filter_valid(x * x, g) - mu_x * mu_x
    syy = _filter_valid(y * y, g) - mu_y * mu_y
    sxy = _filter_valid(x * y, g) - mu_x * mu_y
    num = (2 * mu_x * mu_y + c1) * (2 * sxy + c2)
    den = (mu_x * mu_x + mu_y * mu_y + c1) * (sxx + syy + c2)
    return num / den


def ssim(a, b, data_range=1.0, quantized=False):
    """Mean SSIM; for NCHW input, the mean over images of the channel-mean SSIM."""
    a, b = _array(a), _array(b)
    if a.shape != b.shape:
        raise ValueError(f"ssim: shape mismatch {a.shape} vs {b.shape}")
    if a.ndim < 2 or a.shape[-1] < SSIM_WINDOW or a.shape[-2] < SSIM_WINDOW:
        raise ValueError(f"ssim: images must be at least {SSIM_WINDOW}x{SSIM_WINDOW}, got shape {a.shape}")
    if quantized:
        a, b = quantize(a), quantize(b)
    m = ssim_map(a, b, data_range)
    return float(m.mean(axis=(-2, -1)).mean())


@dataclass
class MetricReport:
    psnr_db: float
    ssim: float
    per_image: list = field(default_factory=list)  # (name, psnr, ssim)

    @classmethod
    def from_rows(cls, rows):
        if not rows:
            return cls(float("nan"), float("nan"), [])
        return cls(float(np.mean([r[1] for r in rows])), float(np.mean([r[2] for r in rows])), list(rows))


# ---------------------------------------------------------------------------
# gradient check
# ---------------------------------------------------------------------------

@dataclass
class GradCheckResult:
    max_rel_err: float
    name: str
    index: tuple
    analytic: float
    numeric: float
    checked: int

    def __str__(self):
        return (
            f"max rel-err {self.max_rel_err:.3e} at {self.name}{list(self.index)} "
            f"(analytic {self.analytic:.6e}, numeric {self.numeric:.6e}; {self.checked} scalars)"
        )


def _named_tensors(params):
    if isinstance(params, dict):
        return list(params.items())
    return [(p.name, p.value) for p in params]


def rel_err(analytic, numeric):
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-8)


def grad_check(f, params, eps=1e-3, analytic=None):
    """Compare backprop gradients of scalar ``f()`` with central differences.

    ``params`` is a ParameterStore or a ``{name: Tensor}`` dict; every scalar of
    every tensor is perturbed.  ``analytic`` optionally overrides the backprop
    gradients (``{name: array}``), which is how a planted fault is tested.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    named = _named_tensors(params)
    for _, t in named:
        t.grad = None
    loss = f()
    if not np.isfinite(loss.data).all():
        raise NumericError("non-finite loss at the unperturbed point")
    loss.backward()
    grads = {}
    for name, t in named:
        grads[name] = np.zeros_like(t.data, dtype=np.float64) if t.grad is None else t.grad.astype(np.float64)
    if analytic is not None:
        grads.update({k: np.asarray(v, dtype=np.float64) for k, v in analytic.items()})
    worst = GradCheckResult(0.0, "", (), 0.0, 0.0, 0)
    checked = 0
    for name, t in named:
        data = t.data
        for idx in np.ndindex(data.shape):
            orig = data[idx]
            data[idx] = orig + eps
            up = float(f().data)
            data[idx] = orig - eps
            down = float(f().data)
            data[idx] = orig
            if not (np.isfinite(up) and np.isfinite(down)):
                raise NumericError(f"non-finite loss when perturbing {name}{list(idx)}")
            # divide by the step actually taken in the storage dtype
            step = float(data.dtype.type(orig + eps)) - float(data.dtype.type(orig - eps))
            numeric = (up - down) / step
            a = float(grads[name][idx])
            err = rel_err(a, numeric)
            checked += 1
            if err > worst.max_rel_err or not worst.name:
                worst = GradCheckResult(err, name, idx, a, numeric, 0)
    worst.checked = checked
    for _, t in named:
        t.grad = None
    return worst


def primitive_grad_checks(seed=0, eps=1e-3):
    """Gradient checks of every engine primitive on small float64 tensors.

    Inputs to LReLU are kept away from the kink so central differences are
    valid.  Returns ``{op_name: GradCheckResult}``.
    """
    from msbdn.tensor import add, concat, conv2d, deconv2d, lrelu, mse_loss, residual_block, sub

    rng = np.random.default_rng(seed)

    def t(shape, scale=1.0):
        return Tensor(rng.normal(size=shape) * scale, requires_grad=True)

    def target(shape):
        return Tensor(rng.normal(size=shape))

    out = {}
    p = {"x": t((2, 4, 6, 6)), "w": t((3, 4, 3, 3)), "b": t((3,))}
    for stride in (1, 2):
        y = target(conv2d(p["x"], p["w"], p["b"], stride, 1).shape)
        out[f"conv2d_s{stride}"] = grad_check(lambda: mse_loss(conv2d(p["x"], p["w"], p["b"], stride, 1), y), p, eps)
    q = {"x": t((2, 4, 3, 3)), "w": t((4, 2, 3, 3)), "b": t((2,))}
    yq = target((2, 2, 6, 6))
    out["deconv2d_s2"] = grad_check(lambda: mse_loss(deconv2d(q["x"], q["w"], q["b"], 2, 1, 1), yq), q, eps)
    xr = rng.normal(size=(2, 4, 6, 6))
    xr = np.where(np.abs(xr) < 0.05, 0.05 * np.sign(xr + 1e-12) + xr, xr)
    r = {"x": Tensor(xr, requires_grad=True)}
    yr = target((2, 4, 6, 6))
    out["lrelu"] = grad_check(lambda: mse_loss(lrelu(r["x"]), yr), r, eps)
    s = {"a": t((2, 2, 4, 4)), "b": t((2, 2, 4, 4))}
    ys = target((2, 4, 4, 4))
    out["add_sub_concat"] = grad_check(lambda: mse_loss(concat([add(s["a"], s["b"]), sub(s["a"], s["b"])]), ys), s, eps)
    rb = {"x": t((2, 4, 6, 6)), "w1": t((4, 4, 3, 3), 0.3), "b1": t((4,)), "w2": t((4, 4, 3, 3), 0.3), "b2": t((4,))}
    yb = target((2, 4, 6, 6))
    out["residual_block"] = grad_check(
        lambda: mse_loss(residual_block(rb["x"], rb["w1"], rb["b1"], rb["w2"], rb["b2"]), yb), rb, eps
    )
    m = {"a": t((2, 3, 4, 4)), "b": t((2, 3, 4, 4))}
    out["mse_loss"] = grad_check(lambda: mse_loss(m["a"], m["b"]), m, eps)
    return out
