"""Atmospheric scattering model, portion-of-haze, and image-space boosting.

Images here are plain float arrays in [0, 1]; a transmission map broadcasts
against the image (e.g. ``(1, H, W)`` against ``(3, H, W)``).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from msbdn.tensor import Tensor

J_FLOOR = 1e-3


def _arr(x):
    return np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)


@dataclass
class SceneParams:
    """Airlight plus either a scattering coefficient or an explicit transmission map."""

    atmospheric_light: float
    beta: float | None = None
    transmission: np.ndarray | None = None

    def __post_init__(self):
        if not 0.0 < self.atmospheric_light <= 1.0:
            raise ValueError(f"atmospheric light must lie in (0, 1], got {self.atmospheric_light}")
        if self.beta is None and self.transmission is None:
            raise ValueError("SceneParams needs beta or a transmission map")
        if self.beta is not None and self.beta < 0:
            raise ValueError(f"beta must be >= 0, got {self.beta}")


@dataclass
class ImagePair:
    hazy: np.ndarray
    clean: np.ndarray
    depth: np.ndarray | None = None
    transmission: np.ndarray | None = None


def transmission_from_depth(depth, beta):
    return np.exp(-beta * _arr(depth))


def scatter(clean, transmission, airlight):
    """I = T J + (1 - T) A, unclamped."""
    t = _arr(transmission)
    return t * _arr(clean) + (1.0 - t) * airlight


def synthesize_hazy(clean, params, depth=None):
    clean = _arr(clean)
    if params.transmission is not None:
        t = _arr(params.transmission)
    else:
        if depth is None:
            raise ValueError("synthesize_hazy: a depth map is required when the scene is given by beta")
        t = transmission_from_depth(depth, params.beta)
    if np.any(t <= 0):
        raise ValueError("synthesize_hazy: transmission must be strictly positive")
    if np.any(t > 1):
        raise ValueError("synthesize_hazy: transmission must not exceed 1")
    hazy = np.clip(scatter(clean, t, params.atmospheric_light), 0.0, 1.0)
    return ImagePair(hazy=hazy, clean=clean, depth=None if depth is None else _arr(depth), transmission=t)


def recover_clean(hazy, transmission, airlight):
    """Invert the scattering model: J = (I - (1 - T) A) / T."""
    t = _arr(transmission)
    return (_arr(hazy) - (1.0 - t) * airlight) / t


def poh(J, T, A):
    """Spatial mean of the portion of haze (1 - T) A / J, with J floored at 1e-3."""
    j = np.maximum(_arr(J), J_FLOOR)
    return float(np.mean((1.0 - _arr(T)) * A / j))


@dataclass
class BoostState:
    iterate: np.ndarray
    n: int


def sos_boost_images(I, g, iterations):
    """Strengthen-operate-subtract: J^0 = g(I), J^{n+1} = g(I + J^n) - J^n.

    The strengthened input is passed to ``g`` unclamped.  Returns the
    ``iterations + 1`` states J^0 .. J^iterations.
    """
    if iterations < 1:
        raise ValueError(f"iterations must be >= 1, got {iterations}")
    I = _arr(I)
    j = np.asarray(g(I), dtype=np.float64)
    states = [BoostState(j, 0)]
    for n in range(iterations):
        j = np.asarray(g(I + j), dtype=np.float64) - j
        states.append(BoostState(j, n + 1))
    return states


@dataclass
class IdealDehazer:
    """Dehazer given the true scene T and A that removes a fraction ``gamma`` of optical depth.

    ``g(X) = (X - (1 - T^gamma) A) / T^gamma``; applied to a hazy image with
    transmission T it returns the same scene with transmission ``T^(1-gamma)``.
    ``gamma = 0`` is the identity, ``gamma = 1`` recovers J exactly.
    """

    transmission: np.ndarray
    airlight: float
    gamma: float

    @property
    def applied_transmission(self):
        return _arr(self.transmission) ** self.gamma

    @property
    def residual_transmission(self):
        """Transmission left in the output (it is scale-invariant under boosting)."""
        return _arr(self.transmission) ** (1.0 - self.gamma)

    def __call__(self, x):
        tg = self.applied_transmission
        return (_arr(x) - (1.0 - tg) * self.airlight) / tg


def identity_dehazer(x):
    return _arr(x)


def poh_sequence(states, residual_transmission, airlight):
    return [poh(s.iterate, residual_transmission, airlight) for s in states]


def strictly_decreasing(values):
    return all(b < a for a, b in zip(values, values[1:]))


def _smooth_field(rng, shape, cells=4):
    # bilinear-upsampled coarse noise: smooth, deterministic, in [0, 1]
    h, w = shape
    coarse = rng.uniform(0.0, 1.0, size=(cells + 1, cells + 1))
    ys = np.linspace(0, cells, h)
    xs = np.linspace(0, cells, w)
    y0 = np.minimum(ys.astype(int), cells - 1)
    x0 = np.minimum(xs.astype(int), cells - 1)
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]
    c = coarse
    return (
        c[y0][:, x0] * (1 - fy) * (1 - fx)
        + c[y0 + 1][:, x0] * fy * (1 - fx)
        + c[y0][:, x0 + 1] * (1 - fy) * fx
        + c[y0 + 1][:, x0 + 1] * fy * fx
    )


@dataclass
class SyntheticScene:
    clean: np.ndarray  # (3, H, W)
    depth: np.ndarray  # (1, H, W)
    airlight: float
    beta: float

    @property
    def transmission(self):
        return transmission_from_depth(self.depth, self.beta)

    def hazy(self):
        return synthesize_hazy(self.clean, SceneParams(self.airlight, beta=self.beta), self.depth).hazy


def random_scene(
    rng,
    size=(32, 32),
    beta_range=(0.4, 1.6),
    airlight_range=(0.7, 1.0),
    depth_range=(0.5, 2.0),
):
    """Smooth random radiance, depth, airlight and beta."""
    h, w = size
    clean = np.stack([_smooth_field(rng, size) for _ in range(3)])
    clean = 0.05 + 0.9 * clean
    # a few hard-edged rectangles so the scene is not purely low-frequency
    for _ in range(3):
        y, x = rng.integers(0, h - 4), rng.integers(0, w - 4)
        dy, dx = rng.integers(2, max(3, h // 3)), rng.integers(2, max(3, w // 3))
        clean[:, y : y + dy, x : x + dx] = rng.uniform(0.05, 0.95, size=(3, 1, 1))
    d0, d1 = depth_range
    depth = (d0 + (d1 - d0) * _smooth_field(rng, size))[None]
    airlight = float(rng.uniform(*airlight_range))
    beta = float(rng.uniform(*beta_range))
    return SyntheticScene(clean, depth, airlight, beta)


# ---------------------------------------------------------------------------
# classical iterative back-projection (reference, not learned)
# ---------------------------------------------------------------------------

def avg_pool2(x):
    x = _arr(x)
    h, w = x.shape[-2:]
    return x.reshape(*x.shape[:-2], h // 2, 2, w // 2, 2).mean(axis=(-3, -1))


def nearest_up2(x):
    return np.repeat(np.repeat(_arr(x), 2, axis=-2), 2, axis=-1)


def _ibp_iterates(l_ob, iterations, f, h):
    l_ob = _arr(l_ob)
    est = h(l_ob)
    yield est
    for _ in range(iterations):
        # correction applied as h(L - f(H)) so the residual does not grow
        est = est + h(l_ob - f(est))
        yield est


def iterative_back_projection(l_ob, iterations, f=avg_pool2, h=nearest_up2):
    """Refine a high-resolution estimate so that ``f(H)`` matches ``l_ob``."""
    est = None
    for est in _ibp_iterates(l_ob, iterations, f, h):
        pass
    return est


def back_projection_residuals(l_ob, iterations, f=avg_pool2, h=nearest_up2):
    """``||f(H_t) - l_ob||_2`` for t = 0 .. iterations."""
    l_ob = _arr(l_ob)
    return [float(np.linalg.norm(f(est) - l_ob)) for est in _ibp_iterates(l_ob, iterations, f, h)]
