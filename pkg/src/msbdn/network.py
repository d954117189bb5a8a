"""Multi-scale boosted encoder/decoder with dense feature fusion.

Parameter names are flat dotted paths, e.g. ``enc2.down.weight``,
``dec1.group.0.conv1.weight``, ``dec1.dff.t0.p.1.weight``.  The layout is
fully determined by :class:`NetworkConfig`, so a store can be rebuilt from a
checkpoint header alone.
"""
from __future__ import annotations

import re
from dataclasses import dataclass

import numpy as np

from msbdn.params import ParameterStore, init_weights, make_rng
from msbdn.tensor import Tensor, add, as_tensor, concat, conv2d, deconv2d, lrelu, residual_block, sub

VARIANTS = ("sos", "diffusion", "twicing", "pyramid", "unet_concat")
IMAGE_CHANNELS = 3
FIRST_KERNEL = 11
KERNEL = 3


@dataclass
class NetworkConfig:
    levels: int = 3
    resblocks_B: int = 2
    base_channels: int = 8
    max_channels: int = 256
    decoder_variant: str = "sos"
    dff_enabled: bool = True
    refinement_blocks: int = 3

    def __post_init__(self):
        if self.levels < 2:
            raise ValueError(f"levels must be >= 2, got {self.levels}")
        if self.resblocks_B < 0:
            raise ValueError(f"resblocks_B must be >= 0, got {self.resblocks_B}")
        if self.base_channels < 1 or self.max_channels < self.base_channels:
            raise ValueError("need 1 <= base_channels <= max_channels")
        if self.refinement_blocks < 0:
            raise ValueError(f"refinement_blocks must be >= 0, got {self.refinement_blocks}")
        if self.decoder_variant not in VARIANTS:
            raise ValueError(f"decoder_variant must be one of {VARIANTS}, got {self.decoder_variant!r}")

    def channels(self, level):
        return min(self.base_channels * 2 ** (level - 1), self.max_channels)

    @property
    def size_multiple(self):
        return 2 ** (self.levels - 1)


@dataclass
class FeatureMap:
    level: int
    value: Tensor


# ---------------------------------------------------------------------------
# parameter layout
# ---------------------------------------------------------------------------

def _conv_params(store, name, c_out, c_in, k):
    store.add(f"{name}.weight", (c_out, c_in, k, k))
    store.add(f"{name}.bias", (c_out,))


def _deconv_params(store, name, c_in, c_out, k):
    store.add(f"{name}.weight", (c_in, c_out, k, k))
    store.add(f"{name}.bias", (c_out,))


def _group_params(store, name, channels, count):
    for b in range(count):
        _conv_params(store, f"{name}.{b}.conv1", channels, channels, KERNEL)
        _conv_params(store, f"{name}.{b}.conv2", channels, channels, KERNEL)


def _sampler_params(store, name, cfg, start, direction, gap):
    level = start
    for i in range(gap):
        if direction == "down":
            _conv_params(store, f"{name}.{i}", cfg.channels(level + 1), cfg.channels(level), KERNEL)
            level += 1
        else:
            _deconv_params(store, f"{name}.{i}", cfg.channels(level), cfg.channels(level - 1), KERNEL)
            level -= 1


def build_parameter_store(cfg, dtype=np.float32):
    """Zero-filled store holding every learnable tensor of the configured model."""
    s = ParameterStore(dtype)
    L = cfg.levels
    _conv_params(s, "enc1.conv", cfg.channels(1), IMAGE_CHANNELS, FIRST_KERNEL)
    for n in range(2, L + 1):
        _conv_params(s, f"enc{n}.down", cfg.channels(n), cfg.channels(n - 1), KERNEL)
        if cfg.dff_enabled:
            for t, k in enumerate(range(1, n)):
                _sampler_params(s, f"enc{n}.dff.t{t}.p", cfg, n, "up", n - k)
                _sampler_params(s, f"enc{n}.dff.t{t}.q", cfg, k, "down", n - k)
        _group_params(s, f"enc{n}.group", cfg.channels(n), cfg.refinement_blocks)
    _group_params(s, "trunk", cfg.channels(L), cfg.resblocks_B)
    for n in range(L - 1, 0, -1):
        _deconv_params(s, f"dec{n}.up", cfg.channels(n + 1), cfg.channels(n), KERNEL)
        if cfg.decoder_variant == "unet_concat":
            _conv_params(s, f"dec{n}.fuse", cfg.channels(n), 2 * cfg.channels(n), 1)
        _group_params(s, f"dec{n}.group", cfg.channels(n), cfg.refinement_blocks)
        if cfg.dff_enabled:
            for t, k in enumerate(range(L, n, -1)):
                _sampler_params(s, f"dec{n}.dff.t{t}.p", cfg, n, "down", k - n)
                _sampler_params(s, f"dec{n}.dff.t{t}.q", cfg, k, "up", k - n)
    _conv_params(s, "out", IMAGE_CHANNELS, cfg.channels(1), KERNEL)
    return s


RESIDUAL_INIT_SCALE = 0.1
_DFF_Q_LAYER = re.compile(r"^(.*\.dff\.t\d+\.q)\.(\d+)\.weight$")


def branch_output_weights(store):
    """Names of the last layer of every residual branch and DFF back-projection stack."""
    last = {}
    out = []
    for name in store.names():
        if name.endswith(".conv2.weight"):
            out.append(name)
        m = _DFF_Q_LAYER.match(name)
        if m:
            last[m.group(1)] = max(last.get(m.group(1), -1), int(m.group(2)))
    out += [f"{stack}.{i}.weight" for stack, i in last.items()]
    return out


def init_model(cfg, seed, dtype=np.float32):
    """He-initialized store with residual-branch outputs scaled down.

    Without the scaling, 20-odd chained residual additions amplify the
    activations by orders of magnitude at initialization.
    """
    store = build_parameter_store(cfg, dtype)
    init_weights(store, make_rng(seed, 0))
    for name in branch_output_weights(store):
        store[name].data *= RESIDUAL_INIT_SCALE
    return store


def count_parameters(cfg):
    return build_parameter_store(cfg).num_scalars()


# ---------------------------------------------------------------------------
# building blocks
# ---------------------------------------------------------------------------

def _conv(x, params, name, stride=1):
    w = params[f"{name}.weight"]
    return conv2d(x, w, params[f"{name}.bias"], stride=stride, padding=w.shape[2] // 2)


def _deconv_up(x, params, name):
    return deconv2d(x, params[f"{name}.weight"], params[f"{name}.bias"], stride=2, padding=1, output_padding=1)


def residual_group(x, params, name, count):
    for b in range(count):
        p = f"{name}.{b}"
        x = residual_block(
            x,
            params[f"{p}.conv1.weight"],
            params[f"{p}.conv1.bias"],
            params[f"{p}.conv2.weight"],
            params[f"{p}.conv2.bias"],
        )
    return x


def sampler_stack(x, params, name, direction, gap):
    """``gap`` stride-2 convs (down) or deconvs (up); LReLU between layers, linear last."""
    for i in range(gap):
        layer = f"{name}.{i}"
        x = _conv(x, params, layer, stride=2) if direction == "down" else _deconv_up(x, params, layer)
        if i < gap - 1:
            x = lrelu(x)
    return x


def _check_level(fm, cfg_level, what):
    if fm.level != cfg_level:
        raise ValueError(f"{what}: expected level {cfg_level}, got level {fm.level}")


# ---------------------------------------------------------------------------
# modules
# ---------------------------------------------------------------------------

def dff_decoder(j_n, preceding, params):
    """Back-projection fusion of ``j_n`` with enhanced features of coarser levels.

    ``preceding`` is ordered coarsest first (levels L, L-1, ..., n+1).  Each step
    projects the running feature down to the preceding level, takes the
    difference, and adds the back-projected difference.
    """
    n = j_n.level
    expected = list(range(n + len(preceding), n, -1))
    if [fm.level for fm in preceding] != expected:
        raise ValueError(f"dff_decoder at level {n}: preceding levels must be {expected}, got {[fm.level for fm in preceding]}")
    j = j_n.value
    for t, fm in enumerate(preceding):
        gap = fm.level - n
        e = sub(sampler_stack(j, params, f"dec{n}.dff.t{t}.p", "down", gap), fm.value)
        j = add(sampler_stack(e, params, f"dec{n}.dff.t{t}.q", "up", gap), j)
    return FeatureMap(n, j)


def dff_encoder(i_n, preceding, params):
    """Encoder counterpart of :func:`dff_decoder` with the samplers swapped.

    ``preceding`` is ordered finest first (levels 1, ..., n-1); the running
    feature is upsampled to each preceding level and the error downsampled back.
    """
    n = i_n.level
    expected = list(range(1, n))
    if [fm.level for fm in preceding] != expected:
        raise ValueError(f"dff_encoder at level {n}: preceding levels must be {expected}, got {[fm.level for fm in preceding]}")
    x = i_n.value
    for t, fm in enumerate(preceding):
        gap = n - fm.level
        e = sub(sampler_stack(x, params, f"enc{n}.dff.t{t}.p", "up", gap), fm.value)
        x = add(sampler_stack(e, params, f"enc{n}.dff.t{t}.q", "down", gap), x)
    return FeatureMap(n, x)


def upsample_feature(j_next, params, level):
    """Learned x2 upsampling of a level ``level+1`` feature (channels halved)."""
    return lrelu(_deconv_up(j_next.value, params, f"dec{level}.up"))


def decoder_module(variant, i_n, j_next, params, refinement_blocks=3):
    """One boosted decoder level; returns the feature at level ``i_n.level``."""
    n = i_n.level
    if j_next.level != n + 1:
        raise ValueError(f"decoder_module: j_next must be at level {n + 1}, got level {j_next.level}")
    u = upsample_feature(j_next, params, n)
    if u.shape != i_n.value.shape:
        raise ValueError(f"decoder_module: upsampled shape {u.shape} does not match skip shape {i_n.value.shape}")

    def refine(x):
        return residual_group(x, params, f"dec{n}.group", refinement_blocks)

    i = i_n.value
    if variant == "sos":
        out = sub(refine(add(i, u)), u)
    elif variant == "diffusion":
        out = refine(u)
    elif variant == "twicing":
        out = add(refine(sub(i, u)), u)
    elif variant == "pyramid":
        out = add(u, refine(i))
    elif variant == "unet_concat":
        out = refine(_conv(concat([i, u]), params, f"dec{n}.fuse"))
    else:
        raise ValueError(f"unknown decoder variant {variant!r}; expected one of {VARIANTS}")
    return FeatureMap(n, out)


def check_input(image, cfg):
    image = as_tensor(image)
    if image.data.ndim != 4 or image.shape[1] != IMAGE_CHANNELS:
        raise ValueError(f"expected an N x {IMAGE_CHANNELS} x H x W image, got shape {image.shape}")
    m = cfg.size_multiple
    h, w = image.shape[2:]
    if h % m or w % m:
        raise ValueError(f"image height and width must be multiples of {m} for {cfg.levels} levels, got {h}x{w}")
    return image


def encoder_forward(image, cfg, params):
    """Return the per-level skip features i^1 .. i^L."""
    image = check_input(image, cfg)
    x = lrelu(_conv(image, params, "enc1.conv"))
    skips = [FeatureMap(1, x)]
    enhanced = [FeatureMap(1, x)]
    for n in range(2, cfg.levels + 1):
        x = lrelu(_conv(x, params, f"enc{n}.down", stride=2))
        if cfg.dff_enabled:
            fm = dff_encoder(FeatureMap(n, x), enhanced, params)
            enhanced.append(fm)
            x = fm.value
        x = residual_group(x, params, f"enc{n}.group", cfg.refinement_blocks)
        skips.append(FeatureMap(n, x))
    return skips


def trunk_forward(i_L, cfg, params):
    _check_level(i_L, cfg.levels, "trunk_forward")
    return FeatureMap(cfg.levels, residual_group(i_L.value, params, "trunk", cfg.resblocks_B))


def decoder_forward(skips, j_L, cfg, params):
    j = j_L
    enhanced = [j_L]
    for n in range(cfg.levels - 1, 0, -1):
        j = decoder_module(cfg.decoder_variant, skips[n - 1], j, params, cfg.refinement_blocks)
        if cfg.dff_enabled:
            j = dff_decoder(j, enhanced, params)
            enhanced.append(j)
    return j


def model_forward(image, cfg, params):
    """Dehaze ``image`` (N x 3 x H x W); the output is not clamped."""
    skips = encoder_forward(image, cfg, params)
    j_L = trunk_forward(skips[-1], cfg, params)
    j_1 = decoder_forward(skips, j_L, cfg, params)
    return _conv(j_1.value, params, "out")
