import numpy as np
import pytest

import oracle
from msbdn.network import (
    VARIANTS,
    FeatureMap,
    NetworkConfig,
    build_parameter_store,
    count_parameters,
    decoder_module,
    dff_decoder,
    dff_encoder,
    encoder_forward,
    init_model,
    model_forward,
    trunk_forward,
)
from msbdn.params import make_rng
from msbdn.tensor import Tensor, residual_block
from msbdn.training import model_grad_check


def randomized(cfg, seed=0, dtype=np.float64, bias_scale=0.1):
    """Initialized store with non-zero biases so no path is trivially skipped."""
    store = init_model(cfg, seed, dtype)
    rng = make_rng(seed, 99)
    for p in store:
        if p.value.data.ndim == 1:
            p.value.data[...] = rng.normal(0, bias_scale, size=p.shape)
    return store


def arrays(store):
    return {p.name: p.value.data.astype(np.float64) for p in store}


def image(rng, size, n=1):
    return rng.uniform(size=(n, 3, size, size))


# -- config / shapes ---------------------------------------------------------

def test_config_validation():
    with pytest.raises(ValueError):
        NetworkConfig(levels=1)
    with pytest.raises(ValueError):
        NetworkConfig(decoder_variant="bogus")
    assert NetworkConfig(base_channels=8, max_channels=16).channels(4) == 16


def test_encoder_shapes(rng):
    cfg = NetworkConfig(levels=3, base_channels=8)
    feats = encoder_forward(Tensor(image(rng, 32)), cfg, init_model(cfg, 0))
    assert [f.value.shape[1:] for f in feats] == [(8, 32, 32), (16, 16, 16), (32, 8, 8)]


def test_encoder_divisibility_error(rng):
    cfg = NetworkConfig(levels=3)
    with pytest.raises(ValueError, match="multiples of 4"):
        encoder_forward(Tensor(image(rng, 30)), cfg, build_parameter_store(cfg))


def test_zero_params_zero_features(rng):
    cfg = NetworkConfig(levels=3, base_channels=4)
    feats = encoder_forward(Tensor(image(rng, 16)), cfg, build_parameter_store(cfg))
    assert all(np.all(f.value.data == 0) for f in feats)


@pytest.mark.parametrize("dff", [True, False])
def test_encoder_matches_oracle(rng, dff):
    cfg = NetworkConfig(levels=3, base_channels=4, resblocks_B=1, refinement_blocks=2, dff_enabled=dff)
    store = randomized(cfg)
    x = image(rng, 16)
    feats = encoder_forward(Tensor(x), cfg, store)
    _, skips = oracle.forward(x, cfg, arrays(store))
    for f in feats:
        np.testing.assert_allclose(f.value.data, skips[f.level], atol=1e-10)


# -- trunk -------------------------------------------------------------------

def test_trunk_zero_blocks_identity(rng):
    cfg = NetworkConfig(levels=2, base_channels=4, resblocks_B=0)
    x = Tensor(rng.normal(size=(1, 8, 4, 4)))
    assert trunk_forward(FeatureMap(2, x), cfg, build_parameter_store(cfg)).value is x


def test_trunk_zero_params_identity(rng):
    cfg = NetworkConfig(levels=2, base_channels=4, resblocks_B=3)
    x = rng.normal(size=(1, 8, 4, 4))
    out = trunk_forward(FeatureMap(2, Tensor(x)), cfg, build_parameter_store(cfg, np.float64))
    np.testing.assert_array_equal(out.value.data, x)


def test_trunk_matches_two_blocks(rng):
    cfg = NetworkConfig(levels=2, base_channels=4, resblocks_B=2)
    store = randomized(cfg)
    x = Tensor(rng.normal(size=(1, 8, 4, 4)))
    expected = x
    for b in range(2):
        p = lambda s: store[f"trunk.{b}.{s}"]
        expected = residual_block(expected, p("conv1.weight"), p("conv1.bias"), p("conv2.weight"), p("conv2.bias"))
    np.testing.assert_array_equal(trunk_forward(FeatureMap(2, x), cfg, store).value.data, expected.data)


# -- decoder modules ---------------------------------------------------------

def _decoder_inputs(rng, cfg):
    store = randomized(cfg)
    for name in store.names():
        if name.startswith("dec1.group"):
            store[name].data[...] = 0
    i1 = FeatureMap(1, Tensor(rng.normal(size=(1, 4, 8, 8))))
    j2 = FeatureMap(2, Tensor(rng.normal(size=(1, 8, 4, 4))))
    u = oracle.lrelu(oracle.deconv_up(j2.value.data, store["dec1.up.weight"].data, store["dec1.up.bias"].data))
    return store, i1, j2, u


@pytest.mark.parametrize("variant", ["sos", "twicing"])
def test_identity_refinement_returns_skip_exactly(rng, variant):
    cfg = NetworkConfig(levels=2, base_channels=4, decoder_variant=variant)
    store, i1, j2, _ = _decoder_inputs(rng, cfg)
    out = decoder_module(variant, i1, j2, store, cfg.refinement_blocks)
    # values are integers-free floats; require bit equality up to the rounding of (i+u)-u
    np.testing.assert_allclose(out.value.data, i1.value.data, rtol=0, atol=1e-15)


def test_identity_refinement_other_variants(rng):
    cfg = NetworkConfig(levels=2, base_channels=4)
    store, i1, j2, u = _decoder_inputs(rng, cfg)
    np.testing.assert_allclose(decoder_module("diffusion", i1, j2, store).value.data, u, atol=1e-12)
    np.testing.assert_allclose(decoder_module("pyramid", i1, j2, store).value.data, u + i1.value.data, atol=1e-12)


@pytest.mark.parametrize("variant", VARIANTS)
def test_decoder_module_matches_composition(rng, variant):
    cfg = NetworkConfig(levels=2, base_channels=4, decoder_variant=variant, refinement_blocks=2)
    store = randomized(cfg)
    P = arrays(store)
    i1 = rng.normal(size=(1, 4, 8, 8))
    j2 = rng.normal(size=(1, 8, 4, 4))
    u = oracle.lrelu(oracle.deconv_up(j2, P["dec1.up.weight"], P["dec1.up.bias"]))
    G = lambda x: oracle.group(x, P, "dec1.group", 2)
    expected = {
        "sos": lambda: G(i1 + u) - u,
        "diffusion": lambda: G(u),
        "twicing": lambda: G(i1 - u) + u,
        "pyramid": lambda: u + G(i1),
        "unet_concat": lambda: G(oracle.conv(np.concatenate([i1, u], 1), P["dec1.fuse.weight"], P["dec1.fuse.bias"])),
    }[variant]()
    out = decoder_module(variant, FeatureMap(1, Tensor(i1)), FeatureMap(2, Tensor(j2)), store, 2)
    np.testing.assert_allclose(out.value.data, expected, atol=1e-10)


def test_decoder_module_level_mismatch(rng):
    cfg = NetworkConfig(levels=3, base_channels=4)
    store = build_parameter_store(cfg)
    with pytest.raises(ValueError):
        decoder_module("sos", FeatureMap(1, Tensor(np.zeros((1, 4, 8, 8)))), FeatureMap(3, Tensor(np.zeros((1, 16, 2, 2)))), store)


# -- DFF ---------------------------------------------------------------------

def test_dff_decoder_empty_is_identity(rng):
    x = Tensor(rng.normal(size=(1, 4, 4, 4)))
    assert dff_decoder(FeatureMap(3, x), [], {}).value is x


def test_dff_zero_samplers_identity(rng):
    cfg = NetworkConfig(levels=3, base_channels=4)
    store = build_parameter_store(cfg, np.float64)
    j1 = rng.normal(size=(1, 4, 16, 16))
    prev = [FeatureMap(3, Tensor(rng.normal(size=(1, 16, 4, 4)))), FeatureMap(2, Tensor(rng.normal(size=(1, 8, 8, 8))))]
    np.testing.assert_array_equal(dff_decoder(FeatureMap(1, Tensor(j1)), prev, store).value.data, j1)
    i3 = rng.normal(size=(1, 16, 4, 4))
    prev_e = [FeatureMap(1, Tensor(rng.normal(size=(1, 4, 16, 16)))), FeatureMap(2, Tensor(rng.normal(size=(1, 8, 8, 8))))]
    np.testing.assert_array_equal(dff_encoder(FeatureMap(3, Tensor(i3)), prev_e, store).value.data, i3)


def test_dff_decoder_two_preceding_matches_manual(rng):
    cfg = NetworkConfig(levels=3, base_channels=4)
    store = randomized(cfg)
    P = arrays(store)
    j1 = rng.normal(size=(1, 4, 16, 16))
    t3 = rng.normal(size=(1, 16, 4, 4))
    t2 = rng.normal(size=(1, 8, 8, 8))
    # step 0: gap 2 to level 3
    e = oracle.stack(j1, P, "dec1.dff.t0.p", "down", 2) - t3
    j = oracle.stack(e, P, "dec1.dff.t0.q", "up", 2) + j1
    # step 1: gap 1 to level 2
    e = oracle.stack(j, P, "dec1.dff.t1.p", "down", 1) - t2
    j = oracle.stack(e, P, "dec1.dff.t1.q", "up", 1) + j
    out = dff_decoder(FeatureMap(1, Tensor(j1)), [FeatureMap(3, Tensor(t3)), FeatureMap(2, Tensor(t2))], store)
    np.testing.assert_allclose(out.value.data, j, atol=1e-10)


def test_dff_encoder_two_preceding_matches_manual(rng):
    cfg = NetworkConfig(levels=3, base_channels=4)
    store = randomized(cfg)
    P = arrays(store)
    i3 = rng.normal(size=(1, 16, 4, 4))
    t1 = rng.normal(size=(1, 4, 16, 16))
    t2 = rng.normal(size=(1, 8, 8, 8))
    e = oracle.stack(i3, P, "enc3.dff.t0.p", "up", 2) - t1
    x = oracle.stack(e, P, "enc3.dff.t0.q", "down", 2) + i3
    e = oracle.stack(x, P, "enc3.dff.t1.p", "up", 1) - t2
    x = oracle.stack(e, P, "enc3.dff.t1.q", "down", 1) + x
    out = dff_encoder(FeatureMap(3, Tensor(i3)), [FeatureMap(1, Tensor(t1)), FeatureMap(2, Tensor(t2))], store)
    np.testing.assert_allclose(out.value.data, x, atol=1e-10)


def test_dff_wrong_ordering(rng):
    cfg = NetworkConfig(levels=3, base_channels=4)
    store = build_parameter_store(cfg)
    prev = [FeatureMap(2, Tensor(np.zeros((1, 8, 8, 8)))), FeatureMap(3, Tensor(np.zeros((1, 16, 4, 4))))]
    with pytest.raises(ValueError):
        dff_decoder(FeatureMap(1, Tensor(np.zeros((1, 4, 16, 16)))), prev, store)
    with pytest.raises(ValueError):
        dff_encoder(FeatureMap(3, Tensor(np.zeros((1, 16, 4, 4)))), prev, store)


# -- full model --------------------------------------------------------------

@pytest.mark.parametrize("variant", VARIANTS)
@pytest.mark.parametrize("dff", [True, False])
def test_model_matches_unrolled_oracle(rng, variant, dff):
    cfg = NetworkConfig(levels=2, base_channels=4, resblocks_B=1, refinement_blocks=1, decoder_variant=variant, dff_enabled=dff)
    store = randomized(cfg, seed=3)
    x = image(rng, 16)
    out = model_forward(Tensor(x), cfg, store).data
    assert out.shape == x.shape
    np.testing.assert_allclose(out, oracle.forward(x, cfg, arrays(store))[0], atol=1e-10)


def test_model_three_levels_matches_oracle(rng):
    cfg = NetworkConfig(levels=3, base_channels=4, resblocks_B=2, refinement_blocks=1)
    store = randomized(cfg, seed=4)
    x = image(rng, 16, n=2)
    np.testing.assert_allclose(model_forward(Tensor(x), cfg, store).data, oracle.forward(x, cfg, arrays(store))[0], atol=1e-10)


def test_model_deterministic(rng):
    cfg = NetworkConfig(levels=3, base_channels=4)
    x = Tensor(image(rng, 16).astype(np.float32))
    a = model_forward(x, cfg, init_model(cfg, 5)).data
    b = model_forward(x, cfg, init_model(cfg, 5)).data
    assert a.dtype == np.float32 and a.tobytes() == b.tobytes()


# -- parameter counts --------------------------------------------------------

@pytest.mark.parametrize(
    "kw",
    [dict(levels=2, base_channels=2, resblocks_B=1), dict(levels=3, base_channels=8), dict(levels=4, base_channels=4, max_channels=16)],
)
def test_counts_equal_across_boosted_variants(kw):
    counts = {v: count_parameters(NetworkConfig(decoder_variant=v, **kw)) for v in ("sos", "diffusion", "twicing", "pyramid")}
    assert len(set(counts.values())) == 1, counts


def test_dff_adds_parameters():
    assert count_parameters(NetworkConfig(dff_enabled=True)) > count_parameters(NetworkConfig(dff_enabled=False))


@pytest.mark.parametrize("variant", VARIANTS)
@pytest.mark.parametrize("dff", [True, False])
def test_count_matches_tally(variant, dff):
    cfg = NetworkConfig(levels=2, base_channels=2, resblocks_B=1, decoder_variant=variant, dff_enabled=dff)
    assert count_parameters(cfg) == oracle.tally(cfg)


def test_count_hand_tally_small():
    # L=2, base 2, B=1, 3 refinement blocks, DFF off, sos
    cfg = NetworkConfig(levels=2, base_channels=2, resblocks_B=1, dff_enabled=False)
    enc1 = 2 * 3 * 121 + 2
    enc2 = (4 * 2 * 9 + 4) + 3 * 2 * (4 * 4 * 9 + 4)
    trunk = 2 * (4 * 4 * 9 + 4)
    dec1 = (4 * 2 * 9 + 2) + 3 * 2 * (2 * 2 * 9 + 2)
    out = 3 * 2 * 9 + 3
    assert count_parameters(cfg) == enc1 + enc2 + trunk + dec1 + out


# -- end-to-end gradients ----------------------------------------------------

@pytest.mark.parametrize("variant", VARIANTS)
@pytest.mark.parametrize("dff", [True, False])
def test_end_to_end_gradients(variant, dff):
    cfg = NetworkConfig(levels=2, base_channels=2, resblocks_B=1, refinement_blocks=1, decoder_variant=variant, dff_enabled=dff)
    r = model_grad_check(cfg)
    assert r.max_rel_err < 1e-2, str(r)
