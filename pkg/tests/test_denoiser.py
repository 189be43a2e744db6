import numpy as np
import pytest

from rawldm.denoiser import UNet, UNetConfig, context_features, time_embedding
from rawldm.errors import ConfigError, RangeError, ShapeError
from rawldm.tensor import Tensor

SMALL = UNetConfig(base_channels=8, channel_multipliers=(1, 2, 2), time_embed_dim=16)


def latent(shape, seed=0):
    return Tensor(np.random.default_rng(seed).normal(size=shape).astype(np.float32))


def randomise_zero_layers(unet, seed=0):
    """Give zero-initialised output layers random weights so every path is live."""
    rng = np.random.default_rng(seed)
    for blk in unet.enc_attn + unet.dec_attn:
        if blk is not None:
            blk.proj_out.weight.data[:] = rng.normal(scale=0.2, size=blk.proj_out.weight.shape)
    unet.conv_out.weight.data[:] = rng.normal(scale=0.05, size=unet.conv_out.weight.shape)


class TestTimeEmbedding:
    def test_zero(self):
        e = time_embedding(0, 16)
        assert np.all(e[0::2] == 0) and np.all(e[1::2] == 1)

    def test_length(self):
        assert time_embedding(5, 32).shape == (32,)
        assert time_embedding(np.arange(3), 8).shape == (3, 8)

    def test_pairwise_distinct(self):
        emb = time_embedding(np.arange(1001), 64)
        d = ((emb[:, None, :] - emb[None, :, :]) ** 2).sum(-1)
        np.fill_diagonal(d, np.inf)
        assert d.min() > 1e-8

    def test_frequency_oracle(self):
        t, dim = 37, 8
        ref = []
        for k in range(dim // 2):
            f = 10000 ** (-k / (dim // 2))
            ref += [np.sin(t * f), np.cos(t * f)]
        np.testing.assert_allclose(time_embedding(t, dim), ref, atol=1e-12)

    def test_range(self):
        with pytest.raises(RangeError):
            time_embedding(1001, 8, 1000)
        with pytest.raises(RangeError):
            time_embedding(-1, 8)


class TestConfig:
    def test_bad_levels(self):
        with pytest.raises(ConfigError):
            UNetConfig(attention_levels=(3,))

    def test_roundtrip(self):
        assert UNetConfig.from_dict(SMALL.to_dict()) == SMALL

    def test_indivisible_latent(self):
        with pytest.raises(ShapeError):
            UNet(SMALL).predict_noise(latent((1, 4, 6, 6)), 10)


class TestContextProcessor:
    def test_weight_copy_invariant(self):
        unet = UNet(SMALL)
        for seed in range(3):
            x = latent((2, 4, 8, 8), seed)
            got = unet.condition(x)
            ref = unet.encoder_features(x)
            assert len(got) == len(SMALL.attention_levels)
            for g, r in zip(got, ref):
                assert np.abs(g.data - r.data).max() <= 1e-6

    def test_layer_shapes_mirror_encoder(self):
        unet = UNet(SMALL)
        enc = {k: v.shape for k, v in unet.encoder.named_parameters() if "temb_proj" not in k}
        ctx = {k: v.shape for k, v in unet.context.layers.named_parameters()}
        assert enc == ctx

    def test_is_a_copy(self):
        unet = UNet(SMALL)
        unet.context.layers.conv_in.weight.data[:] += 1
        x = latent((1, 4, 8, 8))
        assert np.abs(unet.condition(x)[0].data - unet.encoder_features(x)[0].data).max() > 0

    def test_level_extents(self):
        feats = UNet(SMALL).condition(latent((1, 4, 16, 8)))
        assert [f.shape[2:] for f in feats] == [(8, 4), (4, 2)]

    def test_shape_error(self):
        unet = UNet(SMALL)
        with pytest.raises(ShapeError):
            context_features(latent((1, 3, 8, 8)), unet.context)


class TestPredictNoise:
    @pytest.mark.parametrize("shape", [(1, 4, 8, 8), (2, 4, 4, 8), (3, 4, 16, 4)])
    def test_shape(self, shape):
        unet = UNet(SMALL)
        x = latent(shape)
        assert unet.predict_noise(x, 500, unet.condition(x)).shape == shape

    def test_per_sample_timesteps(self):
        unet = UNet(SMALL)
        randomise_zero_layers(unet)
        x = latent((2, 4, 8, 8))
        cond = unet.condition(x)
        both = unet.predict_noise(x, np.array([10, 900]), cond).data
        first = unet.predict_noise(Tensor(x.data[:1]), 10, [c[:1] for c in cond]).data
        np.testing.assert_allclose(both[:1], first, atol=1e-5)

    def test_conditional_differs_from_unconditional(self):
        unet = UNet(SMALL)
        randomise_zero_layers(unet)
        x = latent((1, 4, 8, 8))
        cond = unet.condition(latent((1, 4, 8, 8), 1))
        a = unet.predict_noise(x, 300, cond).data
        b = unet.predict_noise(x, 300).data
        assert np.abs(a - b).max() > 1e-4

    def test_bitwise_stable(self):
        unet = UNet(SMALL)
        randomise_zero_layers(unet)
        x = latent((1, 4, 8, 8))
        a = unet.predict_noise(x, 300, null_seed=4).data
        b = unet.predict_noise(x, 300, null_seed=4).data
        assert np.array_equal(a, b)

    def test_condition_mismatch(self):
        unet = UNet(SMALL)
        x = latent((1, 4, 8, 8))
        with pytest.raises(ShapeError):
            unet.predict_noise(x, 3, unet.condition(latent((1, 4, 16, 16))))
        with pytest.raises(ShapeError):
            unet.predict_noise(x, 3, unet.condition(x)[:1])

    def test_gradients_reach_both_networks(self):
        unet = UNet(SMALL)
        randomise_zero_layers(unet)
        x, y = latent((2, 4, 8, 8)), latent((2, 4, 8, 8), 1)
        out = unet.predict_noise(x, np.array([5, 600]), unet.condition(y))
        (out * out).sum().backward()
        assert all(p.grad is not None and np.abs(p.grad).max() > 0 for p in unet.context.parameters())
        live = [p for p in unet.backbone_parameters() if p.grad is not None and np.abs(p.grad).max() > 0]
        assert len(live) == len(unet.backbone_parameters())

    def test_parameter_groups_partition(self):
        unet = UNet(SMALL)
        ids = [id(p) for p in unet.backbone_parameters()] + [id(p) for p in unet.new_parameters()]
        assert sorted(ids) == sorted(id(p) for p in unet.parameters())
        assert len(set(ids)) == len(ids)


def test_translation_covariance():
    # content on a zero canvas, moved by one coarsest-level region (2 tokens at stride 4 = 8 pixels)
    cfg = UNetConfig(base_channels=8, channel_multipliers=(1, 1, 1), time_embed_dim=16)
    unet = UNet(cfg)
    randomise_zero_layers(unet)
    # double precision so summation order inside the normalisation statistics does not matter
    unet.to(np.float64)
    rng = np.random.default_rng(0)
    size, shift = 128, 8
    patch_z, patch_c = rng.normal(size=(2, 1, 4, 8, 8))

    def place(patch, at):
        canvas = np.zeros((1, 4, size, size))
        canvas[..., at:at + 8, at:at + 8] = patch
        return Tensor(canvas)

    def run(at):
        return unet.predict_noise(place(patch_z, at), 250, unet.condition(place(patch_c, at))).data

    base, moved = run(56), run(56 + shift)
    lo, hi = 48, 80
    diff = np.abs(moved[..., lo + shift:hi + shift, lo + shift:hi + shift] - base[..., lo:hi, lo:hi]).max()
    assert diff < 1e-5
    assert np.abs(base[..., lo:hi, lo:hi]).max() > 1e-3
