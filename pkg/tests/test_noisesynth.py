import numpy as np
import pytest

from rawldm import isp
from rawldm.errors import ConfigError
from rawldm.isp import ImagePlane, RawFrame
from rawldm.noisesynth import (SensorNoiseParams, degrade, make_dataset, mosaic_from_image,
                               read_manifest, write_dataset)
from rawldm.scenes import scene_batch


def flat_frame(value, n=316):
    return RawFrame(mosaic=np.full((n, n), value, np.uint16), black_level=512, white_level=16383)


def test_noise_free_limit_is_identity():
    rng = np.random.default_rng(0)
    clean = RawFrame(mosaic=rng.integers(512, 16384, size=(8, 10)).astype(np.uint16))
    out = degrade(clean, 1.0, SensorNoiseParams(system_gain=1e-8, read_sigma=0.0))
    np.testing.assert_array_equal(out.mosaic, clean.mosaic)


def test_mean_matches_scaled_signal():
    clean = flat_frame(512 + 8000)
    params = SensorNoiseParams(system_gain=2.0, read_sigma=4.0, seed=11)
    out = degrade(clean, 10.0, params).mosaic.astype(np.float64) - 512
    assert out.size >= 10**5 - 1000
    expected = 800.0
    se = out.std() / np.sqrt(out.size)
    assert abs(out.mean() - expected) < 3 * se


def test_variance_matches_shot_plus_read():
    clean = flat_frame(512 + 8000)
    params = SensorNoiseParams(system_gain=2.0, read_sigma=4.0, seed=12)
    out = degrade(clean, 10.0, params).mosaic.astype(np.float64)
    expected = 2.0 * 800.0 + 4.0 ** 2
    assert abs(out.var() / expected - 1) < 0.05


def test_amplified_expectation_equals_clean_linear():
    clean = flat_frame(512 + 7935)
    noisy = degrade(clean, 100.0, SensorNoiseParams(seed=3))
    got = isp.amplify(isp.linearize(isp.pack_bayer(noisy), 512, 16383), 100.0).data.mean()
    want = isp.linearize(isp.pack_bayer(clean), 512, 16383).data.mean()
    assert abs(got / want - 1) < 0.01


def test_fixed_seed_bit_identical():
    clean = flat_frame(3000, n=32)
    a = degrade(clean, 50, SensorNoiseParams(seed=99)).mosaic
    b = degrade(clean, 50, SensorNoiseParams(seed=99)).mosaic
    c = degrade(clean, 50, SensorNoiseParams(seed=100)).mosaic
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, c)


def test_bad_ratio():
    with pytest.raises(ConfigError):
        degrade(flat_frame(1000, n=4), 0.5, SensorNoiseParams())


def test_bad_params():
    with pytest.raises(ConfigError):
        SensorNoiseParams(system_gain=0)
    with pytest.raises(ConfigError):
        SensorNoiseParams(read_sigma=-1)


def test_dataset_pairs_per_ratio():
    imgs = scene_batch(1, size=16, seed=0)
    pairs = make_dataset(imgs, [100, 300], SensorNoiseParams())
    assert len(pairs) == 2
    assert [p[0].exposure_ratio for p in pairs] == [100, 300]
    for noisy, clean in pairs:
        assert clean.exposure_ratio == 1
        assert noisy.mosaic.dtype == np.uint16
        assert noisy.mosaic.max() <= noisy.white_level
        assert noisy.black_level < noisy.white_level and min(noisy.wb_gains) > 0
        assert noisy.mosaic.shape == (32, 32)


def test_empty_dataset():
    with pytest.raises(ConfigError):
        make_dataset([], [100], SensorNoiseParams())


def test_inverse_pack_round_trip():
    rng = np.random.default_rng(4)
    packed = ImagePlane(rng.integers(0, 65536, size=(5, 6, 4)).astype(np.float32), isp.PACKED,
                        normalized=False)
    mosaic = isp.unpack_bayer(packed, "BGGR")
    again = isp.pack_bayer(RawFrame(mosaic=mosaic, cfa_pattern="BGGR"))
    np.testing.assert_array_equal(again.data, packed.data)


def test_clean_mosaic_renders_back_to_source():
    img = scene_batch(1, size=16, seed=2)[0]
    frame = mosaic_from_image(img, 512, 16383, wb_gains=(2.0, 1.0, 1.5))
    back = isp.raw_to_srgb_reference(frame).data
    # 16-bit quantisation of the mosaic is the only loss
    assert np.abs(back - img.data).max() < 2e-3


def test_dataset_manifest_round_trip(tmp_path):
    pairs = make_dataset(scene_batch(2, size=8, seed=1), [100], SensorNoiseParams(seed=5))
    manifest = write_dataset(pairs, tmp_path)
    loaded = read_manifest(manifest)
    assert len(loaded) == 2
    for (n0, c0), (n1, c1) in zip(pairs, loaded):
        np.testing.assert_array_equal(n0.mosaic, n1.mosaic)
        np.testing.assert_array_equal(c0.mosaic, c1.mosaic)
        assert n1.exposure_ratio == 100
