import csv
import math

import numpy as np
import pytest

from rawldm import diffusion as D
from rawldm.denoiser import UNet, UNetConfig
from rawldm.errors import ConfigError, NumericalError, RangeError, ShapeError
from rawldm.gradcheck import grad_check
from rawldm.optim import Adam
from rawldm.tensor import Tensor
from rawldm.vae import ResidualVAE, VaeConfig

from test_denoiser import SMALL, randomise_zero_layers

SCHED = D.make_linear_schedule(1000, 1e-4, 0.02)


def flat_schedule(T=4):
    """Schedule with no corruption at all (alpha_bar = 1 everywhere)."""
    z = np.zeros(T + 1)
    return D.NoiseSchedule(T, z, z + 1, z + 1, z)


def rand(shape, seed=0):
    return np.random.default_rng(seed).normal(size=shape).astype(np.float32)


class ConstModel:
    """predict_noise returns a fixed function of its inputs; used as an oracle stand-in."""

    def __init__(self, fn):
        self.fn = fn

    def predict_noise(self, z_t, t, cond=None):
        return Tensor(self.fn(z_t.data, t, cond))

    def null_condition(self, shape, seed=0):
        return None


class TestSchedule:
    def test_first_step(self):
        assert SCHED.alpha[1] == pytest.approx(0.9999, abs=1e-15)
        assert SCHED.alpha_bar[1] == pytest.approx(0.9999, abs=1e-15)

    def test_monotone(self):
        assert np.all(np.diff(SCHED.alpha_bar) < 0)
        assert np.all((SCHED.alpha[1:] > 0) & (SCHED.alpha[1:] < 1))
        assert SCHED.alpha_bar[-1] < 1e-4

    def test_loop_product(self):
        prod = 1.0
        for t in range(1, 1001):
            prod *= 1.0 - (1e-4 + (0.02 - 1e-4) * (t - 1) / 999)
            assert abs(SCHED.alpha_bar[t] - prod) < 1e-9

    def test_ratio(self):
        r = SCHED.alpha_bar[1:] / SCHED.alpha_bar[:-1]
        assert np.abs(r - SCHED.alpha[1:]).max() < 1e-9

    def test_sigma(self):
        np.testing.assert_array_equal(SCHED.sigma, np.sqrt(SCHED.beta))

    @pytest.mark.parametrize("args", [(1000, 0.0, 0.02), (1000, 0.03, 0.02), (1000, 1e-4, 1.0), (0, 1e-4, 0.02)])
    def test_invalid(self, args):
        with pytest.raises(ConfigError):
            D.make_linear_schedule(*args)

    def test_dump(self, tmp_path):
        path = D.dump_schedule(D.make_linear_schedule(10), tmp_path / "s.csv")
        rows = list(csv.reader(open(path)))
        assert rows[0] == ["t", "beta", "alpha", "alpha_bar", "sigma"]
        assert len(rows) == 11
        t, beta, alpha, ab, sig = rows[1]
        assert int(t) == 1 and float(beta) == 1e-4 and float(alpha) == 0.9999 and float(sig) == math.sqrt(1e-4)


class TestQSample:
    def test_no_corruption(self):
        z0 = rand((2, 4, 4))
        np.testing.assert_array_equal(D.q_sample(flat_schedule(), z0, 3, rand((2, 4, 4), 1)).data, z0)

    def test_zero_noise(self):
        z0 = rand((3, 5))
        out = D.q_sample(SCHED, z0, 400, np.zeros_like(z0)).data
        np.testing.assert_allclose(out, z0 * math.sqrt(SCHED.alpha_bar[400]), rtol=1e-6)

    def test_monte_carlo(self):
        n, t, z0 = 10**5, 250, 0.8
        rng = np.random.default_rng(0)
        z = D.q_sample(SCHED, np.full(n, z0), t, rng.standard_normal(n)).data
        ab = SCHED.alpha_bar[t]
        assert abs(z.mean() - math.sqrt(ab) * z0) < 3 * math.sqrt((1 - ab) / n)
        assert abs(z.var() - (1 - ab)) < 3 * (1 - ab) * math.sqrt(2 / (n - 1))

    def test_per_sample_t(self):
        z0, n = rand((2, 3)), rand((2, 3), 1)
        both = D.q_sample(SCHED, z0, np.array([10, 700]), n).data
        np.testing.assert_allclose(both[1], D.q_sample(SCHED, z0[1:], 700, n[1:]).data[0], rtol=1e-6)

    @pytest.mark.parametrize("t", [0, 1001])
    def test_range(self, t):
        with pytest.raises(RangeError):
            D.q_sample(SCHED, np.zeros(2), t, np.zeros(2))

    def test_shape(self):
        with pytest.raises(ShapeError):
            D.q_sample(SCHED, np.zeros(2), 5, np.zeros(3))


class TestOneStep:
    def test_round_trip_every_t(self):
        z0, n = rand((1, 4, 8, 8)).astype(np.float64), rand((1, 4, 8, 8), 1).astype(np.float64)
        worst = 0.0
        for t in range(1, 1001):
            zt = D.q_sample(SCHED, z0, t, n)
            worst = max(worst, np.abs(D.one_step_z0(SCHED, zt, t, n).data - z0).max())
        assert worst < 1e-5

    def test_round_trip_float32_random_t(self):
        rng = np.random.default_rng(3)
        for t in rng.integers(1, 1001, size=10):
            z0, n = rand((2, 4, 4), t), rand((2, 4, 4), t + 1)
            zt = D.q_sample(SCHED, z0, t, n)
            assert np.abs(D.one_step_z0(SCHED, zt, t, n).data - z0).max() < 1e-5 * max(1, 1 / math.sqrt(
                SCHED.alpha_bar[t]))

    def test_zero_eps(self):
        zt = rand((3, 3))
        np.testing.assert_allclose(D.one_step_z0(SCHED, zt, 600, np.zeros_like(zt)).data,
                                   zt / math.sqrt(SCHED.alpha_bar[600]), rtol=1e-6)

    def test_singular(self):
        s = D.NoiseSchedule(2, np.array([0, 0.5, 1.0]), np.array([1, 0.5, 0.0]), np.array([1, 0.5, 0.0]),
                            np.zeros(3))
        with pytest.raises(NumericalError):
            D.one_step_z0(s, np.ones(2), 2, np.zeros(2))


class TestLosses:
    def test_perfect_model(self):
        z0 = rand((2, 4, 4, 4))
        t = 300
        ab = SCHED.alpha_bar[t]
        model = ConstModel(lambda zt, t_, c: (zt - math.sqrt(ab) * z0) / math.sqrt(1 - ab))
        assert D.ldm_loss(model, SCHED, Tensor(z0), None, t, np.random.default_rng(0)).item() < 1e-10

    def test_zero_model(self):
        z0 = rand((4, 4, 16, 16))
        model = ConstModel(lambda zt, t_, c: np.zeros_like(zt))
        loss = D.ldm_loss(model, SCHED, Tensor(z0), None, 500, np.random.default_rng(0)).item()
        n = z0.size
        assert abs(loss - 1.0) < 3 * math.sqrt(2 / n)

    def test_overfit_one_batch(self):
        unet = UNet(SMALL)
        z0, y = Tensor(rand((2, 4, 8, 8))), Tensor(rand((2, 4, 8, 8), 1))
        opt = Adam(unet.parameters(), lr=1e-3, betas=(0.5, 0.9))
        t = np.array([100, 400])
        losses = []
        for _ in range(500):
            loss = D.ldm_loss(unet, SCHED, z0, unet.condition(y), t, np.random.default_rng(0))
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(loss.item())
        assert losses[-1] <= 0.5 * losses[0]

    def test_image_loss_closed_forms(self):
        x = Tensor(np.random.default_rng(0).uniform(size=(1, 3, 4, 4)).astype(np.float32))
        ident = lambda z, s: z
        assert D.image_loss(ident, x, None, x).item() == 0.0
        c = 0.25
        assert D.image_loss(ident, x + c, None, x).item() == pytest.approx(c * c, rel=1e-5)
        with pytest.raises(ShapeError):
            D.image_loss(ident, x, None, Tensor(np.zeros((1, 3, 4, 2))))

    def test_image_loss_gradient_through_decoder(self):
        vae = ResidualVAE(VaeConfig(base_channels=2, channel_multipliers=(1, 2), latent_channels=1))
        vae.to(np.float64).freeze()
        rng = np.random.default_rng(0)
        x = Tensor(rng.uniform(size=(1, 3, 8, 8)))
        enc = vae.encode(x)
        zt = Tensor(rng.normal(size=(1, 1, 2, 2)))
        eps = Tensor(rng.normal(size=(1, 1, 2, 2)))
        target = Tensor(rng.uniform(size=(1, 3, 8, 8)))

        def f(e):
            return D.image_loss(vae, D.one_step_z0(SCHED, zt, 20, e), enc.skip_features, target)

        assert grad_check(f, [eps]) < 1e-3
        f(Tensor(eps.data, requires_grad=True)).backward()
        assert all(p.grad is None for p in vae.parameters())

    def test_combined(self):
        a, b = Tensor(np.float64(0.3)), Tensor(np.float64(0.7))
        assert D.combined_loss(a, b, 0.0) is a
        assert D.combined_loss(Tensor(np.float64(0)), Tensor(np.float64(0)), 1.0).item() == 0.0
        assert D.combined_loss(a, b, 1.0).item() == pytest.approx(1.0, abs=1e-15)
        with pytest.raises(ConfigError):
            D.combined_loss(a, b, -1.0)


def live_unet():
    unet = UNet(SMALL)
    randomise_zero_layers(unet)
    return unet


class TestGuidance:
    def setup_method(self):
        self.unet = live_unet()
        self.z = Tensor(rand((1, 4, 8, 8)))
        self.cond = self.unet.condition(Tensor(rand((1, 4, 8, 8), 1)))

    def branch(self, cond):
        return self.unet.predict_noise(self.z, 200, cond).data

    def test_omega_one_is_conditional(self):
        out = D.cfg_predict(self.unet, self.z, 200, self.cond, D.GuidanceConfig(1.0)).data
        np.testing.assert_array_equal(out, self.branch(self.cond))

    def test_omega_zero_is_unconditional(self):
        g = D.GuidanceConfig(0.0, null_seed=3)
        out = D.cfg_predict(self.unet, self.z, 200, self.cond, g).data
        np.testing.assert_array_equal(out, self.branch(self.unet.null_condition(self.z.shape, 3)))

    def test_two_branch_oracle(self):
        g = D.GuidanceConfig(5.0, null_seed=3)
        eu, ec = self.branch(self.unet.null_condition(self.z.shape, 3)), self.branch(self.cond)
        out = D.cfg_predict(self.unet, self.z, 200, self.cond, g).data
        assert np.abs(out - (eu + 5.0 * (ec - eu))).max() < 1e-5

    def test_affine_in_omega(self):
        p = {w: D.cfg_predict(self.unet, self.z, 200, self.cond, D.GuidanceConfig(w)).data for w in (0.0, 1.0, 2.0)}
        assert np.abs(p[2.0] - (2 * p[1.0] - p[0.0])).max() < 1e-5

    def test_negative(self):
        with pytest.raises(ConfigError):
            D.GuidanceConfig(-0.5)

    def test_reference_weights(self):
        assert D.DEFAULT_GUIDANCE["sid"] == 2.0 and D.DEFAULT_GUIDANCE["eld"] == 2.5


class TestAncestral:
    def test_formula_oracle(self):
        rng = np.random.default_rng(0)
        zt, eps = rand((2, 4, 4), 1).astype(np.float64), rand((2, 4, 4), 2).astype(np.float64)
        model = ConstModel(lambda z, t, c: eps)
        for t in (2, 500, 1000):
            out = D.ancestral_step(model, SCHED, Tensor(zt), t, None, D.GuidanceConfig(1.0), np.random.default_rng(t)).data
            beta = 1e-4 + (0.02 - 1e-4) * (t - 1) / 999
            abar = np.prod([1 - (1e-4 + (0.02 - 1e-4) * (s - 1) / 999) for s in range(1, t + 1)])
            noise = np.random.default_rng(t).standard_normal(zt.shape)
            ref = (zt - beta / np.sqrt(1 - abar) * eps) / np.sqrt(1 - beta) + np.sqrt(beta) * noise
            assert np.abs(out - ref).max() < 1e-9

    def test_last_step_adds_no_noise(self):
        zt, eps = rand((3, 3)), rand((3, 3), 1)
        model = ConstModel(lambda z, t, c: eps)
        a = D.ancestral_step(model, SCHED, Tensor(zt), 1, None, D.GuidanceConfig(1.0), np.random.default_rng(0)).data
        b = D.ancestral_step(model, SCHED, Tensor(zt), 1, None, D.GuidanceConfig(1.0), np.random.default_rng(9)).data
        np.testing.assert_array_equal(a, b)

    def test_zero_sigma_deterministic(self):
        s = D.NoiseSchedule(SCHED.T, SCHED.beta, SCHED.alpha, SCHED.alpha_bar, np.zeros_like(SCHED.sigma))
        model = ConstModel(lambda z, t, c: np.zeros_like(z))
        zt = Tensor(rand((4,)))
        a = D.ancestral_step(model, s, zt, 700, None, D.GuidanceConfig(1.0), np.random.default_rng(0)).data
        b = D.ancestral_step(model, s, zt, 700, None, D.GuidanceConfig(1.0), np.random.default_rng(1)).data
        np.testing.assert_array_equal(a, b)

    def test_t_zero(self):
        with pytest.raises(RangeError):
            D.ancestral_step(ConstModel(lambda z, t, c: z), SCHED, Tensor(np.ones(2)), 0, None,
                             D.GuidanceConfig(), np.random.default_rng(0))


class TestDDIM:
    def test_timesteps(self):
        seq = D.ddim_timesteps(1000, 50)
        assert len(seq) == 50 and seq[0] == 1000 and seq[-1] == 20
        assert D.ddim_timesteps(10, 10) == list(range(10, 0, -1))
        with pytest.raises(ConfigError):
            D.ddim_timesteps(10, 11)

    def test_reproducible(self):
        unet = live_unet()
        cond = unet.condition(Tensor(rand((1, 4, 8, 8), 1)))
        g = D.GuidanceConfig(2.0, null_seed=1)
        a = D.ddim_sample(unet, SCHED, cond, 10, g, np.random.default_rng(5), shape=(1, 4, 8, 8)).data
        b = D.ddim_sample(unet, SCHED, cond, 10, g, np.random.default_rng(5), shape=(1, 4, 8, 8)).data
        assert np.array_equal(a, b)

    def test_single_step_is_one_step_estimate(self):
        unet = live_unet()
        cond = unet.condition(Tensor(rand((1, 4, 8, 8), 1)))
        zT = Tensor(rand((1, 4, 8, 8), 2))
        g = D.GuidanceConfig(1.0)
        out = D.ddim_sample(unet, SCHED, cond, 1, g, z_T=zT).data
        ref = D.one_step_z0(SCHED, zT, 1000, unet.predict_noise(zT, 1000, cond)).data
        np.testing.assert_allclose(out, ref, atol=1e-6)

    def test_full_length_is_per_step_update(self):
        s = D.make_linear_schedule(8, 1e-3, 0.2)
        eps_fn = lambda z, t, c: 0.3 * z + 0.01 * t
        model = ConstModel(eps_fn)
        zT = rand((2, 3)).astype(np.float64)
        out, traj = D.ddim_sample(model, s, None, 8, D.GuidanceConfig(1.0), z_T=Tensor(zT), return_trajectory=True)
        z = zT
        for t in range(8, 0, -1):
            e = eps_fn(z, t, None)
            x0 = (z - np.sqrt(1 - s.alpha_bar[t]) * e) / np.sqrt(s.alpha_bar[t])
            z = np.sqrt(s.alpha_bar[t - 1]) * x0 + np.sqrt(1 - s.alpha_bar[t - 1]) * e
        np.testing.assert_allclose(out.data, z, rtol=1e-12, atol=1e-12)
        assert len(traj) == 9

    def test_needs_shape(self):
        with pytest.raises(ConfigError):
            D.ddim_sample(ConstModel(lambda z, t, c: z), SCHED, None, 5, D.GuidanceConfig(1.0))
