import math
from dataclasses import replace

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from pixdiff import oracle, trainer, uvit
from pixdiff.data import ToyDataset
from pixdiff.diffusion import SamplerConfig, forward_sample
from pixdiff.errors import ConfigurationError, TrainingError
from pixdiff.weightings import WeightingSpec


def small_cfg(**kw):
    base = dict(batch_size=32, max_steps=100, warmup_steps=10)
    base.update(kw)
    return trainer.toy_config(**base)


def small_net(**kw):
    return uvit.toy_1d(width=16, num_mid_blocks=1, head_dim=16, **kw)


class TestConfig:
    def test_defaults(self):
        cfg = trainer.TrainConfig()
        assert (cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps) == (0.9, 0.99, 1e-12)
        assert cfg.learning_rate == 1e-4 and cfg.ema_decay == 0.9999
        assert cfg.label_drop_prob == 0.1

    def test_invalid(self):
        with pytest.raises(ConfigurationError):
            trainer.TrainConfig(warmup_steps=10, max_steps=5)
        with pytest.raises(ConfigurationError):
            trainer.TrainConfig(ema_decay=1.0)
        with pytest.raises(ConfigurationError):
            trainer.TrainConfig(label_drop_prob=1.5)

    def test_warmup(self):
        cfg = trainer.TrainConfig(learning_rate=1e-3, warmup_steps=4, max_steps=10)
        assert [cfg.lr_at(s) for s in range(6)] == pytest.approx([2.5e-4, 5e-4, 7.5e-4, 1e-3, 1e-3, 1e-3])

    def test_channel_mismatch(self):
        with pytest.raises(ConfigurationError):
            trainer.Trainer(uvit.toy(), small_cfg())


class TestStep:
    def test_zero_learning_rate(self):
        tr = trainer.Trainer(small_net(), small_cfg(learning_rate=0.0))
        before = {k: v.copy() for k, v in tr.state.params.items()}
        tr.step()
        for k in before:
            assert_array_equal(tr.state.params[k], before[k])
            assert_array_equal(tr.state.ema[k], before[k])

    def test_first_adam_step(self):
        # After bias correction the first update is -lr * g / (|g| + eps).
        cfg = small_cfg(learning_rate=1e-3, warmup_steps=0)
        tr = trainer.Trainer(small_net(), cfg)
        x, labels = trainer.batch_for_step(cfg, 0)
        _, grads, _, _ = trainer.loss_and_grads(tr.model, cfg, tr.state.params, x, labels, 0)
        before = {k: v.copy() for k, v in tr.state.params.items()}
        tr.step()
        for k, g in grads.items():
            expected = before[k] - 1e-3 * g / (np.abs(g) + cfg.adam_eps)
            assert_allclose(tr.state.params[k], expected, rtol=1e-12, atol=1e-15)

    def test_ema_definition(self):
        cfg = small_cfg(ema_decay=0.9999)
        tr = trainer.Trainer(small_net(), cfg)
        tr.step()
        prev = {k: v.copy() for k, v in tr.state.ema.items()}
        tr.step()
        for k in prev:
            assert_allclose(tr.state.ema[k], 0.9999 * prev[k] + 0.0001 * tr.state.params[k], rtol=1e-14, atol=1e-17)

    def test_gradient_matches_finite_difference(self):
        cfg = small_cfg()
        tr = trainer.Trainer(small_net(), cfg)
        tr.run(3, log_every=0)
        x, labels = trainer.batch_for_step(cfg, 7)
        params = tr.state.params
        _, grads, _, _ = trainer.loss_and_grads(tr.model, cfg, params, x, labels, 7)
        name = "level0.mid0.mlp.w1"
        d = np.random.default_rng(0).standard_normal(params[name].shape)
        h = 1e-6

        def f(scale):
            p = dict(params)
            p[name] = params[name] + scale * d
            loss, *_ = trainer.loss_and_grads(tr.model, cfg, p, x, labels, 7, backward=False)
            return loss

        fd = (f(h) - f(-h)) / (2 * h)
        assert fd == pytest.approx(np.sum(grads[name] * d), rel=1e-5)

    def test_non_finite(self):
        tr = trainer.Trainer(small_net(), small_cfg())
        tr.state.params["in_proj.w"][...] = np.nan
        with pytest.raises(TrainingError, match="grad_norm"):
            tr.step()

    def test_label_drop(self):
        cfg = small_cfg(dataset=ToyDataset("grid_bits_1d"), label_drop_prob=1.0)
        tr = trainer.Trainer(small_net(num_classes=2), cfg)
        tr.run(3, log_every=0)  # leave the zero-initialised output head
        x, labels = trainer.batch_for_step(cfg, 0)
        _, grads, _, _ = trainer.loss_and_grads(tr.model, cfg, tr.state.params, x, labels, 0)
        g = grads["embed.class"]
        # every label is dropped: only the null row receives gradient
        assert np.all(g[:2] == 0) and np.any(g[2] != 0)


class TestDeterminism:
    def test_replay_bit_identical(self):
        a = trainer.Trainer(small_net(), small_cfg())
        b = trainer.Trainer(small_net(), small_cfg())
        a.run(100, log_every=0)
        b.run(100, log_every=0)
        for k in a.state.params:
            assert_array_equal(a.state.params[k], b.state.params[k])
        assert [m.loss for m in a.history] == [m.loss for m in b.history]

    def test_resume_equals_continuous(self, tmp_path):
        full = trainer.Trainer(small_net(), small_cfg())
        full.run(6, log_every=0)
        part = trainer.Trainer(small_net(), small_cfg())
        part.run(3, log_every=0)
        part.save(tmp_path / "ck.bin")
        resumed = trainer.Trainer(small_net(), small_cfg())
        resumed.load(tmp_path / "ck.bin")
        resumed.run(3, log_every=0)
        for k in full.state.params:
            assert_array_equal(full.state.params[k], resumed.state.params[k])

    def test_log(self, tmp_path):
        tr = trainer.Trainer(small_net(), small_cfg())
        tr.run(3, log_every=0)
        tr.write_log(tmp_path / "log.csv")
        lines = (tmp_path / "log.csv").read_text().splitlines()
        assert lines[0] == "step,loss,grad_norm,lr,bias_t"
        assert len(lines) == 4 and lines[1].startswith("0,")


class TestPowerEquivalence:
    @pytest.mark.parametrize("b", [-3.0, 0.0, 1.0])
    def test_losses_along_trajectory(self, b):
        # Same parameters, batch and noise: the two losses differ by exactly exp(b).
        sig_cfg = small_cfg(weighting=WeightingSpec("sigmoid", bias=b))
        pw_cfg = small_cfg(weighting=WeightingSpec("power", bias=b, power_levels=0))
        tr = trainer.Trainer(small_net(), sig_cfg)
        for step in range(20):
            x, labels = trainer.batch_for_step(sig_cfg, step)
            ls, *_ = trainer.loss_and_grads(tr.model, sig_cfg, tr.state.params, x, labels, step, backward=False)
            lp, *_ = trainer.loss_and_grads(tr.model, pw_cfg, tr.state.params, x, labels, step, backward=False)
            assert ls / lp == pytest.approx(math.exp(b), rel=1e-12)
            tr.step()

    @pytest.mark.parametrize("b", [-3.0, 0.0, 1.0])
    def test_independent_traces(self, b):
        # Separate runs agree while rounding differences are still small; Adam's
        # sign-like early updates amplify them by ~10-100x per step afterwards.
        sig = trainer.Trainer(small_net(), small_cfg(weighting=WeightingSpec("sigmoid", bias=b)))
        pw = trainer.Trainer(small_net(), small_cfg(weighting=WeightingSpec("power", bias=b, power_levels=0)))
        sig.run(5, log_every=0)
        pw.run(5, log_every=0)
        ratio = np.array([s.loss / p.loss for s, p in zip(sig.history, pw.history)])
        assert_allclose(ratio, math.exp(b), rtol=1e-8)


class TestEval:
    def test_empty_budget(self):
        tr = trainer.Trainer(small_net(), small_cfg())
        assert trainer.eval_toy(tr.network(), tr.cfg, num_samples=0) == {}

    def test_rejects_images(self):
        cfg = small_cfg(dataset=ToyDataset("shapes_16x16"))
        with pytest.raises(ConfigurationError):
            trainer.eval_toy(None, cfg, num_samples=10)

    def test_oracle_in_the_loop(self):
        cfg = small_cfg(dataset=ToyDataset("grid_bits_1d", bits=3))
        model = oracle.OracleModel(oracle.GridData(3))
        metrics = trainer.eval_toy(model, cfg, SamplerConfig(num_steps=256), num_samples=10_000)
        assert metrics["w1"] < 0.02

    @pytest.mark.slow
    def test_oracle_beats_trained_model_per_bucket(self):
        cfg = small_cfg(dataset=ToyDataset("grid_bits_1d", bits=3), max_steps=300, batch_size=128)
        tr = trainer.Trainer(uvit.toy_1d(width=32, num_mid_blocks=2, head_dim=32), cfg)
        tr.run(300, log_every=0)
        net = tr.network()
        best = oracle.OracleModel(oracle.GridData(3))
        rng = np.random.default_rng(5)
        lo, hi = cfg.schedule.lam_range
        edges = np.linspace(lo, hi, 21)
        for k in range(20):
            lam = rng.uniform(edges[k], edges[k + 1], 10_000)
            t = cfg.schedule.invert(lam)
            level = cfg.schedule.to_noise_level(t)
            x = cfg.dataset.sample(10_000, rng)[0]
            z, _ = forward_sample(x, level, rng)
            w = cfg.weighting.x_weight(level.lam)[:, None, None, None]
            e_net = (w * (net(z, level).x(z) - x) ** 2).ravel()
            e_opt = (w * (best(z, level).x(z) - x) ** 2).ravel()
            diff = e_opt - e_net
            se = diff.std(ddof=1) / math.sqrt(diff.size)
            assert diff.mean() <= 3 * se + 1e-15, f"bucket {k}"


@pytest.mark.slow
def test_toy_loss_decreases():
    cfg = trainer.toy_config()
    tr = trainer.Trainer(uvit.toy_1d(), cfg)
    tr.run(1000, log_every=0)
    losses = np.array([m.loss for m in tr.history])
    assert np.median(losses[900:]) < np.median(losses[:100])


def test_replace_keeps_validation():
    with pytest.raises(ConfigurationError):
        replace(trainer.toy_config(), warmup_steps=5000)
