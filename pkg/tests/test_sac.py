"""Unit Tests für SAC (Policy, Verluste, Updates)."""

import copy

import numpy as np
import pytest

from src.core.errors import ConfigError
from src.core.nn import finite_diff_check
from src.core.replay import TransitionBatch
from src.core.sac import (
    actor_loss,
    actor_loss_and_grad,
    bellman_targets,
    critic_loss,
    critic_loss_and_grad,
    init_sac,
    policy_sample,
    sac_update_real,
    target_soft_update,
    temperature_update,
)
from src.utils.rng import make_rng


def _constant_critics(sac, q_value: float, target_value: float) -> None:
    """Null-Gewichte, Ausgabe-Bias = Konstante; Q hängt nicht von (s, a) ab."""
    out_bias = f"b{sac.critic_spec.n_layers - 1}"
    sac.critics = [c.zeros_like() for c in sac.critics]
    sac.targets = [t.zeros_like() for t in sac.targets]
    for c in sac.critics:
        c.segment(out_bias)[...] = q_value
    for t in sac.targets:
        t.segment(out_bias)[...] = target_value


def _batch(rng, n, S, A):
    s = rng.standard_normal((n, S))
    return TransitionBatch(s, rng.uniform(-1, 1, (n, A)), rng.standard_normal(n), s + 0.1 * rng.standard_normal((n, S)))


class TestPolicy:
    def setup_method(self):
        self.rng = np.random.default_rng(0)
        self.sac = init_sac(3, 1, self.rng, np.array([-2.0]), np.array([2.0]), hidden_dims=(8,))

    def test_deterministic_zero_actor(self):
        self.sac.actor = self.sac.actor.zeros_like()
        sample = policy_sample(self.sac, np.ones(3), deterministic=True)
        assert sample.action == pytest.approx([0.0])

    def test_actions_within_bounds(self):
        sample = policy_sample(self.sac, self.rng.standard_normal((500, 3)), self.rng, temperature_scale=100.0)
        assert np.all(np.abs(sample.action) <= 2.0)
        assert sample.log_prob.shape == (500,)

    def test_temperature_scale_widens_distribution(self):
        self.sac.actor = self.sac.actor.zeros_like()
        # log_std = 0 -> std 1; kleiner machen, damit tanh nicht sättigt
        self.sac.actor.segment(f"b{self.sac.actor_spec.n_layers - 1}")[1] = -2.0
        states = np.zeros((10_000, 3))
        narrow = policy_sample(self.sac, states, np.random.default_rng(1), temperature_scale=1.0).action
        wide = policy_sample(self.sac, states, np.random.default_rng(1), temperature_scale=10.0).action
        assert np.all(wide.std(axis=0) > narrow.std(axis=0))

    def test_invalid_temperature(self):
        with pytest.raises(ValueError):
            policy_sample(self.sac, np.zeros(3), temperature_scale=0.0)

    def test_invalid_bounds(self):
        with pytest.raises(ConfigError):
            init_sac(3, 1, self.rng, np.array([1.0]), np.array([-1.0]))


class TestCriticLoss:
    def setup_method(self):
        self.rng = np.random.default_rng(1)
        self.sac = init_sac(2, 1, self.rng, -np.ones(1), np.ones(1), hidden_dims=(4,), gamma=0.99)

    def test_hand_arithmetic(self):
        _constant_critics(self.sac, q_value=0.0, target_value=1.0)
        batch = TransitionBatch(np.zeros((1, 2)), np.zeros((1, 1)), np.array([1.0]), np.zeros((1, 2)))
        # y = 1 + 0.99 * 1 = 1.99, 0.5 * 1.99^2 = 1.98005 pro Critic
        loss = critic_loss(self.sac, batch, noise=np.zeros((1, 1)), alpha=0.0)
        assert loss == pytest.approx(2 * 1.98005)

    def test_zero_at_target(self):
        batch = _batch(self.rng, 6, 2, 1)
        noise = self.rng.standard_normal((6, 1))
        target = bellman_targets(self.sac, batch, noise)
        out_bias = f"b{self.sac.critic_spec.n_layers - 1}"
        self.sac.critics = [c.zeros_like() for c in self.sac.critics]
        # konstantes Q kann nur ein konstantes Ziel treffen
        batch.rewards = batch.rewards - target + 0.7
        for c in self.sac.critics:
            c.segment(out_bias)[...] = 0.7
        assert critic_loss(self.sac, batch, noise=noise) == pytest.approx(0.0, abs=1e-20)

    def test_gradient_matches_finite_differences(self):
        sac = init_sac(2, 1, self.rng, -np.ones(1), np.ones(1), hidden_dims=(5,), activation="tanh")
        batch = _batch(self.rng, 5, 2, 1)
        noise = self.rng.standard_normal((5, 1))
        weights = self.rng.uniform(0.1, 1.0, 5)
        _, grads = critic_loss_and_grad(sac, batch, weights=weights, noise=noise)
        for j in range(2):
            def fn(values, j=j):
                params = list(sac.critics)
                params[j] = sac.critics[j].with_values(values)
                return critic_loss(sac, batch, weights=weights, noise=noise, critic_params=params)

            report = finite_diff_check(fn, sac.critics[j], grads[j], tolerance=1e-6)
            assert report.passed, str(report)

    def test_empty_batch(self):
        empty = TransitionBatch(np.zeros((0, 2)), np.zeros((0, 1)), np.zeros(0), np.zeros((0, 2)))
        with pytest.raises(ValueError):
            critic_loss(self.sac, empty, self.rng)


class TestActorLoss:
    def setup_method(self):
        self.rng = np.random.default_rng(2)
        self.sac = init_sac(2, 1, self.rng, -np.ones(1), np.ones(1), hidden_dims=(5,), activation="tanh")

    def test_alpha_zero_is_minus_q(self):
        _constant_critics(self.sac, q_value=2.0, target_value=0.0)
        states = self.rng.standard_normal((4, 2))
        loss = actor_loss(self.sac, states, self.rng, alpha=0.0)
        assert loss == pytest.approx(-8.0)

    def test_gradient_matches_finite_differences(self):
        states = self.rng.standard_normal((6, 2))
        noise = self.rng.standard_normal((6, 1))
        weights = self.rng.uniform(0.1, 1.0, 6)
        _, grad = actor_loss_and_grad(self.sac, states, weights=weights, noise=noise)

        def fn(values):
            return actor_loss(
                self.sac, states, weights=weights, noise=noise, actor_params=self.sac.actor.with_values(values)
            )

        report = finite_diff_check(fn, self.sac.actor, grad, tolerance=1e-6)
        assert report.passed, str(report)


class TestUpdates:
    def setup_method(self):
        self.rng = np.random.default_rng(3)
        self.sac = init_sac(2, 1, self.rng, -np.ones(1), np.ones(1), hidden_dims=(8,))

    def test_soft_update_tau_one(self):
        self.sac.critics = [c.with_values(c.values + 1.0) for c in self.sac.critics]
        self.sac.tau = 1.0
        target_soft_update(self.sac)
        for c, t in zip(self.sac.critics, self.sac.targets):
            assert np.array_equal(c.values, t.values)

    def test_soft_update_contracts(self):
        self.sac.critics = [c.with_values(c.values + 1.0) for c in self.sac.critics]
        before = np.linalg.norm(self.sac.targets[0].values - self.sac.critics[0].values)
        target_soft_update(self.sac)
        after = np.linalg.norm(self.sac.targets[0].values - self.sac.critics[0].values)
        assert after == pytest.approx((1.0 - self.sac.tau) * before)

    def test_temperature_rises_below_target_entropy(self):
        self.sac.target_entropy = 50.0
        before = self.sac.alpha
        after = temperature_update(self.sac, self.rng.standard_normal((16, 2)), self.rng)
        assert after > before
        assert after > 0.0

    def test_temperature_falls_above_target_entropy(self):
        self.sac.target_entropy = -50.0
        before = self.sac.alpha
        assert temperature_update(self.sac, self.rng.standard_normal((16, 2)), self.rng) < before

    def test_real_update_deterministic(self):
        batch = _batch(self.rng, 32, 2, 1)
        a = init_sac(2, 1, np.random.default_rng(7), -np.ones(1), np.ones(1), hidden_dims=(8,))
        b = init_sac(2, 1, np.random.default_rng(7), -np.ones(1), np.ones(1), hidden_dims=(8,))
        stats_a = sac_update_real(a, batch, np.random.default_rng(11))
        stats_b = sac_update_real(b, batch, np.random.default_rng(11))
        assert stats_a == stats_b
        assert np.array_equal(a.actor.values, b.actor.values)
        assert a.actor.is_finite() and all(c.is_finite() for c in a.critics)
        assert a.actor_opt.step_count == 1


class TestLogProbDensity:
    def test_one_dimensional_density_matches_samples(self):
        # Importance-Schätzung: E[1{a in Bin} / pi(a)] = Bin-Breite
        sac = init_sac(3, 1, np.random.default_rng(0), np.array([-2.0]), np.array([2.0]), hidden_dims=(8,))
        sac.actor = sac.actor.zeros_like()
        sac.actor.segment(f"b{sac.actor_spec.n_layers - 1}")[1] = -1.0
        n = 400_000
        sample = policy_sample(sac, np.zeros((n, 3)), np.random.default_rng(1))
        actions = sample.action[:, 0]
        inv_density = np.exp(-sample.log_prob)
        edges = np.linspace(-1.5, 1.5, 7)
        for lo, hi in zip(edges[:-1], edges[1:]):
            inside = (actions >= lo) & (actions < hi)
            estimate = float(np.sum(inv_density[inside]) / n)
            assert estimate == pytest.approx(hi - lo, rel=0.05)


class TestDescentOnFrozenBatch:
    SEEDS = range(10)

    def test_real_update_lowers_critic_loss(self):
        lowered = 0
        for seed in self.SEEDS:
            rng = np.random.default_rng(seed)
            sac = init_sac(3, 1, rng, -np.ones(1), np.ones(1), hidden_dims=(16,))
            batch = _batch(rng, 64, 3, 1)
            frozen = copy.deepcopy(sac)
            noise = make_rng(100 + seed).standard_normal((64, 1))
            sac_update_real(sac, batch, make_rng(100 + seed))
            before = critic_loss(frozen, batch, noise=noise)
            after = critic_loss(frozen, batch, noise=noise, critic_params=sac.critics)
            lowered += int(after < before)
        assert lowered >= 8

    def test_real_update_lowers_actor_loss(self):
        lowered = 0
        for seed in self.SEEDS:
            rng = np.random.default_rng(seed)
            sac = init_sac(3, 1, rng, -np.ones(1), np.ones(1), hidden_dims=(16,))
            batch = _batch(rng, 64, 3, 1)
            frozen = copy.deepcopy(sac)
            gen = make_rng(200 + seed)
            gen.standard_normal((64, 1))  # Critic-Rauschen
            noise = gen.standard_normal((64, 1))
            sac_update_real(sac, batch, make_rng(200 + seed))
            kwargs = dict(noise=noise, critic_params=sac.critics, alpha=frozen.alpha)
            before = actor_loss(frozen, batch.states, **kwargs)
            after = actor_loss(frozen, batch.states, actor_params=sac.actor, **kwargs)
            lowered += int(after < before)
        assert lowered >= 8
