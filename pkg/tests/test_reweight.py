"""Unit Tests für Gewichtsnetz, virtuelles Update und Meta-Gradient."""

import numpy as np
import pytest

from src.core.dynamics import TransitionSet, init_ensemble, rollout_batch
from src.core.envs import env_reward, get_env_spec
from src.core.errors import ConfigError
from src.core.gradcheck import build_tiny_meta_problem
from src.core.nn import finite_diff_check
from src.core.replay import TransitionBatch
from src.core.reweight import (
    FeatureNormalizer,
    MetaConfig,
    build_feature_batch,
    build_features,
    feature_dim,
    flatten_rollouts,
    init_weight_net,
    make_explore_policy,
    meta_step,
    normalize,
    reweighted_policy_value_update,
    virtual_update,
    weight_function_update,
    weight_rollout,
    weight_rollouts,
)
from src.core.sac import ImaginaryNoise, init_sac, sac_update_real


def _setup(seed: int = 0, n: int = 4, horizon: int = 3, n_samples: int = 2):
    rng = np.random.default_rng(seed)
    spec = get_env_spec("pendulum")
    ens = init_ensemble(3, 1, 2, (6,), rng)
    sac = init_sac(3, 1, rng, spec.low, spec.high, hidden_dims=(6,))
    starts = rng.standard_normal((n, 3))
    actions = rng.uniform(-2, 2, (n, horizon, 1))
    rollouts = rollout_batch(
        ens, starts, actions, horizon, n_samples, lambda s, a, sn: env_reward(spec, s, a, sn), rng
    )
    return rng, sac, rollouts


class TestFeatures:
    def test_population_std(self):
        ts = TransitionSet(
            trunk_state=np.array([1.0, 2.0]),
            action=np.array([0.5]),
            rewards=np.array([0.0, 2.0]),
            next_states=np.array([[0.0, 1.0], [2.0, 1.0]]),
            chosen_next=0,
            depth=0,
        )
        feats = build_features(ts)
        assert feats.shape == (feature_dim(2, 1),)
        assert feats.tolist() == [1.0, 2.0, 0.5, 1.0, 1.0, 0.0]

    def test_batch_matches_single(self):
        _, _, rollouts = _setup()
        batch = build_feature_batch(rollouts)
        assert batch.shape == (4, 3, feature_dim(3, 1))
        assert batch[2, 1] == pytest.approx(build_features(rollouts.transition_set(2, 1)))

    def test_normalizer_requires_fit(self):
        norm = FeatureNormalizer(3)
        with pytest.raises(ValueError):
            normalize(norm, np.zeros(3))

    def test_normalizer_first_batch_exact(self):
        norm = FeatureNormalizer(2)
        data = np.random.default_rng(0).standard_normal((50, 2))
        norm.update(data)
        z = normalize(norm, data)
        assert z.mean(axis=0) == pytest.approx([0.0, 0.0], abs=1e-12)
        assert z.std(axis=0) == pytest.approx([1.0, 1.0])


class TestWeightNet:
    def test_fresh_output_is_sigmoid_three(self):
        _, _, rollouts = _setup()
        wnet = init_weight_net(feature_dim(3, 1), np.random.default_rng(1))
        norm = FeatureNormalizer(feature_dim(3, 1))
        norm.update(build_feature_batch(rollouts))
        weights = weight_rollouts(wnet, norm, rollouts)
        assert weights.shape == (4, 3)
        assert np.all(np.abs(weights - 0.952574) < 1e-6)

    def test_causal_weights(self):
        _, _, rollouts = _setup()
        rng = np.random.default_rng(2)
        wnet = init_weight_net(feature_dim(3, 1), rng, hidden_dim=4)
        wnet.params.segment("head_w")[...] = rng.standard_normal((1, 4))
        norm = FeatureNormalizer(feature_dim(3, 1))
        norm.update(build_feature_batch(rollouts))
        full = weight_rollout(wnet, norm, rollouts.rollout(0))
        prefix = weight_rollout(wnet, norm, rollouts.rollout(0)[:2])
        assert full[:2] == pytest.approx(prefix)
        assert full == pytest.approx(weight_rollouts(wnet, norm, rollouts)[0])

    def test_skips_non_finite_gradient(self):
        wnet = init_weight_net(4, np.random.default_rng(0), hidden_dim=2)
        before = wnet.params.values.copy()
        grad = wnet.params.with_values(np.full(wnet.params.size, np.nan))
        assert weight_function_update(wnet, grad) is False
        assert np.array_equal(wnet.params.values, before)


class TestVirtualUpdate:
    def setup_method(self):
        self.rng, self.sac, rollouts = _setup()
        self.imag = flatten_rollouts(rollouts)
        self.noise = ImaginaryNoise.draw(self.rng, self.imag.n_transitions, self.imag.n_sets, 1)

    def test_flatten_layout(self):
        assert self.imag.n_sets == 12
        assert self.imag.n_transitions == 12 * 4
        assert self.imag.set_index[:5].tolist() == [0, 0, 0, 0, 1]

    def test_zero_weights_leave_parameters(self):
        vu = virtual_update(self.sac, self.imag, np.zeros(12), 0.1, self.noise)
        assert np.array_equal(vu.actor.values, self.sac.actor.values)
        for new, old in zip(vu.critics, self.sac.critics):
            assert np.array_equal(new.values, old.values)

    def test_weight_scaling_equivalence(self):
        w = self.rng.uniform(0.1, 1.0, 12)
        a = virtual_update(self.sac, self.imag, 2.0 * w, 0.05, self.noise)
        b = virtual_update(self.sac, self.imag, w, 0.1, self.noise)
        assert a.actor.values == pytest.approx(b.actor.values, rel=1e-12, abs=1e-14)
        assert a.critics[0].values == pytest.approx(b.critics[0].values, rel=1e-12, abs=1e-14)

    def test_sac_state_untouched(self):
        before = self.sac.actor.values.copy()
        virtual_update(self.sac, self.imag, np.ones(12), 0.1, self.noise)
        assert np.array_equal(self.sac.actor.values, before)

    def test_wrong_weight_count(self):
        with pytest.raises(ConfigError):
            virtual_update(self.sac, self.imag, np.ones(5), 0.1, self.noise)


class TestMetaGradient:
    def test_matches_finite_differences(self):
        problem = build_tiny_meta_problem(np.random.default_rng(3))
        _, grad = problem.gradient()
        report = finite_diff_check(problem.objective, problem.wnet.params, grad, tolerance=1e-4, step=1e-4)
        assert report.passed, str(report)

    def test_weight_update_lowers_frozen_objective(self):
        lowered = 0
        for seed in range(10):
            problem = build_tiny_meta_problem(np.random.default_rng(seed))
            before, grad = problem.gradient()
            assert weight_function_update(problem.wnet, grad)
            lowered += int(problem.objective(problem.wnet.params) < before)
        assert lowered >= 8

    def test_meta_step_changes_only_weight_net(self):
        rng, sac, rollouts = _setup(seed=4)
        wnet = init_weight_net(feature_dim(3, 1), rng, hidden_dim=4, lr=1e-2)
        norm = FeatureNormalizer(feature_dim(3, 1))
        s = rng.standard_normal((8, 3))
        real = TransitionBatch(s, rng.uniform(-2, 2, (8, 1)), rng.standard_normal(8), s + 0.1)
        actor_before = sac.actor.values.copy()
        params_before = wnet.params.values.copy()
        result = meta_step(sac, wnet, norm, rollouts, real, MetaConfig(mu=0.01, horizon=3), rng)
        assert result.applied
        assert np.isfinite(result.meta_loss)
        assert np.array_equal(sac.actor.values, actor_before)
        assert not np.array_equal(wnet.params.values, params_before)
        assert norm.fitted


class TestReweightedUpdate:
    def test_zero_weights_keep_parameters(self):
        rng, sac, rollouts = _setup(seed=5)
        imag = flatten_rollouts(rollouts)
        actor, critics = sac.actor.values.copy(), [c.values.copy() for c in sac.critics]
        reweighted_policy_value_update(sac, imag, np.zeros(imag.n_sets), 3, 8, rng)
        assert np.array_equal(sac.actor.values, actor)
        for c, before in zip(sac.critics, critics):
            assert np.array_equal(c.values, before)

    def test_zero_weights_keep_parameters_after_real_update(self):
        rng, sac, rollouts = _setup(seed=8)
        s = rng.standard_normal((16, 3))
        real = TransitionBatch(s, rng.uniform(-2, 2, (16, 1)), rng.standard_normal(16), s + 0.1)
        sac_update_real(sac, real, rng)
        assert np.any(sac.actor_opt.first_moment != 0.0)
        imag = flatten_rollouts(rollouts)
        actor, critics = sac.actor.values.copy(), [c.values.copy() for c in sac.critics]
        reweighted_policy_value_update(sac, imag, np.zeros(imag.n_sets), 3, 8, rng)
        assert np.array_equal(sac.actor.values, actor)
        for c, before in zip(sac.critics, critics):
            assert np.array_equal(c.values, before)

    def test_unweighted_moves_parameters(self):
        rng, sac, rollouts = _setup(seed=6)
        imag = flatten_rollouts(rollouts)
        actor = sac.actor.values.copy()
        stats = reweighted_policy_value_update(sac, imag, None, 2, 8, rng)
        assert not np.array_equal(sac.actor.values, actor)
        assert np.isfinite(stats.critic_loss)
        assert sac.critic_opts[0].step_count == 2

    def test_explore_policy(self):
        rng, sac, _ = _setup(seed=7)
        policy = make_explore_policy(sac, 10.0)
        actions = policy(rng.standard_normal((5, 3)), rng)
        assert actions.shape == (5, 1)
        assert np.all(np.abs(actions) <= 2.0)
