"""Optimizer tests: GAE oracles, loss gradcheck, updater behavior, toy task."""

import math

import numpy as np
import pytest

import quadball.ppo as ppo
from quadball.nn import init_params, policy_value_batch
from quadball.ppo import (
    NonFiniteLoss,
    PpoConfig,
    PpoUpdater,
    compute_gae,
    gaussian_logp,
    loss_and_grads,
)


def series(rewards, values, dones, timeouts=None, timeout_values=None, bootstrap=None):
    r = np.asarray(rewards, dtype=float)
    kw = dict(
        rewards=r,
        values=np.asarray(values, dtype=float),
        dones=np.asarray(dones, dtype=bool),
        timeouts=np.zeros_like(r, dtype=bool) if timeouts is None else np.asarray(timeouts),
        timeout_values=np.zeros_like(r) if timeout_values is None else np.asarray(timeout_values, dtype=float),
        final_bootstrap=np.zeros(r.shape[0]) if bootstrap is None else np.asarray(bootstrap, dtype=float),
    )
    return kw


class TestGae:
    def test_single_step_terminal(self):
        cfg = PpoConfig()
        adv, tgt = compute_gae(cfg=cfg, **series([[1.0]], [[0.0]], [[True]]))
        assert adv[0, 0] == 1.0
        assert tgt[0, 0] == 1.0

    def test_two_step_full_lambda(self):
        cfg = PpoConfig(gae_lambda=1.0)
        adv, _ = compute_gae(cfg=cfg, **series([[1.0, 1.0]], [[0.0, 0.0]],
                                               [[False, True]]))
        assert math.isclose(adv[0, 1], 1.0, abs_tol=1e-12)
        assert math.isclose(adv[0, 0], 1.0 + cfg.gamma, abs_tol=1e-12)

    def test_timeout_bootstraps_recorded_value(self):
        cfg = PpoConfig()
        adv, _ = compute_gae(cfg=cfg, **series(
            [[1.0]], [[0.25]], [[True]], timeouts=[[True]], timeout_values=[[2.0]]))
        assert math.isclose(adv[0, 0], 1.0 + cfg.gamma * 2.0 - 0.25, abs_tol=1e-12)

    def test_horizon_cut_uses_final_bootstrap(self):
        cfg = PpoConfig()
        adv, _ = compute_gae(cfg=cfg, **series([[0.5]], [[1.0]], [[False]],
                                               bootstrap=[3.0]))
        assert math.isclose(adv[0, 0], 0.5 + cfg.gamma * 3.0 - 1.0, abs_tol=1e-12)

    def test_full_lambda_matches_monte_carlo(self):
        # With lambda = 1 the advantage is the discounted return minus the
        # value, computable directly by a forward pass over each segment.
        cfg = PpoConfig(gamma=0.97, gae_lambda=1.0)
        rng = np.random.default_rng(8)
        n_envs, steps = 3, 40
        rewards = rng.standard_normal((n_envs, steps))
        values = rng.standard_normal((n_envs, steps))
        dones = rng.uniform(size=(n_envs, steps)) < 0.15
        timeouts = dones & (rng.uniform(size=(n_envs, steps)) < 0.5)
        timeout_values = rng.standard_normal((n_envs, steps)) * timeouts
        bootstrap = rng.standard_normal(n_envs)

        adv, tgt = compute_gae(rewards, values, dones, timeouts, timeout_values,
                               bootstrap, cfg)
        returns = np.zeros_like(rewards)
        for e in range(n_envs):
            acc = bootstrap[e]
            for t in range(steps - 1, -1, -1):
                if dones[e, t]:
                    acc = timeout_values[e, t] if timeouts[e, t] else 0.0
                returns[e, t] = rewards[e, t] + cfg.gamma * acc
                acc = returns[e, t]
        np.testing.assert_allclose(adv, returns - values, atol=1e-9)
        np.testing.assert_allclose(tgt, returns, atol=1e-9)

    def test_rejects_timeout_without_done(self):
        with pytest.raises(ValueError):
            compute_gae(cfg=PpoConfig(), **series([[1.0]], [[0.0]], [[False]],
                                                  timeouts=[[True]]))


class TestLogp:
    def test_matches_per_dim_formula(self):
        rng = np.random.default_rng(4)
        a = rng.standard_normal((5, 3))
        mean = rng.standard_normal((5, 3))
        log_std = rng.uniform(-1, 0.5, 3)
        got = gaussian_logp(a, mean, log_std)
        for b in range(5):
            want = 0.0
            for j in range(3):
                sd = math.exp(log_std[j])
                want += -0.5 * ((a[b, j] - mean[b, j]) / sd) ** 2 \
                    - math.log(sd) - 0.5 * math.log(2 * math.pi)
            assert math.isclose(got[b], want, rel_tol=1e-12)

    def test_peak_at_mean(self):
        log_std = np.array([0.1, -0.3])
        mean = np.array([[0.5, -0.2]])
        peak = gaussian_logp(mean, mean, log_std)[0]
        assert peak == pytest.approx(-float(np.sum(log_std)) - math.log(2 * math.pi))


def toy_batch(params, rng, n=128, obs_dim=3, act_dim=2):
    obs = rng.standard_normal((n, obs_dim))
    mean, _ = policy_value_batch(params, obs)
    std = np.exp(params.log_std)
    actions = mean + std * rng.standard_normal((n, act_dim))
    # Offsets up to +-0.4 exercise both the clipped and unclipped branches.
    old_logp = gaussian_logp(actions, mean, params.log_std) + rng.uniform(-0.4, 0.4, n)
    adv = rng.standard_normal(n)
    targets = rng.standard_normal(n)
    return obs, actions, old_logp, adv, targets


class TestLossGradcheck:
    def test_all_parameters(self):
        # Central differences (h = 1e-5) over every entry of every array,
        # through the full clipped-surrogate-plus-value loss.
        cfg = PpoConfig()
        params = init_params(1, obs_dim=3, hidden=(2, 2), act_dim=2)
        rng = np.random.default_rng(2)
        obs, actions, old_logp, adv, targets = toy_batch(params, rng, n=16)
        _, grads, _ = loss_and_grads(params, obs, actions, old_logp, adv, targets, cfg)

        def loss():
            total, _, _ = loss_and_grads(params, obs, actions, old_logp, adv,
                                         targets, cfg)
            return total

        def numeric(a):
            g = np.zeros_like(a)
            it = np.nditer(a, flags=["multi_index"])
            h = 1e-5
            for _ in it:
                idx = it.multi_index
                old = a[idx]
                a[idx] = old + h
                fp = loss()
                a[idx] = old - h
                fm = loss()
                a[idx] = old
                g[idx] = (fp - fm) / (2 * h)
            return g

        checked = 0
        for i in range(3):
            for analytic, arr in (
                (grads["policy_w"][i], params.policy_w[i]),
                (grads["policy_b"][i], params.policy_b[i]),
                (grads["value_w"][i], params.value_w[i]),
                (grads["value_b"][i], params.value_b[i]),
            ):
                num = numeric(arr)
                err = np.abs(analytic - num) / np.maximum(np.abs(analytic) + np.abs(num), 1e-8)
                assert float(np.max(err)) < 1e-4
                checked += arr.size
        num = numeric(params.log_std)
        err = np.abs(grads["log_std"] - num) / np.maximum(
            np.abs(grads["log_std"]) + np.abs(num), 1e-8)
        assert float(np.max(err)) < 1e-4
        assert checked > 0

    def test_clip_branches_exercised(self):
        cfg = PpoConfig()
        params = init_params(1, obs_dim=3, hidden=(2, 2), act_dim=2)
        obs, actions, old_logp, adv, targets = toy_batch(
            params, np.random.default_rng(2), n=256)
        _, _, stats = loss_and_grads(params, obs, actions, old_logp, adv, targets, cfg)
        assert 0.0 < stats["clip_fraction"] < 1.0
        assert stats["approx_kl"] >= 0.0

    def test_non_finite_ratio_raises(self):
        cfg = PpoConfig()
        params = init_params(1, obs_dim=3, hidden=(2, 2), act_dim=2)
        obs, actions, old_logp, adv, targets = toy_batch(
            params, np.random.default_rng(3), n=8)
        old_logp = old_logp.copy()
        old_logp[2] = -np.inf
        with pytest.raises(NonFiniteLoss):
            loss_and_grads(params, obs, actions, old_logp, adv, targets, cfg)


class TestUpdater:
    def batch(self, params, seed, n=96):
        return toy_batch(params, np.random.default_rng(seed), n=n)

    def test_zero_learning_rate_is_noop(self):
        params = init_params(5, obs_dim=3, hidden=(4, 4), act_dim=2)
        before = [a.tobytes() for _, a in params.flat_arrays()]
        upd = PpoUpdater(params, PpoConfig(learning_rate=0.0, minibatch_size=32), seed=0)
        upd.update(*self.batch(params, 7))
        after = [a.tobytes() for _, a in params.flat_arrays()]
        assert before == after

    def test_update_deterministic(self):
        results = []
        for _ in range(2):
            params = init_params(5, obs_dim=3, hidden=(4, 4), act_dim=2)
            upd = PpoUpdater(params, PpoConfig(learning_rate=0.01, minibatch_size=32),
                             seed=3)
            stats = upd.update(*self.batch(params, 7))
            results.append(([a.tobytes() for _, a in params.flat_arrays()], stats))
        assert results[0][0] == results[1][0]
        assert results[0][1] == results[1][1]

    def test_update_moves_params(self):
        params = init_params(5, obs_dim=3, hidden=(4, 4), act_dim=2)
        before = [a.copy() for _, a in params.flat_arrays()]
        upd = PpoUpdater(params, PpoConfig(learning_rate=0.01, minibatch_size=32), seed=3)
        stats = upd.update(*self.batch(params, 7))
        moved = any(not np.array_equal(a, b)
                    for (_, a), b in zip(params.flat_arrays(), before))
        assert moved
        assert stats["minibatches"] == PpoConfig().epochs * 3  # 96 / 32
        assert stats["skipped_minibatches"] == 0

    def test_remainder_minibatch_kept(self):
        params = init_params(5, obs_dim=3, hidden=(4, 4), act_dim=2)
        upd = PpoUpdater(params, PpoConfig(learning_rate=0.01, minibatch_size=40,
                                           epochs=1), seed=3)
        stats = upd.update(*self.batch(params, 7, n=96))  # 40 + 40 + 16
        assert stats["minibatches"] == 3

    def test_skips_minibatch_on_poisoned_gradient(self, monkeypatch):
        real = ppo.loss_and_grads
        calls = {"n": 0}

        def poisoned(*args, **kw):
            total, grads, stats = real(*args, **kw)
            calls["n"] += 1
            if calls["n"] == 1:
                grads["log_std"] = grads["log_std"] + np.nan
            return total, grads, stats

        monkeypatch.setattr(ppo, "loss_and_grads", poisoned)
        params = init_params(5, obs_dim=3, hidden=(4, 4), act_dim=2)
        upd = PpoUpdater(params, PpoConfig(learning_rate=0.01, minibatch_size=48,
                                           epochs=1), seed=3)
        stats = upd.update(*self.batch(params, 7, n=96))
        assert stats["skipped_minibatches"] == 1
        assert stats["minibatches"] == 1


class TestToyTask:
    """One-step episodes, constant observation, reward -(a - 0.5)^2."""

    def run(self, seed, updates=50, batch=256):
        # 0.02 sits at an instability edge: seed 0 converges and then collapses
        # once the policy std shrinks below ~0.01; 0.01 is robust across seeds.
        cfg = PpoConfig(learning_rate=0.01, minibatch_size=64)
        params = init_params(seed, obs_dim=1, hidden=(8, 8), act_dim=1)
        upd = PpoUpdater(params, cfg, seed=seed + 1)
        rng = np.random.default_rng(seed + 2)
        obs = np.ones((batch, 1))

        def collect():
            mean, value = policy_value_batch(params, obs)
            a = mean + np.exp(params.log_std) * rng.standard_normal((batch, 1))
            logp = gaussian_logp(a, mean, params.log_std)
            r = -((a[:, 0] - 0.5) ** 2)
            return a, logp, value, r

        first = None
        for _ in range(updates):
            a, logp, value, r = collect()
            if first is None:
                first = float(np.mean(r))
            adv, tgt = compute_gae(
                r[:, None], value[:, None], np.ones((batch, 1), dtype=bool),
                np.zeros((batch, 1), dtype=bool), np.zeros((batch, 1)),
                np.zeros(batch), cfg)
            upd.update(obs, a, logp, adv.ravel(), tgt.ravel())
        _, _, _, r = collect()
        return first, float(np.mean(r))

    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_gap_closes_by_half(self, seed):
        first, last = self.run(seed)
        assert first < 0.0
        assert last >= 0.5 * first  # at least half the gap to zero closed
