"""Clipped-surrogate policy optimization on the two-head MLP.

Everything is analytic: the loss gradient is derived by hand and checked
against central differences in the tests. Advantage estimates come out of
compute_gae raw; the updater normalizes them once per batch before the epoch
loop. Value targets are advantages plus the values recorded at collection
time.

Episode boundaries inside a batch cut the lambda chain. A step that ended by
running out of time bootstraps the recorded value of the next observation; a
step that ended in a real terminal state bootstraps zero.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .nn import MlpParams, NonFiniteGradient, check_finite_grads, net_backward, net_forward

_LOG_2PI = math.log(2.0 * math.pi)


class NonFiniteLoss(RuntimeError):
    """Loss or probability ratio became NaN or infinite."""


@dataclass(frozen=True)
class PpoConfig:
    gamma: float = 0.998
    gae_lambda: float = 0.95
    clip_eps: float = 0.2
    learning_rate: float = 0.001
    epochs: int = 4
    minibatch_size: int = 4096
    value_weight: float = 0.5
    grad_clip_norm: float = 1.0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8

    def validate(self) -> None:
        if not 0.0 < self.gamma <= 1.0:
            raise ValueError("gamma must lie in (0, 1]")
        if not 0.0 <= self.gae_lambda <= 1.0:
            raise ValueError("gae_lambda must lie in [0, 1]")
        if self.clip_eps <= 0.0:
            raise ValueError("clip_eps must be positive")
        if self.learning_rate < 0.0:
            raise ValueError("learning_rate must be non-negative")
        if self.epochs < 1 or self.minibatch_size < 1:
            raise ValueError("epochs and minibatch_size must be at least 1")
        if self.value_weight < 0.0 or self.grad_clip_norm <= 0.0:
            raise ValueError("value_weight must be >= 0 and grad_clip_norm > 0")


def gaussian_logp(actions: np.ndarray, mean: np.ndarray, log_std: np.ndarray) -> np.ndarray:
    """Log density of a diagonal Gaussian, summed over action dimensions."""
    z = (actions - mean) / np.exp(log_std)
    return np.sum(-0.5 * z * z - log_std, axis=-1) - 0.5 * _LOG_2PI * actions.shape[-1]


def compute_gae(rewards, values, dones, timeouts, timeout_values, final_bootstrap,
                cfg: PpoConfig) -> tuple:
    """Generalized advantage estimates, returned raw (not normalized).

    All series are (n_envs, steps); final_bootstrap is (n_envs,) and holds
    the value of the observation after the last step for segments that were
    cut mid-episode by the rollout horizon. Returns (advantages, targets)
    where targets = advantages + values.
    """
    rewards = np.asarray(rewards, dtype=float)
    values = np.asarray(values, dtype=float)
    dones = np.asarray(dones, dtype=bool)
    timeouts = np.asarray(timeouts, dtype=bool)
    timeout_values = np.asarray(timeout_values, dtype=float)
    final_bootstrap = np.asarray(final_bootstrap, dtype=float)
    if rewards.ndim != 2:
        raise ValueError("expected (n_envs, steps) series")
    for a in (values, dones, timeouts, timeout_values):
        if a.shape != rewards.shape:
            raise ValueError("all series must share the rewards shape")
    if final_bootstrap.shape != (rewards.shape[0],):
        raise ValueError("final_bootstrap must be (n_envs,)")
    if np.any(timeouts & ~dones):
        raise ValueError("every timeout step must also be marked done")

    n_envs, steps = rewards.shape
    advantages = np.zeros_like(rewards)
    next_value = final_bootstrap.copy()
    running = np.zeros(n_envs)
    for t in range(steps - 1, -1, -1):
        done = dones[:, t]
        # Bootstrap: next value inside a live segment, recorded value at a
        # timeout, zero at a true terminal state.
        bootstrap = np.where(done, np.where(timeouts[:, t], timeout_values[:, t], 0.0),
                             next_value)
        delta = rewards[:, t] + cfg.gamma * bootstrap - values[:, t]
        running = delta + cfg.gamma * cfg.gae_lambda * np.where(done, 0.0, running)
        advantages[:, t] = running
        next_value = values[:, t]
    return advantages, advantages + values


def loss_and_grads(params: MlpParams, obs, actions, old_logp, advantages,
                   value_targets, cfg: PpoConfig) -> tuple:
    """(total loss, gradient tree, stats) for one minibatch.

    Advantages must already be normalized. Gradients are exact derivatives
    of: -mean(min(r*A, clip(r)*A)) + value_weight * mean((v - target)^2).
    """
    obs = np.asarray(obs, dtype=float)
    n = obs.shape[0]
    mean, acts_p = net_forward(params.policy_w, params.policy_b, obs)
    value_out, acts_v = net_forward(params.value_w, params.value_b, obs)
    v = value_out[:, 0]

    std = np.exp(params.log_std)
    z = (actions - mean) / std
    logp = np.sum(-0.5 * z * z - params.log_std, axis=1) - 0.5 * _LOG_2PI * actions.shape[1]
    ratio = np.exp(logp - old_logp)
    if not np.all(np.isfinite(ratio)):
        raise NonFiniteLoss("non-finite probability ratio")

    surr1 = ratio * advantages
    surr2 = np.clip(ratio, 1.0 - cfg.clip_eps, 1.0 + cfg.clip_eps) * advantages
    policy_loss = -float(np.mean(np.minimum(surr1, surr2)))
    value_err = v - value_targets
    value_loss = float(np.mean(value_err * value_err))
    total = policy_loss + cfg.value_weight * value_loss
    if not math.isfinite(total):
        raise NonFiniteLoss("non-finite loss")

    # Gradient flows through the unclipped branch; ties take it as well.
    mask = (surr1 <= surr2).astype(float)
    dlogp = -(mask * ratio * advantages) / n
    grad_mean = dlogp[:, None] * (z / std)
    grad_log_std = np.sum(dlogp[:, None] * (z * z - 1.0), axis=0)
    gpw, gpb = net_backward(params.policy_w, acts_p, grad_mean)
    dv = (cfg.value_weight * 2.0 / n) * value_err
    gvw, gvb = net_backward(params.value_w, acts_v, dv[:, None])

    grads = {"policy_w": gpw, "policy_b": gpb, "value_w": gvw, "value_b": gvb,
             "log_std": grad_log_std}
    with np.errstate(divide="ignore", invalid="ignore"):
        k3 = (ratio - 1.0) - np.log(ratio)
    stats = {
        "policy_loss": policy_loss,
        "value_loss": value_loss,
        "loss": total,
        "approx_kl": float(np.mean(k3)),
        "clip_fraction": float(np.mean(np.abs(ratio - 1.0) > cfg.clip_eps)),
    }
    return total, grads, stats


def _walk(params: MlpParams, grads: dict):
    for i in range(len(params.policy_w)):
        yield f"policy_w{i}", params.policy_w[i], grads["policy_w"][i]
        yield f"policy_b{i}", params.policy_b[i], grads["policy_b"][i]
    for i in range(len(params.value_w)):
        yield f"value_w{i}", params.value_w[i], grads["value_w"][i]
        yield f"value_b{i}", params.value_b[i], grads["value_b"][i]
    yield "log_std", params.log_std, grads["log_std"]


def global_grad_norm(params: MlpParams, grads: dict) -> float:
    total = 0.0
    for _, _, g in _walk(params, grads):
        total += float(np.sum(g * g))
    return math.sqrt(total)


class PpoUpdater:
    """Owns the optimizer state; params are updated in place.

    One update() call runs cfg.epochs passes of shuffled minibatches over the
    batch (a short final minibatch is kept). Minibatches whose gradients come
    out non-finite are skipped and counted; a non-finite loss propagates to
    the caller.
    """

    def __init__(self, params: MlpParams, cfg: PpoConfig, seed: int = 0):
        cfg.validate()
        params.validate()
        self.params = params
        self.cfg = cfg
        self._rng = np.random.default_rng(seed)
        self._m = {name: np.zeros_like(p) for name, p in params.flat_arrays()}
        self._v = {name: np.zeros_like(p) for name, p in params.flat_arrays()}
        self._t = 0

    def _apply(self, grads: dict) -> None:
        cfg = self.cfg
        self._t += 1
        c1 = 1.0 - cfg.adam_beta1 ** self._t
        c2 = 1.0 - cfg.adam_beta2 ** self._t
        for name, p, g in _walk(self.params, grads):
            m = self._m[name]
            v = self._v[name]
            m *= cfg.adam_beta1
            m += (1.0 - cfg.adam_beta1) * g
            v *= cfg.adam_beta2
            v += (1.0 - cfg.adam_beta2) * (g * g)
            p -= cfg.learning_rate * (m / c1) / (np.sqrt(v / c2) + cfg.adam_eps)

    def update(self, obs, actions, old_logp, advantages, value_targets) -> dict:
        """One optimization phase over a collected batch; returns mean stats."""
        cfg = self.cfg
        obs = np.asarray(obs, dtype=float)
        n = obs.shape[0]
        adv = np.asarray(advantages, dtype=float)
        adv = (adv - adv.mean()) / (adv.std() + 1e-8)

        totals = {"policy_loss": 0.0, "value_loss": 0.0, "loss": 0.0,
                  "approx_kl": 0.0, "clip_fraction": 0.0, "grad_norm": 0.0}
        applied = 0
        skipped = 0
        for _ in range(cfg.epochs):
            order = self._rng.permutation(n)
            for lo in range(0, n, cfg.minibatch_size):
                idx = order[lo:lo + cfg.minibatch_size]
                _, grads, stats = loss_and_grads(
                    self.params, obs[idx], actions[idx], old_logp[idx],
                    adv[idx], value_targets[idx], cfg)
                try:
                    check_finite_grads(grads)
                except NonFiniteGradient:
                    skipped += 1
                    continue
                norm = global_grad_norm(self.params, grads)
                if norm > cfg.grad_clip_norm:
                    scale = cfg.grad_clip_norm / norm
                    for _, _, g in _walk(self.params, grads):
                        g *= scale
                self._apply(grads)
                applied += 1
                for key in stats:
                    totals[key] += stats[key]
                totals["grad_norm"] += norm
        out = {key: (val / applied if applied else float("nan"))
               for key, val in totals.items()}
        out["minibatches"] = applied
        out["skipped_minibatches"] = skipped
        return out

