"""Parallel rollout collection from a pool of independent environments.

Work is partitioned by whole environments: worker k steps env k from start to
finish of the batch, writing into preallocated row k of every output array.
Workers share only the immutable policy snapshot, and every random draw comes
from a stream keyed by (master seed, env index, episode index, purpose), so
any worker count from 1 to the pool size produces bit-identical batches.

Episodes run across batch boundaries: an env that is mid-episode when the
horizon ends is left alive and its value bootstrap recorded; the next collect
call continues it.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .curriculum import CurriculumState
from .env import BallRotationEnv, ResetFailed, Verdict
from .nn import MlpParams, forward
from .ppo import gaussian_logp

ACTION_STREAM = 4  # env stream purpose for exploration noise
MAX_RESET_ATTEMPTS = 50


@dataclass
class RolloutBatch:
    """One fixed-horizon batch, env-major: every series is (envs, steps, ...)."""

    obs: np.ndarray
    actions: np.ndarray
    logps: np.ndarray
    values: np.ndarray
    rewards: np.ndarray
    reward_terms: np.ndarray
    dones: np.ndarray
    timeouts: np.ndarray
    timeout_values: np.ndarray
    final_bootstrap: np.ndarray
    env_count: int
    steps_per_env: int
    episode_returns: list = field(default_factory=list)
    episode_lengths: list = field(default_factory=list)
    verdict_counts: dict = field(default_factory=dict)
    seed_ledger: list = field(default_factory=list)
    reset_failures: list = field(default_factory=list)

    def validate(self) -> None:
        e, t = self.env_count, self.steps_per_env
        if self.obs.shape != (e, t, 130):
            raise ValueError(f"obs must be ({e}, {t}, 130), got {self.obs.shape}")
        for name in ("logps", "values", "rewards", "dones", "timeouts", "timeout_values"):
            if getattr(self, name).shape != (e, t):
                raise ValueError(f"{name} must be ({e}, {t})")
        if self.actions.shape != (e, t, 12) or self.reward_terms.shape != (e, t, 5):
            raise ValueError("actions must be (e, t, 12) and reward_terms (e, t, 5)")
        if self.final_bootstrap.shape != (e,):
            raise ValueError("final_bootstrap must be (envs,)")
        if not np.all(np.isfinite(self.obs)):
            raise ValueError("batch contains non-finite observations")
        if np.any(self.timeouts & ~self.dones):
            raise ValueError("timeout flags must imply done flags")

    def flat(self) -> tuple:
        """(obs, actions, logps) flattened to (envs*steps, ...) for updates."""
        n = self.env_count * self.steps_per_env
        return (self.obs.reshape(n, -1), self.actions.reshape(n, -1),
                self.logps.reshape(n))


def resolve_workers(requested: int | None, env_count: int) -> int:
    """Env var > explicit argument > all cores, clamped to the pool size."""
    env_override = os.environ.get("QUADBALL_WORKERS")
    if env_override:
        requested = int(env_override)
    if requested is None:
        requested = os.cpu_count() or 1
    return max(1, min(int(requested), env_count))


def reset_with_retry(env: BallRotationEnv, curriculum: CurriculumState,
                     failures: list) -> np.ndarray:
    """Reset, re-rolling the env's substream on failure.

    Every attempt advances the env's episode index, so a retry is already
    re-seeded. Failures are recorded as (env_index, episode_index, reason).
    """
    for attempt in range(MAX_RESET_ATTEMPTS):
        try:
            return env.reset(curriculum)
        except ResetFailed as e:
            failures.append((env.env_index, env.episode_index, str(e)))
    raise RuntimeError(
        f"env {env.env_index} failed to reset {MAX_RESET_ATTEMPTS} times in a row")


def _run_env(env: BallRotationEnv, row: int, batch: RolloutBatch,
             params: MlpParams, steps: int, curriculum: CurriculumState,
             failures: list, stats: dict) -> None:
    log_std = params.log_std
    std = np.exp(log_std)
    if env.done or getattr(env, "_needs_reset", False):
        obs = reset_with_retry(env, curriculum, failures)
        env._action_rng = env.stream(ACTION_STREAM)
        env._needs_reset = False
        stats["ep_return"] = 0.0
        stats["ep_len"] = 0
    else:
        obs = env.observation
        if not hasattr(env, "_action_rng"):
            env._action_rng = env.stream(ACTION_STREAM)

    for t in range(steps):
        mean, value = forward(params, obs)
        action = mean + std * env._action_rng.standard_normal(12)
        logp = float(gaussian_logp(action[None], mean[None], log_std)[0])

        next_obs, reward, verdict = env.step(action)

        batch.obs[row, t] = obs
        batch.actions[row, t] = action
        batch.logps[row, t] = logp
        batch.values[row, t] = value
        batch.rewards[row, t] = reward.total
        batch.reward_terms[row, t] = (reward.r_q, reward.r_v, reward.r_tau,
                                      reward.r_slip, reward.r_collide)
        stats["ep_return"] += reward.total
        stats["ep_len"] += 1

        terminal = verdict is not Verdict.NONE
        timed_out = (not terminal) and env.step_count >= env.max_episode_steps
        if terminal or timed_out:
            batch.dones[row, t] = True
            if timed_out:
                batch.timeouts[row, t] = True
                _, next_value = forward(params, next_obs)
                batch.timeout_values[row, t] = next_value
            stats["episodes"].append(
                (stats["ep_return"], stats["ep_len"],
                 verdict.value if terminal else "time_limit"))
            stats["ep_return"] = 0.0
            stats["ep_len"] = 0
            if t + 1 < steps:
                obs = reset_with_retry(env, curriculum, failures)
                env._action_rng = env.stream(ACTION_STREAM)
            else:
                env._needs_reset = True
        else:
            obs = next_obs

    if env.done or getattr(env, "_needs_reset", False):
        batch.final_bootstrap[row] = 0.0
    else:
        _, bootstrap = forward(params, env.observation)
        batch.final_bootstrap[row] = bootstrap


def collect(params: MlpParams, envs: list, steps_per_env: int,
            curriculum: CurriculumState, workers: int | None = None) -> RolloutBatch:
    """Collect envs x steps transitions with the frozen policy snapshot."""
    if not envs:
        raise ValueError("env pool is empty")
    e, t = len(envs), int(steps_per_env)
    batch = RolloutBatch(
        obs=np.zeros((e, t, 130)),
        actions=np.zeros((e, t, 12)),
        logps=np.zeros((e, t)),
        values=np.zeros((e, t)),
        rewards=np.zeros((e, t)),
        reward_terms=np.zeros((e, t, 5)),
        dones=np.zeros((e, t), dtype=bool),
        timeouts=np.zeros((e, t), dtype=bool),
        timeout_values=np.zeros((e, t)),
        final_bootstrap=np.zeros(e),
        env_count=e,
        steps_per_env=t,
    )
    per_env_failures = [[] for _ in range(e)]
    per_env_stats = [
        {"ep_return": getattr(env, "_carry_return", 0.0),
         "ep_len": getattr(env, "_carry_len", 0),
         "episodes": []}
        for env in envs
    ]

    n_workers = resolve_workers(workers, e)
    if n_workers == 1:
        for i, env in enumerate(envs):
            _run_env(env, i, batch, params, t, curriculum,
                     per_env_failures[i], per_env_stats[i])
    else:
        with ThreadPoolExecutor(max_workers=n_workers) as pool:
            futures = [
                pool.submit(_run_env, env, i, batch, params, t, curriculum,
                            per_env_failures[i], per_env_stats[i])
                for i, env in enumerate(envs)
            ]
            for f in futures:
                f.result()

    # Merge per-env results in env order so worker scheduling cannot matter.
    for i, env in enumerate(envs):
        env._carry_return = per_env_stats[i]["ep_return"]
        env._carry_len = per_env_stats[i]["ep_len"]
        for ret, length, verdict in per_env_stats[i]["episodes"]:
            batch.episode_returns.append(ret)
            batch.episode_lengths.append(length)
            batch.verdict_counts[verdict] = batch.verdict_counts.get(verdict, 0) + 1
        batch.reset_failures.extend(per_env_failures[i])
        batch.seed_ledger.append((env.env_index, env.episode_index))
    batch.validate()
    return batch
