"""Command-line application: configure, train, evaluate, inspect.

Exit codes: 0 success, 2 configuration or schema error (bad YAML keys,
corrupt checkpoint, shape mismatch), 3 I/O error, 4 training divergence
(non-finite loss on DIVERGENCE_LIMIT consecutive iterations).

All run artifacts embed the config digest: metrics and trace files carry it
in a leading comment line, checkpoints and summaries in their headers. The
metrics file holds no wall-clock data (so reruns are byte-identical); timing
goes to a separate timing.csv.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import math
import sys
import time
from pathlib import Path

import numpy as np
import yaml

from .curriculum import AXIS_VECTORS, CurriculumSchedule, state_at
from .env import BallRotationEnv, RewardCoefficients, TerminationConfig, Verdict, is_foot_ball
from .nn import (
    CorruptCheckpoint,
    init_params,
    forward,
    load_checkpoint,
    save_checkpoint,
)
from .physics import CONTROL_DT, PhysicsConfig, layout
from .ppo import NonFiniteLoss, PpoConfig, PpoUpdater, compute_gae
from .randomize import DisturbanceConfig, RandomizationConfig
from .rollout import collect, reset_with_retry
from .rotation import AngularVelocityCommand, quat_angle, quat_compose, quat_inverse

SCHEMA = "quadball/1"
EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_DIVERGED = 4
DIVERGENCE_LIMIT = 5

METRICS_COLUMNS = (
    "iteration", "mean_reward", "mean_r_q", "mean_r_v", "mean_r_tau",
    "mean_r_slip", "mean_r_collide", "mean_episode_length", "clip_fraction",
    "approx_kl", "curriculum_factor", "target_speed_deg", "update_period",
)


class ConfigError(ValueError):
    """Configuration file or checkpoint schema problem (exit code 2)."""


_SECTIONS = {
    "physics": PhysicsConfig,
    "reward": RewardCoefficients,
    "termination": TerminationConfig,
    "randomization": RandomizationConfig,
    "disturbance": DisturbanceConfig,
    "curriculum": CurriculumSchedule,
    "ppo": PpoConfig,
}


def _tuplify(value):
    if isinstance(value, list):
        return tuple(_tuplify(v) for v in value)
    return value


def _listify(value):
    if isinstance(value, tuple):
        return [_listify(v) for v in value]
    if dataclasses.is_dataclass(value):
        return {f.name: _listify(getattr(value, f.name))
                for f in dataclasses.fields(value) if f.init}
    return value


def _build_section(cls, data, where: str):
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"section '{where}' must be a mapping")
    valid = {f.name for f in dataclasses.fields(cls) if f.init}
    unknown = sorted(set(data) - valid)
    if unknown:
        raise ConfigError(f"unknown keys in '{where}': {', '.join(unknown)}")
    try:
        obj = cls(**{k: _tuplify(v) for k, v in data.items()})
        if hasattr(obj, "validate"):
            obj.validate()
    except (TypeError, ValueError) as e:
        raise ConfigError(f"invalid '{where}' section: {e}") from e
    return obj


@dataclasses.dataclass
class RunConfig:
    """Everything one training or evaluation run depends on."""

    master_seed: int = 0
    env_count: int = 64
    steps_per_env: int = 100
    iterations: int = 500
    checkpoint_interval: int = 0  # 0: checkpoint only at the end
    workers: int | None = None
    max_episode_steps: int = 1000
    backend: str = "auto"
    physics: PhysicsConfig = dataclasses.field(default_factory=PhysicsConfig)
    reward: RewardCoefficients = dataclasses.field(default_factory=RewardCoefficients)
    termination: TerminationConfig = dataclasses.field(default_factory=TerminationConfig)
    randomization: RandomizationConfig = dataclasses.field(default_factory=RandomizationConfig)
    disturbance: DisturbanceConfig = dataclasses.field(default_factory=DisturbanceConfig)
    curriculum: CurriculumSchedule = dataclasses.field(default_factory=CurriculumSchedule)
    ppo: PpoConfig = dataclasses.field(default_factory=PpoConfig)

    # The output directory is a CLI argument, not config: identical runs must
    # produce identical digests and checkpoint bytes wherever they land.
    _SCALARS = ("master_seed", "env_count", "steps_per_env", "iterations",
                "checkpoint_interval", "workers", "max_episode_steps", "backend")

    def validate(self) -> None:
        if self.env_count < 1 or self.steps_per_env < 1 or self.iterations < 0:
            raise ConfigError("env_count and steps_per_env must be >= 1, iterations >= 0")
        if self.checkpoint_interval < 0 or self.max_episode_steps < 1:
            raise ConfigError("checkpoint_interval must be >= 0, max_episode_steps >= 1")
        if self.workers is not None and self.workers < 1:
            raise ConfigError("workers must be >= 1 or null")
        if self.backend not in ("auto", "python", "compiled"):
            raise ConfigError("backend must be auto, python, or compiled")

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        if not isinstance(data, dict):
            raise ConfigError("config root must be a mapping")
        schema = data.get("schema")
        if schema != SCHEMA:
            raise ConfigError(f"config schema must be {SCHEMA!r}, got {schema!r}")
        known = set(cls._SCALARS) | set(_SECTIONS) | {"schema"}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"unknown top-level keys: {', '.join(unknown)}")
        cfg = cls()
        for name in cls._SCALARS:
            if name in data:
                setattr(cfg, name, data[name])
        for name, section_cls in _SECTIONS.items():
            if name in data:
                setattr(cfg, name, _build_section(section_cls, data[name], name))
        cfg.validate()
        return cfg

    def to_dict(self) -> dict:
        out = {"schema": SCHEMA}
        for name in self._SCALARS:
            out[name] = getattr(self, name)
        for name in _SECTIONS:
            out[name] = _listify(getattr(self, name))
        return out

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()


def load_config(path) -> RunConfig:
    text = Path(path).read_text()  # OSError propagates: exit code 3
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as e:
        raise ConfigError(f"config {path} is not valid YAML: {e}") from e
    return RunConfig.from_dict(data)


def make_envs(cfg: RunConfig) -> list:
    return [
        BallRotationEnv(
            master_seed=cfg.master_seed,
            env_index=i,
            phys_cfg=cfg.physics,
            reward_coeffs=cfg.reward,
            termination=cfg.termination,
            rand_cfg=cfg.randomization,
            disturb_cfg=cfg.disturbance,
            max_episode_steps=cfg.max_episode_steps,
            backend=cfg.backend,
        )
        for i in range(cfg.env_count)
    ]


def _fmt(value) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


class _CsvWriter:
    """Append-only CSV with a digest comment and a fixed header."""

    def __init__(self, path: Path, columns, digest: str):
        self.path = path
        self.columns = columns
        if not path.exists():
            with open(path, "w") as f:
                f.write(f"# config_digest: {digest}\n")
                f.write(",".join(columns) + "\n")

    def row(self, values) -> None:
        if len(values) != len(self.columns):
            raise ValueError("row length does not match the header")
        with open(self.path, "a") as f:
            f.write(",".join(_fmt(v) for v in values) + "\n")


# --- train -------------------------------------------------------------------

def cmd_train(args) -> int:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.master_seed = args.seed
    cfg.validate()
    digest = cfg.digest()

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "config.yaml", "w") as f:
        yaml.safe_dump(cfg.to_dict(), f, sort_keys=False)

    params = init_params(cfg.master_seed)
    updater = PpoUpdater(params, cfg.ppo, seed=cfg.master_seed)
    envs = make_envs(cfg)
    metrics = _CsvWriter(out / "metrics.csv", METRICS_COLUMNS, digest)
    timing = _CsvWriter(out / "timing.csv", ("iteration", "wall_seconds"), digest)

    consecutive_bad = 0
    for it in range(cfg.iterations):
        t_start = time.perf_counter()
        state = state_at(cfg.curriculum, it)
        batch = collect(params, envs, cfg.steps_per_env, state, workers=cfg.workers)
        adv, targets = compute_gae(
            batch.rewards, batch.values, batch.dones, batch.timeouts,
            batch.timeout_values, batch.final_bootstrap, cfg.ppo)
        obs_f, act_f, logp_f = batch.flat()
        try:
            stats = updater.update(obs_f, act_f, logp_f, adv.reshape(-1),
                                   targets.reshape(-1))
            consecutive_bad = 0
        except NonFiniteLoss:
            consecutive_bad += 1
            stats = {"clip_fraction": float("nan"), "approx_kl": float("nan")}

        terms = batch.reward_terms.mean(axis=(0, 1))
        ep_len = (float(np.mean(batch.episode_lengths))
                  if batch.episode_lengths else float("nan"))
        metrics.row((
            it, float(batch.rewards.mean()), float(terms[0]), float(terms[1]),
            float(terms[2]), float(terms[3]), float(terms[4]), ep_len,
            stats["clip_fraction"], stats["approx_kl"], state.factor,
            state.target_speed_deg, state.update_period,
        ))
        timing.row((it, time.perf_counter() - t_start))
        print(f"iter {it}: reward {batch.rewards.mean():+.4f} "
              f"ep_len {ep_len:.1f} factor {state.factor:.2f} "
              f"speed {state.target_speed_deg:.1f} deg/s "
              f"period {state.update_period:.2f} s"
              + (" [update skipped: non-finite loss]" if consecutive_bad else ""))
        sys.stdout.flush()

        if cfg.checkpoint_interval and (it + 1) % cfg.checkpoint_interval == 0:
            save_checkpoint(out / f"ckpt_{it + 1:06d}.ckpt", params,
                            iteration=it + 1, config_digest=digest,
                            config=cfg.to_dict())
        if consecutive_bad >= DIVERGENCE_LIMIT:
            save_checkpoint(out / "final.ckpt", params, iteration=it + 1,
                            config_digest=digest, config=cfg.to_dict())
            print(f"training diverged: non-finite loss on {consecutive_bad} "
                  "consecutive iterations", file=sys.stderr)
            return EXIT_DIVERGED

    save_checkpoint(out / "final.ckpt", params, iteration=cfg.iterations,
                    config_digest=digest, config=cfg.to_dict())
    return EXIT_OK


# --- eval --------------------------------------------------------------------

TRACE_COLUMNS = (
    ("time", "speed_cmd_deg")
    + tuple(f"target_q{c}" for c in "wxyz")
    + tuple(f"ball_q{c}" for c in "wxyz")
    + ("delta_q",)
    + tuple(f"ball_{c}" for c in "xyz")
    + tuple(f"tau_{i}" for i in range(12))
    + tuple(f"joint_vel_{i}" for i in range(12))
    + ("r_q", "r_v", "r_tau", "r_slip", "r_collide", "r_total")
    + tuple(f"contact_{leg}" for leg in ("lf", "rf", "lh", "rh"))
)


def cmd_eval(args) -> int:
    try:
        params, header = load_checkpoint(args.checkpoint)
    except CorruptCheckpoint as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    if params.obs_dim != 130 or params.act_dim != 12:
        print(f"error: checkpoint network is {params.obs_dim}->{params.act_dim}, "
              "expected 130->12", file=sys.stderr)
        return EXIT_CONFIG
    if not header.get("config"):
        print("error: checkpoint embeds no run config", file=sys.stderr)
        return EXIT_CONFIG
    cfg = RunConfig.from_dict(header["config"])
    digest = header.get("config_digest", cfg.digest())

    seed = cfg.master_seed if args.seed is None else args.seed
    state = state_at(cfg.curriculum, int(header.get("iteration", 0)))
    speed = math.radians(args.speed_deg)
    command = AngularVelocityCommand(
        axis=np.array(AXIS_VECTORS[args.axis], dtype=float),
        magnitude=speed, update_period=state.update_period)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    episodes = []
    for ep in range(args.episodes):
        env = BallRotationEnv(
            master_seed=seed, env_index=ep, phys_cfg=cfg.physics,
            reward_coeffs=cfg.reward, termination=cfg.termination,
            rand_cfg=cfg.randomization, disturb_cfg=cfg.disturbance,
            max_episode_steps=cfg.max_episode_steps, backend=cfg.backend)
        failures = []
        obs = None
        for _ in range(50):
            try:
                obs = env.reset(state, command=command)
                break
            except Exception as e:  # ResetFailed
                failures.append(str(e))
        if obs is None:
            print(f"error: episode {ep} could not be reset", file=sys.stderr)
            return EXIT_IO

        rows = []
        delta_qs = []
        speeds = []
        verdict = Verdict.NONE
        while env.step_count < cfg.max_episode_steps:
            mean, _ = forward(params, obs)
            obs, reward, verdict = env.step(mean)  # deterministic: no noise
            dq = quat_angle(quat_compose(quat_inverse(env.ball.quat), env.target))
            delta_qs.append(dq)
            speeds.append(float(np.linalg.norm(env.ball.ang_vel)))
            feet_on_ball = [0, 0, 0, 0]
            for c in env.last_contacts:
                if is_foot_ball(c):
                    foot = c.body_a if c.body_a != layout.BODY_BALL else c.body_b
                    feet_on_ball[foot - layout.BODY_FOOT0] = 1
            rows.append(
                (env.step_count * CONTROL_DT, args.speed_deg)
                + tuple(env.target) + tuple(env.ball.quat) + (dq,)
                + tuple(env.ball.pos) + tuple(env.last_torque)
                + tuple(env.robot.joint_vel)
                + (reward.r_q, reward.r_v, reward.r_tau, reward.r_slip,
                   reward.r_collide, reward.total)
                + tuple(feet_on_ball))
            if verdict is not Verdict.NONE:
                break

        trace_path = out / f"ep_{ep:03d}.csv"
        with open(trace_path, "w") as f:
            f.write(f"# config_digest: {digest}\n")
            f.write(",".join(TRACE_COLUMNS) + "\n")
            for row in rows:
                f.write(",".join(_fmt(float(v) if isinstance(v, np.floating) else v)
                                 for v in row) + "\n")
        episodes.append({
            "trace": trace_path.name,
            "steps": len(rows),
            "survival_time": len(rows) * CONTROL_DT,
            "mean_delta_q": float(np.mean(delta_qs)),
            "max_delta_q": float(np.max(delta_qs)),
            "mean_ball_speed": float(np.mean(speeds)),
            "verdict": verdict.value if verdict is not Verdict.NONE else "time_limit",
            "reset_failures": len(failures),
        })

    summary = {
        "config_digest": digest,
        "checkpoint": Path(args.checkpoint).name,
        "checkpoint_iteration": int(header.get("iteration", 0)),
        "axis": args.axis,
        "speed_deg": args.speed_deg,
        "seed": seed,
        "episodes": episodes,
        "aggregate": {
            "mean_delta_q": float(np.mean([e["mean_delta_q"] for e in episodes])),
            "max_delta_q": float(np.max([e["max_delta_q"] for e in episodes])),
            "mean_survival_time": float(np.mean([e["survival_time"] for e in episodes])),
            "mean_ball_speed": float(np.mean([e["mean_ball_speed"] for e in episodes])),
        },
    }
    with open(out / "summary.json", "w") as f:
        json.dump(summary, f, indent=2, sort_keys=True)
        f.write("\n")
    print(f"wrote {len(episodes)} traces and summary.json to {out}")
    return EXIT_OK


# --- inspect -----------------------------------------------------------------

def cmd_inspect(args) -> int:
    try:
        params, header = load_checkpoint(args.checkpoint)
    except CorruptCheckpoint as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG

    print(f"schema:           {header['schema']}")
    print(f"iteration:        {header.get('iteration', 0)}")
    print(f"config digest:    {header.get('config_digest', '')}")
    policy_widths = [params.policy_w[0].shape[0]] + [w.shape[1] for w in params.policy_w]
    value_widths = [params.value_w[0].shape[0]] + [w.shape[1] for w in params.value_w]
    print(f"policy layers:    {' -> '.join(str(w) for w in policy_widths)}")
    print(f"value layers:     {' -> '.join(str(w) for w in value_widths)}")
    print(f"parameter count:  {params.parameter_count()}")
    print(f"log_std:          mean {float(np.mean(params.log_std)):+.4f}")
    for name, a in params.flat_arrays():
        print(f"  {name:12s} shape {str(a.shape):14s} l2 {float(np.linalg.norm(a)):.6f}")
    return EXIT_OK


# --- defaults ----------------------------------------------------------------

def cmd_defaults(args) -> int:
    text = yaml.safe_dump(RunConfig().to_dict(), sort_keys=False)
    if args.out:
        Path(args.out).write_text(text)
        print(f"wrote defaults to {args.out}")
    else:
        sys.stdout.write(text)
    return EXIT_OK


# --- entry point ---------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="quadball",
        description="Train and evaluate a supine ball-rotation policy.")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="run the training loop")
    t.add_argument("--config", required=True, help="YAML run configuration")
    t.add_argument("--seed", type=int, default=None, help="override master seed")
    t.add_argument("--out", default="runs/out", help="output directory")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="roll deterministic episodes from a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--axis", choices=sorted(AXIS_VECTORS), default="yaw")
    e.add_argument("--speed-deg", type=float, default=15.0)
    e.add_argument("--episodes", type=int, default=3)
    e.add_argument("--seed", type=int, default=None)
    e.add_argument("--out", default="eval_out")
    e.set_defaults(func=cmd_eval)

    i = sub.add_parser("inspect", help="describe a checkpoint file")
    i.add_argument("--checkpoint", required=True)
    i.set_defaults(func=cmd_inspect)

    d = sub.add_parser("defaults", help="print the default configuration")
    d.add_argument("--out", default=None)
    d.set_defaults(func=cmd_defaults)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as e:
        print(f"i/o error: {e}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
