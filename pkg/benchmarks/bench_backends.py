"""Benchmark the physics backends against each other.

Runs the same control-step workload (settled robot balancing the ball, noisy
joint targets) through every available backend and reports steps per second.
The two backends are bit-identical by construction, so the only question this
answers is speed.

Usage: python benchmarks/bench_backends.py [--steps N]
"""

import argparse
import time

import numpy as np

from quadball.physics import (
    PhysicsEngine,
    available_backends,
    default_ball_state,
    default_robot_state,
    layout as L,
    pack_state,
)
from quadball.physics.params import NOMINAL_JOINT_POS, PhysicsConfig


def bench(backend: str, n_steps: int) -> float:
    cfg = PhysicsConfig()
    eng = PhysicsEngine(cfg, backend=backend)
    s_in = pack_state(default_robot_state(cfg), default_ball_state(cfg))
    s_out = np.zeros(L.N_STATE)
    targets = np.array(NOMINAL_JOINT_POS)
    tau = np.zeros(12)
    rows = np.zeros((L.MAX_CONTACTS, L.N_CONTACT_COLS))
    rng = np.random.default_rng(0)
    ext = np.zeros(3)
    # warm up and settle before timing
    for _ in range(200):
        eng.step_array(s_in, s_out, targets, ext, tau, rows)
        s_in[:] = s_out
    t0 = time.perf_counter()
    for _ in range(n_steps):
        t = targets + 0.1 * rng.standard_normal(12)
        eng.step_array(s_in, s_out, t, ext, tau, rows)
        s_in[:] = s_out
    elapsed = time.perf_counter() - t0
    return n_steps / elapsed


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--steps", type=int, default=2000,
                        help="control steps per backend (default 2000)")
    args = parser.parse_args()

    rates = {}
    for backend in available_backends():
        rates[backend] = bench(backend, args.steps)
        print(f"{backend:>10}: {rates[backend]:9.0f} control steps/s "
              f"({rates[backend] * 10:9.0f} substeps/s)")
    if "compiled" in rates and "python" in rates:
        print(f"{'speedup':>10}: {rates['compiled'] / rates['python']:.1f}x")


if __name__ == "__main__":
    main()
