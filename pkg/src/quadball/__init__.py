"""Desk-scale RL system for a supine quadruped rotating a ball with its legs.

Modules:
    rotation    unit-quaternion math, angular-velocity commands
    physics     rigid-body simulator (compiled core + Python fallback)
    randomize   domain randomization, noise and disturbance injection
    curriculum  training schedule for task difficulty
    env         the ball-rotation MDP (observation, reward, termination)
    nn          policy/value MLPs with hand-written backprop, checkpoints
    ppo         clipped-surrogate policy optimization
    rollout     multi-environment experience collection
    cli         run configuration and the train/eval/inspect/defaults commands
"""

__version__ = "0.1.0"
