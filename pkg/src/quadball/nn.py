"""Two-head MLP (policy and value) with exact reverse-mode gradients.

Both heads are affine-tanh-affine-tanh-affine stacks; the policy adds a
state-independent log-std vector for the Gaussian action distribution. All
math is plain numpy in double precision. Checkpoints store parameters in
single precision behind a versioned, little-endian, length-prefixed header so
they can be inspected without loading the arrays.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass

import numpy as np

OBS_DIM = 130
ACT_DIM = 12
HIDDEN = (256, 128)
LOG_STD_INIT = math.log(0.3)

_MAGIC = b"QBALLCK1"
_SCHEMA = "quadball-checkpoint/1"


class ShapeMismatch(ValueError):
    """Input or parameter shapes disagree with the network contract."""


class NonFiniteGradient(RuntimeError):
    """A gradient entry is NaN or infinite; the update must be skipped."""


class CorruptCheckpoint(ValueError):
    """Checkpoint file failed structural validation."""


@dataclass
class MlpParams:
    """Parameter container for both heads.

    Weight matrices are (fan_in, fan_out); layer i maps activations through
    x @ w[i] + b[i]. Treat instances as immutable snapshots during rollout
    collection; the trainer replaces them wholesale.
    """

    policy_w: list
    policy_b: list
    value_w: list
    value_b: list
    log_std: np.ndarray

    @property
    def obs_dim(self) -> int:
        return self.policy_w[0].shape[0]

    @property
    def act_dim(self) -> int:
        return self.policy_w[-1].shape[1]

    def copy(self) -> "MlpParams":
        return MlpParams(
            policy_w=[w.copy() for w in self.policy_w],
            policy_b=[b.copy() for b in self.policy_b],
            value_w=[w.copy() for w in self.value_w],
            value_b=[b.copy() for b in self.value_b],
            log_std=self.log_std.copy(),
        )

    def flat_arrays(self) -> list:
        """(name, array) pairs in canonical checkpoint order."""
        out = []
        for i, (w, b) in enumerate(zip(self.policy_w, self.policy_b)):
            out.append((f"policy_w{i}", w))
            out.append((f"policy_b{i}", b))
        for i, (w, b) in enumerate(zip(self.value_w, self.value_b)):
            out.append((f"value_w{i}", w))
            out.append((f"value_b{i}", b))
        out.append(("log_std", self.log_std))
        return out

    def parameter_count(self) -> int:
        return sum(int(a.size) for _, a in self.flat_arrays())

    def validate(self) -> None:
        layer_count = len(self.policy_w)
        if layer_count != len(self.policy_b) or len(self.value_w) != len(self.value_b):
            raise ShapeMismatch("weight/bias layer counts disagree")
        if self.policy_w[0].shape[0] != self.value_w[0].shape[0]:
            raise ShapeMismatch("policy and value heads must share the input width")
        if self.value_w[-1].shape[1] != 1:
            raise ShapeMismatch("value head must end in a single output")
        if self.log_std.shape != (self.policy_w[-1].shape[1],):
            raise ShapeMismatch("log_std must match the action width")
        for name, a in self.flat_arrays():
            if not np.all(np.isfinite(a)):
                raise ValueError(f"parameter {name} contains non-finite entries")


def _init_stack(rng, sizes) -> tuple:
    ws, bs = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        bound = 1.0 / math.sqrt(fan_in)
        ws.append(rng.uniform(-bound, bound, (fan_in, fan_out)))
        bs.append(rng.uniform(-bound, bound, fan_out))
    return ws, bs


def init_params(
    seed,
    obs_dim: int = OBS_DIM,
    hidden=HIDDEN,
    act_dim: int = ACT_DIM,
    log_std_init: float = LOG_STD_INIT,
) -> MlpParams:
    """Fan-in-scaled uniform initialization; `seed` is an int or Generator."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    policy_w, policy_b = _init_stack(rng, (obs_dim, *hidden, act_dim))
    value_w, value_b = _init_stack(rng, (obs_dim, *hidden, 1))
    params = MlpParams(
        policy_w=policy_w,
        policy_b=policy_b,
        value_w=value_w,
        value_b=value_b,
        log_std=np.full(act_dim, float(log_std_init)),
    )
    params.validate()
    return params


def net_forward(ws, bs, x: np.ndarray) -> tuple:
    """Forward through one head; returns (output, cache for net_backward).

    Hidden layers use tanh, the output layer is linear. `x` is (batch, in).
    """
    acts = [x]
    h = x
    for w, b in zip(ws[:-1], bs[:-1]):
        h = np.tanh(h @ w + b)
        acts.append(h)
    y = h @ ws[-1] + bs[-1]
    return y, acts


def net_backward(ws, acts, grad_y: np.ndarray) -> tuple:
    """Exact gradients for one head given upstream d(loss)/d(output).

    Returns (grad_ws, grad_bs). Gradients are summed over the batch; fold any
    1/batch factor into grad_y.
    """
    grad_ws = [None] * len(ws)
    grad_bs = [None] * len(ws)
    g = grad_y
    for i in range(len(ws) - 1, -1, -1):
        grad_ws[i] = acts[i].T @ g
        grad_bs[i] = g.sum(axis=0)
        if i > 0:
            g = (g @ ws[i].T) * (1.0 - acts[i] * acts[i])
    return grad_ws, grad_bs


def policy_value_batch(params: MlpParams, obs: np.ndarray) -> tuple:
    """(action means (B, act), values (B,)) for a batch of observations."""
    obs = np.asarray(obs, dtype=float)
    if obs.ndim != 2 or obs.shape[1] != params.obs_dim:
        raise ShapeMismatch(
            f"expected observations of shape (batch, {params.obs_dim}), got {obs.shape}"
        )
    mean, _ = net_forward(params.policy_w, params.policy_b, obs)
    value, _ = net_forward(params.value_w, params.value_b, obs)
    return mean, value[:, 0]


def forward(params: MlpParams, obs: np.ndarray) -> tuple:
    """Single-observation forward: (action mean (act,), value scalar)."""
    obs = np.asarray(obs, dtype=float)
    if obs.shape != (params.obs_dim,):
        raise ShapeMismatch(f"expected observation of shape ({params.obs_dim},), got {obs.shape}")
    mean, value = policy_value_batch(params, obs[None, :])
    return mean[0], float(value[0])


def check_finite_grads(grads: dict) -> None:
    """Raise NonFiniteGradient if any entry in a gradient tree is non-finite."""
    for name, g in grads.items():
        if isinstance(g, list):
            for i, a in enumerate(g):
                if not np.all(np.isfinite(a)):
                    raise NonFiniteGradient(f"non-finite gradient in {name}[{i}]")
        else:
            if not np.all(np.isfinite(g)):
                raise NonFiniteGradient(f"non-finite gradient in {name}")


# --- checkpoint serialization ------------------------------------------------

def save_checkpoint(path, params: MlpParams, *, iteration: int = 0,
                    config_digest: str = "", config: dict | None = None) -> None:
    """Write params < f4 with a JSON header; see load_checkpoint."""
    params.validate()
    arrays = params.flat_arrays()
    header = {
        "schema": _SCHEMA,
        "dtype": "<f4",
        "arrays": [[name, list(a.shape)] for name, a in arrays],
        "iteration": int(iteration),
        "config_digest": config_digest,
        "config": config,
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        for _, a in arrays:
            f.write(np.ascontiguousarray(a, dtype="<f4").tobytes())


def _read_header(f) -> tuple:
    """Parse and validate the header; returns (header, data offset)."""
    try:
        magic = f.read(len(_MAGIC))
        if magic != _MAGIC:
            raise CorruptCheckpoint("bad magic bytes; not a checkpoint file")
        raw_len = f.read(4)
        if len(raw_len) != 4:
            raise CorruptCheckpoint("truncated header length")
        (hlen,) = struct.unpack("<I", raw_len)
        if hlen > 64 * 1024 * 1024:
            raise CorruptCheckpoint("unreasonable header length")
        blob = f.read(hlen)
        if len(blob) != hlen:
            raise CorruptCheckpoint("truncated header")
        header = json.loads(blob.decode("utf-8"))
    except OSError as e:
        raise CorruptCheckpoint(f"unreadable checkpoint: {e}") from e
    except (json.JSONDecodeError, UnicodeDecodeError) as e:
        raise CorruptCheckpoint(f"malformed header: {e}") from e
    if header.get("schema") != _SCHEMA:
        raise CorruptCheckpoint(f"unsupported schema {header.get('schema')!r}")
    if header.get("dtype") != "<f4" or "arrays" not in header:
        raise CorruptCheckpoint("header missing required fields")
    arrays = header["arrays"]
    if not isinstance(arrays, list) or not all(
        isinstance(e, list) and len(e) == 2 and isinstance(e[0], str)
        and isinstance(e[1], list) and all(isinstance(d, int) and d >= 0 for d in e[1])
        for e in arrays
    ):
        raise CorruptCheckpoint("malformed array table")
    return header, len(_MAGIC) + 4 + hlen


def read_checkpoint_header(path) -> dict:
    """Parse and validate the header only."""
    try:
        with open(path, "rb") as f:
            header, _ = _read_header(f)
    except OSError as e:
        raise CorruptCheckpoint(f"unreadable checkpoint: {e}") from e
    return header


def load_checkpoint(path) -> tuple:
    """Read a checkpoint; returns (MlpParams in float64, header dict)."""
    arrays = {}
    with open(path, "rb") as f:
        header, offset = _read_header(f)
        f.seek(offset)
        for name, shape in header["arrays"]:
            count = int(np.prod(shape)) if shape else 1
            raw = f.read(count * 4)
            if len(raw) != count * 4:
                raise CorruptCheckpoint(f"truncated array {name}")
            arrays[name] = np.frombuffer(raw, dtype="<f4").astype(float).reshape(shape)
        if f.read(1):
            raise CorruptCheckpoint("trailing bytes after the last array")

    def stack(prefix):
        ws, bs = [], []
        for i in range(len(header["arrays"])):
            if f"{prefix}_w{i}" not in arrays:
                break
            ws.append(arrays[f"{prefix}_w{i}"])
            bs.append(arrays[f"{prefix}_b{i}"])
        if not ws:
            raise CorruptCheckpoint(f"no layers found for head {prefix!r}")
        return ws, bs

    try:
        policy_w, policy_b = stack("policy")
        value_w, value_b = stack("value")
        params = MlpParams(
            policy_w=policy_w, policy_b=policy_b,
            value_w=value_w, value_b=value_b,
            log_std=arrays["log_std"],
        )
        params.validate()
    except (KeyError, ShapeMismatch, ValueError) as e:
        raise CorruptCheckpoint(f"inconsistent parameter arrays: {e}") from e
    return params, header
