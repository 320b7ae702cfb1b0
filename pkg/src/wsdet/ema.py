"""Teacher-student parameter state: EMA updates and normalization-statistics
strategies.

ParameterState is an immutable snapshot of a flat parameter vector plus the
running mean/variance pair used by normalization layers. The teacher's
parameters follow the student by exponential moving average; what happens
to the normalization statistics is a separate, pluggable policy:

    open   - the student refreshes its own running stats from each batch,
             the teacher keeps its pre-training stats (the mismatch the
             freeze strategy is designed to remove)
    ema    - as open, plus the teacher's stats are blended toward the
             student's with their own smoothing factor
    frozen - neither model's stats ever move

Checkpoints serialize as a one-line JSON header followed by little-endian
float32 payloads for theta, norm_mean and norm_var in that order.
"""
from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

OPEN_BN = "open"
EMA_BN = "ema"
FROZEN_BN = "frozen"

DEFAULT_ALPHA = 0.999
DEFAULT_BN_MOMENTUM = 0.1


def _as_vector(v, name: str) -> np.ndarray:
    arr = np.array(v, dtype=np.float64).reshape(-1)
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True)
class ParameterState:
    """Flat parameter vector plus per-channel normalization running stats."""

    theta: np.ndarray
    norm_mean: np.ndarray
    norm_var: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "theta", _as_vector(self.theta, "theta"))
        object.__setattr__(self, "norm_mean", _as_vector(self.norm_mean, "norm_mean"))
        object.__setattr__(self, "norm_var", _as_vector(self.norm_var, "norm_var"))
        if self.norm_mean.shape != self.norm_var.shape:
            raise ValueError("norm_mean and norm_var must have matching shapes")
        if np.any(self.norm_var < 0):
            raise ValueError("norm_var must be elementwise non-negative")

    def norm_std(self) -> np.ndarray:
        """Standard deviation derived on demand; variance is canonical."""
        return np.sqrt(self.norm_var)


@dataclass(frozen=True)
class NormStrategy:
    """Which normalization-statistics policy a training run applies.

    momentum is the student's running-average momentum (open and ema);
    alpha is the ema variant's own smoothing factor for the teacher blend.
    """

    kind: str = FROZEN_BN
    momentum: float = DEFAULT_BN_MOMENTUM
    alpha: float | None = None

    def __post_init__(self):
        if self.kind not in (OPEN_BN, EMA_BN, FROZEN_BN):
            raise ValueError(f"unknown normalization strategy {self.kind!r}")
        if not (0.0 < self.momentum <= 1.0):
            raise ValueError(f"momentum must lie in (0, 1], got {self.momentum}")
        if self.alpha is not None and not (0.0 < self.alpha < 1.0):
            raise ValueError(f"alpha must lie in (0, 1), got {self.alpha}")


def _check_dims(a: np.ndarray, b: np.ndarray, what: str) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{what} dimension mismatch: {a.shape} vs {b.shape}")


def ema_update(teacher: ParameterState, student: ParameterState, alpha: float) -> ParameterState:
    """Blend the teacher's parameters toward the student's.

    new theta = alpha * teacher.theta + (1 - alpha) * student.theta; a high
    alpha gives a slowly drifting teacher. Normalization statistics are not
    touched here; they belong to apply_norm_strategy.
    """
    if not (0.0 < alpha < 1.0):
        raise ValueError(f"alpha must lie strictly in (0, 1), got {alpha}")
    _check_dims(teacher.theta, student.theta, "theta")
    blended = alpha * teacher.theta + (1.0 - alpha) * student.theta
    return ParameterState(blended, teacher.norm_mean, teacher.norm_var)


def apply_norm_strategy(
    strategy: NormStrategy,
    teacher: ParameterState,
    student: ParameterState,
    batch_mean: np.ndarray,
    batch_var: np.ndarray,
) -> tuple[ParameterState, ParameterState]:
    """Advance both models' normalization statistics one step.

    Returns (teacher, student) as new states; inputs are never modified.
    Under the frozen policy both are returned unchanged regardless of the
    batch statistics.
    """
    if strategy.kind == FROZEN_BN:
        return teacher, student

    batch_mean = np.asarray(batch_mean, dtype=np.float64).reshape(-1)
    batch_var = np.asarray(batch_var, dtype=np.float64).reshape(-1)
    _check_dims(batch_mean, student.norm_mean, "batch_mean")
    _check_dims(batch_var, student.norm_var, "batch_var")
    if np.any(batch_var < 0):
        raise ValueError("batch_var must be elementwise non-negative")

    m = strategy.momentum
    new_student = ParameterState(
        student.theta,
        (1.0 - m) * student.norm_mean + m * batch_mean,
        (1.0 - m) * student.norm_var + m * batch_var,
    )
    if strategy.kind == OPEN_BN:
        return teacher, new_student

    if strategy.alpha is None:
        raise ValueError("ema normalization strategy needs its smoothing factor set")
    a = strategy.alpha
    new_teacher = ParameterState(
        teacher.theta,
        a * teacher.norm_mean + (1.0 - a) * new_student.norm_mean,
        a * teacher.norm_var + (1.0 - a) * new_student.norm_var,
    )
    return new_teacher, new_student


# ---------------------------------------------------------------------------
# checkpoint format

def save_checkpoint(state: ParameterState, path) -> None:
    header = {
        "format": "wsdet-checkpoint",
        "theta": int(state.theta.size),
        "norm": int(state.norm_mean.size),
    }
    with open(path, "wb") as f:
        f.write(json.dumps(header).encode("ascii") + b"\n")
        for vec in (state.theta, state.norm_mean, state.norm_var):
            f.write(vec.astype("<f4").tobytes())


def load_checkpoint(path) -> ParameterState:
    with open(path, "rb") as f:
        try:
            header = json.loads(f.readline().decode("ascii"))
            n_theta = int(header["theta"])
            n_norm = int(header["norm"])
        except (ValueError, KeyError, UnicodeDecodeError) as exc:
            raise ValueError(f"malformed checkpoint header: {exc}") from exc
        payload = f.read()
    expected = (n_theta + 2 * n_norm) * 4
    if len(payload) != expected:
        raise ValueError(f"checkpoint payload is {len(payload)} bytes, expected {expected}")
    data = np.frombuffer(payload, dtype="<f4").astype(np.float64)
    theta = data[:n_theta]
    mean = data[n_theta : n_theta + n_norm]
    var = data[n_theta + n_norm :]
    return ParameterState(theta, mean, var)
