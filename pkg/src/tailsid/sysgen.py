"""Random cascade-system sampling, simulation and task-stream generation.

A task couples one randomly sampled discrete-time cascade system
(LTI -> static MLP nonlinearity -> LTI) with two independent excitation
records: a context record that identifies the system and a query record
whose outputs must be predicted. Task generation is a pure function of
(seed, task index), so streams can be resumed or sharded at any index.
"""

from __future__ import annotations

import csv
import dataclasses
import json
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np
from scipy import signal as sp_signal

from .errors import CalibrationError, ConfigError

N_HIDDEN = 32
CALIBRATION_LEN = 2000
_MIN_DC_GAIN = 1e-4
_MAX_CALIBRATION_ATTEMPTS = 10


@dataclass(frozen=True)
class LtiSystem:
    """State-space system x_{k+1} = A x_k + B u_k, y_k = C x_k + D u_k.

    The output is emitted before the state update, so the response of the
    strictly proper part starts one step after an impulse.
    """

    state_matrix: np.ndarray  # (order, order)
    input_vector: np.ndarray  # (order,)
    output_vector: np.ndarray  # (order,)
    feedthrough: float = 0.0

    def __post_init__(self):
        a = self.state_matrix
        if a.ndim != 2 or a.shape[0] != a.shape[1]:
            raise ValueError(f"state_matrix must be square, got {a.shape}")
        n = a.shape[0]
        if self.input_vector.shape != (n,) or self.output_vector.shape != (n,):
            raise ValueError("input/output vector length must equal the state order")
        if not (np.isfinite(a).all() and np.isfinite(self.input_vector).all()
                and np.isfinite(self.output_vector).all()):
            raise ValueError("system matrices must be finite")

    @property
    def order(self) -> int:
        return self.state_matrix.shape[0]

    def eigenvalues(self) -> np.ndarray:
        return np.linalg.eigvals(self.state_matrix)


@dataclass(frozen=True)
class StaticNonlinearity:
    """One-hidden-layer tanh MLP evaluated pointwise, scalar in / scalar out."""

    hidden_weights: np.ndarray  # (N_HIDDEN,)
    hidden_bias: np.ndarray  # (N_HIDDEN,)
    output_weights: np.ndarray  # (N_HIDDEN,)
    output_bias: float = 0.0

    def __call__(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        h = np.tanh(x[..., None] * self.hidden_weights + self.hidden_bias)
        return h @ self.output_weights + self.output_bias


@dataclass(frozen=True)
class WhSystem:
    """Cascade g1 -> f -> g2 with the per-system output standardization
    statistics estimated at sampling time."""

    g1: LtiSystem
    g2: LtiSystem
    f: StaticNonlinearity
    out_mean: float
    out_std: float

    def __post_init__(self):
        if not self.out_std > 0.0:
            raise ValueError(f"out_std must be > 0, got {self.out_std}")


@dataclass(frozen=True)
class ExcitationSpec:
    kind: str = "white_noise"  # white_noise | rbs | multisine
    length: int = 0
    rbs_switch_prob: float = 0.1
    n_harmonics: int = 20

    def __post_init__(self):
        if self.kind not in ("white_noise", "rbs", "multisine"):
            raise ConfigError(f"excitation.kind: unknown kind {self.kind!r}")
        if self.length < 0:
            raise ConfigError("excitation.length: must be >= 0")
        if not 0.0 < self.rbs_switch_prob <= 1.0:
            raise ConfigError("excitation.rbs_switch_prob: must be in (0, 1]")
        if self.n_harmonics < 1:
            raise ConfigError("excitation.n_harmonics: must be >= 1")


@dataclass(frozen=True)
class TaskDataset:
    """One context record plus one query record from the same system.

    query_y holds the measured (noisy) outputs for the full query horizon;
    only its first init_len samples are visible to a model as initial
    conditions, the remainder is the prediction target.
    """

    context_u: np.ndarray
    context_y: np.ndarray
    query_u: np.ndarray
    query_y: np.ndarray
    init_len: int

    def __post_init__(self):
        m = len(self.context_u)
        n = len(self.query_u)
        if len(self.context_y) != m:
            raise ValueError("context_u and context_y lengths differ")
        if len(self.query_y) != n:
            raise ValueError("query_u and query_y lengths differ")
        if not 0 < self.init_len < n:
            raise ValueError(f"init_len must satisfy 0 < c < n, got c={self.init_len}, n={n}")

    @property
    def target(self) -> np.ndarray:
        """Query outputs to be predicted (beyond the initial conditions)."""
        return self.query_y[self.init_len:]


@dataclass(frozen=True)
class TaskStreamConfig:
    seed: int = 0
    m: int = 400
    n: int = 130
    c: int = 30
    order_range: tuple[int, int] = (1, 10)
    pole_mag_range: tuple[float, float] = (0.5, 0.97)
    pole_phase_range: tuple[float, float] = (0.0, float(np.pi) / 2.0)
    noise_std: float = 0.01
    excitation: ExcitationSpec = field(default_factory=ExcitationSpec)
    washout: int = 200

    def __post_init__(self):
        if self.seed < 0 or self.seed >= 2**64:
            raise ConfigError("seed: must be an unsigned 64-bit integer")
        if not 0 < self.c < self.n:
            raise ConfigError(f"init length must satisfy 0 < c < n, got c={self.c}, n={self.n}")
        if self.m < 1:
            raise ConfigError("m: must be >= 1")
        lo, hi = self.order_range
        if not 1 <= lo <= hi:
            raise ConfigError(f"order_range: invalid range {self.order_range}")
        if not 0.0 < self.pole_mag_range[0] <= self.pole_mag_range[1] < 1.0:
            raise ConfigError(f"pole_mag_range: invalid range {self.pole_mag_range}")
        if not 0.0 <= self.pole_phase_range[0] <= self.pole_phase_range[1] <= float(np.pi):
            raise ConfigError(f"pole_phase_range: invalid range {self.pole_phase_range}")
        if self.noise_std < 0.0:
            raise ConfigError("noise_std: must be >= 0")
        if self.washout < 0:
            raise ConfigError("washout: must be >= 0")


# ---------------------------------------------------------------------------
# Sampling
# ---------------------------------------------------------------------------


def sample_lti(
    rng: np.random.Generator,
    order_range: tuple[int, int],
    mag_range: tuple[float, float],
    phase_range: tuple[float, float],
) -> LtiSystem:
    """Draw a stable system in real block-diagonal form with unit DC gain.

    Poles come as conjugate pairs (magnitude ~ U(mag_range), phase ~
    U(phase_range)) plus one positive real pole when the order is odd.
    """
    lo, hi = order_range
    if not 1 <= lo <= hi:
        raise ConfigError(f"order_range: invalid range {order_range}")
    if not 0.0 < mag_range[0] <= mag_range[1] < 1.0:
        raise ConfigError(f"mag_range: invalid range {mag_range}")
    order = int(rng.integers(lo, hi + 1))
    n_pairs = order // 2
    mags = rng.uniform(mag_range[0], mag_range[1], n_pairs)
    phases = rng.uniform(phase_range[0], phase_range[1], n_pairs)
    blocks = []
    for m, p in zip(mags, phases):
        cp, sp = m * np.cos(p), m * np.sin(p)
        blocks.append(np.array([[cp, -sp], [sp, cp]]))
    if order % 2 == 1:
        blocks.append(np.array([[rng.uniform(mag_range[0], mag_range[1])]]))
    a = np.zeros((order, order))
    pos = 0
    for blk in blocks:
        k = blk.shape[0]
        a[pos:pos + k, pos:pos + k] = blk
        pos += k

    eye = np.eye(order)
    while True:
        b = rng.standard_normal(order)
        c = rng.standard_normal(order)
        dc = float(c @ np.linalg.solve(eye - a, b))
        if abs(dc) >= _MIN_DC_GAIN:
            break
    c = c / dc
    return LtiSystem(state_matrix=a, input_vector=b, output_vector=c, feedthrough=0.0)


def sample_nonlinearity(rng: np.random.Generator) -> StaticNonlinearity:
    """Kaiming-scaled normal weights (variance 2/fan_in), zero biases."""
    hidden = rng.standard_normal(N_HIDDEN) * np.sqrt(2.0 / 1.0)
    out = rng.standard_normal(N_HIDDEN) * np.sqrt(2.0 / N_HIDDEN)
    return StaticNonlinearity(
        hidden_weights=hidden,
        hidden_bias=np.zeros(N_HIDDEN),
        output_weights=out,
        output_bias=0.0,
    )


def sample_wh_system_with_calibration(
    rng: np.random.Generator, config: TaskStreamConfig
) -> tuple[WhSystem, np.ndarray]:
    """Sample the cascade and estimate its output statistics from a dedicated
    white-noise calibration run (washout discarded). Also returns the
    standardized calibration output the statistics were computed from."""
    for _ in range(_MAX_CALIBRATION_ATTEMPTS):
        g1 = sample_lti(rng, config.order_range, config.pole_mag_range, config.pole_phase_range)
        g2 = sample_lti(rng, config.order_range, config.pole_mag_range, config.pole_phase_range)
        f = sample_nonlinearity(rng)
        calib_u = rng.standard_normal(config.washout + CALIBRATION_LEN)
        raw = _simulate_cascade_raw(g1, f, g2, calib_u)[config.washout:]
        std = float(raw.std())
        if std >= 1e-8:
            sys = WhSystem(g1=g1, g2=g2, f=f, out_mean=float(raw.mean()), out_std=std)
            return sys, (raw - sys.out_mean) / sys.out_std
    raise CalibrationError(
        f"calibration produced out_std < 1e-8 in {_MAX_CALIBRATION_ATTEMPTS} attempts"
    )


def sample_wh_system(rng: np.random.Generator, config: TaskStreamConfig) -> WhSystem:
    return sample_wh_system_with_calibration(rng, config)[0]


# ---------------------------------------------------------------------------
# Simulation
# ---------------------------------------------------------------------------


def simulate_lti(
    sys: LtiSystem,
    input_seq: np.ndarray,
    initial_state: np.ndarray | None = None,
) -> np.ndarray:
    """Simulate the state-space recursion; output length equals input length.

    The zero-initial-state path runs through scipy's C filter; a nonzero
    initial state falls back to the explicit recursion.
    """
    u = np.asarray(input_seq, dtype=float)
    if initial_state is None or not np.any(initial_state):
        num, den = sp_signal.ss2tf(
            sys.state_matrix,
            sys.input_vector[:, None],
            sys.output_vector[None, :],
            [[sys.feedthrough]],
        )
        return sp_signal.lfilter(num[0], den, u)
    x = np.asarray(initial_state, dtype=float)
    if x.shape != (sys.order,):
        raise ValueError(f"initial_state must have shape ({sys.order},), got {x.shape}")
    a, b, c, d = sys.state_matrix, sys.input_vector, sys.output_vector, sys.feedthrough
    y = np.empty(len(u))
    for k in range(len(u)):
        y[k] = c @ x + d * u[k]
        x = a @ x + b * u[k]
    return y


def _simulate_cascade_raw(
    g1: LtiSystem, f: StaticNonlinearity, g2: LtiSystem, u: np.ndarray
) -> np.ndarray:
    return simulate_lti(g2, f(simulate_lti(g1, u)))


def simulate_wh(sys: WhSystem, input_seq: np.ndarray) -> np.ndarray:
    """Noiseless standardized cascade response from zero initial state."""
    raw = _simulate_cascade_raw(sys.g1, sys.f, sys.g2, input_seq)
    return (raw - sys.out_mean) / sys.out_std


# ---------------------------------------------------------------------------
# Excitation signals
# ---------------------------------------------------------------------------


def gen_signal(rng: np.random.Generator, spec: ExcitationSpec) -> np.ndarray:
    if spec.kind == "white_noise":
        return rng.standard_normal(spec.length)
    if spec.kind == "rbs":
        start = -1.0 if rng.random() < 0.5 else 1.0
        if spec.length == 0:
            return np.empty(0)
        steps = np.where(rng.random(spec.length - 1) < spec.rbs_switch_prob, -1.0, 1.0)
        return start * np.concatenate(([1.0], np.cumprod(steps)))
    return _gen_multisine(rng, spec)


def _gen_multisine(rng: np.random.Generator, spec: ExcitationSpec) -> np.ndarray:
    """Random-phase multisine on harmonically spaced Fourier bins up to a
    quarter of the sampling rate (normalized frequency pi/2), rescaled to
    unit sample variance."""
    n = spec.length
    h = spec.n_harmonics
    k_max = n // 4
    if h > k_max:
        raise ConfigError(
            f"excitation.n_harmonics: {h} harmonics need length >= {4 * h}, got {n}"
        )
    base = k_max // h
    bins = base * np.arange(1, h + 1)
    phases = rng.uniform(0.0, 2.0 * np.pi, h)
    t = np.arange(n)
    sig = np.cos((2.0 * np.pi / n) * t[:, None] * bins[None, :] + phases).sum(axis=1)
    sig -= sig.mean()
    return sig / sig.std()


# ---------------------------------------------------------------------------
# Task stream
# ---------------------------------------------------------------------------


def sample_task(rng: np.random.Generator, config: TaskStreamConfig) -> TaskDataset:
    """One system, two independent excitations, washout discarded,
    standardized outputs plus measurement noise."""
    sys = sample_wh_system(rng, config)
    segments = []
    for keep in (config.m, config.n):
        spec = dataclasses.replace(config.excitation, length=config.washout + keep)
        u_full = gen_signal(rng, spec)
        y = simulate_wh(sys, u_full)[config.washout:]
        noise = rng.standard_normal(keep)
        segments.append((u_full[config.washout:], y + config.noise_std * noise))
    (cu, cy), (qu, qy) = segments
    return TaskDataset(context_u=cu, context_y=cy, query_u=qu, query_y=qy, init_len=config.c)


def _task_rng(config: TaskStreamConfig, index: int) -> np.random.Generator:
    return np.random.default_rng(
        np.random.SeedSequence(entropy=config.seed, spawn_key=(index,))
    )


def task_at(config: TaskStreamConfig, index: int) -> TaskDataset:
    """The index-th element of the stream, computable without its
    predecessors."""
    if index < 0:
        raise ValueError("task index must be >= 0")
    return sample_task(_task_rng(config, index), config)


def task_stream(config: TaskStreamConfig, start: int = 0) -> Iterator[TaskDataset]:
    """Infinite deterministic stream of independent task draws."""
    index = start
    while True:
        yield task_at(config, index)
        index += 1


def generate_batch(
    config: TaskStreamConfig, start: int, count: int, pool=None
) -> list[TaskDataset]:
    """Tasks [start, start+count); with a multiprocessing pool the indices are
    farmed out but reassembled in index order, so results do not depend on
    worker count."""
    indices = range(start, start + count)
    if pool is None:
        return [task_at(config, i) for i in indices]
    return pool.starmap(task_at, [(config, i) for i in indices])


# ---------------------------------------------------------------------------
# Persistence for the `generate` subcommand
# ---------------------------------------------------------------------------


def stream_config_to_dict(config: TaskStreamConfig) -> dict:
    d = dataclasses.asdict(config)
    d["order_range"] = list(config.order_range)
    d["pole_mag_range"] = list(config.pole_mag_range)
    d["pole_phase_range"] = list(config.pole_phase_range)
    return d


def write_task_csv(
    config: TaskStreamConfig, n_tasks: int, csv_path, sidecar_path, start: int = 0, pool=None
) -> None:
    """Columnar dump: one row per time step (task_id, segment, k, u, y),
    k is 1-based within its segment. The sidecar holds the stream config."""
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["task_id", "segment", "k", "u", "y"])
        for offset in range(0, n_tasks, 64):
            chunk = min(64, n_tasks - offset)
            for j, task in enumerate(
                generate_batch(config, start + offset, chunk, pool=pool)
            ):
                tid = start + offset + j
                for k, (u, y) in enumerate(zip(task.context_u, task.context_y), start=1):
                    writer.writerow([tid, "context", k, repr(float(u)), repr(float(y))])
                for k, (u, y) in enumerate(zip(task.query_u, task.query_y), start=1):
                    writer.writerow([tid, "query", k, repr(float(u)), repr(float(y))])
    sidecar = {
        "stream_config": stream_config_to_dict(config),
        "n_tasks": n_tasks,
        "start_index": start,
    }
    with open(sidecar_path, "w") as fh:
        json.dump(sidecar, fh, indent=2, sort_keys=True)
        fh.write("\n")
