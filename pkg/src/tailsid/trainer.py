"""Training engine: expected-loss steps, tail-selection steps, AdamW updates,
the two-stage standard-then-robust schedule, validation cadence and logs.

Every random quantity is a pure function of (seed, iteration index): the
batch for iteration j consists of stream tasks [j*b, (j+1)*b) and the v-th
validation round reads its own dedicated stream, so an interrupted run
resumed from a checkpoint continues bit-identically.
"""

from __future__ import annotations

import dataclasses
import json
import math
import os
import time
from dataclasses import dataclass, field

import numpy as np

from . import metamodel
from .checkpoint import load_full_checkpoint, save_checkpoint
from .errors import ConfigError, NumericError
from .metamodel import GradientBundle, ModelConfig, ModelParams
from .risk import RiskVector, TailSpec, select_tail
from .seeds import derive_seed
from .sysgen import TaskDataset, TaskStreamConfig, generate_batch, stream_config_to_dict, task_at

VALIDATION_BATCH = 256


@dataclass(frozen=True)
class TrainConfig:
    mode: str = "standard"  # standard | robust
    batch_size: int = 32
    tail_fraction: float = 0.4
    learning_rate: float = 1e-4
    weight_decay: float = 1e-2
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_epsilon: float = 1e-8
    max_iter: int = 1000
    stage1_iters: int = 0
    seed: int = 0
    validation_every: int = 2000
    risk: str = "kl"

    def __post_init__(self):
        if self.mode not in ("standard", "robust"):
            raise ConfigError(f"train.mode: unknown mode {self.mode!r}")
        if self.batch_size < 1:
            raise ConfigError("train.batch_size: must be >= 1")
        if not 0.0 < self.tail_fraction <= 1.0:
            raise ConfigError("train.tail_fraction: must be in (0, 1]")
        if self.mode == "robust":
            TailSpec(self.tail_fraction).count(self.batch_size)
        if not self.learning_rate > 0.0:
            raise ConfigError("train.learning_rate: must be > 0")
        if self.weight_decay < 0.0:
            raise ConfigError("train.weight_decay: must be >= 0")
        for name in ("adam_beta1", "adam_beta2"):
            if not 0.0 <= getattr(self, name) < 1.0:
                raise ConfigError(f"train.{name}: must be in [0, 1)")
        if not self.adam_epsilon >= 0.0:
            raise ConfigError("train.adam_epsilon: must be >= 0")
        if self.max_iter < 1:
            raise ConfigError("train.max_iter: must be >= 1")
        if not 0 <= self.stage1_iters <= self.max_iter:
            raise ConfigError("train.stage1_iters: must be in [0, max_iter]")
        if self.seed < 0 or self.seed >= 2**64:
            raise ConfigError("train.seed: must be an unsigned 64-bit integer")
        if self.validation_every < 1:
            raise ConfigError("train.validation_every: must be >= 1")
        if self.risk not in metamodel.RISK_FNS:
            raise ConfigError(f"train.risk: unknown risk {self.risk!r}")


@dataclass
class OptimizerState:
    first_moment: dict[str, np.ndarray]
    second_moment: dict[str, np.ndarray]
    step_count: int = 0


def init_optimizer_state(params: ModelParams) -> OptimizerState:
    return OptimizerState(
        first_moment={k: np.zeros_like(v) for k, v in params.items()},
        second_moment={k: np.zeros_like(v) for k, v in params.items()},
        step_count=0,
    )


def adamw_update(
    params: ModelParams,
    grads: GradientBundle,
    state: OptimizerState,
    config,
) -> tuple[ModelParams, OptimizerState]:
    """Bias-corrected adaptive moment update with decoupled weight decay.

    Pure: returns fresh parameter and state containers. `config` only needs
    the learning_rate / weight_decay / adam_* attributes of TrainConfig.
    """
    if set(grads) != set(params):
        raise ValueError("gradient bundle does not match parameter names")
    lr = config.learning_rate
    wd = config.weight_decay
    b1, b2, eps = config.adam_beta1, config.adam_beta2, config.adam_epsilon
    t = state.step_count + 1
    c1 = 1.0 / (1.0 - b1**t)
    c2 = 1.0 / (1.0 - b2**t)
    new_params: ModelParams = {}
    new_m: dict[str, np.ndarray] = {}
    new_v: dict[str, np.ndarray] = {}
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(f"gradient shape mismatch for {name!r}")
        if not np.isfinite(g).all():
            raise NumericError(f"non-finite gradient for {name!r}")
        m = state.first_moment[name] * b1 + g * (1.0 - b1)
        v = state.second_moment[name] * b2 + g * g * (1.0 - b2)
        step = (m * c1) / (np.sqrt(v * c2) + eps)
        new_params[name] = p * (1.0 - lr * wd) - lr * step
        new_m[name] = m
        new_v[name] = v
    return new_params, OptimizerState(new_m, new_v, t)


def _grad_norm(grads: GradientBundle) -> float:
    total = 0.0
    for g in grads.values():
        total += float(np.dot(g.ravel(), g.ravel()))
    return math.sqrt(total)


def standard_step(
    params: ModelParams,
    state: OptimizerState,
    tasks: list[TaskDataset],
    config: TrainConfig,
    model_config: ModelConfig,
) -> tuple[ModelParams, OptimizerState, dict]:
    """One expected-loss update: batch mean risk and its gradient."""
    t0 = time.perf_counter()
    risk_fn = metamodel.RISK_FNS[config.risk]
    loss, grads = metamodel.loss_and_grad(params, model_config, tasks, risk_fn)
    new_params, new_state = adamw_update(params, grads, state, config)
    record = {
        "batch_risk": loss,
        "tail_risk": loss,
        "var_estimate": loss,
        "grad_norm": _grad_norm(grads),
        "n_selected": len(tasks),
        "wall_time": time.perf_counter() - t0,
    }
    return new_params, new_state, record


def robust_step(
    params: ModelParams,
    state: OptimizerState,
    tasks: list[TaskDataset],
    config: TrainConfig,
    model_config: ModelConfig,
) -> tuple[ModelParams, OptimizerState, dict]:
    """One tail-selection update: score every task in a forward-only pass,
    keep the floor(q*b) highest-risk tasks, and descend their mean risk.

    The selected subset is processed in ascending batch position, so with
    q = 1 the update is bitwise identical to standard_step on the same batch.
    """
    t0 = time.perf_counter()
    values = metamodel.task_risks(params, model_config, tasks, config.risk)
    risks = RiskVector(values=values, task_ids=np.arange(len(tasks)))
    selected = select_tail(risks, TailSpec(config.tail_fraction))
    keep = np.sort(selected)
    subset = [tasks[i] for i in keep]
    risk_fn = metamodel.RISK_FNS[config.risk]
    loss, grads = metamodel.loss_and_grad(params, model_config, subset, risk_fn)
    new_params, new_state = adamw_update(params, grads, state, config)
    record = {
        "batch_risk": float(values.mean()),
        "tail_risk": loss,
        "var_estimate": float(values[selected].min()),
        "grad_norm": _grad_norm(grads),
        "n_selected": len(subset),
        "wall_time": time.perf_counter() - t0,
    }
    return new_params, new_state, record


@dataclass
class TrainLog:
    """Append-only per-iteration and per-validation records."""

    iterations: list[dict] = field(default_factory=list)
    validations: list[dict] = field(default_factory=list)

    def append_iteration(self, record: dict) -> None:
        if self.iterations and record["iteration"] <= self.iterations[-1]["iteration"]:
            raise ValueError("iteration records must be strictly increasing")
        self.iterations.append(record)

    def append_validation(self, record: dict) -> None:
        if self.validations and record["iteration"] <= self.validations[-1]["iteration"]:
            raise ValueError("validation records must be strictly increasing")
        self.validations.append(record)


def _validation_metrics(
    params: ModelParams,
    model_config: ModelConfig,
    tasks: list[TaskDataset],
    tail_fraction: float,
) -> tuple[float, float]:
    outs = metamodel.forward_batch(params, model_config, tasks)
    rmses = np.array(
        [float(np.sqrt(np.mean((t.target - o.mu) ** 2))) for t, o in zip(tasks, outs)]
    )
    spec = TailSpec(tail_fraction)
    sel = select_tail(RiskVector(rmses, np.arange(len(rmses))), spec)
    return float(rmses.mean()), float(rmses[sel].mean())


def _write_train_state(path, params, model_config, state, iteration, config, stream_config):
    aux = {f"opt.m.{k}": v for k, v in state.first_moment.items()}
    aux.update({f"opt.v.{k}": v for k, v in state.second_moment.items()})
    extra = {
        "kind": "train_state",
        "iteration": iteration,
        "step_count": state.step_count,
        "train_config": dataclasses.asdict(config),
        "stream_config": stream_config_to_dict(stream_config),
    }
    return save_checkpoint(params, model_config, path, extra=extra, aux_arrays=aux)


def load_train_state(path) -> tuple[ModelParams, ModelConfig, OptimizerState, int, dict]:
    """Rebuild (params, model config, optimizer state, next iteration, extra)
    from a checkpoint written during training."""
    arrays, model_config, extra = load_full_checkpoint(path)
    params = {k: v for k, v in arrays.items() if not k.startswith("opt.")}
    m = {k[len("opt.m."):]: v for k, v in arrays.items() if k.startswith("opt.m.")}
    v = {k[len("opt.v."):]: v for k, v in arrays.items() if k.startswith("opt.v.")}
    if set(m) != set(params) or set(v) != set(params):
        raise ConfigError(f"checkpoint {path} does not contain resumable optimizer state")
    state = OptimizerState(first_moment=m, second_moment=v, step_count=extra["step_count"])
    return params, model_config, state, int(extra["iteration"]), extra


class _LogWriter:
    """Streams records to `<out>/log.ndjson.partial`, renamed on completion."""

    def __init__(self, out_dir):
        self.final_path = os.path.join(out_dir, "log.ndjson")
        self.partial_path = self.final_path + ".partial"
        self._fh = open(self.partial_path, "w")

    def write(self, record: dict) -> None:
        self._fh.write(json.dumps(record, sort_keys=True) + "\n")

    def finalize(self) -> None:
        self._fh.flush()
        self._fh.close()
        os.replace(self.partial_path, self.final_path)

    def close_partial(self) -> None:
        if not self._fh.closed:
            self._fh.flush()
            self._fh.close()


def run_training(
    config: TrainConfig,
    model_config: ModelConfig,
    stream_config: TaskStreamConfig,
    out_dir,
    resume_from=None,
    pool=None,
) -> tuple[ModelParams, TrainLog]:
    """Stage 1 runs standard steps for stage1_iters iterations; afterwards the
    configured mode takes over. Writes `latest.ckpt` at every validation,
    `final.ckpt` and `log.ndjson` on completion.

    On a non-finite loss or gradient the last finite parameters are saved to
    `abort.ckpt` and NumericError (carrying that path) is raised.
    """
    os.makedirs(out_dir, exist_ok=True)
    if resume_from is not None:
        params, ck_model_config, state, start_iter, _ = load_train_state(resume_from)
        if ck_model_config != model_config:
            raise ConfigError("resume checkpoint model config differs from the requested one")
    else:
        params = metamodel.init_params(
            model_config, np.random.default_rng(derive_seed(config.seed, "init"))
        )
        state = init_optimizer_state(params)
        start_iter = 0
    if start_iter >= config.max_iter:
        raise ConfigError(
            f"resume iteration {start_iter} is already past max_iter={config.max_iter}"
        )

    val_stream = dataclasses.replace(
        stream_config, seed=derive_seed(stream_config.seed, "validation")
    )
    log = TrainLog()
    writer = _LogWriter(out_dir)
    b = config.batch_size

    def fetch(iteration: int):
        return generate_batch(stream_config, iteration * b, b, pool=pool)

    pending = None  # (iteration, async result) when prefetching via a pool
    try:
        for j in range(start_iter, config.max_iter):
            if pending is not None and pending[0] == j:
                tasks = pending[1].get()
            else:
                tasks = fetch(j)
            if pool is not None and j + 1 < config.max_iter:
                pending = (
                    j + 1,
                    pool.starmap_async(
                        task_at, [(stream_config, i) for i in range((j + 1) * b, (j + 2) * b)]
                    ),
                )
            robust_now = config.mode == "robust" and j >= config.stage1_iters
            step = robust_step if robust_now else standard_step
            try:
                params, state, record = step(params, state, tasks, config, model_config)
            except NumericError as exc:
                abort_path = os.path.join(out_dir, "abort.ckpt")
                _write_train_state(
                    abort_path, params, model_config, state, j, config, stream_config
                )
                writer.close_partial()
                raise NumericError(
                    f"training diverged at iteration {j}: {exc}", checkpoint_path=abort_path
                ) from exc
            record = {"type": "iteration", "iteration": j + 1, "mode": "robust" if robust_now else "standard", **record}
            log.append_iteration(record)
            writer.write(record)

            if (j + 1) % config.validation_every == 0:
                v = (j + 1) // config.validation_every - 1
                val_tasks = generate_batch(val_stream, v * VALIDATION_BATCH, VALIDATION_BATCH, pool=pool)
                mean_rmse, tail_rmse = _validation_metrics(
                    params, model_config, val_tasks, config.tail_fraction
                )
                val_record = {
                    "type": "validation",
                    "iteration": j + 1,
                    "val_mean_rmse": mean_rmse,
                    "val_tail_rmse": tail_rmse,
                }
                log.append_validation(val_record)
                writer.write(val_record)
                _write_train_state(
                    os.path.join(out_dir, "latest.ckpt"),
                    params, model_config, state, j + 1, config, stream_config,
                )
    except BaseException:
        writer.close_partial()
        raise

    _write_train_state(
        os.path.join(out_dir, "final.ckpt"),
        params, model_config, state, config.max_iter, config, stream_config,
    )
    writer.finalize()
    return params, log
