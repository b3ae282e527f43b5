"""Encoder-decoder Transformer emitting per-step predictive mean and
standard deviation over a query horizon, with exact reverse-mode gradients.

The encoder reads the m context (u, y) pairs; the decoder reads the c
initial-condition (u, y) pairs followed by the remaining query inputs,
attends causally over itself and fully over the encoder output, and two
linear heads emit the mean and the log of the standard deviation per
predicted step. The standard deviation is exp of a clamped log-std head,
so it is strictly positive for any finite parameters.

Parameters are a flat ordered mapping name -> numpy array; gradients use
the identical structure. Training runs in float32; gradient-check mode
uses float64 (pass dtype to init_params).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, NumericError
from .sysgen import TaskDataset

LOG_STD_CLAMP = 10.0
_HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)

ModelParams = dict[str, np.ndarray]
GradientBundle = dict[str, np.ndarray]

# risk_fn contract for loss_and_grad: (mu, log_sigma, targets) -> per-task
# risk tensor of shape (batch,). mu/log_sigma are (batch, horizon) tensors.
RiskFn = Callable[[Tensor, Tensor, np.ndarray], Tensor]


@dataclass(frozen=True)
class ModelConfig:
    d_model: int = 64
    n_heads: int = 4
    n_encoder_layers: int = 3
    n_decoder_layers: int = 3
    d_ff: int = 128
    max_context_len: int = 400
    max_query_len: int = 130
    layernorm_epsilon: float = 1e-5
    positional_encoding: str = "sinusoidal"

    def __post_init__(self):
        if self.d_model < 1 or self.d_model % self.n_heads != 0:
            raise ConfigError(
                f"model.d_model: {self.d_model} not divisible by n_heads={self.n_heads}"
            )
        if self.n_encoder_layers < 0 or self.n_decoder_layers < 0:
            raise ConfigError("model: layer counts must be >= 0")
        if self.d_ff < 1:
            raise ConfigError("model.d_ff: must be >= 1")
        if not self.layernorm_epsilon > 0.0:
            raise ConfigError("model.layernorm_epsilon: must be > 0")
        if self.positional_encoding != "sinusoidal":
            raise ConfigError(
                f"model.positional_encoding: unsupported {self.positional_encoding!r}"
            )
        if self.max_context_len < 1 or self.max_query_len < 2:
            raise ConfigError("model: max lengths too small")


# Documented full-scale reference (not the desk-scale default): lands within
# 10% of 5.5M parameters.
FULL_SCALE_REFERENCE = ModelConfig(
    d_model=128,
    n_heads=8,
    n_encoder_layers=12,
    n_decoder_layers=12,
    d_ff=512,
)


@dataclass(frozen=True)
class PredictiveOutput:
    mu: np.ndarray
    sigma: np.ndarray

    def __post_init__(self):
        if self.mu.shape != self.sigma.shape:
            raise ValueError("mu and sigma shapes differ")


# ---------------------------------------------------------------------------
# Parameter layout
# ---------------------------------------------------------------------------


def _attn_shapes(prefix: str, d: int, cross: bool) -> list[tuple[str, tuple]]:
    if cross:
        return [
            (f"{prefix}.w_q", (d, d)),
            (f"{prefix}.b_q", (d,)),
            (f"{prefix}.w_kv", (d, 2 * d)),
            (f"{prefix}.b_kv", (2 * d,)),
            (f"{prefix}.w_out", (d, d)),
            (f"{prefix}.b_out", (d,)),
        ]
    return [
        (f"{prefix}.w_qkv", (d, 3 * d)),
        (f"{prefix}.b_qkv", (3 * d,)),
        (f"{prefix}.w_out", (d, d)),
        (f"{prefix}.b_out", (d,)),
    ]


def param_shapes(config: ModelConfig) -> list[tuple[str, tuple]]:
    """Ordered (name, shape) layout; init, counting and checkpoints share it."""
    d, f = config.d_model, config.d_ff
    shapes: list[tuple[str, tuple]] = [
        ("enc_embed.w", (2, d)),
        ("enc_embed.b", (d,)),
        ("dec_ic_embed.w", (2, d)),
        ("dec_ic_embed.b", (d,)),
        ("dec_in_embed.w", (1, d)),
        ("dec_in_embed.b", (d,)),
    ]
    for i in range(config.n_encoder_layers):
        shapes += [(f"enc.{i}.ln1.g", (d,)), (f"enc.{i}.ln1.b", (d,))]
        shapes += _attn_shapes(f"enc.{i}.attn", d, cross=False)
        shapes += [(f"enc.{i}.ln2.g", (d,)), (f"enc.{i}.ln2.b", (d,))]
        shapes += [
            (f"enc.{i}.ff.w1", (d, f)),
            (f"enc.{i}.ff.b1", (f,)),
            (f"enc.{i}.ff.w2", (f, d)),
            (f"enc.{i}.ff.b2", (d,)),
        ]
    shapes += [("enc.final_ln.g", (d,)), ("enc.final_ln.b", (d,))]
    for i in range(config.n_decoder_layers):
        shapes += [(f"dec.{i}.ln1.g", (d,)), (f"dec.{i}.ln1.b", (d,))]
        shapes += _attn_shapes(f"dec.{i}.self_attn", d, cross=False)
        shapes += [(f"dec.{i}.ln2.g", (d,)), (f"dec.{i}.ln2.b", (d,))]
        shapes += _attn_shapes(f"dec.{i}.cross_attn", d, cross=True)
        shapes += [(f"dec.{i}.ln3.g", (d,)), (f"dec.{i}.ln3.b", (d,))]
        shapes += [
            (f"dec.{i}.ff.w1", (d, f)),
            (f"dec.{i}.ff.b1", (f,)),
            (f"dec.{i}.ff.w2", (f, d)),
            (f"dec.{i}.ff.b2", (d,)),
        ]
    shapes += [("dec.final_ln.g", (d,)), ("dec.final_ln.b", (d,))]
    shapes += [
        ("head_mean.w", (d, 1)),
        ("head_mean.b", (1,)),
        ("head_logstd.w", (d, 1)),
        ("head_logstd.b", (1,)),
    ]
    return shapes


def param_count(config: ModelConfig) -> int:
    return sum(int(np.prod(shape)) for _, shape in param_shapes(config))


_HEAD_INIT_STD = 0.02


def init_params(
    config: ModelConfig, rng: np.random.Generator, dtype=np.float32
) -> ModelParams:
    """Fan-in-scaled normal weights, unit layer-norm gains, zero biases.

    Output heads get a small fixed scale and zero bias, so the initial
    predictive standard deviation sits near 1.
    """
    params: ModelParams = {}
    for name, shape in param_shapes(config):
        leaf = name.rsplit(".", 1)[-1]
        if leaf in ("g",):
            arr = np.ones(shape)
        elif leaf.startswith("b"):
            arr = np.zeros(shape)
        elif name.startswith("head_"):
            arr = rng.standard_normal(shape) * _HEAD_INIT_STD
        else:
            arr = rng.standard_normal(shape) / math.sqrt(shape[0])
        params[name] = arr.astype(dtype)
    return params


def validate_params(params: ModelParams) -> None:
    for name, arr in params.items():
        if not np.isfinite(arr).all():
            raise NumericError(f"parameter {name!r} contains non-finite entries")


# ---------------------------------------------------------------------------
# Forward graph
# ---------------------------------------------------------------------------

_PE_CACHE: dict[tuple, np.ndarray] = {}


def _positional_encoding(length: int, d_model: int, dtype) -> np.ndarray:
    key = (length, d_model, np.dtype(dtype).str)
    pe = _PE_CACHE.get(key)
    if pe is None:
        pos = np.arange(length)[:, None].astype(float)
        i = np.arange(0, d_model, 2)[None, :].astype(float)
        angle = pos / np.power(10000.0, i / d_model)
        pe = np.zeros((length, d_model))
        pe[:, 0::2] = np.sin(angle)
        pe[:, 1::2] = np.cos(angle[:, : d_model - d_model // 2])
        pe = pe.astype(dtype)
        _PE_CACHE[key] = pe
    return pe


def _split_heads(x: Tensor, n_heads: int) -> Tensor:
    b, t, d = x.shape
    dk = d // n_heads
    return ad.transpose(ad.reshape(x, (b, t, n_heads, dk)), (0, 2, 1, 3))


def _merge_heads(x: Tensor) -> Tensor:
    b, h, t, dk = x.shape
    return ad.reshape(ad.transpose(x, (0, 2, 1, 3)), (b, t, h * dk))


def _attention(
    q: Tensor, k: Tensor, v: Tensor, n_heads: int, mask: np.ndarray | None
) -> Tensor:
    dk = q.shape[-1] // n_heads
    qh = _split_heads(ad.mul(q, 1.0 / math.sqrt(dk)), n_heads)
    kh = _split_heads(k, n_heads)
    vh = _split_heads(v, n_heads)
    scores = ad.matmul(qh, ad.transpose(kh, (0, 1, 3, 2)))
    weights = ad.masked_softmax(scores, mask)
    return _merge_heads(ad.matmul(weights, vh))


def _self_attention_block(p, prefix: str, x: Tensor, cfg: ModelConfig, mask) -> Tensor:
    qkv = ad.linear(x, p[f"{prefix}.w_qkv"], p[f"{prefix}.b_qkv"])
    d = cfg.d_model
    q, k, v = qkv[:, :, 0:d], qkv[:, :, d:2 * d], qkv[:, :, 2 * d:3 * d]
    att = _attention(q, k, v, cfg.n_heads, mask)
    return ad.linear(att, p[f"{prefix}.w_out"], p[f"{prefix}.b_out"])


def _cross_attention_block(p, prefix: str, x: Tensor, enc: Tensor, cfg: ModelConfig) -> Tensor:
    q = ad.linear(x, p[f"{prefix}.w_q"], p[f"{prefix}.b_q"])
    kv = ad.linear(enc, p[f"{prefix}.w_kv"], p[f"{prefix}.b_kv"])
    d = cfg.d_model
    k, v = kv[:, :, 0:d], kv[:, :, d:2 * d]
    att = _attention(q, k, v, cfg.n_heads, None)
    return ad.linear(att, p[f"{prefix}.w_out"], p[f"{prefix}.b_out"])


def _ff_block(p, prefix: str, x: Tensor) -> Tensor:
    h = ad.gelu(ad.linear(x, p[f"{prefix}.w1"], p[f"{prefix}.b1"]))
    return ad.linear(h, p[f"{prefix}.w2"], p[f"{prefix}.b2"])


def _ln(p, prefix: str, x: Tensor, eps: float) -> Tensor:
    return ad.layer_norm(x, p[f"{prefix}.g"], p[f"{prefix}.b"], eps)


def _run_graph(
    p: Mapping[str, Tensor],
    cfg: ModelConfig,
    ctx: np.ndarray,  # (B, m, 2)
    ic: np.ndarray,  # (B, c, 2)
    qin: np.ndarray,  # (B, n - c, 1)
) -> tuple[Tensor, Tensor]:
    """Returns (mu, log_sigma) tensors of shape (B, n - c)."""
    eps = cfg.layernorm_epsilon
    dtype = p["enc_embed.w"].dtype
    m = ctx.shape[1]
    c = ic.shape[1]
    n = c + qin.shape[1]

    h = ad.add(
        ad.linear(Tensor(ctx), p["enc_embed.w"], p["enc_embed.b"]),
        _positional_encoding(m, cfg.d_model, dtype)[None, :, :],
    )
    for i in range(cfg.n_encoder_layers):
        h = ad.add(h, _self_attention_block(p, f"enc.{i}.attn", _ln(p, f"enc.{i}.ln1", h, eps), cfg, None))
        h = ad.add(h, _ff_block(p, f"enc.{i}.ff", _ln(p, f"enc.{i}.ln2", h, eps)))
    enc_out = _ln(p, "enc.final_ln", h, eps)

    dec_in = ad.concat(
        [
            ad.linear(Tensor(ic), p["dec_ic_embed.w"], p["dec_ic_embed.b"]),
            ad.linear(Tensor(qin), p["dec_in_embed.w"], p["dec_in_embed.b"]),
        ],
        axis=1,
    )
    g = ad.add(dec_in, _positional_encoding(n, cfg.d_model, dtype)[None, :, :])
    causal = np.tril(np.ones((n, n), dtype=bool))[None, None, :, :]
    for i in range(cfg.n_decoder_layers):
        g = ad.add(g, _self_attention_block(p, f"dec.{i}.self_attn", _ln(p, f"dec.{i}.ln1", g, eps), cfg, causal))
        g = ad.add(g, _cross_attention_block(p, f"dec.{i}.cross_attn", _ln(p, f"dec.{i}.ln2", g, eps), enc_out, cfg))
        g = ad.add(g, _ff_block(p, f"dec.{i}.ff", _ln(p, f"dec.{i}.ln3", g, eps)))
    dec_out = _ln(p, "dec.final_ln", g, eps)

    pred = dec_out[:, c:, :]
    b = pred.shape[0]
    mu = ad.reshape(ad.linear(pred, p["head_mean.w"], p["head_mean.b"]), (b, n - c))
    s = ad.reshape(ad.linear(pred, p["head_logstd.w"], p["head_logstd.b"]), (b, n - c))
    log_sigma = ad.clip(s, -LOG_STD_CLAMP, LOG_STD_CLAMP)
    return mu, log_sigma


def _stack_tasks(tasks: Sequence[TaskDataset], cfg: ModelConfig, dtype):
    m = len(tasks[0].context_u)
    n = len(tasks[0].query_u)
    c = tasks[0].init_len
    if m > cfg.max_context_len:
        raise ValueError(f"context length {m} exceeds max_context_len={cfg.max_context_len}")
    if n > cfg.max_query_len:
        raise ValueError(f"query length {n} exceeds max_query_len={cfg.max_query_len}")
    for t in tasks:
        if len(t.context_u) != m or len(t.query_u) != n or t.init_len != c:
            raise ValueError("all tasks in a batch must share (m, n, c)")
    ctx = np.stack([np.stack([t.context_u, t.context_y], axis=-1) for t in tasks]).astype(dtype)
    ic = np.stack(
        [np.stack([t.query_u[:c], t.query_y[:c]], axis=-1) for t in tasks]
    ).astype(dtype)
    qin = np.stack([t.query_u[c:, None] for t in tasks]).astype(dtype)
    targets = np.stack([t.query_y[c:] for t in tasks]).astype(dtype)
    return ctx, ic, qin, targets


def _as_tensors(params: ModelParams) -> dict[str, Tensor]:
    return {name: Tensor(arr) for name, arr in params.items()}


# ---------------------------------------------------------------------------
# Public operations
# ---------------------------------------------------------------------------


_FORWARD_CHUNK = 32


def forward_batch(
    params: ModelParams, config: ModelConfig, tasks: Sequence[TaskDataset]
) -> list[PredictiveOutput]:
    """Inference pass over a batch of structurally identical tasks.

    Internally processed in fixed-size chunks to bound attention memory;
    each task's output does not depend on the chunking.
    """
    dtype = next(iter(params.values())).dtype
    leaves = _as_tensors(params)
    outputs: list[PredictiveOutput] = []
    for lo in range(0, len(tasks), _FORWARD_CHUNK):
        part = tasks[lo:lo + _FORWARD_CHUNK]
        ctx, ic, qin, _ = _stack_tasks(part, config, dtype)
        with ad.no_grad():
            mu, log_sigma = _run_graph(leaves, config, ctx, ic, qin)
        mu_d, sig_d = mu.data, np.exp(log_sigma.data)
        if not (np.isfinite(mu_d).all() and np.isfinite(sig_d).all()):
            raise NumericError("forward pass produced non-finite predictions")
        outputs.extend(PredictiveOutput(mu=mu_d[i], sigma=sig_d[i]) for i in range(len(part)))
    return outputs


def forward(params: ModelParams, config: ModelConfig, task: TaskDataset) -> PredictiveOutput:
    """Predictive mean and standard deviation for one task's query horizon."""
    return forward_batch(params, config, [task])[0]


def kl_risk_fn(mu: Tensor, log_sigma: Tensor, targets: np.ndarray) -> Tensor:
    """Per-step-averaged Gaussian negative log likelihood (KL risk up to the
    entropy constant of the data distribution)."""
    resid = ad.add(mu, -targets)
    sq = ad.square(ad.mul(resid, ad.exp(ad.mul(log_sigma, -1.0))))
    step_terms = ad.add(ad.add(log_sigma, _HALF_LOG_2PI), ad.mul(sq, 0.5))
    return ad.mean(step_terms, axis=1)


def rmse_risk_fn(mu: Tensor, log_sigma: Tensor, targets: np.ndarray) -> Tensor:
    """Per-task root mean squared error; ignores the predicted deviation."""
    del log_sigma
    return ad.sqrt(ad.mean(ad.square(ad.add(mu, -targets)), axis=1))


RISK_FNS: dict[str, RiskFn] = {"kl": kl_risk_fn, "rmse": rmse_risk_fn}


def loss_and_grad(
    params: ModelParams,
    config: ModelConfig,
    batch: Sequence[TaskDataset],
    risk_fn: RiskFn,
) -> tuple[float, GradientBundle]:
    """Mean per-task risk over the batch and its exact gradient for every
    parameter (zero arrays for parameters the risk does not touch)."""
    if len(batch) == 0:
        raise ValueError("batch must be nonempty")
    dtype = next(iter(params.values())).dtype
    ctx, ic, qin, targets = _stack_tasks(batch, config, dtype)
    leaves = _as_tensors(params)
    mu, log_sigma = _run_graph(leaves, config, ctx, ic, qin)
    loss = ad.mean(risk_fn(mu, log_sigma, targets))
    loss_val = float(loss.data)
    if not math.isfinite(loss_val):
        raise NumericError(f"non-finite training loss: {loss_val}")
    loss.backward()
    grads: GradientBundle = {}
    for name, leaf in leaves.items():
        grads[name] = leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data)
    return loss_val, grads


def task_risks(
    params: ModelParams,
    config: ModelConfig,
    tasks: Sequence[TaskDataset],
    risk: str,
) -> np.ndarray:
    """Forward-only per-task risks (used for tail selection and validation)."""
    dtype = next(iter(params.values())).dtype
    ctx, ic, qin, targets = _stack_tasks(tasks, config, dtype)
    with ad.no_grad():
        mu, log_sigma = _run_graph(_as_tensors(params), config, ctx, ic, qin)
        values = RISK_FNS[risk](mu, log_sigma, targets).data
    if not np.isfinite(values).all():
        raise NumericError("non-finite task risk during selection pass")
    return np.asarray(values, dtype=float)
