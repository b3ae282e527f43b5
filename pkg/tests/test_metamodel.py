"""Meta model contract tests: shapes, positivity, causality, gradients."""

import dataclasses

import numpy as np
import pytest

from tailsid import sysgen
from tailsid.errors import ConfigError, NumericError
from tailsid.metamodel import (
    FULL_SCALE_REFERENCE,
    ModelConfig,
    forward,
    init_params,
    kl_risk_fn,
    loss_and_grad,
    param_count,
    param_shapes,
    rmse_risk_fn,
    task_risks,
)
from tailsid.risk import gaussian_nll_risk, rmse_risk


def make_params(config, seed=0, dtype=np.float32):
    return init_params(config, np.random.default_rng(seed), dtype=dtype)


class TestParamCount:
    def test_degenerate_hand_count(self):
        cfg = ModelConfig(
            d_model=1, n_heads=1, n_encoder_layers=0, n_decoder_layers=0, d_ff=1
        )
        # embeddings 3+3+2, final layer norms 2+2, heads 2+2
        assert param_count(cfg) == 16

    def test_count_matches_initialized_arrays(self, tiny_model_config):
        params = make_params(tiny_model_config)
        assert param_count(tiny_model_config) == sum(a.size for a in params.values())
        assert [tuple(a.shape) for a in params.values()] == [
            s for _, s in param_shapes(tiny_model_config)
        ]

    def test_dff_doubling_delta(self):
        # Doubling d_ff grows w1/b1/w2 but not the d_model-sized output bias.
        base = ModelConfig(d_model=32, n_heads=4, d_ff=64)
        doubled = dataclasses.replace(base, d_ff=128)
        layers = base.n_encoder_layers + base.n_decoder_layers
        per_layer = 2 * base.d_model * base.d_ff + base.d_ff
        assert param_count(doubled) - param_count(base) == layers * per_layer

    def test_desk_scale_in_band(self):
        assert 1e4 < param_count(ModelConfig()) < 1e6

    def test_full_scale_reference_near_5p5m(self):
        assert abs(param_count(FULL_SCALE_REFERENCE) - 5.5e6) / 5.5e6 < 0.10


class TestInit:
    def test_bit_identical_given_seed(self, tiny_model_config):
        a = make_params(tiny_model_config, seed=9)
        b = make_params(tiny_model_config, seed=9)
        for name in a:
            np.testing.assert_array_equal(a[name], b[name])

    def test_sigma_near_one_after_init(self, tiny_model_config, tiny_stream_config):
        for seed in range(5):
            params = make_params(tiny_model_config, seed=seed)
            for idx in range(4):
                task = sysgen.task_at(tiny_stream_config, idx)
                out = forward(params, tiny_model_config, task)
                assert ((out.sigma > 0.1) & (out.sigma < 10.0)).all()

    def test_config_validation(self):
        with pytest.raises(ConfigError):
            ModelConfig(d_model=10, n_heads=4)
        with pytest.raises(ConfigError):
            ModelConfig(layernorm_epsilon=0.0)
        with pytest.raises(ConfigError):
            ModelConfig(positional_encoding="learned")


class TestForward:
    def test_output_lengths(self, tiny_model_config, tiny_task):
        out = forward(make_params(tiny_model_config), tiny_model_config, tiny_task)
        horizon = len(tiny_task.query_u) - tiny_task.init_len
        assert out.mu.shape == (horizon,)
        assert out.sigma.shape == (horizon,)
        assert (out.sigma > 0).all()

    def test_default_horizon_is_100(self):
        cfg = ModelConfig()
        task = sysgen.task_at(sysgen.TaskStreamConfig(seed=3), 0)
        out = forward(make_params(cfg), cfg, task)
        assert out.mu.shape == (100,)

    def test_zero_params_give_zero_mu_and_exp_bias_sigma(self, tiny_model_config, tiny_task):
        params = {k: np.zeros_like(v) for k, v in make_params(tiny_model_config).items()}
        params["head_logstd.b"] = np.array([0.3], dtype=np.float32)
        out = forward(params, tiny_model_config, tiny_task)
        np.testing.assert_array_equal(out.mu, 0.0)
        np.testing.assert_allclose(out.sigma, np.exp(np.float32(0.3)), rtol=1e-6)

    def test_deterministic(self, tiny_model_config, tiny_task):
        params = make_params(tiny_model_config)
        a = forward(params, tiny_model_config, tiny_task)
        b = forward(params, tiny_model_config, tiny_task)
        np.testing.assert_array_equal(a.mu, b.mu)
        np.testing.assert_array_equal(a.sigma, b.sigma)

    def test_length_overflow_rejected(self, tiny_model_config, tiny_stream_config):
        long_cfg = dataclasses.replace(tiny_stream_config, m=100)
        task = sysgen.task_at(long_cfg, 0)
        with pytest.raises(ValueError, match="max_context_len"):
            forward(make_params(tiny_model_config), tiny_model_config, task)

    def test_context_permutation_changes_output(self, tiny_model_config, tiny_task):
        params = make_params(tiny_model_config)
        base = forward(params, tiny_model_config, tiny_task)
        perm = np.random.default_rng(0).permutation(len(tiny_task.context_u))
        permuted = dataclasses.replace(
            tiny_task, context_u=tiny_task.context_u[perm], context_y=tiny_task.context_y[perm]
        )
        out = forward(params, tiny_model_config, permuted)
        assert not np.array_equal(out.mu, base.mu)

    def test_causality_bitwise(self, tiny_model_config, tiny_task):
        params = make_params(tiny_model_config)
        base = forward(params, tiny_model_config, tiny_task)
        c = tiny_task.init_len
        n = len(tiny_task.query_u)
        for k in range(c + 1, n):
            bumped_u = tiny_task.query_u.copy()
            bumped_u[k] += 5.0
            out = forward(
                params, tiny_model_config, dataclasses.replace(tiny_task, query_u=bumped_u)
            )
            np.testing.assert_array_equal(out.mu[: k - c], base.mu[: k - c])
            np.testing.assert_array_equal(out.sigma[: k - c], base.sigma[: k - c])
            assert not np.array_equal(out.mu[k - c :], base.mu[k - c :])

    def test_nonfinite_params_raise_numeric_error(self, tiny_model_config, tiny_task):
        params = make_params(tiny_model_config)
        params["enc_embed.w"] = params["enc_embed.w"] * np.nan
        with pytest.raises(NumericError):
            forward(params, tiny_model_config, tiny_task)


class TestLossAndGrad:
    def test_duplicated_task_matches_single(self, tiny_model_config, tiny_task):
        params = make_params(tiny_model_config)
        l1, g1 = loss_and_grad(params, tiny_model_config, [tiny_task], kl_risk_fn)
        l2, g2 = loss_and_grad(params, tiny_model_config, [tiny_task, tiny_task], kl_risk_fn)
        assert l1 == pytest.approx(l2, rel=1e-6)
        for name in g1:
            np.testing.assert_allclose(g2[name], g1[name], rtol=1e-4, atol=1e-8)

    def test_constant_risk_gives_zero_gradient(self, tiny_model_config, tiny_task):
        from tailsid import autodiff as ad

        def constant_risk(mu, log_sigma, targets):
            return ad.Tensor(np.full(targets.shape[0], 2.5, dtype=targets.dtype))

        loss, grads = loss_and_grad(params := make_params(tiny_model_config),
                                    tiny_model_config, [tiny_task], constant_risk)
        assert loss == 2.5
        for name, g in grads.items():
            assert g.shape == params[name].shape
            np.testing.assert_array_equal(g, 0.0)

    def test_empty_batch_rejected(self, tiny_model_config):
        with pytest.raises(ValueError):
            loss_and_grad(make_params(tiny_model_config), tiny_model_config, [], kl_risk_fn)

    def test_graph_risks_match_plain_risks(self, tiny_model_config, tiny_stream_config):
        params = make_params(tiny_model_config, dtype=np.float64)
        tasks = [sysgen.task_at(tiny_stream_config, i) for i in range(3)]
        kl_values = task_risks(params, tiny_model_config, tasks, "kl")
        rmse_values = task_risks(params, tiny_model_config, tasks, "rmse")
        for i, task in enumerate(tasks):
            out = forward(params, tiny_model_config, task)
            assert kl_values[i] == pytest.approx(gaussian_nll_risk(task.target, out), rel=1e-10)
            assert rmse_values[i] == pytest.approx(rmse_risk(task.target, out), rel=1e-10)


def central_difference(params, config, tasks, risk_fn, name, index, h=1e-4):
    flat = params[name].ravel()
    orig = flat[index]
    flat[index] = orig + h
    lp, _ = loss_and_grad(params, config, tasks, risk_fn)
    flat[index] = orig - h
    lm, _ = loss_and_grad(params, config, tasks, risk_fn)
    flat[index] = orig
    return (lp - lm) / (2.0 * h)


@pytest.mark.parametrize("risk_fn", [kl_risk_fn, rmse_risk_fn], ids=["kl", "rmse"])
def test_gradients_match_finite_differences(tiny_model_config, tiny_stream_config, risk_fn):
    assert param_count(tiny_model_config) <= 5000
    check_rng = np.random.default_rng(77)
    for pair in range(3):
        params = make_params(tiny_model_config, seed=pair, dtype=np.float64)
        tasks = [sysgen.task_at(tiny_stream_config, 10 + pair)]
        _, grads = loss_and_grad(params, tiny_model_config, tasks, risk_fn)
        for name in params:
            flat = params[name].ravel()
            k = min(3, flat.size)
            for index in check_rng.choice(flat.size, size=k, replace=False):
                fd = central_difference(params, tiny_model_config, tasks, risk_fn, name, index)
                analytic = grads[name].ravel()[index]
                if max(abs(fd), abs(analytic)) < 1e-6:
                    assert abs(fd - analytic) < 1e-6
                else:
                    assert abs(fd - analytic) / max(abs(fd), abs(analytic)) < 1e-4
