import numpy as np
import pytest
from hypothesis import settings

from tailsid import metamodel, sysgen

settings.register_profile("suite", deadline=None, derandomize=True)
settings.load_profile("suite")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def tiny_model_config():
    return metamodel.ModelConfig(
        d_model=8,
        n_heads=2,
        n_encoder_layers=1,
        n_decoder_layers=1,
        d_ff=16,
        max_context_len=24,
        max_query_len=12,
    )


@pytest.fixture
def tiny_stream_config():
    return sysgen.TaskStreamConfig(
        seed=42, m=12, n=8, c=3, order_range=(1, 2), washout=30
    )


@pytest.fixture
def tiny_task(tiny_stream_config):
    return sysgen.task_at(tiny_stream_config, 0)
