import numpy as np
import pytest

from abn.data import ModelConfig
from abn.model import cast_params, init_params


def tiny_cfg(**kw):
    base = dict(C=8, T=12, D=6, n_samples=4, heads=4, dtype="float64", seed=3)
    base.update(kw)
    return ModelConfig(**base)


def bare_cfg(**kw):
    """Attention without residual/LN/FFN: the raw contract configuration."""
    kw.setdefault("encoder_residual", False)
    kw.setdefault("encoder_ffn", False)
    return tiny_cfg(**kw)


@pytest.fixture
def params64():
    cfg = tiny_cfg()
    return cast_params(init_params(cfg), np.float64), cfg
