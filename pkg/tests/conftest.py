import numpy as np
import pytest
from hypothesis import strategies as st

from tpmcu.model import ModelConfig


def divisors(n):
    return [d for d in range(1, n + 1) if n % d == 0]


def chip_counts(cfg):
    """Every chip count the planner accepts for ``cfg``."""
    return [d for d in divisors(cfg.num_heads) if cfg.intermediate_dim % d == 0]


def small_config(rng, mode=None, causal=None):
    """Random small block: E <= 64, H in {1,2,4,8}, F <= 128 (a multiple of H), S <= 8."""
    H = int(rng.choice([1, 2, 4, 8]))
    P = int(rng.integers(1, 64 // H + 1))
    F = H * int(rng.integers(1, 128 // H + 1))
    S = int(rng.integers(1, 9))
    mode = mode or str(rng.choice(["prompt", "autoregressive"]))
    return ModelConfig(
        seq_len=S,
        embed_dim=P * H,
        head_dim=P,
        num_heads=H,
        intermediate_dim=F,
        mode=mode,
        kv_cache_len=S if mode == "autoregressive" else 0,
        causal=bool(rng.integers(2)) if causal is None else causal,
        norm=str(rng.choice(["layer", "rms"])),
    )


@st.composite
def configs(draw, max_heads=16, max_p=16, max_f_mult=8, b=None):
    H = draw(st.sampled_from([h for h in (1, 2, 4, 8, 16, 32, 64) if h <= max_heads]))
    P = draw(st.integers(1, max_p))
    F = H * draw(st.integers(1, max_f_mult))
    return ModelConfig(
        seq_len=draw(st.integers(1, 8)),
        embed_dim=P * H,
        head_dim=P,
        num_heads=H,
        intermediate_dim=F,
        bytes_per_elem=b or draw(st.sampled_from([1, 2, 4])),
    )


@pytest.fixture
def rng():
    return np.random.default_rng(0)
