import numpy as np
import pytest

from tinymoe.data import ByteTokenizer, build_windows, split_train_val, synthetic_stories, token_stream
from tinymoe.model import ModelConfig
from tinymoe.moe import MoEConfig
from tinymoe.trainer import TrainConfig


@pytest.fixture(scope="session")
def tiny_corpus():
    """About 200 byte-level windows of 32 tokens."""
    tok = ByteTokenizer()
    ds = build_windows(token_stream(synthetic_stories(30, seed=0), tok), 32, tok.vocab_size)
    return split_train_val(ds, 0.9, 1337)


@pytest.fixture
def tiny_moe_cfg():
    return ModelConfig(vocab_size=257, d_model=32, n_layers=2, n_query_heads=2, n_kv_heads=1, context_len=32,
                       moe=MoEConfig(n_experts=4, top_k=2, expert_hidden=32), dropout_p=0.1)


@pytest.fixture
def tiny_train_cfg():
    return TrainConfig(lr_max=3e-3, lr_min=3e-4, batch_size=8, grad_accum=2, total_steps=20, eval_every=10,
                       eval_at_epoch_end=False, eval_max_batches=2, seed=1337)


def pytest_configure(config):
    np.seterr(over="ignore")
