import pytest
import yaml
from hypothesis import given, settings, strategies as st

from tinymoe import config as C
from tinymoe.model import ModelConfig
from tinymoe.moe import MoEConfig
from tinymoe.trainer import TrainConfig


@pytest.mark.parametrize("name", C.BUNDLED)
def test_bundled_configs_roundtrip(name):
    cfg = C.load(name)
    again = C.parse(cfg.dump())
    assert again == cfg
    assert again.dump() == cfg.dump()


def test_full_configs_hold_reference_settings():
    moe = C.load("full_moe")
    assert (moe.model.d_model, moe.model.n_query_heads, moe.model.n_kv_heads) == (256, 4, 2)
    assert moe.model.moe == MoEConfig(4, 2, 1024, 1e-2, 1e-3, "grouped")
    t = moe.train
    assert (t.lr_max, t.lr_min, t.betas, t.weight_decay, t.clip_norm) == (3e-4, 3e-5, (0.9, 0.95), 0.1, 1.0)
    assert (t.batch_size, t.grad_accum, t.total_steps, t.eval_every, t.seed) == (16, 2, 26073, 250, 1337)
    da, dt = C.load("full_dense_active").model, C.load("full_dense_total").model
    assert (da.d_model, da.n_query_heads, da.ffn_hidden, da.head_dim) == (320, 10, 1120, 32)
    assert (dt.d_model, dt.n_query_heads, dt.ffn_hidden, dt.head_dim) == (384, 6, 1728, 64)
    for cfg in (moe.model, da, dt):
        assert (cfg.n_layers, cfg.context_len, cfg.dropout_p, cfg.rmsnorm_eps) == (4, 512, 0.1, 1e-5)


def test_unknown_keys_rejected_with_path():
    doc = yaml.safe_load(C.load("micro_moe").dump())
    doc["moe"]["capacity_factor"] = 1.25
    with pytest.raises(C.ConfigParseError) as exc:
        C.from_dict(doc)
    assert exc.value.key_path == "moe.capacity_factor"
    with pytest.raises(C.ConfigParseError, match="optimizer"):
        C.from_dict({**yaml.safe_load(C.load("micro_moe").dump()), "optimizer": {}})
    with pytest.raises(C.ConfigParseError, match="model"):
        C.from_dict({"train": {}})


def test_invalid_values_reported_by_section():
    doc = yaml.safe_load(C.load("micro_dense").dump())
    doc["model"]["n_kv_heads"] = 3
    with pytest.raises(C.ConfigParseError) as exc:
        C.from_dict(doc)
    assert exc.value.key_path == "model"


def test_missing_file():
    with pytest.raises(FileNotFoundError):
        C.load("/nonexistent/nowhere.yaml")


@settings(max_examples=30, deadline=None)
@given(
    st.sampled_from([(64, 4, 2), (96, 6, 3), (128, 4, 4)]),
    st.integers(1, 4),
    st.one_of(st.none(), st.tuples(st.integers(1, 8), st.integers(1, 8))),
    st.floats(1e-5, 1e-2),
    st.integers(1, 500),
)
def test_roundtrip_property(shape, layers, moe, lr, steps):
    d, nq, nkv = shape
    moe_cfg = MoEConfig(n_experts=max(moe), top_k=min(moe), expert_hidden=32) if moe else None
    cfg = C.ExperimentConfig(
        model=ModelConfig(300, d, layers, nq, nkv, ffn_hidden=None if moe else 4 * d, moe=moe_cfg),
        train=TrainConfig(lr_max=lr, lr_min=lr / 10, total_steps=steps),
        data=C.DataConfig("a.bin", "b.bin"),
        output=C.OutputConfig("runs/x"),
    )
    assert C.parse(cfg.dump()) == cfg
