import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tinymoe.diagnostics import LayerRouting, collapse_detector, collect, render_table, routing_stats
from tinymoe.moe import route
from tinymoe.tensor import Tensor
from tinymoe.trainer import train_run


def stats_from_logits(logits, k):
    d = route(Tensor(np.asarray(logits, np.float64)), Tensor(np.eye(np.shape(logits)[1])), k)
    return d, routing_stats(d.probs.data, d.topk_indices, d.lse.data)


def loop_oracle(probs, topk, lse):
    n, E = probs.shape
    counts = [0] * E
    for row in topk:
        for e in row:
            counts[e] += 1
    frac = [c / (n * topk.shape[1]) for c in counts]
    mean_f = sum(frac) / E
    ent = top = marg = 0.0
    for t in range(n):
        p = sorted(probs[t], reverse=True)
        ent += -sum(v * math.log(v) for v in probs[t] if v > 0)
        top += p[0]
        marg += p[0] - p[1]
    return dict(busiest_fraction=max(frac), usage_variance=sum((f - mean_f) ** 2 for f in frac) / E,
                mean_entropy=ent / n, mean_logz=sum(lse) / n, mean_top_gate=top / n, mean_margin=marg / n)


def test_uniform_case():
    _, s = stats_from_logits(np.zeros((4, 4)), 2)
    # ties go to experts 0 and 1 for every token, so usage is not uniform even though probs are
    assert s.mean_entropy == pytest.approx(math.log(4))
    assert s.mean_margin == 0.0
    balanced = routing_stats(np.full((4, 4), 0.25), np.array([[0, 1], [2, 3], [0, 1], [2, 3]]), np.zeros(4))
    assert balanced.busiest_fraction == 0.25 and balanced.usage_variance == 0.0
    assert balanced.mean_entropy == pytest.approx(1.3863, abs=1e-4)


def test_full_collapse_case():
    probs = np.zeros((5, 4))
    probs[:, 2] = 1.0
    s = routing_stats(probs, np.full((5, 1), 2), np.zeros(5))
    assert s.busiest_fraction == 1.0 and s.mean_entropy == 0.0 and s.mean_top_gate == 1.0


@pytest.mark.parametrize("k", [1, 2])
def test_matches_loop_oracle(k):
    logits = np.random.default_rng(k).standard_normal((256, 4)) * 2
    d, s = stats_from_logits(logits, k)
    ref = loop_oracle(d.probs.data, d.topk_indices, d.lse.data)
    for key, v in ref.items():
        assert getattr(s, key) == pytest.approx(v, abs=1e-6), key


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 40), st.integers(2, 6), st.data())
def test_field_ranges(n, E, data):
    k = data.draw(st.integers(1, E))
    logits = np.random.default_rng(data.draw(st.integers(0, 2**31))).standard_normal((n, E)) * 4
    _, s = stats_from_logits(logits, k)
    assert sum(s.expert_fractions) == pytest.approx(1.0, abs=1e-12)
    assert 1 / E - 1e-12 <= s.busiest_fraction <= 1.0
    assert 0 <= s.mean_entropy <= math.log(E) + 1e-9
    assert s.usage_variance >= 0
    assert all(np.isfinite(v) for v in (s.mean_logz, s.mean_top_gate, s.mean_margin))


def test_collect_pools_batches():
    logits = np.random.default_rng(3).standard_normal((20, 4))
    whole, s_whole = stats_from_logits(logits, 2)
    parts = [stats_from_logits(logits[:7], 2)[0], stats_from_logits(logits[7:], 2)[0]]
    (pooled,) = collect([parts])
    assert pooled.busiest_fraction == pytest.approx(s_whole.busiest_fraction)
    assert pooled.mean_logz == pytest.approx(s_whole.mean_logz)
    with pytest.raises(ValueError):
        collect([[]])


def _lr(b):
    return LayerRouting(b, 0.0, 1.0, 0.5, 0.5, 0.1, [b, 1 - b])


def test_collapse_detector():
    assert collapse_detector([[_lr(0.99)]]) == [True]
    assert collapse_detector([[_lr(0.45)]]) == [False]
    assert collapse_detector([[_lr(1.0)]], threshold=1.0) == [False]
    # only the latest point counts; dicts are accepted too
    assert collapse_detector([[_lr(0.99)], [_lr(0.5).to_dict()]]) == [False]
    with pytest.raises(ValueError):
        collapse_detector([])


def test_render_table_shape():
    first = [_lr(0.5).to_dict(), _lr(0.6).to_dict()]
    last = [dict(_lr(0.4).to_dict(), mean_logz=0.1), _lr(0.3).to_dict()]
    out = render_table([first, last])
    lines = out.splitlines()
    assert lines[0].split()[:5] == ["Layer", "Entropy", "Gate", "Margin", "Busiest"]
    assert "0.500 -> 0.100" in lines[1] and len(lines) == 3


def test_collection_does_not_perturb_training(tiny_corpus, tiny_moe_cfg, tiny_train_cfg):
    train, val = tiny_corpus
    cfg = replace(tiny_train_cfg, total_steps=4, eval_every=2)
    on = train_run(tiny_moe_cfg, cfg, train, val, collect_routing=True)
    off = train_run(tiny_moe_cfg, cfg, train, val, collect_routing=False)
    strip = lambda pts: [{k: v for k, v in p.items() if k != "routing"} for p in pts]
    assert strip(on.points) == strip(off.points)
    assert "routing" in on.points[0] and "routing" not in off.points[0]
