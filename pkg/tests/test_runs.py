import csv
import json

import numpy as np
import pytest

from tinymoe.runs import CadenceMismatch, export_curves, format_summary, load_run, summarize

# per-seed best validation losses: dense active, MoE top-2 + z, dense total
PER_SEED = {1337: (1.6554, 1.5774, 1.5615), 1338: (1.6532, 1.5779, 1.5580), 1339: (1.6551, 1.5811, 1.5629)}
PER_SEED_GAPS = {1337: (0.0780, 0.0159), 1338: (0.0753, 0.0199), 1339: (0.0740, 0.0183)}
# the printed gaps come from unrounded losses: seed 1339 total is 1.5811 - 1.5629 = 0.0182 vs printed 0.0183,
# exactly one unit of table rounding, so the float slack covers the binary representation of that edge
TOL = 1e-4 + 1e-12


def write_run(root, seed, best, steps=(250, 500, 750, 1000), model_config=None):
    """A descending val series whose minimum is ``best`` at the last eval."""
    root.mkdir(parents=True)
    vals = [best + 0.3 / (i + 1) for i in range(len(steps) - 1)] + [best]
    with open(root / "metrics.jsonl", "w") as f:
        for s, v in zip(steps, vals):
            f.write(json.dumps({"step": s, "tokens": s * 2 * 16 * 511, "ce": v}) + "\n")
    (root / "summary.json").write_text(json.dumps({"seed": seed, "model_config": model_config or {}}))
    return root


def table_groups(tmp_path, seeds=PER_SEED):
    fams = ("dense_active", "moe", "dense_total")
    return {
        fam: [load_run(write_run(tmp_path / fam / str(s), s, seeds[s][i])) for s in seeds]
        for i, fam in enumerate(fams)
    }


def test_per_seed_and_mean_gaps(tmp_path):
    res = export_curves(table_groups(tmp_path), tmp_path / "curves.csv")
    for row in res["per_seed"]:
        a, t = PER_SEED_GAPS[row["seed"]]
        assert row["active_gap"] == pytest.approx(a, abs=TOL)
        assert row["total_gap"] == pytest.approx(t, abs=TOL)
    (am, asd), (tm, tsd) = res["best"]["active_gap"], res["best"]["total_gap"]
    assert (am, asd) == pytest.approx((0.0758, 0.0021), abs=TOL)
    assert (tm, tsd) == pytest.approx((0.0180, 0.0020), abs=TOL)
    with open(tmp_path / "curves.csv") as f:
        rows = list(csv.reader(f))
    assert rows[0][:4] == ["step", "tokens", "dense_active_mean", "dense_active_std"]
    assert rows[1][1] == str(250 * 2 * 16 * 511) and len(rows) == 5
    last = dict(zip(rows[0], rows[-1]))
    assert float(last["active_gap_mean"]) == pytest.approx(am, abs=1e-6)


def test_headline_mean_inputs():
    # the mean-level gap of the rounded means is 0.0757; the per-seed mean is 0.0758
    assert 1.6545 - 1.5788 == pytest.approx(0.0757, abs=1e-9)
    assert 1.5788 - 1.5608 == pytest.approx(0.0180, abs=1e-9)
    assert np.mean([g[0] for g in PER_SEED_GAPS.values()]) == pytest.approx(0.0758, abs=1e-4)


def test_identical_runs_have_zero_std(tmp_path):
    same = {s: PER_SEED[1337] for s in PER_SEED}
    res = export_curves(table_groups(tmp_path, same))
    assert res["best"]["active_gap"][1] == pytest.approx(0.0, abs=1e-12)
    std_cols = [i for i, h in enumerate(res["header"]) if h.endswith("_std")]
    assert np.allclose(np.array(res["rows"])[:, std_cols], 0.0)


def test_single_seed_omits_std_columns(tmp_path):
    res = export_curves(table_groups(tmp_path, {1337: PER_SEED[1337]}))
    assert not any(h.endswith("_std") for h in res["header"])
    assert res["per_seed"][0]["active_gap"] == pytest.approx(0.0780, abs=1e-4)


def test_cadence_mismatch_is_an_error(tmp_path):
    groups = table_groups(tmp_path)
    groups["moe"][1] = load_run(write_run(tmp_path / "odd", 1338, 1.58, steps=(250, 500, 700, 1000)))
    with pytest.raises(CadenceMismatch):
        export_curves(groups)
    with pytest.raises(ValueError, match="dense_total"):
        export_curves({"dense_active": groups["dense_active"], "moe": groups["moe"]})


def test_seed_pairing_ignores_order(tmp_path):
    groups = table_groups(tmp_path)
    groups["moe"] = groups["moe"][::-1]
    res = export_curves(groups)
    assert [p["seed"] for p in res["per_seed"]] == [1337, 1338, 1339]
    assert res["per_seed"][0]["active_gap"] == pytest.approx(0.0780, abs=1e-4)


def test_summarize_groups_by_config(tmp_path):
    cfg = dict(vocab_size=257, d_model=64, n_layers=2, n_query_heads=4, n_kv_heads=2, ffn_hidden=256, context_len=64)
    runs = [load_run(write_run(tmp_path / str(s), s, PER_SEED[s][0], model_config=cfg)) for s in PER_SEED]
    runs.append(load_run(write_run(tmp_path / "other", 1, 2.0)))
    rows = summarize(runs)
    assert len(rows) == 2
    dense = rows[0]
    assert dense["label"] == "dense-d64" and dense["seeds"] == [1337, 1338, 1339]
    assert dense["val_mean"] == pytest.approx(np.mean([v[0] for v in PER_SEED.values()]))
    assert dense["val_std"] == pytest.approx(np.std([v[0] for v in PER_SEED.values()], ddof=1))
    assert "dense-d64" in format_summary(rows)
    empty = write_run(tmp_path / "empty", 0, 1.0, steps=())
    with pytest.raises(ValueError, match="no eval records"):
        load_run(empty)
