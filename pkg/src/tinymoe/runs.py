"""Reading run directories: seed summaries and aligned fairness-gap curves."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .budget import count_params, fairness_gaps, mean_std
from .model import ModelConfig

FAMILIES = ("dense_active", "moe", "dense_total")


class CadenceMismatch(ValueError):
    pass


@dataclass
class RunData:
    path: Path
    seed: int
    steps: list[int]
    tokens: list[int]
    val: list[float]
    model_config: dict

    @property
    def best_val(self) -> float:
        return min(self.val)


def load_run(path: str | Path) -> RunData:
    path = Path(path)
    points = [json.loads(line) for line in (path / "metrics.jsonl").read_text().splitlines() if line.strip()]
    if not points:
        raise ValueError(f"{path}: no eval records")
    summary_file = path / "summary.json"
    summary = json.loads(summary_file.read_text()) if summary_file.exists() else {}
    return RunData(
        path=path,
        seed=int(summary.get("seed", 0)),
        steps=[int(p["step"]) for p in points],
        tokens=[int(p["tokens"]) for p in points],
        val=[float(p["ce"]) for p in points],
        model_config=summary.get("model_config", {}),
    )


def _pair_by_seed(groups: dict[str, list[RunData]]) -> dict[str, list[RunData]]:
    seed_sets = [sorted(r.seed for r in runs) for runs in groups.values()]
    if all(s == seed_sets[0] for s in seed_sets) and len(set(seed_sets[0])) == len(seed_sets[0]):
        return {k: sorted(v, key=lambda r: r.seed) for k, v in groups.items()}
    return groups


def export_curves(groups: dict[str, Sequence[RunData]], out_csv: str | Path | None = None) -> dict:
    """Mean/std val-loss curves per family and seed-paired gap curves.

    ``groups`` maps each of dense_active / moe / dense_total to its runs. Runs
    within a family are paired across families by seed when the seed sets
    agree, otherwise by position.
    """
    missing = [f for f in FAMILIES if not groups.get(f)]
    if missing:
        raise ValueError(f"need at least one run for: {', '.join(missing)}")
    groups = _pair_by_seed({f: list(groups[f]) for f in FAMILIES})
    ref = groups["dense_active"][0]
    for fam in FAMILIES:
        for r in groups[fam]:
            if r.steps != ref.steps:
                raise CadenceMismatch(f"eval cadence of {r.path} differs from {ref.path}")
    n_seeds = {len(groups[f]) for f in FAMILIES}
    if len(n_seeds) != 1:
        raise ValueError(f"families have different run counts: { {f: len(groups[f]) for f in FAMILIES} }")
    n = n_seeds.pop()
    show_std = n > 1

    vals = {f: np.array([r.val for r in groups[f]]) for f in FAMILIES}  # (seeds, points)
    per_seed = []
    act_curves, tot_curves = [], []
    for i in range(n):
        g = fairness_gaps(vals["dense_active"][i], vals["moe"][i], vals["dense_total"][i])
        act_curves.append(g["active_gap"])
        tot_curves.append(g["total_gap"])
        per_seed.append({
            "seed": groups["moe"][i].seed,
            "dense_active": float(vals["dense_active"][i].min()),
            "moe": float(vals["moe"][i].min()),
            "dense_total": float(vals["dense_total"][i].min()),
            "active_gap": float(g["best_active_gap"]),
            "total_gap": float(g["best_total_gap"]),
        })
    act_curves, tot_curves = np.array(act_curves), np.array(tot_curves)

    def col_stats(a: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        return a.mean(axis=0), (a.std(axis=0, ddof=1) if a.shape[0] > 1 else np.zeros(a.shape[1]))

    header = ["step", "tokens"]
    columns: list[np.ndarray] = [np.array(ref.steps), np.array(ref.tokens)]
    for name, arr in [*vals.items(), ("active_gap", act_curves), ("total_gap", tot_curves)]:
        m, s = col_stats(arr)
        header.append(f"{name}_mean")
        columns.append(m)
        if show_std:
            header.append(f"{name}_std")
            columns.append(s)
    rows = [list(r) for r in zip(*columns)]
    if out_csv is not None:
        with open(out_csv, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(header)
            for r in rows:
                w.writerow([int(r[0]), int(r[1])] + [f"{x:.6f}" for x in r[2:]])

    best = {}
    for key in ("dense_active", "moe", "dense_total", "active_gap", "total_gap"):
        best[key] = mean_std([p[key] for p in per_seed])
    return {"header": header, "rows": rows, "per_seed": per_seed, "best": best}


def summarize(runs: Sequence[RunData]) -> list[dict]:
    """Group runs by model config and report best-val mean/std in table form."""
    groups: dict[str, list[RunData]] = {}
    for r in runs:
        groups.setdefault(json.dumps(r.model_config, sort_keys=True), []).append(r)
    out = []
    for key, members in groups.items():
        cfg_dict = json.loads(key)
        row = {"runs": [str(r.path) for r in members], "seeds": [r.seed for r in members]}
        if cfg_dict:
            bd = count_params(ModelConfig(**cfg_dict))
            row["label"] = ("moe" if cfg_dict.get("moe") else "dense") + f"-d{cfg_dict['d_model']}"
            row["total_params"], row["active_params"] = bd.total, bd.active
        else:
            row["label"] = members[0].path.name
        bests = [r.best_val for r in members]
        row["val_mean"], row["val_std"] = mean_std(bests)
        row["ppl_mean"], row["ppl_std"] = mean_std([math.exp(b) for b in bests])
        out.append(row)
    return out


def format_summary(rows: list[dict]) -> str:
    lines = [f"{'Model':<16}{'Total':>10}{'Active':>10}   {'Val Loss':<18}{'PPL':<16}{'n':>3}"]
    for r in rows:
        tot = f"{r['total_params'] / 1e6:.2f}M" if "total_params" in r else "-"
        act = f"{r['active_params'] / 1e6:.2f}M" if "active_params" in r else "-"
        lines.append(
            f"{r['label']:<16}{tot:>10}{act:>10}   {r['val_mean']:.4f} ± {r['val_std']:.4f}   "
            f"{r['ppl_mean']:.3f} ± {r['ppl_std']:.3f}{len(r['seeds']):>4}"
        )
    return "\n".join(lines)
