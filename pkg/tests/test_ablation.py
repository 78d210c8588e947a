import csv

import numpy as np
import pytest

from conftest import small_model
from segstitch.ablation import (ABLATION_COLUMNS, VARIANTS, AblationConfig, ablate, comparison_table,
                                delta_roughness, summarize, variant_config)
from segstitch.model import build_model
from segstitch.profile import count_params
from segstitch.train import TrainConfig, train


def test_variant_wiring():
    base = small_model()
    counts = {v: count_params(build_model(variant_config(base, v))).total_params for v in VARIANTS}
    assert counts["no_attention_no_ode"] == min(counts.values())
    assert all(counts["no_attention_no_ode"] < c for v, c in counts.items() if v != "no_attention_no_ode")
    assert counts["sin"] == counts["tanh"] == counts["full"]
    assert counts["sigmoid"] < counts["full"]
    with pytest.raises(KeyError):
        variant_config(base, "relu")


def test_grid_of_one_matches_direct_train(tmp_path, small_manifest):
    model = small_model().to_dict()
    grid = AblationConfig(model=model, train={"lr": 0.05, "max_epochs": 2}, variants=["full"], seeds=[3])
    rows = ablate(grid, small_manifest, tmp_path / "a.csv")
    direct = train(TrainConfig(lr=0.05, max_epochs=2, seed=3), small_model(), small_manifest)
    assert len(rows) == 1
    assert rows[0].history == direct.history
    assert rows[0].mdsc == direct.history[-1]["val_mdsc"]
    lines = list(csv.reader(open(tmp_path / "a.csv")))
    assert tuple(lines[0]) == ABLATION_COLUMNS and lines[1][0] == "full"


def test_identical_data_order_across_variants(small_manifest, monkeypatch):
    import segstitch.train as tr

    seen = []
    real = tr.preprocess

    def spy(sample, crop, seed=None, mode="train"):
        seen.append((seed, int(sample.label.sum())))
        return real(sample, crop, seed, mode)

    monkeypatch.setattr(tr, "preprocess", spy)
    grid = AblationConfig(model=small_model().to_dict(), train={"max_epochs": 1}, variants=["full", "no_ode"],
                          seeds=[0])
    ablate(grid, small_manifest)
    n = len(seen) // 2
    assert seen[:n] == seen[n:]


def test_summary_and_roughness():
    from segstitch.ablation import AblationRow

    rows = [AblationRow("full", s, 10, -0.5 - s, -0.4, 0.6 + 0.1 * s) for s in range(2)]
    rows.append(AblationRow("no_ode", 0, 8, -0.3, None, 0.2))
    summary = summarize(rows)
    assert summary["full"]["mdsc"] == pytest.approx(0.65)
    assert summary["no_ode"]["val_loss"] is None
    assert "full" in comparison_table(summary)
    assert delta_roughness([1.0, 2.0, 3.0, 4.0]) == 0.0
    assert delta_roughness([0.0, 1.0, 0.0, 1.0]) == pytest.approx(np.std([1, -1, 1]))
    assert delta_roughness([None, 1.0]) == 0.0
