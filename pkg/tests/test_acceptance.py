"""Corrida completa a escala de escritorio. Unos minutos en CPU; `-m "not slow"` la omite."""
import time

import pandas as pd
import pytest
from typer.testing import CliRunner

from modules.cli import app

runner = CliRunner()

LOSSES = ("adaptive_focal", "standard_focal", "ag_bce")


@pytest.mark.slow
def test_desk_scale_comparison(tmp_path):
    data = tmp_path / "synthetic"
    out = tmp_path / "compare"
    started = time.perf_counter()
    result = runner.invoke(app, ["synth", "--out", str(data), "--count", "128", "--size", "64", "--seed", "7"])
    assert result.exit_code == 0, result.output

    result = runner.invoke(app, ["compare", "--data", str(data), "--out", str(out), "--epochs", "10", "--seed", "0"])
    assert result.exit_code == 0, result.output
    assert time.perf_counter() - started < 600.0

    losses = pd.read_csv(out / "comparison_losses.csv").set_index("epoch")
    assert len(losses) == 10
    for name in LOSSES:
        assert losses.loc[1, name] >= 3.0 * losses.loc[10, name], name
        for epoch in range(2, 10):
            assert losses.loc[epoch + 1, name] <= losses.loc[epoch, name], (name, epoch)

    metrics = pd.read_csv(out / "comparison_metrics.csv").set_index("case_id")
    assert len(metrics) == 21
    adaptive = metrics.loc["Mean", "adaptive_focal_dice"]
    assert adaptive >= 0.85
    assert adaptive >= metrics.loc["Mean", "ag_bce_dice"] - 0.02
