"""Tests for config loading and report writing."""

from pathlib import Path

import pytest
import yaml
from pydantic import ValidationError

from mpoe.models import BankParamReport, ExperimentConfig
from mpoe.serialization import (
    generate_config_yaml,
    load_config,
    load_report,
    loss_curve_csv,
    save_loss_curve,
    save_report,
)


class TestLoadConfig:
    """Tests for load_config."""

    def test_defaults_from_empty_document(self, tmp_path: Path):
        """An empty file gives the default experiment."""
        path = tmp_path / "exp.yaml"
        path.write_text("", encoding="utf-8")
        config = load_config(path)
        assert config.total_steps == 2000
        assert config.model.n_experts == 4

    def test_json_document(self, tmp_path: Path):
        """JSON configs are accepted."""
        path = tmp_path / "exp.json"
        path.write_text('{"optimizer": {"p_b": 1.0, "epochs": 2}}', encoding="utf-8")
        config = load_config(path)
        assert config.optimizer.p_b == 1.0
        assert config.total_steps == 32

    def test_unknown_key(self, tmp_path: Path):
        """Unknown keys are schema violations."""
        path = tmp_path / "exp.yaml"
        path.write_text("task:\n  d_model: 8\n  colour: red\n", encoding="utf-8")
        with pytest.raises(ValidationError):
            load_config(path)

    def test_missing_file(self, tmp_path: Path):
        """Missing files raise FileNotFoundError."""
        with pytest.raises(FileNotFoundError):
            load_config(tmp_path / "absent.yaml")

    def test_yaml_round_trip(self, tiny_config: ExperimentConfig, tmp_path: Path):
        """generate_config_yaml output loads back to the same config."""
        path = tmp_path / "exp.yaml"
        path.write_text(generate_config_yaml(tiny_config), encoding="utf-8")
        assert load_config(path) == tiny_config

    def test_yaml_keeps_field_order(self, tiny_config: ExperimentConfig):
        """Top-level keys follow the model's field order."""
        data = yaml.safe_load(generate_config_yaml(tiny_config))
        assert list(data) == ["task", "model", "optimizer", "outputs"]


class TestReports:
    """Tests for JSON reports and loss curves."""

    def test_report_round_trip(self, tmp_path: Path):
        """Reports parse back to equal models."""
        report = BankParamReport(
            n_experts=2, shared=10, per_expert=3, total=16, dense_equivalent_total=26,
            gamma=10 / 3, bias_total=4, gate_total=4, ratio=16 / 26,
        )
        save_report(report, tmp_path / "r.json")
        assert load_report(tmp_path / "r.json", BankParamReport) == report

    def test_loss_curve_header(self):
        """CSV columns are step,loss,lr,central_updated."""
        text = loss_curve_csv([(1, 0.5, 0.1, True), (2, 0.25, 0.1, False)])
        lines = text.splitlines()
        assert lines[0] == "step,loss,lr,central_updated"
        assert lines[1] == "1,0.5,0.1,1"
        assert lines[2] == "2,0.25,0.1,0"

    def test_loss_curve_file(self, tmp_path: Path):
        """save_loss_curve writes the CSV text."""
        path = save_loss_curve([(1, 1.0, 0.05, False)], tmp_path / "sub" / "curve.csv")
        assert path.read_text(encoding="utf-8").startswith("step,loss")
