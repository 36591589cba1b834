"""Configs, reports and loss curves on disk."""

import csv
import io
import os
import tempfile
from pathlib import Path
from typing import Sequence, TypeVar, Union

import yaml
from pydantic import BaseModel

from mpoe.models import ExperimentConfig

ModelT = TypeVar("ModelT", bound=BaseModel)

LOSS_CURVE_COLUMNS = ("step", "loss", "lr", "central_updated")


def atomic_write_bytes(path: Union[str, Path], data: bytes) -> Path:
    """Write to a temp file in the target directory, then rename over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise
    return path


def atomic_write_text(path: Union[str, Path], text: str) -> Path:
    return atomic_write_bytes(path, text.encode("utf-8"))


def load_config(path: Union[str, Path]) -> ExperimentConfig:
    """
    Load an experiment config from a YAML or JSON file.

    Args:
        path: Config file.

    Returns:
        Validated ExperimentConfig.

    Raises:
        FileNotFoundError: If the file does not exist.
        yaml.YAMLError: If the file is not valid YAML/JSON.
        pydantic.ValidationError: If the document violates the schema.
    """
    content = Path(path).read_text(encoding="utf-8")
    data = yaml.safe_load(content) or {}
    return ExperimentConfig.model_validate(data)


def generate_config_yaml(config: ExperimentConfig) -> str:
    """Render a config as YAML in field order."""
    return yaml.dump(
        config.model_dump(mode="json"),
        default_flow_style=False,
        allow_unicode=True,
        sort_keys=False,
        width=1000,
    )


def save_report(report: BaseModel, path: Union[str, Path]) -> Path:
    """Write any report model as indented JSON."""
    return atomic_write_text(path, report.model_dump_json(indent=2) + "\n")


def load_report(path: Union[str, Path], model: type[ModelT]) -> ModelT:
    """Parse a JSON report written by ``save_report``."""
    return model.model_validate_json(Path(path).read_text(encoding="utf-8"))


def loss_curve_csv(rows: Sequence[tuple[int, float, float, bool]]) -> str:
    """CSV text with header step,loss,lr,central_updated."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(LOSS_CURVE_COLUMNS)
    for step, loss, lr, updated in rows:
        writer.writerow([step, repr(float(loss)), repr(float(lr)), int(updated)])
    return buf.getvalue()


def save_loss_curve(rows: Sequence[tuple[int, float, float, bool]], path: Union[str, Path]) -> Path:
    return atomic_write_text(path, loss_curve_csv(rows))
