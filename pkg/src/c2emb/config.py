"""TOML run configuration shared by every CLI command.

Layout:

    [model]     ModelConfig fields (d_llm, n_layers, n_heads, d, ...)
    [train]     RunConfig fields; code_edit_weight is mandatory here
    [data]      train = "triples.jsonl", templates = "custom.json",
                output_dir = "runs/exp1", checkpoint = "runs/exp1/merged.c2pm"
    [eval]      tasks = ["tasks/a", "tasks/b"], k = 10

Every key is checked against the target dataclass so typos fail with the
full field path instead of silently using a default.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

from .errors import C2Error, ConfigError
from .model import ModelConfig
from .trainer import RunConfig

__all__ = ["CliConfig", "load_config"]

_SECTIONS = ("model", "train", "data", "eval")
_DATA_KEYS = ("train", "templates", "output_dir", "checkpoint")
_EVAL_KEYS = ("tasks", "k")


@dataclass(frozen=True)
class CliConfig:
    model: ModelConfig
    run: RunConfig
    train_data: Path | None = None
    templates: Path | None = None
    output_dir: Path | None = None
    checkpoint: Path | None = None
    eval_tasks: tuple[Path, ...] = ()
    eval_k: int = 10


def _checked_section(raw: dict, name: str, allowed) -> dict:
    section = raw.get(name, {})
    if not isinstance(section, dict):
        raise ConfigError(f"[{name}] must be a table")
    for key in section:
        if key not in allowed:
            raise ConfigError(f"{name}.{key} is not a recognized setting")
    return section


def _build(cls, section: dict, name: str):
    try:
        return cls(**section)
    except (C2Error, TypeError) as exc:  # TypeError: wrong TOML value type
        raise ConfigError(f"[{name}] {exc}") from exc


def _opt_path(section: dict, base: Path, key: str) -> Path | None:
    value = section.get(key)
    if value is None:
        return None
    if not isinstance(value, str) or not value:
        raise ConfigError(f"data.{key} must be a non-empty path string")
    return base / value


def load_config(path: str | Path) -> CliConfig:
    """Parse and fully validate one TOML file; relative paths resolve
    against the file's directory."""
    path = Path(path)
    try:
        with open(path, "rb") as fh:
            raw = tomllib.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: invalid TOML: {exc}") from exc

    for key in raw:
        if key not in _SECTIONS:
            raise ConfigError(f"unknown config section [{key}]")

    model_fields = {f.name for f in dataclasses.fields(ModelConfig)}
    run_fields = {f.name for f in dataclasses.fields(RunConfig)}

    model_raw = _checked_section(raw, "model", model_fields)
    train_raw = dict(_checked_section(raw, "train", run_fields))
    if "code_edit_weight" not in train_raw:
        raise ConfigError("train.code_edit_weight is required; set it explicitly")
    if "merge_weights" in train_raw:
        train_raw["merge_weights"] = tuple(train_raw["merge_weights"])

    model = _build(ModelConfig, model_raw, "model")
    run = _build(RunConfig, train_raw, "train")

    base = path.parent
    data_raw = _checked_section(raw, "data", _DATA_KEYS)
    eval_raw = _checked_section(raw, "eval", _EVAL_KEYS)

    tasks = eval_raw.get("tasks", [])
    if not isinstance(tasks, list) or any(not isinstance(t, str) or not t for t in tasks):
        raise ConfigError("eval.tasks must be a list of directory paths")
    k = eval_raw.get("k", 10)
    if not isinstance(k, int) or k < 1:
        raise ConfigError(f"eval.k must be a positive integer, got {k!r}")

    return CliConfig(
        model=model, run=run,
        train_data=_opt_path(data_raw, base, "train"),
        templates=_opt_path(data_raw, base, "templates"),
        output_dir=_opt_path(data_raw, base, "output_dir"),
        checkpoint=_opt_path(data_raw, base, "checkpoint"),
        eval_tasks=tuple(base / t for t in tasks),
        eval_k=k,
    )
