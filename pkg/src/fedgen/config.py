"""Experiment configuration: INI sections ``[run]``, ``[data]``, ``[experiment]``, ``[sweep]``.

Every field not present in the file is filled from its default, and the
fully resolved configuration can be written back out so a run directory
documents exactly what produced it.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field, fields
from pathlib import Path

from .datasets import DatasetSpec
from .fedcore import RunConfig

REQUIRED_RUN_KEYS = ("algorithm", "eta")
# [run] keys that live on ExperimentConfig rather than RunConfig
_EXPERIMENT_OWNED = ("theory_checks", "patience")


class ConfigError(ValueError):
    pass


@dataclass
class DataSource:
    """Where training and test environments come from.

    ``manifest`` (written by ``gen-data``) takes precedence.  Otherwise, with
    ``train_csv`` empty the synthetic generator is used; else the listed
    files are loaded and annotated with ``train_alphas``/``test_alpha``.
    """

    manifest: str = ""
    train_csv: list[str] = field(default_factory=list)
    test_csv: str = ""
    label_column: str = "label"
    spurious_idx: list[int] = field(default_factory=list)


@dataclass
class ExperimentConfig:
    run: RunConfig
    data: DatasetSpec
    source: DataSource = field(default_factory=DataSource)
    output_dir: str = "runs/default"
    theory_checks: bool = False
    checkpoint_every: int = 0
    patience: int = 10
    record_wallclock: bool = False
    sweep_epochs: list[int] = field(default_factory=lambda: [20, 40, 60, 80, 100, 120, 140])
    sweep_algorithms: list[str] = field(default_factory=lambda: ["fedavg", "fedprox", "fedgen"])

    def run_config(self, **overrides) -> RunConfig:
        values = {f.name: getattr(self.run, f.name) for f in fields(RunConfig)}
        values.update(theory_checks=self.theory_checks, patience=self.patience)
        values.update(overrides)
        return RunConfig(**values)


def _parse_bool(text):
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"expected a boolean, got {text!r}")


def _split(text):
    return [p.strip() for p in text.split(",") if p.strip()]


def _converter(default):
    if isinstance(default, bool):
        return _parse_bool
    if isinstance(default, int):
        return int
    if isinstance(default, float):
        return float
    if isinstance(default, tuple):
        return lambda s: tuple(int(p) for p in _split(s))
    if isinstance(default, list):
        if default and isinstance(default[0], float):
            return lambda s: [float(p) for p in _split(s)]
        if default and isinstance(default[0], int):
            return lambda s: [int(p) for p in _split(s)]
        return _split
    if default is None:
        return lambda s: None if s.strip().lower() in ("", "none") else float(s)
    return str


# fields whose default does not reveal the element type
_SPECIAL = {
    ("data", "test_samples"): lambda s: None if s.strip().lower() in ("", "none") else int(s),
    ("data", "train_alphas"): lambda s: [float(p) for p in _split(s)],
    ("data", "spurious_idx"): lambda s: [int(p) for p in _split(s)],
    ("data", "train_csv"): _split,
    ("sweep", "epochs"): lambda s: [int(p) for p in _split(s)],
    ("sweep", "algorithms"): _split,
}


def _read_section(parser, section, defaults: dict, path):
    values = dict(defaults)
    if not parser.has_section(section):
        return values, set()
    seen = set()
    for key, raw in parser.items(section):
        if key not in defaults:
            raise ConfigError(f"{path}: [{section}] unknown field {key!r}")
        conv = _SPECIAL.get((section, key)) or _converter(defaults[key])
        try:
            values[key] = conv(raw)
        except ValueError as exc:
            raise ConfigError(f"{path}: [{section}] field {key!r}: {exc}") from None
        seen.add(key)
    return values, seen


def _defaults(cls):
    obj = cls() if cls is not RunConfig else RunConfig()
    return {f.name: getattr(obj, f.name) for f in fields(cls)}


def parse_config(text: str, path="<config>", overrides: dict | None = None) -> ExperimentConfig:
    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read_string(text, source=str(path))
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from None
    for section, mapping in (overrides or {}).items():
        if not parser.has_section(section):
            parser.add_section(section)
        for k, v in mapping.items():
            parser.set(section, k, str(v))

    allowed = {"run", "data", "experiment", "sweep"}
    extra = set(parser.sections()) - allowed
    if extra:
        raise ConfigError(f"{path}: unknown section(s) {sorted(extra)}")

    run_defaults = _defaults(RunConfig)
    for key in _EXPERIMENT_OWNED:
        run_defaults.pop(key)
    run_vals, seen = _read_section(parser, "run", run_defaults, path)
    missing = [k for k in REQUIRED_RUN_KEYS if k not in seen]
    if missing:
        raise ConfigError(f"{path}: [run] missing required field(s): {', '.join(missing)}")

    data_defaults = {**_defaults(DatasetSpec), **_defaults(DataSource)}
    data_vals, _ = _read_section(parser, "data", data_defaults, path)

    exp_defaults = {k: v for k, v in _defaults_experiment().items()}
    exp_vals, _ = _read_section(parser, "experiment", exp_defaults, path)
    sweep_vals, _ = _read_section(parser, "sweep", {"epochs": [20, 40, 60, 80, 100, 120, 140],
                                                   "algorithms": ["fedavg", "fedprox", "fedgen"]},
                                  path)
    try:
        run = RunConfig(**run_vals)
        spec = DatasetSpec(**{k: data_vals[k] for k in _defaults(DatasetSpec)})
        if not (data_vals["train_csv"] or data_vals["manifest"]):
            spec.validate()
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{path}: {exc}") from None
    source = DataSource(**{k: data_vals[k] for k in _defaults(DataSource)})
    cfg = ExperimentConfig(run=run, data=spec, source=source,
                           sweep_epochs=sweep_vals["epochs"],
                           sweep_algorithms=sweep_vals["algorithms"], **exp_vals)
    if cfg.checkpoint_every < 0 or cfg.patience < 0:
        raise ConfigError(f"{path}: checkpoint_every and patience must be non-negative")
    return cfg


def _defaults_experiment():
    return {"output_dir": "runs/default", "theory_checks": False, "checkpoint_every": 0,
            "patience": 10, "record_wallclock": False}


def load_config(path, overrides: dict | None = None) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    return parse_config(text, path, overrides)


def _fmt(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (list, tuple)):
        return ", ".join(_fmt(v) for v in value)
    if value is None:
        return "none"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def dump_config(cfg: ExperimentConfig) -> str:
    """Render the resolved configuration with every default made explicit."""
    parser = configparser.ConfigParser(interpolation=None)
    parser["run"] = {f.name: _fmt(getattr(cfg.run, f.name)) for f in fields(RunConfig)
                     if f.name not in _EXPERIMENT_OWNED}
    data = {f.name: _fmt(getattr(cfg.data, f.name)) for f in fields(DatasetSpec)}
    data.update({f.name: _fmt(getattr(cfg.source, f.name)) for f in fields(DataSource)})
    parser["data"] = data
    parser["experiment"] = {k: _fmt(getattr(cfg, k)) for k in _defaults_experiment()}
    parser["sweep"] = {"epochs": _fmt(cfg.sweep_epochs), "algorithms": _fmt(cfg.sweep_algorithms)}
    from io import StringIO

    buf = StringIO()
    parser.write(buf)
    return buf.getvalue()
