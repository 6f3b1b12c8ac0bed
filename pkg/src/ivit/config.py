"""Line-oriented run configuration files: ``key = value``, one per line.

Every key has a default; unknown keys are rejected with the offending line
so typos cannot silently change a run. The resolved configuration is echoed
at the top of each metrics log (lines prefixed ``config ``), and re-parsing
those lines yields identical settings.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

from .data import DatasetSpec
from .model import GATE_MODES, ModelConfig
from .training import FREEZE_CHOICES, STAGES, RunConfig, Switches, TrainSettings


class ConfigError(ValueError):
    """Raised for unknown keys, unparsable values, or constraint violations."""


def _parse_bool(raw: str) -> bool:
    low = raw.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {raw!r}")


def _parse_choice(options):
    def parse(raw: str) -> str:
        val = raw.strip()
        if val not in options:
            raise ValueError(f"must be one of {', '.join(options)}; got {raw!r}")
        return val
    return parse


def _parse_kind(raw: str) -> str:
    val = raw.strip()
    if val == "synthetic" or val.startswith("dir:"):
        return val
    raise ValueError(
        f"data.kind must be 'synthetic' or 'dir:<path>'; got {raw!r}")


# key -> (parser, default)
CONFIG_KEYS: dict[str, tuple] = {
    "model.image_size": (int, 32),
    "model.patch_size": (int, 4),
    "model.embed_dim": (int, 64),
    "model.heads": (int, 4),
    "model.layers": (int, 6),
    "model.classes": (int, 10),
    "model.gate_mode": (_parse_choice(GATE_MODES), "sigmoid"),
    "model.gcn_hidden": (int, 16),
    "train.epochs": (int, 30),
    "train.batch": (int, 32),
    "train.lr": (float, 0.03),
    "train.seed": (int, 0),
    "train.lambda": (float, 1e-3),
    "train.freeze": (_parse_choice(FREEZE_CHOICES), "auto"),
    "train.stage": (_parse_choice(STAGES), "two-stage"),
    "data.kind": (_parse_kind, "synthetic"),
    "data.classes": (int, 10),
    "data.samples": (int, 2000),
    "data.noise_sigma": (float, 0.0),
    "data.split": (float, 0.8),
    "switches.iq": (_parse_bool, True),
    "switches.ic": (_parse_bool, True),
    "switches.gc": (_parse_bool, True),
}


@dataclass
class RunConfigFile:
    """Parsed configuration plus the raw resolved key/value view."""

    run: RunConfig
    kind: str
    values: dict[str, object]

    def echo_lines(self, prefix: str = "config ") -> list[str]:
        return [f"{prefix}{key} = {_format_value(self.values[key])}"
                for key in CONFIG_KEYS]


def _format_value(v: object) -> str:
    if isinstance(v, bool):
        return "1" if v else "0"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def parse_config_text(text: str, source: str = "<config>") -> RunConfigFile:
    values = {key: default for key, (_, default) in CONFIG_KEYS.items()}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if line.startswith("config "):
            line = line[len("config "):]  # metrics-log header round trip
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw!r}")
        key = key.strip()
        if key not in CONFIG_KEYS:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        parser, _ = CONFIG_KEYS[key]
        try:
            values[key] = parser(value.strip())
        except ValueError as exc:
            raise ConfigError(f"{source}:{lineno}: bad value for {key}: {exc}") from exc
    return _assemble(values, source)


def _assemble(values: dict[str, object], source: str) -> RunConfigFile:
    try:
        model = ModelConfig(
            image_size=values["model.image_size"],
            patch_size=values["model.patch_size"],
            embed_dim=values["model.embed_dim"],
            heads=values["model.heads"],
            layers=values["model.layers"],
            classes=values["model.classes"],
            gate_mode=values["model.gate_mode"],
            gcn_hidden=values["model.gcn_hidden"],
        )
        settings = TrainSettings(
            epochs=values["train.epochs"],
            batch=values["train.batch"],
            lr=values["train.lr"],
            seed=values["train.seed"],
            lam=values["train.lambda"],
            freeze=values["train.freeze"],
            stage=values["train.stage"],
        )
        data = DatasetSpec(
            classes=values["data.classes"],
            samples=values["data.samples"],
            noise_sigma=values["data.noise_sigma"],
            split=values["data.split"],
            image_size=values["model.image_size"],
            patch_size=values["model.patch_size"],
        )
        switches = Switches(
            iq=values["switches.iq"],
            ic=values["switches.ic"],
            gc=values["switches.gc"],
        )
    except ValueError as exc:
        raise ConfigError(f"{source}: {exc}") from exc
    if values["data.kind"] == "synthetic" and values["data.classes"] != values["model.classes"]:
        raise ConfigError(
            f"{source}: data.classes ({values['data.classes']}) must match "
            f"model.classes ({values['model.classes']}) for synthetic data")
    run = RunConfig(model=model, train=settings, data=data, switches=switches)
    return RunConfigFile(run=run, kind=values["data.kind"], values=values)


def load_config(path: str | Path) -> RunConfigFile:
    p = Path(path)
    return parse_config_text(p.read_text(), source=str(p))
