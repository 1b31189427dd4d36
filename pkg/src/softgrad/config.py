"""Run configuration: dataclass schema plus a small sectioned key-value file format.

Grammar::

    # comment
    [section]
    key = <python literal>     # numbers, quoted strings, tuples, True/False/None

Bare words are read as strings.  Sections:

    [run]            RunSettings
    [algo]           AlgoConfig (defaults come from the preset of ``run.algo``)
    [trajopt]        TrajOptSettings
    [task.<name>]    the parameter dataclass of task <name>

Unknown sections and keys are errors that name the offending entry.
"""

from __future__ import annotations

import ast
import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

from softgrad.algos import ALGORITHMS, AlgoConfig, preset
from softgrad.envs import TASKS


class ConfigError(ValueError):
    pass


@dataclass
class RunSettings:
    task: str = "point_mass_reach"
    algo: str = "sapo"
    seed: int = 0
    checkpoint_every: int = 50
    eval_episodes: int = 16
    eval_seed: int = 12345
    deterministic_eval: bool = True
    log_level: str = "INFO"


@dataclass
class TrajOptSettings:
    epochs: int = 50
    horizon: int = 32
    lr: float = 0.01
    betas: tuple = (0.7, 0.95)
    grad_clip: float = 0.5
    num_envs: int = 16


@dataclass
class RunConfig:
    run: RunSettings = field(default_factory=RunSettings)
    algo: AlgoConfig = field(default_factory=AlgoConfig)
    trajopt: TrajOptSettings = field(default_factory=TrajOptSettings)
    task: object = None  # params dataclass of run.task
    sections: dict = field(default_factory=dict, repr=False)  # the parsed input, before defaults

    def to_dict(self) -> dict:
        return {
            "run": dataclasses.asdict(self.run),
            "algo": dataclasses.asdict(self.algo),
            "trajopt": dataclasses.asdict(self.trajopt),
            f"task.{self.run.task}": dataclasses.asdict(self.task),
        }


def _literal(text: str):
    try:
        return ast.literal_eval(text)
    except (ValueError, SyntaxError):
        return text


def parse_sections(text: str, source="<config>") -> dict[str, dict]:
    sections: dict[str, dict] = {}
    current = None
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip() if not raw.lstrip().startswith("#") else ""
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            current = line[1:-1].strip()
            if current in sections:
                raise ConfigError(f"{source}:{lineno}: duplicate section [{current}]")
            sections[current] = {}
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw.strip()!r}")
        if current is None:
            raise ConfigError(f"{source}:{lineno}: key outside of any section")
        key, val = (s.strip() for s in line.split("=", 1))
        if key in sections[current]:
            raise ConfigError(f"{source}:{lineno}: duplicate key {current}.{key}")
        sections[current][key] = _literal(val)
    return sections


def _coerce(cls_name, f: dataclasses.Field, value):
    default = f.default if f.default is not dataclasses.MISSING else None
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{cls_name}.{f.name}: expected True/False, got {value!r}")
        return value
    if isinstance(default, float) and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    if isinstance(default, tuple) and isinstance(value, list):
        return tuple(value)
    if default is not None and not isinstance(value, type(default)):
        raise ConfigError(f"{cls_name}.{f.name}: expected {type(default).__name__}, got {value!r}")
    return value


def apply_overrides(obj, section: str, values: dict):
    fields = {f.name: f for f in dataclasses.fields(obj)}
    for key, value in values.items():
        if key not in fields:
            raise ConfigError(f"unknown key '{key}' in section [{section}]")
        setattr(obj, key, _coerce(section, fields[key], value))
    if hasattr(obj, "__post_init__"):
        try:
            obj.__post_init__()
        except ValueError as e:
            raise ConfigError(f"[{section}]: {e}") from None
    return obj


def build_config(sections: dict[str, dict]) -> RunConfig:
    for name in sections:
        if name in ("run", "algo", "trajopt"):
            continue
        if not (name.startswith("task.") and name[5:] in TASKS):
            raise ConfigError(f"unknown section [{name}]")
    run = apply_overrides(RunSettings(), "run", sections.get("run", {}))
    if run.task not in TASKS:
        raise ConfigError(f"run.task: unknown task {run.task!r}; choose from {sorted(TASKS)}")
    if run.algo not in ALGORITHMS:
        raise ConfigError(f"run.algo: unknown algorithm {run.algo!r}; choose from {list(ALGORITHMS)}")
    algo_vals = dict(sections.get("algo", {}))
    if algo_vals.get("algo", run.algo) != run.algo:
        raise ConfigError("algo.algo disagrees with run.algo")
    algo_vals.pop("algo", None)
    algo = apply_overrides(preset(run.algo), "algo", algo_vals)
    trajopt = apply_overrides(TrajOptSettings(), "trajopt", sections.get("trajopt", {}))
    params_cls = TASKS[run.task][1]
    tasks = {}
    for name, (_, pcls) in TASKS.items():
        key = f"task.{name}"
        if key in sections:
            tasks[name] = apply_overrides(pcls(), key, sections[key])
    task = tasks.get(run.task, params_cls())
    if run.checkpoint_every < 1:
        raise ConfigError("run.checkpoint_every must be >= 1")
    if run.eval_episodes < 1:
        raise ConfigError("run.eval_episodes must be >= 1")
    return RunConfig(run, algo, trajopt, task, sections)


def load_config(path) -> RunConfig:
    p = Path(path)
    try:
        text = p.read_text()
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e.strerror}") from None
    return build_config(parse_sections(text, str(p)))


def with_run(cfg: RunConfig, **run_values) -> RunConfig:
    """Rebuild ``cfg`` from its own input with some [run] keys replaced.

    Changing ``algo`` picks up that algorithm's preset underneath the same
    [algo] overrides.
    """
    sections = {k: dict(v) for k, v in cfg.sections.items()}
    sections.setdefault("run", {}).update(run_values)
    if "algo" in run_values:
        sections.get("algo", {}).pop("algo", None)
    return build_config(sections)


def from_dict(d: dict) -> RunConfig:
    """Inverse of ``RunConfig.to_dict`` (used for configs embedded in checkpoints)."""
    return build_config({k: dict(v) for k, v in d.items()})


def dump(cfg: RunConfig) -> str:
    lines = []
    for section, values in cfg.to_dict().items():
        lines.append(f"[{section}]")
        lines += [f"{k} = {v!r}" for k, v in values.items()]
        lines.append("")
    return "\n".join(lines)
