"""Experiment configuration: INI-style sections, presets, and validation.

A config file looks like::

    [run]
    method = mphrl
    seed = 0

    [taskset]
    kind = maze
    n_tasks = 5
    corridors = 4

    [primitives]
    preset = standard-4
    noise = standard

    [hyper]
    n_actors = 4

    [ablation]
    coupled = false

Any field can also be set with ``section.key=value`` overrides.
"""
from __future__ import annotations

import configparser
import dataclasses
import hashlib
from dataclasses import dataclass, field, fields
from pathlib import Path

from ..errors import ConfigError
from ..lifelong import HyperParams
from ..primitives import NOISE_PRESETS, PRIMITIVE_PRESETS

METHODS = ("mphrl", "ppo")
TASK_KINDS = ("maze", "stagechain")


@dataclass
class RunSection:
    method: str = "mphrl"
    seed: int = 0
    seeds: tuple[int, ...] = (0, 1, 2)
    out: str = "runs/default"
    save_checkpoints: bool = True


@dataclass
class TasksetSection:
    kind: str = "maze"
    n_tasks: int = 5
    corridors: int = 4
    variant: str = "standard"
    min_len: int = 2
    max_len: int = 3
    taskset_seed: int = -1  # -1: follow the run seed
    layouts: tuple[str, ...] = ()
    file: str = ""
    threshold: float = 0.8
    budget: int = 200_000


@dataclass
class PrimitivesSection:
    preset: str = "standard-4"
    noise: str = "standard"
    sigma_in: float = -1.0  # negative: take from the noise preset
    sigma_out: float = -1.0
    manifest: tuple[str, ...] = ()
    learned: bool = False


@dataclass
class AblationSection:
    coupled: bool = False
    oracle_gating: bool = False
    reset_gating: bool = True
    reset_subpolicies: bool = False
    reset_baseline: bool = True


@dataclass
class ExperimentConfig:
    run: RunSection = field(default_factory=RunSection)
    taskset: TasksetSection = field(default_factory=TasksetSection)
    primitives: PrimitivesSection = field(default_factory=PrimitivesSection)
    hyper: HyperParams = field(default_factory=HyperParams)
    ablation: AblationSection = field(default_factory=AblationSection)
    matrix: dict = field(default_factory=dict)  # variant name -> {"section.key": "value"}

    SECTIONS = ("run", "taskset", "primitives", "hyper", "ablation")

    def validate(self) -> "ExperimentConfig":
        r, t, p, h = self.run, self.taskset, self.primitives, self.hyper
        if r.method not in METHODS:
            raise ConfigError("run.method", f"unknown method {r.method!r}; expected one of {METHODS}")
        if t.kind not in TASK_KINDS:
            raise ConfigError("taskset.kind", f"unknown task kind {t.kind!r}")
        if t.variant not in ("standard", "v2"):
            raise ConfigError("taskset.variant", f"unknown variant {t.variant!r}")
        if t.n_tasks < 1 and not t.layouts and not t.file:
            raise ConfigError("taskset.n_tasks", "need at least one task")
        if t.budget < 0:
            raise ConfigError("taskset.budget", "budget must be non-negative")
        if not 0.0 < t.threshold <= 1.0:
            raise ConfigError("taskset.threshold", "threshold must lie in (0, 1]")
        if p.preset not in PRIMITIVE_PRESETS:
            raise ConfigError("primitives.preset", f"unknown primitive preset {p.preset!r}")
        if p.noise not in NOISE_PRESETS:
            raise ConfigError("primitives.noise", f"unknown noise preset {p.noise!r}")
        for name in ("n_actors", "steps_per_actor", "minibatch_per_actor", "epochs", "cov_samples"):
            if getattr(h, name) < 1:
                raise ConfigError(f"hyper.{name}", "must be at least 1")
        if not 0.0 <= h.gamma <= 1.0:
            raise ConfigError("hyper.gamma", "must lie in [0, 1]")
        if not 0.0 <= h.lam <= 1.0:
            raise ConfigError("hyper.lam", "must lie in [0, 1]")
        if h.clip_eps <= 0:
            raise ConfigError("hyper.clip_eps", "must be positive")
        if self.ablation.coupled and self.ablation.oracle_gating:
            raise ConfigError("ablation.coupled", "coupled targets need a learned gating controller")
        return self

    @property
    def sigmas(self) -> tuple[float, float]:
        s_in, s_out = NOISE_PRESETS[self.primitives.noise]
        if self.primitives.sigma_in >= 0:
            s_in = self.primitives.sigma_in
        if self.primitives.sigma_out >= 0:
            s_out = self.primitives.sigma_out
        return s_in, s_out

    def to_text(self) -> str:
        lines = []
        for name in self.SECTIONS:
            lines.append(f"[{name}]")
            sec = getattr(self, name)
            for f in fields(sec):
                lines.append(f"{f.name} = {_format(getattr(sec, f.name))}")
            lines.append("")
        if self.matrix:
            lines.append("[matrix]")
            for variant, ov in self.matrix.items():
                lines.append(f"{variant} = " + ", ".join(f"{k}={v}" for k, v in ov.items()))
            lines.append("")
        return "\n".join(lines)

    def digest(self) -> str:
        """Hash of the experiment definition; the output directory is excluded."""
        cfg = apply_overrides(self, {"run.out": ""})
        return hashlib.sha256(cfg.to_text().encode()).hexdigest()[:16]

    def copy(self) -> "ExperimentConfig":
        return apply_overrides(self, {})


def _format(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return "; ".join(str(x) for x in v)
    return str(v)


_INT_TUPLES = ("seeds", "sub_hidden", "ppo_hidden", "baseline_hidden", "gating_hidden")


def _coerce(field_name: str, current, text: str):
    text = text.strip()
    key = field_name.split(".")[-1]
    try:
        if isinstance(current, bool):
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if isinstance(current, int):
            return int(float(text)) if "e" in text.lower() else int(text)
        if isinstance(current, float):
            return float(text)
        if isinstance(current, tuple):
            if key in _INT_TUPLES:
                return tuple(int(x) for x in text.replace(",", " ").replace(";", " ").split())
            return tuple(x.strip() for x in text.split(";") if x.strip())
    except ValueError:
        raise ConfigError(field_name, f"cannot parse {text!r} as {type(current).__name__}") from None
    return text


def apply_overrides(cfg: ExperimentConfig, overrides: dict[str, str]) -> ExperimentConfig:
    """Return a copy of ``cfg`` with ``section.key -> text`` overrides applied."""
    sections = {name: dataclasses.replace(getattr(cfg, name)) for name in ExperimentConfig.SECTIONS}
    for dotted, text in overrides.items():
        if "." not in dotted:
            raise ConfigError(dotted, "override keys look like section.key")
        sec_name, key = dotted.split(".", 1)
        if sec_name not in sections:
            raise ConfigError(dotted, f"unknown config section {sec_name!r}")
        sec = sections[sec_name]
        names = {f.name for f in fields(sec)}
        if key not in names:
            raise ConfigError(dotted, f"unknown field {key!r} in section [{sec_name}]")
        value = _coerce(dotted, getattr(sec, key), str(text))
        sections[sec_name] = dataclasses.replace(sec, **{key: value})
    return ExperimentConfig(**sections, matrix=dict(cfg.matrix))


def parse_config(text: str, base: ExperimentConfig | None = None) -> ExperimentConfig:
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#",))
    cp.optionxform = str
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError("config", f"malformed config: {exc}") from None
    overrides, matrix = {}, {}
    for sec in cp.sections():
        if sec == "matrix":
            for variant, spec in cp.items(sec):
                matrix[variant] = parse_assignments(spec, f"matrix.{variant}")
            continue
        if sec not in ExperimentConfig.SECTIONS:
            raise ConfigError(sec, f"unknown config section [{sec}]")
        for key, value in cp.items(sec):
            overrides[f"{sec}.{key}"] = value
    cfg = apply_overrides(base or ExperimentConfig(), overrides)
    if matrix:
        cfg.matrix = matrix
    return cfg


def parse_assignments(spec: str, where: str) -> dict[str, str]:
    out = {}
    for part in spec.split(","):
        part = part.strip()
        if not part:
            continue
        if "=" not in part:
            raise ConfigError(where, f"expected key=value, got {part!r}")
        k, v = part.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def load_config(path: str | Path) -> ExperimentConfig:
    p = Path(path)
    if not p.exists():
        raise ConfigError("--config", f"no such file: {p}")
    return parse_config(p.read_text())


# --------------------------------------------------------------------------
# presets

_NOISE_MATRIX = {name: {"primitives.noise": name} for name in NOISE_PRESETS}
_DIVERSITY_MAZE = {name: {"primitives.preset": name} for name in ("standard-4", "extra-5", "hv-2", "velocity-2")}

PRESETS: dict[str, dict] = {
    "maze-single-4": {"taskset.n_tasks": "1", "taskset.corridors": "4"},
    "maze-lifelong-5": {"taskset.n_tasks": "5", "taskset.corridors": "4"},
    "maze-lifelong-10": {"taskset.n_tasks": "10", "taskset.corridors": "4"},
    "maze-lifelong-5-v2": {"taskset.n_tasks": "5", "taskset.corridors": "4", "taskset.variant": "v2",
                           "taskset.threshold": "0.7"},
    "l-maze": {"taskset.layouts": "E3 N3", "primitives.manifest": "E:corridor:E:0:0.5; N:corridor:N:0:0.5"},
    "d-maze": {"taskset.layouts": "E3 N3 W3 S1"},
    "ppo-lifelong-5": {"taskset.n_tasks": "5", "run.method": "ppo"},
    "stagechain-lifelong-8": {"taskset.kind": "stagechain", "taskset.n_tasks": "8", "taskset.threshold": "0.75",
                              "primitives.preset": "stage-12"},
    "stagechain-box-only": {"taskset.kind": "stagechain", "taskset.n_tasks": "8", "taskset.threshold": "0.75",
                            "primitives.preset": "box-only-2"},
    "stagechain-action-only": {"taskset.kind": "stagechain", "taskset.n_tasks": "8", "taskset.threshold": "0.75",
                               "primitives.preset": "action-only-6"},
    "corner-overlap": {"taskset.n_tasks": "5", "primitives.preset": "corner-overlap"},
    "extra-5": {"taskset.n_tasks": "5", "primitives.preset": "extra-5"},
    "hv-2": {"taskset.n_tasks": "5", "primitives.preset": "hv-2"},
    "velocity-2": {"taskset.n_tasks": "5", "primitives.preset": "velocity-2"},
    "oracle-gating": {"taskset.n_tasks": "5", "ablation.oracle_gating": "true"},
    "coupled": {"taskset.n_tasks": "5", "ablation.coupled": "true"},
    "no-subpolicy-transfer": {"taskset.n_tasks": "5", "ablation.reset_subpolicies": "true"},
    "gating-transfer": {"taskset.n_tasks": "5", "ablation.reset_gating": "false"},
    "learned-primitives": {"taskset.n_tasks": "5", "primitives.learned": "true"},
    # ablation matrices
    "noise-matrix": {"taskset.n_tasks": "5", "matrix": _NOISE_MATRIX},
    "diversity-matrix": {"taskset.n_tasks": "5", "matrix": _DIVERSITY_MAZE},
    "transfer-matrix": {"taskset.n_tasks": "5",
                        "matrix": {"mphrl": {}, "ppo": {"run.method": "ppo"}}},
    "coupling-matrix": {"taskset.n_tasks": "5",
                        "matrix": {"decoupled": {}, "coupled": {"ablation.coupled": "true"}}},
    "transfer-ablation-matrix": {"taskset.n_tasks": "5", "matrix": {
        "default": {}, "no-subpolicy-transfer": {"ablation.reset_subpolicies": "true"},
        "gating-transfer": {"ablation.reset_gating": "false"}, "oracle-gating": {"ablation.oracle_gating": "true"}}},
}
for _name in NOISE_PRESETS:
    if _name != "standard":
        PRESETS[_name] = {"taskset.n_tasks": "1", "primitives.noise": _name}


def preset_config(name: str) -> ExperimentConfig:
    if name not in PRESETS:
        raise ConfigError("--preset", f"unknown preset {name!r}")
    entry = dict(PRESETS[name])
    matrix = entry.pop("matrix", {})
    cfg = apply_overrides(ExperimentConfig(), entry)
    cfg.matrix = {k: dict(v) for k, v in matrix.items()}
    return cfg


def resolve_config(config_path: str | None = None, preset: str | None = None, seed: int | None = None,
                   out: str | None = None, overrides: list[str] | None = None) -> ExperimentConfig:
    """Preset, then config file, then ``--seed``/``--out``, then overrides."""
    cfg = preset_config(preset) if preset else ExperimentConfig()
    if config_path:
        p = Path(config_path)
        if not p.exists():
            raise ConfigError("--config", f"no such file: {p}")
        cfg = parse_config(p.read_text(), base=cfg)
    extra = {}
    if seed is not None:
        extra["run.seed"] = str(seed)
    if out is not None:
        extra["run.out"] = out
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError("--override", f"expected key=value, got {item!r}")
        k, v = item.split("=", 1)
        extra[k.strip()] = v
    matrix = cfg.matrix
    cfg = apply_overrides(cfg, extra)
    cfg.matrix = matrix
    return cfg.validate()
