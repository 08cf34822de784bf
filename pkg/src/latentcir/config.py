"""Run configuration: one INI file with a section per pipeline stage."""

from __future__ import annotations

import configparser
import dataclasses
import hashlib
from dataclasses import dataclass, field

from .denoiser import DenoiserConfig
from .diffusion import TrainConfig
from .forge import FilterThresholds
from .toyworld import WorldConfig


@dataclass(frozen=True)
class ForgeConfig:
    thresholds: FilterThresholds = FilterThresholds()
    n_triplets: int = 20000
    # 0 = keep drawing candidates until n_triplets survive
    max_candidates: int = 0
    # every object or colour edit is localised; the mask is only learned when it carries information
    mask_prob: float = 1.0
    shard_size: int = 10000


@dataclass(frozen=True)
class GuidanceDefaults:
    w_I: float = 1.5
    w_T: float = 7.5
    n_steps: int = 10
    clip_norm: float = 2.0


@dataclass(frozen=True)
class EvalConfig:
    # retrieval corpus = n_families x family_size single-edit siblings
    n_families: int = 32
    family_size: int = 16
    n_masked_pairs: int = 256
    n_localized: int = 256
    steps_grid: tuple = (1, 2, 3, 4, 5, 10, 50)
    w_I_grid: tuple = (0.0, 0.5, 1.0, 1.5, 2.5, 4.0)
    w_T_grid: tuple = (0.0, 1.0, 2.0, 4.0, 7.5, 12.0)


@dataclass(frozen=True)
class RunConfig:
    world: WorldConfig = WorldConfig()
    forge: ForgeConfig = ForgeConfig()
    denoiser: DenoiserConfig = DenoiserConfig()
    train: TrainConfig = field(default_factory=TrainConfig)
    guidance: GuidanceDefaults = GuidanceDefaults()
    eval: EvalConfig = EvalConfig()
    seed: int = 0

    def with_seed(self, seed: int | None) -> "RunConfig":
        return self if seed is None else dataclasses.replace(self, seed=seed)

    def hash(self) -> str:
        return hashlib.sha256(to_text(self).encode("utf-8")).hexdigest()[:16]


SECTIONS = ("world", "forge", "denoiser", "train", "guidance", "eval")


def _flat(obj, prefix=""):
    """Dataclass -> [(key, value)], nested dataclasses flattened as a.b."""
    out = []
    for f in dataclasses.fields(obj):
        v = getattr(obj, f.name)
        if dataclasses.is_dataclass(v):
            out.extend(_flat(v, prefix + f.name + "."))
        else:
            out.append((prefix + f.name, v))
    return out


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (tuple, list)):
        return ", ".join(_fmt(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _parse_like(text: str, default):
    text = text.strip()
    if isinstance(default, bool):
        if text.lower() not in ("true", "false"):
            raise ValueError(f"expected true/false, got {text!r}")
        return text.lower() == "true"
    if isinstance(default, int):
        return int(text)
    if isinstance(default, float):
        return float(text)
    if isinstance(default, tuple):
        items = [x for x in (s.strip() for s in text.split(",")) if x]
        kind = type(default[0]) if default else float
        return tuple(kind(float(x)) if kind is int and "." not in x else kind(x) for x in items)
    return text


def _build(cls, values: dict, section: str):
    """Rebuild a (possibly nested) config dataclass from flat string values."""
    proto = cls()
    known = dict(_flat(proto))
    unknown = set(values) - set(known)
    if unknown:
        raise ValueError(f"[{section}] unknown keys: {', '.join(sorted(unknown))}")
    parsed = {}
    for key, text in values.items():
        try:
            parsed[key] = _parse_like(text, known[key])
        except ValueError as e:
            raise ValueError(f"[{section}] {key}: {e}") from None

    def make(c, prefix=""):
        kw = {}
        for f in dataclasses.fields(c):
            default = getattr(c, f.name)
            if dataclasses.is_dataclass(default):
                kw[f.name] = make(default, prefix + f.name + ".")
            elif prefix + f.name in parsed:
                kw[f.name] = parsed[prefix + f.name]
        return type(c)(**kw)

    return make(proto)


def to_text(cfg: RunConfig) -> str:
    lines = []
    for name in SECTIONS:
        lines.append(f"[{name}]")
        lines.extend(f"{k} = {_fmt(v)}" for k, v in _flat(getattr(cfg, name)))
        lines.append("")
    lines += ["[run]", f"seed = {cfg.seed}", ""]
    return "\n".join(lines)


def from_text(text: str) -> RunConfig:
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    cp.read_string(text)
    extra = set(cp.sections()) - set(SECTIONS) - {"run"}
    if extra:
        raise ValueError(f"unknown sections: {', '.join(sorted(extra))}")
    kw = {}
    for name in SECTIONS:
        cls = type(getattr(RunConfig(), name))
        kw[name] = _build(cls, dict(cp[name]) if cp.has_section(name) else {}, name)
    if cp.has_section("run"):
        run = dict(cp["run"])
        unknown = set(run) - {"seed"}
        if unknown:
            raise ValueError(f"[run] unknown keys: {', '.join(sorted(unknown))}")
        if "seed" in run:
            kw["seed"] = int(run["seed"])
    return RunConfig(**kw)


def load(path) -> RunConfig:
    with open(path, encoding="utf-8") as f:
        return from_text(f.read())


def save(cfg: RunConfig, path):
    with open(path, "w", encoding="utf-8") as f:
        f.write(to_text(cfg))
