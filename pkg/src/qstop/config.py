"""Run configuration: INI sections parsed into dataclasses."""

from __future__ import annotations

import configparser
import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from qstop.chain import ChainQuantParams
from qstop.quantize import ClvqParams


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    preset: str = "watertank"
    """'watertank' or 'finite'."""
    capacity: float = 1.0
    target: float = 0.5
    inflow_rate: float = 5.0
    noise_sigma: float = 0.03
    horizon: int | None = None
    """None keeps the preset's own horizon."""
    finite_name: str = "h2-o2-T3"
    reward_constant: float | None = None


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig = ModelConfig()
    n_hidden_points: tuple[int, ...] = (12,)
    m_chain_points: tuple[int, ...] = (125,)
    n_paths: int = 50_000
    n_fresh_paths: int = 20_000
    seed: int = 0
    jobs: int = 1
    output_format: str = "csv"
    out: str | None = None
    timings: bool = False
    clvq: ClvqParams = ClvqParams(n_iterations=100_000, lloyd_rounds=200, samples_per_round=50_000,
                                  n_count=400_000)
    chain: ChainQuantParams = ChainQuantParams()

    def __post_init__(self):
        if not self.n_hidden_points or min(self.n_hidden_points) < 1:
            raise ConfigError("n_hidden_points must be at least 1")
        if not self.m_chain_points or min(self.m_chain_points) < 1:
            raise ConfigError("m_chain_points must be at least 1")
        if self.n_paths < 1 or self.n_fresh_paths < 1:
            raise ConfigError("n_paths and n_fresh_paths must be at least 1")
        if self.output_format not in ("csv", "json"):
            raise ConfigError("format must be csv or json")
        if not 0 <= self.seed < 2 ** 64:
            raise ConfigError("seed must be an unsigned 64-bit integer")
        if self.model.preset not in ("watertank", "finite"):
            raise ConfigError(f"unknown model preset {self.model.preset!r}")

    def to_dict(self) -> dict:
        return asdict(self)

    def config_hash(self) -> str:
        """Hash of everything that influences results (output settings excluded)."""
        d = self.to_dict()
        for k in ("out", "output_format", "jobs", "timings"):
            d.pop(k)
        blob = json.dumps(d, sort_keys=True, default=str).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def _convert(value: str, target_type, name: str):
    text = value.strip()
    try:
        if target_type in (int, "int"):
            return int(text)
        if target_type in (float, "float"):
            return float(text)
        if target_type in (bool, "bool"):
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if target_type in ("int | None",):
            return None if text.lower() in ("", "none") else int(text)
        if target_type in ("float | None",):
            return None if text.lower() in ("", "none") else float(text)
        if target_type in ("str | None",):
            return None if text == "" else text
        if target_type in ("tuple[int, ...]",):
            return tuple(int(s) for s in text.replace(",", " ").split())
        return text
    except ValueError as exc:
        raise ConfigError(f"bad value for {name}: {value!r}") from exc


def _section_to(cls, section: configparser.SectionProxy | dict, base):
    known = {f.name: f.type for f in fields(cls)}
    kwargs = {}
    for key, raw in section.items():
        k = key.replace("-", "_")
        if k not in known:
            raise ConfigError(f"unknown key {key!r} in [{getattr(section, 'name', cls.__name__)}]")
        kwargs[k] = _convert(raw, known[k], key)
    return replace(base, **kwargs)


_RUN_KEYS = {"n_hidden_points", "m_chain_points", "n_paths", "n_fresh_paths", "seed", "jobs",
             "output_format", "format", "out", "timings"}


def parse_config(text: str) -> RunConfig:
    cp = configparser.ConfigParser(interpolation=None)
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from exc
    unknown = set(cp.sections()) - {"model", "run", "clvq", "chain"}
    if unknown:
        raise ConfigError(f"unknown sections: {sorted(unknown)}")
    base = RunConfig()
    try:
        model = _section_to(ModelConfig, cp["model"], base.model) if cp.has_section("model") else base.model
        clvq = _section_to(ClvqParams, cp["clvq"], base.clvq) if cp.has_section("clvq") else base.clvq
        chain = _section_to(ChainQuantParams, cp["chain"], base.chain) if cp.has_section("chain") else base.chain
        run = {}
        if cp.has_section("run"):
            for key, raw in cp["run"].items():
                k = key.replace("-", "_")
                if k == "format":
                    k = "output_format"
                if k not in _RUN_KEYS:
                    raise ConfigError(f"unknown key {key!r} in [run]")
                run[k] = raw
        typed = {f.name: f.type for f in fields(RunConfig)}
        kwargs = {k: _convert(v, typed[k], k) for k, v in run.items()}
        return RunConfig(model=model, clvq=clvq, chain=chain, **kwargs)
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc)) from exc


def load_config(path: str | Path) -> RunConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text)
