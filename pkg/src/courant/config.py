"""Run configuration: one JSON document for data, model, training and outputs.

Unknown keys are rejected at every level so typos fail loudly. Example::

    {
      "data":  {"kind": "wake", "n_trajectories": 20, "seed": 0,
                "wake": {"n_points": 500, "steps": 41}},
      "model": {"d": 64, "heads": 4, "L": 16, "gwa": "none"},
      "train": {"epochs": 200, "lr": 1e-3, "rollout": 10},
      "out_dir": "runs/wake"
    }
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .datasets import ChannelSpec, SyntheticWakeSpec, spec_to_dict
from .errors import ContractError, FormatError
from .model import ModelConfig
from .training import TrainConfig

DATA_KINDS = ("wake", "channel")


def _strict(cls, data: dict, where: str):
    if not isinstance(data, dict):
        raise ContractError(f"{where} must be an object")
    known = {f.name for f in fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise ContractError(f"unknown keys in {where}: {sorted(unknown)}")
    out = {}
    for f in fields(cls):
        if f.name in data:
            v = data[f.name]
            out[f.name] = tuple(v) if isinstance(v, list) else v
    return cls(**out)


@dataclass
class DataConfig:
    kind: str = "wake"
    n_trajectories: int = 20
    seed: int = 0  # trajectory k uses seed + k
    split_seed: int = 42
    wake: SyntheticWakeSpec = field(default_factory=SyntheticWakeSpec)
    channel: ChannelSpec = field(default_factory=ChannelSpec)

    def validate(self) -> None:
        if self.kind not in DATA_KINDS:
            raise ContractError(f"data.kind must be one of {DATA_KINDS}, got {self.kind!r}")
        if self.n_trajectories < 1:
            raise ContractError("data.n_trajectories must be >= 1")
        try:
            (self.wake if self.kind == "wake" else self.channel).validate()
        except ContractError as exc:
            raise ContractError(f"data.{self.kind}: {exc}") from exc

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "n_trajectories": self.n_trajectories,
            "seed": self.seed,
            "split_seed": self.split_seed,
            "wake": spec_to_dict(self.wake),
            "channel": spec_to_dict(self.channel),
        }


@dataclass
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    out_dir: str = "runs/default"

    def validate(self) -> None:
        self.data.validate()
        self.model.validate()
        self.train.validate()

    def to_dict(self) -> dict:
        return {
            "data": self.data.to_dict(),
            "model": self.model.to_dict(),
            "train": asdict(self.train),
            "out_dir": self.out_dir,
        }

    @classmethod
    def from_dict(cls, d: dict) -> RunConfig:
        if not isinstance(d, dict):
            raise ContractError("run config must be a JSON object")
        unknown = set(d) - {"data", "model", "train", "out_dir"}
        if unknown:
            raise ContractError(f"unknown top-level keys: {sorted(unknown)}")
        data = dict(d.get("data", {}))
        wake = _strict(SyntheticWakeSpec, data.pop("wake", {}), "data.wake")
        channel = _strict(ChannelSpec, data.pop("channel", {}), "data.channel")
        unknown = set(data) - {"kind", "n_trajectories", "seed", "split_seed"}
        if unknown:
            raise ContractError(f"unknown keys in data: {sorted(unknown)}")
        cfg = cls(
            DataConfig(wake=wake, channel=channel, **data),
            _strict(ModelConfig, d.get("model", {}), "model"),
            _strict(TrainConfig, d.get("train", {}), "train"),
            str(d.get("out_dir", "runs/default")),
        )
        cfg.validate()
        return cfg


def load_run_config(path) -> RunConfig:
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except OSError as exc:
        raise FormatError(f"{path}: cannot read config ({exc})") from exc
    except json.JSONDecodeError as exc:
        raise ContractError(f"{path}: invalid JSON ({exc})") from exc
    return RunConfig.from_dict(raw)


def set_override(raw: dict, dotted: str, value) -> None:
    """Apply ``a.b.c=value`` to a nested dict, creating levels as needed."""
    keys = dotted.split(".")
    node = raw
    for k in keys[:-1]:
        node = node.setdefault(k, {})
        if not isinstance(node, dict):
            raise ContractError(f"cannot set {dotted}: {k} is not an object")
    node[keys[-1]] = value


def parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def write_resolved(cfg: RunConfig, out_dir, name: str = "resolved_config.json") -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / name
    path.write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True))
    return path
