"""Run configuration with canonical JSON serialization.

A RunConfig nests the tokenizer, generation, loss-weight, optimizer and
teacher sections plus the training-loop fields.  Serialization is
canonical (sorted keys, two-space indent, trailing newline) and loading
rejects unknown keys, so load(save(config)) is the identity and configs
embedded in checkpoints are byte-stable.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from .argen import ARConfig
from .autodiff import ContractError
from .objective import LossWeights
from .tokenizer import TokenizerConfig


@dataclass
class TeacherSpec:
    kind: str = "random"        # random | files | none
    seed: int = 0
    feature_dim: int = 32
    directory: str = ""

    def __post_init__(self):
        if self.kind not in ("random", "files", "none"):
            raise ContractError(f"unknown teacher kind {self.kind!r}")
        if self.kind == "files" and not self.directory:
            raise ContractError("files teacher requires a directory")


@dataclass
class OptimConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-8
    warmup_steps: int = 100
    grad_clip: float = 1.0
    schedule: str = "cosine"    # cosine | constant

    def __post_init__(self):
        if self.schedule not in ("cosine", "constant"):
            raise ContractError(f"unknown schedule {self.schedule!r}")


@dataclass
class RunConfig:
    tokenizer: TokenizerConfig = field(default_factory=TokenizerConfig)
    ar: ARConfig = field(default_factory=ARConfig)
    weights: LossWeights = field(default_factory=LossWeights)
    optim: OptimConfig = field(default_factory=OptimConfig)
    teacher: TeacherSpec = field(default_factory=TeacherSpec)
    seed: int = 0
    steps: int = 5000
    batch_size: int = 4
    data_dir: str = ""
    val_dir: str = ""
    tokens_file: str = ""
    sacp_enabled: bool = True
    align_motion_start_epoch: int = 0
    dead_code_interval: int = 250   # steps between dead-entry reseeds; 0 = off
    log_interval: int = 10
    eval_interval: int = 500
    out_dir: str = "runs/run"

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"

    def save(self, path) -> None:
        Path(path).write_text(self.to_json())

    @staticmethod
    def from_dict(data: dict) -> "RunConfig":
        return _build(RunConfig, data, "config")

    @staticmethod
    def from_json(text: str) -> "RunConfig":
        return RunConfig.from_dict(json.loads(text))

    @staticmethod
    def load(path) -> "RunConfig":
        return RunConfig.from_json(Path(path).read_text())


_NESTED = {
    "tokenizer": TokenizerConfig,
    "ar": ARConfig,
    "weights": LossWeights,
    "optim": OptimConfig,
    "teacher": TeacherSpec,
}


def _build(cls, data: dict, where: str):
    if not isinstance(data, dict):
        raise ContractError(f"{where}: expected an object, got {type(data).__name__}")
    known = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(data) - set(known)
    if unknown:
        raise ContractError(f"{where}: unknown keys {sorted(unknown)}")
    kwargs = {}
    for name, value in data.items():
        if cls is RunConfig and name in _NESTED:
            kwargs[name] = _build(_NESTED[name], value, f"{where}.{name}")
        else:
            kwargs[name] = value
    return cls(**kwargs)
