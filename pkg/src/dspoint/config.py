"""Run configuration files (JSON): model, training, data and output sections."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

from .model import ConfigError, ModelConfig
from .train import TrainConfig


@dataclass
class DataConfig:
    root: str = "data/synth"
    train_split: str = "train"
    test_split: str = "test"


@dataclass
class RunConfig:
    """Everything ``train`` needs. ``model.num_classes`` of ``None`` means "from the dataset"."""

    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    output_dir: str = "runs/default"
    infer_num_classes: bool = True

    def to_dict(self) -> dict:
        model = self.model.to_dict()
        if self.infer_num_classes:
            model["num_classes"] = None
        return {"model": model, "train": self.train.to_dict(),
                "data": vars(self.data).copy(), "output_dir": self.output_dir}

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        problems = []
        unknown = sorted(set(d) - {"model", "train", "data", "output_dir"})
        problems += [f"unknown section {name!r}" for name in unknown]
        model_d = dict(d.get("model", {}))
        infer = model_d.get("num_classes", None) is None
        if infer:
            model_d.pop("num_classes", None)
        cfg = None
        try:
            model = ModelConfig.from_dict(model_d)
            train = TrainConfig.from_dict(d.get("train", {}))
            data = DataConfig(**d.get("data", {}))
            cfg = cls(model, train, data, d.get("output_dir", "runs/default"), infer)
        except ConfigError as exc:
            problems += exc.problems
        except TypeError as exc:
            problems.append(str(exc))
        if problems:
            raise ConfigError(problems)
        return cfg

    def validate(self) -> "RunConfig":
        problems = []
        for part in (self.model, self.train):
            try:
                part.validate()
            except ConfigError as exc:
                problems += exc.problems
        if problems:
            raise ConfigError(problems)
        return self


def load_run_config(path: str | Path | None) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        raw = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError([f"{path}: not valid JSON ({exc})"]) from exc
    return RunConfig.from_dict(raw)


def dump_run_config(cfg: RunConfig, path: str | Path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(cfg.to_dict(), indent=2) + "\n")
