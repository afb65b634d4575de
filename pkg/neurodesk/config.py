"""
Run configurations, one per CLI subcommand. Each is validated in full (numeric ranges
and input-path existence) before any computation starts.

The top-level `seed` is threaded into every nested algorithm config that does not set
its own seed.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Any, ClassVar, Literal, Optional, Union

from pydantic import BaseModel, ConfigDict, DirectoryPath, Field, FilePath, model_validator

from neurodesk.classify import LogRegConfig
from neurodesk.dbn import FineTuneConfig
from neurodesk.embed import EmbedConfig
from neurodesk.rbm import RbmTrainConfig
from neurodesk.synth import COHORT_AMPLITUDE_SD, COHORT_EFFECT, COHORT_NOISE, SynthSpec

DEFAULT_LAYER_SIZES = [50, 50, 100]


class RunConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    # nested configs that receive the run seed
    SEEDED: ClassVar[tuple[str, ...]] = ()

    seed: int = Field(0, ge=0, le=2 ** 64 - 1)
    out: Path = Path("out")

    @model_validator(mode="before")
    @classmethod
    def _thread_seed(cls, data: Any) -> Any:
        if not isinstance(data, dict) or "seed" not in data:
            return data
        data = dict(data)
        for key in cls.SEEDED:
            nested = data.get(key)
            if nested is None:
                data[key] = {"seed": data["seed"]}
            elif isinstance(nested, dict) and "seed" not in nested:
                data[key] = {**nested, "seed": data["seed"]}
        return data

    def echo(self) -> str:
        return json.dumps(self.model_dump(mode="json", by_alias=True), sort_keys=True, indent=2) + "\n"


class SynthRunConfig(RunConfig):
    SEEDED: ClassVar[tuple[str, ...]] = ("spec",)

    kind: Literal["ground-truth", "sweep", "labeled", "graded"] = "ground-truth"
    spec: SynthSpec = SynthSpec()
    levels: list[float] = Field(default_factory=lambda: [0.0, 0.5, 1.0, 2.0], min_length=1)
    n_per_class: int = Field(100, ge=1)
    effect: float = COHORT_EFFECT
    noise: float = Field(COHORT_NOISE, ge=0)
    amplitude_sd: float = Field(COHORT_AMPLITUDE_SD, ge=0)
    holdout_fraction: float = Field(0.2, ge=0, lt=1)


class TrainRbmRunConfig(RunConfig):
    SEEDED: ClassVar[tuple[str, ...]] = ("rbm",)

    data: FilePath
    mask: bool = True
    flip_fields: bool = True
    rbm: RbmTrainConfig = RbmTrainConfig()


class DbnPretrainRunConfig(RunConfig):
    SEEDED: ClassVar[tuple[str, ...]] = ("rbm",)

    data: FilePath
    labels: Optional[FilePath] = None
    split_column: str = "split"
    layer_sizes: list[int] = Field(default_factory=lambda: list(DEFAULT_LAYER_SIZES), min_length=1)
    rbm: RbmTrainConfig = RbmTrainConfig()


class DbnFinetuneRunConfig(RunConfig):
    SEEDED: ClassVar[tuple[str, ...]] = ("finetune",)

    data: FilePath
    labels: FilePath
    model: FilePath
    label_column: str = "label"
    split_column: str = "split"
    finetune: FineTuneConfig = FineTuneConfig()


class EmbedRunConfig(RunConfig):
    SEEDED: ClassVar[tuple[str, ...]] = ("embed",)

    data: FilePath
    model: Optional[FilePath] = None
    depth: Optional[int] = Field(None, ge=1)
    preprocess: bool = False
    embed: EmbedConfig = EmbedConfig()


class EvalRunConfig(RunConfig):
    SEEDED: ClassVar[tuple[str, ...]] = ("rbm", "finetune")

    mode: Literal["sources", "sweep", "dbn", "depth"] = "sources"
    ground_truth: Optional[DirectoryPath] = None
    maps: Optional[FilePath] = None
    timecourses: Optional[FilePath] = None
    model: Optional[FilePath] = None
    data: Optional[FilePath] = None
    labels: Optional[FilePath] = None
    label_column: str = "label"
    split_column: str = "split"
    layer_sizes: list[int] = Field(default_factory=lambda: list(DEFAULT_LAYER_SIZES), min_length=1)
    folds: int = Field(10, ge=1)
    protocol: Literal["cv", "all"] = "cv"
    knn_k: int = Field(5, ge=1)
    shuffle_labels: bool = False
    rbm: RbmTrainConfig = RbmTrainConfig()
    finetune: FineTuneConfig = FineTuneConfig()
    logreg: LogRegConfig = LogRegConfig()

    @model_validator(mode="after")
    def _inputs_for_mode(self) -> "EvalRunConfig":
        required = {
            "sources": ("ground_truth", "maps"),
            "sweep": ("ground_truth",),
            "dbn": ("data", "labels", "model"),
            "depth": ("data", "labels"),
        }[self.mode]
        missing = [name for name in required if getattr(self, name) is None]
        if missing:
            raise ValueError(f"eval mode {self.mode!r} needs {', '.join(missing)}")
        return self


class PlotRunConfig(RunConfig):
    kind: Literal["map", "fnc", "sweep"] = "map"
    input: FilePath
    labels: Optional[FilePath] = None
    label_column: str = "label"
    split_column: Optional[str] = None
    severity_column: Optional[str] = None
    html: bool = False
    title: Optional[str] = None


RUN_CONFIGS: dict[str, type[RunConfig]] = {
    "synth": SynthRunConfig,
    "train-rbm": TrainRbmRunConfig,
    "dbn-pretrain": DbnPretrainRunConfig,
    "dbn-finetune": DbnFinetuneRunConfig,
    "embed": EmbedRunConfig,
    "eval": EvalRunConfig,
    "plot": PlotRunConfig,
}


# ==========================================
# Loading & overrides
# ==========================================

def parse_override(item: str) -> tuple[list[str], Any]:
    """'rbm.epochs=20' -> (['rbm', 'epochs'], 20). Values parse as JSON, else stay strings."""
    if "=" not in item:
        raise ValueError(f"override {item!r} is not of the form key=value")
    key, raw = item.split("=", 1)
    keys = [k for k in key.strip().split(".") if k]
    if not keys:
        raise ValueError(f"override {item!r} has an empty key")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return keys, value


def apply_override(data: dict, keys: list[str], value: Any) -> dict:
    node = data
    for k in keys[:-1]:
        child = node.get(k)
        if child is None:
            child = node[k] = {}
        elif not isinstance(child, dict):
            raise ValueError(f"cannot set {'.'.join(keys)}: {k!r} is not a section")
        node = child
    node[keys[-1]] = value
    return data


def load_run_config(command: str, path: Optional[Union[str, Path]] = None,
                    overrides: Optional[list[str]] = None, seed: Optional[int] = None,
                    out: Optional[Union[str, Path]] = None) -> RunConfig:
    """JSON file (optional) + dotted overrides + --seed / --out, validated as the subcommand's RunConfig."""
    cls = RUN_CONFIGS[command]
    data: dict = {}
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise FileNotFoundError(f"config file not found: {path}")
        try:
            data = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ValueError(f"{path}: invalid JSON ({exc})") from exc
        if not isinstance(data, dict):
            raise ValueError(f"{path}: top level must be a JSON object")
    for item in overrides or []:
        apply_override(data, *parse_override(item))
    if seed is not None:
        data["seed"] = seed
        for key in cls.SEEDED:
            nested = data.get(key)
            if isinstance(nested, dict):
                nested["seed"] = seed
    if out is not None:
        data["out"] = str(out)
    return cls.model_validate(data)
