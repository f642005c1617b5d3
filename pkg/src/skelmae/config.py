"""JSON run configuration: one file fully determines a run.

Schema (every section optional, defaults shown in the dataclasses)::

    {
      "seed": 0,
      "data": {"source": "synthetic", "synthetic": {"class_count": 4, "seed": 0},
               "n_per_class": 50, "n_test_per_class": 20, "T": 20},
      "mask": {"frame_ratio": 0.5, "joint_ratio": 0.5, "strategy": "random"},
      "model": {"preset": "tiny", "width_divisor": 1},
      "pretrain": {<TrainConfig fields>},
      "finetune": {<TrainConfig fields>},
      "label_fraction": 1.0,
      "sweep": {"axis": "mask_grid", "repetitions": 1}
    }

``data.source`` may also be ``"directory"`` (internal JSON files) or
``"ntu"`` (raw ``.skeleton`` files) with ``path`` and either ``test_path``
or ``test_fraction``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from . import data as sd
from .masking import MaskSpec
from .model import ModelConfig, preset
from .training import TrainConfig

DATA_SOURCES = ("synthetic", "directory", "ntu")
SWEEP_AXES = ("mask_grid", "embed_dim", "decoder_depth", "pretrain_epochs", "label_fraction")
SWEEP_VALUES = {
    "embed_dim": (128, 256, 512),
    "decoder_depth": (11, 9, 7, 5),
    "pretrain_epochs": (50, 100, 150, 200),
    "label_fraction": (0.05, 0.10, 1.0),
}


class ConfigError(ValueError):
    """A configuration file or field is invalid; the message names where."""


@dataclass(frozen=True)
class DataConfig:
    source: str = "synthetic"
    synthetic: dict = field(default_factory=lambda: {"class_count": 4, "seed": 0, "noise_sigma": 0.02})
    n_per_class: int = 50
    n_test_per_class: int = 20
    T: int = 20
    path: str | None = None
    test_path: str | None = None
    test_fraction: float = 0.2
    class_count: int | None = None
    root_joint: int | None = 0

    def __post_init__(self):
        if self.source not in DATA_SOURCES:
            raise ValueError(f"source must be one of {DATA_SOURCES}, got {self.source!r}")
        if self.source != "synthetic" and not self.path:
            raise ValueError(f"source {self.source!r} needs a path")
        if self.T < 1 or self.n_per_class < 1 or self.n_test_per_class < 1:
            raise ValueError("T, n_per_class and n_test_per_class must be positive")

    def spec(self) -> sd.SyntheticActionSpec:
        return sd.SyntheticActionSpec.from_dict(self.synthetic)

    def load(self) -> tuple[sd.Dataset, sd.Dataset]:
        """Preprocessed (train, test) datasets."""
        if self.source == "synthetic":
            spec = self.spec()
            C = spec.class_count
            train = sd.generate_synthetic(spec, self.n_per_class, self.T)
            # test samples continue the same stream, so they never overlap training ones
            start = C * self.n_per_class
            test = sd.Dataset(tuple(sd.synthetic_sample(spec, i, self.T)
                                    for i in range(start, start + C * self.n_test_per_class)), C)
            return (sd.preprocess_dataset(train, self.T, self.root_joint),
                    sd.preprocess_dataset(test, self.T, self.root_joint))
        ds = sd.load_directory(self.path, self.class_count, self.T, self.root_joint)
        if self.test_path:
            return ds, sd.load_directory(self.test_path, ds.class_count, self.T, self.root_joint)
        return sd.split(ds, self.test_fraction, 0)


@dataclass(frozen=True)
class ModelChoice:
    preset: str = "tiny"
    width_divisor: int = 1
    n_heads: int | None = None
    overrides: dict = field(default_factory=dict)

    def build(self) -> ModelConfig:
        kw = dict(self.overrides)
        if self.n_heads is not None:
            kw["n_heads"] = self.n_heads
        cfg = preset(self.preset, **kw)
        return cfg.scaled(self.width_divisor, self.n_heads) if self.width_divisor != 1 else cfg


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    data: DataConfig = field(default_factory=DataConfig)
    mask: MaskSpec = field(default_factory=MaskSpec)
    model: ModelChoice = field(default_factory=ModelChoice)
    pretrain: TrainConfig = field(default_factory=TrainConfig)
    finetune: TrainConfig = field(default_factory=TrainConfig)
    label_fraction: float = 1.0
    sweep: dict = field(default_factory=dict)

    def with_seed(self, seed: int) -> "RunConfig":
        """Propagate one run seed into every stochastic component."""
        return replace(self, seed=seed, mask=replace(self.mask, seed=seed),
                       pretrain=replace(self.pretrain, seed=seed), finetune=replace(self.finetune, seed=seed))

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "data": {f.name: getattr(self.data, f.name) for f in fields(self.data)},
            "mask": self.mask.to_dict(),
            "model": {f.name: getattr(self.model, f.name) for f in fields(self.model)},
            "pretrain": self.pretrain.to_dict(),
            "finetune": self.finetune.to_dict(),
            "label_fraction": self.label_fraction,
            "sweep": self.sweep,
        }

    @classmethod
    def from_dict(cls, obj: dict, where: str = "<config>") -> "RunConfig":
        if not isinstance(obj, dict):
            raise ConfigError(f"{where}: top level must be a JSON object")
        unknown = set(obj) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"{where}: unknown field(s) {sorted(unknown)}")
        kw = {}
        for name, typ in (("data", DataConfig), ("mask", MaskSpec), ("model", ModelChoice)):
            if name in obj:
                kw[name] = _section(typ, obj[name], f"{where}: field '{name}'")
        for name in ("pretrain", "finetune"):
            if name in obj:
                kw[name] = _section(TrainConfig, obj[name], f"{where}: field '{name}'")
        for name, conv in (("seed", int), ("label_fraction", float)):
            if name in obj:
                try:
                    kw[name] = conv(obj[name])
                except (TypeError, ValueError) as exc:
                    raise ConfigError(f"{where}: field '{name}': {exc}") from exc
        if "sweep" in obj:
            kw["sweep"] = _check_sweep(obj["sweep"], f"{where}: field 'sweep'")
        cfg = cls(**kw)
        if not 0 < cfg.label_fraction <= 1:
            raise ConfigError(f"{where}: field 'label_fraction' must lie in (0, 1]")
        try:
            cfg.model.build()
        except (KeyError, ValueError) as exc:
            raise ConfigError(f"{where}: field 'model': {exc}") from exc
        return cfg.with_seed(cfg.seed)


def _section(typ, obj, where: str):
    if isinstance(obj, str) and typ is ModelChoice:
        obj = {"preset": obj}
    if not isinstance(obj, dict):
        raise ConfigError(f"{where} must be an object")
    known = {f.name for f in fields(typ)}
    unknown = set(obj) - known
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {sorted(unknown)}; expected {sorted(known)}")
    try:
        return typ(**obj)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def _check_sweep(obj, where: str) -> dict:
    if not isinstance(obj, dict):
        raise ConfigError(f"{where} must be an object")
    if not obj:
        return {}
    unknown = set(obj) - {"axis", "values", "repetitions"}
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {sorted(unknown)}")
    if obj.get("axis") not in SWEEP_AXES:
        raise ConfigError(f"{where}: axis must be one of {SWEEP_AXES}, got {obj.get('axis')!r}")
    if int(obj.get("repetitions", 1)) < 1:
        raise ConfigError(f"{where}: repetitions must be >= 1")
    return dict(obj)


def load_config(path: str | Path | None) -> RunConfig:
    """Parse a config file; errors carry the path and, for bad JSON, line and column."""
    if path is None:
        return RunConfig()
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"{path}: cannot read config ({exc.strerror or exc})") from exc
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: line {exc.lineno} column {exc.colno}: {exc.msg}") from exc
    return RunConfig.from_dict(obj, str(path))
