"""Checkpoints: a JSON manifest next to a flat little-endian float64 blob."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .model import ActionClassifier, ModelConfig, SkeletonMAE

FORMAT = "skelmae-checkpoint"
MANIFEST = "manifest.json"
BLOB = "params.bin"


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    kind: str  # "pretrain" or "finetune"
    config: ModelConfig
    state: dict[str, np.ndarray]
    n_classes: int | None = None
    meta: dict = field(default_factory=dict)

    @classmethod
    def from_model(cls, model, meta: dict | None = None) -> "Checkpoint":
        if isinstance(model, ActionClassifier):
            return cls("finetune", model.cfg, model.state_dict(), model.n_classes, dict(meta or {}))
        return cls("pretrain", model.cfg, model.state_dict(), None, dict(meta or {}))

    def build(self):
        """Instantiate the model this checkpoint belongs to and load its weights."""
        if self.kind == "finetune":
            model = ActionClassifier(self.config, self.n_classes)
        else:
            model = SkeletonMAE(self.config)
        model.load_state_dict(self.state)
        return model

    def encoder_state(self) -> dict[str, np.ndarray]:
        return {k: v for k, v in self.state.items() if k.startswith("encoder.")}

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.mkdir(parents=True, exist_ok=True)
        entries, offset, chunks = [], 0, []
        for name, arr in self.state.items():
            a = np.ascontiguousarray(arr, dtype="<f8")
            entries.append({"name": name, "shape": list(a.shape), "offset": offset, "count": int(a.size)})
            offset += a.nbytes
            chunks.append(a.tobytes())
        manifest = {
            "format": FORMAT,
            "version": 1,
            "kind": self.kind,
            "preset": self.config.name,
            "config": self.config.to_dict(),
            "n_classes": self.n_classes,
            "dtype": "<f8",
            "meta": self.meta,
            "parameters": entries,
        }
        (path / BLOB).write_bytes(b"".join(chunks))
        (path / MANIFEST).write_text(json.dumps(manifest, indent=2))
        return path

    @classmethod
    def load(cls, path: str | Path) -> "Checkpoint":
        path = Path(path)
        try:
            manifest = json.loads((path / MANIFEST).read_text())
            blob = (path / BLOB).read_bytes()
        except FileNotFoundError as exc:
            raise CheckpointError(f"cannot read checkpoint at {path}: {exc}") from exc
        if manifest.get("format") != FORMAT:
            raise CheckpointError(f"{path} is not a {FORMAT} directory")
        cfg = ModelConfig.from_dict(manifest["config"])
        state = {}
        for e in manifest["parameters"]:
            end = e["offset"] + 8 * e["count"]
            if end > len(blob):
                raise CheckpointError(f"{path}: blob too short for parameter {e['name']}")
            state[e["name"]] = np.frombuffer(blob, dtype="<f8", count=e["count"],
                                             offset=e["offset"]).reshape(e["shape"]).astype(np.float64)
        ckpt = cls(manifest["kind"], cfg, state, manifest.get("n_classes"), manifest.get("meta", {}))
        ckpt.verify()
        return ckpt

    def verify(self) -> None:
        """Check every stored shape against the model its config describes."""
        model = ActionClassifier(self.config, self.n_classes) if self.kind == "finetune" else SkeletonMAE(self.config)
        expected = [(n, v.shape) for n, v in model.state_dict().items()]
        got = [(n, tuple(a.shape)) for n, a in self.state.items()]
        if expected != got:
            raise CheckpointError(f"checkpoint does not match its config:\n  expected {expected}\n  stored   {got}")
