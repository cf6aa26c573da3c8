"""Run configuration: one JSON document fully determines a run."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

from .data import DatasetSpec, make_default_spec
from .errors import ValidationError
from .losses import LossWeights


@dataclass
class OptimConfig:
    lr: float = 2e-4
    weight_decay: float = 1e-4
    decay_epoch: int = 40
    decay_factor: float = 0.1
    epochs: int = 48

    def validate(self, where: str = "optim"):
        if self.lr <= 0:
            raise ValidationError(f"{where}.lr must be positive")
        if self.weight_decay < 0:
            raise ValidationError(f"{where}.weight_decay must be non-negative")
        if not 0 < self.decay_factor <= 1:
            raise ValidationError(f"{where}.decay_factor must be in (0, 1]")
        if self.epochs < 1 or self.decay_epoch < 0:
            raise ValidationError(f"{where}.epochs/decay_epoch out of range")
        return self


@dataclass
class TokenConfig:
    source: str = "synthetic"  # synthetic | file
    d_text: int = 64
    seed: int = 1
    path: str | None = None

    def validate(self):
        if self.source not in ("synthetic", "file"):
            raise ValidationError("tokens.source must be 'synthetic' or 'file'")
        if self.source == "file" and not self.path:
            raise ValidationError("tokens.path required when tokens.source='file'")
        if self.source == "synthetic" and self.d_text < 2:
            raise ValidationError("tokens.d_text must be >= 2")
        return self


@dataclass
class QraConfig:
    tau: float = 0.07
    layer: int = 5
    steps: int = 300
    batch_size: int | None = None  # None -> number of modalities
    lr: float = 1e-4

    def validate(self):
        if self.tau <= 0:
            raise ValidationError("qra.tau must be positive")
        if self.layer < 2:
            raise ValidationError("qra.layer must be >= 2")
        if self.steps < 0 or self.lr <= 0:
            raise ValidationError("qra.steps/lr out of range")
        return self


@dataclass
class RunConfig:
    dataset: DatasetSpec
    model: dict = field(default_factory=dict)  # DetectorConfig overrides (no n_classes)
    loss: LossWeights = field(default_factory=LossWeights)
    optim: OptimConfig = field(default_factory=OptimConfig)
    tokens: TokenConfig = field(default_factory=TokenConfig)
    qra: QraConfig = field(default_factory=QraConfig)
    batch_size: int = 4
    seed: int = 0
    moca: bool = True
    eval_every: int = 4

    def validate(self) -> "RunConfig":
        self.optim.validate()
        self.tokens.validate()
        self.qra.validate()
        self.loss.validate()
        reserved = {"n_classes", "moca_enabled", "qra_layer"} & set(self.model)
        if reserved:
            raise ValidationError(
                f"model section must not set {sorted(reserved)}; these are derived "
                "from the dataset, the top-level moca flag, and the qra section")
        if self.batch_size < 1:
            raise ValidationError("batch_size must be >= 1")
        m = self.dataset.n_modalities
        if self.qra_batch_size > m:
            raise ValidationError(
                f"qra.batch_size {self.qra_batch_size} exceeds modality count {m}; "
                "pretraining batches must cover distinct modalities")
        n_dec = self.model.get("n_decoder_layers", 6)
        if not 2 <= self.qra.layer <= n_dec:
            raise ValidationError(
                f"qra.layer must be in [2, {n_dec}] for this decoder depth")
        if self.eval_every < 1:
            raise ValidationError("eval_every must be >= 1")
        return self

    @property
    def qra_batch_size(self) -> int:
        return self.qra.batch_size or self.dataset.n_modalities

    def to_json(self) -> dict:
        return {
            "dataset": self.dataset.to_json(),
            "model": dict(self.model),
            "loss": asdict(self.loss),
            "optim": asdict(self.optim),
            "tokens": asdict(self.tokens),
            "qra": asdict(self.qra),
            "batch_size": self.batch_size,
            "seed": self.seed,
            "moca": self.moca,
            "eval_every": self.eval_every,
        }

    @staticmethod
    def from_json(doc: dict) -> "RunConfig":
        def section(name, cls):
            raw = doc.get(name, {})
            if not isinstance(raw, dict):
                raise ValidationError(f"config field {name!r} must be an object")
            try:
                return cls(**raw)
            except TypeError as e:
                raise ValidationError(f"config field {name!r}: {e}") from e

        if "dataset" not in doc:
            dataset = make_default_spec()
        elif isinstance(doc["dataset"], dict):
            dataset = DatasetSpec.from_json(doc["dataset"])
        else:
            raise ValidationError("config field 'dataset' must be an object")
        cfg = RunConfig(
            dataset=dataset,
            model=dict(doc.get("model", {})),
            loss=section("loss", LossWeights),
            optim=section("optim", OptimConfig),
            tokens=section("tokens", TokenConfig),
            qra=section("qra", QraConfig),
            batch_size=int(doc.get("batch_size", 4)),
            seed=int(doc.get("seed", 0)),
            moca=bool(doc.get("moca", True)),
            eval_every=int(doc.get("eval_every", 4)),
        )
        return cfg.validate()

    @staticmethod
    def load(path) -> "RunConfig":
        try:
            with open(path, "r", encoding="utf-8") as fh:
                doc = json.load(fh)
        except (OSError, json.JSONDecodeError) as e:
            raise ValidationError(f"cannot read config {path}: {e}") from e
        return RunConfig.from_json(doc)
