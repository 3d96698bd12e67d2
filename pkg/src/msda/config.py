"""Run configuration: typed sections, strict JSON parsing, variant names.

Unknown keys anywhere in a config file are errors; a run directory always
contains the exact resolved config it was produced from.
"""
from __future__ import annotations

import dataclasses
import json
import re
from dataclasses import dataclass
from pathlib import Path

from .encoders import EncoderConfig, EncoderError


class ConfigError(ValueError):
    """Malformed run configuration (maps to CLI usage errors)."""


VARIANT_NAMES = (
    "Basic",
    "Adv-X",
    "Independent-Avg",
    "Independent-Ft",
    "MoE-Avg",
    "MoE-Att",
    "MoE-Att-Adv-X",
    "MoE-DC",
)

_PLAIN_FAMILIES = {
    "Basic": "basic",
    "Independent-Avg": "independent-avg",
    "Independent-Ft": "independent-ft",
    "MoE-Avg": "moe-avg",
    "MoE-Att": "moe-att",
    "MoE-DC": "moe-dc",
}


def parse_variant(name: str) -> tuple[str, int | None]:
    """Variant name -> (family, adversarial attach layer or None)."""
    if name in _PLAIN_FAMILIES:
        return _PLAIN_FAMILIES[name], None
    m = re.fullmatch(r"Adv-([1-9]\d*)", name)
    if m:
        return "adv", int(m.group(1))
    m = re.fullmatch(r"MoE-Att-Adv-([1-9]\d*)", name)
    if m:
        return "moe-att-adv", int(m.group(1))
    raise ConfigError(f"unknown variant {name!r}; valid names: {', '.join(VARIANT_NAMES)}")


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 3e-5
    weight_decay: float = 0.01
    epochs: int = 5
    warmup_steps: int = 200
    batch_size: int = 8
    grad_accumulation: int = 1
    lam: float = 0.5
    gamma: float = 0.003
    seed: int = 0
    selection_metric: str = "accuracy"
    val_fraction: float = 0.1
    log_every: int = 0

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ConfigError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.weight_decay < 0:
            raise ConfigError(f"weight_decay must be nonnegative, got {self.weight_decay}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.warmup_steps < 0:
            raise ConfigError(f"warmup_steps must be >= 0, got {self.warmup_steps}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.grad_accumulation < 1:
            raise ConfigError(f"grad_accumulation must be >= 1, got {self.grad_accumulation}")
        if not 0.0 <= self.lam <= 1.0:
            raise ConfigError(f"lambda must be in [0, 1], got {self.lam}")
        if self.gamma < 0:
            raise ConfigError(f"gamma must be >= 0, got {self.gamma}")
        if self.selection_metric not in ("accuracy", "f1"):
            raise ConfigError(f"selection_metric must be 'accuracy' or 'f1', got {self.selection_metric!r}")
        if not 0.0 < self.val_fraction < 1.0:
            raise ConfigError(f"val_fraction must be in (0, 1), got {self.val_fraction}")
        if self.log_every < 0:
            raise ConfigError(f"log_every must be >= 0, got {self.log_every}")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["lambda"] = d.pop("lam")
        return d


@dataclass(frozen=True)
class AdversarialConfig:
    attach_layer: int | None = None
    domain_label_mode: str = "transductive"

    def __post_init__(self):
        if self.attach_layer is not None and self.attach_layer < 1:
            raise ConfigError(f"attach_layer must be >= 1, got {self.attach_layer}")
        if self.domain_label_mode not in ("transductive", "sources"):
            raise ConfigError(
                f"domain_label_mode must be 'transductive' or 'sources', got {self.domain_label_mode!r}"
            )

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass(frozen=True)
class MixingConfig:
    include_global_in_meta_source: bool = True
    scale_attention: bool = False
    finetune_trials: int = 100

    def __post_init__(self):
        if self.finetune_trials < 1:
            raise ConfigError(f"finetune_trials must be >= 1, got {self.finetune_trials}")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass(frozen=True)
class RunConfig:
    variant: str = "Basic"
    dataset: str | None = None
    output_dir: str | None = None
    holdout: str | None = None
    seeds: tuple[int, ...] = (0,)
    encoder: EncoderConfig = EncoderConfig()
    train: TrainConfig = TrainConfig()
    adversarial: AdversarialConfig = AdversarialConfig()
    mixing: MixingConfig = MixingConfig()

    def __post_init__(self):
        family, layer = parse_variant(self.variant)
        if not self.seeds:
            raise ConfigError("seeds must be a non-empty list of integers")
        if layer is not None and self.adversarial.attach_layer is not None:
            if layer != self.adversarial.attach_layer:
                raise ConfigError(
                    f"variant {self.variant!r} names layer {layer} but adversarial.attach_layer"
                    f" is {self.adversarial.attach_layer}"
                )
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))

    @property
    def family(self) -> str:
        return parse_variant(self.variant)[0]

    @property
    def attach_layer(self) -> int | None:
        layer = parse_variant(self.variant)[1]
        return layer if layer is not None else self.adversarial.attach_layer

    def validate_layers(self) -> None:
        """Check the adversarial attachment point against the encoder depth."""
        layer = self.attach_layer
        if self.family in ("adv", "moe-att-adv"):
            if layer is None:
                raise ConfigError(f"variant {self.variant!r} needs an attach layer")
            if layer > self.encoder.num_layers:
                raise ConfigError(
                    f"attach layer {layer} out of range for a {self.encoder.num_layers}-layer encoder"
                )

    def to_dict(self) -> dict:
        return {
            "variant": self.variant,
            "dataset": self.dataset,
            "output_dir": self.output_dir,
            "holdout": self.holdout,
            "seeds": list(self.seeds),
            "encoder": self.encoder.to_dict(),
            "train": self.train.to_dict(),
            "adversarial": self.adversarial.to_dict(),
            "mixing": self.mixing.to_dict(),
        }


def _take(obj: dict, where: str, fields: dict) -> dict:
    if not isinstance(obj, dict):
        raise ConfigError(f"{where}: expected an object")
    unknown = set(obj) - set(fields)
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")
    return {fields[k]: v for k, v in obj.items()}


def run_config_from_dict(obj: dict) -> RunConfig:
    top = _take(
        obj,
        "config",
        {
            "variant": "variant",
            "dataset": "dataset",
            "output_dir": "output_dir",
            "holdout": "holdout",
            "seeds": "seeds",
            "encoder": "encoder",
            "train": "train",
            "adversarial": "adversarial",
            "mixing": "mixing",
        },
    )
    try:
        if "encoder" in top:
            enc = _take(
                top["encoder"],
                "encoder",
                {k: k for k in ("backbone", "dim", "num_layers", "vocab_hash_size", "seed", "hash_seed", "max_len")},
            )
            top["encoder"] = EncoderConfig(**enc)
        if "train" in top:
            tr = _take(
                top["train"],
                "train",
                {
                    "learning_rate": "learning_rate",
                    "weight_decay": "weight_decay",
                    "epochs": "epochs",
                    "warmup_steps": "warmup_steps",
                    "batch_size": "batch_size",
                    "grad_accumulation": "grad_accumulation",
                    "lambda": "lam",
                    "gamma": "gamma",
                    "seed": "seed",
                    "selection_metric": "selection_metric",
                    "val_fraction": "val_fraction",
                    "log_every": "log_every",
                },
            )
            top["train"] = TrainConfig(**tr)
        if "adversarial" in top:
            adv = _take(
                top["adversarial"], "adversarial", {k: k for k in ("attach_layer", "domain_label_mode")}
            )
            top["adversarial"] = AdversarialConfig(**adv)
        if "mixing" in top:
            mix = _take(
                top["mixing"],
                "mixing",
                {k: k for k in ("include_global_in_meta_source", "scale_attention", "finetune_trials")},
            )
            top["mixing"] = MixingConfig(**mix)
        if "seeds" in top:
            top["seeds"] = tuple(top["seeds"])
        return RunConfig(**top)
    except EncoderError as err:
        raise ConfigError(str(err)) from err
    except TypeError as err:
        raise ConfigError(f"bad config value: {err}") from err


def load_run_config(path: str | Path) -> RunConfig:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    try:
        obj = json.loads(p.read_text(encoding="utf-8"))
    except json.JSONDecodeError as err:
        raise ConfigError(f"{p}: invalid JSON: {err.msg}") from err
    return run_config_from_dict(obj)
