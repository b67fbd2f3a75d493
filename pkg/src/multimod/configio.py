"""Flat ``key = value`` config files for the CLI.

One assignment per line; ``#`` starts a comment; unknown keys are an error
(typos should not silently train the wrong model). Three record types
exist, one per dataclass: synthetic-data specs, model configs and training
configs. Values use plain syntax:

    modalities = color:3,height:1
    widths     = 16,32,64
    pairs      = 0-1,2-3
    fusion     = gated

Every loader has a matching formatter, and round-trips are exact, so run
manifests can embed the configs they were produced from.
"""

from __future__ import annotations

from typing import Dict

from .data import SynthSpec
from .model import ModalitySpec, ModelConfig
from .train import TrainConfig


def parse_kv_text(text: str, source: str = "<string>") -> Dict[str, str]:
    out: Dict[str, str] = {}
    for ln, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{source}:{ln}: expected 'key = value', got {raw.rstrip()!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        value = value.strip()
        if not key:
            raise ValueError(f"{source}:{ln}: empty key")
        if key in out:
            raise ValueError(f"{source}:{ln}: duplicate key {key!r}")
        out[key] = value
    return out


def parse_kv_file(path: str) -> Dict[str, str]:
    with open(path, "r", encoding="utf-8") as f:
        return parse_kv_text(f.read(), source=path)


def format_kv(pairs: Dict[str, str]) -> str:
    width = max((len(k) for k in pairs), default=0)
    return "".join(f"{k.ljust(width)} = {v}\n" for k, v in pairs.items())


def _parse_bool(value: str, key: str) -> bool:
    if value in ("1", "true", "yes"):
        return True
    if value in ("0", "false", "no"):
        return False
    raise ValueError(f"{key}: expected a boolean, got {value!r}")


def _apply_scalars(obj, kv: Dict[str, str], skip=()) -> None:
    """Assign kv entries onto dataclass fields of int/float/bool/str type."""
    hints = {f: type(getattr(obj, f)) for f in obj.__dataclass_fields__}
    for key, value in kv.items():
        if key in skip:
            continue
        if key not in hints:
            raise ValueError(f"unknown config key {key!r}")
        t = hints[key]
        if t is bool:
            setattr(obj, key, _parse_bool(value, key))
        elif t is int:
            setattr(obj, key, int(value))
        elif t is float:
            setattr(obj, key, float(value))
        elif t is str:
            setattr(obj, key, value)
        else:
            raise ValueError(f"config key {key!r} needs special syntax")


# ---------------------------------------------------------------------------
# synthetic data spec


def synth_spec_from_kv(kv: Dict[str, str]) -> SynthSpec:
    spec = SynthSpec()
    if "pairs" in kv:
        pairs = []
        if kv["pairs"]:
            for part in kv["pairs"].split(","):
                a, sep, b = part.partition("-")
                if not sep:
                    raise ValueError(f"pairs: expected 'a-b' entries, got {part!r}")
                pairs.append((int(a), int(b)))
        spec.confounded_pairs = tuple(pairs)
    _apply_scalars(spec, kv, skip=("pairs",))
    spec.validate()
    return spec


def synth_spec_to_kv(spec: SynthSpec) -> Dict[str, str]:
    return {
        "num_classes": str(spec.num_classes),
        "image_size": str(spec.image_size),
        "num_train": str(spec.num_train),
        "num_val": str(spec.num_val),
        "shapes_per_image": str(spec.shapes_per_image),
        "noise": repr(spec.noise),
        "seed": str(spec.seed),
        "multi_label": str(int(spec.multi_label)),
        "pairs": ",".join(f"{a}-{b}" for a, b in spec.confounded_pairs),
    }


# ---------------------------------------------------------------------------
# model config


def model_config_from_kv(kv: Dict[str, str]) -> ModelConfig:
    if "modalities" not in kv:
        raise ValueError("model config needs a 'modalities' entry (name:channels,...)")
    modalities = []
    for part in kv["modalities"].split(","):
        name, sep, ch = part.partition(":")
        if not sep:
            raise ValueError(f"modalities: expected 'name:channels', got {part!r}")
        modalities.append(ModalitySpec(name=name.strip(), channels=int(ch)))
    if "num_classes" not in kv:
        raise ValueError("model config needs 'num_classes'")
    cfg = ModelConfig(modalities=modalities, num_classes=int(kv["num_classes"]))
    if "widths" in kv:
        cfg.widths = tuple(int(x) for x in kv["widths"].split(","))
    _apply_scalars(cfg, kv, skip=("modalities", "num_classes", "widths"))
    cfg.validate()
    return cfg


def model_config_to_kv(cfg: ModelConfig) -> Dict[str, str]:
    return {
        "modalities": ",".join(f"{m.name}:{m.channels}" for m in cfg.modalities),
        "num_classes": str(cfg.num_classes),
        "widths": ",".join(str(w) for w in cfg.widths),
        "latent": str(cfg.latent),
        "fused": str(cfg.fused),
        "num_views": str(cfg.num_views),
        "fusion": cfg.fusion,
    }


# ---------------------------------------------------------------------------
# train config


def train_config_from_kv(kv: Dict[str, str]) -> TrainConfig:
    cfg = TrainConfig()
    _apply_scalars(cfg, kv)
    cfg.validate()
    return cfg


def train_config_to_kv(cfg: TrainConfig) -> Dict[str, str]:
    out: Dict[str, str] = {}
    for name in cfg.__dataclass_fields__:
        value = getattr(cfg, name)
        if isinstance(value, bool):
            out[name] = str(int(value))
        elif isinstance(value, float):
            out[name] = repr(value)
        else:
            out[name] = str(value)
    return out
