"""Run configuration: one flat ``section.key = <json value>`` text file.

Lines starting with ``#`` and blank lines are ignored. Unknown keys are an
error. Command-line flags override file values. ``dump`` writes every key
with its effective value in a fixed order, so the output is byte-stable and
can be fed straight back in.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any

from .augmentation import AugmentConfig
from .dataset import COMPONENTS, SplitProtocol
from .errors import ConfigError
from .network import NetworkConfig
from .trainer import AdamConfig, MarginState, TrainConfig


@dataclass(frozen=True)
class RunConfig:
    network: NetworkConfig = field(default_factory=NetworkConfig)
    training: TrainConfig = field(default_factory=TrainConfig)
    augmentation: AugmentConfig = field(default_factory=AugmentConfig)
    protocol: SplitProtocol = field(default_factory=SplitProtocol)
    component: str = "full"
    paths: dict = field(default_factory=dict)
    seed: int = 0

    def seeded(self) -> "RunConfig":
        """Propagate the run seed into the sections that consume randomness."""
        return replace(self, training=replace(self.training, seed=self.seed),
                       augmentation=replace(self.augmentation, seed=self.seed))


PATH_KEYS = ("manifest", "checkpoint", "out_dir")

_TRAINING_KEYS = {
    "batch_triplets": ("batch_triplets", None),
    "epochs": ("epochs", None),
    "candidate_pool": ("candidate_pool", None),
    "adam_lr": ("adam", "lr"),
    "adam_b1": ("adam", "b1"),
    "adam_b2": ("adam", "b2"),
    "adam_eps": ("adam", "eps"),
    "margin_beta": ("margin", "beta"),
    "margin_step": ("margin", "step"),
    "margin_max": ("margin", "beta_max"),
    "margin_yield_threshold": ("margin", "yield_threshold"),
    "margin_patience": ("margin", "patience"),
    "margin_trigger": ("margin_trigger", None),
    "margin_every_epochs": ("margin_every_epochs", None),
    "dtype": ("dtype", None),
}


def _plain(v: Any) -> Any:
    if isinstance(v, tuple):
        return [_plain(x) for x in v]
    return v


def to_flat(cfg: RunConfig) -> dict[str, Any]:
    flat: dict[str, Any] = {}
    for k, v in cfg.network.to_dict().items():
        flat[f"network.{k}"] = v
    t = cfg.training
    for key, (attr, sub) in _TRAINING_KEYS.items():
        v = getattr(t, attr)
        flat[f"training.{key}"] = getattr(v, sub) if sub else v
    for f in fields(AugmentConfig):
        if f.name != "seed":
            flat[f"augmentation.{f.name}"] = _plain(getattr(cfg.augmentation, f.name))
    for f in fields(SplitProtocol):
        flat[f"protocol.{f.name}"] = getattr(cfg.protocol, f.name)
    flat["protocol.component"] = cfg.component
    for k in PATH_KEYS:
        flat[f"paths.{k}"] = cfg.paths.get(k, "")
    flat["seed"] = cfg.seed
    return flat


def from_flat(flat: dict[str, Any], base: RunConfig | None = None) -> RunConfig:
    base = base or RunConfig()
    known = to_flat(base)
    unknown = sorted(set(flat) - set(known))
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    merged = {**known, **flat}
    try:
        net = NetworkConfig.from_dict({k.split(".", 1)[1]: v for k, v in merged.items() if k.startswith("network.")})
        tr: dict[str, Any] = {}
        adam: dict[str, Any] = {}
        margin: dict[str, Any] = {}
        for key, (attr, sub) in _TRAINING_KEYS.items():
            v = merged[f"training.{key}"]
            if attr == "adam":
                adam[sub] = float(v)
            elif attr == "margin":
                margin[sub] = v
            else:
                tr[attr] = v
        training = TrainConfig(adam=AdamConfig(**adam), margin=MarginState(**margin), **tr)
        aug = AugmentConfig(**{f.name: merged[f"augmentation.{f.name}"]
                               for f in fields(AugmentConfig) if f.name != "seed"})
        proto = SplitProtocol(**{f.name: merged[f"protocol.{f.name}"] for f in fields(SplitProtocol)})
    except TypeError as exc:
        raise ConfigError(f"bad config value: {exc}") from exc
    component = merged["protocol.component"]
    if component not in COMPONENTS:
        raise ConfigError(f"protocol.component must be one of {COMPONENTS}, got {component!r}")
    paths = {k: merged[f"paths.{k}"] for k in PATH_KEYS if merged[f"paths.{k}"]}
    cfg = RunConfig(net, training, aug, proto, component, paths, int(merged["seed"]))
    cfg.network.validate()
    cfg.training.validate()
    cfg.augmentation.validate(cfg.protocol.train_per_subject)
    return cfg.seeded()


def parse(text: str, source: str = "<config>") -> dict[str, Any]:
    flat: dict[str, Any] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key = key.strip()
        try:
            flat[key] = json.loads(value.strip())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{source}:{lineno}: value for {key} is not valid JSON: {exc}") from exc
    return flat


def load_config(path=None, overrides: dict[str, Any] | None = None) -> RunConfig:
    flat: dict[str, Any] = {}
    if path is not None:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        flat.update(parse(text, str(path)))
    flat.update({k: v for k, v in (overrides or {}).items() if v is not None})
    return from_flat(flat)


def dump(cfg: RunConfig) -> str:
    return "".join(f"{k} = {json.dumps(v)}\n" for k, v in to_flat(cfg).items())


def config_hash(cfg: RunConfig) -> str:
    """Digest of the experiment settings; file paths are left out so every stage of a run agrees."""
    text = "".join(line for line in dump(cfg).splitlines(keepends=True) if not line.startswith("paths."))
    return hashlib.sha256(text.encode()).hexdigest()[:16]
