"""Flat ``key=value`` run configuration with dotted keys.

Training keys mirror :class:`TrainConfig` (``lr``, ``loss.gamma``,
``clahe.tiles``, ``schedule.end_size`` ...); model keys carry a ``model.``
prefix (``model.variant``, ``model.ablation`` ...). Unknown keys are rejected.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from pathlib import Path

from .errors import ConfigurationError
from .nn import ModelConfig, _VARIANTS
from .trainer import TrainConfig


def _flatten(d: dict, prefix: str = "") -> dict:
    out = {}
    for k, v in d.items():
        if isinstance(v, dict):
            out.update(_flatten(v, f"{prefix}{k}."))
        else:
            out[f"{prefix}{k}"] = v
    return out


def _nest(flat: dict) -> dict:
    out: dict = {}
    for key, v in flat.items():
        node = out
        *parents, leaf = key.split(".")
        for p in parents:
            node = node.setdefault(p, {})
        node[leaf] = v
    return out


TRAIN_DEFAULTS = _flatten(asdict(TrainConfig()))
MODEL_DEFAULTS = {f"model.{k}": v for k, v in asdict(ModelConfig()).items()}
KNOWN_KEYS = tuple(sorted({**TRAIN_DEFAULTS, **MODEL_DEFAULTS}))


def _coerce(key: str, text: str):
    default = {**TRAIN_DEFAULTS, **MODEL_DEFAULTS}[key]
    text = text.strip()
    try:
        if isinstance(default, bool):
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
    except ValueError:
        raise ConfigurationError(f"{key}: cannot parse {text!r} as {type(default).__name__}") from None
    return text


def parse_assignments(lines, source: str = "<flags>") -> dict:
    """``key=value`` lines (``#`` comments and blank lines allowed) -> typed dict."""
    out = {}
    for n, raw in enumerate(lines, 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"{source}:{n}: expected key=value, got {raw.strip()!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in KNOWN_KEYS:
            raise ConfigurationError(f"{source}:{n}: unknown config key {key!r}")
        out[key] = _coerce(key, value)
    return out


@dataclass
class RunConfig:
    values: dict = field(default_factory=dict)

    @classmethod
    def load(cls, path=None, overrides=(), variant: str | None = None) -> "RunConfig":
        """Merge file, then ``--set`` overrides, then ``--variant`` (later wins)."""
        values = {}
        if path is not None:
            p = Path(path)
            if not p.is_file():
                raise ConfigurationError(f"config file {p} not found")
            values.update(parse_assignments(p.read_text().splitlines(), str(p)))
        values.update(parse_assignments(overrides))
        if variant is not None:
            values["model.variant"] = variant.lower()
        return cls(values)

    def train_config(self, base: TrainConfig | None = None) -> TrainConfig:
        flat = _flatten(asdict(base or TrainConfig()))
        flat.update({k: v for k, v in self.values.items() if not k.startswith("model.")})
        return TrainConfig.from_dict(_nest(flat))

    def model_config(self) -> ModelConfig:
        given = {k[6:]: v for k, v in self.values.items() if k.startswith("model.")}
        variant = given.get("variant", "s")
        if variant in _VARIANTS:
            base = {**asdict(ModelConfig()), **_VARIANTS[variant], "variant": variant}
        else:
            base = asdict(ModelConfig())
        return ModelConfig(**{**base, **given})

    def effective(self, base: TrainConfig | None = None) -> dict:
        """Every key with its resolved value, for echoing before work starts."""
        flat = _flatten(asdict(self.train_config(base)))
        flat.update({f"model.{k}": v for k, v in asdict(self.model_config()).items()})
        return dict(sorted(flat.items()))

    def echo(self, base: TrainConfig | None = None) -> str:
        return "".join(f"{k}={v}\n" for k, v in self.effective(base).items())
