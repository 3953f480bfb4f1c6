"""Training loop: AdamW, EMA shadow weights, per-step CLAHE pseudo-labels, validation, checkpoints."""
from __future__ import annotations

import json
import logging
import math
import struct
import zlib
from dataclasses import asdict, dataclass, field, fields, is_dataclass, replace
from pathlib import Path
from typing import Callable

import numpy as np

from . import tensor as T
from .clahe import ClaheConfig, make_pseudo_label
from .data import DatasetIndex, ImageCache, ResizeSchedule, batch_iterator, center_crop, progressive_size
from .errors import ConfigurationError, IntegrityError, NumericalError, UsageError
from .losses import LossWeights, total_loss
from .metrics import MetricReport, evaluate_image
from .nn import DGNet, ModelConfig
from .tensor import Parameter, Tensor

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"DGN1"
CHECKPOINT_VERSION = 1
LOG_COLUMNS = ("step", "l1", "ssim", "dynamic", "total", "grad_norm", "mse")


@dataclass(frozen=True)
class AdamWConfig:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-2


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    batch: int = 5
    seed: int = 0
    epochs: int = 300
    max_steps: int = 0  # 0: run all epochs
    adamw: AdamWConfig = field(default_factory=AdamWConfig)
    ema_decay: float = 0.999
    ema_warmup: bool = True
    loss: LossWeights = field(default_factory=LossWeights)
    clahe: ClaheConfig = field(default_factory=ClaheConfig)
    schedule: ResizeSchedule = field(default_factory=ResizeSchedule)
    gamma_warmup: bool = False
    pseudo_label: str = "step"
    grad_clip: float = 0.0  # 0: off
    val_every: int = 1

    def __post_init__(self):
        if not self.lr > 0:
            raise ConfigurationError("lr must be > 0")
        if not 0 < self.ema_decay < 1:
            raise ConfigurationError("ema_decay must lie strictly between 0 and 1")
        if self.batch < 1 or self.epochs < 1:
            raise ConfigurationError("batch and epochs must be >= 1")
        if self.pseudo_label not in ("step", "epoch"):
            raise ConfigurationError("pseudo_label must be 'step' or 'epoch'")
        if self.grad_clip < 0 or self.max_steps < 0:
            raise ConfigurationError("grad_clip and max_steps must be >= 0")

    @classmethod
    def desk(cls, **overrides) -> "TrainConfig":
        """Small-image CPU profile: 20 epochs, sizes 48 -> 96."""
        base = dict(epochs=20, schedule=ResizeSchedule(48, 96, 4))
        return cls(**{**base, **overrides})

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return _from_dict(cls, d)


def _from_dict(cls, d):
    kwargs = {}
    for f in fields(cls):
        if f.name not in d:
            continue
        v = d[f.name]
        sub = f.default_factory() if callable(f.default_factory) else None
        kwargs[f.name] = _from_dict(type(sub), v) if is_dataclass(sub) else v
    return cls(**kwargs)


# ---------------------------------------------------------------------------
# optimizer and EMA


@dataclass
class AdamWState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adamw_step(params: list[Parameter], state: AdamWState, lr: float, config: AdamWConfig = AdamWConfig()) -> None:
    """Decoupled-weight-decay Adam update, in place. Non-trainable parameters are skipped."""
    trainable = [p for p in params if p.trainable]
    missing = [p.name or repr(p) for p in trainable if p.grad is None]
    if missing:
        raise UsageError(f"no gradient for trainable parameter(s): {', '.join(missing[:5])}")
    state.step += 1
    t = state.step
    b1, b2 = config.beta1, config.beta2
    c1, c2 = 1 - b1 ** t, 1 - b2 ** t
    for i, p in enumerate(trainable):
        key = p.name or str(i)
        g = p.grad
        m = state.m.get(key)
        if m is None:
            m = state.m[key] = np.zeros_like(p.data)
            state.v[key] = np.zeros_like(p.data)
        v = state.v[key]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * (g * g)
        if config.weight_decay:
            p.data *= 1 - lr * config.weight_decay
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + config.eps)


@dataclass
class EMAState:
    decay: float = 0.999
    shadow: dict = field(default_factory=dict)

    @classmethod
    def from_model(cls, model, decay: float = 0.999) -> "EMAState":
        if not 0 < decay < 1:
            raise ConfigurationError("EMA decay must lie strictly between 0 and 1")
        return cls(decay, {n: p.data.copy() for n, p in model.named_parameters() if p.trainable})


def ema_update(model, ema: EMAState, decay: float | None = None) -> None:
    """shadow <- decay * shadow + (1 - decay) * param for every trainable parameter."""
    d = ema.decay if decay is None else decay
    if not 0 < d < 1:
        raise ConfigurationError("EMA decay must lie strictly between 0 and 1")
    for name, p in model.named_parameters():
        if not p.trainable:
            continue
        s = ema.shadow.get(name)
        if s is None or s.shape != p.shape:
            raise UsageError(f"EMA shadow for {name!r} is missing or has drifted shape")
        s *= d
        s += (1 - d) * p.data


class use_weights:
    """Context manager that temporarily loads EMA shadow weights into a model."""

    def __init__(self, model, ema: EMAState | None):
        self.model, self.ema, self.saved = model, ema, {}

    def __enter__(self):
        if self.ema is not None:
            for name, p in self.model.named_parameters():
                if name in self.ema.shadow:
                    self.saved[name] = p.data
                    p.data = self.ema.shadow[name].astype(p.dtype, copy=True)
        return self.model

    def __exit__(self, *exc):
        for name, p in self.model.named_parameters():
            if name in self.saved:
                p.data = self.saved[name]
        return False


def grad_norm(params) -> float:
    return math.sqrt(sum(float(np.sum(p.grad.astype(np.float64) ** 2)) for p in params if p.grad is not None))


# ---------------------------------------------------------------------------
# training


@dataclass
class StepResult:
    step: int
    l1: float
    ssim: float
    dynamic: float
    total: float
    grad_norm: float
    mse: float
    pseudo_label: Tensor | None = None

    def log_line(self) -> str:
        vals = [str(self.step)] + [repr(float(getattr(self, k))) for k in LOG_COLUMNS[1:]]
        return "\t".join(vals)


class Trainer:
    """Owns the model, optimizer state, EMA and the position in the epoch/batch stream."""

    def __init__(self, model_config: ModelConfig, config: TrainConfig, train: DatasetIndex | None = None,
                 val: DatasetIndex | None = None, log_path=None):
        self.model_config = model_config
        self.config = config
        self.model = DGNet(model_config, seed=config.seed)
        self.opt = AdamWState()
        self.ema = EMAState.from_model(self.model, config.ema_decay)
        self.rng = np.random.default_rng(config.seed)
        self.train_set, self.val_set = train, val
        self.cache = ImageCache()
        self.step = 0
        self.epoch = 0
        self.batch_in_epoch = 0
        self.pseudo_cache: dict[str, Tensor] = {}
        self.log_path = Path(log_path) if log_path else None
        if self.log_path and not self.log_path.exists():
            self.log_path.parent.mkdir(parents=True, exist_ok=True)
            self.log_path.write_text("\t".join(LOG_COLUMNS) + "\n")

    # -- schedule bookkeeping

    def steps_per_epoch(self) -> int:
        return math.ceil(len(self.train_set) / self.config.batch)

    def total_steps(self) -> int:
        n = self.config.epochs * self.steps_per_epoch()
        return min(n, self.config.max_steps) if self.config.max_steps else n

    def current_gamma(self) -> float:
        gamma = self.config.loss.gamma
        if not self.config.gamma_warmup:
            return gamma
        warm = max(1, int(0.1 * self.total_steps()))
        return gamma * min(1.0, self.step / warm)

    def ema_decay_now(self) -> float:
        d = self.config.ema_decay
        if self.config.ema_warmup:
            d = min(d, (1 + self.step) / (10 + self.step))
        return d

    # -- one optimization step

    def train_step(self, raw: Tensor, ref: Tensor, ids: list[str] | None = None,
                   keep_pseudo_label: bool = False) -> StepResult:
        cfg = self.config
        model = self.model
        model.train()
        model.zero_grad()
        pred = model(raw)
        if not np.all(np.isfinite(pred.data)):
            raise NumericalError(f"non-finite prediction at step {self.step + 1}")
        gamma = self.current_gamma()
        pseudo = None
        if gamma:
            pseudo = self._pseudo_label(pred, ids)
        loss, parts = total_loss(pred, ref, cfg.loss, cfg.clahe, pseudo_label=pseudo, gamma=gamma)
        total = loss.item()
        if not math.isfinite(total) or not all(math.isfinite(v) for v in parts.values()):
            raise NumericalError(f"non-finite loss at step {self.step + 1}: total={total}, terms={parts}")
        T.backward(loss)
        params = model.parameters(trainable_only=True)
        gnorm = grad_norm(params)
        if not math.isfinite(gnorm):
            raise NumericalError(f"non-finite gradient norm at step {self.step + 1}: terms={parts}")
        if cfg.grad_clip and gnorm > cfg.grad_clip:
            for p in params:
                p.grad = p.grad * (cfg.grad_clip / gnorm)
        adamw_step(model.parameters(), self.opt, cfg.lr, cfg.adamw)
        self.step += 1
        ema_update(model, self.ema, self.ema_decay_now())
        mse = float(np.mean((pred.data.astype(np.float64) - ref.data) ** 2))
        result = StepResult(self.step, parts["l1"], parts["ssim"], parts["dynamic"], total, gnorm, mse,
                            pseudo if keep_pseudo_label else None)
        if self.log_path:
            with open(self.log_path, "a") as fh:
                fh.write(result.log_line() + "\n")
        return result

    def _pseudo_label(self, pred: Tensor, ids) -> Tensor:
        fresh = make_pseudo_label(T.detach(pred), self.config.clahe)
        if self.config.pseudo_label == "step" or ids is None:
            return fresh
        # per-epoch mode: reuse the label from the previous visit of each image
        out = fresh.data.copy()
        for i, image_id in enumerate(ids):
            old = self.pseudo_cache.get(image_id)
            if old is not None and old.shape == out[i].shape:
                out[i] = old
            self.pseudo_cache[image_id] = fresh.data[i].copy()
        return Tensor(out, dtype=fresh.dtype)

    # -- loops

    def run(self, max_steps: int | None = None, on_step: Callable[[StepResult], None] | None = None,
            on_epoch: Callable[[int], None] | None = None) -> list[StepResult]:
        """Train until ``max_steps`` (or the configured budget); resumes mid-epoch."""
        if self.train_set is None:
            raise UsageError("Trainer has no training set")
        limit = self.total_steps() if max_steps is None else min(self.step + max_steps, self.total_steps())
        results = []
        while self.step < limit and self.epoch < self.config.epochs:
            size = progressive_size(self.epoch, self.config.epochs, self.config.schedule)
            batches = batch_iterator(self.train_set, self.config.batch, size, self.config.seed, self.epoch, self.cache)
            for k, (ids, raw, ref) in enumerate(batches):
                if k < self.batch_in_epoch:
                    continue
                if self.step >= limit:
                    return results
                res = self.train_step(raw, ref, ids)
                self.batch_in_epoch = k + 1
                results.append(res)
                if on_step:
                    on_step(res)
            self.epoch += 1
            self.batch_in_epoch = 0
            if on_epoch:
                on_epoch(self.epoch)
        return results

    def validate(self, use_ema: bool = True) -> MetricReport:
        if self.val_set is None:
            raise UsageError("Trainer has no validation set")
        return validate(self.model, self.val_set, self.ema if use_ema else None, self.cache)

    def predict(self, image: Tensor, use_ema: bool = True) -> Tensor:
        return predict(self.model, image, self.ema if use_ema else None)


def predict(model, image: Tensor, ema: EMAState | None = None) -> Tensor:
    """Eval-mode forward without recording a tape."""
    was_training = getattr(model, "training", False)
    if hasattr(model, "eval"):
        model.eval()
    try:
        with T.no_grad(), use_weights(model, ema):
            x = Tensor(image.data, dtype=T.get_default_dtype())
            return model(x)
    finally:
        if was_training:
            model.train()


def validate(model, val: DatasetIndex, ema: EMAState | None = None, cache: ImageCache | None = None) -> MetricReport:
    """Full metric report on ``val`` at native resolution (centre-cropped to a multiple of 8)."""
    if val.kind != "paired":
        raise ConfigurationError("validation needs a paired dataset")
    cache = cache or ImageCache()
    report = MetricReport()
    for e in val.entries:
        raw = center_crop(cache.get(e.raw_path))
        ref = center_crop(cache.get(e.reference_path))
        pred = predict(model, raw, ema)
        report.add(e.id, evaluate_image(pred, ref))
    return report


# ---------------------------------------------------------------------------
# checkpoints


def _state_arrays(trainer: Trainer) -> dict[str, np.ndarray]:
    arrays = {}
    for name, p in trainer.model.named_parameters():
        arrays[f"param/{name}"] = p.data
    for name, s in trainer.ema.shadow.items():
        arrays[f"ema/{name}"] = s
    for name, m in trainer.opt.m.items():
        arrays[f"adam_m/{name}"] = m
        arrays[f"adam_v/{name}"] = trainer.opt.v[name]
    for name, st in trainer.model.named_bn_states():
        arrays[f"bn_mean/{name}"] = st.running_mean
        arrays[f"bn_var/{name}"] = st.running_var
    return arrays


def save_checkpoint(trainer: Trainer, path) -> None:
    """Write magic + version + JSON header + raw little-endian array payload."""
    arrays = _state_arrays(trainer)
    directory, chunks, offset = [], [], 0
    for name, arr in arrays.items():
        le = np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<"))
        raw = le.tobytes()
        directory.append({"name": name, "dtype": le.dtype.str, "shape": list(arr.shape),
                          "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    payload = b"".join(chunks)
    header = {
        "version": CHECKPOINT_VERSION,
        "model_config": trainer.model_config.to_dict(),
        "train_config": trainer.config.to_dict(),
        "step": trainer.step,
        "epoch": trainer.epoch,
        "batch_in_epoch": trainer.batch_in_epoch,
        "adam_step": trainer.opt.step,
        "bn_batches": {n: st.batches_tracked for n, st in trainer.model.named_bn_states()},
        "rng_state": trainer.rng.bit_generator.state,
        "arrays": directory,
        "payload_bytes": len(payload),
        "payload_crc32": zlib.crc32(payload),
    }
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<IQ", CHECKPOINT_VERSION, len(hbytes)))
        fh.write(hbytes)
        fh.write(payload)
    tmp.replace(path)


def read_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    """Parse and integrity-check a checkpoint; returns (header, arrays)."""
    blob = Path(path).read_bytes()
    if len(blob) < 16 or blob[:4] != CHECKPOINT_MAGIC:
        raise IntegrityError(f"{path}: not a DGN1 checkpoint")
    version, hlen = struct.unpack("<IQ", blob[4:16])
    if version != CHECKPOINT_VERSION:
        raise IntegrityError(f"{path}: checkpoint version {version} is not supported (expected {CHECKPOINT_VERSION})")
    if len(blob) < 16 + hlen:
        raise IntegrityError(f"{path}: truncated header")
    try:
        header = json.loads(blob[16:16 + hlen].decode("utf-8"))
    except ValueError as exc:
        raise IntegrityError(f"{path}: corrupt header") from exc
    payload = blob[16 + hlen:]
    if len(payload) != header["payload_bytes"]:
        raise IntegrityError(f"{path}: payload is {len(payload)} bytes, expected {header['payload_bytes']}")
    if zlib.crc32(payload) != header["payload_crc32"]:
        raise IntegrityError(f"{path}: payload checksum mismatch")
    arrays = {}
    for d in header["arrays"]:
        raw = payload[d["offset"]:d["offset"] + d["nbytes"]]
        arrays[d["name"]] = np.frombuffer(raw, dtype=np.dtype(d["dtype"])).reshape(d["shape"]).copy()
    return header, arrays


def load_checkpoint(path, model_config: ModelConfig | None = None, train: DatasetIndex | None = None,
                    val: DatasetIndex | None = None, config: TrainConfig | None = None,
                    log_path=None) -> Trainer:
    """Rebuild a trainer from disk. ``model_config``, when given, must match the stored one."""
    header, arrays = read_checkpoint(path)
    stored = ModelConfig(**header["model_config"])
    if model_config is not None and model_config != stored:
        raise ConfigurationError(f"checkpoint was written for {stored}, not {model_config}")
    tconf = config or TrainConfig.from_dict(header["train_config"])
    trainer = Trainer(stored, tconf, train, val, log_path)
    restore(trainer, header, arrays)
    return trainer


def restore(trainer: Trainer, header: dict, arrays: dict[str, np.ndarray]) -> None:
    params = dict(trainer.model.named_parameters())
    for name, p in params.items():
        key = f"param/{name}"
        if key not in arrays or arrays[key].shape != p.shape:
            raise ConfigurationError(f"checkpoint does not match the model at {name!r}")
        p.data = arrays[key].astype(p.dtype)
    trainer.ema.shadow = {k[4:]: v for k, v in arrays.items() if k.startswith("ema/")}
    trainer.opt = AdamWState(header["adam_step"],
                             {k[7:]: v for k, v in arrays.items() if k.startswith("adam_m/")},
                             {k[7:]: v for k, v in arrays.items() if k.startswith("adam_v/")})
    for name, st in trainer.model.named_bn_states():
        st.running_mean = arrays[f"bn_mean/{name}"]
        st.running_var = arrays[f"bn_var/{name}"]
        st.batches_tracked = header["bn_batches"][name]
    trainer.step = header["step"]
    trainer.epoch = header["epoch"]
    trainer.batch_in_epoch = header["batch_in_epoch"]
    trainer.rng.bit_generator.state = header["rng_state"]


def load_model(path) -> tuple[DGNet, EMAState]:
    """Model plus EMA weights for inference."""
    header, arrays = read_checkpoint(path)
    trainer = Trainer(ModelConfig(**header["model_config"]), TrainConfig.from_dict(header["train_config"]))
    restore(trainer, header, arrays)
    return trainer.model, trainer.ema


def with_overrides(config: TrainConfig, **kw) -> TrainConfig:
    return replace(config, **kw)
