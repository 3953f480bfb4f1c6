"""DGNet: CBM blocks, the FRR module (CCI + FSM) and the FRS module (Sense blocks).

The network is flat and full resolution: every convolution is 3x3, stride 1,
padding 1, so spatial size is preserved end to end.

    image -> stem CBM -> FRR -> FRS -> head conv -> sigmoid

Ablation arms are selected with ``ModelConfig.ablation``.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, replace
from typing import Iterator

import numpy as np

from . import tensor as T
from .errors import ConfigurationError, DimensionError, ValidationError
from .tensor import BatchNormState, Parameter, Tensor

ARCH_ARMS = (
    "full", "wo_cci", "wo_fsm", "wo_sigmoid", "remove_frr", "instead_frr",
    "wo_lapla", "wo_senb", "remove_frs", "instead_frs", "instead_all",
)

LAPLACIAN_KERNEL = np.array([[0.0, 1.0, 0.0], [1.0, -4.0, 1.0], [0.0, 1.0, 0.0]])

# widths chosen so the parameter counts land near 0.2M (s) and 0.7M (l)
_VARIANTS = {
    "s": dict(n1=3, n2=3, base_width=39, sense_blocks=2),
    "l": dict(n1=6, n2=6, base_width=60, sense_blocks=2),
}


@dataclass(frozen=True)
class ModelConfig:
    variant: str = "s"
    n1: int = 3
    n2: int = 3
    base_width: int = 39
    sense_blocks: int = 2
    frr_on_rgb: bool = False
    ablation: str = "full"

    def __post_init__(self):
        if self.variant not in ("s", "l", "custom"):
            raise ConfigurationError(f"unknown variant {self.variant!r} (expected s, l or custom)")
        for key in ("n1", "n2", "base_width", "sense_blocks"):
            if getattr(self, key) < 1:
                raise ConfigurationError(f"{key} must be a positive integer")
        if self.variant in _VARIANTS:
            ref = _VARIANTS[self.variant]
            if (self.n1, self.n2) != (ref["n1"], ref["n2"]):
                raise ConfigurationError(
                    f"variant {self.variant!r} requires n1={ref['n1']}, n2={ref['n2']}; use variant='custom'")
        if self.base_width % 3:
            raise ConfigurationError(f"base_width {self.base_width} must be divisible by 3 (CCI uses 3 groups)")
        if self.ablation not in ARCH_ARMS:
            raise ConfigurationError(f"unknown ablation {self.ablation!r}; valid: {', '.join(ARCH_ARMS)}")
        if self.frr_on_rgb and self.ablation in ("wo_cci", "remove_frr", "instead_frr", "instead_all"):
            raise ConfigurationError("frr_on_rgb needs the CCI block; incompatible with " + self.ablation)

    @classmethod
    def for_variant(cls, variant: str, **overrides) -> "ModelConfig":
        variant = variant.lower()
        if variant not in _VARIANTS:
            raise ConfigurationError(f"unknown variant {variant!r} (expected s or l)")
        return cls(variant=variant, **{**_VARIANTS[variant], **overrides})

    def with_ablation(self, arm: str) -> "ModelConfig":
        return replace(self, ablation=arm)

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------------------
# module plumbing


class Module:
    """Minimal container: tracks child modules, parameters and BN states by attribute."""

    def __init__(self):
        object.__setattr__(self, "_children", {})
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "training", True)

    def __setattr__(self, key, value):
        if isinstance(value, Module):
            self._children[key] = value
        elif isinstance(value, Parameter):
            self._params[key] = value
        object.__setattr__(self, key, value)

    def named_modules(self, prefix: str = "") -> Iterator[tuple[str, "Module"]]:
        yield prefix, self
        for name, child in self._children.items():
            yield from child.named_modules(f"{prefix}.{name}" if prefix else name)

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for mod_name, mod in self.named_modules(prefix):
            for name, p in mod._params.items():
                yield (f"{mod_name}.{name}" if mod_name else name), p

    def parameters(self, trainable_only: bool = False) -> list[Parameter]:
        return [p for _, p in self.named_parameters() if p.trainable or not trainable_only]

    def named_bn_states(self) -> Iterator[tuple[str, BatchNormState]]:
        for name, mod in self.named_modules():
            if isinstance(mod, BatchNorm2d):
                yield name, mod.state

    def train(self, mode: bool = True) -> "Module":
        for _, mod in self.named_modules():
            object.__setattr__(mod, "training", mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def __call__(self, x: Tensor) -> Tensor:
        return self.forward(x)

    def forward(self, x: Tensor) -> Tensor:  # pragma: no cover - abstract
        raise NotImplementedError


class Sequential(Module):
    def __init__(self, *layers: Module):
        super().__init__()
        for i, layer in enumerate(layers):
            setattr(self, str(i), layer)
        object.__setattr__(self, "layers", list(layers))

    def __len__(self) -> int:
        return len(self.layers)

    def __iter__(self):
        return iter(self.layers)

    def forward(self, x):
        for layer in self.layers:
            x = layer(x)
        return x


def _kaiming(rng: np.random.Generator, shape: tuple) -> np.ndarray:
    fan_in = shape[1] * shape[2] * shape[3]
    return rng.normal(0.0, math.sqrt(2.0 / fan_in), size=shape)


class Conv2d(Module):
    def __init__(self, cin: int, cout: int, rng: np.random.Generator, kernel: int = 3,
                 groups: int = 1, bias: bool = True):
        super().__init__()
        if cin % groups or cout % groups:
            raise ConfigurationError(f"groups={groups} must divide {cin} -> {cout} channels")
        self.groups = groups
        self.padding = kernel // 2
        self.weight = Parameter(_kaiming(rng, (cout, cin // groups, kernel, kernel)))
        if bias:
            self.bias = Parameter(np.zeros(cout))
        else:
            object.__setattr__(self, "bias", None)

    def forward(self, x):
        return T.conv2d(x, self.weight, self.bias, 1, self.padding, self.groups)


class BatchNorm2d(Module):
    def __init__(self, channels: int, eps: float = 1e-5, momentum: float = 0.1):
        super().__init__()
        self.gamma = Parameter(np.ones(channels))
        self.beta = Parameter(np.zeros(channels))
        object.__setattr__(self, "state", BatchNormState(channels))
        self.eps = eps
        self.momentum = momentum

    def forward(self, x):
        return T.batchnorm2d(x, self.gamma, self.beta, self.state, self.training, self.eps, self.momentum)


class CBM(Module):
    """Conv 3x3 (no bias, BN follows) -> BN -> Mish."""

    def __init__(self, cin: int, cout: int, rng: np.random.Generator, groups: int = 1):
        super().__init__()
        self.conv = Conv2d(cin, cout, rng, groups=groups, bias=False)
        self.bn = BatchNorm2d(cout)

    def forward(self, x):
        return T.mish(self.bn(self.conv(x)))


class LaplacianConv(Module):
    """Depthwise convolution with the fixed 4-neighbour Laplacian; never trained."""

    def __init__(self, channels: int):
        super().__init__()
        kernel = np.broadcast_to(LAPLACIAN_KERNEL, (channels, 1, 3, 3)).copy()
        self.weight = Parameter(kernel, trainable=False)
        self.channels = channels

    def forward(self, x):
        return T.conv2d(x, self.weight, None, 1, 1, groups=x.shape[1])


def laplacian_highpass(x: Tensor) -> Tensor:
    """Apply the fixed Laplacian to every channel of ``x`` (zero padding)."""
    return LaplacianConv(x.shape[1])(x)


# ---------------------------------------------------------------------------
# FRR


class CCI(Module):
    """Channel Combination Inference.

    The input is duplicated along channels and passed through ``n1`` grouped
    CBM blocks (3 groups), so with RGB input the groups see {R,G}, {B,R},
    {G,B}. The inferred maps are concatenated with the original input.
    """

    def __init__(self, cin: int, width: int, n1: int, rng: np.random.Generator):
        super().__init__()
        if cin % 3 or width % 3:
            raise ConfigurationError(f"CCI needs channel counts divisible by 3, got {cin} and {width}")
        self.cin = cin
        blocks = [CBM(2 * cin, 2 * width, rng, groups=3)]
        blocks += [CBM(2 * width, 2 * width, rng, groups=3) for _ in range(n1 - 1)]
        self.gcb = Sequential(*blocks)
        self.out_channels = 2 * width + cin

    def grouped(self, f_in: Tensor) -> Tensor:
        """C_fix: the grouped-convolution inference before the final concat."""
        if f_in.shape[1] != self.cin:
            raise ConfigurationError(f"CCI expects {self.cin} channels, got {f_in.shape[1]}")
        return self.gcb(T.concat_channels([f_in, f_in]))

    def forward(self, f_in):
        return T.concat_channels([self.grouped(f_in), f_in])


def _fsm(cin: int, width: int, n2: int, rng) -> Sequential:
    return Sequential(CBM(cin, width, rng), *[CBM(width, width, rng) for _ in range(n2 - 1)])


class FRR(Module):
    """Feature Restoration and Reconstruction: CCI followed by the FSM stack."""

    def __init__(self, cin: int, width: int, n1: int, n2: int, rng, use_cci: bool = True,
                 use_fsm: bool = True):
        super().__init__()
        if use_cci:
            self.cci = CCI(cin, width, n1, rng)
            mid = self.cci.out_channels
        else:
            object.__setattr__(self, "cci", None)
            mid = cin
        if use_fsm:
            self.fsm = _fsm(mid, width, n2, rng)
        else:
            # channel-restoring 1x1 projection only
            self.fsm = Conv2d(mid, width, rng, kernel=1)

    def forward(self, x):
        if self.cci is not None:
            x = self.cci(x)
        return self.fsm(x)


# ---------------------------------------------------------------------------
# FRS


class SenseBlock(Module):
    """S = F_in + sigmoid(conv(CBM(A))), A = Mish(BN(CBM(F_in) - laplacian(F_in)))."""

    def __init__(self, width: int, rng, use_laplacian: bool = True, use_smoothing: bool = True,
                 use_sigmoid: bool = True):
        super().__init__()
        self.laplacian = LaplacianConv(width)
        self.normal = CBM(width, width, rng)
        self.bn = BatchNorm2d(width)
        if use_smoothing:
            self.smooth = CBM(width, width, rng)
            self.gate = Conv2d(width, width, rng)
        self.use_laplacian = use_laplacian
        self.use_smoothing = use_smoothing
        self.use_sigmoid = use_sigmoid

    def attention(self, f_in: Tensor) -> Tensor:
        f_normal = self.normal(f_in)
        pre = T.sub(f_normal, self.laplacian(f_in)) if self.use_laplacian else f_normal
        return T.mish(self.bn(pre))

    def forward(self, f_in):
        a = self.attention(f_in)
        corr = self.gate(self.smooth(a)) if self.use_smoothing else a
        if self.use_sigmoid:
            corr = T.sigmoid(corr)
        return T.add(f_in, corr)


def cbm_params(cin: int, cout: int, groups: int = 1) -> int:
    return cin * (cout // groups) * 9 + 2 * cout


def matched_width(width: int, depth: int, target: int) -> int:
    """Hidden width of a ``depth``-layer CBM group (width -> h -> ... -> width) closest to ``target`` params."""
    def count(h):
        if depth == 1:
            return cbm_params(width, width)
        return cbm_params(width, h) + (depth - 2) * cbm_params(h, h) + cbm_params(h, width)

    return min(range(1, 8 * width + 1), key=lambda h: (abs(count(h) - target), h))


def cbm_group(width: int, depth: int, hidden: int, rng) -> Sequential:
    if depth == 1:
        return Sequential(CBM(width, width, rng))
    chans = [width] + [hidden] * (depth - 1) + [width]
    return Sequential(*[CBM(a, b, rng) for a, b in zip(chans[:-1], chans[1:])])


def _count(module: Module) -> int:
    return sum(p.data.size for p in module.parameters(trainable_only=True))


class DGNet(Module):
    def __init__(self, config: ModelConfig, seed: int = 0):
        super().__init__()
        rng = np.random.default_rng(seed)
        self.config = config
        w = config.base_width
        arm = config.ablation
        self.stem = None if config.frr_on_rgb else CBM(3, w, rng)
        frr_in = 3 if config.frr_on_rgb else w

        # "instead" arms mirror the full module's parameter count and depth
        full_frr = FRR(frr_in, w, config.n1, config.n2, np.random.default_rng(0))
        full_frs = Sequential(*[SenseBlock(w, np.random.default_rng(0)) for _ in range(config.sense_blocks)])
        object.__setattr__(self, "reference_counts", {"frr": _count(full_frr), "frs": _count(full_frs)})

        if arm == "remove_frr":
            self.frr = None
        elif arm in ("instead_frr", "instead_all"):
            depth = config.n1 + config.n2
            self.frr = cbm_group(w, depth, matched_width(w, depth, _count(full_frr)), rng)
        else:
            self.frr = FRR(frr_in, w, config.n1, config.n2, rng,
                           use_cci=arm != "wo_cci", use_fsm=arm != "wo_fsm")

        if arm == "remove_frs":
            self.frs = None
        elif arm in ("instead_frs", "instead_all"):
            depth = 3 * config.sense_blocks
            self.frs = cbm_group(w, depth, matched_width(w, depth, _count(full_frs)), rng)
        else:
            self.frs = Sequential(*[
                SenseBlock(w, rng, use_laplacian=arm != "wo_lapla", use_smoothing=arm != "wo_senb",
                           use_sigmoid=arm != "wo_sigmoid")
                for _ in range(config.sense_blocks)
            ])
        self.head = Conv2d(w, 3, rng)
        for name, p in self.named_parameters():
            p.name = name

    def blocks(self) -> list:
        return [m for m in (self.stem, self.frr, self.frs) if m is not None]

    def forward(self, image: Tensor) -> Tensor:
        check_image(image)
        x = image
        for block in self.blocks():
            x = block(x)
        return T.sigmoid(self.head(x))

    def param_count(self) -> int:
        return _count(self)

    def module_counts(self) -> dict:
        return {name: (_count(m) if m is not None else 0)
                for name, m in (("stem", self.stem), ("frr", self.frr), ("frs", self.frs), ("head", self.head))}


def check_image(image: Tensor, min_size: int = 16, multiple: int = 8) -> None:
    if image.ndim != 4 or image.shape[1] != 3:
        raise DimensionError(f"expected an (N, 3, H, W) image batch, got {image.shape}")
    h, w = image.shape[2:]
    if h < min_size or w < min_size or h % multiple or w % multiple:
        raise DimensionError(f"image size {h}x{w} must be >= {min_size} and divisible by {multiple}")
    lo, hi = float(image.data.min()), float(image.data.max())
    if lo < 0.0 or hi > 1.0 or not (np.isfinite(lo) and np.isfinite(hi)):
        raise ValidationError(f"pixel values must lie in [0, 1], got [{lo}, {hi}]")


def dgnet_forward(image: Tensor, model: DGNet, training: bool = False) -> Tensor:
    model.train(training)
    return model(image)


def param_count(config: ModelConfig) -> int:
    """Trainable scalar parameters of the network described by ``config`` (Laplacian excluded)."""
    return DGNet(config).param_count()


def build_ablation(config: ModelConfig, arm: str, seed: int = 0) -> DGNet:
    return DGNet(config.with_ablation(arm), seed=seed)
