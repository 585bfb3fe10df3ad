"""1D residual classifiers parameterized by normalization kind.

The small variant stacks three residual blocks, the larger one four; both
end in global average pooling over time and a dense head. Block layout:

    conv(stride) -> norm -> GELU -> dropout -> conv(1) -> norm
    skip: identity, or conv(stride, k=1) -> norm when shape changes
    output: GELU(main + skip)

Model forwards accept routing options for the domain-specific banks: route
by domain id (training), force one branch everywhere (branch sweep over an
unseen-domain sample), or pick the closest branch per layer from stored
statistics.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .aggregation import BranchOutputs, resolve_distance
from .autodiff import Tensor
from .errors import ConfigurationError, ContractViolationError
from .nn import Conv1d, ForwardContext, Linear, Module
from .norms import (
    DOMAIN_SPECIFIC_KINDS,
    NORM_KINDS,
    ChannelStats,
    DomainSpecificNorm,
    make_norm_layer,
)

VARIANT_BLOCKS = {"resnet1d8": 3, "resnet1d18": 4}
DEFAULT_CHANNELS = {"resnet1d8": (32, 64, 128), "resnet1d18": (32, 64, 128, 256)}


@dataclass(frozen=True)
class ResidualBlockConfig:
    in_channels: int
    out_channels: int
    kernel_size: int
    stride: int
    dropout_rate: float
    norm_kind: str

    def __post_init__(self):
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ConfigurationError(
                f"block kernel size must be odd and positive, got {self.kernel_size}"
            )
        if self.stride < 1:
            raise ConfigurationError(f"stride must be positive, got {self.stride}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigurationError(
                f"dropout rate must be in [0, 1), got {self.dropout_rate}"
            )
        if self.norm_kind not in NORM_KINDS:
            raise ConfigurationError(f"unknown norm kind {self.norm_kind!r}")

    @property
    def needs_projection(self) -> bool:
        """Skip path carries conv + norm exactly when the shape changes."""
        return self.in_channels != self.out_channels or self.stride != 1


@dataclass(frozen=True)
class ModelConfig:
    variant: str
    norm_kind: str
    input_channels: int
    num_classes: int = 2
    domains: tuple[str, ...] | None = None
    block_channels: tuple[int, ...] | None = None
    kernel_size: int = 3
    stride: int = 2
    dropout_rate: float = 0.1
    eps: float = 1e-5
    momentum: float = 0.1

    def __post_init__(self):
        if self.variant not in VARIANT_BLOCKS:
            raise ConfigurationError(
                f"unknown variant {self.variant!r}; expected one of {sorted(VARIANT_BLOCKS)}"
            )
        if self.norm_kind not in NORM_KINDS:
            raise ConfigurationError(f"unknown norm kind {self.norm_kind!r}")
        if self.norm_kind in DOMAIN_SPECIFIC_KINDS and not self.domains:
            raise ConfigurationError(
                f"{self.norm_kind} models need the ordered source-domain tuple"
            )
        n_blocks = VARIANT_BLOCKS[self.variant]
        if self.block_channels is not None and len(self.block_channels) != n_blocks:
            raise ConfigurationError(
                f"{self.variant} takes exactly {n_blocks} block widths, "
                f"got {len(self.block_channels)}"
            )

    @property
    def channels(self) -> tuple[int, ...]:
        return self.block_channels or DEFAULT_CHANNELS[self.variant]

    @property
    def num_domains(self) -> int:
        return len(self.domains) if self.domains else 1

    def block_configs(self) -> list[ResidualBlockConfig]:
        configs = []
        prev = self.input_channels
        for width in self.channels:
            configs.append(
                ResidualBlockConfig(
                    in_channels=prev,
                    out_channels=width,
                    kernel_size=self.kernel_size,
                    stride=self.stride,
                    dropout_rate=self.dropout_rate,
                    norm_kind=self.norm_kind,
                )
            )
            prev = width
        return configs


@dataclass
class ForwardTrace:
    """Logits plus the per-normalization-layer input statistics of one instance."""

    logits: Tensor
    per_layer_instance_stats: list[ChannelStats] = field(default_factory=list)


@dataclass
class SelectionResult:
    """Outcome of a statistics-selected forward pass."""

    predicted: int
    probabilities: np.ndarray
    selected_branches: list[int]


class ResidualBlock(Module):
    def __init__(self, config: ResidualBlockConfig, domains: tuple[str, ...] | None,
                 eps: float, momentum: float, *, rng: np.random.Generator):
        super().__init__()
        self.config = config
        pad = config.kernel_size // 2
        self.conv1 = Conv1d(config.in_channels, config.out_channels,
                            config.kernel_size, stride=config.stride, padding=pad,
                            rng=rng)
        self.norm1 = make_norm_layer(config.norm_kind, config.out_channels, domains,
                                     eps=eps, momentum=momentum)
        self.conv2 = Conv1d(config.out_channels, config.out_channels,
                            config.kernel_size, stride=1, padding=pad, rng=rng)
        self.norm2 = make_norm_layer(config.norm_kind, config.out_channels, domains,
                                     eps=eps, momentum=momentum)
        if config.needs_projection:
            self.skip_conv = Conv1d(config.in_channels, config.out_channels, 1,
                                    stride=config.stride, padding=0, rng=rng)
            self.skip_norm = make_norm_layer(config.norm_kind, config.out_channels,
                                             domains, eps=eps, momentum=momentum)
        else:
            self.skip_conv = None
            self.skip_norm = None

    def forward(self, x: Tensor, ctx: ForwardContext) -> Tensor:
        h = self.conv1(x)
        h = self.norm1(h, ctx)
        h = ad.gelu(h)
        h = ad.dropout(h, self.config.dropout_rate, self.training, ctx.rng)
        h = self.conv2(h)
        h = self.norm2(h, ctx)
        if self.skip_conv is not None:
            skip = self.skip_norm(self.skip_conv(x), ctx)
        else:
            skip = x
        return ad.gelu(h + skip)


class ResNet1D(Module):
    """Residual 1D classifier with a pluggable normalization family."""

    def __init__(self, config: ModelConfig, *, rng: np.random.Generator):
        super().__init__()
        self.config = config
        self.blocks = [
            ResidualBlock(bc, config.domains, config.eps, config.momentum, rng=rng)
            for bc in config.block_configs()
        ]
        self.head = Linear(config.channels[-1], config.num_classes, rng=rng)

    @property
    def is_domain_specific(self) -> bool:
        return self.config.norm_kind in DOMAIN_SPECIFIC_KINDS

    @property
    def domains(self) -> tuple[str, ...]:
        return self.config.domains or ()

    @property
    def num_domains(self) -> int:
        return self.config.num_domains

    @property
    def num_norm_layers(self) -> int:
        return sum(
            2 + (1 if block.config.needs_projection else 0) for block in self.blocks
        )

    def _forward(self, x, ctx: ForwardContext) -> Tensor:
        x = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))
        if x.ndim != 3 or x.shape[1] != self.config.input_channels:
            raise ContractViolationError(
                f"model expects [B, {self.config.input_channels}, T] input, got {x.shape}"
            )
        h = x
        for block in self.blocks:
            h = block(h, ctx)
        pooled = h.mean(axis=2)
        return self.head(pooled)

    def forward(self, x, *, domain: str | None = None,
                rng: np.random.Generator | None = None,
                branch: int | None = None) -> Tensor:
        """Plain forward pass returning logits [B, num_classes]."""
        return self._forward(x, ForwardContext(domain=domain, rng=rng, branch=branch))

    def forward_trace(self, x) -> ForwardTrace:
        """Eval forward of one instance, recording stats before each norm layer."""
        data = x.data if isinstance(x, Tensor) else np.asarray(x)
        if data.shape[0] != 1:
            raise ContractViolationError("tracing requires a single [1, C, T] instance")
        if self.training:
            raise ContractViolationError("tracing runs on frozen (eval-mode) models")
        trace: list[ChannelStats] = []
        ctx = ForwardContext(trace=trace, branch=0 if self.is_domain_specific else None)
        logits = self._forward(x, ctx)
        return ForwardTrace(logits=logits, per_layer_instance_stats=trace)

    def forward_all_branches(self, x) -> BranchOutputs:
        """Push one unseen-domain instance through every branch of the banks.

        Pass i forces all domain-specific layers to branch i; returns the N
        logit vectors and their softmax probabilities.
        """
        if not self.is_domain_specific:
            raise ConfigurationError(
                "branch sweep needs a model with domain-specific normalization"
            )
        if self.training:
            raise ContractViolationError("branch sweep runs on frozen (eval-mode) models")
        data = x.data if isinstance(x, Tensor) else np.asarray(x)
        if data.shape[0] != 1:
            raise ContractViolationError("branch sweep takes a single [1, C, T] instance")
        logits = np.stack([
            self._forward(x, ForwardContext(branch=i)).data[0]
            for i in range(self.num_domains)
        ])
        return BranchOutputs.from_logits(logits)

    def forward_selective(self, x, metric: str) -> SelectionResult:
        """One forward pass that picks the closest branch at every bank.

        At each domain-specific layer the incoming instance statistics are
        compared against every branch's stored statistics under `metric`
        ('wasserstein' or 'euclidean'); the minimizing branch (lowest index
        on ties) normalizes the features.
        """
        if not self.is_domain_specific:
            raise ConfigurationError(
                "statistics selection needs a model with domain-specific normalization"
            )
        if self.training:
            raise ContractViolationError("selection runs on frozen (eval-mode) models")
        data = x.data if isinstance(x, Tensor) else np.asarray(x)
        if data.shape[0] != 1:
            raise ContractViolationError("selection takes a single [1, C, T] instance")
        selected: list[int] = []
        ctx = ForwardContext(select_fn=resolve_distance(metric), selected=selected)
        logits = self._forward(x, ctx)
        probs = ad.softmax_np(logits.data[0])
        return SelectionResult(
            predicted=int(np.argmax(probs)),
            probabilities=probs,
            selected_branches=selected,
        )


def build_model(config: ModelConfig, seed_or_rng) -> ResNet1D:
    """Deterministically construct a model from a config and a seed."""
    rng = (seed_or_rng if isinstance(seed_or_rng, np.random.Generator)
           else np.random.default_rng(seed_or_rng))
    return ResNet1D(config, rng=rng)
