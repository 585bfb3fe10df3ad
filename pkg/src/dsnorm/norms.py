"""Normalization layers for [B, C, T] feature maps.

Shared layers: batch norm (mini-batch statistics plus running estimates),
instance norm (per-instance statistics, no running state), and the
channel-split combination of the two. Domain-specific variants keep one
branch per source domain and route every batch to its domain's branch, so
each branch only ever sees (and only ever adapts to) one domain:

  dsbn -- one batch-norm state per domain
  dsin -- one instance-norm affine pair per domain
  dson -- per domain, a learnable convex mixture w * BN(x) + (1 - w) * IN(x)

All normalization uses biased (population) variance, and running_var stores
the same biased estimate.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor
from .errors import (
    ConfigurationError,
    ContractViolationError,
    DimensionError,
    RoutingError,
)
from .nn import ForwardContext, Module

DOMAIN_INVARIANT_KINDS = ("bn", "in", "ibn")
DOMAIN_SPECIFIC_KINDS = ("dsbn", "dsin", "dson")
NORM_KINDS = DOMAIN_INVARIANT_KINDS + DOMAIN_SPECIFIC_KINDS


@dataclass
class ChannelStats:
    """Per-channel mean and standard deviation vectors.

    Used both for the statistics of a single instance's features (computed
    over the time axis) and for the stored statistics of a normalization
    branch (running mean, sqrt of running variance).
    """

    mean: np.ndarray
    std: np.ndarray


class NormState(Module):
    """Affine parameters plus running statistics of one batch-norm unit."""

    def __init__(self, channels: int, eps: float = 1e-5, momentum: float = 0.1):
        super().__init__()
        if channels < 1:
            raise ConfigurationError(f"channels must be positive, got {channels}")
        if not 0.0 < momentum <= 1.0:
            raise ConfigurationError(f"momentum must be in (0, 1], got {momentum}")
        if eps < 0.0:
            raise ConfigurationError(f"eps must be >= 0, got {eps}")
        self.channels = channels
        self.eps = eps
        self.momentum = momentum
        self.gamma = Parameter(np.ones(channels))
        self.beta = Parameter(np.zeros(channels))
        self.register_buffer("running_mean", np.zeros(channels))
        self.register_buffer("running_var", np.ones(channels))
        self.register_buffer("batches_seen", np.zeros(()))


def update_running_stats(state: NormState, batch_mean: np.ndarray,
                         batch_var: np.ndarray) -> None:
    """Blend batch statistics into the running estimates.

    running <- (1 - momentum) * running + momentum * batch, for both moments.
    """
    m = state.momentum
    state.running_mean *= 1.0 - m
    state.running_mean += m * batch_mean
    state.running_var *= 1.0 - m
    state.running_var += m * batch_var
    state.batches_seen[...] += 1


def compute_instance_stats(z) -> ChannelStats:
    """Per-channel mean and population std over the time axis of one instance."""
    data = z.data if isinstance(z, Tensor) else np.asarray(z, dtype=np.float64)
    if data.ndim != 3 or data.shape[0] != 1:
        raise ContractViolationError(
            f"instance statistics need a single [1, C, T] instance, got {data.shape}"
        )
    if data.shape[2] < 2:
        raise ContractViolationError("instance statistics need at least 2 timesteps")
    mean = data.mean(axis=2)[0]
    std = np.sqrt(((data - mean[None, :, None]) ** 2).mean(axis=2))[0]
    return ChannelStats(mean=mean, std=std)


def batch_norm(x: Tensor, state: NormState, training: bool) -> Tensor:
    """Normalize per channel over the (batch, time) axes.

    Training mode uses batch statistics and updates the running estimates;
    eval mode normalizes with the running estimates.
    """
    if x.ndim != 3:
        raise DimensionError(f"batch_norm expects [B, C, T], got {x.shape}")
    b, c, t = x.shape
    if c != state.channels:
        raise DimensionError(f"batch_norm channels {c} != state channels {state.channels}")
    if training:
        if b * t < 2:
            raise ContractViolationError(
                f"training-mode batch_norm needs B*T >= 2, got B={b}, T={t}"
            )
        mu = x.mean(axis=(0, 2), keepdims=True)
        centered = x - mu
        var = (centered * centered).mean(axis=(0, 2), keepdims=True)
        update_running_stats(state, mu.data.reshape(c), var.data.reshape(c))
        xhat = centered / (var + state.eps).sqrt()
    else:
        denom = np.sqrt(state.running_var + state.eps)
        xhat = (x - state.running_mean.reshape(1, c, 1)) / denom.reshape(1, c, 1)
    return state.gamma.reshape(1, c, 1) * xhat + state.beta.reshape(1, c, 1)


def instance_norm(x: Tensor, gamma: Parameter, beta: Parameter, eps: float) -> Tensor:
    """Normalize each (instance, channel) by its own statistics over time.

    Keeps no running state; training and eval behave identically.
    """
    if x.ndim != 3:
        raise DimensionError(f"instance_norm expects [B, C, T], got {x.shape}")
    b, c, t = x.shape
    if gamma.shape != (c,):
        raise DimensionError(f"instance_norm gamma shape {gamma.shape} != ({c},)")
    if t < 2:
        raise ContractViolationError(f"instance_norm needs T >= 2, got T={t}")
    mu = x.mean(axis=2, keepdims=True)
    centered = x - mu
    var = (centered * centered).mean(axis=2, keepdims=True)
    xhat = centered / (var + eps).sqrt()
    return gamma.reshape(1, c, 1) * xhat + beta.reshape(1, c, 1)


class _NormLayer(Module):
    """Shared plumbing: trace capture of incoming feature statistics."""

    def _record(self, x: Tensor, ctx: ForwardContext | None) -> None:
        if ctx is not None and ctx.trace is not None:
            ctx.trace.append(compute_instance_stats(x))


class BatchNorm(_NormLayer):
    def __init__(self, channels: int, eps: float = 1e-5, momentum: float = 0.1):
        super().__init__()
        self.state = NormState(channels, eps=eps, momentum=momentum)

    def forward(self, x: Tensor, ctx: ForwardContext | None = None) -> Tensor:
        self._record(x, ctx)
        return batch_norm(x, self.state, self.training)


class InstanceNorm(_NormLayer):
    def __init__(self, channels: int, eps: float = 1e-5):
        super().__init__()
        self.channels = channels
        self.eps = eps
        self.gamma = Parameter(np.ones(channels))
        self.beta = Parameter(np.zeros(channels))

    def forward(self, x: Tensor, ctx: ForwardContext | None = None) -> Tensor:
        self._record(x, ctx)
        return instance_norm(x, self.gamma, self.beta, self.eps)


class InstanceBatchNorm(_NormLayer):
    """Channel-split mixture: IN on channels [0, C//2), BN on the rest."""

    def __init__(self, channels: int, eps: float = 1e-5, momentum: float = 0.1):
        super().__init__()
        if channels < 2:
            raise ConfigurationError(
                f"instance-batch norm needs at least 2 channels, got {channels}"
            )
        self.channels = channels
        self.split = channels // 2
        self.instance = InstanceNorm(self.split, eps=eps)
        self.batch = BatchNorm(channels - self.split, eps=eps, momentum=momentum)

    def forward(self, x: Tensor, ctx: ForwardContext | None = None) -> Tensor:
        self._record(x, ctx)
        child = ctx.child() if ctx is not None else None
        front = self.instance(ad.narrow(x, 1, 0, self.split), child)
        back = self.batch(ad.narrow(x, 1, self.split, self.channels - self.split), child)
        return ad.concat([front, back], axis=1)


class DsonBranch(Module):
    """One domain's state for the optimized mixture: a batch-norm unit, an
    instance-norm affine pair, and the raw mixture weight.

    The mixture weight is stored unconstrained and squashed through a
    sigmoid, so it stays in [0, 1] after every optimizer step. Raw value 0
    gives the unbiased midpoint w = 0.5.
    """

    def __init__(self, channels: int, eps: float = 1e-5, momentum: float = 0.1):
        super().__init__()
        self.bn = NormState(channels, eps=eps, momentum=momentum)
        self.in_gamma = Parameter(np.ones(channels))
        self.in_beta = Parameter(np.zeros(channels))
        self.mix_raw = Parameter(np.zeros(()))

    def mix_weight(self) -> float:
        return float(1.0 / (1.0 + np.exp(-self.mix_raw.data)))

    def set_mix_weight(self, w: float) -> None:
        w = min(max(w, 0.0), 1.0)
        # logit with saturation: +/-40 already rounds the sigmoid to 1.0 / 4e-18
        if w <= 0.0:
            raw = -40.0
        elif w >= 1.0:
            raw = 40.0
        else:
            raw = float(np.log(w / (1.0 - w)))
        self.mix_raw.data[...] = raw


class DomainSpecificNorm(_NormLayer):
    """A bank of per-domain normalization branches.

    Training routes each (domain-homogeneous) batch to its domain's branch;
    the other branches are untouched. Inference over an unseen domain either
    forces a branch index (ctx.branch) or selects the branch whose stored
    statistics are closest to the incoming instance statistics (ctx.select_fn).
    """

    def __init__(self, kind: str, channels: int, domains: tuple[str, ...],
                 eps: float = 1e-5, momentum: float = 0.1):
        super().__init__()
        if kind not in DOMAIN_SPECIFIC_KINDS:
            raise ConfigurationError(f"unknown domain-specific kind {kind!r}")
        if len(domains) < 1:
            raise ConfigurationError("a normalization bank needs at least one domain")
        if len(set(domains)) != len(domains):
            raise ConfigurationError("duplicate domain identifiers in bank")
        self.kind = kind
        self.channels = channels
        self.domains = tuple(domains)
        self.domain_index = {d: i for i, d in enumerate(self.domains)}
        if kind == "dsbn":
            self.branches = [NormState(channels, eps=eps, momentum=momentum)
                             for _ in self.domains]
        elif kind == "dsin":
            self.branches = [InstanceNorm(channels, eps=eps) for _ in self.domains]
        else:
            self.branches = [DsonBranch(channels, eps=eps, momentum=momentum)
                             for _ in self.domains]

    @property
    def num_domains(self) -> int:
        return len(self.domains)

    def _resolve_branch(self, ctx: ForwardContext | None) -> int:
        if ctx is None or (ctx.domain is None and ctx.branch is None):
            raise RoutingError(
                f"{self.kind} layer needs a domain or an explicit branch index"
            )
        if ctx.branch is not None:
            if not 0 <= ctx.branch < self.num_domains:
                raise RoutingError(
                    f"branch {ctx.branch} out of range for {self.num_domains} domains"
                )
            return ctx.branch
        if ctx.domain not in self.domain_index:
            raise RoutingError(f"unknown domain {ctx.domain!r}; bank holds {self.domains}")
        return self.domain_index[ctx.domain]

    def branch_stats(self) -> list[ChannelStats]:
        """Stored per-branch statistics (running mean, sqrt running var)."""
        if self.kind == "dsin":
            raise ConfigurationError(
                "instance-norm branches keep no running statistics to select by"
            )
        states = self.branches if self.kind == "dsbn" else [b.bn for b in self.branches]
        return [
            ChannelStats(mean=s.running_mean.copy(), std=np.sqrt(s.running_var))
            for s in states
        ]

    def _branch_forward(self, x: Tensor, idx: int, training: bool) -> Tensor:
        branch = self.branches[idx]
        if self.kind == "dsbn":
            return batch_norm(x, branch, training)
        if self.kind == "dsin":
            return instance_norm(x, branch.gamma, branch.beta, branch.eps)
        bn_out = batch_norm(x, branch.bn, training)
        in_out = instance_norm(x, branch.in_gamma, branch.in_beta, branch.bn.eps)
        w = ad.sigmoid(branch.mix_raw)
        return w * bn_out + (1.0 - w) * in_out

    def forward(self, x: Tensor, ctx: ForwardContext | None = None) -> Tensor:
        self._record(x, ctx)
        if ctx is not None and ctx.select_fn is not None:
            if self.training:
                raise ContractViolationError(
                    "statistics-based branch selection runs on frozen models only"
                )
            stats = compute_instance_stats(x)
            distances = [ctx.select_fn(stats, bs) for bs in self.branch_stats()]
            idx = int(np.argmin(distances))
            if ctx.selected is not None:
                ctx.selected.append(idx)
            return self._branch_forward(x, idx, training=False)
        idx = self._resolve_branch(ctx)
        return self._branch_forward(x, idx, self.training)


def make_norm_layer(kind: str, channels: int, domains: tuple[str, ...] | None,
                    eps: float = 1e-5, momentum: float = 0.1) -> _NormLayer:
    """Build a normalization layer of the requested kind."""
    if kind == "bn":
        return BatchNorm(channels, eps=eps, momentum=momentum)
    if kind == "in":
        return InstanceNorm(channels, eps=eps)
    if kind == "ibn":
        return InstanceBatchNorm(channels, eps=eps, momentum=momentum)
    if kind in DOMAIN_SPECIFIC_KINDS:
        if not domains:
            raise ConfigurationError(
                f"{kind} needs the ordered tuple of source domains at construction"
            )
        return DomainSpecificNorm(kind, channels, tuple(domains), eps=eps, momentum=momentum)
    raise ConfigurationError(f"unknown normalization kind {kind!r}")
