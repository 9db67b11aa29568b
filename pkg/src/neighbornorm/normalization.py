"""Feature-map normalization modes.

Five modes share one affine transform and differ only in where the
mean/variance come from:

  sbn       frozen source statistics
  tbn       statistics of the current batch
  alpha_bn  convex blend of source and current-batch statistics
  find      partition the batch into like-distributed groups, blend each
            group's statistics with the source, normalize per group
  find_star find, but a harness-level calibration may disable the
            partitioning per layer (a disabled layer behaves as alpha_bn)

Statistics are frozen at capture time; nothing here keeps state across
batches.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .grouping import Partition, first_neighbor_partition
from .tensors import ChannelStats, as_feature_map, channel_moments

__all__ = [
    "MODES",
    "SourceStats",
    "NormalizerConfig",
    "SlotTrace",
    "canonical_mode",
    "group_channel_stats",
    "blend_stats",
    "normalize_groups",
    "apply_normalizer",
    "normalize_layer",
]

MODES = ("sbn", "tbn", "alpha_bn", "find", "find_star")

_MODE_ALIASES = {
    "sbn": "sbn",
    "tbn": "tbn",
    "alphabn": "alpha_bn",
    "alpha_bn": "alpha_bn",
    "alpha-bn": "alpha_bn",
    "find": "find",
    "findstar": "find_star",
    "find_star": "find_star",
    "find-star": "find_star",
    "find*": "find_star",
}


def canonical_mode(mode: str) -> str:
    try:
        return _MODE_ALIASES[str(mode).strip().lower()]
    except KeyError:
        raise ValueError(f"unknown normalizer mode {mode!r}; expected one of {MODES}") from None


@dataclass(frozen=True)
class SourceStats:
    """Frozen per-channel source statistics plus the layer's affine parameters."""

    stats: ChannelStats
    affine_scale: np.ndarray
    affine_shift: np.ndarray
    eps: float = 1e-5

    def __post_init__(self):
        scale = np.asarray(self.affine_scale, dtype=np.float32).reshape(-1)
        shift = np.asarray(self.affine_shift, dtype=np.float32).reshape(-1)
        c = self.stats.num_channels
        if scale.shape[0] != c or shift.shape[0] != c:
            raise ValueError("affine parameter length must equal channel count")
        if not self.eps > 0:
            raise ValueError("eps must be positive")
        object.__setattr__(self, "affine_scale", scale)
        object.__setattr__(self, "affine_shift", shift)

    @classmethod
    def with_identity_affine(cls, stats: ChannelStats, eps: float = 1e-5) -> "SourceStats":
        c = stats.num_channels
        return cls(stats=stats, affine_scale=np.ones(c, np.float32), affine_shift=np.zeros(c, np.float32), eps=eps)

    @property
    def num_channels(self) -> int:
        return self.stats.num_channels


@dataclass(frozen=True)
class NormalizerConfig:
    mode: str = "find"
    alpha: float = 0.8
    gamma_threshold: float = 0.1
    cold_start_batches: int = 10

    def __post_init__(self):
        object.__setattr__(self, "mode", canonical_mode(self.mode))
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.gamma_threshold < 0:
            raise ValueError(f"gamma_threshold must be >= 0, got {self.gamma_threshold}")
        if int(self.cold_start_batches) < 1:
            raise ValueError(f"cold_start_batches must be >= 1, got {self.cold_start_batches}")
        object.__setattr__(self, "cold_start_batches", int(self.cold_start_batches))


@dataclass(frozen=True)
class SlotTrace:
    """What one normalization call observed: group count (None when the
    batch was normalized whole) and the incoming full-batch statistics."""

    cluster_count: int | None
    batch_stats: ChannelStats


def group_channel_stats(x: np.ndarray, partition: Partition) -> list[ChannelStats]:
    """Channel moments of each partition group."""
    x = as_feature_map(x)
    covered = sum(len(g) for g in partition.groups)
    if covered != x.shape[0]:
        raise ValueError(f"partition covers {covered} samples but batch has {x.shape[0]}")
    return [channel_moments(x, g) for g in partition.groups]


def blend_stats(test: ChannelStats, src: SourceStats, alpha: float) -> ChannelStats:
    """Convex blend: alpha parts source statistics, (1 - alpha) parts test statistics.

    Variances are blended directly (not standard deviations).
    """
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    if test.num_channels != src.num_channels:
        raise ValueError("channel count mismatch between test and source statistics")
    a = np.float32(alpha)
    one_m = np.float32(1.0) - a
    mean = a * src.stats.mean + one_m * test.mean
    var = a * src.stats.var + one_m * test.var
    return ChannelStats(mean, np.maximum(var, np.float32(0.0)))


def _normalize_with(x: np.ndarray, stats: ChannelStats, src: SourceStats) -> np.ndarray:
    mean = stats.mean[None, :, None, None]
    inv = 1.0 / np.sqrt(stats.var + np.float32(src.eps))
    scale = (src.affine_scale * inv)[None, :, None, None]
    shift = src.affine_shift[None, :, None, None]
    return (x - mean) * scale + shift


def normalize_groups(x: np.ndarray, partition: Partition, blended: list[ChannelStats], src: SourceStats) -> np.ndarray:
    """Normalize each partition group with its own blended statistics."""
    x = as_feature_map(x)
    if len(blended) != partition.r:
        raise ValueError(f"{len(blended)} stat entries for {partition.r} groups")
    out = np.empty_like(x)
    for members, stats in zip(partition.groups, blended):
        out[members] = _normalize_with(x[members], stats, src)
    return out


def apply_normalizer(
    x: np.ndarray,
    src: SourceStats,
    cfg: NormalizerConfig,
    partition_enabled: bool = True,
) -> tuple[np.ndarray, SlotTrace]:
    """Normalize one layer's feature map, returning the result and a trace.

    `partition_enabled` only matters for the partitioning modes; a
    disabled layer falls back to the alpha_bn transform.
    """
    x = as_feature_map(x)
    if x.shape[1] != src.num_channels:
        raise ValueError(f"feature map has {x.shape[1]} channels, source stats {src.num_channels}")
    batch_stats = channel_moments(x)

    mode = cfg.mode
    if mode in ("find", "find_star") and partition_enabled:
        part = first_neighbor_partition(x)
        blended = [blend_stats(s, src, cfg.alpha) for s in group_channel_stats(x, part)]
        out = normalize_groups(x, part, blended, src)
        return out, SlotTrace(cluster_count=part.r, batch_stats=batch_stats)

    if mode == "sbn":
        stats = src.stats
    elif mode == "tbn":
        stats = batch_stats
    else:  # alpha_bn, or a partitioning mode with partitioning disabled
        stats = blend_stats(batch_stats, src, cfg.alpha)
    return _normalize_with(x, stats, src), SlotTrace(cluster_count=None, batch_stats=batch_stats)


def normalize_layer(
    x: np.ndarray,
    src: SourceStats,
    cfg: NormalizerConfig,
    partition_enabled: bool = True,
) -> np.ndarray:
    """`apply_normalizer` without the trace."""
    return apply_normalizer(x, src, cfg, partition_enabled)[0]
