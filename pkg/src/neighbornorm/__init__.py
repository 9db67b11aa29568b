"""Test-time normalization with first-neighbor feature grouping.

Batches from shifting, possibly mixed domains are normalized per layer:
samples with similar instance-level statistics are grouped by a
first-neighbor graph, each group's statistics are blended with frozen
source statistics, and a per-layer sensitivity calibration can switch
the grouping off where the shift does not reach.
"""

from .grouping import (
    FirstNeighborGraph,
    Partition,
    cosine_similarity_matrix,
    first_neighbor_adjacency,
    first_neighbor_partition,
    instance_channel_means,
)
from .normalization import (
    MODES,
    NormalizerConfig,
    SlotTrace,
    SourceStats,
    apply_normalizer,
    blend_stats,
    canonical_mode,
    group_channel_stats,
    normalize_groups,
    normalize_layer,
)
from .sensitivity import (
    CalibrationState,
    LayerSensitivity,
    gaussian_kl_per_channel,
    sensitivity_score,
)
from .tensors import ChannelStats, as_feature_map, channel_moments

__version__ = "0.1.0"

__all__ = [
    "ChannelStats",
    "as_feature_map",
    "channel_moments",
    "FirstNeighborGraph",
    "Partition",
    "instance_channel_means",
    "cosine_similarity_matrix",
    "first_neighbor_adjacency",
    "first_neighbor_partition",
    "MODES",
    "NormalizerConfig",
    "SourceStats",
    "SlotTrace",
    "canonical_mode",
    "group_channel_stats",
    "blend_stats",
    "normalize_groups",
    "apply_normalizer",
    "normalize_layer",
    "CalibrationState",
    "LayerSensitivity",
    "gaussian_kl_per_channel",
    "sensitivity_score",
    "__version__",
]
