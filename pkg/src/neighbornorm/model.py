"""Forward-only layered classifier with pluggable normalization slots.

The backbone is a stack of conv(3x3, pad 1) -> normalize -> relu ->
avgpool(2x2) stages followed by a linear head. Conv weights are seeded
Gaussians scaled by 1/sqrt(fan-in) and are never trained; the head is a
closed-form ridge regression on one-hot targets. Source statistics for
each normalization slot are captured from clean data, slot by slot, so
the result does not depend on batch ordering.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .normalization import NormalizerConfig, SlotTrace, SourceStats, apply_normalizer
from .tensors import ChannelStats, as_feature_map

__all__ = [
    "LinearHead",
    "Network",
    "conv2d_3x3",
    "relu",
    "avg_pool_2x2",
    "train_linear_head",
    "save_model",
    "load_model",
]

MODEL_FORMAT = "neighbornorm-model-v1"


def conv2d_3x3(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    """3x3 convolution, stride 1, zero padding 1. w is (Cout, Cin, 3, 3)."""
    x = as_feature_map(x)
    w = np.asarray(w, dtype=np.float32)
    if w.ndim != 4 or w.shape[2:] != (3, 3) or w.shape[1] != x.shape[1]:
        raise ValueError(f"kernel shape {w.shape} does not fit input {x.shape}")
    b, c_in, h, wd = x.shape
    xp = np.zeros((b, c_in, h + 2, wd + 2), dtype=np.float32)
    xp[:, :, 1:-1, 1:-1] = x
    out = np.zeros((b, w.shape[0], h, wd), dtype=np.float32)
    for dy in range(3):
        for dx in range(3):
            patch = xp[:, :, dy : dy + h, dx : dx + wd]
            out += np.einsum("bihw,oi->bohw", patch, w[:, :, dy, dx], optimize=True)
    return out


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, np.float32(0.0))


def avg_pool_2x2(x: np.ndarray) -> np.ndarray:
    b, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ValueError(f"avg_pool_2x2 needs even spatial dims, got {h}x{w}")
    return x.reshape(b, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5), dtype=np.float32)


@dataclass(frozen=True)
class LinearHead:
    weight: np.ndarray  # (classes, feature_dim) float32
    bias: np.ndarray  # (classes,) float32
    ridge_lambda: float

    @property
    def num_classes(self) -> int:
        return self.weight.shape[0]


def train_linear_head(features: np.ndarray, labels: np.ndarray, ridge_lambda: float, num_classes: int | None = None) -> LinearHead:
    """Ridge regression onto one-hot targets via the normal equations.

    A constant column is appended for the bias, which is regularized like
    every other coefficient.
    """
    feats = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels).reshape(-1)
    if feats.ndim != 2 or feats.shape[0] != labels.shape[0]:
        raise ValueError("features must be (N, D) with one label per row")
    if not ridge_lambda > 0:
        raise ValueError("ridge_lambda must be positive")
    k = int(num_classes) if num_classes is not None else int(labels.max()) + 1
    counts = np.bincount(labels, minlength=k)
    if counts.size > k or np.any(counts[:k] == 0):
        raise ValueError("every class needs at least one training sample")

    n, d = feats.shape
    a = np.concatenate([feats, np.ones((n, 1))], axis=1)
    y = np.zeros((n, k), dtype=np.float64)
    y[np.arange(n), labels] = 1.0
    gram = a.T @ a + ridge_lambda * np.eye(d + 1)
    try:
        w_aug = np.linalg.solve(gram, a.T @ y)
    except np.linalg.LinAlgError as exc:
        raise ArithmeticError(f"ridge system is singular beyond regularization: {exc}") from exc
    if not np.isfinite(w_aug).all():
        raise ArithmeticError("ridge solve produced non-finite coefficients")
    return LinearHead(
        weight=w_aug[:d].T.astype(np.float32),
        bias=w_aug[d].astype(np.float32),
        ridge_lambda=float(ridge_lambda),
    )


class _MomentAccumulator:
    """Pooled per-channel mean/variance over a stream of feature maps."""

    def __init__(self, channels: int):
        self.count = 0
        self.sum = np.zeros(channels, dtype=np.float64)
        self.sumsq = np.zeros(channels, dtype=np.float64)

    def update(self, x: np.ndarray) -> None:
        x64 = x.astype(np.float64)
        self.count += x.shape[0] * x.shape[2] * x.shape[3]
        self.sum += x64.sum(axis=(0, 2, 3))
        self.sumsq += np.square(x64).sum(axis=(0, 2, 3))

    def finalize(self) -> ChannelStats:
        if self.count == 0:
            raise ValueError("no data accumulated")
        mean = self.sum / self.count
        var = np.maximum(self.sumsq / self.count - mean * mean, 0.0)
        return ChannelStats(mean.astype(np.float32), var.astype(np.float32))


class Network:
    """Fixed-weight conv backbone with one normalization slot per stage."""

    def __init__(self, conv_weights: list, input_shape: tuple, seed: int, eps: float = 1e-5):
        self.conv_weights = [np.asarray(w, dtype=np.float32) for w in conv_weights]
        self.input_shape = tuple(int(v) for v in input_shape)
        self.seed = int(seed)
        self.eps = float(eps)
        self.source_stats: list = [None] * len(self.conv_weights)
        self.head: LinearHead | None = None

    @classmethod
    def build(cls, channels=(8, 16), input_shape=(1, 16, 16), seed: int = 0, eps: float = 1e-5) -> "Network":
        rng = np.random.default_rng(seed)
        weights = []
        c_in = input_shape[0]
        for c_out in channels:
            fan_in = c_in * 9
            w = rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=(c_out, c_in, 3, 3))
            weights.append(w.astype(np.float32))
            c_in = c_out
        return cls(weights, input_shape, seed, eps)

    @property
    def num_slots(self) -> int:
        return len(self.conv_weights)

    @property
    def channels(self) -> tuple:
        return tuple(w.shape[0] for w in self.conv_weights)

    @property
    def feature_dim(self) -> int:
        _, h, w = self.input_shape
        scale = 2 ** self.num_slots
        return self.channels[-1] * (h // scale) * (w // scale)

    def _check_input(self, x: np.ndarray) -> np.ndarray:
        x = as_feature_map(x)
        if x.shape[1:] != self.input_shape:
            raise ValueError(f"input shape {x.shape[1:]} does not match network input {self.input_shape}")
        return x

    def _require_stats(self) -> None:
        if any(s is None for s in self.source_stats):
            raise RuntimeError("source statistics not captured; run capture_source_stats first")

    def backbone(self, x: np.ndarray, cfg: NormalizerConfig, gating=None) -> tuple[np.ndarray, list[SlotTrace]]:
        """Features after all stages, plus one trace per normalization slot.

        `gating` is an optional per-slot sequence of partition flags; None
        leaves partitioning on everywhere (only the partitioning modes
        look at it).
        """
        x = self._check_input(x)
        self._require_stats()
        if gating is not None and len(gating) != self.num_slots:
            raise ValueError(f"gating must list {self.num_slots} flags")
        traces = []
        h = x
        for k in range(self.num_slots):
            h = conv2d_3x3(h, self.conv_weights[k])
            enabled = True if gating is None else bool(gating[k])
            h, trace = apply_normalizer(h, self.source_stats[k], cfg, partition_enabled=enabled)
            traces.append(trace)
            h = avg_pool_2x2(relu(h))
        return h.reshape(h.shape[0], -1), traces

    def forward(self, x: np.ndarray, cfg: NormalizerConfig, gating=None, collect_traces: bool = False):
        """Class scores (B, K); with `collect_traces`, also per-slot traces."""
        if self.head is None:
            raise RuntimeError("no linear head attached; train or load one first")
        feats, traces = self.backbone(x, cfg, gating)
        logits = feats @ self.head.weight.T + self.head.bias
        return (logits, traces) if collect_traces else logits

    def _activations_before_slot(self, x: np.ndarray, slot: int, cfg: NormalizerConfig) -> np.ndarray:
        """Pre-normalization activations entering `slot`, with every earlier
        slot applying its already-captured source statistics."""
        h = self._check_input(x)
        for k in range(slot):
            h = conv2d_3x3(h, self.conv_weights[k])
            h, _ = apply_normalizer(h, self.source_stats[k], cfg)
            h = avg_pool_2x2(relu(h))
        return conv2d_3x3(h, self.conv_weights[slot])

    def capture_source_stats(self, clean_batches) -> None:
        """Fit each slot's source statistics from clean training batches.

        Slots are finalized front to back: slot k pools moments over the
        full stream while slots before it normalize with their final
        statistics, so the captured values are independent of batch order.
        """
        batches = [self._check_input(b) for b in clean_batches]
        if not batches:
            raise ValueError("clean training stream is empty")
        cfg = NormalizerConfig(mode="sbn")
        for k in range(self.num_slots):
            acc = _MomentAccumulator(self.conv_weights[k].shape[0])
            for xb in batches:
                acc.update(self._activations_before_slot(xb, k, cfg))
            self.source_stats[k] = SourceStats.with_identity_affine(acc.finalize(), self.eps)


def _tensor_manifest(net: Network) -> list[tuple[str, np.ndarray]]:
    named = [(f"conv{k}", net.conv_weights[k]) for k in range(net.num_slots)]
    for k, src in enumerate(net.source_stats):
        named += [
            (f"slot{k}.mean", src.stats.mean),
            (f"slot{k}.var", src.stats.var),
            (f"slot{k}.affine_scale", src.affine_scale),
            (f"slot{k}.affine_shift", src.affine_shift),
        ]
    named += [("head.weight", net.head.weight), ("head.bias", net.head.bias)]
    return named


def save_model(net: Network, path, meta: dict | None = None) -> None:
    """Write a model file: one JSON header line, then the little-endian
    float32 payload of every tensor in manifest order."""
    net._require_stats()
    if net.head is None:
        raise RuntimeError("cannot save a model without a head")
    named = _tensor_manifest(net)
    header = {
        "format": MODEL_FORMAT,
        "seed": net.seed,
        "eps": net.eps,
        "input_shape": list(net.input_shape),
        "channels": list(net.channels),
        "num_classes": net.head.num_classes,
        "ridge_lambda": net.head.ridge_lambda,
        "dtype": "<f4",
        "tensors": [[name, list(arr.shape)] for name, arr in named],
        "meta": meta or {},
    }
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode("utf-8"))
        fh.write(b"\n")
        for _, arr in named:
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_model(path) -> tuple[Network, dict]:
    """Read a model file written by `save_model`; returns (network, meta)."""
    with open(path, "rb") as fh:
        header_line = fh.readline()
        payload = fh.read()
    header = json.loads(header_line.decode("utf-8"))
    if header.get("format") != MODEL_FORMAT:
        raise ValueError(f"unrecognized model format in {path}")
    flat = np.frombuffer(payload, dtype="<f4")
    tensors = {}
    offset = 0
    for name, shape in header["tensors"]:
        size = int(np.prod(shape)) if shape else 1
        tensors[name] = flat[offset : offset + size].reshape(shape).copy()
        offset += size
    if offset != flat.size:
        raise ValueError(f"model payload size mismatch in {path}")

    channels = header["channels"]
    net = Network(
        conv_weights=[tensors[f"conv{k}"] for k in range(len(channels))],
        input_shape=tuple(header["input_shape"]),
        seed=header["seed"],
        eps=header["eps"],
    )
    for k in range(len(channels)):
        net.source_stats[k] = SourceStats(
            stats=ChannelStats(tensors[f"slot{k}.mean"], tensors[f"slot{k}.var"]),
            affine_scale=tensors[f"slot{k}.affine_scale"],
            affine_shift=tensors[f"slot{k}.affine_shift"],
            eps=header["eps"],
        )
    net.head = LinearHead(
        weight=tensors["head.weight"],
        bias=tensors["head.bias"],
        ridge_lambda=header["ridge_lambda"],
    )
    return net, header.get("meta", {})
