"""
Channel-statistics alignment.

Per-channel mean and population variance of a token grid, a streaming
full-modality reference pass, and the moment-matching loss that pulls the
statistics of masked-input features toward that reference.
"""

import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from datamodels import ALIGN_POINTS, ConfigurationError, ContractError, ModalityMask, ShapeError
from tensorgrad import Tensor, no_grad, ops

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ChannelStats:
    mean: Tensor  # [D]
    var: Tensor  # [D]
    count: int

    @property
    def dim(self) -> int:
        return self.mean.shape[0]

    @property
    def empty(self) -> bool:
        return self.count == 0

    @classmethod
    def zeros(cls, dim: int) -> "ChannelStats":
        return cls(
            mean=Tensor(np.zeros(dim), dtype=np.float64),
            var=Tensor(np.zeros(dim), dtype=np.float64),
            count=0,
        )

    @classmethod
    def from_arrays(cls, mean: np.ndarray, var: np.ndarray, count: int) -> "ChannelStats":
        return cls(
            mean=Tensor(mean, dtype=np.float64),
            var=Tensor(np.maximum(var, 0.0), dtype=np.float64),
            count=int(count),
        )


# ============================================================================
# Statistics
# ============================================================================


def channel_stats(f: Tensor) -> ChannelStats:
    """Mean and population variance over every (b, t) position of a [B, T, D] grid; differentiable."""
    if f.ndim != 3:
        raise ShapeError(f"channel_stats expects [B, T, D], got {f.shape}")
    count = f.shape[0] * f.shape[1]
    if count == 0:
        raise ContractError("channel_stats needs at least one token")
    mean = ops.mean(f, axis=(0, 1))
    var = ops.mean(ops.square(ops.sub(f, mean)), axis=(0, 1))
    return ChannelStats(mean=mean, var=var, count=count)


def stats_of_array(f: np.ndarray) -> ChannelStats:
    """Two-pass 64-bit statistics of a detached [B, T, D] array."""
    flat = np.asarray(f, dtype=np.float64).reshape(-1, f.shape[-1])
    if flat.shape[0] == 0:
        raise ContractError("stats_of_array needs at least one token")
    mean = flat.mean(axis=0)
    var = ((flat - mean) ** 2).mean(axis=0)
    return ChannelStats.from_arrays(mean, var, flat.shape[0])


def merge_stats(a: ChannelStats, b: ChannelStats) -> ChannelStats:
    """Pooled statistics of two disjoint sets (parallel-combine formula, 64-bit)."""
    if a.dim != b.dim:
        raise ContractError(f"merge_stats: channel counts {a.dim} and {b.dim} differ")
    if b.empty:
        return ChannelStats.from_arrays(a.mean.data, a.var.data, a.count)
    if a.empty:
        return ChannelStats.from_arrays(b.mean.data, b.var.data, b.count)

    n_a, n_b = float(a.count), float(b.count)
    n = n_a + n_b
    mean_a = a.mean.data.astype(np.float64)
    mean_b = b.mean.data.astype(np.float64)
    delta = mean_b - mean_a
    mean = (n_a * mean_a + n_b * mean_b) / n
    m2 = n_a * a.var.data.astype(np.float64) + n_b * b.var.data.astype(np.float64) + delta * delta * n_a * n_b / n
    return ChannelStats.from_arrays(mean, m2 / n, a.count + b.count)


# ============================================================================
# Reference store
# ============================================================================


@dataclass
class ReferenceStore:
    """Frozen full-modality statistics per attachment point"""

    points: dict[str, ChannelStats] = field(default_factory=dict)
    attachment: list[str] = field(default_factory=lambda: ["en1"])

    def require(self, point: str) -> ChannelStats:
        stats = self.points.get(point)
        if stats is None or stats.empty:
            raise ConfigurationError(f"no reference statistics for attachment point '{point}'")
        return stats

    def check(self) -> None:
        for point in self.attachment:
            self.require(point)

    def alignment_loss(self, features: dict[str, Tensor]) -> Tensor:
        """Mean distribution loss over the configured attachment points (0 when none)."""
        if not self.attachment:
            return Tensor.wrap(np.zeros(()))
        terms = [distribution_loss(channel_stats(features[p]), self.points.get(p), point=p) for p in self.attachment]
        total = terms[0]
        for term in terms[1:]:
            total = ops.add(total, term)
        return ops.div(total, float(len(terms)))


def distribution_loss(current: ChannelStats, ref: Optional[ChannelStats], point: str = "reference") -> Tensor:
    """MSE of channel means plus MSE of channel variances; the reference is a constant."""
    if ref is None or ref.empty:
        raise ConfigurationError(f"no reference statistics for attachment point '{point}'")
    if current.dim != ref.dim:
        raise ContractError(f"distribution_loss: channel counts {current.dim} and {ref.dim} differ")
    ref_mean = Tensor.wrap(ref.mean.data)
    ref_var = Tensor.wrap(ref.var.data)
    mean_term = ops.mean(ops.square(ops.sub(current.mean, ref_mean)))
    var_term = ops.mean(ops.square(ops.sub(current.var, ref_var)))
    return ops.add(mean_term, var_term)


def precompute_reference(
    images: np.ndarray,
    model,
    points: Sequence[str] = ALIGN_POINTS,
    batch_size: int = 8,
    attachment: Optional[Sequence[str]] = None,
) -> ReferenceStore:
    """
    One full-modality forward pass over the training images.

    Statistics stream through merge_stats in batch order; no parameter is
    touched.
    """
    if len(images) == 0:
        raise ContractError("precompute_reference needs at least one training sample")
    if batch_size < 1:
        raise ContractError("batch_size must be >= 1")

    full = ModalityMask.full(images.shape[1])
    running: dict[str, Optional[ChannelStats]] = {p: None for p in points}

    with no_grad():
        for start in range(0, len(images), batch_size):
            batch = Tensor.wrap(images[start : start + batch_size])
            features = model.attachment_features(model.forward(batch, full))
            for point in points:
                stats = stats_of_array(features[point].data)
                running[point] = stats if running[point] is None else merge_stats(running[point], stats)

    store = ReferenceStore(
        points={p: s for p, s in running.items() if s is not None},
        attachment=list(attachment) if attachment is not None else ["en1"],
    )
    for point, stats in store.points.items():
        logger.debug(f"reference {point}: count {stats.count}, mean|.| {float(np.abs(stats.mean.data).mean()):.4f}")
    logger.info(f"reference statistics computed over {len(images)} samples for {list(store.points)}")
    return store
