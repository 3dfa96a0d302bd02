"""Records of what a compression pass did to a network."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

TECHNIQUES = ("plain", "weight_prune", "channel_prune", "ttq")


@dataclass
class PruneMask:
    """Keep-masks (``True`` = weight survives) keyed by parameter key."""

    masks: dict = field(default_factory=dict)

    @property
    def sparsity(self) -> dict:
        """Per-key fraction of pruned entries."""
        return {k: 1.0 - float(np.count_nonzero(m)) / m.size for k, m in self.masks.items()}

    def overall_sparsity(self, keys=None) -> float:
        keys = list(self.masks) if keys is None else keys
        total = sum(self.masks[k].size for k in keys)
        kept = sum(int(np.count_nonzero(self.masks[k])) for k in keys)
        return 0.0 if total == 0 else 1.0 - kept / total

    def __getitem__(self, key):
        return self.masks[key]

    def is_subset_of(self, other: "PruneMask") -> bool:
        """True when every weight pruned by ``other`` is pruned here too."""
        return all(not np.any(~om & self.masks[k]) for k, om in other.masks.items())


@dataclass(frozen=True)
class ChannelRemoval:
    layer: int
    channel: int
    saliency: float
    penalized: float


@dataclass
class ChannelRecord:
    """Ordered channel removals, channel indices in the original numbering."""

    removals: list = field(default_factory=list)
    original_params: int = 0
    removed_params: int = 0

    @property
    def compression_rate(self) -> float:
        if self.original_params == 0:
            return 0.0
        return self.removed_params / self.original_params

    def pairs(self):
        return [(r.layer, r.channel) for r in self.removals]

    def __len__(self):
        return len(self.removals)


@dataclass
class TernaryLayer:
    """Ternary state of one weight array: codes in {-1, 0, +1} and two scales."""

    wp: float
    wn: float
    threshold: float
    codes: np.ndarray
    shadow: np.ndarray | None = None

    def decode(self, dtype=np.float32) -> np.ndarray:
        dtype = np.dtype(dtype)
        wp, wn = dtype.type(self.wp), dtype.type(self.wn)
        zero = dtype.type(0)
        return np.where(self.codes > 0, wp, np.where(self.codes < 0, -wn, zero)).astype(dtype)

    @property
    def sparsity(self) -> float:
        return 1.0 - float(np.count_nonzero(self.codes)) / self.codes.size


@dataclass
class TernaryParams:
    layers: dict = field(default_factory=dict)
    threshold: float = 0.0
    history: list = field(default_factory=list)

    @property
    def sparsity(self) -> float:
        """Fraction of code-0 entries over every quantised array."""
        total = sum(t.codes.size for t in self.layers.values())
        zeros = sum(t.codes.size - int(np.count_nonzero(t.codes)) for t in self.layers.values())
        return 0.0 if total == 0 else zeros / total


@dataclass
class CompressionState:
    technique: str = "plain"
    level: float = 0.0
    mask: PruneMask | None = None
    channels: ChannelRecord | None = None
    ternary: TernaryParams | None = None
    notes: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.technique not in TECHNIQUES:
            raise ValueError(f"unknown technique {self.technique!r}")
