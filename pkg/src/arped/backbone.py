"""Phase-1 feature extractor with stride levels 1, 2, 4, 8, 16."""

from __future__ import annotations

from dataclasses import dataclass, field

from arped import tensor as T
from arped.params import ParamStore

NUM_LEVELS = 5
EXPOSED_LEVELS = (3, 4, 5)


def level_stride(i: int) -> int:
    return 2 ** (i - 1)


def level_extent(extent: int, i: int) -> int:
    return -(-extent // level_stride(i))


@dataclass
class FeaturePyramid:
    """Features of phase ``phase`` keyed by stride level (contiguous range)."""

    phase: int
    levels: dict[int, T.Tensor] = field(default_factory=dict)

    def __getitem__(self, i: int) -> T.Tensor:
        if i not in self.levels:
            raise KeyError(f"phase-{self.phase} pyramid has no stride level {i} "
                           f"(levels {sorted(self.levels)})")
        return self.levels[i]

    @property
    def lowest(self) -> int:
        return min(self.levels)

    @property
    def highest(self) -> int:
        return max(self.levels)

    def widths(self) -> dict[int, int]:
        return {i: t.shape[1] for i, t in self.levels.items()}


def check_extent(h: int, w: int) -> None:
    unit = level_stride(NUM_LEVELS)
    if h % unit or w % unit:
        ph, pw = -(-h // unit) * unit, -(-w // unit) * unit
        raise ValueError(f"image extent {h}x{w} is not divisible by {unit}; pad to {ph}x{pw}")


def init_backbone(store: ParamStore, widths, depths=None, in_channels: int = 3) -> None:
    depths = depths or [2] * len(widths)
    cin = in_channels
    for i, (c, d) in enumerate(zip(widths, depths), start=1):
        for j in range(1, d + 1):
            store.conv(f"phase1.backbone.l{i}.conv{j}", cin, c, 3)
            cin = c


def backbone_forward(image: T.Tensor, store: ParamStore, depths=(2, 2, 2, 2, 2)) -> FeaturePyramid:
    """3x3 conv+ReLU blocks (two per level by default) with 2x2 max-pooling
    between levels.

    Returns ``C^1`` holding levels 3-5; levels 1-2 are computed but not exposed.
    """
    if image.ndim != 4:
        raise ValueError(f"expected a BxCxHxW image, got shape {image.shape}")
    check_extent(*image.shape[2:])
    x = image
    out = FeaturePyramid(phase=1)
    for i, depth in enumerate(depths, start=1):
        if i > 1:
            x = T.maxpool2(x)
        for j in range(1, depth + 1):
            name = f"phase1.backbone.l{i}.conv{j}"
            x = T.relu(T.conv2d(x, store[f"{name}.weight"], store[f"{name}.bias"], 1, 1))
        if i in EXPOSED_LEVELS:
            out.levels[i] = x
    return out
