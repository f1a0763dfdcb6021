"""Anchor lattice, IoU, labeling policies, box transforms and mask targets.

Boxes are float arrays ``(x1, y1, x2, y2)`` in image pixels with
``x2 > x1`` and ``y2 > y1``; area is ``(x2 - x1) * (y2 - y1)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

BACKGROUND, FOREGROUND, IGNORE = 0, 1, -1

FEATURE_STRIDE = 16


def as_boxes(boxes) -> np.ndarray:
    arr = np.asarray(boxes, dtype=np.float64)
    return arr.reshape(-1, 4)


def iou(a, b) -> float:
    """IoU of two single boxes."""
    return float(iou_matrix(as_boxes(a), as_boxes(b))[0, 0])


def iou_matrix(a, b) -> np.ndarray:
    """Pairwise IoU, shape (len(a), len(b))."""
    a, b = as_boxes(a), as_boxes(b)
    ix1 = np.maximum(a[:, None, 0], b[None, :, 0])
    iy1 = np.maximum(a[:, None, 1], b[None, :, 1])
    ix2 = np.minimum(a[:, None, 2], b[None, :, 2])
    iy2 = np.minimum(a[:, None, 3], b[None, :, 3])
    inter = np.clip(ix2 - ix1, 0, None) * np.clip(iy2 - iy1, 0, None)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    return np.where(union > 0, inter / np.where(union > 0, union, 1), 0.0)


@dataclass(frozen=True)
class AnchorGrid:
    """Anchors replicated at every stride-16 location.

    Each location holds every shape at every horizontal offset from the cell
    centre, shape-major: anchor ``a = shape * len(x_offsets) + offset``.
    Flattened order is row-major over locations, then anchor index, so the
    anchor for ``(row, col, a)`` sits at ``(row * width + col) * A + a``.
    """

    shapes: tuple[tuple[float, float], ...]
    height: int
    width: int
    stride: int = FEATURE_STRIDE
    x_offsets: tuple[float, ...] = (0.0,)

    @property
    def num_shapes(self) -> int:
        """Anchors per location, A."""
        return len(self.shapes) * len(self.x_offsets)

    def __len__(self) -> int:
        return self.height * self.width * self.num_shapes

    def boxes(self) -> np.ndarray:
        ys, xs = np.meshgrid(np.arange(self.height), np.arange(self.width), indexing="ij")
        wh = np.asarray(self.shapes, dtype=np.float64)
        w = np.repeat(wh[:, 0], len(self.x_offsets))[None]
        h = np.repeat(wh[:, 1], len(self.x_offsets))[None]
        dx = np.tile(np.asarray(self.x_offsets, dtype=np.float64), len(self.shapes))[None]
        cx = (xs.reshape(-1, 1) + 0.5) * self.stride + dx
        cy = (ys.reshape(-1, 1) + 0.5) * self.stride
        out = np.stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2], axis=-1)
        return out.reshape(-1, 4)


def anchor_shapes(heights, aspect: float) -> tuple[tuple[float, float], ...]:
    return tuple((float(h) * aspect, float(h)) for h in heights)


def make_anchors(image_h: int, image_w: int, heights=(24, 48, 96), aspect: float = 0.41,
                 stride: int = FEATURE_STRIDE, x_offsets=(0.0,)) -> AnchorGrid:
    return AnchorGrid(anchor_shapes(heights, aspect), image_h // stride, image_w // stride, stride,
                      tuple(float(d) for d in x_offsets))


@dataclass
class LabelAssignment:
    labels: np.ndarray  # per anchor: BACKGROUND / FOREGROUND / IGNORE
    matches: np.ndarray  # gt index for foreground anchors, -1 elsewhere
    max_iou: np.ndarray

    @property
    def foreground(self) -> np.ndarray:
        return np.flatnonzero(self.labels == FOREGROUND)


def assign_labels(anchors, gts, h: float, bg_ceiling: float = 0.3,
                  force_best_match: bool = True) -> LabelAssignment:
    """Label anchors by IoU against ground truth under foreground threshold ``h``.

    Foreground iff max IoU >= h; background iff max IoU < bg_ceiling; ignore
    otherwise.  With ``force_best_match`` the highest-IoU anchor of every gt is
    foreground too.  Ties go to the lower gt index (and lower anchor index).
    """
    if not 0 < h <= 1:
        raise ValueError(f"foreground threshold must lie in (0, 1], got {h}")
    boxes = anchors.boxes() if isinstance(anchors, AnchorGrid) else as_boxes(anchors)
    n = len(boxes)
    gts = as_boxes(gts)
    if len(gts) == 0:
        return LabelAssignment(np.zeros(n, dtype=np.int64), np.full(n, -1), np.zeros(n))
    ov = iou_matrix(boxes, gts)
    best_gt = ov.argmax(axis=1)  # argmax returns the first (lowest) index on ties
    max_iou = ov[np.arange(n), best_gt]
    labels = np.full(n, IGNORE, dtype=np.int64)
    labels[max_iou < bg_ceiling] = BACKGROUND
    fg = max_iou >= h
    labels[fg] = FOREGROUND
    matches = np.where(fg, best_gt, -1)
    if force_best_match:
        for g in range(len(gts)):
            a = int(ov[:, g].argmax())
            if ov[a, g] <= 0:
                continue
            if labels[a] != FOREGROUND:
                labels[a] = FOREGROUND
                matches[a] = g
    return LabelAssignment(labels, matches, max_iou)


def compute_transform(anchor, gt) -> np.ndarray:
    """Regression targets (tx, ty, tw, th) mapping ``anchor`` onto ``gt``; broadcasts over rows."""
    a, g = as_boxes(anchor), as_boxes(gt)
    gw, gh = g[:, 2] - g[:, 0], g[:, 3] - g[:, 1]
    if np.any(gw <= 0) or np.any(gh <= 0):
        raise ValueError("ground-truth boxes must have positive width and height")
    aw, ah = a[:, 2] - a[:, 0], a[:, 3] - a[:, 1]
    acx, acy = a[:, 0] + aw / 2, a[:, 1] + ah / 2
    gcx, gcy = g[:, 0] + gw / 2, g[:, 1] + gh / 2
    t = np.stack([(gcx - acx) / aw, (gcy - acy) / ah, np.log(gw / aw), np.log(gh / ah)], axis=1)
    return t[0] if np.ndim(anchor) == 1 and np.ndim(gt) == 1 else t


def apply_transform(anchor, t) -> np.ndarray:
    a = as_boxes(anchor)
    t = np.asarray(t, dtype=np.float64).reshape(-1, 4)
    aw, ah = a[:, 2] - a[:, 0], a[:, 3] - a[:, 1]
    cx = a[:, 0] + aw / 2 + t[:, 0] * aw
    cy = a[:, 1] + ah / 2 + t[:, 1] * ah
    w = aw * np.exp(t[:, 2])
    h = ah * np.exp(t[:, 3])
    out = np.stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2], axis=1)
    return out[0] if np.ndim(anchor) == 1 else out


def seg_targets(gts, stride_level: int, extent: tuple[int, int]) -> np.ndarray:
    """Binary mask on the stride-level grid: 1 where a cell centre lies inside any gt."""
    if stride_level not in (3, 4, 5):
        raise ValueError(f"segmentation targets exist for stride levels 3-5, got {stride_level}")
    step = 2 ** (stride_level - 1)
    h, w = extent
    cy = (np.arange(h) + 0.5) * step
    cx = (np.arange(w) + 0.5) * step
    mask = np.zeros((h, w), dtype=np.int64)
    for x1, y1, x2, y2 in as_boxes(gts):
        rows = (cy >= y1) & (cy < y2)
        cols = (cx >= x1) & (cx < x2)
        mask[np.ix_(rows, cols)] = 1
    return mask


def anchor_map_layout(values: np.ndarray, grid: AnchorGrid) -> np.ndarray:
    """Reshape a flat per-anchor array into (A, H, W) map layout."""
    return values.reshape(grid.height, grid.width, grid.num_shapes).transpose(2, 0, 1)


def flatten_anchor_map(arr: np.ndarray) -> np.ndarray:
    """Inverse of :func:`anchor_map_layout` for (A, H, W) or (A, k, H, W) arrays."""
    if arr.ndim == 3:
        return arr.transpose(1, 2, 0).reshape(-1)
    return arr.transpose(2, 3, 0, 1).reshape(-1, arr.shape[1])
