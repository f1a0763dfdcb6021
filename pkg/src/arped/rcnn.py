"""Second stage: crop classifier behind a hard score-suppression gate.

Proposals scoring below ``z`` are discarded before cropping, so they never
reach the classifier or its loss.  Survivors are resampled from the RGB image
to fixed-size crops, classified by a small conv net, and the result is fused
with the RPN score.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from arped import tensor as T
from arped.config import RunConfig
from arped.evaluation import Detections
from arped.params import SGD, ParamStore
from arped.targets import IGNORE, as_boxes, iou_matrix

log = logging.getLogger(__name__)

FUSIONS = ("geo", "prod", "mean")


# ---------------------------------------------------------------------------
# suppression, labels, weights, fusion
# ---------------------------------------------------------------------------

def suppress_mask(scores, z: float) -> np.ndarray:
    if not 0 <= z < 1:
        raise ValueError(f"suppression threshold must lie in [0, 1), got {z}")
    return np.asarray(scores, dtype=np.float64) >= z


def hard_suppress(dets: Detections, z: float) -> Detections:
    """Keep proposals with score >= z, preserving their order."""
    return dets.take(np.flatnonzero(suppress_mask(dets.scores, z)))


def rcnn_labels(boxes, gts, h: float = 0.7) -> np.ndarray:
    """1 where a proposal overlaps some gt with IoU >= h, else 0."""
    boxes, gts = as_boxes(boxes), as_boxes(gts)
    if len(gts) == 0 or len(boxes) == 0:
        return np.zeros(len(boxes), dtype=np.int64)
    return (iou_matrix(boxes, gts).max(axis=1) >= h).astype(np.int64)


def height_weights(boxes, image_h: float, enabled: bool = True) -> np.ndarray:
    """``1 + min(box height / image height, 1)`` per proposal, or ones when disabled."""
    boxes = as_boxes(boxes)
    if not enabled:
        return np.ones(len(boxes))
    return 1.0 + np.minimum((boxes[:, 3] - boxes[:, 1]) / image_h, 1.0)


def fuse_scores(rpn_score, rcnn_score, mode: str = "geo"):
    a = np.asarray(rpn_score, dtype=np.float64)
    b = np.asarray(rcnn_score, dtype=np.float64)
    if np.any((a < 0) | (a > 1) | (b < 0) | (b > 1)):
        raise ValueError("scores to fuse must lie in [0, 1]")
    if mode == "geo":
        return np.sqrt(a * b)
    if mode == "prod":
        return a * b
    if mode == "mean":
        return (a + b) / 2
    raise ValueError(f"unknown fusion {mode!r}; expected one of {FUSIONS}")


# ---------------------------------------------------------------------------
# crops
# ---------------------------------------------------------------------------

def extract_crops(image: np.ndarray, boxes, size: int = 32) -> np.ndarray:
    """Bilinearly resample each box of a (3, H, W) image to ``size`` x ``size``.

    Sample ``j`` of a box spanning [x1, x2) sits at ``x1 + (j + 0.5) * (x2 - x1) / size``
    in pixel coordinates (pixel centres at ``i + 0.5``); samples outside the
    image take the nearest edge pixel.
    """
    boxes = as_boxes(boxes)
    c, h, w = image.shape
    n = len(boxes)
    if n == 0:
        return np.zeros((0, c, size, size))
    frac = (np.arange(size) + 0.5) / size
    xs = boxes[:, 0:1] + frac * (boxes[:, 2:3] - boxes[:, 0:1]) - 0.5  # (n, size)
    ys = boxes[:, 1:2] + frac * (boxes[:, 3:4] - boxes[:, 1:2]) - 0.5
    xs = np.clip(xs, 0, w - 1)
    ys = np.clip(ys, 0, h - 1)
    x0 = np.minimum(np.floor(xs).astype(int), w - 1)
    y0 = np.minimum(np.floor(ys).astype(int), h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = (xs - x0)[:, None, None, :]
    fy = (ys - y0)[:, None, :, None]

    def at(yi, xi):
        return image[:, yi[:, :, None], xi[:, None, :]].transpose(1, 0, 2, 3)

    return ((1 - fy) * ((1 - fx) * at(y0, x0) + fx * at(y0, x1))
            + fy * ((1 - fx) * at(y1, x0) + fx * at(y1, x1)))


def crop_seg_targets(boxes, gts, extent: int) -> np.ndarray:
    """Per crop, an ``extent`` x ``extent`` mask of cells whose centre lies inside a gt."""
    boxes, gts = as_boxes(boxes), as_boxes(gts)
    out = np.zeros((len(boxes), extent, extent), dtype=np.int64)
    frac = (np.arange(extent) + 0.5) / extent
    for n, (x1, y1, x2, y2) in enumerate(boxes):
        cx = x1 + frac * (x2 - x1)
        cy = y1 + frac * (y2 - y1)
        for g in gts:
            inside = (((cy >= g[1]) & (cy < g[3]))[:, None]) & (((cx >= g[0]) & (cx < g[2]))[None, :])
            out[n][inside] = 1
    return out


# ---------------------------------------------------------------------------
# network
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RCNNConfig:
    widths: tuple[int, ...] = (16, 32, 32)
    hidden: int = 64
    crop: int = 32

    def __post_init__(self):
        if self.crop % (2 ** len(self.widths)):
            raise ValueError(f"crop size {self.crop} must be divisible by {2 ** len(self.widths)}")

    @property
    def feature_extent(self) -> int:
        return self.crop // 2 ** len(self.widths)

    @classmethod
    def from_run_config(cls, cfg: RunConfig) -> "RCNNConfig":
        return cls(tuple(cfg["rcnn.widths"]), cfg["rcnn.hidden"], cfg["rcnn.crop"])


def init_rcnn(store: ParamStore, rcfg: RCNNConfig, in_channels: int = 3) -> ParamStore:
    cin = in_channels
    for i, c in enumerate(rcfg.widths, start=1):
        store.conv(f"rcnn.block{i}", cin, c, 3)
        cin = c
    store.conv("rcnn.seg", cin, 2, 1)
    store.dense("rcnn.fc1", cin * rcfg.feature_extent ** 2, rcfg.hidden)
    store.dense("rcnn.fc2", rcfg.hidden, 2)
    return store


def rcnn_logits(crops, store: ParamStore, rcfg: RCNNConfig) -> tuple[T.Tensor, T.Tensor]:
    """(N, 2) class logits and (N, 2, e, e) segmentation logits for a crop batch."""
    x = T.as_tensor(crops)
    for i in range(1, len(rcfg.widths) + 1):
        x = T.relu(T.conv2d(x, store[f"rcnn.block{i}.weight"], store[f"rcnn.block{i}.bias"], 1, 1))
        x = T.maxpool2(x)
    seg = T.conv2d(x, store["rcnn.seg.weight"], store["rcnn.seg.bias"])
    flat = T.reshape(x, (x.shape[0], -1))
    hid = T.relu(T.linear(flat, store["rcnn.fc1.weight"], store["rcnn.fc1.bias"]))
    return T.linear(hid, store["rcnn.fc2.weight"], store["rcnn.fc2.bias"]), seg


def rcnn_forward(crops, store: ParamStore, rcfg: RCNNConfig, batch: int = 256) -> np.ndarray:
    """Foreground probability per crop; an empty batch gives an empty result."""
    crops = np.asarray(crops, dtype=np.float64)
    if len(crops) == 0:
        return np.zeros(0)
    out = []
    for s in range(0, len(crops), batch):
        logits, _ = rcnn_logits(crops[s:s + batch] - 0.5, store, rcfg)
        out.append(T.softmax(logits.data, axis=1)[:, 1])
    return np.concatenate(out)


def rcnn_loss(logits: T.Tensor, labels, weights, scores, z: float, seg_logits: T.Tensor | None = None,
              seg_labels=None, lambda_seg: float = 1.0) -> T.Tensor:
    """``sum_j w_j CE(c_j) / n + lambda_seg * L_seg`` over proposals with score >= z.

    Suppressed proposals are masked out of both terms, so their gradient is
    exactly zero.  With no survivors the loss is zero.
    """
    keep = suppress_mask(scores, z)
    labels = np.where(keep, np.asarray(labels), IGNORE)
    loss = T.softmax_cross_entropy(logits, labels, np.asarray(weights, dtype=np.float64), axis=1)
    if seg_logits is None:
        return loss
    seg = np.where(keep[:, None, None], np.asarray(seg_labels), IGNORE)
    ls = T.softmax_cross_entropy(seg_logits, seg, axis=1)
    return T.add(loss, T.scale(ls, lambda_seg))


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

@dataclass
class ProposalPool:
    """Surviving proposals of a training set, flattened across images."""

    crops: np.ndarray  # (N, 3, s, s)
    labels: np.ndarray
    weights: np.ndarray
    scores: np.ndarray
    seg: np.ndarray  # (N, e, e)

    def __len__(self) -> int:
        return len(self.labels)


def build_pool(images, proposals: list[Detections], gts_per_image, cfg: RunConfig,
               include_gts: bool = True) -> ProposalPool:
    """Suppress, label, weight and crop proposals; gts join as score-1 positives."""
    rcfg = RCNNConfig.from_run_config(cfg)
    crops, labels, weights, scores, seg = [], [], [], [], []
    for img, dets, gts in zip(images, proposals, gts_per_image):
        kept = hard_suppress(dets, cfg["rcnn.z"])
        boxes, sc = kept.boxes, kept.scores
        gts = as_boxes(gts)
        if include_gts and len(gts):
            boxes = np.concatenate([boxes, gts])
            sc = np.concatenate([sc, np.ones(len(gts))])
        crops.append(extract_crops(img, boxes, rcfg.crop))
        labels.append(rcnn_labels(boxes, gts, cfg["rcnn.h"]))
        weights.append(height_weights(boxes, img.shape[1], cfg["rcnn.height_weighting"]))
        scores.append(sc)
        seg.append(crop_seg_targets(boxes, gts, rcfg.feature_extent))
    e = rcfg.feature_extent
    return ProposalPool(np.concatenate(crops) if crops else np.zeros((0, 3, rcfg.crop, rcfg.crop)),
                        np.concatenate(labels) if labels else np.zeros(0, dtype=np.int64),
                        np.concatenate(weights) if weights else np.zeros(0),
                        np.concatenate(scores) if scores else np.zeros(0),
                        np.concatenate(seg) if seg else np.zeros((0, e, e), dtype=np.int64))


def sample_batch(labels: np.ndarray, batch: int, rng, fg_fraction: float = 0.25) -> np.ndarray:
    """Indices of a minibatch holding up to ``fg_fraction`` positives."""
    fg = np.flatnonzero(labels == 1)
    bg = np.flatnonzero(labels == 0)
    n_fg = min(len(fg), int(round(batch * fg_fraction)))
    n_bg = min(len(bg), batch - n_fg)
    idx = np.concatenate([rng.choice(fg, n_fg, replace=False) if n_fg else np.zeros(0, int),
                          rng.choice(bg, n_bg, replace=False) if n_bg else np.zeros(0, int)])
    return idx.astype(np.intp)


def train_rcnn(cfg: RunConfig, pool: ProposalPool, loss_log=None) -> ParamStore:
    rcfg = RCNNConfig.from_run_config(cfg)
    store = init_rcnn(ParamStore(cfg["seed"] + 1), rcfg)
    opt = SGD(store, cfg["rcnn.lr"], cfg["train.momentum"])
    rng = np.random.default_rng([cfg["seed"], 11])
    if len(pool) == 0:
        log.warning("no surviving proposals; second stage left untrained")
        return store
    for it in range(cfg["rcnn.iters"]):
        idx = sample_batch(pool.labels, cfg["rcnn.batch"], rng)
        with T.Tape() as tape:
            logits, seg = rcnn_logits(pool.crops[idx] - 0.5, store, rcfg)
            loss = rcnn_loss(logits, pool.labels[idx], pool.weights[idx], pool.scores[idx],
                             cfg["rcnn.z"], seg, pool.seg[idx], cfg["rcnn.lambda_seg"])
        if not math.isfinite(loss.item()):
            raise FloatingPointError(f"non-finite second-stage loss at iteration {it}")
        store.zero_grad()
        tape.backward(loss)
        opt.lr = cfg["rcnn.lr"] * (0.1 if it >= int(cfg["train.lr_decay_at"] * cfg["rcnn.iters"]) else 1)
        opt.step()
        if loss_log is not None:
            loss_log.write(f"{it} {loss.item():.6g}\n")
    return store


def rescore(images, proposals: list[Detections], store: ParamStore, cfg: RunConfig) -> list[Detections]:
    """Suppress, classify and fuse: the second stage at inference time."""
    rcfg = RCNNConfig.from_run_config(cfg)
    out = []
    for img, dets in zip(images, proposals):
        kept = hard_suppress(dets, cfg["rcnn.z"])
        p = rcnn_forward(extract_crops(img, kept.boxes, rcfg.crop), store, rcfg)
        fused = fuse_scores(kept.scores, p, cfg["rcnn.fusion"]) if len(kept) else kept.scores
        out.append(Detections(kept.boxes, fused, kept.image_id, kept.phase))
    return out
