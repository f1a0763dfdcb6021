"""Detection decoding, NMS, miss-rate/FPPI evaluation and score-map analysis."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from arped.rpn import foreground_probs
from arped.targets import AnchorGrid, apply_transform, as_boxes, iou_matrix


@dataclass
class Detections:
    """Scored boxes of one image, kept as parallel arrays."""

    boxes: np.ndarray
    scores: np.ndarray
    image_id: int = 0
    phase: int | None = None

    def __len__(self) -> int:
        return len(self.scores)

    def take(self, idx) -> "Detections":
        idx = np.asarray(idx, dtype=np.intp)
        return Detections(self.boxes[idx].reshape(-1, 4), self.scores[idx], self.image_id, self.phase)


def decode_detections(logits: np.ndarray, bbox: np.ndarray, grid: AnchorGrid, image_hw,
                      min_side: float = 2.0, image_id: int = 0, phase: int | None = None,
                      keep_small: bool = False) -> Detections:
    """Per-anchor foreground scores and regressed, clipped boxes for one image.

    ``logits`` is (2A, h, w) and ``bbox`` is (4A, h, w).  Boxes with a side
    below ``min_side`` after clipping are dropped unless ``keep_small``.
    """
    a, h, w = grid.num_shapes, grid.height, grid.width
    if logits.shape != (2 * a, h, w) or bbox.shape != (4 * a, h, w):
        raise ValueError(f"maps {logits.shape}/{bbox.shape} do not fit a {a}x{h}x{w} anchor grid")
    scores = foreground_probs(logits[None])[0].transpose(1, 2, 0).reshape(-1)
    t = bbox.reshape(a, 4, h, w).transpose(2, 3, 0, 1).reshape(-1, 4)
    boxes = apply_transform(grid.boxes(), t)
    ih, iw = image_hw
    boxes[:, [0, 2]] = np.clip(boxes[:, [0, 2]], 0, iw)
    boxes[:, [1, 3]] = np.clip(boxes[:, [1, 3]], 0, ih)
    dets = Detections(boxes, scores, image_id, phase)
    if keep_small:
        return dets
    ok = ((boxes[:, 2] - boxes[:, 0]) >= min_side) & ((boxes[:, 3] - boxes[:, 1]) >= min_side)
    return dets.take(np.flatnonzero(ok))


def nms_indices(boxes, scores, threshold: float) -> np.ndarray:
    """Greedy NMS; suppresses IoU > threshold.  Ties keep the earlier index."""
    if not 0 < threshold < 1:
        raise ValueError(f"NMS threshold must lie in (0, 1), got {threshold}")
    boxes = as_boxes(boxes)
    scores = np.asarray(scores, dtype=np.float64)
    order = np.argsort(-scores, kind="stable")
    keep = []
    while order.size:
        i = order[0]
        keep.append(i)
        if order.size == 1:
            break
        ov = iou_matrix(boxes[i:i + 1], boxes[order[1:]])[0]
        order = order[1:][ov <= threshold]
    return np.array(keep, dtype=np.intp)


def nms(dets: Detections, threshold: float = 0.5) -> Detections:
    return dets.take(nms_indices(dets.boxes, dets.scores, threshold))


# ---------------------------------------------------------------------------
# miss rate vs. false positives per image
# ---------------------------------------------------------------------------

@dataclass
class EvalCurve:
    fppi: np.ndarray
    miss_rate: np.ndarray
    scores: np.ndarray  # score threshold at each curve point
    log_avg: float
    fppi_range: tuple[float, float] = (1e-2, 1.0)
    num_gt: int = 0
    num_images: int = 0
    ref_points: np.ndarray = field(default_factory=lambda: np.zeros(0))
    ref_miss: np.ndarray = field(default_factory=lambda: np.zeros(0))

    @property
    def defined(self) -> bool:
        return self.num_gt > 0

    def miss_rate_at(self, fppi: float) -> float:
        return _mr_at(self.fppi, self.miss_rate, fppi)

    def recall_at(self, fppi: float) -> float:
        return 1.0 - self.miss_rate_at(fppi)

    def to_text(self) -> str:
        lines = [f"{f:.6g} {m:.6g}\n" for f, m in zip(self.fppi, self.miss_rate)]
        lines.append(f"log_avg {self.log_avg:.6g}\n")
        return "".join(lines)

    def write(self, path) -> None:
        Path(path).write_text(self.to_text())


def _mr_at(fppi: np.ndarray, mr: np.ndarray, ref: float) -> float:
    if len(fppi) == 0:
        return 1.0
    idx = np.flatnonzero(fppi <= ref)
    # flat extrapolation below the lowest achieved FPPI
    return float(mr[idx[-1]] if idx.size else mr[0])


def match_image(boxes, scores, gts, iou_thr: float = 0.5) -> np.ndarray:
    """Greedy matching in descending score order; returns a TP flag per detection."""
    boxes = as_boxes(boxes)
    gts = as_boxes(gts)
    tp = np.zeros(len(boxes), dtype=bool)
    if len(boxes) == 0 or len(gts) == 0:
        return tp
    order = np.argsort(-np.asarray(scores), kind="stable")
    ov = iou_matrix(boxes, gts)
    taken = np.zeros(len(gts), dtype=bool)
    for d in order:
        cand = np.where(taken, -1.0, ov[d])
        g = int(cand.argmax())
        if cand[g] >= iou_thr:
            taken[g] = True
            tp[d] = True
    return tp


def evaluate(dets_per_image, gts_per_image, fppi_lo: float = 1e-2, fppi_hi: float = 1.0,
             iou_thr: float = 0.5, num_ref: int = 9) -> EvalCurve:
    """Miss-rate/FPPI curve swept over score thresholds and its log-average.

    The log-average is the geometric mean of the miss rate sampled at
    ``num_ref`` points evenly spaced in log10-FPPI over [fppi_lo, fppi_hi].
    Zero ground truths leave the miss rate undefined (``log_avg`` is NaN).
    """
    if len(dets_per_image) != len(gts_per_image):
        raise ValueError("need one detection list per image")
    n_img = len(gts_per_image)
    n_gt = int(sum(len(as_boxes(g)) for g in gts_per_image))
    all_scores, all_tp = [], []
    for d, g in zip(dets_per_image, gts_per_image):
        all_scores.append(np.asarray(d.scores, dtype=np.float64))
        all_tp.append(match_image(d.boxes, d.scores, g, iou_thr))
    scores = np.concatenate(all_scores) if all_scores else np.zeros(0)
    tp = np.concatenate(all_tp) if all_tp else np.zeros(0, dtype=bool)
    ref = np.logspace(math.log10(fppi_lo), math.log10(fppi_hi), num_ref)
    if n_gt == 0:
        return EvalCurve(np.zeros(0), np.zeros(0), np.zeros(0), float("nan"), (fppi_lo, fppi_hi),
                         0, n_img, ref, np.full(num_ref, np.nan))
    order = np.argsort(-scores, kind="stable")
    scores, tp = scores[order], tp[order]
    ctp = np.cumsum(tp)
    cfp = np.cumsum(~tp)
    # one curve point per distinct score threshold
    last = np.r_[scores[1:] != scores[:-1], True] if len(scores) else np.zeros(0, dtype=bool)
    fppi = cfp[last] / max(n_img, 1)
    mr = 1.0 - ctp[last] / n_gt
    thr = scores[last]
    ref_mr = np.array([_mr_at(fppi, mr, r) for r in ref])
    log_avg = float(np.exp(np.mean(np.log(np.maximum(ref_mr, 1e-10)))))
    return EvalCurve(fppi.astype(np.float64), mr, thr, log_avg, (fppi_lo, fppi_hi), n_gt, n_img,
                     ref, ref_mr)


def recall(dets_per_image, gts_per_image, iou_thr: float = 0.5) -> float:
    n_gt = sum(len(as_boxes(g)) for g in gts_per_image)
    if n_gt == 0:
        return float("nan")
    hit = sum(int(match_image(d.boxes, d.scores, g, iou_thr).sum())
              for d, g in zip(dets_per_image, gts_per_image))
    return hit / n_gt


def write_detections(path, dets_per_image) -> None:
    with open(path, "w") as fh:
        for d in dets_per_image:
            for b, s in zip(d.boxes, d.scores):
                fh.write(f"{d.image_id} {s:.6g} {b[0]:.6g} {b[1]:.6g} {b[2]:.6g} {b[3]:.6g}\n")


def read_detections(path) -> dict[int, Detections]:
    rows: dict[int, list] = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != 6:
            raise ValueError(f"{path}:{lineno}: expected 'image_id score x1 y1 x2 y2'")
        rows.setdefault(int(parts[0]), []).append([float(p) for p in parts[1:]])
    out = {}
    for img, r in rows.items():
        arr = np.array(r)
        out[img] = Detections(arr[:, 1:], arr[:, 0], img)
    return out


# ---------------------------------------------------------------------------
# score-map analysis
# ---------------------------------------------------------------------------

def foreground_max_map(logits: np.ndarray) -> np.ndarray:
    """(2A, h, w) logits -> (h, w) maximum foreground probability over anchors."""
    return foreground_probs(np.asarray(logits)[None])[0].max(axis=0)


AGREE_BG, AGREE_FG, SUPPRESSED, EMERGED = 0, 1, 2, 3


def phase_disagreement(a: np.ndarray, b: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    """Per-cell category comparing two foreground-max maps binarised at ``threshold``."""
    a, b = np.asarray(a), np.asarray(b)
    if a.shape != b.shape:
        raise ValueError(f"maps differ in extent: {a.shape} vs {b.shape}")
    fa, fb = a >= threshold, b >= threshold
    out = np.full(a.shape, AGREE_BG, dtype=np.int64)
    out[fa & fb] = AGREE_FG
    out[fa & ~fb] = SUPPRESSED
    out[~fa & fb] = EMERGED
    return out


def bilinear_sample(grid_map: np.ndarray, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Sample a 2-d map at fractional cell coordinates (cell centres at integers), edge-clamped."""
    h, w = grid_map.shape
    x = np.clip(np.asarray(x, dtype=np.float64), 0, w - 1)
    y = np.clip(np.asarray(y, dtype=np.float64), 0, h - 1)
    x0 = np.minimum(np.floor(x).astype(int), w - 1)
    y0 = np.minimum(np.floor(y).astype(int), h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx, fy = x - x0, y - y0
    return ((1 - fy) * ((1 - fx) * grid_map[y0, x0] + fx * grid_map[y0, x1])
            + fy * ((1 - fx) * grid_map[y1, x0] + fx * grid_map[y1, x1]))


@dataclass
class PeakProfile:
    x: np.ndarray  # (phases, samples) along the horizontal centre line
    y: np.ndarray  # (phases, samples) along the vertical centre line
    phases: list[int]
    num_gt: int

    def peakedness(self, centre: int = 2, edge: int = 2) -> np.ndarray:
        """Per phase: mean of the ``centre`` middle samples minus the mean of the
        ``edge`` outermost samples at both ends, averaged over the two axes."""
        out = []
        for prof in (self.x, self.y):
            n = prof.shape[1]
            mid = prof[:, n // 2 - centre // 2: n // 2 + (centre + 1) // 2]
            ends = np.concatenate([prof[:, :edge], prof[:, n - edge:]], axis=1)
            out.append(mid.mean(axis=1) - ends.mean(axis=1))
        return (out[0] + out[1]) / 2

    def to_text(self) -> str:
        lines = []
        for axis, prof in (("x", self.x), ("y", self.y)):
            for k, row in zip(self.phases, prof):
                lines.append(f"{axis} phase{k} " + " ".join(f"{v:.6g}" for v in row) + "\n")
        return "".join(lines)


def peak_profile(maps_per_image, gts_per_image, stride: int = 16, samples: int = 20,
                 phases: list[int] | None = None) -> PeakProfile:
    """Mean score of ``samples`` points along each gt's centre lines.

    ``maps_per_image`` holds, per image, a list of foreground-max maps (one per
    phase).  Points are spaced uniformly from box edge to box edge.
    """
    total_x = total_y = None
    n = 0
    for maps, gts in zip(maps_per_image, gts_per_image):
        for x1, y1, x2, y2 in as_boxes(gts):
            xs = np.linspace(x1, x2, samples)
            ys = np.linspace(y1, y2, samples)
            cx, cy = (x1 + x2) / 2, (y1 + y2) / 2
            px = np.stack([bilinear_sample(m, xs / stride - 0.5, np.full(samples, cy / stride - 0.5))
                           for m in maps])
            py = np.stack([bilinear_sample(m, np.full(samples, cx / stride - 0.5), ys / stride - 0.5)
                           for m in maps])
            total_x = px if total_x is None else total_x + px
            total_y = py if total_y is None else total_y + py
            n += 1
    if n == 0:
        raise ValueError("peak profile needs at least one ground-truth box")
    k = list(phases) if phases is not None else list(range(1, total_x.shape[0] + 1))
    return PeakProfile(total_x / n, total_y / n, k, n)


# blue -> yellow for scores; categorical colours for disagreement maps
CATEGORY_COLOURS = {
    AGREE_BG: (0, 0, 0),
    AGREE_FG: (0, 200, 0),
    SUPPRESSED: (255, 0, 255),
    EMERGED: (255, 255, 255),
}


def heat_rgb(scores: np.ndarray) -> np.ndarray:
    v = np.clip(np.asarray(scores, dtype=np.float64), 0, 1)
    return np.round(np.stack([v, v, 1 - v]) * 255).astype(np.uint8)


def category_rgb(cats: np.ndarray) -> np.ndarray:
    out = np.zeros((3,) + cats.shape, dtype=np.uint8)
    for c, rgb in CATEGORY_COLOURS.items():
        for ch in range(3):
            out[ch][cats == c] = rgb[ch]
    return out


def upscale(rgb: np.ndarray, factor: int) -> np.ndarray:
    return np.repeat(np.repeat(rgb, factor, axis=1), factor, axis=2)
