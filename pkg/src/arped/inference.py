"""Running a trained RPN over a split: per-phase maps, proposals and curves."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from arped import tensor as T
from arped.config import RunConfig
from arped.evaluation import Detections, EvalCurve, decode_detections, evaluate, foreground_max_map, nms
from arped.params import ParamStore
from arped.rpn import ModelConfig, grid_for, rpn_forward
from arped.train import prepare


@dataclass
class ImagePrediction:
    """Raw network outputs for one image (numpy, no batch axis)."""

    logits: dict[int, np.ndarray]  # phase -> (2A, h, w)
    bbox: np.ndarray  # (4A, h, w)
    image_id: int = 0

    def fg_max(self, k: int) -> np.ndarray:
        return foreground_max_map(self.logits[k])


@dataclass
class PhaseEvaluation:
    curves: dict[int, EvalCurve] = field(default_factory=dict)
    detections: dict[int, list[Detections]] = field(default_factory=dict)

    @property
    def final(self) -> int:
        return max(self.curves)


def predict(store: ParamStore, mcfg: ModelConfig, images, batch: int = 4) -> list[ImagePrediction]:
    out = []
    images = list(images)
    for s in range(0, len(images), batch):
        chunk = images[s:s + batch]
        res = rpn_forward(T.Tensor(prepare(chunk)), store, mcfg, training=False)
        for j in range(len(chunk)):
            logits = {p.k: p.logits.data[j] for p in res.phases}
            out.append(ImagePrediction(logits, res.bbox.data[j], s + j))
    return out


def phase_detections(preds: list[ImagePrediction], k: int, cfg: RunConfig, image_hw,
                     apply_nms: bool = True) -> list[Detections]:
    """Decode phase ``k``'s scores with the shared final regression map."""
    grid = grid_for(cfg, *image_hw)
    dets = []
    for p in preds:
        if k not in p.logits:
            raise IndexError(f"phase {k} out of range (phases {sorted(p.logits)})")
        d = decode_detections(p.logits[k], p.bbox, grid, image_hw, cfg["eval.min_side"],
                              p.image_id, k)
        dets.append(nms(d, cfg["eval.nms"]) if apply_nms else d)
    return dets


def evaluate_phases(preds: list[ImagePrediction], gts, cfg: RunConfig, image_hw,
                    phases=None) -> PhaseEvaluation:
    if not preds:
        raise ValueError("test set is empty")
    lo, hi = cfg["eval.fppi_range"]
    res = PhaseEvaluation()
    for k in phases if phases is not None else sorted(preds[0].logits):
        dets = phase_detections(preds, k, cfg, image_hw)
        res.detections[k] = dets
        res.curves[k] = evaluate(dets, gts, lo, hi, cfg["eval.match_iou"])
    return res
