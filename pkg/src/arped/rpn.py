"""Multi-phase autoregressive region proposal network.

Phase 1 is the backbone; each later phase stacks a de-encoder on the previous
phase's pyramid.  Every phase ends with a PFE layer (3x3 conv + ReLU) and a
1x1 classification layer; from phase 2 on the PFE input is the previous
phase's logits concatenated with the phase's coarsest feature.  The final
phase's PFE also feeds the box regression layer.

Logit channel ``2a`` is the background score of anchor ``a`` and ``2a + 1``
its foreground score; regression channel ``4a + j`` holds coordinate ``j`` of
``(tx, ty, tw, th)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from arped import tensor as T
from arped.backbone import FeaturePyramid, backbone_forward, init_backbone
from arped.config import RunConfig
from arped.deencoder import DeEncoderConfig, DeEncoderState, de_encode, init_deencoder
from arped.params import ParamStore
from arped.targets import (FOREGROUND, IGNORE, AnchorGrid, anchor_map_layout, assign_labels,
                           compute_transform, make_anchors, seg_targets)

SEG_LEVELS = (3, 4, 5)
HEAD_INIT_STD = 0.01  # prediction layers start near zero output


@dataclass(frozen=True)
class ModelConfig:
    backbone_widths: tuple[int, ...] = (8, 16, 32, 64, 128)
    backbone_depths: tuple[int, ...] = (2, 2, 2, 2, 2)
    phases: tuple[DeEncoderConfig, ...] = ()
    num_anchors: int = 3
    pfe_width: int = 64
    autoregressive: bool = True

    @property
    def num_phases(self) -> int:
        return 1 + len(self.phases)

    def top_width(self, k: int) -> int:
        if k == 1:
            return self.backbone_widths[-1]
        return self.phases[k - 2].widths[self.phases[k - 2].n]

    def predicting_phases(self) -> list[int]:
        """Phases carrying a classification head."""
        if self.autoregressive:
            return list(range(1, self.num_phases + 1))
        return [self.num_phases]

    def pfe_in(self, k: int) -> int:
        c = self.top_width(k)
        if self.autoregressive and k > 1:
            c += 2 * self.num_anchors
        return c

    @classmethod
    def from_run_config(cls, cfg: RunConfig) -> "ModelConfig":
        n = cfg["rpn.num_phases"]
        if n < 1:
            raise ValueError("rpn.num_phases must be at least 1")
        phases = tuple(
            DeEncoderConfig.from_list(k, cfg[f"phase{k}.target_stride"], cfg.phase_widths(k),
                                      mode=cfg["resample.mode"], norm=cfg["norm.enabled"])
            for k in range(2, n + 1))
        return cls(tuple(cfg["backbone.widths"]), tuple(cfg["backbone.depths"]), phases,
                   len(cfg["anchors.heights"]) * len(cfg["anchors.x_offsets"]), cfg["rpn.pfe_width"], cfg["rpn.autoregressive"])


def init_rpn(store: ParamStore, mcfg: ModelConfig) -> ParamStore:
    init_backbone(store, mcfg.backbone_widths, mcfg.backbone_depths)
    widths = {i: c for i, c in enumerate(mcfg.backbone_widths, start=1)}
    for dcfg in mcfg.phases:
        init_deencoder(store, dcfg, widths)
        if dcfg.phase == 2:
            for i in SEG_LEVELS:
                if i in dcfg.levels:
                    store.conv(f"phase2.seg{i}", dcfg.widths[i], 2, 1, std=HEAD_INIT_STD)
        widths = dict(dcfg.widths)
    a = mcfg.num_anchors
    for k in mcfg.predicting_phases():
        store.conv(f"phase{k}.pfe", mcfg.pfe_in(k), mcfg.pfe_width, 3)
        store.conv(f"phase{k}.cls", mcfg.pfe_width, 2 * a, 1, std=HEAD_INIT_STD)
    store.conv(f"phase{mcfg.num_phases}.bbox", mcfg.pfe_width, 4 * a, 1, std=HEAD_INIT_STD)
    return store


def build_rpn(mcfg: ModelConfig, seed: int = 0) -> ParamStore:
    return init_rpn(ParamStore(seed), mcfg)


@dataclass
class PhaseResult:
    k: int
    logits: T.Tensor  # B x 2A x h5 x w5
    pfe: T.Tensor


@dataclass
class PhaseOutputs:
    phases: list[PhaseResult]
    bbox: T.Tensor  # B x 4A x h5 x w5
    seg: dict = field(default_factory=dict)  # stride level -> B x 2 x h x w
    pyramids: list[FeaturePyramid] = field(default_factory=list)
    states: list[DeEncoderState] = field(default_factory=list)

    def logits(self, k: int) -> T.Tensor:
        for p in self.phases:
            if p.k == k:
                return p.logits
        raise IndexError(f"phase {k} has no prediction map (phases {[p.k for p in self.phases]})")

    @property
    def final(self) -> PhaseResult:
        return self.phases[-1]


def phase_predict(prev_logits: T.Tensor | None, top_feature: T.Tensor, store: ParamStore,
                  k: int) -> tuple[T.Tensor, T.Tensor]:
    x = top_feature
    if prev_logits is not None:
        if prev_logits.shape[2:] != top_feature.shape[2:]:
            raise ValueError(f"phase {k}: previous logits {prev_logits.shape[2:]} and feature "
                             f"{top_feature.shape[2:]} differ in spatial extent")
        x = T.concat([prev_logits, top_feature], axis=1)
    pfe = T.relu(T.conv2d(x, store[f"phase{k}.pfe.weight"], store[f"phase{k}.pfe.bias"], 1, 1))
    logits = T.conv2d(pfe, store[f"phase{k}.cls.weight"], store[f"phase{k}.cls.bias"])
    return logits, pfe


def rpn_forward(image, store: ParamStore, mcfg: ModelConfig, training: bool = False) -> PhaseOutputs:
    image = T.as_tensor(image)
    if image.ndim == 3:
        image = T.Tensor(image.data[None])
    pyr = backbone_forward(image, store, mcfg.backbone_depths)
    pyramids, states, phases, seg = [pyr], [], [], {}
    predicting = set(mcfg.predicting_phases())
    prev = None
    for k in range(1, mcfg.num_phases + 1):
        if k > 1:
            dcfg = mcfg.phases[k - 2]
            state = DeEncoderState()
            pyr = de_encode(pyr, dcfg, store, training, state)
            pyramids.append(pyr)
            states.append(state)
            if k == 2 and training:
                for i in SEG_LEVELS:
                    if i in state.decoded:
                        seg[i] = T.conv2d(state.decoded[i], store[f"phase2.seg{i}.weight"],
                                          store[f"phase2.seg{i}.bias"])
        if k in predicting:
            logits, pfe = phase_predict(prev if mcfg.autoregressive else None,
                                        pyr[pyr.highest], store, k)
            phases.append(PhaseResult(k, logits, pfe))
            prev = logits
    last = phases[-1].pfe
    n = mcfg.num_phases
    bbox = T.conv2d(last, store[f"phase{n}.bbox.weight"], store[f"phase{n}.bbox.bias"])
    return PhaseOutputs(phases, bbox, seg, pyramids, states)


# ---------------------------------------------------------------------------
# targets and loss
# ---------------------------------------------------------------------------

@dataclass
class RPNTargets:
    labels: dict  # phase -> B x A x h x w int
    weights: dict  # phase -> B x A x h x w float
    bbox: np.ndarray  # B x 4A x h x w
    bbox_weights: np.ndarray
    num_fg_bbox: int
    seg: dict  # level -> B x h x w int


@dataclass(frozen=True)
class LossWeights:
    phases: tuple[float, ...] = (0.1, 0.1, 1.0)
    bbox: float = 5.0
    seg: float = 1.0

    @classmethod
    def from_run_config(cls, cfg: RunConfig) -> "LossWeights":
        return cls(tuple(cfg.lambdas()), cfg["rpn.lambda_bbox"], cfg["rpn.lambda_seg"])


def bbox_targets(grid: AnchorGrid, gts, h: float, bg_ceiling: float = 0.3,
                 force_best_match: bool = True) -> tuple[np.ndarray, np.ndarray, int]:
    """(4A x h x w) regression targets and weights for foreground anchors at threshold ``h``."""
    anchors = grid.boxes()
    lab = assign_labels(anchors, gts, h, bg_ceiling, force_best_match)
    t = np.zeros((len(anchors), 4))
    w = np.zeros((len(anchors), 4))
    fg = lab.foreground
    if len(fg):
        t[fg] = compute_transform(anchors[fg], np.asarray(gts, dtype=np.float64)[lab.matches[fg]])
        w[fg] = 1.0
    a = grid.num_shapes

    def layout(v):
        return v.reshape(grid.height, grid.width, a, 4).transpose(2, 3, 0, 1).reshape(
            4 * a, grid.height, grid.width)

    return layout(t), layout(w), len(fg)


def build_targets(gts_per_image, grid: AnchorGrid, policies: dict, *, bbox_h: float,
                  seg_extents: dict | None = None, bg_ceiling: float = 0.3,
                  force_best_match: bool = True, fg_weight: float = 1.0) -> RPNTargets:
    """Targets for a batch.  ``policies`` maps phase index to foreground threshold."""
    anchors = grid.boxes()
    labels = {k: [] for k in policies}
    weights = {k: [] for k in policies}
    bt, bw, nfg = [], [], 0
    seg = {i: [] for i in (seg_extents or {})}
    for gts in gts_per_image:
        for k, h in policies.items():
            lab = assign_labels(anchors, gts, h, bg_ceiling, force_best_match)
            lm = anchor_map_layout(lab.labels, grid)
            labels[k].append(lm)
            weights[k].append(np.where(lm == FOREGROUND, fg_weight, 1.0))
        t, w, n = bbox_targets(grid, gts, bbox_h, bg_ceiling, force_best_match)
        bt.append(t)
        bw.append(w)
        nfg += n
        for i, ext in (seg_extents or {}).items():
            seg[i].append(seg_targets(gts, i, ext))
    return RPNTargets({k: np.stack(v) for k, v in labels.items()},
                      {k: np.stack(v) for k, v in weights.items()},
                      np.stack(bt), np.stack(bw), nfg, {i: np.stack(v) for i, v in seg.items()})


def targets_for(outputs: PhaseOutputs, gts_per_image, grid: AnchorGrid, cfg: RunConfig) -> RPNTargets:
    pol = cfg.policies()
    policies = {p.k: pol[p.k - 1] for p in outputs.phases}
    if not cfg["rpn.autoregressive"]:
        policies = {outputs.final.k: pol[-1]}
    bbox_h = pol[-1] if cfg["rpn.bbox_policy"] == "final" else float(cfg["rpn.bbox_policy"])
    extents = {i: s.shape[2:] for i, s in outputs.seg.items()}
    return build_targets(gts_per_image, grid, policies, bbox_h=bbox_h, seg_extents=extents,
                         bg_ceiling=cfg["labels.bg_ceiling"],
                         force_best_match=cfg["labels.force_best_match"],
                         fg_weight=cfg["labels.fg_weight"])


def cls_loss(logits: T.Tensor, labels: np.ndarray, weights: np.ndarray | None = None) -> T.Tensor:
    b, c, h, w = logits.shape
    pairs = T.reshape(logits, (b, c // 2, 2, h, w))
    return T.softmax_cross_entropy(pairs, labels, weights, axis=2, ignore=IGNORE)


def rpn_loss(outputs: PhaseOutputs, targets: RPNTargets, weights: LossWeights) -> tuple[T.Tensor, dict]:
    """Joint loss: sum_k lambda_k L_cls,k + lambda_b L_bbox + lambda_s sum_i L_seg,i.

    Returns the scalar loss and a dict of the unweighted term values.
    """
    terms: list[T.Tensor] = []
    parts: dict[str, float] = {}
    n = len(weights.phases)
    for p in outputs.phases:
        if p.k not in targets.labels:
            raise ValueError(f"no classification targets for phase {p.k}")
        lab = targets.labels[p.k]
        b, c, h, w = p.logits.shape
        if lab.shape != (b, c // 2, h, w):
            raise ValueError(f"phase {p.k} labels {lab.shape} do not match logits {p.logits.shape}")
        lam = weights.phases[p.k - 1] if p.k <= n else weights.phases[-1]
        lc = cls_loss(p.logits, lab, targets.weights[p.k])
        parts[f"cls{p.k}"] = lc.item()
        terms.append(T.scale(lc, lam))
    if targets.bbox.shape != outputs.bbox.shape:
        raise ValueError(f"bbox targets {targets.bbox.shape} do not match output {outputs.bbox.shape}")
    lb = T.smooth_l1(outputs.bbox, targets.bbox, targets.bbox_weights, targets.num_fg_bbox)
    parts["bbox"] = lb.item()
    terms.append(T.scale(lb, weights.bbox))
    for i, logits in sorted(outputs.seg.items()):
        ls = T.softmax_cross_entropy(logits, targets.seg[i], axis=1)
        parts[f"seg{i}"] = ls.item()
        terms.append(T.scale(ls, weights.seg))
    loss = T.add_n(terms)
    parts["total"] = loss.item()
    return loss, parts


def grid_for(cfg: RunConfig, image_h: int | None = None, image_w: int | None = None) -> AnchorGrid:
    s = cfg["data.image_size"]
    return make_anchors(image_h or s, image_w or s, cfg["anchors.heights"], cfg["anchors.aspect"],
                        x_offsets=cfg["anchors.x_offsets"])


def foreground_probs(logits: np.ndarray) -> np.ndarray:
    """(B, 2A, h, w) logits -> (B, A, h, w) foreground probabilities."""
    b, c, h, w = logits.shape
    return T.softmax(logits.reshape(b, c // 2, 2, h, w), axis=2)[:, :, 1]
