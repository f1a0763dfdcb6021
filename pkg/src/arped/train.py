"""Dataset loading and the RPN training loop."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from arped import tensor as T
from arped.config import RunConfig
from arped.params import SGD, ParamStore
from arped.rpn import LossWeights, ModelConfig, build_rpn, grid_for, rpn_forward, rpn_loss, targets_for
from arped.synthdata import AnnotatedScene, SceneConfig, generate_split, read_dataset

log = logging.getLogger(__name__)

PIXEL_MEAN = 0.5


def load_split(cfg: RunConfig, split: str) -> list[AnnotatedScene]:
    """Scenes of ``split`` from ``data.dir/<split>`` or, when unset, generated in memory."""
    if cfg["data.dir"]:
        root = Path(cfg["data.dir"]) / split
        if not root.is_dir():
            raise FileNotFoundError(f"dataset split not found: {root}")
        return list(read_dataset(root))
    n = cfg["data.train"] if split == "train" else cfg["data.test"]
    return generate_split(SceneConfig.from_run_config(cfg), split, n)


def prepare(images) -> np.ndarray:
    """Stack (3, H, W) images in [0, 1] into a zero-centred batch."""
    return np.stack([np.asarray(im, dtype=np.float64) for im in images]) - PIXEL_MEAN


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainResult:
    store: ParamStore
    log: list[dict] = field(default_factory=list)
    iters: int = 0


def clip_gradients(store: ParamStore, max_norm: float) -> float:
    """Rescale all gradients so their global L2 norm is at most ``max_norm``."""
    norm = math.sqrt(sum(float(np.vdot(t.grad, t.grad)) for t in store.params.values()))
    if max_norm > 0 and norm > max_norm:
        s = max_norm / norm
        for t in store.params.values():
            t.grad *= s
    return norm


def learning_rate(cfg: RunConfig, it: int) -> float:
    """Linear warmup over ``train.warmup`` iterations, then the base rate,
    divided by 10 after ``lr_decay_at`` of the run."""
    lr = cfg["train.lr"]
    warm = cfg["train.warmup"]
    if it < warm:
        lr *= (it + 1) / warm
    if it >= int(cfg["train.lr_decay_at"] * cfg["train.iters"]):
        lr *= 0.1
    return lr


def batch_order(n: int, batch: int, iters: int, seed: int) -> list[np.ndarray]:
    """Epoch-wise shuffled minibatch indices plus a per-sample flip flag."""
    rng = np.random.default_rng([seed, 7])
    out, perm = [], np.zeros(0, dtype=np.intp)
    for _ in range(iters):
        if perm.size < batch:
            perm = np.concatenate([perm, rng.permutation(n)])
        out.append(perm[:batch])
        perm = perm[batch:]
    flips = rng.random((iters, batch)) < 0.5
    return list(zip(out, flips))


def flip_scene(image: np.ndarray, boxes: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    w = image.shape[-1]
    b = boxes.copy()
    b[:, [0, 2]] = w - boxes[:, [2, 0]]
    return image[..., ::-1], b


def train_rpn(cfg: RunConfig, scenes: list[AnnotatedScene], loss_log=None,
              checkpoint: str | Path | None = None) -> TrainResult:
    """Train the AR-RPN with momentum SGD on ``scenes``.

    ``loss_log`` (a writable text stream) receives one line of loss terms per
    iteration.  A non-finite loss aborts training; the parameters from the
    last finite iteration are written to ``checkpoint`` before raising.
    """
    if not scenes:
        raise ValueError("training set is empty")
    mcfg = ModelConfig.from_run_config(cfg)
    store = build_rpn(mcfg, cfg["seed"])
    weights = LossWeights.from_run_config(cfg)
    grid = grid_for(cfg, *scenes[0].image.shape[1:])
    opt = SGD(store, cfg["train.lr"], cfg["train.momentum"])
    result = TrainResult(store)
    last_good = store.copy_state()
    schedule = batch_order(len(scenes), cfg["train.batch"], cfg["train.iters"], cfg["seed"])
    header_written = False
    for it, (idx, flips) in enumerate(schedule):
        images, gts = [], []
        for i, f in zip(idx, flips):
            im, bx = scenes[i].image, scenes[i].boxes
            if f:
                im, bx = flip_scene(im, bx)
            images.append(im)
            gts.append(bx)
        with T.Tape() as tape:
            out = rpn_forward(T.Tensor(prepare(images)), store, mcfg, training=True)
            targets = targets_for(out, gts, grid, cfg)
            loss, parts = rpn_loss(out, targets, weights)
        if not all(math.isfinite(v) for v in parts.values()):
            store.load_state(last_good)
            if checkpoint is not None:
                store.save(checkpoint)
            raise TrainingDiverged(f"non-finite loss at iteration {it}: {parts}")
        last_good = store.copy_state()
        store.zero_grad()
        tape.backward(loss)
        gnorm = clip_gradients(store, cfg["train.clip"])
        opt.lr = learning_rate(cfg, it)
        opt.step()
        row = {"iter": it, **parts, "grad_norm": gnorm, "lr": opt.lr}
        result.log.append(row)
        if loss_log is not None:
            if not header_written:
                loss_log.write(" ".join(row) + "\n")
                header_written = True
            loss_log.write(" ".join(f"{v:.6g}" if isinstance(v, float) else str(v)
                                    for v in row.values()) + "\n")
        if it % 50 == 0:
            log.info("iter %d loss %.4f", it, parts["total"])
    result.iters = len(schedule)
    if checkpoint is not None:
        store.save(checkpoint)
    return result
