"""Deterministic synthetic street scenes with pedestrian boxes.

Scenes are a pure function of ``(seed, index)``.  Pedestrians are upright
figures (head, torso, two legs split by a gap) on a textured background
with rectangular clutter and optional occluders covering the lower body.
Images are quantised to 8 bits so in-memory scenes equal their on-disk copies.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from arped.targets import iou_matrix
from arped.tensor import bilinear_matrix

log = logging.getLogger(__name__)

TEST_OFFSET = 1_000_000


@dataclass(frozen=True)
class SceneConfig:
    size: int = 160
    count: tuple[int, int] = (1, 4)
    heights: tuple[float, float] = (24, 96)
    aspect: float = 0.41
    aspect_jitter: float = 0.04
    occlusion: float = 0.2
    clutter: int = 6
    seed: int = 0
    max_overlap: float = 0.3
    retries: int = 50

    def __post_init__(self):
        if self.count[0] > self.count[1] or self.heights[0] > self.heights[1]:
            raise ValueError("scene config ranges must be non-empty")
        if self.heights[1] > self.size:
            raise ValueError("pedestrian heights exceed the image extent")

    @classmethod
    def from_run_config(cls, cfg) -> "SceneConfig":
        return cls(size=cfg["data.image_size"], count=tuple(cfg["data.count"]),
                   heights=tuple(cfg["data.heights"]), aspect=cfg["data.aspect"],
                   aspect_jitter=cfg["data.aspect_jitter"], occlusion=cfg["data.occlusion"],
                   clutter=cfg["data.clutter"], seed=cfg["seed"])


@dataclass
class AnnotatedScene:
    image: np.ndarray  # (3, H, W) in [0, 1]
    boxes: np.ndarray  # (n, 4) x1 y1 x2 y2
    occlusion: np.ndarray  # (n,)
    index: int = 0
    flagged: bool = False  # fewer pedestrians placed than requested
    meta: dict = field(default_factory=dict)


def _ellipse(yy, xx, cy, cx, ry, rx):
    return ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0


def _paint(img, mask, color, rng, grain=0.06):
    if not mask.any():
        return
    n = int(mask.sum())
    tex = 1.0 + grain * rng.standard_normal(n)
    for c in range(3):
        img[c][mask] = np.clip(color[c] * tex, 0, 1)


def _background(cfg: SceneConfig, rng) -> np.ndarray:
    s = cfg.size
    base = rng.uniform(0.25, 0.7, size=3)
    ramp = np.linspace(-0.15, 0.15, s)[:, None] * rng.uniform(-1, 1)
    coarse = rng.standard_normal((3, s // 12, s // 12)) * 0.08
    m = bilinear_matrix(s // 12, s)
    up = np.einsum("oh,chw,pw->cop", m, coarse, m)
    img = base[:, None, None] + ramp[None] + up + 0.03 * rng.standard_normal((3, s, s))
    yy, xx = np.mgrid[0:s, 0:s]
    for _ in range(rng.poisson(cfg.clutter)):
        kind = rng.integers(3)
        if kind == 0:  # thin pole
            w, h = rng.uniform(3, 8), rng.uniform(30, 120)
        elif kind == 1:  # wide block
            w, h = rng.uniform(20, 60), rng.uniform(10, 40)
        else:  # squarish blob
            w = h = rng.uniform(8, 30)
        x0, y0 = rng.uniform(-w / 2, s - w / 2), rng.uniform(-h / 2, s - h / 2)
        mask = (xx >= x0) & (xx < x0 + w) & (yy >= y0) & (yy < y0 + h)
        _paint(img, mask, rng.uniform(0.05, 0.95, size=3), rng)
    return img


def _draw_pedestrian(img, box, rng):
    x1, y1, x2, y2 = box
    w, h = x2 - x1, y2 - y1
    s = img.shape[1]
    yy, xx = np.mgrid[0:s, 0:s] + 0.5
    cx = (x1 + x2) / 2
    head = _ellipse(yy, xx, y1 + 0.09 * h, cx, 0.09 * h, 0.26 * w)
    torso = (np.abs(xx - cx) <= 0.5 * w) & (yy >= y1 + 0.17 * h) & (yy < y1 + 0.56 * h)
    # rounded shoulders
    torso &= ~((yy < y1 + 0.24 * h) & (np.abs(xx - cx) > 0.5 * w - 0.07 * h + (yy - y1 - 0.17 * h)))
    gap = max(0.06 * w, 0.5)
    legs = (yy >= y1 + 0.56 * h) & (yy < y2) & (np.abs(xx - cx) <= 0.42 * w) & (np.abs(xx - cx) >= gap)
    skin = rng.uniform([0.55, 0.4, 0.3], [0.95, 0.75, 0.6])
    shirt = rng.uniform(0.0, 1.0, size=3)
    trousers = rng.uniform(0.0, 0.5, size=3)
    _paint(img, head, skin, rng)
    _paint(img, torso, shirt, rng)
    _paint(img, legs, trousers, rng)


def generate_scene(cfg: SceneConfig, index: int) -> AnnotatedScene:
    rng = np.random.default_rng([cfg.seed, index])
    img = _background(cfg, rng)
    want = int(rng.integers(cfg.count[0], cfg.count[1] + 1))
    boxes: list[list[float]] = []
    for _ in range(want):
        for _attempt in range(cfg.retries):
            h = float(np.round(rng.uniform(*cfg.heights)))
            aspect = cfg.aspect + rng.uniform(-cfg.aspect_jitter, cfg.aspect_jitter)
            w = max(2.0, float(np.round(h * aspect)))
            x1 = float(rng.integers(0, cfg.size - int(w) + 1))
            y1 = float(rng.integers(0, cfg.size - int(h) + 1))
            cand = [x1, y1, x1 + w, y1 + h]
            if boxes and iou_matrix([cand], boxes).max() > cfg.max_overlap:
                continue
            boxes.append(cand)
            break
    # far-to-near painter order: smaller (farther) figures first
    boxes.sort(key=lambda b: b[3])
    occ = np.zeros(len(boxes))
    for i, b in enumerate(boxes):
        _draw_pedestrian(img, b, rng)
        if rng.random() < cfg.occlusion:
            x1, y1, x2, y2 = b
            h = y2 - y1
            top = y2 - h * rng.uniform(0.2, 0.5)
            ox1 = x1 - rng.uniform(0, 0.5) * (x2 - x1)
            ox2 = x2 + rng.uniform(0, 0.5) * (x2 - x1)
            s = cfg.size
            yy, xx = np.mgrid[0:s, 0:s] + 0.5
            mask = (yy >= top) & (yy < y2 + 2) & (xx >= ox1) & (xx < ox2)
            _paint(img, mask, rng.uniform(0.1, 0.9, size=3), rng)
            occ[i] = (y2 - max(top, y1)) / h
    img = np.round(np.clip(img, 0, 1) * 255) / 255
    flagged = len(boxes) < want
    if flagged:
        log.debug("scene %d: placed %d of %d pedestrians", index, len(boxes), want)
    return AnnotatedScene(img, np.array(boxes, dtype=np.float64).reshape(-1, 4), occ, index, flagged)


def split_indices(split: str, n: int) -> range:
    if split == "train":
        return range(n)
    if split == "test":
        return range(TEST_OFFSET, TEST_OFFSET + n)
    raise ValueError(f"unknown split {split!r}")


def generate_split(cfg: SceneConfig, split: str, n: int) -> list[AnnotatedScene]:
    return [generate_scene(cfg, i) for i in split_indices(split, n)]


# ---------------------------------------------------------------------------
# on-disk layout: images/NNNN.ppm, labels/NNNN.txt, meta.cfg
# ---------------------------------------------------------------------------

def write_ppm(path, image: np.ndarray) -> None:
    """Binary P6 pixmap from a (3, H, W) float image in [0, 1] or uint8."""
    arr = image
    if arr.dtype != np.uint8:
        arr = np.round(np.clip(arr, 0, 1) * 255).astype(np.uint8)
    _, h, w = arr.shape
    header = f"P6\n{w} {h}\n255\n".encode("ascii")
    Path(path).write_bytes(header + arr.transpose(1, 2, 0).tobytes())


def read_ppm(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    fields, pos = [], 0
    while len(fields) < 4:
        while buf[pos:pos + 1].isspace():
            pos += 1
        if buf[pos:pos + 1] == b"#":
            pos = buf.index(b"\n", pos) + 1
            continue
        end = pos
        while not buf[end:end + 1].isspace():
            end += 1
        fields.append(buf[pos:end])
        pos = end
    if fields[0] != b"P6":
        raise ValueError(f"{path}: not a binary P6 pixmap")
    w, h, maxval = (int(f) for f in fields[1:])
    if maxval != 255:
        raise ValueError(f"{path}: only 8-bit pixmaps are supported")
    pos += 1
    arr = np.frombuffer(buf, dtype=np.uint8, count=w * h * 3, offset=pos)
    return arr.reshape(h, w, 3).transpose(2, 0, 1).astype(np.float64) / 255


def write_dataset(root, scenes, meta: dict | None = None) -> None:
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "labels").mkdir(parents=True, exist_ok=True)
    for n, scene in enumerate(scenes):
        write_ppm(root / "images" / f"{n:04d}.ppm", scene.image)
        lines = [f"{b[0]!r} {b[1]!r} {b[2]!r} {b[3]!r} {o!r}\n"
                 for b, o in zip(scene.boxes.tolist(), scene.occlusion.tolist())]
        (root / "labels" / f"{n:04d}.txt").write_text("".join(lines))
    meta = dict(meta or {})
    meta["count"] = len(scenes) if hasattr(scenes, "__len__") else n + 1
    (root / "meta.cfg").write_text("".join(f"{k} = {v}\n" for k, v in sorted(meta.items())))


def read_labels(path) -> tuple[np.ndarray, np.ndarray]:
    boxes, occ = [], []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split()
        try:
            if len(parts) != 5:
                raise ValueError
            vals = [float(p) for p in parts]
        except ValueError:
            raise ValueError(f"{path}:{lineno}: malformed annotation line {line!r} "
                             f"(expected 'x1 y1 x2 y2 occlusion_fraction')") from None
        if not (vals[2] > vals[0] and vals[3] > vals[1]):
            raise ValueError(f"{path}:{lineno}: box has non-positive extent")
        boxes.append(vals[:4])
        occ.append(vals[4])
    return np.array(boxes, dtype=np.float64).reshape(-1, 4), np.array(occ, dtype=np.float64)


def read_dataset(root) -> Iterator[AnnotatedScene]:
    root = Path(root)
    images = sorted((root / "images").glob("*.ppm")) if (root / "images").is_dir() else []
    for n, img_path in enumerate(images):
        boxes, occ = read_labels(root / "labels" / f"{img_path.stem}.txt")
        yield AnnotatedScene(read_ppm(img_path), boxes, occ, n)
