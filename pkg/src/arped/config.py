"""Flat ``key = value`` run configuration.

Every tunable used anywhere in the package has a default below; unknown keys
are rejected.  Values are Python literals (numbers, lists, booleans as
``true``/``false``) or bare strings.
"""

from __future__ import annotations

import ast
from pathlib import Path

# paper-scale channel settings; desk defaults are these divided by 8
WIDTHS_S = [64, 128, 256]
WIDTHS_M = [128, 256, 512]
WIDTHS_L = [256, 512, 512]

DEFAULTS: dict[str, object] = {
    "seed": 0,
    # synthetic data
    "data.dir": "",
    "data.image_size": 160,
    "data.train": 300,
    "data.test": 100,
    "data.count": [1, 4],
    "data.heights": [24, 96],
    "data.aspect": 0.41,
    "data.aspect_jitter": 0.04,
    "data.occlusion": 0.2,
    "data.clutter": 6,
    # network
    "backbone.widths": [8, 16, 32, 64, 128],
    "backbone.depths": [2, 2, 2, 2, 2],
    "phase2.target_stride": 3,
    "phase2.widths": [16, 32, 64],
    "phase3.target_stride": 4,
    "phase3.widths": [16, 32, 64],
    "phase4.target_stride": 4,
    "phase4.widths": [16, 32, 64],
    "resample.mode": "fused",
    "norm.enabled": True,
    "rpn.num_phases": 3,
    "rpn.pfe_width": 64,
    "rpn.lambda": [0.1, 0.1, 1.0],
    "rpn.lambda_bbox": 5.0,
    "rpn.lambda_seg": 1.0,
    "rpn.policies": [0.4, 0.5, 0.6, 0.7],
    "rpn.autoregressive": True,
    "rpn.bbox_policy": "0.4",
    # anchors and labels
    "anchors.heights": [24, 48, 96],
    "anchors.aspect": 0.41,
    "anchors.x_offsets": [0.0],
    "labels.bg_ceiling": 0.3,
    "labels.force_best_match": True,
    "labels.fg_weight": 10.0,
    # optimisation
    "train.iters": 2400,
    "train.batch": 2,
    "train.lr": 0.01,
    "train.momentum": 0.9,
    "train.lr_decay_at": 0.8,
    "train.clip": 10.0,
    "train.warmup": 100,
    # second stage
    "rcnn.enabled": False,
    "rcnn.z": 0.005,
    "rcnn.h": 0.7,
    "rcnn.fusion": "geo",
    "rcnn.crop": 32,
    "rcnn.widths": [16, 32, 32],
    "rcnn.hidden": 64,
    "rcnn.iters": 400,
    "rcnn.batch": 32,
    "rcnn.lr": 0.01,
    "rcnn.height_weighting": False,
    "rcnn.lambda_seg": 1.0,
    # inference / evaluation
    "eval.nms": 0.5,
    "eval.match_iou": 0.5,
    "eval.fppi_range": [0.01, 1.0],
    "eval.min_side": 2.0,
    "analyze.images": 4,
}

_FLAGS = {"true": True, "false": False, "yes": True, "no": False}


def parse_value(text: str):
    text = text.strip()
    low = text.lower()
    if low in _FLAGS:
        return _FLAGS[low]
    try:
        return ast.literal_eval(text)
    except (ValueError, SyntaxError):
        return text


def format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, str):
        return value
    return repr(value)


class ConfigError(ValueError):
    pass


class RunConfig(dict):
    """A dict of every config key; construction validates keys and types."""

    def __init__(self, overrides: dict | None = None):
        super().__init__(DEFAULTS)
        for key, value in (overrides or {}).items():
            self.set(key, value)

    def set(self, key: str, value) -> None:
        if key not in DEFAULTS:
            raise ConfigError(f"unknown config key {key!r}")
        if isinstance(value, str):
            value = value.strip() if isinstance(DEFAULTS[key], str) else parse_value(value)
        default = DEFAULTS[key]
        if isinstance(default, bool):
            if not isinstance(value, bool):
                raise ConfigError(f"{key} expects true/false, got {value!r}")
        elif isinstance(default, (int, float)) and not isinstance(default, bool):
            if not isinstance(value, (int, float)) or isinstance(value, bool):
                raise ConfigError(f"{key} expects a number, got {value!r}")
            if isinstance(default, int) and not isinstance(default, bool) and float(value) != int(value):
                raise ConfigError(f"{key} expects an integer, got {value!r}")
            value = type(default)(value)
        elif isinstance(default, list):
            if not isinstance(value, (list, tuple)):
                raise ConfigError(f"{key} expects a list, got {value!r}")
            value = list(value)
        self[key] = value

    def updated(self, **changes) -> "RunConfig":
        out = RunConfig(dict(self))
        for key, value in changes.items():
            out.set(key.replace("__", "."), value)
        return out

    def with_overrides(self, pairs) -> "RunConfig":
        out = RunConfig(dict(self))
        for pair in pairs:
            key, sep, value = pair.partition("=")
            if not sep:
                raise ConfigError(f"override {pair!r} is not of the form key=value")
            out.set(key.strip(), value)
        return out

    def dumps(self) -> str:
        return "".join(f"{k} = {format_value(self[k])}\n" for k in sorted(self))

    def write(self, path) -> None:
        Path(path).write_text(self.dumps())

    @classmethod
    def loads(cls, text: str, source: str = "<config>") -> "RunConfig":
        cfg = cls()
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, value = line.partition("=")
            if not sep:
                raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw!r}")
            try:
                cfg.set(key.strip(), value)
            except ConfigError as exc:
                raise ConfigError(f"{source}:{lineno}: {exc}") from None
        return cfg

    @classmethod
    def read(cls, path) -> "RunConfig":
        return cls.loads(Path(path).read_text(), str(path))

    def phase_widths(self, k: int) -> list[int]:
        return list(self[f"phase{k}.widths"])

    def policies(self) -> list[float]:
        pol = list(self["rpn.policies"])
        n = self["rpn.num_phases"]
        if len(pol) < n:
            raise ConfigError(f"rpn.policies lists {len(pol)} thresholds for {n} phases")
        return pol[:n]

    def lambdas(self) -> list[float]:
        """Per-phase loss weights; a list of another length keeps its first
        entry for every intermediate phase and its last for the final one."""
        lam = list(self["rpn.lambda"])
        n = self["rpn.num_phases"]
        if len(lam) == n:
            return lam
        return [lam[0]] * (n - 1) + [lam[-1]]
