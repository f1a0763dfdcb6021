"""Stackable decoder-encoder producing a phase's feature pyramid.

The top-down pathway decodes from the coarsest level to the target level::

    D_n = L_n,   D_i = d_i(D_{i+1}) + L_i

and the bottom-up pathway re-encodes back to the coarsest level::

    E_t = D_t,   E_i = e_i(E_{i-1}) + L'_i

``d_i`` / ``e_i`` are single re-sampling convolutions (fractionally strided
up, stride-2 down) in the fused mode, or bilinear resize + 3x3 convolution
in the two-step mode.  Laterals are 3x3 conv + BN + ReLU.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from arped import tensor as T
from arped.backbone import NUM_LEVELS, FeaturePyramid
from arped.params import ParamStore

FUSED, TWO_STEP = "fused", "two_step"


@dataclass(frozen=True)
class DeEncoderConfig:
    phase: int
    target: int
    widths: dict  # stride level -> channel width
    n: int = NUM_LEVELS
    mode: str = FUSED
    norm: bool = True

    def __post_init__(self):
        if not 3 <= self.target <= self.n:
            raise ValueError(f"target stride level must lie in [3, {self.n}], got {self.target}")
        missing = [i for i in self.levels if i not in self.widths]
        if missing:
            raise ValueError(f"phase {self.phase}: no channel width for levels {missing}")
        if any(self.widths[i] <= 0 for i in self.levels):
            raise ValueError("channel widths must be positive")
        if self.mode not in (FUSED, TWO_STEP):
            raise ValueError(f"unknown re-sampling mode {self.mode!r}")

    @property
    def levels(self) -> range:
        return range(self.target, self.n + 1)

    @classmethod
    def from_list(cls, phase: int, target: int, widths, n: int = NUM_LEVELS, **kw) -> "DeEncoderConfig":
        """``widths`` lists channel widths for the top ``len(widths)`` levels."""
        first = n - len(widths) + 1
        return cls(phase, target, {first + j: int(c) for j, c in enumerate(widths)}, n, **kw)


@dataclass
class DeEncoderState:
    lateral: dict = field(default_factory=dict)  # L_i
    decoded: dict = field(default_factory=dict)  # D_i
    lateral_up: dict = field(default_factory=dict)  # L'_i
    encoded: dict = field(default_factory=dict)  # E_i


def _p(cfg: DeEncoderConfig, part: str) -> str:
    return f"phase{cfg.phase}.{part}"


def init_deencoder(store: ParamStore, cfg: DeEncoderConfig, in_widths: dict) -> None:
    c = cfg.widths
    for i in cfg.levels:
        store.conv(_p(cfg, f"td.lat{i}"), in_widths[i], c[i], 3)
        if cfg.norm:
            store.norm(_p(cfg, f"td.lat{i}.bn"), c[i])
    for i in range(cfg.n - 1, cfg.target - 1, -1):
        if cfg.mode == FUSED:
            store.conv(_p(cfg, f"td.up{i}"), c[i + 1], c[i], 4, transposed=True)
        else:
            store.conv(_p(cfg, f"td.up{i}"), c[i + 1], c[i], 3)
    for i in range(cfg.target + 1, cfg.n + 1):
        store.conv(_p(cfg, f"bu.lat{i}"), c[i], c[i], 3)
        if cfg.norm:
            store.norm(_p(cfg, f"bu.lat{i}.bn"), c[i])
        store.conv(_p(cfg, f"bu.down{i}"), c[i - 1], c[i], 3)


def lateral(x: T.Tensor, store: ParamStore, name: str, norm: bool, training: bool) -> T.Tensor:
    y = T.conv2d(x, store[f"{name}.weight"], store[f"{name}.bias"], 1, 1)
    if norm:
        g, b = store[f"{name}.bn.scale"], store[f"{name}.bn.shift"]
        rm, rv = store.buffers[f"{name}.bn.running_mean"], store.buffers[f"{name}.bn.running_var"]
        y = T.batchnorm(y, g, b, rm, rv, training)
    return T.relu(y)


def upsample(x: T.Tensor, store: ParamStore, name: str, mode: str) -> T.Tensor:
    w, b = store[f"{name}.weight"], store[f"{name}.bias"]
    if mode == FUSED:
        y = T.tconv2d(x, w, b, padding=1)
    else:
        y = T.conv2d(T.resize_bilinear(x, 2 * x.shape[2], 2 * x.shape[3]), w, b, 1, 1)
    return T.relu(y)


def downsample(x: T.Tensor, store: ParamStore, name: str, mode: str) -> T.Tensor:
    w, b = store[f"{name}.weight"], store[f"{name}.bias"]
    if mode == FUSED:
        y = T.conv2d(x, w, b, 2, 1)
    else:
        y = T.conv2d(T.resize_bilinear(x, x.shape[2] // 2, x.shape[3] // 2), w, b, 1, 1)
    return T.relu(y)


def top_down(prev: FeaturePyramid, cfg: DeEncoderConfig, store: ParamStore, training: bool = False,
             state: DeEncoderState | None = None) -> dict:
    state = state if state is not None else DeEncoderState()
    for i in cfg.levels:
        if i not in prev.levels:
            raise KeyError(f"phase {cfg.phase} de-encoder needs stride level {i} of the previous "
                           f"pyramid (available {sorted(prev.levels)})")
    for i in range(cfg.n, cfg.target - 1, -1):
        state.lateral[i] = lateral(prev[i], store, _p(cfg, f"td.lat{i}"), cfg.norm, training)
        if i == cfg.n:
            state.decoded[i] = state.lateral[i]
        else:
            up = upsample(state.decoded[i + 1], store, _p(cfg, f"td.up{i}"), cfg.mode)
            state.decoded[i] = T.add(up, state.lateral[i])
    return state.decoded


def bottom_up(decoded: dict, cfg: DeEncoderConfig, store: ParamStore, training: bool = False,
              state: DeEncoderState | None = None) -> FeaturePyramid:
    state = state if state is not None else DeEncoderState()
    for i in cfg.levels:
        if i not in decoded:
            raise KeyError(f"phase {cfg.phase} bottom-up pathway is missing decoded level {i}")
    out = FeaturePyramid(phase=cfg.phase)
    state.encoded[cfg.target] = decoded[cfg.target]
    for i in range(cfg.target + 1, cfg.n + 1):
        state.lateral_up[i] = lateral(decoded[i], store, _p(cfg, f"bu.lat{i}"), cfg.norm, training)
        down = downsample(state.encoded[i - 1], store, _p(cfg, f"bu.down{i}"), cfg.mode)
        state.encoded[i] = T.add(down, state.lateral_up[i])
    out.levels.update(state.encoded)
    return out


def de_encode(prev: FeaturePyramid, cfg: DeEncoderConfig, store: ParamStore, training: bool = False,
              state: DeEncoderState | None = None) -> FeaturePyramid:
    state = state if state is not None else DeEncoderState()
    decoded = top_down(prev, cfg, store, training, state)
    return bottom_up(decoded, cfg, store, training, state)


def resample_footprint(mode: str, cin: int, cout: int, h: int, w: int, direction: str) -> dict:
    """Parameter and activation element counts of one re-sampling step.

    ``h`` x ``w`` is the input extent; activations count every tensor the step
    materialises (the resized intermediate plus the output for two-step).
    """
    oh, ow = (2 * h, 2 * w) if direction == "up" else (h // 2, w // 2)
    out = cout * oh * ow
    if mode == FUSED:
        k = 4 if direction == "up" else 3
        return {"params": cin * cout * k * k + cout, "activations": out}
    return {"params": cin * cout * 9 + cout, "activations": cin * oh * ow + out}
