"""Analytic multiply-accumulate counts per convolution layer.

A stride-s convolution costs ``out_h * out_w * out_c * in_c * k * k`` MACs,
counting taps that land on zero padding.  A fractionally strided
convolution costs ``in_h * in_w * in_c * out_c * k * k``: every input
element meets every kernel tap once.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from arped.backbone import level_stride
from arped.config import WIDTHS_L, WIDTHS_M, WIDTHS_S
from arped.deencoder import FUSED, DeEncoderConfig
from arped.rpn import ModelConfig
from arped.tensor import conv_out_size

# full-scale network: VGG-16 conv stack on 960x720 inputs, 9 anchors, 512-wide PFE
PAPER_EXTENT = (720, 960)
VGG16_WIDTHS = (64, 128, 256, 512, 512)
VGG16_DEPTHS = (2, 2, 3, 3, 3)
PAPER_TARGETS = {2: 3, 3: 4, 4: 4}
PAPER_ANCHORS = 9
WIDTH_PRESETS = {"S": WIDTHS_S, "M": WIDTHS_M, "L": WIDTHS_L}


@dataclass(frozen=True)
class LayerSpec:
    name: str
    kind: str  # "conv" or "tconv"
    in_c: int
    out_c: int
    k: int
    stride: int
    in_h: int
    in_w: int
    padding: int = 0

    @property
    def out_hw(self) -> tuple[int, int]:
        if self.kind == "tconv":
            return 2 * self.in_h, 2 * self.in_w
        return (conv_out_size(self.in_h, self.k, self.stride, self.padding),
                conv_out_size(self.in_w, self.k, self.stride, self.padding))

    @property
    def macs(self) -> int:
        if self.kind == "tconv":
            return self.in_h * self.in_w * self.in_c * self.out_c * self.k * self.k
        oh, ow = self.out_hw
        return oh * ow * self.out_c * self.in_c * self.k * self.k


@dataclass
class MacReport:
    layers: list[LayerSpec] = field(default_factory=list)

    @property
    def total(self) -> int:
        return sum(layer.macs for layer in self.layers)

    @property
    def giga(self) -> float:
        return self.total / 1e9

    def by_phase(self) -> dict[int, int]:
        out: dict[int, int] = {}
        for layer in self.layers:
            k = int(layer.name.split(".")[0].removeprefix("phase"))
            out[k] = out.get(k, 0) + layer.macs
        return out

    def to_text(self) -> str:
        lines = [f"{layer.name} {layer.kind} {layer.in_c}->{layer.out_c} k{layer.k} s{layer.stride} "
                 f"{layer.in_h}x{layer.in_w} {layer.macs}\n" for layer in self.layers]
        lines.append(f"total {self.total} ({self.giga:.4g} G)\n")
        return "".join(lines)


def network_layers(mcfg: ModelConfig, image_h: int, image_w: int, training: bool = False,
                   in_channels: int = 3) -> list[LayerSpec]:
    """Every convolution the RPN runs on a ``image_h`` x ``image_w`` input, in execution order."""
    if image_h % 16 or image_w % 16:
        raise ValueError(f"image extent {image_h}x{image_w} must be divisible by 16")
    layers: list[LayerSpec] = []

    def hw(i):
        return image_h // level_stride(i), image_w // level_stride(i)

    cin = in_channels
    for i, (c, depth) in enumerate(zip(mcfg.backbone_widths, mcfg.backbone_depths), start=1):
        for j in range(1, depth + 1):
            layers.append(LayerSpec(f"phase1.backbone.l{i}.conv{j}", "conv", cin, c, 3, 1, *hw(i), 1))
            cin = c
    widths = {i: c for i, c in enumerate(mcfg.backbone_widths, start=1)}
    predicting = mcfg.predicting_phases()
    a = mcfg.num_anchors
    for k in range(1, mcfg.num_phases + 1):
        if k > 1:
            d: DeEncoderConfig = mcfg.phases[k - 2]
            p = f"phase{k}"
            for i in range(d.n, d.target - 1, -1):
                layers.append(LayerSpec(f"{p}.td.lat{i}", "conv", widths[i], d.widths[i], 3, 1, *hw(i), 1))
                if i < d.n:
                    if d.mode == FUSED:
                        layers.append(LayerSpec(f"{p}.td.up{i}", "tconv", d.widths[i + 1], d.widths[i],
                                                4, 2, *hw(i + 1), 1))
                    else:
                        layers.append(LayerSpec(f"{p}.td.up{i}", "conv", d.widths[i + 1], d.widths[i],
                                                3, 1, *hw(i), 1))
            for i in range(d.target + 1, d.n + 1):
                layers.append(LayerSpec(f"{p}.bu.lat{i}", "conv", d.widths[i], d.widths[i], 3, 1, *hw(i), 1))
                if d.mode == FUSED:
                    layers.append(LayerSpec(f"{p}.bu.down{i}", "conv", d.widths[i - 1], d.widths[i],
                                            3, 2, *hw(i - 1), 1))
                else:
                    layers.append(LayerSpec(f"{p}.bu.down{i}", "conv", d.widths[i - 1], d.widths[i],
                                            3, 1, *hw(i), 1))
            if k == 2 and training:
                for i in (3, 4, 5):
                    if i in d.levels:
                        layers.append(LayerSpec(f"{p}.seg{i}", "conv", d.widths[i], 2, 1, 1, *hw(i)))
            widths = dict(d.widths)
        if k in predicting:
            h5, w5 = hw(5)
            layers.append(LayerSpec(f"phase{k}.pfe", "conv", mcfg.pfe_in(k), mcfg.pfe_width, 3, 1, h5, w5, 1))
            layers.append(LayerSpec(f"phase{k}.cls", "conv", mcfg.pfe_width, 2 * a, 1, 1, h5, w5))
    h5, w5 = hw(5)
    layers.append(LayerSpec(f"phase{mcfg.num_phases}.bbox", "conv", mcfg.pfe_width, 4 * a, 1, 1, h5, w5))
    return layers


def count_macs(mcfg: ModelConfig, image_h: int, image_w: int, training: bool = False) -> MacReport:
    return MacReport(network_layers(mcfg, image_h, image_w, training))


def paper_model(widths="M", num_phases: int = 3, mode: str = FUSED) -> ModelConfig:
    """Full-scale configuration: VGG-16 backbone and the named channel preset."""
    w = WIDTH_PRESETS[widths] if isinstance(widths, str) else list(widths)
    phases = tuple(DeEncoderConfig.from_list(k, PAPER_TARGETS.get(k, 4), w, mode=mode)
                   for k in range(2, num_phases + 1))
    return ModelConfig(VGG16_WIDTHS, VGG16_DEPTHS, phases, PAPER_ANCHORS, 512, True)


def ablation_table(extent=PAPER_EXTENT) -> list[tuple[int, str, float]]:
    """(N_k, width preset, GMACs) rows mirroring the phase/width ablation grid."""
    rows = [(n, "M", count_macs(paper_model("M", n), *extent).giga) for n in (1, 2)]
    rows += [(3, c, count_macs(paper_model(c, 3), *extent).giga) for c in ("S", "M", "L")]
    rows.append((4, "M", count_macs(paper_model("M", 4), *extent).giga))
    return rows
