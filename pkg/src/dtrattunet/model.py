"""Assembly of the dual-decoder hybrid segmentation network and its ablation variants.

The encoder runs two paths over the input image: a patch-token transformer
whose four tapped layers are reshaped and lifted by an upsampling ladder, and
a five-stage convolutional path that concatenates each lifted token map with
its max-pooled predecessor. Two parameter-disjoint attention-gated decoders
consume the same encoder bundle and emit infection and lung logits through
1x1 heads.

A model handle is safe for concurrent evaluation-mode inference; training
steps mutate parameters and norm statistics and need exclusive access.
"""

from __future__ import annotations

import json
from dataclasses import replace
from typing import NamedTuple

import torch
import torch.nn as nn

from .blocks import AttentionGate, PatchEmbed, ResBlock, TransformerLayer, UpResBlock, tokens_to_map, upsample2x
from .config import ConfigError, ModelConfig


class EncoderBundle(NamedTuple):
    """The five encoder maps at full, 1/2, 1/4, 1/8, and 1/16 resolution."""

    x1: torch.Tensor
    x2: torch.Tensor
    x3: torch.Tensor
    x4: torch.Tensor
    x5: torch.Tensor


class DualOutput(NamedTuple):
    """Full-resolution logits; ``lung`` is None when the second decoder is disabled."""

    infection: torch.Tensor
    lung: torch.Tensor | None


class TransformerPath(nn.Module):
    """Patch tokens through a stack of transformer layers, reading four taps.

    All ``depth`` layers run exactly once per forward pass; taps are reads of
    intermediate outputs, never re-runs, and may repeat a layer.
    """

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.tap_layers = config.tap_layers
        self.patch_embed = PatchEmbed(
            config.input_channels, config.embed_dim, config.patch_size, config.num_patches
        )
        self.layers = nn.ModuleList(
            TransformerLayer(config.embed_dim, config.heads, config.mlp_dim)
            for _ in range(config.depth)
        )

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor, torch.Tensor]:
        z = self.patch_embed(x)
        outputs = {}
        for index, layer in enumerate(self.layers, start=1):
            z = layer(z)
            if index in self.tap_layers:
                outputs[index] = z
        return tuple(outputs[t] for t in self.tap_layers)


class TransformerLadder(nn.Module):
    """Reshape each tapped token sequence and lift it to its encoder stage size.

    The first three branches use three, two, and one UpResBlocks; the deepest
    branch needs no upsampling and uses a plain ResBlock. With patch sizes
    above 16 every branch simply gains extra doublings.
    """

    def __init__(self, config: ModelConfig):
        super().__init__()
        branches = []
        for ups, width in zip(config.ladder_upsample_counts, config.injection_channels):
            stages: list[nn.Module] = []
            in_ch = config.embed_dim
            if ups == 0:
                stages.append(ResBlock(in_ch, width))
            else:
                for _ in range(ups):
                    stages.append(UpResBlock(in_ch, width))
                    in_ch = width
            branches.append(nn.Sequential(*stages))
        self.branches = nn.ModuleList(branches)

    def forward(self, taps) -> tuple[torch.Tensor, ...]:
        return tuple(branch(tokens_to_map(z)) for branch, z in zip(self.branches, taps))


class FusionEncoder(nn.Module):
    """Five-stage convolutional encoder, optionally fused with ladder outputs.

    Stage 1 is a ResBlock on the image; each later stage max-pools the
    previous map, concatenates the matching injected token map when the
    transformer path is enabled, and applies a ResBlock.
    """

    def __init__(self, config: ModelConfig):
        super().__init__()
        widths = config.encoder_channels
        inject = config.injection_channels if config.use_transformer_encoder else (0, 0, 0, 0)
        self.pool = nn.MaxPool2d(2)
        self.stage1 = ResBlock(config.input_channels, widths[0])
        self.stages = nn.ModuleList(
            ResBlock(widths[i] + inject[i], widths[i + 1]) for i in range(4)
        )

    def forward(self, x: torch.Tensor, injections=None) -> EncoderBundle:
        maps = [self.stage1(x)]
        for i, stage in enumerate(self.stages):
            pooled = self.pool(maps[-1])
            if injections is not None:
                pooled = torch.cat([injections[i], pooled], dim=1)
            maps.append(stage(pooled))
        return EncoderBundle(*maps)


class DecoderStage(nn.Module):
    """One expansion step: upsample the deeper map, gate the skip, fuse with a ResBlock.

    Without attention gates the raw skip is concatenated instead, so shapes
    are identical across the two variants.
    """

    def __init__(self, skip_channels: int, below_channels: int, out_channels: int, use_attention_gate: bool):
        super().__init__()
        self.gate = AttentionGate(skip_channels, below_channels) if use_attention_gate else None
        self.fuse = ResBlock(skip_channels + below_channels, out_channels)

    def forward(self, skip: torch.Tensor, below: torch.Tensor) -> torch.Tensor:
        up = upsample2x(below)
        gated = self.gate(skip, up) if self.gate is not None else skip
        return self.fuse(torch.cat([gated, up], dim=1))


class Decoder(nn.Module):
    """Four-stage expansion path from the bottleneck back to full resolution.

    The first gating signal is the upsampled bottleneck itself, which also
    serves as the concatenation operand of that stage.
    """

    def __init__(self, config: ModelConfig):
        super().__init__()
        widths = config.encoder_channels
        self.stages = nn.ModuleList(
            DecoderStage(widths[i], widths[i + 1], widths[i], config.use_attention_gates)
            for i in reversed(range(4))
        )

    def forward(self, bundle: EncoderBundle) -> torch.Tensor:
        skips = (bundle.x4, bundle.x3, bundle.x2, bundle.x1)
        current = bundle.x5
        for stage, skip in zip(self.stages, skips):
            current = stage(skip, current)
        return current


class DTrAttUnet(nn.Module):
    """Compound transformer-convolutional encoder with dual attention-gated decoders.

    The three ablation toggles in the config remove the attention gates, the
    second (lung) decoder, or the whole transformer path without changing any
    output shape.
    """

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        if config.use_transformer_encoder:
            self.transformer = TransformerPath(config)
            self.ladder = TransformerLadder(config)
        else:
            self.transformer = None
            self.ladder = None
        self.encoder = FusionEncoder(config)
        self.infection_decoder = Decoder(config)
        self.infection_head = nn.Conv2d(config.encoder_channels[0], config.num_infection_classes, 1)
        if config.use_dual_decoder:
            self.lung_decoder = Decoder(config)
            self.lung_head = nn.Conv2d(config.encoder_channels[0], 1, 1)
        else:
            self.lung_decoder = None
            self.lung_head = None
        if config.pretrained_transformer:
            self.load_pretrained_transformer(config.pretrained_transformer)

    def load_pretrained_transformer(self, path: str) -> None:
        if self.transformer is None:
            raise ConfigError("cannot load transformer weights: transformer path is disabled")
        state = torch.load(path, map_location="cpu", weights_only=True)
        self.transformer.load_state_dict(state)

    def encode(self, x: torch.Tensor) -> EncoderBundle:
        injections = None
        if self.transformer is not None:
            injections = self.ladder(self.transformer(x))
        return self.encoder(x, injections)

    def forward(self, x: torch.Tensor) -> DualOutput:
        b, c, h, w = x.shape
        if c != self.config.input_channels or h != self.config.image_size or w != self.config.image_size:
            raise ValueError(
                f"expected input {self.config.input_channels}x{self.config.image_size}"
                f"x{self.config.image_size}, got {c}x{h}x{w}"
            )
        bundle = self.encode(x)
        infection = self.infection_head(self.infection_decoder(bundle))
        lung = None
        if self.lung_decoder is not None:
            lung = self.lung_head(self.lung_decoder(bundle))
        return DualOutput(infection, lung)


# Flag triples are (attention gates, dual decoder, transformer encoder).
VARIANT_FLAGS: dict[str, tuple[bool, bool, bool]] = {
    "unet": (False, False, False),
    "attunet": (True, False, False),
    "trunet": (False, False, True),
    "d-unet": (False, True, False),
    "d-attunet": (True, True, False),
    "trattunet": (True, False, True),
    "d-trunet": (False, True, True),
    "d-trattunet": (True, True, True),
}


def variant_name(config: ModelConfig) -> str:
    flags = (config.use_attention_gates, config.use_dual_decoder, config.use_transformer_encoder)
    for name, candidate in VARIANT_FLAGS.items():
        if candidate == flags:
            return name
    raise AssertionError("unreachable: all eight flag combinations are named")


def config_for_variant(name: str, base: ModelConfig) -> ModelConfig:
    try:
        ag, dd, trec = VARIANT_FLAGS[name.lower()]
    except KeyError:
        raise ConfigError(
            f"unknown variant {name!r}, expected one of {sorted(VARIANT_FLAGS)}"
        ) from None
    return replace(base, use_attention_gates=ag, use_dual_decoder=dd, use_transformer_encoder=trec)


def build_variant(config: ModelConfig, seed: int | None = None) -> DTrAttUnet:
    """Construct a model; passing a seed makes the initialization reproducible."""
    if seed is not None:
        torch.manual_seed(seed)
    return DTrAttUnet(config)


def layer_manifest(model: nn.Module) -> list[dict]:
    """Per-parameter manifest (name path, shape, count) for diffing variants."""
    entries = [
        {"name": name, "shape": list(p.shape), "parameters": p.numel()}
        for name, p in model.named_parameters()
    ]
    entries.append(
        {"name": "TOTAL", "shape": [], "parameters": sum(e["parameters"] for e in entries)}
    )
    return entries


def manifest_text(entries: list[dict]) -> str:
    width = max(len(e["name"]) for e in entries)
    lines = [
        f"{e['name']:<{width}}  {str(tuple(e['shape'])):<20}  {e['parameters']}"
        for e in entries
    ]
    return "\n".join(lines)


def manifest_json(entries: list[dict]) -> str:
    return json.dumps(entries, indent=2)
