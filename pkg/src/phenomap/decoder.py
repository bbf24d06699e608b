"""Versatile decoder: multi-source skip fusion into a full-resolution map.

Three upsampling layers walk back up the encoder pyramid. Layer j
doubles the working grid, pulls in every source's stage-(4-j) skip
(time-packed into channels and bilinearly resized onto the finest
source's grid), concatenates along channels, and fuses with two 3x3
convolutions around a batch-norm + rectifier. A 1x1 classification conv
and a final x4 upsample (bilinear by default, learned transposed conv
optionally) recover the input resolution.

Because conv kernels need fixed channel counts while the encoder's
temporal lengths vary with clip length, skips are linearly resized
along time to the per-stage lengths implied by
``decoder_reference_frames`` before packing; at the reference length
this resize is an exact identity.

Auxiliary feature maps (e.g. spatial priors from an external CNN) can
be injected at a configured layer, bypassing the time-channel packing:
they are bilinearly resized to that layer's grid and concatenated.
"""

from __future__ import annotations

import math
from typing import Dict, List, Mapping, Optional, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from .backbone import stage_shapes
from .config import ModelConfig, SourceSpec


def rearrange_time_channels(x: torch.Tensor) -> torch.Tensor:
    """Pack time into channels, time-major: out[.., h, w, t*C + c] = x[.., t, h, w, c].

    ``[T, H, W, C]`` -> ``[H, W, T*C]`` (or batched ``[B, ...]``); a pure
    index permutation, inverted exactly by :func:`unrearrange_time_channels`.
    """
    if x.ndim == 4:
        T, H, W, C = x.shape
        return x.permute(1, 2, 0, 3).reshape(H, W, T * C)
    if x.ndim == 5:
        B, T, H, W, C = x.shape
        return x.permute(0, 2, 3, 1, 4).reshape(B, H, W, T * C)
    raise ValueError(f"expected 4-d or 5-d stage features, got shape {tuple(x.shape)}")


def unrearrange_time_channels(x: torch.Tensor, frames: int) -> torch.Tensor:
    """Inverse of :func:`rearrange_time_channels`."""
    if x.ndim == 3:
        H, W, TC = x.shape
        return x.reshape(H, W, frames, TC // frames).permute(2, 0, 1, 3)
    if x.ndim == 4:
        B, H, W, TC = x.shape
        return x.reshape(B, H, W, frames, TC // frames).permute(0, 3, 1, 2, 4)
    raise ValueError(f"expected 3-d or 4-d packed features, got shape {tuple(x.shape)}")


def resize_frames(x: torch.Tensor, frames: int) -> torch.Tensor:
    """Linearly resample ``[B, T, H, W, C]`` along time to ``frames`` steps.

    Identity when T already matches (returned untouched, bit-exact).
    """
    B, T, H, W, C = x.shape
    if T == frames:
        return x
    flat = x.permute(0, 2, 3, 4, 1).reshape(B, H * W * C, T)
    flat = F.interpolate(flat, size=frames, mode="linear", align_corners=True)
    return flat.reshape(B, H, W, C, frames).permute(0, 4, 1, 2, 3)


def _to_nchw(x: torch.Tensor) -> torch.Tensor:
    return x.permute(0, 3, 1, 2)


class FusionBlock(nn.Module):
    """Two 3x3 convs with one batch-norm and rectifier between."""

    def __init__(self, in_channels: int, out_channels: int):
        super().__init__()
        self.conv1 = nn.Conv2d(in_channels, out_channels, kernel_size=3, padding=1)
        self.bn = nn.BatchNorm2d(out_channels)
        self.act = nn.ReLU(inplace=True)
        self.conv2 = nn.Conv2d(out_channels, out_channels, kernel_size=3, padding=1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.conv2(self.act(self.bn(self.conv1(x))))


class FusionDecoder(nn.Module):
    """Fuses per-source encoder pyramids into per-pixel class logits.

    Deterministic in inference mode (batch norm uses running
    statistics); stateless across batch items, so parallel inference
    over a frozen checkpoint is safe.
    """

    def __init__(
        self,
        cfg: ModelConfig,
        sources: Sequence[SourceSpec],
        num_classes: int,
    ):
        super().__init__()
        if not sources:
            raise ValueError("decoder needs at least one source")
        if num_classes < 2:
            raise ValueError(f"num_classes must be >= 2, got {num_classes}")
        self.cfg = cfg
        self.num_classes = num_classes
        self.source_names = [s.name for s in sources]
        ref = cfg.decoder_reference_frames
        # Per-source reference temporal lengths per stage; spatial extent of the
        # reference shapes is irrelevant here, only T_i and C_i feed the channel math.
        self.reference_frames: Dict[str, List[int]] = {}
        for s in sources:
            shapes = stage_shapes(cfg, ref, s.tile_size, s.tile_size, s.temporal_patch_for(ref), s.spatial_patch)
            self.reference_frames[s.name] = [t for (t, _, _, _) in shapes]

        channels = cfg.stage_channels
        u0 = sum(self.reference_frames[n][3] * channels[3] for n in self.source_names)
        self.layer_in_channels = []
        self.layers = nn.ModuleList()
        prev = u0
        for j in (1, 2, 3):
            skip = sum(self.reference_frames[n][3 - j] * channels[3 - j] for n in self.source_names)
            in_ch = prev + skip + (cfg.aux_channels if j == cfg.aux_layer else 0)
            out_ch = cfg.decoder_channels[j - 1]
            self.layer_in_channels.append(in_ch)
            self.layers.append(FusionBlock(in_ch, out_ch))
            prev = out_ch
        self.classifier = nn.Conv2d(prev, num_classes, kernel_size=1)
        if cfg.learned_upsample:
            self.upsample = nn.ConvTranspose2d(num_classes, num_classes, kernel_size=4, stride=4)
        else:
            self.upsample = None

    def _packed(self, feats: torch.Tensor, source: str, stage: int) -> torch.Tensor:
        """Stage features -> NCHW with time packed into channels at the reference length."""
        ref_t = self.reference_frames[source][stage - 1]
        return _to_nchw(rearrange_time_channels(resize_frames(feats, ref_t)))

    def forward(
        self,
        skips: Mapping[str, Sequence[torch.Tensor]],
        aux: Optional[torch.Tensor] = None,
    ) -> torch.Tensor:
        """Per-source stage outputs -> logits ``[B, num_classes, H, W]``.

        ``skips[source]`` holds the four ``[B, T_i, H_i, W_i, C_i]``
        stage outputs; the target grid at each layer is the finest
        source's (largest stage-4 grid). ``aux`` is an optional
        ``[B, C_a, H_a, W_a]`` map injected at the configured layer.
        """
        missing = [n for n in self.source_names if n not in skips]
        if missing:
            raise ValueError(f"missing encoder outputs for sources {missing}")
        if aux is None and self.cfg.aux_channels:
            raise ValueError(f"decoder configured for {self.cfg.aux_channels} auxiliary channels but none given")
        if aux is not None and aux.shape[1] != self.cfg.aux_channels:
            raise ValueError(f"auxiliary features have {aux.shape[1]} channels, configured {self.cfg.aux_channels}")

        fine = max(self.source_names, key=lambda n: skips[n][3].shape[2])
        grid = tuple(skips[fine][3].shape[2:4])
        parts = []
        for name in self.source_names:
            packed = self._packed(skips[name][3], name, 4)
            if tuple(packed.shape[2:]) != grid:
                packed = F.interpolate(packed, size=grid, mode="bilinear", align_corners=False)
            parts.append(packed)
        u = torch.cat(parts, dim=1)

        for j, layer in enumerate(self.layers, start=1):
            grid = tuple(skips[fine][3 - j].shape[2:4])  # (H, W) of the fine stage-(4-j) output
            u = F.interpolate(u, size=grid, mode="bilinear", align_corners=False)
            parts = [u]
            for name in self.source_names:
                packed = self._packed(skips[name][3 - j], name, 4 - j)
                if tuple(packed.shape[2:]) != grid:
                    packed = F.interpolate(packed, size=grid, mode="bilinear", align_corners=False)
                parts.append(packed)
            if j == self.cfg.aux_layer and aux is not None:
                parts.append(F.interpolate(aux, size=grid, mode="bilinear", align_corners=False))
            u = layer(torch.cat(parts, dim=1))

        logits = self.classifier(u)
        if self.upsample is not None:
            return self.upsample(logits)
        H, W = logits.shape[2] * 4, logits.shape[3] * 4
        return F.interpolate(logits, size=(H, W), mode="bilinear", align_corners=False)


class MappingModel(nn.Module):
    """Encoder + decoder: per-source clips in, per-pixel class logits out."""

    def __init__(self, encoder, decoder: FusionDecoder):
        super().__init__()
        self.encoder = encoder
        self.decoder = decoder

    def forward(self, clips: Mapping[str, torch.Tensor], aux: Optional[torch.Tensor] = None) -> torch.Tensor:
        skips = {name: self.encoder(clip, name) for name, clip in clips.items()}
        return self.decoder(skips, aux=aux)


def ce_loss_hard_mining(
    logits: torch.Tensor,
    labels: torch.Tensor,
    keep_fraction: float = 0.25,
    min_kept: int = 4096,
    ignore_index: int = 255,
) -> torch.Tensor:
    """Cross-entropy over the hardest pixels only.

    Per-pixel losses are ranked and the mean over the top
    ``max(ceil(keep_fraction * P), min_kept)`` pixels returned (capped at
    the P non-ignored pixels; ``keep_fraction=1`` is plain mean CE).
    """
    if not 0.0 < keep_fraction <= 1.0:
        raise ValueError(f"keep_fraction must be in (0, 1], got {keep_fraction}")
    if logits.ndim == 3:
        logits = logits.unsqueeze(0)
        labels = labels.unsqueeze(0)
    if logits.ndim != 4 or labels.ndim != 3:
        raise ValueError(f"expected logits [B, K, H, W] and labels [B, H, W], got {tuple(logits.shape)} / {tuple(labels.shape)}")
    labels = labels.long()
    num_classes = logits.shape[1]
    valid = labels != ignore_index
    if not bool(valid.any()):
        raise ValueError("all pixels carry the ignore value; loss undefined")
    observed_max = int(labels[valid].max())
    if observed_max >= num_classes:
        raise ValueError(f"labels contain class {observed_max} but logits cover only {num_classes} classes")
    pixel_loss = F.cross_entropy(logits, labels, reduction="none", ignore_index=ignore_index)
    flat = pixel_loss[valid].reshape(-1)
    P = flat.numel()
    kept = min(P, max(math.ceil(keep_fraction * P), min_kept))
    top, _ = torch.topk(flat, kept)
    return top.mean()
