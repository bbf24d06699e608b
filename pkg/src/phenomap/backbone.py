"""Hierarchical 3-D shifted-window encoder with synchronized merging.

Four stages of windowed self-attention over ``[T, H, W, C]`` feature
grids. Each source gets its own 3-D patch embedding; all other
parameters (blocks, merges) are one shared set, so the encoder acts as
a single model across modalities.

Between stages, patch merging reduces the grid *synchronously* in space
and time: the spatial axes are gathered as D x D strided sub-grids and
concatenated along channels, while the temporal axis is mean-pooled
over windows of S consecutive frames (a trailing partial window is
averaged over its remaining frames, so no frame is dropped and T never
falls below 1). A learned linear projection then doubles the channel
width. Disabling ``temporal_downsampling`` skips the temporal mean and
leaves T untouched through all merges.

Shape law, with ``s1``/``p`` the first-stage temporal/spatial patch and
``S_i``/``D_i`` the merge factors::

    T_1 = floor(T / s1)      H_1 = H / p         C_1 = embed_dim
    T_{i+1} = ceil(T_i/S_i)  H_{i+1} = H_i/D_i   C_{i+1} = 2 C_i

(temporal ceil collapses to floor whenever S_i divides T_i; with
downsampling disabled T_{i+1} = T_i).
"""

from __future__ import annotations

from functools import lru_cache
from typing import Optional, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import SEQ_MAX, SEQ_MIN, ModelConfig, SourceSpec
from .structures import StageFeatures

TEMPORAL_PATCHES = (2, 4)


def temporal_patch_size(T: int, threshold: int = 16) -> int:
    """First-stage temporal patch for a clip of ``T`` frames.

    Short clips (below ``threshold``) use a patch of 2, longer ones 4.
    The boundary length itself takes 4 so the default pretraining length
    16 reduces 16 -> 4 -> 2 -> 1 -> 1 across the four stages.
    """
    if not SEQ_MIN <= T <= SEQ_MAX:
        raise ValueError(f"sequence length T={T} outside supported range [{SEQ_MIN}, {SEQ_MAX}]")
    return 2 if T < threshold else 4


def merged_length(T: int, factor: int) -> int:
    """Temporal length after mean pooling with a preserved partial window."""
    if factor <= 1:
        return T
    return max(1, -(-T // factor))  # ceil(T / factor)


def stage_shapes(
    cfg: ModelConfig,
    T: int,
    H: int,
    W: int,
    temporal_patch: int,
    spatial_patch: int = 4,
) -> list:
    """Closed-form per-stage ``(T_i, H_i, W_i, C_i)`` for the shape law above."""
    if H % spatial_patch or W % spatial_patch:
        raise ValueError(f"spatial dims ({H}, {W}) not divisible by the spatial patch {spatial_patch}")
    if T < temporal_patch:
        raise ValueError(f"sequence length {T} shorter than the temporal patch {temporal_patch}")
    t, h, w = T // temporal_patch, H // spatial_patch, W // spatial_patch
    shapes = [(t, h, w, cfg.stage_channels[0])]
    for i in range(3):
        d = cfg.spatial_merge_factors[i]
        s = cfg.temporal_merge_factors[i]
        if h % d or w % d:
            raise ValueError(f"stage-{i + 1} grid ({h}, {w}) not divisible by the merge factor {d}")
        t = merged_length(t, s) if cfg.temporal_downsampling else t
        h, w = h // d, w // d
        shapes.append((t, h, w, cfg.stage_channels[i + 1]))
    return shapes


# ---------------------------------------------------------------------------
# Patch embedding
# ---------------------------------------------------------------------------


class PatchEmbed3d(nn.Module):
    """Non-overlapping 3-D patch embedding for one source.

    A single strided conv flattens each ``s1 x p x p x bands`` patch and
    applies a learned linear projection to ``embed_dim``. Kernel equals
    stride, so patches never overlap. Both admissible temporal patch
    sizes (2 and 4) get their own projection so one module serves all
    clip lengths; the one to use is chosen per forward call.
    """

    def __init__(self, bands: int, embed_dim: int, spatial_patch: int = 4, norm: bool = True):
        super().__init__()
        self.bands = bands
        self.spatial_patch = spatial_patch
        self.proj = nn.ModuleDict(
            {
                str(s): nn.Conv3d(bands, embed_dim, kernel_size=(s, spatial_patch, spatial_patch), stride=(s, spatial_patch, spatial_patch))
                for s in TEMPORAL_PATCHES
            }
        )
        self.norm = nn.LayerNorm(embed_dim) if norm else nn.Identity()

    def forward(self, x: torch.Tensor, temporal_patch: int) -> torch.Tensor:
        """``[B, C, T, H, W]`` -> ``[B, T1, H1, W1, embed_dim]``."""
        if x.ndim != 5:
            raise ValueError(f"expected [B, C, T, H, W], got shape {tuple(x.shape)}")
        B, C, T, H, W = x.shape
        if C != self.bands:
            raise ValueError(f"expected {self.bands} bands, got {C}")
        if H % self.spatial_patch or W % self.spatial_patch:
            raise ValueError(f"spatial dims ({H}, {W}) not divisible by the spatial patch {self.spatial_patch}")
        if temporal_patch not in TEMPORAL_PATCHES:
            raise ValueError(f"temporal patch must be one of {TEMPORAL_PATCHES}, got {temporal_patch}")
        if T < temporal_patch:
            raise ValueError(f"sequence length {T} shorter than the temporal patch {temporal_patch}")
        z = self.proj[str(temporal_patch)](x)  # [B, C1, T1, H1, W1]
        z = z.permute(0, 2, 3, 4, 1)
        return self.norm(z)


# ---------------------------------------------------------------------------
# Windowed attention
# ---------------------------------------------------------------------------


def effective_window(dims, window) -> tuple:
    """Clamp a (t, h, w) window to the feature dims (never exceeds them)."""
    return tuple(min(w, d) for w, d in zip(window, dims))


def effective_shift(dims, window, shifted: bool) -> tuple:
    """Cyclic shift per axis: floor(window/2) on shifted blocks, 0 when the window spans the axis."""
    if not shifted:
        return (0, 0, 0)
    return tuple(w // 2 if d > w else 0 for w, d in zip(window, dims))


def window_partition(x: torch.Tensor, win) -> torch.Tensor:
    """``[B, T, H, W, C]`` -> ``[B * nWindows, wT*wH*wW, C]`` (dims must divide)."""
    B, T, H, W, C = x.shape
    wt, wh, ww = win
    x = x.view(B, T // wt, wt, H // wh, wh, W // ww, ww, C)
    x = x.permute(0, 1, 3, 5, 2, 4, 6, 7).contiguous()
    return x.view(-1, wt * wh * ww, C)


def window_reverse(windows: torch.Tensor, win, B: int, T: int, H: int, W: int) -> torch.Tensor:
    wt, wh, ww = win
    C = windows.shape[-1]
    x = windows.view(B, T // wt, H // wh, W // ww, wt, wh, ww, C)
    x = x.permute(0, 1, 4, 2, 5, 3, 6, 7).contiguous()
    return x.view(B, T, H, W, C)


@lru_cache(maxsize=64)
def _shift_mask(dims, win, shift) -> Optional[torch.Tensor]:
    """Additive attention mask for cyclic-shifted windows.

    Tokens that came from different pre-shift windows land in the same
    post-shift window; their pairwise logits get ``-inf`` so their
    attention weights are exactly zero (every token still attends to its
    own pre-shift region, so rows never go all ``-inf``).
    """
    if not any(shift):
        return None
    T, H, W = dims
    region = torch.zeros(1, T, H, W, 1)
    counter = 0

    def _slices(dim, w, s):
        if s == 0:
            return (slice(None),)
        return (slice(0, -w), slice(-w, -s), slice(-s, None))

    for ts in _slices(T, win[0], shift[0]):
        for hs in _slices(H, win[1], shift[1]):
            for ws in _slices(W, win[2], shift[2]):
                region[:, ts, hs, ws, :] = counter
                counter += 1
    labels = window_partition(region, win).squeeze(-1)  # [nW, w]
    diff = labels.unsqueeze(1) - labels.unsqueeze(2)  # [nW, w, w]
    mask = torch.zeros_like(diff)
    mask[diff != 0] = float("-inf")
    return mask


class WindowAttention3d(nn.Module):
    """Multi-head self-attention inside one 3-D window, with a learned
    relative-position bias over (dt, dh, dw) offsets."""

    def __init__(self, dim: int, heads: int, window):
        super().__init__()
        if dim % heads:
            raise ValueError(f"dim {dim} must be divisible by heads {heads}")
        self.dim = dim
        self.heads = heads
        self.window = tuple(window)  # maximal (t, h, w) window
        self.scale = (dim // heads) ** -0.5
        wt, wh, ww = self.window
        self.relative_bias = nn.Parameter(torch.zeros((2 * wt - 1) * (2 * wh - 1) * (2 * ww - 1), heads))
        nn.init.trunc_normal_(self.relative_bias, std=0.02)
        self.qkv = nn.Linear(dim, 3 * dim, bias=True)
        self.proj = nn.Linear(dim, dim)
        self._index_cache = {}

    def _relative_index(self, win) -> torch.Tensor:
        """Bias-table indices for an effective window (cached per window)."""
        if win in self._index_cache:
            return self._index_cache[win]
        WT, WH, WW = self.window
        coords = torch.stack(
            torch.meshgrid(
                torch.arange(win[0]), torch.arange(win[1]), torch.arange(win[2]), indexing="ij"
            )
        ).flatten(1)  # [3, w]
        rel = coords[:, :, None] - coords[:, None, :]  # [3, w, w]
        rel = rel.permute(1, 2, 0).contiguous()
        rel[:, :, 0] += WT - 1
        rel[:, :, 1] += WH - 1
        rel[:, :, 2] += WW - 1
        index = rel[:, :, 0] * (2 * WH - 1) * (2 * WW - 1) + rel[:, :, 1] * (2 * WW - 1) + rel[:, :, 2]
        self._index_cache[win] = index
        return index

    def forward(self, x: torch.Tensor, win, mask: Optional[torch.Tensor] = None, need_weights: bool = False):
        """``x``: ``[B_, w, C]`` window tokens; ``mask``: ``[nW, w, w]`` additive."""
        B_, N, C = x.shape
        qkv = self.qkv(x).reshape(B_, N, 3, self.heads, C // self.heads).permute(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        attn = (q * self.scale) @ k.transpose(-2, -1)  # [B_, heads, w, w]
        bias = self.relative_bias[self._relative_index(win).reshape(-1)].reshape(N, N, self.heads)
        attn = attn + bias.permute(2, 0, 1).unsqueeze(0).to(attn.dtype)
        if mask is not None:
            nW = mask.shape[0]
            attn = attn.view(B_ // nW, nW, self.heads, N, N) + mask.unsqueeze(1).unsqueeze(0).to(attn.dtype)
            attn = attn.view(B_, self.heads, N, N)
        attn = attn.softmax(dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(B_, N, C)
        out = self.proj(out)
        if need_weights:
            return out, attn
        return out


class SwinBlock3d(nn.Module):
    """Pre-norm windowed attention + feed-forward, both with residuals.

    Even blocks use regular windows; odd (``shifted=True``) blocks
    cyclic-shift the grid by half a window per axis and mask attention
    so only tokens from the same pre-shift window interact, connecting
    neighboring windows across consecutive blocks. Window sizes clamp to
    the current feature dims, and the grid is zero-padded up to window
    multiples then cropped back, so the output shape always equals the
    input shape.
    """

    def __init__(self, dim: int, heads: int, window, shifted: bool, mlp_ratio: float = 4.0):
        super().__init__()
        self.window = (window[0], window[1], window[1])
        self.shifted = shifted
        self.norm1 = nn.LayerNorm(dim)
        self.attn = WindowAttention3d(dim, heads, self.window)
        self.norm2 = nn.LayerNorm(dim)
        hidden = int(dim * mlp_ratio)
        self.mlp = nn.Sequential(nn.Linear(dim, hidden), nn.GELU(), nn.Linear(hidden, dim))

    def _attend(self, x: torch.Tensor, need_weights: bool = False):
        B, T, H, W, C = x.shape
        win = effective_window((T, H, W), self.window)
        shift = effective_shift((T, H, W), win, self.shifted)
        pad = [(-d) % w for d, w in zip((T, H, W), win)]
        if any(pad):
            x = F.pad(x, (0, 0, 0, pad[2], 0, pad[1], 0, pad[0]))
        Tp, Hp, Wp = x.shape[1:4]
        if any(shift):
            x = torch.roll(x, shifts=tuple(-s for s in shift), dims=(1, 2, 3))
        mask = _shift_mask((Tp, Hp, Wp), win, shift)
        windows = window_partition(x, win)
        attended = self.attn(windows, win, mask=mask, need_weights=need_weights)
        if need_weights:
            attended, weights = attended
        x = window_reverse(attended, win, B, Tp, Hp, Wp)
        if any(shift):
            x = torch.roll(x, shifts=shift, dims=(1, 2, 3))
        x = x[:, :T, :H, :W, :]
        if need_weights:
            return x, weights
        return x

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if not torch.isfinite(x).all():
            raise ValueError("attention block received non-finite input")
        x = x + self._attend(self.norm1(x))
        x = x + self.mlp(self.norm2(x))
        return x

    def attention_weights(self, x: torch.Tensor) -> torch.Tensor:
        """Post-softmax attention matrices ``[B * nW, heads, w, w]`` (inspection/testing)."""
        _, weights = self._attend(self.norm1(x), need_weights=True)
        return weights


# ---------------------------------------------------------------------------
# Synchronized patch merging
# ---------------------------------------------------------------------------


def synchronized_gather_pool(
    x: torch.Tensor, temporal_factor: int, spatial_factor: int, temporal_downsampling: bool = True
) -> torch.Tensor:
    """The pre-projection half of patch merging (a pure function).

    Temporal: mean over non-overlapping windows of ``temporal_factor``
    consecutive frames, the trailing partial window averaged over its
    remaining frames. Spatial: gather the ``D*D`` strided sub-grids
    (start offsets 0..D-1, stride D, row-major offset order) and
    concatenate them along channels. Temporal pooling runs first; the
    two commute in value for mean pooling, the order is fixed for
    reproducibility.

    ``[.., T, H, W, C]`` -> ``[.., T', H/D, W/D, D*D*C]``.
    """
    *_, T, H, W, C = x.shape
    D = spatial_factor
    if H % D or W % D:
        raise ValueError(f"spatial dims ({H}, {W}) not divisible by the merge factor {D}")
    if temporal_downsampling and temporal_factor > 1 and T > 1:
        S = temporal_factor
        chunks = [x[..., i : i + S, :, :, :].mean(dim=-4) for i in range(0, T, S)]
        x = torch.stack(chunks, dim=-4)
    grids = [x[..., a::D, b::D, :] for a in range(D) for b in range(D)]
    return torch.cat(grids, dim=-1)


class PatchMerge3d(nn.Module):
    """Synchronized gather+pool followed by a learned projection to ``2*C``."""

    def __init__(self, dim: int, temporal_factor: int, spatial_factor: int, temporal_downsampling: bool = True):
        super().__init__()
        self.dim = dim
        self.temporal_factor = temporal_factor
        self.spatial_factor = spatial_factor
        self.temporal_downsampling = temporal_downsampling
        width = spatial_factor * spatial_factor * dim
        self.norm = nn.LayerNorm(width)
        self.reduction = nn.Linear(width, 2 * dim, bias=False)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        gathered = synchronized_gather_pool(x, self.temporal_factor, self.spatial_factor, self.temporal_downsampling)
        return self.reduction(self.norm(gathered))


# ---------------------------------------------------------------------------
# Full encoder
# ---------------------------------------------------------------------------


class MultiSourceEncoder(nn.Module):
    """Per-source patch embedding feeding one shared 4-stage trunk.

    Forward is deterministic given parameters and input; no internal
    state mutates, so concurrent read-only inference over a frozen
    checkpoint is safe.
    """

    def __init__(self, cfg: ModelConfig, sources: Sequence[SourceSpec]):
        super().__init__()
        if not sources:
            raise ValueError("encoder needs at least one source")
        self.cfg = cfg
        self.source_specs = {s.name: s for s in sources}
        self.embeds = nn.ModuleDict(
            {s.name: PatchEmbed3d(s.bands, cfg.embed_dim, s.spatial_patch, norm=cfg.embed_norm) for s in sources}
        )
        self.stages = nn.ModuleList()
        for i in range(4):
            dim = cfg.stage_channels[i]
            blocks = nn.ModuleList(
                SwinBlock3d(dim, cfg.heads[i], cfg.window, shifted=(k % 2 == 1), mlp_ratio=cfg.mlp_ratio)
                for k in range(cfg.depths[i])
            )
            self.stages.append(blocks)
        self.merges = nn.ModuleList(
            PatchMerge3d(
                cfg.stage_channels[i],
                cfg.temporal_merge_factors[i],
                cfg.spatial_merge_factors[i],
                cfg.temporal_downsampling,
            )
            for i in range(3)
        )

    def forward(self, x: torch.Tensor, source: str) -> list:
        """``[B, C, T, H, W]`` clip -> list of 4 stage outputs ``[B, T_i, H_i, W_i, C_i]``."""
        if source not in self.embeds:
            raise ValueError(f"unknown source {source!r}; registered sources: {sorted(self.embeds)}")
        spec = self.source_specs[source]
        T = x.shape[2]
        z = self.embeds[source](x, spec.temporal_patch_for(T))
        outputs = []
        for i, blocks in enumerate(self.stages):
            if i > 0:
                z = self.merges[i - 1](z)
            for block in blocks:
                z = block(z)
            outputs.append(z)
        return outputs

    def encode_sample(self, raw: torch.Tensor, source: str) -> tuple:
        """Unbatched ``[C, T, H, W]`` clip -> tuple of :class:`StageFeatures`."""
        feats = self.forward(raw.unsqueeze(0), source)
        return tuple(StageFeatures(data=f.squeeze(0).detach(), stage_index=i + 1) for i, f in enumerate(feats))

    def expected_shapes(self, source: str, T: int, H: int, W: int) -> list:
        spec = self.source_specs[source]
        return stage_shapes(self.cfg, T, H, W, spec.temporal_patch_for(T), spec.spatial_patch)
