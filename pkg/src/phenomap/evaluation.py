"""Confusion-matrix metrics, FLOP accounting, and plot emission.

Metrics follow the standard one-vs-rest definitions (precision, recall,
F1 per class; one global overall accuracy from the pooled confusion).
Zero-denominator cases return 0 with an ``undefined`` flag instead of
NaN so reports aggregate cleanly. Tile-level counts combine
associatively, enabling map-reduce evaluation.

The FLOP estimator is a closed form over the encoder/decoder shape law,
counting multiply-accumulates for the patch embedding, per-window
attention (q/k/v, logits, weighted sum, output projection), the
feed-forward layers, the merge projections, and the decoder
convolutions. Its ``T`` argument is the temporal length of the stage-1
token grid (what the merge stages actually see); raw clip lengths map
to it via ``floor(T_raw / temporal_patch)``.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

from .backbone import merged_length
from .config import ModelConfig

UNDEFINED = "undefined"


@dataclass
class ConfusionCounts:
    """Per-class one-vs-rest TP/FP/FN/TN over the evaluated pixels."""

    tp: np.ndarray
    fp: np.ndarray
    fn: np.ndarray
    tn: np.ndarray
    total: int

    def __post_init__(self):
        for name in ("tp", "fp", "fn", "tn"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=np.int64))
        sums = self.tp + self.fp + self.fn + self.tn
        if self.total and not np.all(sums == self.total):
            raise ValueError("TP+FP+FN+TN must equal the total evaluated pixels for every class")

    @property
    def num_classes(self) -> int:
        return len(self.tp)

    def merge(self, other: "ConfusionCounts") -> "ConfusionCounts":
        if other.num_classes != self.num_classes:
            raise ValueError("cannot merge counts with different class counts")
        return ConfusionCounts(
            self.tp + other.tp, self.fp + other.fp, self.fn + other.fn, self.tn + other.tn, self.total + other.total
        )


def confusion(pred: np.ndarray, gt: np.ndarray, num_classes: int, ignore_index: Optional[int] = None) -> ConfusionCounts:
    """One-vs-rest counts per class over non-ignored pixels."""
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"prediction shape {pred.shape} does not match ground truth {gt.shape}")
    pred = pred.astype(np.int64).ravel()
    gt = gt.astype(np.int64).ravel()
    if ignore_index is not None:
        keep = gt != ignore_index
        pred, gt = pred[keep], gt[keep]
    total = int(gt.size)
    if total == 0:
        zero = np.zeros(num_classes, dtype=np.int64)
        return ConfusionCounts(zero, zero.copy(), zero.copy(), zero.copy(), 0)
    if gt.min() < 0 or gt.max() >= num_classes or pred.min() < 0 or pred.max() >= num_classes:
        raise ValueError(f"class values outside 0..{num_classes - 1} encountered")
    cm = np.bincount(gt * num_classes + pred, minlength=num_classes * num_classes).reshape(num_classes, num_classes)
    tp = np.diag(cm).copy()
    fp = cm.sum(axis=0) - tp
    fn = cm.sum(axis=1) - tp
    tn = total - tp - fp - fn
    return ConfusionCounts(tp, fp, fn, tn, total)


def _safe_div(num: float, den: float, flags: List[str], flag: str) -> float:
    if den == 0:
        flags.append(flag)
        return 0.0
    return float(num) / float(den)


def metrics(counts: ConfusionCounts, positive_class: int = 1) -> Dict:
    """Precision/recall/F1 per class, macro averages, and global OA.

    The macro block averages over every class including background; the
    ``positive`` block repeats the target class's row for binary tasks.
    """
    per_class = []
    for k in range(counts.num_classes):
        flags: List[str] = []
        p = _safe_div(counts.tp[k], counts.tp[k] + counts.fp[k], flags, f"{UNDEFINED}_precision")
        r = _safe_div(counts.tp[k], counts.tp[k] + counts.fn[k], flags, f"{UNDEFINED}_recall")
        f1 = _safe_div(2 * p * r, p + r, flags, f"{UNDEFINED}_f1")
        per_class.append({"class": k, "precision": p, "recall": r, "f1": f1, "flags": flags})
    macro = {
        "precision": float(np.mean([c["precision"] for c in per_class])),
        "recall": float(np.mean([c["recall"] for c in per_class])),
        "f1": float(np.mean([c["f1"] for c in per_class])),
    }
    global_flags: List[str] = []
    oa = _safe_div(int(counts.tp.sum()), counts.total, global_flags, f"{UNDEFINED}_oa")
    report = {
        "classes": per_class,
        "macro": macro,
        "overall_accuracy": oa,
        "total_pixels": counts.total,
        "flags": global_flags,
    }
    if 0 <= positive_class < counts.num_classes:
        report["positive"] = dict(per_class[positive_class])
    return report


# ---------------------------------------------------------------------------
# FLOP accounting
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FlopReport:
    """Multiply-accumulate counts per component for one forward pass."""

    embed: int
    stages: tuple  # attention+ffn MACs per stage
    merges: tuple  # projection MACs per merge
    decoder: int
    stage_dims: tuple  # (T_i, H_i, W_i, C_i) per stage

    @property
    def total(self) -> int:
        return self.embed + sum(self.stages) + sum(self.merges) + self.decoder

    def to_dict(self) -> dict:
        return {
            "embed": self.embed,
            "stages": list(self.stages),
            "merges": list(self.merges),
            "decoder": self.decoder,
            "total": self.total,
            "stage_dims": [list(d) for d in self.stage_dims],
        }


def attention_window_macs(window_tokens: int, dim: int) -> int:
    """MACs for one attention window: qkv + output projection (4 w C^2)
    plus logits and weighted sum (2 w^2 C); head count cancels."""
    return 4 * window_tokens * dim * dim + 2 * window_tokens * window_tokens * dim


def _padded(dim: int, window: int) -> int:
    eff = min(window, dim)
    return dim + (-dim) % eff, eff


def _stage_macs(dims, channels: int, depth: int, window, mlp_ratio: float) -> int:
    t, h, w = dims
    tp, wt = _padded(t, window[0])
    hp, wh = _padded(h, window[1])
    wp, ww = _padded(w, window[1])
    padded_tokens = tp * hp * wp
    tokens = t * h * w
    win_tokens = wt * wh * ww
    n_windows = padded_tokens // win_tokens
    per_block = n_windows * attention_window_macs(win_tokens, channels)
    per_block += int(2 * mlp_ratio * tokens * channels * channels)
    return per_block * depth


def flops_estimate(
    cfg: ModelConfig,
    T: int,
    H: int,
    W: int,
    *,
    bands: int = 10,
    temporal_patch: int = 2,
    spatial_patch: int = 4,
    num_classes: int = 2,
    num_sources: int = 1,
    include_decoder: bool = True,
) -> FlopReport:
    """Closed-form MAC count for one forward pass.

    ``T`` counts the frames entering the first attention stage (a raw
    clip of length L maps to ``T = floor(L / temporal_patch)``); ``H``
    and ``W`` are raw pixels. The single-source pyramid is replicated
    ``num_sources`` times for the encoder terms.
    """
    if T < 1 or H % spatial_patch or W % spatial_patch:
        raise ValueError(f"invalid grid: T={T}, H={H}, W={W} with spatial patch {spatial_patch}")
    h, w = H // spatial_patch, W // spatial_patch
    embed = T * h * w * cfg.embed_dim * (temporal_patch * spatial_patch * spatial_patch * bands)

    dims = [(T, h, w)]
    t = T
    for i in range(3):
        if cfg.temporal_downsampling:
            t = merged_length(t, cfg.temporal_merge_factors[i])
        d = cfg.spatial_merge_factors[i]
        if h % d or w % d:
            raise ValueError(f"stage-{i + 1} grid ({h}, {w}) not divisible by the merge factor {d}")
        h, w = h // d, w // d
        dims.append((t, h, w))

    stages = tuple(
        _stage_macs(dims[i], cfg.stage_channels[i], cfg.depths[i], cfg.window, cfg.mlp_ratio) for i in range(4)
    )
    merges = []
    for i in range(3):
        c_in = cfg.stage_channels[i]
        d = cfg.spatial_merge_factors[i]
        t_out, h_out, w_out = dims[i + 1]
        merges.append(t_out * h_out * w_out * (d * d * c_in) * (2 * c_in))

    decoder = 0
    if include_decoder:
        prev_ch = num_sources * dims[3][0] * cfg.stage_channels[3]
        for j in (1, 2, 3):
            t_i, h_i, w_i = dims[3 - j]
            skip_ch = num_sources * t_i * cfg.stage_channels[3 - j]
            in_ch = prev_ch + skip_ch + (cfg.aux_channels if j == cfg.aux_layer else 0)
            out_ch = cfg.decoder_channels[j - 1]
            decoder += h_i * w_i * 9 * in_ch * out_ch  # 3x3 fusion conv 1
            decoder += h_i * w_i * 9 * out_ch * out_ch  # 3x3 fusion conv 2
            prev_ch = out_ch
        decoder += dims[0][1] * dims[0][2] * prev_ch * num_classes  # 1x1 classifier

    stage_dims = tuple((d[0], d[1], d[2], cfg.stage_channels[i]) for i, d in enumerate(dims))
    embed_total = num_sources * embed
    stages = tuple(num_sources * s for s in stages)
    merges = tuple(num_sources * m for m in merges)
    return FlopReport(embed=embed_total, stages=stages, merges=merges, decoder=decoder, stage_dims=stage_dims)


def flops_comparison(cfg: ModelConfig, T: int, H: int, W: int, **kwargs) -> Dict:
    """Enabled vs disabled temporal downsampling at identical settings."""
    enabled = flops_estimate(replace(cfg, temporal_downsampling=True), T, H, W, **kwargs)
    disabled = flops_estimate(replace(cfg, temporal_downsampling=False), T, H, W, **kwargs)
    return {
        "enabled": enabled.to_dict(),
        "disabled": disabled.to_dict(),
        "ratio": enabled.total / disabled.total,
    }


def wallclock_forward_seconds(cfg: ModelConfig, spec, T_raw: int, repeats: int = 3) -> float:
    """Median wall-clock seconds for one encoder forward on random input."""
    import torch

    from .backbone import MultiSourceEncoder

    torch.manual_seed(0)
    encoder = MultiSourceEncoder(cfg, [spec]).eval()
    x = torch.randn(1, spec.bands, T_raw, spec.tile_size, spec.tile_size)
    times = []
    with torch.no_grad():
        encoder(x, spec.name)  # warm-up
        for _ in range(repeats):
            start = time.perf_counter()
            encoder(x, spec.name)
            times.append(time.perf_counter() - start)
    return float(np.median(times))


# ---------------------------------------------------------------------------
# Plot emission (static image files)
# ---------------------------------------------------------------------------


def _pyplot():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


def plot_f1_bars(report: Dict, path) -> Path:
    plt = _pyplot()
    classes = [c["class"] for c in report["classes"]]
    f1 = [c["f1"] for c in report["classes"]]
    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.bar([str(c) for c in classes], f1, color="seagreen")
    ax.set_xlabel("class")
    ax.set_ylabel("F1")
    ax.set_ylim(0, 1)
    ax.set_title(f"per-class F1 (macro {report['macro']['f1']:.3f}, OA {report['overall_accuracy']:.3f})")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)


def plot_training_curves(log_path, out_path) -> Optional[Path]:
    plt = _pyplot()
    rows = []
    with open(log_path) as fh:
        for line in fh:
            line = line.strip()
            if line:
                rows.append(json.loads(line))
    if not rows:
        return None
    fig, ax = plt.subplots(figsize=(6, 3.5))
    if "total" in rows[0]:
        ax.plot([r["iteration"] for r in rows], [r["total"] for r in rows], label="total loss")
        ax.set_xlabel("iteration")
    else:
        ax.plot([r["epoch"] for r in rows], [r["loss"] for r in rows], label="train loss")
        if "val_macro_f1" in rows[0]:
            ax2 = ax.twinx()
            ax2.plot([r["epoch"] for r in rows], [r["val_macro_f1"] for r in rows], color="darkorange", label="val macro F1")
            ax2.set_ylabel("val macro F1")
        ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax.legend(loc="upper right")
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return Path(out_path)


def plot_prediction_panel(pred: np.ndarray, label: np.ndarray, path) -> Path:
    plt = _pyplot()
    fig, axes = plt.subplots(1, 2, figsize=(7, 3.5))
    vmax = max(int(pred.max()), int(label.max()), 1)
    for ax, img, title in zip(axes, (label, pred), ("label", "prediction")):
        ax.imshow(img, vmin=0, vmax=vmax, interpolation="nearest", cmap="tab10")
        ax.set_title(title)
        ax.axis("off")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)
