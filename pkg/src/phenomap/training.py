"""Pretraining and finetuning loops: sampling, schedule, checkpoints.

Runs are fully deterministic for a given (config, seed, dataset):
seeding happens inside the entry points, data order is derived from
seeded generators over sorted manifests, and checkpoint writes are
atomic. Loss logs are JSON lines with no timestamps so two identical
runs produce byte-identical logs.
"""

from __future__ import annotations

import json
import logging
import math
import random
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
import torch

from .backbone import MultiSourceEncoder
from .checkpoint import apply_to_module, bundle_from_modules, save_checkpoint
from .config import RunConfig, config_hash
from .decoder import FusionDecoder, MappingModel, ce_loss_hard_mining
from .pretrain import PretrainModel, make_teacher, pretrain_step
from .structures import CheckpointBundle
from .synthetic import SceneDataset

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# Learning-rate schedule
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ScheduleParams:
    """Warmup-then-decay schedule for pretraining.

    Defaults follow the production recipe (1e-7 -> 1e-5 over the first
    5000 iterations, decaying to a 1e-6 floor); desk-scale configs
    shrink the horizons.
    """

    warmup_start: float = 1e-7
    peak_lr: float = 1e-5
    warmup_iterations: int = 5000
    floor_lr: float = 1e-6
    total_iterations: int = 20000
    decay: str = "cosine"

    def __post_init__(self):
        if not self.warmup_start < self.peak_lr:
            raise ValueError("warmup_start must be below peak_lr")
        if not self.floor_lr < self.peak_lr:
            raise ValueError("floor_lr must be below peak_lr")
        if self.decay not in ("cosine", "linear"):
            raise ValueError(f"decay must be 'cosine' or 'linear', got {self.decay!r}")


def lr_at(iteration: int, params: ScheduleParams) -> float:
    """Learning rate at an iteration (0-based).

    Linear warmup over [0, warmup_iterations], then cosine (or linear)
    decay to the floor at total_iterations; continuous at the warmup
    boundary and non-increasing after it.
    """
    if iteration < 0:
        raise ValueError(f"iteration must be >= 0, got {iteration}")
    w = params.warmup_iterations
    if iteration <= w:
        return params.warmup_start + (params.peak_lr - params.warmup_start) * iteration / w
    total = max(params.total_iterations, w + 1)
    frac = min(1.0, (iteration - w) / (total - w))
    if params.decay == "linear":
        return params.peak_lr + (params.floor_lr - params.peak_lr) * frac
    return params.floor_lr + (params.peak_lr - params.floor_lr) * 0.5 * (1.0 + math.cos(math.pi * frac))


# ---------------------------------------------------------------------------
# Frame sampling
# ---------------------------------------------------------------------------


def sample_frames(
    length: int,
    mode: str,
    rng: np.random.Generator,
    *,
    frames: int = 16,
    variable_range=(3, 32),
) -> np.ndarray:
    """Draw a temporally ordered index list from a sequence of ``length``.

    ``fixed16``      — ``frames`` sorted indices, uniform without replacement.
    ``variable``     — a length drawn uniformly from ``variable_range``
                       (clamped to the sequence), then that many sorted indices.
    ``single_frame`` — one uniformly drawn index repeated to the minimum
                       supported clip length (a temporally constant clip;
                       the degenerate baseline for temporal ablations).
    """
    if mode == "fixed16":
        if length < frames:
            raise ValueError(f"sequence length {length} below requested {frames} frames")
        idx = rng.choice(length, size=frames, replace=False)
        return np.sort(idx)
    if mode == "variable":
        lo, hi = variable_range
        hi = min(hi, length)
        if length < lo:
            raise ValueError(f"sequence length {length} below minimum draw length {lo}")
        n = int(rng.integers(lo, hi + 1))
        return np.sort(rng.choice(length, size=n, replace=False))
    if mode == "single_frame":
        if length < 1:
            raise ValueError("sequence is empty")
        idx = int(rng.integers(length))
        return np.full(3, idx, dtype=np.int64)
    raise ValueError(f"unknown frame sampling mode {mode!r}")


def spaced_frames(length: int, count: int) -> np.ndarray:
    """Deterministic, evenly spaced, strictly increasing indices (evaluation)."""
    if count > length:
        raise ValueError(f"cannot take {count} frames from a sequence of {length}")
    if count == 1:
        return np.array([length // 2])
    return np.round(np.linspace(0, length - 1, count)).astype(np.int64)


def set_global_seed(seed: int) -> None:
    random.seed(seed)
    np.random.seed(seed % 2**32)
    torch.manual_seed(seed)


# ---------------------------------------------------------------------------
# Batching helpers
# ---------------------------------------------------------------------------


def _stack_clips(dataset: SceneDataset, geo_ids: Sequence[str], source: str, indices: np.ndarray) -> torch.Tensor:
    clips = [dataset.load_clip(g, source)[:, indices, :, :] for g in geo_ids]
    return torch.from_numpy(np.stack(clips))


def _frames_for(settings, source_len: int, rng: np.random.Generator) -> np.ndarray:
    return sample_frames(
        source_len,
        settings.frame_sampling,
        rng,
        frames=settings.frames_per_sample,
        variable_range=settings.variable_range,
    )


def _write_run_meta(out_dir: Path, cfg: RunConfig, command: str) -> None:
    """Record the exact resolved config and seed before any computation."""
    from .config import to_dict

    out_dir.mkdir(parents=True, exist_ok=True)
    meta = {
        "command": command,
        "seed": cfg.training.seed,
        "config_hash": config_hash(cfg),
        "config": to_dict(cfg),
    }
    (out_dir / "run.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# Pretraining
# ---------------------------------------------------------------------------


def _validate_dataset(cfg: RunConfig, dataset: SceneDataset) -> None:
    available = set(dataset.sources)
    missing = [s.name for s in cfg.sources if s.name not in available]
    if missing:
        raise ValueError(f"dataset/manifest mismatch: configured sources {missing} absent from the manifest")
    for spec in cfg.sources:
        ids = [e.geo_id for e in dataset.manifest.filter(split="train", source=spec.name)]
        if not ids:
            raise ValueError(f"dataset/manifest mismatch: no training entries for source {spec.name!r}")
        clip = dataset.load_clip(ids[0], spec.name)
        if clip.shape[0] != spec.bands or clip.shape[2] != spec.tile_size or clip.shape[3] != spec.tile_size:
            raise ValueError(
                f"dataset/manifest mismatch for {spec.name!r}: clips are {clip.shape[0]} bands at "
                f"{clip.shape[2]}x{clip.shape[3]}, config says {spec.bands} bands at {spec.tile_size}px"
            )


def pretrain(cfg: RunConfig, data_root, out_dir) -> CheckpointBundle:
    """Fraction-regression pretraining over all configured sources.

    Honors the ablation flags: with ``mean_teacher`` off the consistency
    term and EMA are skipped and no teacher is checkpointed; with
    ``fraction_supervision`` off only the consistency term trains.
    Returns the final student(+teacher) bundle.
    """
    settings = cfg.training.pretrain
    out = Path(out_dir)
    _write_run_meta(out, cfg, "pretrain")
    dataset = SceneDataset(data_root)
    _validate_dataset(cfg, dataset)

    set_global_seed(cfg.training.seed)
    encoder = MultiSourceEncoder(cfg.model, cfg.sources)
    student = PretrainModel(encoder, cfg.model)
    teacher = make_teacher(student) if settings.mean_teacher else None
    log.info(
        "pretrain: %d iterations, sources=%s, teacher_step=%g, mean_teacher=%s, fraction_supervision=%s",
        settings.iterations, list(cfg.source_names), settings.teacher_step, settings.mean_teacher,
        settings.fraction_supervision,
    )

    optimizer = torch.optim.AdamW(
        student.parameters(), lr=settings.warmup_start, betas=settings.betas, weight_decay=settings.weight_decay
    )
    schedule = ScheduleParams(
        warmup_start=settings.warmup_start,
        peak_lr=settings.peak_lr,
        warmup_iterations=settings.warmup_iterations,
        floor_lr=settings.floor_lr,
        total_iterations=settings.schedule_total,
        decay=settings.decay,
    )
    data_rng = np.random.default_rng(np.random.SeedSequence([cfg.training.seed, 101]))
    entries = {
        s.name: sorted(dataset.manifest.filter(split="train", source=s.name), key=lambda e: e.geo_id)
        for s in cfg.sources
    }

    log_path = out / "pretrain_log.jsonl"
    ckpt_dir = out / "checkpoints"
    bundle = None
    with open(log_path, "w") as log_fh:
        for it in range(settings.iterations):
            lr = lr_at(it, schedule)
            for group in optimizer.param_groups:
                group["lr"] = lr
            batches = {}
            for spec in cfg.sources:
                pool = entries[spec.name]
                picks = data_rng.choice(len(pool), size=min(settings.batch_size, len(pool)), replace=False)
                chosen = [pool[i] for i in np.sort(picks)]
                length = len(chosen[0].frame_paths)
                indices = _frames_for(settings, length, data_rng)
                clip = _stack_clips(dataset, [e.geo_id for e in chosen], spec.name, indices)
                target = torch.from_numpy(np.stack([e.fraction.values for e in chosen])).float()
                batches[spec.name] = (clip, target)
            report = pretrain_step(
                student,
                teacher,
                optimizer,
                batches,
                teacher_step=settings.teacher_step,
                fraction_supervision=settings.fraction_supervision,
                mean_teacher=settings.mean_teacher,
                consistency_weight=settings.consistency_weight,
                grad_clip=settings.grad_clip,
                expected_sources=cfg.source_names,
            )
            line = {
                "iteration": it + 1,
                "lr": lr,
                "teacher_step": settings.teacher_step if settings.mean_teacher else None,
                "sources": report["sources"],
                "total": report["total"],
            }
            log_fh.write(json.dumps(line) + "\n")
            if settings.checkpoint_every and (it + 1) % settings.checkpoint_every == 0:
                bundle = bundle_from_modules(student, teacher, _metadata(cfg, it + 1))
                save_checkpoint(ckpt_dir / f"iter_{it + 1:06d}", bundle)
    bundle = bundle_from_modules(student, teacher, _metadata(cfg, settings.iterations))
    save_checkpoint(ckpt_dir / "final", bundle)
    return bundle


def _metadata(cfg: RunConfig, iteration: int) -> dict:
    return {"config_hash": config_hash(cfg), "iteration": iteration, "seed": cfg.training.seed}


# ---------------------------------------------------------------------------
# Finetuning
# ---------------------------------------------------------------------------


def select_best(scores: Sequence[float]) -> int:
    """Index of the best validation score (first maximum)."""
    if not scores:
        raise ValueError("no scores to select from")
    return max(range(len(scores)), key=lambda i: scores[i])


def reduced_subset(geo_ids: Sequence[str], fraction: float, seed: int) -> List[str]:
    """Seeded r-fraction subset of the training tiles (at least one)."""
    if not 0 < fraction <= 1:
        raise ValueError(f"data fraction must be in (0, 1], got {fraction}")
    ids = sorted(geo_ids)
    if fraction >= 1.0:
        return ids
    n = max(1, int(round(fraction * len(ids))))
    rng = np.random.default_rng(np.random.SeedSequence([seed, 202]))
    picks = rng.choice(len(ids), size=n, replace=False)
    return [ids[i] for i in np.sort(picks)]


def build_mapping_model(cfg: RunConfig, init: Optional[CheckpointBundle] = None) -> MappingModel:
    """Encoder + decoder; backbone/embedding weights optionally loaded
    from a pretraining bundle (the decoder always initializes fresh)."""
    encoder = MultiSourceEncoder(cfg.model, cfg.sources)
    decoder = FusionDecoder(cfg.model, cfg.sources, cfg.training.finetune.num_classes)
    model = MappingModel(encoder, decoder)
    if init is not None:
        encoder_params = {
            k[len("encoder.") :]: v for k, v in init.student.items() if k.startswith("encoder.")
        }
        if not encoder_params:
            raise ValueError("checkpoint holds no encoder parameters")
        apply_to_module(model.encoder, encoder_params, strict=True)
    return model


def _model_batch(
    dataset: SceneDataset,
    cfg: RunConfig,
    geo_ids: Sequence[str],
    rng: Optional[np.random.Generator],
    *,
    frames_override: Optional[int] = None,
) -> Dict[str, torch.Tensor]:
    """Per-source clips for a list of co-located tiles.

    With ``rng`` given, frames are drawn by the configured sampling mode;
    otherwise (evaluation) evenly spaced indices are used.
    """
    settings = cfg.training.finetune
    clips = {}
    for spec in cfg.sources:
        length = dataset.sequence_length(geo_ids[0], spec.name)
        if frames_override is not None:
            indices = spaced_frames(length, frames_override)
        elif rng is None:
            if settings.frame_sampling == "single_frame":
                indices = np.full(3, length // 2, dtype=np.int64)  # deterministic single-frame clip
            else:
                indices = spaced_frames(length, min(length, settings.frames_per_sample))
        else:
            indices = _frames_for(settings, length, rng)
        clips[spec.name] = _stack_clips(dataset, geo_ids, spec.name, indices)
    return clips


def _label_batch(dataset: SceneDataset, geo_ids: Sequence[str]) -> torch.Tensor:
    return torch.from_numpy(np.stack([dataset.load_label(g) for g in geo_ids]).astype(np.int64))


def finetune(
    cfg: RunConfig,
    data_root,
    out_dir,
    *,
    init: Optional[CheckpointBundle] = None,
    scratch: bool = False,
) -> CheckpointBundle:
    """Task finetuning with hard-mined cross-entropy.

    ``scratch=True`` trains from random initialization (the no-pretrain
    baseline); otherwise ``init`` supplies pretrained backbone weights.
    The checkpoint retains whichever epoch scored best on validation.
    """
    settings = cfg.training.finetune
    out = Path(out_dir)
    _write_run_meta(out, cfg, "finetune")
    dataset = SceneDataset(data_root)
    _validate_dataset(cfg, dataset)
    if scratch and init is not None:
        raise ValueError("scratch mode and an init checkpoint are mutually exclusive")

    set_global_seed(cfg.training.seed + 1)
    model = build_mapping_model(cfg, init=None if scratch else init)
    for prefix in settings.freeze:
        for name, param in model.named_parameters():
            if name.startswith(prefix):
                param.requires_grad_(False)
    optimizer = torch.optim.AdamW(
        [p for p in model.parameters() if p.requires_grad],
        lr=settings.learning_rate,
        weight_decay=settings.weight_decay,
    )
    rng = np.random.default_rng(np.random.SeedSequence([cfg.training.seed, 303]))

    train_ids = reduced_subset(dataset.geo_ids("train"), settings.data_fraction, cfg.training.seed)
    val_ids = dataset.geo_ids("val") or train_ids
    if not train_ids:
        raise ValueError("no training tiles in the dataset")

    log_path = out / "finetune_log.jsonl"
    val_scores: List[float] = []
    best_state = None
    with open(log_path, "w") as log_fh:
        for epoch in range(settings.epochs):
            model.train()
            order = rng.permutation(len(train_ids))
            epoch_loss = 0.0
            steps = 0
            for start in range(0, len(order), settings.batch_size):
                batch_ids = [train_ids[i] for i in order[start : start + settings.batch_size]]
                clips = _model_batch(dataset, cfg, batch_ids, rng)
                labels = _label_batch(dataset, batch_ids)
                logits = model(clips)
                loss = ce_loss_hard_mining(
                    logits, labels,
                    keep_fraction=settings.keep_fraction,
                    min_kept=settings.min_kept,
                    ignore_index=settings.ignore_index,
                )
                optimizer.zero_grad(set_to_none=True)
                loss.backward()
                if settings.grad_clip and settings.grad_clip > 0:
                    torch.nn.utils.clip_grad_norm_(model.parameters(), settings.grad_clip)
                optimizer.step()
                epoch_loss += float(loss.detach())
                steps += 1
            score = _validation_macro_f1(model, dataset, cfg, val_ids)
            val_scores.append(score)
            if select_best(val_scores) == epoch:
                best_state = {k: v.detach().clone() for k, v in model.state_dict().items()}
            log_fh.write(json.dumps({"epoch": epoch + 1, "loss": epoch_loss / max(1, steps), "val_macro_f1": score}) + "\n")
    best_epoch = select_best(val_scores)
    model.load_state_dict(best_state)
    bundle = bundle_from_modules(model, None, {**_metadata(cfg, best_epoch + 1), "best_epoch": best_epoch + 1})
    save_checkpoint(out / "checkpoints" / "best", bundle)
    return bundle


@torch.no_grad()
def _validation_macro_f1(model: MappingModel, dataset: SceneDataset, cfg: RunConfig, geo_ids: Sequence[str]) -> float:
    from .evaluation import confusion, metrics

    settings = cfg.training.finetune
    model.eval()
    counts = None
    for gid in geo_ids:
        clips = _model_batch(dataset, cfg, [gid], rng=None)
        pred = model(clips).argmax(dim=1).squeeze(0).numpy()
        gt = dataset.load_label(gid).astype(np.int64)
        c = confusion(pred, gt, settings.num_classes, ignore_index=settings.ignore_index)
        counts = c if counts is None else counts.merge(c)
    return metrics(counts)["macro"]["f1"]


@torch.no_grad()
def predict_tile(
    model: MappingModel,
    dataset: SceneDataset,
    cfg: RunConfig,
    geo_id: str,
    *,
    frames_override: Optional[int] = None,
):
    """Class map (uint8 [H, W]) and per-class probabilities for one tile."""
    model.eval()
    clips = _model_batch(dataset, cfg, [geo_id], rng=None, frames_override=frames_override)
    logits = model(clips).squeeze(0)
    probs = torch.softmax(logits, dim=0)
    pred = logits.argmax(dim=0).to(torch.uint8)
    return pred.numpy(), probs.numpy()
