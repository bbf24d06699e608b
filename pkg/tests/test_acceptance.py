"""Acceptance suite: one test per criterion, each printing a PASS line.

Run with ``pytest tests/test_acceptance.py -v -s`` to see the per-criterion
lines as they complete. Everything runs on CPU; the whole module stays
within a desk-scale time budget.
"""

import json
import subprocess
import sys
import tempfile
import time
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest
import torch

from phenomap import checkpoint as ckpt
from phenomap.backbone import (
    MultiSourceEncoder,
    SwinBlock3d,
    stage_shapes,
    synchronized_gather_pool,
    temporal_patch_size,
)
from phenomap.config import ModelConfig, from_dict
from phenomap.evaluation import (
    confusion,
    flops_comparison,
    metrics,
    wallclock_forward_seconds,
)
from phenomap.fractions import ClassMapping, compute_fractions
from phenomap.pretrain import (
    PretrainModel,
    l1_fraction_loss,
    ema_update,
    make_teacher,
    pretrain_step,
)
from phenomap.synthetic import SceneRecipe, SceneDataset, gen_scene, write_dataset
from phenomap.training import (
    build_mapping_model,
    finetune,
    predict_tile,
    pretrain,
    set_global_seed,
)

from test_backbone import loop_gather_pool, _dense_attention_oracle
from test_evaluation import brute_force_counts
from test_fractions import brute_force_fractions


def _report(num, name, detail):
    print(f"\nACCEPTANCE {num:02d} {name}: PASS ({detail})")


def _small_encoder_config(**model_extra):
    return from_dict(
        {
            "model": {"embed_dim": 8, "depths": [1, 1, 1, 1], "heads": [2, 2, 2, 2], **model_extra},
            "sources": [{"name": "sentinel2", "bands": 2, "tile_size": 96}],
        }
    )


def _task_config(seed, *, sampling, epochs=40, profile="phase", cadence=16, lr=1e-3, keep=1.0, model_extra=None, data_extra=None):
    return from_dict(
        {
            "model": {"embed_dim": 16, "depths": [1, 1, 1, 1], "heads": [2, 2, 2, 2], **(model_extra or {})},
            "sources": [{"name": "sentinel2", "bands": 4, "tile_size": 32}],
            "training": {
                "seed": seed,
                "finetune": {
                    "epochs": epochs,
                    "batch_size": 4,
                    "learning_rate": lr,
                    "num_classes": 2,
                    "min_kept": 64,
                    "keep_fraction": keep,
                    "frame_sampling": sampling,
                },
            },
            "data": {
                "tiles": 24,
                "classes": 2,
                "noise": 0.1,
                "cadences": {"sentinel2": cadence},
                "profile": profile,
                "val_fraction": 0.167,
                "test_fraction": 0.333,
                **(data_extra or {}),
            },
        }
    )


def _finetuned_model(cfg, data_dir):
    bundle = finetune(cfg, data_dir, Path(tempfile.mkdtemp()), scratch=True)
    model = build_mapping_model(cfg)
    ckpt.apply_to_module(model, bundle.student, int_state=bundle.metadata.get("int_state"))
    model.eval()
    return model


def _split_f1(model, dataset, cfg, split, frames_override=None, num_classes=2):
    counts = None
    for gid in dataset.geo_ids(split):
        pred, probs = predict_tile(model, dataset, cfg, gid, frames_override=frames_override)
        assert np.isfinite(probs).all()
        c = confusion(pred, dataset.load_label(gid).astype(np.int64), num_classes)
        counts = c if counts is None else counts.merge(c)
    return metrics(counts)["macro"]["f1"]


# ---------------------------------------------------------------------------
# 1. shape law
# ---------------------------------------------------------------------------


def test_01_shape_law_exhaustive():
    start = time.time()
    cfg = _small_encoder_config()
    enc = MultiSourceEncoder(cfg.model, cfg.sources)
    checked = 0
    with torch.no_grad():
        for size in (64, 96):
            for T in range(3, 33):
                feats = enc(torch.zeros(1, 2, T, size, size), "sentinel2")
                got = [tuple(f.shape)[1:] for f in feats]
                want = stage_shapes(cfg.model, T, size, size, temporal_patch_size(T))
                assert got == want, (T, size, got, want)
                checked += 1
    elapsed = time.time() - start
    assert elapsed < 60, f"shape-law sweep took {elapsed:.0f}s"
    _report(1, "shape law", f"{checked} (T, size) grids exact in {elapsed:.0f}s")


# ---------------------------------------------------------------------------
# 2. merge oracle
# ---------------------------------------------------------------------------


def test_02_merge_oracle_100_random_tensors():
    rng = np.random.default_rng(2024)
    for i in range(100):
        T = int(rng.integers(1, 9))
        H = int(rng.choice([2, 4, 8, 16]))
        W = int(rng.choice([2, 4, 8, 16]))
        C = int(rng.integers(1, 9))
        x = rng.normal(size=(T, H, W, C)).astype(np.float32)
        got = synchronized_gather_pool(torch.from_numpy(x), 2, 2).numpy()
        want = loop_gather_pool(x, 2, 2)
        assert got.shape == want.shape
        assert np.array_equal(got, want), f"tensor {i} shape {(T, H, W, C)}"
    _report(2, "merge oracle", "pre-projection gather+pool exact on 100 random tensors")


# ---------------------------------------------------------------------------
# 3. fraction oracle
# ---------------------------------------------------------------------------


def test_03_fraction_oracle_1000_maps():
    rng = np.random.default_rng(3)
    mapping = ClassMapping({1: 1, 2: 2, 3: 3, 7: 6, 9: 8, 11: 4})
    for _ in range(1000):
        h, w = int(rng.integers(1, 17)), int(rng.integers(1, 17))
        m = rng.integers(0, 13, size=(h, w))
        got = compute_fractions(m, mapping).values
        want = brute_force_fractions(m, mapping)
        assert np.array_equal(got, want)
    _report(3, "fraction oracle", "compute_fractions exact vs per-pixel counting on 1000 maps")


# ---------------------------------------------------------------------------
# 4. attention degeneracy
# ---------------------------------------------------------------------------


def test_04_attention_degeneracy_dense_oracle():
    torch.manual_seed(4)
    block = SwinBlock3d(dim=8, heads=2, window=(2, 4), shifted=False).eval()
    x = torch.randn(1, 2, 4, 4, 8)
    with torch.no_grad():
        got = block(x)
        want = _dense_attention_oracle(block, x)
    rel = float((got - want).norm() / want.norm())
    assert rel <= 1e-5
    _report(4, "attention degeneracy", f"whole-map window vs dense attention, rel err {rel:.2e}")


# ---------------------------------------------------------------------------
# 5. gradient check
# ---------------------------------------------------------------------------


def test_05_gradient_check_finite_differences():
    torch.manual_seed(5)
    cfg = from_dict(
        {
            "model": {"embed_dim": 8, "depths": [1, 1, 1, 1], "heads": [2, 2, 2, 2], "window": [2, 2]},
            "sources": [{"name": "s", "bands": 3, "tile_size": 32}],
        }
    )
    model = PretrainModel(MultiSourceEncoder(cfg.model, cfg.sources), cfg.model).double()
    x = torch.randn(1, 3, 4, 32, 32, dtype=torch.float64)
    target = torch.rand(1, 9, dtype=torch.float64)
    target = target / target.sum()

    def loss_fn():
        return l1_fraction_loss(model(x, "s"), target)

    loss_fn().backward()
    params = [(n, p) for n, p in model.named_parameters() if p.grad is not None]
    rng = np.random.default_rng(55)
    worst = 0.0
    h = 1e-3
    for _ in range(30):
        name, p = params[int(rng.integers(len(params)))]
        flat = p.detach().reshape(-1)
        i = int(rng.integers(flat.numel()))
        analytic = float(p.grad.reshape(-1)[i])
        with torch.no_grad():
            orig = float(flat[i])
            flat[i] = orig + h
            up = float(loss_fn())
            flat[i] = orig - h
            down = float(loss_fn())
            flat[i] = orig
        numeric = (up - down) / (2 * h)
        rel = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-8)
        assert rel < 1e-3, f"{name}[{i}]: analytic {analytic:.3e} vs numeric {numeric:.3e}"
        worst = max(worst, rel)
    _report(5, "gradient check", f"30 coordinates, worst rel err {worst:.2e}")


# ---------------------------------------------------------------------------
# 6. EMA law
# ---------------------------------------------------------------------------


def test_06_ema_geometric_decay():
    teacher = {"w": torch.ones(1, dtype=torch.float64)}
    student = {"w": torch.zeros(1, dtype=torch.float64)}
    for _ in range(1000):
        ema_update(teacher, student, 0.001)
    value = float(teacher["w"])
    assert value == pytest.approx(0.999**1000, rel=1e-10)
    assert abs(value - 0.36770) <= 1e-4
    _report(6, "EMA law", f"1000-step value {value:.6f} vs 0.999^1000 = {0.999**1000:.6f}")


# ---------------------------------------------------------------------------
# 7. mean-teacher robustness
# ---------------------------------------------------------------------------


def _teacher_vs_student_mae(seed):
    cfg = from_dict(
        {
            "model": {"embed_dim": 8, "depths": [1, 1, 1, 1], "heads": [2, 2, 2, 2], "window": [2, 4]},
            "sources": [{"name": "sentinel2", "bands": 4, "tile_size": 32}],
            "data": {"classes": 3, "noise": 0.5, "cadences": {"sentinel2": 8}},
        }
    )
    recipe = SceneRecipe.from_config(cfg)
    n_train = 20
    scenes = [gen_scene(recipe, i) for i in range(n_train + 16)]
    clips = torch.from_numpy(np.stack([s.images["sentinel2"] for s in scenes]))
    fracs = torch.from_numpy(np.stack([s.fraction.values for s in scenes])).float()
    train_x, train_p = clips[:n_train], fracs[:n_train].clone()
    test_x, test_p = clips[n_train:], fracs[n_train:]
    rng = np.random.default_rng(seed)
    for i in rng.choice(n_train, size=int(round(0.2 * n_train)), replace=False):
        p = rng.random(9)
        train_p[i] = torch.from_numpy(p / p.sum()).float()
    set_global_seed(seed)
    student = PretrainModel(MultiSourceEncoder(cfg.model, cfg.sources), cfg.model)
    teacher = make_teacher(student)
    opt = torch.optim.Adam(student.parameters(), lr=5e-3)
    for _ in range(1600):
        idx = rng.choice(n_train, size=4, replace=False)
        pretrain_step(student, teacher, opt, {"sentinel2": (train_x[idx], train_p[idx])}, teacher_step=0.05)
    with torch.no_grad():
        s_mae = float((student(test_x, "sentinel2") - test_p).abs().mean())
        t_mae = float((teacher(test_x, "sentinel2") - test_p).abs().mean())
    return s_mae, t_mae


def test_07_mean_teacher_robustness():
    start = time.time()
    results = [_teacher_vs_student_mae(seed) for seed in range(5)]
    student_mae = float(np.mean([r[0] for r in results]))
    teacher_mae = float(np.mean([r[1] for r in results]))
    elapsed = time.time() - start
    assert teacher_mae <= student_mae, results
    assert elapsed < 600, f"took {elapsed:.0f}s"
    _report(
        7,
        "mean-teacher robustness",
        f"teacher MAE {teacher_mae:.4f} <= student MAE {student_mae:.4f} over 5 seeds in {elapsed:.0f}s",
    )


# ---------------------------------------------------------------------------
# 8. overfit sanity
# ---------------------------------------------------------------------------


def test_08_overfit_eight_tiles():
    start = time.time()
    epochs = 100  # within the 200-epoch allowance
    cfg = from_dict(
        {
            "model": {"embed_dim": 32, "depths": [2, 2, 2, 2], "heads": [2, 2, 4, 4]},
            "sources": [{"name": "sentinel2", "bands": 4, "tile_size": 32}],
            "training": {
                "seed": 0,
                "finetune": {
                    "epochs": epochs,
                    "batch_size": 4,
                    "learning_rate": 1e-3,
                    "num_classes": 2,
                    "min_kept": 64,
                    "keep_fraction": 0.25,
                },
            },
            "data": {
                "tiles": 8,
                "classes": 2,
                "noise": 0.05,
                "cadences": {"sentinel2": 16},
                "val_fraction": 0.0,
                "test_fraction": 0.0,
                "label_block": 4,
            },
        }
    )
    data_dir = Path(tempfile.mkdtemp())
    write_dataset(SceneRecipe.from_config(cfg), 8, data_dir, val_fraction=0, test_fraction=0, min_len=16)
    dataset = SceneDataset(data_dir)
    model = _finetuned_model(cfg, data_dir)
    f1 = _split_f1(model, dataset, cfg, "train")
    elapsed = time.time() - start
    assert f1 >= 0.99, f"train macro F1 {f1:.4f}"
    assert elapsed < 600, f"took {elapsed:.0f}s"
    _report(8, "overfit sanity", f"train F1 {f1:.4f} on 8 tiles after {epochs} epochs in {elapsed:.0f}s")


# ---------------------------------------------------------------------------
# 9. temporal necessity
# ---------------------------------------------------------------------------


def test_09_temporal_necessity():
    start = time.time()
    base = _task_config(0, sampling="fixed16")
    data_dir = Path(tempfile.mkdtemp())
    write_dataset(SceneRecipe.from_config(base), 24, data_dir, val_fraction=0.167, test_fraction=0.333, min_len=16)
    dataset = SceneDataset(data_dir)
    gaps = []
    for seed in range(3):
        full_cfg = _task_config(seed, sampling="fixed16")
        single_cfg = _task_config(seed, sampling="single_frame")
        f1_full = _split_f1(_finetuned_model(full_cfg, data_dir), dataset, full_cfg, "test")
        f1_single = _split_f1(_finetuned_model(single_cfg, data_dir), dataset, single_cfg, "test")
        gaps.append(100 * (f1_full - f1_single))
    elapsed = time.time() - start
    assert min(gaps) >= 10.0, gaps
    _report(
        9,
        "temporal necessity",
        f"full vs single-frame F1 gaps {[f'{g:.1f}' for g in gaps]} points over 3 seeds in {elapsed:.0f}s",
    )


# ---------------------------------------------------------------------------
# 10. variable-length robustness
# ---------------------------------------------------------------------------


def test_10_variable_length_robustness():
    start = time.time()
    cfg = _task_config(0, sampling="variable", profile="default", cadence=36)
    data_dir = Path(tempfile.mkdtemp())
    write_dataset(SceneRecipe.from_config(cfg), 24, data_dir, val_fraction=0.167, test_fraction=0.333, min_len=16)
    dataset = SceneDataset(data_dir)
    model = _finetuned_model(cfg, data_dir)
    f1_by_length = {}
    for T in range(3, 33):
        f1_by_length[T] = _split_f1(model, dataset, cfg, "test", frames_override=T)
    diff = 100 * abs(f1_by_length[16] - f1_by_length[24])
    elapsed = time.time() - start
    assert diff <= 5.0, f1_by_length
    _report(
        10,
        "variable-length robustness",
        f"finite predictions for T=3..32; F1(16)={f1_by_length[16]:.3f} vs F1(24)={f1_by_length[24]:.3f} "
        f"(diff {diff:.1f} pts) in {elapsed:.0f}s",
    )


# ---------------------------------------------------------------------------
# 11. FLOP ablation
# ---------------------------------------------------------------------------


def test_11_flop_ablation():
    cfg = ModelConfig()  # toy defaults
    for T in range(2, 33):
        comp = flops_comparison(cfg, T, 64, 64)
        assert comp["enabled"]["total"] < comp["disabled"]["total"], T
    at16 = flops_comparison(cfg, 16, 64, 64)
    assert at16["ratio"] <= 0.7, at16["ratio"]
    spec = from_dict({"sources": [{"name": "sentinel2", "bands": 10, "tile_size": 64}]}).sources[0]
    enabled_s = wallclock_forward_seconds(cfg, spec, 16, repeats=3)
    disabled_s = wallclock_forward_seconds(replace(cfg, temporal_downsampling=False), spec, 16, repeats=3)
    _report(
        11,
        "FLOP ablation",
        f"enabled < disabled for every T in 2..32; ratio at T=16 {at16['ratio']:.3f} <= 0.7; "
        f"wall-clock forward {enabled_s * 1e3:.0f} ms vs {disabled_s * 1e3:.0f} ms (reported, not asserted)",
    )


# ---------------------------------------------------------------------------
# 12. metrics oracle
# ---------------------------------------------------------------------------


def test_12_metrics_oracle_1000_pairs():
    rng = np.random.default_rng(12)
    for _ in range(1000):
        k = int(rng.integers(2, 6))
        h, w = int(rng.integers(2, 8)), int(rng.integers(2, 8))
        pred = rng.integers(0, k, size=(h, w))
        gt = rng.integers(0, k, size=(h, w))
        counts = confusion(pred, gt, k)
        tp, fp, fn, tn, total = brute_force_counts(pred, gt, k)
        assert counts.tp.tolist() == tp and counts.fp.tolist() == fp
        assert counts.fn.tolist() == fn and counts.tn.tolist() == tn and counts.total == total
        rep = metrics(counts)
        for cls in range(k):
            p = tp[cls] / (tp[cls] + fp[cls]) if tp[cls] + fp[cls] else 0.0
            r = tp[cls] / (tp[cls] + fn[cls]) if tp[cls] + fn[cls] else 0.0
            f1 = 2 * p * r / (p + r) if p + r else 0.0
            assert rep["classes"][cls]["precision"] == p
            assert rep["classes"][cls]["recall"] == r
            assert rep["classes"][cls]["f1"] == f1
        assert rep["overall_accuracy"] == sum(tp) / total
    case = metrics(
        confusion(
            np.concatenate([np.ones(8), np.ones(2), np.zeros(2), np.zeros(88)]).reshape(10, 10).astype(int),
            np.concatenate([np.ones(8), np.zeros(2), np.ones(2), np.zeros(88)]).reshape(10, 10).astype(int),
            2,
        ),
        positive_class=1,
    )
    assert case["positive"]["precision"] == pytest.approx(0.8)
    assert case["positive"]["recall"] == pytest.approx(0.8)
    assert case["positive"]["f1"] == pytest.approx(0.8)
    assert case["overall_accuracy"] == pytest.approx(0.96)
    _report(12, "metrics oracle", "metrics . confusion exact vs brute force on 1000 map pairs; TP8/FP2/FN2/TN88 case OK")


# ---------------------------------------------------------------------------
# 13. determinism
# ---------------------------------------------------------------------------


def test_13_pretrain_determinism_200_iterations():
    start = time.time()
    cfg = from_dict(
        {
            "model": {"embed_dim": 8, "depths": [1, 1, 1, 1], "heads": [2, 2, 2, 2], "window": [2, 4]},
            "sources": [{"name": "sentinel2", "bands": 4, "tile_size": 32}],
            "training": {"seed": 11, "pretrain": {"iterations": 200, "batch_size": 2, "warmup_iterations": 20}},
            "data": {"tiles": 6, "classes": 2, "cadences": {"sentinel2": 16}, "val_fraction": 0.0, "test_fraction": 0.0},
        }
    )
    root = Path(tempfile.mkdtemp())
    write_dataset(SceneRecipe.from_config(cfg), 6, root, val_fraction=0, test_fraction=0, min_len=16)
    out_a, out_b = root / "run_a", root / "run_b"
    pretrain(cfg, root, out_a)
    pretrain(cfg, root, out_b)
    for rel in ("pretrain_log.jsonl", "checkpoints/final/student.bin", "checkpoints/final/teacher.bin", "checkpoints/final/manifest.json"):
        assert (out_a / rel).read_bytes() == (out_b / rel).read_bytes(), rel
    _report(13, "determinism", f"two 200-iteration runs bit-identical (logs + checkpoints) in {time.time() - start:.0f}s")


# ---------------------------------------------------------------------------
# 14. end-to-end CLI
# ---------------------------------------------------------------------------


def _cli(*args):
    proc = subprocess.run(
        [sys.executable, "-m", "phenomap", *args], capture_output=True, text=True, timeout=600
    )
    assert proc.returncode == 0, f"{args}: {proc.stderr}"
    return proc.stdout


def test_14_end_to_end_cli():
    start = time.time()
    work = Path(tempfile.mkdtemp())
    config = {
        "model": {"embed_dim": 16, "depths": [1, 1, 1, 1], "heads": [2, 2, 2, 2]},
        "sources": [
            {"name": "sentinel2", "bands": 4, "tile_size": 64},
            {"name": "modis", "bands": 3, "tile_size": 32},
        ],
        "training": {
            "seed": 0,
            "pretrain": {"iterations": 40, "batch_size": 2, "warmup_iterations": 10},
            "finetune": {"epochs": 6, "batch_size": 2, "num_classes": 2, "min_kept": 64, "learning_rate": 1e-3},
        },
        "data": {
            "tiles": 12,
            "classes": 2,
            "noise": 0.05,
            "cadences": {"sentinel2": 20, "modis": 24},
            "val_fraction": 0.17,
            "test_fraction": 0.25,
        },
    }
    cfg_path = work / "config.json"
    cfg_path.write_text(json.dumps(config))
    data_dir, pre_dir, ft_dir, eval_dir, pred_dir = (work / n for n in ("data", "pre", "ft", "eval", "pred"))

    _cli("gen-data", "--config", str(cfg_path), "--out", str(data_dir))
    _cli("pretrain", "--config", str(cfg_path), "--data", str(data_dir), "--out", str(pre_dir))
    _cli(
        "finetune", "--config", str(cfg_path), "--data", str(data_dir), "--out", str(ft_dir),
        "--init", str(pre_dir / "checkpoints" / "final"),
    )
    _cli(
        "evaluate", "--config", str(cfg_path), "--data", str(data_dir), "--out", str(eval_dir),
        "--checkpoint", str(ft_dir / "checkpoints" / "best"), "--split", "test",
    )
    report = json.loads((eval_dir / "report.json").read_text())
    assert "macro" in report and "overall_accuracy" in report and report["tiles"] >= 1
    assert (eval_dir / "f1_bars.png").exists()
    assert (eval_dir / "prediction_panel.png").exists()

    _cli(
        "predict", "--config", str(cfg_path), "--data", str(data_dir), "--out", str(pred_dir),
        "--checkpoint", str(ft_dir / "checkpoints" / "best"), "--probs",
    )
    preds = sorted(pred_dir.glob("*.pred.bin"))
    assert preds, "no prediction written"
    header = json.loads(preds[0].with_suffix(".json").read_text())
    assert header["shape"] == [64, 64]
    assert preds[0].stat().st_size == 64 * 64
    assert (pred_dir / preds[0].name.replace(".pred.bin", ".palette.json")).exists()
    elapsed = time.time() - start
    assert elapsed <= 900, f"pipeline took {elapsed:.0f}s"
    _report(
        14,
        "end-to-end CLI",
        f"gen-data -> pretrain -> finetune -> evaluate -> predict in {elapsed:.0f}s; "
        f"report macro F1 {report['macro']['f1']:.3f}; class map 64x64 written",
    )
