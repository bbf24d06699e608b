"""Checkpoint directory format with bit-exact round-trips.

A checkpoint is a directory holding ``manifest.json`` plus one flat
little-endian float32 binary per parameter group (role)::

    manifest.json   {"format_version", "metadata", "tensors": {name:
                     {"shape", "dtype", "offset", "role"}}, "int_state"}
    student.bin     concatenated float32 tensors, byte offsets per manifest
    teacher.bin     present only when a teacher was trained

Integer-valued module state (batch-norm step counters) cannot live in a
float32 binary; it is recorded exactly under ``int_state``. Writes are
atomic: a temp directory is renamed into place.
"""

from __future__ import annotations

import json
import os
import shutil
import tempfile
from pathlib import Path
from typing import Dict, Mapping, Optional

import numpy as np
import torch

from .structures import CheckpointBundle

FORMAT_VERSION = 1


def module_arrays(module: torch.nn.Module) -> Dict[str, np.ndarray]:
    """Float state_dict of a module as name -> float32 numpy array."""
    out = {}
    for name, tensor in module.state_dict().items():
        if tensor.is_floating_point():
            out[name] = tensor.detach().cpu().to(torch.float32).numpy().copy()
    return out


def module_int_state(module: torch.nn.Module) -> Dict[str, int]:
    out = {}
    for name, tensor in module.state_dict().items():
        if not tensor.is_floating_point():
            if tensor.numel() != 1:
                raise ValueError(f"unsupported non-scalar integer state {name!r}")
            out[name] = int(tensor.item())
    return out


def bundle_from_modules(
    student: torch.nn.Module,
    teacher: Optional[torch.nn.Module],
    metadata: Mapping,
) -> CheckpointBundle:
    return CheckpointBundle(
        student=module_arrays(student),
        teacher=module_arrays(teacher) if teacher is not None else None,
        metadata={**dict(metadata), "int_state": module_int_state(student)},
    )


def apply_to_module(module: torch.nn.Module, params: Mapping[str, np.ndarray], int_state: Optional[Mapping[str, int]] = None, strict: bool = True) -> None:
    """Load a parameter map into a module; mismatched shapes are rejected
    with every offending key listed."""
    state = module.state_dict()
    float_keys = {k for k, v in state.items() if v.is_floating_point()}
    missing = sorted(float_keys - set(params))
    unexpected = sorted(set(params) - float_keys)
    if strict and (missing or unexpected):
        raise ValueError(f"checkpoint key mismatch: missing {missing}, unexpected {unexpected}")
    bad = [
        f"{k}: checkpoint {tuple(params[k].shape)} vs model {tuple(state[k].shape)}"
        for k in sorted(float_keys & set(params))
        if tuple(params[k].shape) != tuple(state[k].shape)
    ]
    if bad:
        raise ValueError("incompatible checkpoint shapes: " + "; ".join(bad))
    new_state = dict(state)
    for k in float_keys & set(params):
        new_state[k] = torch.from_numpy(np.ascontiguousarray(params[k])).to(state[k].dtype)
    for k, v in (int_state or {}).items():
        if k in new_state:
            new_state[k] = torch.tensor(v, dtype=state[k].dtype)
    module.load_state_dict(new_state)


def save_checkpoint(directory, bundle: CheckpointBundle) -> Path:
    directory = Path(directory)
    directory.parent.mkdir(parents=True, exist_ok=True)
    tensors = {}
    tmp = Path(tempfile.mkdtemp(dir=directory.parent, prefix=".ckpt-"))
    try:
        for role in bundle.roles:
            params = bundle.student if role == "student" else bundle.teacher
            offset = 0
            with open(tmp / f"{role}.bin", "wb") as fh:
                for name in sorted(params):
                    arr = np.ascontiguousarray(params[name], dtype="<f4")
                    fh.write(arr.tobytes())
                    tensors[f"{role}/{name}"] = {
                        "shape": list(arr.shape),
                        "dtype": "float32",
                        "offset": offset,
                        "role": role,
                    }
                    offset += arr.nbytes
        manifest = {
            "format_version": FORMAT_VERSION,
            "metadata": {k: v for k, v in bundle.metadata.items() if k != "int_state"},
            "int_state": dict(bundle.metadata.get("int_state", {})),
            "tensors": tensors,
        }
        (tmp / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
        if directory.exists():
            shutil.rmtree(directory)
        os.replace(tmp, directory)
    finally:
        if tmp.exists():
            shutil.rmtree(tmp, ignore_errors=True)
    return directory


def load_checkpoint(directory) -> CheckpointBundle:
    directory = Path(directory)
    manifest_path = directory / "manifest.json"
    if not manifest_path.exists():
        raise FileNotFoundError(f"no manifest.json under {directory}")
    manifest = json.loads(manifest_path.read_text())
    if manifest.get("format_version") != FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint format version {manifest.get('format_version')}")
    blobs = {}
    roles = sorted({spec["role"] for spec in manifest["tensors"].values()})
    for role in roles:
        blobs[role] = (directory / f"{role}.bin").read_bytes()
    params: Dict[str, Dict[str, np.ndarray]] = {role: {} for role in roles}
    for key, spec in manifest["tensors"].items():
        role, name = key.split("/", 1)
        count = int(np.prod(spec["shape"])) if spec["shape"] else 1
        arr = np.frombuffer(blobs[role], dtype="<f4", count=count, offset=spec["offset"])
        params[role][name] = arr.reshape(spec["shape"]).copy()
    metadata = dict(manifest.get("metadata", {}))
    metadata["int_state"] = {k: int(v) for k, v in manifest.get("int_state", {}).items()}
    return CheckpointBundle(
        student=params.get("student", {}),
        teacher=params.get("teacher"),
        metadata=metadata,
    )
