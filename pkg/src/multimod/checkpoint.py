"""Checkpoint directories: parameters, buffers, optimizer state, metadata.

A checkpoint is a directory with one ``.ten`` file per array and a
``manifest.txt`` that names them:

    multimod-checkpoint v1
    meta iter 1200
    meta seed 7
    param color.enc.stem.kernel weight p0000.ten
    buffer color.enc.stem.bn.running_mean b0000.ten
    optim adam_m.color.enc.stem.kernel o0000.ten

Loading restores arrays *into* an already-constructed model of the same
architecture, verifying names and shapes both ways, so a checkpoint can
never silently half-apply.
"""

from __future__ import annotations

import os
from typing import Dict, Iterable, Optional, Tuple

import numpy as np

from .fileio import load_tensor, save_tensor

_HEADER = "multimod-checkpoint v1"


def save_checkpoint(
    path: str,
    named_params: Iterable[Tuple[str, str, object]],
    named_buffers: Iterable[Tuple[str, np.ndarray]],
    optim_arrays: Optional[Dict[str, np.ndarray]] = None,
    meta: Optional[Dict[str, str]] = None,
) -> None:
    """Write everything under ``path`` (created if needed)."""
    os.makedirs(path, exist_ok=True)
    lines = [_HEADER]
    for key, value in (meta or {}).items():
        if any(ch.isspace() for ch in str(key)):
            raise ValueError(f"meta key {key!r} contains whitespace")
        lines.append(f"meta {key} {value}")
    for i, (name, kind, tensor) in enumerate(named_params):
        fname = f"p{i:04d}.ten"
        save_tensor(os.path.join(path, fname), tensor.data)
        lines.append(f"param {name} {kind} {fname}")
    for i, (name, arr) in enumerate(named_buffers):
        fname = f"b{i:04d}.ten"
        save_tensor(os.path.join(path, fname), arr)
        lines.append(f"buffer {name} {fname}")
    for i, (name, arr) in enumerate(sorted((optim_arrays or {}).items())):
        fname = f"o{i:04d}.ten"
        save_tensor(os.path.join(path, fname), arr)
        lines.append(f"optim {name} {fname}")
    with open(os.path.join(path, "manifest.txt"), "w", encoding="ascii") as f:
        f.write("\n".join(lines) + "\n")


def read_manifest(path: str) -> dict:
    manifest = os.path.join(path, "manifest.txt")
    if not os.path.exists(manifest):
        raise FileNotFoundError(f"{path}: no manifest.txt, not a checkpoint")
    out = {"meta": {}, "param": {}, "buffer": {}, "optim": {}}
    with open(manifest, "r", encoding="ascii") as f:
        header = f.readline().strip()
        if header != _HEADER:
            raise ValueError(f"{manifest}: unrecognised header {header!r}")
        for ln, line in enumerate(f, start=2):
            parts = line.split()
            if not parts:
                continue
            rec = parts[0]
            if rec == "meta" and len(parts) >= 3:
                out["meta"][parts[1]] = " ".join(parts[2:])
            elif rec == "param" and len(parts) == 4:
                out["param"][parts[1]] = (parts[2], parts[3])  # kind, file
            elif rec in ("buffer", "optim") and len(parts) == 3:
                out[rec][parts[1]] = parts[2]
            else:
                raise ValueError(f"{manifest}:{ln}: malformed record {line.rstrip()!r}")
    return out


def load_checkpoint(
    path: str,
    named_params: Iterable[Tuple[str, str, object]],
    named_buffers: Iterable[Tuple[str, np.ndarray]],
) -> dict:
    """Restore parameters/buffers in place; return the manifest dict.

    The caller's names must exactly match the stored names (both
    directions), and shapes must agree; dtypes follow the caller's arrays.
    Optimizer arrays are returned under ``"optim_arrays"`` for the trainer
    to reattach.
    """
    man = read_manifest(path)
    params = list(named_params)
    buffers = list(named_buffers)

    have = {name for name, _, _ in params}
    stored = set(man["param"])
    if have != stored:
        missing = sorted(stored - have)
        extra = sorted(have - stored)
        raise ValueError(
            f"{path}: parameter names disagree with the model "
            f"(checkpoint-only: {missing[:5]}, model-only: {extra[:5]})"
        )
    for name, _, tensor in params:
        _, fname = man["param"][name]
        arr = load_tensor(os.path.join(path, fname))
        if arr.shape != tensor.data.shape:
            raise ValueError(
                f"{path}: {name} has shape {arr.shape}, model expects {tensor.data.shape}"
            )
        tensor.data = arr.astype(tensor.data.dtype, copy=False)
        tensor.grad = None

    have_b = {name for name, _ in buffers}
    stored_b = set(man["buffer"])
    if have_b != stored_b:
        raise ValueError(
            f"{path}: buffer names disagree with the model "
            f"({sorted(stored_b ^ have_b)[:5]} ...)"
        )
    for name, arr in buffers:
        fname = man["buffer"][name]
        new = load_tensor(os.path.join(path, fname))
        if new.shape != arr.shape:
            raise ValueError(
                f"{path}: buffer {name} has shape {new.shape}, model expects {arr.shape}"
            )
        arr[...] = new.astype(arr.dtype, copy=False)

    man["optim_arrays"] = {
        name: load_tensor(os.path.join(path, fname))
        for name, fname in man["optim"].items()
    }
    return man
