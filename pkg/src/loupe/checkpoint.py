"""Checkpoint directories: text manifest + one little-endian float32 blob.

    ckpt/
      manifest.txt   "step <n>" then one "<name> <d0>x<d1>... <byte offset>" per array
      params.bin     arrays back to back, float32 LE, row-major
      config.txt     resolved RunConfig in key = value form
"""
from __future__ import annotations

import os
import shutil
from pathlib import Path
from typing import Dict, Tuple

import numpy as np

from . import config as config_mod
from .backbone import ModelState, param_shapes
from .errors import CompatibilityError

MANIFEST = "manifest.txt"
BLOB = "params.bin"
CONFIG = "config.txt"


def save(path, state: ModelState, cfg: config_mod.RunConfig) -> None:
    """Write-then-rename so a crash never leaves a partial checkpoint at ``path``."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    old = path.with_name(path.name + ".old")
    for p in (tmp, old):
        if p.exists():
            shutil.rmtree(p)
    tmp.mkdir(parents=True)
    lines = [f"step {state.step}"]
    offset = 0
    with open(tmp / BLOB, "wb") as fh:
        for name, arr in state.params.items():
            buf = np.ascontiguousarray(arr, dtype="<f4").tobytes()
            shape = "x".join(str(d) for d in arr.shape)
            lines.append(f"{name} {shape} {offset}")
            fh.write(buf)
            offset += len(buf)
    (tmp / MANIFEST).write_text("\n".join(lines) + "\n", encoding="utf-8")
    # output location is not part of the model; leaving it out keeps reruns byte-identical
    text = "".join(l for l in config_mod.dump_text(cfg).splitlines(True) if not l.startswith("run.out_dir"))
    (tmp / CONFIG).write_text(text, encoding="utf-8")
    if path.exists():
        os.replace(path, old)
    os.replace(tmp, path)
    if old.exists():
        shutil.rmtree(old)


def read_manifest(path) -> Tuple[int, Dict[str, Tuple[tuple, int]]]:
    lines = (Path(path) / MANIFEST).read_text(encoding="utf-8").splitlines()
    step = int(lines[0].split()[1])
    entries = {}
    for line in lines[1:]:
        name, shape, offset = line.split()
        dims = tuple(int(d) for d in shape.split("x")) if shape else ()
        entries[name] = (dims, int(offset))
    return step, entries


def load(path, precision: str = "single") -> Tuple[ModelState, config_mod.RunConfig]:
    path = Path(path)
    if not (path / MANIFEST).exists():
        raise FileNotFoundError(f"{path}: no checkpoint manifest")
    cfg = config_mod.load(path / CONFIG)
    step, entries = read_manifest(path)
    expected = param_shapes(cfg.backbone)
    mismatches = [
        f"{k}: config {expected.get(k)} vs checkpoint {entries.get(k, (None,))[0]}"
        for k in sorted(set(expected) | set(entries))
        if expected.get(k) != entries.get(k, (None,))[0]
    ]
    if mismatches:
        raise CompatibilityError("checkpoint does not match its config:\n  " + "\n  ".join(mismatches))
    blob = (path / BLOB).read_bytes()
    dtype = np.float32 if precision == "single" else np.float64
    params = {}
    for name in expected:
        dims, off = entries[name]
        n = int(np.prod(dims))
        params[name] = np.frombuffer(blob, dtype="<f4", count=n, offset=off).reshape(dims).astype(dtype)
    return ModelState(config=cfg.backbone, params=params, step=step, seed=cfg.seed), cfg
