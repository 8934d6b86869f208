"""Checkpoints: a JSON manifest plus one little-endian float32 blob per parameter."""
from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np
import torch
from torch import nn


def save_checkpoint(out_dir, module: nn.Module, meta: dict | None = None, exclude=(), trainable_only=False) -> str:
    """Write every parameter of ``module`` (minus names starting with an ``exclude`` prefix,
    and frozen ones when ``trainable_only``).

    Returns the sha256 of the manifest, which covers every blob hash.
    """
    out = Path(out_dir)
    (out / "params").mkdir(parents=True, exist_ok=True)
    entries = []
    for i, (name, p) in enumerate(module.named_parameters()):
        if any(name.startswith(e) for e in exclude) or (trainable_only and not p.requires_grad):
            continue
        blob = p.detach().cpu().numpy().astype("<f4").tobytes()
        fname = f"params/{i:04d}.f32"
        (out / fname).write_bytes(blob)
        entries.append({
            "name": name,
            "shape": list(p.shape),
            "frozen": not p.requires_grad,
            "file": fname,
            "sha256": hashlib.sha256(blob).hexdigest(),
        })
    manifest = {"params": entries, "meta": meta or {}}
    text = json.dumps(manifest, indent=1, sort_keys=True)
    (out / "manifest.json").write_text(text)
    return hashlib.sha256(text.encode()).hexdigest()


def read_checkpoint(path) -> tuple[dict[str, torch.Tensor], dict[str, bool], dict]:
    root = Path(path)
    manifest = json.loads((root / "manifest.json").read_text())
    state, frozen = {}, {}
    for e in manifest["params"]:
        arr = np.frombuffer((root / e["file"]).read_bytes(), dtype="<f4").reshape(e["shape"])
        state[e["name"]] = torch.from_numpy(arr.astype(np.float32))
        frozen[e["name"]] = e["frozen"]
    return state, frozen, manifest["meta"]


def load_into(module: nn.Module, path, strict: bool = True) -> dict:
    """Copy checkpoint values into ``module`` and restore frozen flags; returns the meta dict."""
    state, frozen, meta = read_checkpoint(path)
    params = dict(module.named_parameters())
    missing = set(params) - set(state)
    if strict and missing:
        raise KeyError(f"checkpoint lacks parameters: {sorted(missing)}")
    with torch.no_grad():
        for name, value in state.items():
            if name not in params:
                if strict:
                    raise KeyError(f"unexpected parameter {name}")
                continue
            params[name].copy_(value.to(params[name].dtype))
            params[name].requires_grad_(not frozen[name])
    return meta


def manifest_hash(path) -> str:
    return hashlib.sha256((Path(path) / "manifest.json").read_bytes()).hexdigest()
