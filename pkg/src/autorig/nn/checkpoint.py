"""Checkpoint archive: one zip holding manifest.json plus params/<name>.npy.

Weights are stored float32 little-endian in npy format so a checkpoint can
be inspected with nothing but numpy and the zipfile module.
"""

from __future__ import annotations

import io
import json
import zipfile

import numpy as np

MANIFEST_NAME = "manifest.json"
PARAM_PREFIX = "params/"


def save_checkpoint(path, arrays: dict[str, np.ndarray], manifest: dict) -> None:
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_DEFLATED) as zf:
        zf.writestr(MANIFEST_NAME, json.dumps(manifest, indent=2, sort_keys=True))
        for name in sorted(arrays):
            arr = np.ascontiguousarray(arrays[name], dtype="<f4")
            buf = io.BytesIO()
            np.save(buf, arr)
            zf.writestr(PARAM_PREFIX + name + ".npy", buf.getvalue())


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    arrays: dict[str, np.ndarray] = {}
    with zipfile.ZipFile(path, "r") as zf:
        names = set(zf.namelist())
        if MANIFEST_NAME not in names:
            raise ValueError(f"{path}: not a checkpoint (no {MANIFEST_NAME})")
        manifest = json.loads(zf.read(MANIFEST_NAME).decode("utf-8"))
        for entry in sorted(names):
            if entry.startswith(PARAM_PREFIX) and entry.endswith(".npy"):
                key = entry[len(PARAM_PREFIX):-len(".npy")]
                arrays[key] = np.load(io.BytesIO(zf.read(entry)))
    return arrays, manifest
