"""Writers for the workbench's binary container and prototype-bank formats.

This package talks to the workbench only through its on-disk formats, so
the layouts are implemented here independently rather than imported:

Embedding container — little-endian header `<4sIIQIII`: magic b"GOOD",
version (1), flags (bit0 labels, bit1 locals, bit2 normalized), n (u64),
dim, n_classes, n_patches; then n*dim float32 globals, optionally n uint32
labels (0xFFFFFFFF marks out-of-distribution rows), optionally
n*n_patches*dim float32 locals. Row-major throughout.

Prototype bank — header `<4sIIIf`: magic b"GPTB", version (1), n_classes,
dim, tau (f32); then n_classes*dim float32 prototypes.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

GOOD_MAGIC = b"GOOD"
GOOD_VERSION = 1
FLAG_LABELS = 1
FLAG_LOCALS = 2
FLAG_NORMALIZED = 4
OOD_LABEL = 0xFFFFFFFF
_GOOD_HEADER = struct.Struct("<4sIIQIII")

BANK_MAGIC = b"GPTB"
BANK_VERSION = 1
_BANK_HEADER = struct.Struct("<4sIIIf")


def embeddings_blob(globals_: np.ndarray, labels: np.ndarray | None,
                    locals_: np.ndarray | None, n_classes: int,
                    normalized: bool) -> bytes:
    g = np.ascontiguousarray(globals_, dtype="<f4")
    if g.ndim != 2:
        raise ValueError("globals must be a (n, dim) matrix")
    n, dim = g.shape
    if not np.isfinite(g).all():
        raise ValueError("globals contain non-finite entries")
    flags = 0
    parts = []
    if labels is not None:
        lab = np.ascontiguousarray(labels, dtype="<u4")
        if lab.shape != (n,):
            raise ValueError("labels must be one uint32 per row")
        bad = (lab != OOD_LABEL) & (lab >= n_classes)
        if bad.any():
            raise ValueError("labels out of range for n_classes")
        flags |= FLAG_LABELS
        parts.append(lab.tobytes())
    n_patches = 0
    if locals_ is not None:
        loc = np.ascontiguousarray(locals_, dtype="<f4")
        if loc.ndim != 3 or loc.shape[0] != n or loc.shape[2] != dim:
            raise ValueError("locals must be (n, n_patches, dim)")
        if not np.isfinite(loc).all():
            raise ValueError("locals contain non-finite entries")
        n_patches = loc.shape[1]
        flags |= FLAG_LOCALS
        parts.append(loc.tobytes())
    if normalized:
        flags |= FLAG_NORMALIZED
    header = _GOOD_HEADER.pack(GOOD_MAGIC, GOOD_VERSION, flags, n, dim,
                               int(n_classes), n_patches)
    return b"".join([header, g.tobytes(), *parts])


def write_embeddings(path: str | Path, globals_: np.ndarray,
                     labels: np.ndarray | None, locals_: np.ndarray | None,
                     n_classes: int, normalized: bool) -> None:
    Path(path).write_bytes(embeddings_blob(globals_, labels, locals_,
                                           n_classes, normalized))


def bank_blob(prototypes: np.ndarray, tau: float) -> bytes:
    P = np.ascontiguousarray(prototypes, dtype="<f4")
    if P.ndim != 2:
        raise ValueError("prototypes must be a (n_classes, dim) matrix")
    if not np.isfinite(P).all():
        raise ValueError("prototypes contain non-finite entries")
    header = _BANK_HEADER.pack(BANK_MAGIC, BANK_VERSION, P.shape[0], P.shape[1],
                               float(tau))
    return header + P.tobytes()


def write_bank(path: str | Path, prototypes: np.ndarray, tau: float) -> None:
    Path(path).write_bytes(bank_blob(prototypes, tau))


def write_sidecar_manifest(container_path: str | Path, manifest: dict) -> Path:
    p = Path(str(container_path) + ".manifest.json")
    p.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return p
