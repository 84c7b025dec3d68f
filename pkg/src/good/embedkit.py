"""Embedding sets, the binary container format, and the synthetic benchmark.

The synthetic benchmark is an isotropic Gaussian mixture whose class means
share a common norm, so the Bayes posterior of a sample is exactly
``softmax(<x, mu_c> / sigma^2)`` -- a linear-softmax model that a prototype
bank with ``tau = sigma^2`` can represent with zero error. That gives every
downstream diagnostic an analytically known reference model.

File container ("GOOD", little-endian):

    magic   4 bytes  b"GOOD"
    version u32      1
    flags   u32      bit0 labels, bit1 locals, bit2 normalized
    n       u64      sample count
    dim     u32      feature dimension
    C       u32      class count
    P       u32      patches per sample (0 = no local features)
    globals n*dim float32
    labels  n u32, 0xFFFFFFFF marks an OOD row     (if bit0)
    locals  n*P*dim float32                        (if bit1)

An optional JSON sidecar ``<path>.manifest.json`` records class names and,
for generated data, the generator parameters and float64 class means.
"""

from __future__ import annotations

import dataclasses
import json
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .prng import SplitMix64

MAGIC = b"GOOD"
FORMAT_VERSION = 1
OOD_LABEL = 0xFFFFFFFF

_FLAG_LABELS = 1
_FLAG_LOCALS = 2
_FLAG_NORMALIZED = 4

_HEADER = struct.Struct("<4sIIQIII")


class FormatError(ValueError):
    """Raised when a byte stream is not a valid embedding container."""


@dataclass(frozen=True)
class EmbeddingSet:
    """Immutable bundle of features, optional patch features, and labels.

    ``globals`` is (n, dim) float32; ``locals_`` is (n, n_patches, dim)
    float32 or None; ``labels`` is (n,) uint32 or None, with OOD_LABEL
    marking rows that carry no class.
    """

    globals: np.ndarray
    labels: np.ndarray | None
    locals_: np.ndarray | None
    n_classes: int
    normalized: bool = False

    def __post_init__(self):
        g = np.ascontiguousarray(self.globals, dtype=np.float32)
        object.__setattr__(self, "globals", g)
        if g.ndim != 2:
            raise ValueError("globals must be a 2-d (n, dim) array")
        if not np.isfinite(g).all():
            raise ValueError("global features contain non-finite entries")
        if self.n_classes < 2:
            raise ValueError("n_classes must be at least 2")
        if self.labels is not None:
            lab = np.ascontiguousarray(self.labels, dtype=np.uint32)
            object.__setattr__(self, "labels", lab)
            if lab.shape != (g.shape[0],):
                raise ValueError("labels length must match sample count")
            real = lab[lab != OOD_LABEL]
            if real.size and int(real.max()) >= self.n_classes:
                raise ValueError("class label out of range")
        if self.locals_ is not None:
            loc = np.ascontiguousarray(self.locals_, dtype=np.float32)
            object.__setattr__(self, "locals_", loc)
            if loc.ndim != 3 or loc.shape[0] != g.shape[0] or loc.shape[2] != g.shape[1]:
                raise ValueError("locals must be (n, n_patches, dim)")
            if not np.isfinite(loc).all():
                raise ValueError("local features contain non-finite entries")
        if self.normalized:
            norms = np.linalg.norm(g.astype(np.float64), axis=1)
            if np.abs(norms - 1.0).max() > 1e-3:
                raise ValueError("normalized flag set but global rows are not unit norm")
            if self.locals_ is not None:
                lnorms = np.linalg.norm(self.locals_.astype(np.float64), axis=2)
                if np.abs(lnorms - 1.0).max() > 1e-3:
                    raise ValueError("normalized flag set but local rows are not unit norm")

    @property
    def n_samples(self) -> int:
        return self.globals.shape[0]

    @property
    def dim(self) -> int:
        return self.globals.shape[1]

    @property
    def n_patches(self) -> int:
        return 0 if self.locals_ is None else self.locals_.shape[1]


@dataclass(frozen=True)
class GeneratorSpec:
    """Parameters of the Gaussian-mixture benchmark."""

    n_classes: int
    dim: int
    mean_radius: float = 2.0
    noise_sigma: float = 1.0
    samples_per_class: int = 1000
    shift_delta: float = 0.0
    ood_family: str = "near"
    seed: int = 0
    n_patches: int = 0

    def __post_init__(self):
        for name in ("mean_radius", "noise_sigma", "shift_delta"):
            v = getattr(self, name)
            if not math.isfinite(v):
                raise ValueError(f"{name} must be finite")
        if self.n_classes < 2:
            raise ValueError("n_classes must be at least 2")
        if self.dim < 2:
            raise ValueError("dim must be at least 2")
        if self.mean_radius <= 0:
            raise ValueError("mean_radius must be positive")
        if self.noise_sigma <= 0:
            raise ValueError("noise_sigma must be positive")
        if self.shift_delta < 0:
            raise ValueError("shift_delta must be nonnegative")
        if self.samples_per_class < 1:
            raise ValueError("samples_per_class must leave at least one sample per class")
        if self.ood_family not in ("near", "far"):
            raise ValueError("ood_family must be 'near' or 'far'")
        if self.n_patches < 0:
            raise ValueError("n_patches must be nonnegative")


@dataclass(frozen=True)
class SynthResult:
    """Generated splits plus the float64 ground truth behind them."""

    train: EmbeddingSet
    test_id: EmbeddingSet
    test_ood: EmbeddingSet
    means: np.ndarray  # (C, dim) float64, norm mean_radius each
    shift_direction: np.ndarray  # (dim,) float64 unit vector
    spec: GeneratorSpec


def synth_generate(spec: GeneratorSpec) -> SynthResult:
    """Draw the train / test-ID / test-OOD splits for ``spec``.

    Six named SplitMix64 streams are spawned from the seed in a fixed
    order (means, shift, train, test, ood, patches), so every split is a
    pure function of the spec and identical specs produce identical bytes.
    Test-ID class means are the train means displaced by ``shift_delta``
    along one shared seeded direction. Near-OOD samples sit around
    midpoints of random mean pairs; far-OOD samples are sigma-scaled noise
    around the origin.
    """
    root = SplitMix64(spec.seed)
    means_rng = root.spawn()
    shift_rng = root.spawn()
    train_rng = root.spawn()
    test_rng = root.spawn()
    ood_rng = root.spawn()
    patch_rng = root.spawn()

    C, dim, per = spec.n_classes, spec.dim, spec.samples_per_class
    sigma = spec.noise_sigma

    means = np.empty((C, dim), dtype=np.float64)
    for c in range(C):
        v = means_rng.normals(dim)
        means[c] = spec.mean_radius * v / np.linalg.norm(v)

    d = shift_rng.normals(dim)
    shift_direction = d / np.linalg.norm(d)

    def class_block(rng: SplitMix64, centers: np.ndarray) -> np.ndarray:
        rows = np.empty((C * per, dim), dtype=np.float64)
        for c in range(C):
            eps = rng.normals(per * dim).reshape(per, dim)
            rows[c * per:(c + 1) * per] = centers[c] + sigma * eps
        return rows

    id_labels = np.repeat(np.arange(C, dtype=np.uint32), per)
    train_rows = class_block(train_rng, means)
    test_rows = class_block(test_rng, means + spec.shift_delta * shift_direction)

    n_ood = C * per
    if spec.ood_family == "near":
        first = ood_rng.integers_below(C, n_ood)
        second = ood_rng.integers_below(C - 1, n_ood)
        second = second + (second >= first)
        centers = 0.5 * (means[first] + means[second])
        eps = ood_rng.normals(n_ood * dim).reshape(n_ood, dim)
        ood_rows = centers + sigma * eps
    else:
        eps = ood_rng.normals(n_ood * dim).reshape(n_ood, dim)
        ood_rows = sigma * eps
    ood_labels = np.full(n_ood, OOD_LABEL, dtype=np.uint32)

    def patch_block(n: int) -> np.ndarray | None:
        if spec.n_patches == 0:
            return None
        eps = patch_rng.normals(n * spec.n_patches * dim)
        return sigma * eps.reshape(n, spec.n_patches, dim)

    train = EmbeddingSet(train_rows, id_labels, patch_block(C * per), C)
    test_id = EmbeddingSet(test_rows, id_labels.copy(), patch_block(C * per), C)
    test_ood = EmbeddingSet(ood_rows, ood_labels, patch_block(n_ood), C)
    return SynthResult(train, test_id, test_ood, means, shift_direction, spec)


def analytic_posterior(x: np.ndarray, spec: GeneratorSpec, means: np.ndarray) -> np.ndarray:
    """Bayes posterior of ``x`` under the benchmark mixture.

    All means share one norm, so the Gaussian density ratio collapses to
    softmax of the inner products scaled by 1/sigma^2.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != means.shape[1]:
        raise ValueError("dimension mismatch between x and means")
    logits = means @ x / (spec.noise_sigma**2)
    logits -= logits.max()
    p = np.exp(logits)
    return p / p.sum()


def analytic_posterior_rows(rows: np.ndarray, spec: GeneratorSpec, means: np.ndarray) -> np.ndarray:
    """Row-wise analytic_posterior for an (n, dim) array."""
    rows = np.asarray(rows, dtype=np.float64)
    if rows.shape[1] != means.shape[1]:
        raise ValueError("dimension mismatch between rows and means")
    logits = rows @ means.T / (spec.noise_sigma**2)
    logits -= logits.max(axis=1, keepdims=True)
    p = np.exp(logits)
    return p / p.sum(axis=1, keepdims=True)


def true_target_rows(labels: np.ndarray, n_classes: int) -> np.ndarray:
    """Ground-truth distribution rows: one-hot for ID, uniform for OOD."""
    labels = np.asarray(labels)
    out = np.full((labels.shape[0], n_classes), 1.0 / n_classes, dtype=np.float64)
    id_mask = labels != OOD_LABEL
    out[id_mask] = 0.0
    out[np.nonzero(id_mask)[0], labels[id_mask].astype(np.int64)] = 1.0
    return out


def fstar_rows(eset: EmbeddingSet, spec: GeneratorSpec, means: np.ndarray) -> np.ndarray:
    """Reference-model outputs for a generated split.

    ID rows get the Bayes posterior; OOD rows get the uniform row that the
    ground-truth distribution assigns them.
    """
    if eset.labels is None:
        raise ValueError("reference outputs need labels to tell ID from OOD rows")
    out = analytic_posterior_rows(eset.globals.astype(np.float64), spec, means)
    out[eset.labels == OOD_LABEL] = 1.0 / eset.n_classes
    return out


def take_rows(eset: EmbeddingSet, indices: np.ndarray) -> EmbeddingSet:
    """Subset of a set at the given row indices, in the given order."""
    idx = np.asarray(indices, dtype=np.int64)
    return EmbeddingSet(
        eset.globals[idx],
        None if eset.labels is None else eset.labels[idx],
        None if eset.locals_ is None else eset.locals_[idx],
        eset.n_classes,
        eset.normalized,
    )


def concat_sets(a: EmbeddingSet, b: EmbeddingSet) -> EmbeddingSet:
    """Stack two sets row-wise; both must agree on dim, classes, locals."""
    if a.dim != b.dim or a.n_classes != b.n_classes:
        raise ValueError("sets disagree on dim or n_classes")
    if (a.locals_ is None) != (b.locals_ is None) or a.n_patches != b.n_patches:
        raise ValueError("sets disagree on local features")
    if (a.labels is None) != (b.labels is None):
        raise ValueError("sets disagree on label presence")
    return EmbeddingSet(
        np.concatenate([a.globals, b.globals], axis=0),
        None if a.labels is None else np.concatenate([a.labels, b.labels]),
        None if a.locals_ is None else np.concatenate([a.locals_, b.locals_], axis=0),
        a.n_classes,
        a.normalized and b.normalized,
    )


def save_embeddings(eset: EmbeddingSet, path: str | Path, manifest: dict | None = None) -> None:
    """Write the binary container; bytes are a pure function of the set."""
    flags = 0
    if eset.labels is not None:
        flags |= _FLAG_LABELS
    if eset.locals_ is not None:
        flags |= _FLAG_LOCALS
    if eset.normalized:
        flags |= _FLAG_NORMALIZED
    parts = [
        _HEADER.pack(MAGIC, FORMAT_VERSION, flags, eset.n_samples, eset.dim,
                     eset.n_classes, eset.n_patches),
        eset.globals.astype("<f4").tobytes(order="C"),
    ]
    if eset.labels is not None:
        parts.append(eset.labels.astype("<u4").tobytes())
    if eset.locals_ is not None:
        parts.append(eset.locals_.astype("<f4").tobytes(order="C"))
    Path(path).write_bytes(b"".join(parts))
    if manifest is not None:
        write_manifest(path, manifest)


def load_embeddings(path: str | Path) -> EmbeddingSet:
    """Read a binary container, rejecting malformed or non-finite payloads."""
    blob = Path(path).read_bytes()
    if len(blob) < _HEADER.size:
        raise FormatError("truncated header")
    magic, version, flags, n, dim, n_classes, n_patches = _HEADER.unpack_from(blob)
    if magic != MAGIC:
        raise FormatError("bad magic")
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported version {version}")

    expected = _HEADER.size + n * dim * 4
    if flags & _FLAG_LABELS:
        expected += n * 4
    if flags & _FLAG_LOCALS:
        expected += n * n_patches * dim * 4
    if len(blob) < expected:
        raise FormatError("truncated payload")
    if len(blob) > expected:
        raise FormatError("payload size mismatch: trailing bytes disagree with header flags")

    off = _HEADER.size
    g = np.frombuffer(blob, dtype="<f4", count=n * dim, offset=off).reshape(n, dim)
    off += n * dim * 4
    labels = None
    if flags & _FLAG_LABELS:
        labels = np.frombuffer(blob, dtype="<u4", count=n, offset=off).copy()
        off += n * 4
    locals_ = None
    if flags & _FLAG_LOCALS:
        locals_ = np.frombuffer(blob, dtype="<f4", count=n * n_patches * dim,
                                offset=off).reshape(n, n_patches, dim)
    if not np.isfinite(g).all() or (locals_ is not None and not np.isfinite(locals_).all()):
        raise FormatError("non-finite values in payload")
    try:
        return EmbeddingSet(g.copy(), labels, None if locals_ is None else locals_.copy(),
                            n_classes, bool(flags & _FLAG_NORMALIZED))
    except ValueError as exc:
        raise FormatError(str(exc)) from exc


def manifest_path(path: str | Path) -> Path:
    return Path(str(path) + ".manifest.json")


def write_manifest(path: str | Path, manifest: dict) -> None:
    manifest_path(path).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def read_manifest(path: str | Path) -> dict | None:
    p = manifest_path(path)
    if not p.exists():
        return None
    return json.loads(p.read_text())


def synth_manifest(result: SynthResult, class_names: list[str] | None = None) -> dict:
    """Sidecar content for generated splits: spec, names, float64 truth.

    Means are serialized through repr-exact JSON floats so the analytic
    reference model reconstructed from disk matches the in-memory one bit
    for bit.
    """
    spec = result.spec
    return {
        "class_names": class_names or [f"class_{c}" for c in range(spec.n_classes)],
        "generator": dataclasses.asdict(spec),
        "means": result.means.tolist(),
        "shift_direction": result.shift_direction.tolist(),
    }


def generator_from_manifest(manifest: dict) -> tuple[GeneratorSpec, np.ndarray]:
    """Recover the spec and float64 means stored by synth_manifest."""
    spec = GeneratorSpec(**manifest["generator"])
    means = np.asarray(manifest["means"], dtype=np.float64)
    return spec, means
