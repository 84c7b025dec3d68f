"""Turn an image folder plus a class-name list into workbench artifacts.

Images are labeled by their immediate parent directory: a directory name
that matches a class name assigns that class; anything else (including
images at the folder root) is marked as an out-of-distribution row. Text
prototypes come from one prompt per class, formatted through the template.

Unreadable images are skipped with a warning and recorded in the sidecar
manifest; a run that reads zero images fails. All three outputs (container,
bank, manifest) are materialized in memory and written only at the end, so
a failed run leaves no partial files.
"""

from __future__ import annotations

import dataclasses
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from . import __version__
from .encoder import DEFAULT_MODEL, LOCALS_HOOK, VisionTextEncoder
from .formats import (
    OOD_LABEL,
    embeddings_blob,
    bank_blob,
    write_sidecar_manifest,
)

IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".gif", ".webp", ".tiff"}
DEFAULT_TEMPLATE = "a photo of a {}"


@dataclass(frozen=True)
class ExtractJob:
    image_dir: Path
    class_names: list[str]
    out_prefix: Path
    prompt_template: str = DEFAULT_TEMPLATE
    emit_locals: bool = False
    model_id: str = DEFAULT_MODEL
    batch_size: int = 8

    def __post_init__(self):
        object.__setattr__(self, "image_dir", Path(self.image_dir))
        object.__setattr__(self, "out_prefix", Path(self.out_prefix))
        names = [n.strip() for n in self.class_names]
        if not names or any(not n for n in names):
            raise ValueError("class_names must be non-empty, non-blank strings")
        if len(set(names)) != len(names):
            raise ValueError("class_names contain duplicates")
        object.__setattr__(self, "class_names", names)
        if "{}" not in self.prompt_template:
            raise ValueError("prompt_template needs a {} slot for the class name")
        if not self.image_dir.is_dir():
            raise ValueError(f"image directory not found: {self.image_dir}")


@dataclass(frozen=True)
class ExtractResult:
    container_path: Path
    bank_path: Path
    manifest_path: Path
    n_images: int
    n_ood: int
    n_patches: int
    skipped: list[dict] = field(default_factory=list)


def _list_images(root: Path) -> list[Path]:
    return sorted((p for p in root.rglob("*")
                   if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES),
                  key=lambda p: p.relative_to(root).as_posix())


def extract_features(job: ExtractJob) -> ExtractResult:
    label_of = {name: i for i, name in enumerate(job.class_names)}
    images, labels, records, skipped = [], [], [], []
    for path in _list_images(job.image_dir):
        rel = path.relative_to(job.image_dir).as_posix()
        try:
            with Image.open(path) as im:
                images.append(im.convert("RGB"))
        except (OSError, UnidentifiedImageError, ValueError) as exc:
            warnings.warn(f"skipping unreadable image {rel}: {exc}")
            skipped.append({"path": rel, "error": str(exc)})
            continue
        label = label_of.get(path.parent.name, OOD_LABEL)
        labels.append(label)
        records.append({"path": rel,
                        "label": "ood" if label == OOD_LABEL
                        else job.class_names[label]})
    if not images:
        raise ValueError(f"no readable images under {job.image_dir}")

    encoder = VisionTextEncoder(job.model_id, job.batch_size)
    g, p = encoder.encode_images(images, with_patches=job.emit_locals)
    g = _unit_rows(g)
    if p is not None:
        p = _unit_rows(p)
    prompts = [job.prompt_template.format(name) for name in job.class_names]
    prototypes = _unit_rows(encoder.encode_prompts(prompts))

    label_arr = np.asarray(labels, dtype=np.uint32)
    container = embeddings_blob(g, label_arr, p, len(job.class_names),
                                normalized=True)
    bank = bank_blob(prototypes, tau=1.0)

    container_path = Path(str(job.out_prefix) + ".good")
    bank_path = Path(str(job.out_prefix) + ".gptb")
    container_path.parent.mkdir(parents=True, exist_ok=True)
    container_path.write_bytes(container)
    bank_path.write_bytes(bank)
    manifest_path = write_sidecar_manifest(container_path, {
        "tool": "good-extract",
        "tool_version": __version__,
        "model_id": job.model_id,
        "prompt_template": job.prompt_template,
        "class_names": job.class_names,
        "locals": LOCALS_HOOK if job.emit_locals else "none",
        "images": records,
        "skipped": skipped,
        "job": {k: str(v) if isinstance(v, Path) else v
                for k, v in dataclasses.asdict(job).items()},
    })
    return ExtractResult(container_path, bank_path, manifest_path,
                         n_images=len(images),
                         n_ood=int((label_arr == OOD_LABEL).sum()),
                         n_patches=0 if p is None else p.shape[1],
                         skipped=skipped)


def _unit_rows(x: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(x.astype(np.float64), axis=-1, keepdims=True)
    return (x / np.maximum(norms, 1e-12)).astype(np.float32)
