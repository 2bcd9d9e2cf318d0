"""Label/probability rasters, dataset manifests and challenge-factor tags."""
from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Literal

import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import ManifestError, RasterError
from .taxonomy import IGNORE_ID, PartTaxonomy, check_labels, merge_group_mask

View = Literal["front", "back"]
BodyExtent = Literal["full", "upper", "lower", "head_missed"]
BODY_EXTENTS = ("full", "upper", "lower", "head_missed")
SPLITS = ("train", "val", "test")


@dataclass(frozen=True)
class SampleMeta:
    occlusion: bool = False
    view: View = "front"
    body_extent: BodyExtent = "full"

    def tokens(self) -> list[str]:
        out = ["occ"] if self.occlusion else []
        return out + [self.view, self.body_extent]


@dataclass(frozen=True)
class Record:
    image_path: Path
    label_path: Path | None
    meta: SampleMeta

    @property
    def image_id(self) -> str:
        return self.image_path.stem


@dataclass(frozen=True)
class DatasetIndex:
    records: tuple[Record, ...]
    split: str = "train"

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def subset(self, keep) -> "DatasetIndex":
        return DatasetIndex(tuple(r for r in self.records if keep(r)), self.split)


@dataclass(frozen=True)
class FactorFlags:
    occlusion: bool
    full_body: bool
    upper_body: bool
    head_missed: bool
    back_view: bool
    warnings: tuple[str, ...] = field(default=(), compare=False)

    def as_dict(self) -> dict[str, bool]:
        return {
            "occlusion": self.occlusion,
            "full-body": self.full_body,
            "upper-body": self.upper_body,
            "head-missed": self.head_missed,
            "back-view": self.back_view,
        }


# -- rasters ------------------------------------------------------------------

def read_label_map(path: str | Path, num_classes: int | None = None) -> np.ndarray:
    """Read a single-channel 8-bit raster of class ids (255 = ignore)."""
    path = Path(path)
    if not path.exists():
        raise RasterError(f"label map {path} does not exist")
    try:
        with Image.open(path) as im:
            if im.mode not in ("L", "P"):
                raise RasterError(f"{path}: expected a single-channel 8-bit raster, got mode {im.mode}")
            labels = np.array(im, dtype=np.uint8)
    except (UnidentifiedImageError, OSError) as exc:
        raise RasterError(f"{path}: malformed raster ({exc})") from None
    if num_classes is not None:
        bad = (labels >= num_classes) & (labels != IGNORE_ID)
        if bad.any():
            r, c = np.argwhere(bad)[0]
            raise RasterError(f"{path}: pixel ({r}, {c}) has label {labels[r, c]} >= {num_classes}")
    return labels


def decode_label_bytes(data: bytes, name: str, num_classes: int | None = None) -> np.ndarray:
    import io

    try:
        with Image.open(io.BytesIO(data)) as im:
            if im.mode not in ("L", "P"):
                raise RasterError(f"{name}: expected a single-channel 8-bit raster, got mode {im.mode}")
            labels = np.array(im, dtype=np.uint8)
    except (UnidentifiedImageError, OSError) as exc:
        raise RasterError(f"{name}: malformed raster ({exc})") from None
    if num_classes is not None and ((labels >= num_classes) & (labels != IGNORE_ID)).any():
        raise RasterError(f"{name}: label values out of range for {num_classes} classes")
    return labels


def write_label_map(labels: np.ndarray, path: str | Path) -> None:
    labels = np.asarray(labels)
    if labels.ndim != 2 or labels.size == 0:
        raise RasterError(f"label map must be a non-empty 2-D array, got shape {labels.shape}")
    if labels.min() < 0 or labels.max() > 255:
        raise RasterError("label values must fit in 8 bits")
    Image.fromarray(labels.astype(np.uint8), mode="L").save(path, format="PNG")


def read_image(path: str | Path) -> np.ndarray:
    with Image.open(path) as im:
        return np.array(im.convert("RGB"), dtype=np.uint8)


def write_image(image: np.ndarray, path: str | Path) -> None:
    Image.fromarray(np.asarray(image, dtype=np.uint8), mode="RGB").save(path, format="PNG")


def softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    z = logits - logits.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def one_hot(labels: np.ndarray, num_classes: int) -> np.ndarray:
    """ProbMap (H, W, C) with all mass on each pixel's label; ignore pixels count as background 0."""
    lab = np.where(labels == IGNORE_ID, 0, labels).astype(np.int64)
    return np.eye(num_classes)[lab]


def check_prob_map(p: np.ndarray, atol: float = 1e-6) -> None:
    if p.ndim != 3:
        raise RasterError(f"probability map must be (H, W, C), got {p.shape}")
    if (p < 0).any() or not np.allclose(p.sum(axis=-1), 1.0, atol=atol):
        raise RasterError("probability map is not normalised per pixel")


# -- manifests ----------------------------------------------------------------

def parse_manifest(text: str, base: Path, split: str = "train") -> DatasetIndex:
    if split not in SPLITS:
        raise ManifestError(f"unknown split {split!r}")
    records = []
    seen: dict[Path, int] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) < 2:
            raise ManifestError(f"line {lineno}: expected 'image_path label_path [flags]'")
        image = base / parts[0]
        label = None if parts[1] == "-" else base / parts[1]
        occlusion, view, extent = False, "front", None
        for tok in parts[2:]:
            if tok == "occ":
                occlusion = True
            elif tok in ("front", "back"):
                view = tok
            elif tok in BODY_EXTENTS:
                if extent is not None:
                    raise ManifestError(f"line {lineno}: more than one body extent")
                extent = tok
            else:
                raise ManifestError(f"line {lineno}: unknown flag token {tok!r}")
        if label is None and split != "test":
            raise ManifestError(f"line {lineno}: missing label path in {split} split")
        for p in (image, label):
            if p is None:
                continue
            if p in seen:
                raise ManifestError(f"duplicate path {p} (lines {seen[p]} and {lineno})")
            seen[p] = lineno
        records.append(Record(image, label, SampleMeta(occlusion, view, extent or "full")))
    return DatasetIndex(tuple(records), split)


def load_manifest(path: str | Path, split: str = "train") -> DatasetIndex:
    """Load a manifest; relative paths resolve against the manifest's directory."""
    path = Path(path)
    if not path.exists():
        raise ManifestError(f"manifest {path} does not exist")
    return parse_manifest(path.read_text(encoding="utf-8"), path.parent, split)


def format_manifest(records, base: Path) -> str:
    lines = []
    for r in records:
        label = "-" if r.label_path is None else os.path.relpath(r.label_path, base)
        lines.append(" ".join([os.path.relpath(r.image_path, base), label, *r.meta.tokens()]))
    return "\n".join(lines) + ("\n" if lines else "")


# -- challenge factors --------------------------------------------------------

def tag_challenge_factors(labels: np.ndarray, meta: SampleMeta, t: PartTaxonomy) -> FactorFlags:
    check_labels(np.asarray(labels), t)
    warnings = []
    head_missed = "H" in t.joint_names and not merge_group_mask(labels, t, "H").any()
    if head_missed != (meta.body_extent == "head_missed"):
        warnings.append(
            f"labels say head_missed={head_missed} but metadata body_extent={meta.body_extent}"
        )
    return FactorFlags(
        occlusion=meta.occlusion,
        full_body=meta.body_extent == "full",
        upper_body=meta.body_extent == "upper",
        head_missed=head_missed,
        back_view=meta.view == "back",
        warnings=tuple(warnings),
    )
