"""Manifest ingestion, train/test splits, sampling weights and augmentation."""

from __future__ import annotations

import csv
import logging
import os
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
from PIL import Image
from torch.utils.data import Dataset

from .core import DataError, Sample, Vocabulary, build_vocabularies, skin_scale_name

logger = logging.getLogger(__name__)

MANIFEST_COLUMNS = ("id", "image_path", "condition", "fitzpatrick", "source")
IMAGE_SIZE = 224
IMAGENET_MEAN = np.array([0.485, 0.456, 0.406], dtype=np.float32)
IMAGENET_STD = np.array([0.229, 0.224, 0.225], dtype=np.float32)


@dataclass
class DatasetManifest:
    samples: List[Sample]
    conditions: Vocabulary
    skin_types: Vocabulary
    root: Path = field(default_factory=Path)
    dropped_unknown: int = 0

    def __len__(self) -> int:
        return len(self.samples)

    def counts(self) -> np.ndarray:
        """(M, N) table of samples per (condition, skin type) cell."""
        table = np.zeros((len(self.conditions), len(self.skin_types)), dtype=np.int64)
        for s in self.samples:
            table[s.condition, s.skin_type] += 1
        return table

    def subset(self, samples: Sequence[Sample]) -> "DatasetManifest":
        return DatasetManifest(list(samples), self.conditions, self.skin_types, self.root)

    def ids(self) -> List[str]:
        return [s.sample_id for s in self.samples]

    def conditions_array(self) -> np.ndarray:
        return np.array([s.condition for s in self.samples], dtype=np.int64)

    def skin_array(self) -> np.ndarray:
        return np.array([s.skin_type for s in self.samples], dtype=np.int64)

    def resolve(self, sample: Sample) -> Path:
        path = Path(sample.image_ref)
        return path if path.is_absolute() else self.root / path

    def summary_table(self) -> str:
        """Markdown table of counts per condition and skin type, with totals."""
        counts = self.counts()
        header = ["Skin Condition", *self.skin_types.names, "Total"]
        lines = ["| " + " | ".join(header) + " |", "|" + "---|" * len(header)]
        for i, name in enumerate(self.conditions.names):
            row = [name, *map(str, counts[i]), str(counts[i].sum())]
            lines.append("| " + " | ".join(row) + " |")
        total = ["Total", *map(str, counts.sum(axis=0)), str(counts.sum())]
        lines.append("| " + " | ".join(total) + " |")
        return "\n".join(lines)


def manifest_from_rows(rows: Sequence[Dict[str, str]], root: Path = Path("."), grouped: bool = False,
                       check_images: bool = False, on_missing: str = "error") -> DatasetManifest:
    """Validate raw rows, drop unknown skin types and index labels."""
    if not rows:
        raise DataError("manifest is empty")
    missing = [c for c in MANIFEST_COLUMNS if c not in rows[0]]
    if missing:
        raise DataError(f"manifest is missing columns: {', '.join(missing)}")
    conditions, skin_types = build_vocabularies(rows, grouped=grouped)
    samples, dropped, skipped = [], 0, 0
    for row in rows:
        scale = skin_scale_name(row["fitzpatrick"], grouped=grouped)
        if scale is None:
            dropped += 1
            continue
        image_ref = str(row["image_path"])
        if check_images:
            path = Path(image_ref) if Path(image_ref).is_absolute() else root / image_ref
            if not path.is_file():
                if on_missing == "skip":
                    skipped += 1
                    logger.warning("skipping %s: image %s not found", row["id"], path)
                    continue
                raise DataError(f"image for sample {row['id']!r} not found: {path}")
        samples.append(Sample(
            sample_id=str(row["id"]),
            image_ref=image_ref,
            condition=conditions.encode(str(row["condition"]).strip()),
            skin_type=skin_types.encode(scale),
            source_domain=str(row.get("source") or ""),
        ))
    if dropped:
        logger.info("dropped %d samples with unknown skin type", dropped)
    if not samples:
        raise DataError("no samples left after dropping unknown skin types")
    return DatasetManifest(samples, conditions, skin_types, root, dropped)


def load_manifest(path, grouped: bool = False, check_images: bool = False, on_missing: str = "error",
                  data_dir: Optional[str] = None) -> DatasetManifest:
    """Read a manifest CSV with columns ``id,image_path,condition,fitzpatrick,source``.

    Relative image paths resolve against ``data_dir``, then the
    ``FAIRDISCO_DATA_DIR`` environment variable, then the manifest's folder.
    """
    path = Path(path)
    if not path.is_file():
        raise DataError(f"manifest not found: {path}")
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise DataError(f"manifest {path} is empty")
        rows = list(reader)
        fieldnames = reader.fieldnames
    missing = [c for c in MANIFEST_COLUMNS if c not in fieldnames]
    if missing:
        raise DataError(f"manifest is missing columns: {', '.join(missing)}")
    for lineno, row in enumerate(rows, start=2):
        if None in row or any(v is None for v in row.values()):
            raise DataError(f"malformed manifest row at line {lineno}")
    root = Path(data_dir or os.environ.get("FAIRDISCO_DATA_DIR") or path.parent)
    return manifest_from_rows(rows, root, grouped, check_images, on_missing)


def write_manifest(rows: Sequence[Dict[str, object]], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=MANIFEST_COLUMNS, lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: row[k] for k in MANIFEST_COLUMNS})


# -- splits -------------------------------------------------------------------

class SplitKind(str, Enum):
    IN_DOMAIN = "in-domain"
    OUT_DOMAIN_A = "out-domain-a"
    OUT_DOMAIN_B = "out-domain-b"
    OUT_DOMAIN_C = "out-domain-c"


OUT_DOMAIN_TRAIN_TYPES = {
    SplitKind.OUT_DOMAIN_A: ("Fitz1", "Fitz2"),
    SplitKind.OUT_DOMAIN_B: ("Fitz3", "Fitz4"),
    SplitKind.OUT_DOMAIN_C: ("Fitz5", "Fitz6"),
}


@dataclass(frozen=True)
class SplitSpec:
    kind: SplitKind = SplitKind.IN_DOMAIN
    ratio: float = 0.8
    seed: int = 0
    stratify: bool = False

    def __post_init__(self):
        object.__setattr__(self, "kind", SplitKind(self.kind))
        if not 0.0 <= self.ratio <= 1.0:
            raise DataError(f"split ratio must lie in [0, 1], got {self.ratio}")


def make_split(manifest: DatasetManifest, spec: SplitSpec) -> Tuple[DatasetManifest, DatasetManifest]:
    if spec.kind is SplitKind.IN_DOMAIN:
        rng = np.random.default_rng(spec.seed)
        n = len(manifest)
        if spec.stratify:
            train_idx = []
            keys = [(s.condition, s.skin_type) for s in manifest.samples]
            for key in sorted(set(keys)):
                members = np.array([i for i, k in enumerate(keys) if k == key])
                members = members[rng.permutation(len(members))]
                train_idx.extend(members[: int(round(spec.ratio * len(members)))].tolist())
            train_mask = np.zeros(n, dtype=bool)
            train_mask[train_idx] = True
        else:
            order = rng.permutation(n)
            train_mask = np.zeros(n, dtype=bool)
            train_mask[order[: int(round(spec.ratio * n))]] = True
        train = [s for s, m in zip(manifest.samples, train_mask) if m]
        test = [s for s, m in zip(manifest.samples, train_mask) if not m]
    else:
        wanted = OUT_DOMAIN_TRAIN_TYPES[spec.kind]
        present = [t for t in wanted if t in manifest.skin_types]
        if not present:
            raise DataError(f"out-domain split needs skin types {wanted} on the 6-point scale")
        train_types = {manifest.skin_types.encode(t) for t in present}
        train = [s for s in manifest.samples if s.skin_type in train_types]
        train_conditions = {s.condition for s in train}
        test = [s for s in manifest.samples
                if s.skin_type not in train_types and s.condition in train_conditions]
    if not train or not test:
        raise DataError(f"{spec.kind.value} split leaves an empty train or test set "
                        f"({len(train)} train / {len(test)} test)")
    return manifest.subset(train), manifest.subset(test)


def write_split_files(train: DatasetManifest, test: DatasetManifest, out_dir) -> Tuple[Path, Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = out_dir / "train_ids.txt", out_dir / "test_ids.txt"
    for part, path in zip((train, test), paths):
        path.write_text("".join(f"{sid}\n" for sid in part.ids()), encoding="utf-8")
    return paths


def read_split_file(manifest: DatasetManifest, path) -> DatasetManifest:
    wanted = [line.strip() for line in Path(path).read_text(encoding="utf-8").splitlines() if line.strip()]
    by_id = {s.sample_id: s for s in manifest.samples}
    missing = [sid for sid in wanted if sid not in by_id]
    if missing:
        raise DataError(f"{len(missing)} ids in {path} are not in the manifest (first: {missing[0]!r})")
    return manifest.subset([by_id[sid] for sid in wanted])


# -- sampling and loss weights --------------------------------------------------

class WeightMode(str, Enum):
    CLASS_BALANCED = "class_balanced"
    GROUP_BALANCED = "group_balanced"
    REWEIGHT = "reweight"


@dataclass(frozen=True)
class SampleWeightTable:
    """Weight per (condition, skin type) cell."""

    weights: Dict[Tuple[int, int], float]
    mode: WeightMode

    def sample_weights(self, manifest: DatasetManifest) -> np.ndarray:
        try:
            return np.array([self.weights[(s.condition, s.skin_type)] for s in manifest.samples], dtype=np.float64)
        except KeyError as exc:
            raise DataError(f"no weight for (condition, skin type) cell {exc.args[0]}") from None


def reweight_table(manifest: DatasetManifest) -> SampleWeightTable:
    """Expected-over-observed joint probability for every observed cell.

    ``w(s, y) = P(s) P(y) / P(s, y)`` with all probabilities taken from
    the manifest's empirical distribution.
    """
    counts = manifest.counts().astype(np.float64)
    total = counts.sum()
    if total == 0:
        raise DataError("cannot reweight an empty manifest")
    p_cond = counts.sum(axis=1) / total
    p_type = counts.sum(axis=0) / total
    weights = {}
    for c, t in zip(*np.nonzero(counts)):
        weights[(int(c), int(t))] = float(p_cond[c] * p_type[t] / (counts[c, t] / total))
    return SampleWeightTable(weights, WeightMode.REWEIGHT)


def resample_weights(manifest: DatasetManifest) -> SampleWeightTable:
    """Inverse group frequency, a group being one (condition, skin type) cell."""
    counts = manifest.counts()
    present_c = np.unique(manifest.conditions_array())
    present_t = np.unique(manifest.skin_array())
    weights = {}
    for c in present_c:
        for t in present_t:
            if counts[c, t] == 0:
                raise DataError(f"empty group ({manifest.conditions.decode(int(c))}, "
                                f"{manifest.skin_types.decode(int(t))}) in training set")
            weights[(int(c), int(t))] = 1.0 / counts[c, t]
    return SampleWeightTable(weights, WeightMode.GROUP_BALANCED)


def class_balanced_weights(manifest: DatasetManifest) -> SampleWeightTable:
    """Inverse condition frequency, so each condition is drawn equally often."""
    counts = manifest.counts()
    per_class = counts.sum(axis=1)
    if len(manifest) == 0:
        raise DataError("cannot weight an empty manifest")
    weights = {}
    for c, t in zip(*np.nonzero(counts)):
        weights[(int(c), int(t))] = 1.0 / per_class[c]
    return SampleWeightTable(weights, WeightMode.CLASS_BALANCED)


# -- images -------------------------------------------------------------------

def augment(image: Image.Image, rng: Optional[np.random.Generator] = None, size: int = IMAGE_SIZE,
            train: bool = True, crop_scale: Tuple[float, float] = (0.8, 1.0),
            max_rotation: float = 15.0) -> np.ndarray:
    """Random crop, rotation and horizontal flip, then resize to ``size``.

    With ``train=False`` (or no ``rng``) only the resize is applied.
    Returns an (size, size, 3) uint8 array.
    """
    image = image.convert("RGB")
    if train and rng is not None:
        w, h = image.size
        scale = rng.uniform(*crop_scale)
        cw, ch = max(1, int(round(w * scale))), max(1, int(round(h * scale)))
        left = int(rng.integers(0, w - cw + 1))
        top = int(rng.integers(0, h - ch + 1))
        image = image.crop((left, top, left + cw, top + ch))
        image = image.rotate(float(rng.uniform(-max_rotation, max_rotation)), resample=Image.BILINEAR)
        if rng.random() < 0.5:
            image = image.transpose(Image.FLIP_LEFT_RIGHT)
    image = image.resize((size, size), resample=Image.BILINEAR)
    return np.asarray(image, dtype=np.uint8)


def to_tensor(images: np.ndarray) -> torch.Tensor:
    """uint8 (..., H, W, 3) -> normalized float (..., 3, H, W)."""
    x = (images.astype(np.float32) / 255.0 - IMAGENET_MEAN) / IMAGENET_STD
    return torch.from_numpy(np.ascontiguousarray(np.moveaxis(x, -1, -3)))


class ManifestDataset(Dataset):
    """Decodes images lazily; augmentation randomness is keyed by (seed, epoch, index)."""

    def __init__(self, manifest: DatasetManifest, size: int = IMAGE_SIZE, train: bool = False, seed: int = 0):
        self.manifest = manifest
        self.size = size
        self.train = train
        self.seed = seed
        self.epoch = 0

    def set_epoch(self, epoch: int) -> None:
        self.epoch = epoch

    def __len__(self) -> int:
        return len(self.manifest)

    def image(self, index: int) -> np.ndarray:
        sample = self.manifest.samples[index]
        try:
            with Image.open(self.manifest.resolve(sample)) as img:
                rng = np.random.default_rng([self.seed, self.epoch, index]) if self.train else None
                return augment(img, rng, self.size, self.train)
        except OSError as exc:
            raise DataError(f"cannot decode image for {sample.sample_id!r}: {exc}") from exc

    def __getitem__(self, index: int):
        sample = self.manifest.samples[index]
        return to_tensor(self.image(index)), sample.condition, sample.skin_type, index


class ArrayDataset(Dataset):
    """Pre-decoded uint8 images held in memory (used for synthetic data)."""

    def __init__(self, images: np.ndarray, manifest: DatasetManifest):
        if len(images) != len(manifest):
            raise DataError("image array and manifest lengths differ")
        self.tensors = to_tensor(images)
        self.manifest = manifest
        self.conditions = torch.from_numpy(manifest.conditions_array())
        self.skin = torch.from_numpy(manifest.skin_array())

    def set_epoch(self, epoch: int) -> None:
        pass

    def __len__(self) -> int:
        return len(self.manifest)

    def __getitem__(self, index: int):
        return self.tensors[index], int(self.conditions[index]), int(self.skin[index]), index
