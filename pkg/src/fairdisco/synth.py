"""Synthetic biased datasets and the linear leakage probe.

Images carry the class as a foreground glyph and the sensitive attribute
as the background tone. The two are coupled with strength ``rho``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np
import torch
from PIL import Image

from .core import SourceDomain
from .data import DatasetManifest, manifest_from_rows, write_manifest

logger = logging.getLogger(__name__)

GLYPHS = ("disk", "square", "triangle", "cross", "ring", "diamond", "hbar", "vbar")
LIGHT_TONE = np.array([235.0, 205.0, 175.0])
DARK_TONE = np.array([85.0, 55.0, 35.0])
FOREGROUND = np.array([150.0, 30.0, 60.0])


@dataclass(frozen=True)
class SynthSpec:
    n_samples: int = 6000
    image_size: int = 32
    n_classes: int = 3
    n_types: int = 3
    rho: float = 0.8
    noise: float = 0.1
    contrast: float = 0.3
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.rho <= 1.0:
            raise ValueError(f"rho must lie in [0, 1], got {self.rho}")
        if not 1 <= self.n_classes <= len(GLYPHS):
            raise ValueError(f"n_classes must be in 1..{len(GLYPHS)}")
        if not 2 <= self.n_types <= 6:
            raise ValueError("n_types must be in 2..6 (Fitzpatrick codes)")
        if not 0.0 < self.contrast <= 1.0:
            raise ValueError(f"contrast must lie in (0, 1], got {self.contrast}")
        if self.n_samples < 1 or self.image_size < 8:
            raise ValueError("need n_samples >= 1 and image_size >= 8")


@dataclass(frozen=True)
class ProbeResult:
    probe_accuracy: float
    chance: float
    class_accuracy: Optional[float] = None


def condition_names(n_classes: int) -> List[str]:
    return [f"c{k}_{GLYPHS[k]}" for k in range(n_classes)]


def sample_pair(rng: np.random.Generator, n_classes: int, n_types: int, rho: float) -> Tuple[int, int]:
    """Draw (class, type) with uniform marginals.

    Both labels are quantiles of one shared uniform draw with probability
    ``rho`` (comonotone coupling), independent otherwise.
    """
    u = rng.random()
    y = min(int(u * n_classes), n_classes - 1)
    v = u if rng.random() < rho else rng.random()
    s = min(int(v * n_types), n_types - 1)
    return y, s


def _glyph_mask(kind: str, size: int, cx: float, cy: float, radius: float) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    dx, dy = xx - cx, yy - cy
    if kind == "disk":
        return dx ** 2 + dy ** 2 <= radius ** 2
    if kind == "square":
        return (np.abs(dx) <= radius * 0.85) & (np.abs(dy) <= radius * 0.85)
    if kind == "triangle":
        return (dy <= radius * 0.8) & (dy >= -radius) & (np.abs(dx) <= (dy + radius) * 0.6)
    if kind == "cross":
        arm = radius * 0.3
        return ((np.abs(dx) <= arm) & (np.abs(dy) <= radius)) | ((np.abs(dy) <= arm) & (np.abs(dx) <= radius))
    if kind == "ring":
        d2 = dx ** 2 + dy ** 2
        return (d2 <= radius ** 2) & (d2 >= (0.55 * radius) ** 2)
    if kind == "diamond":
        return np.abs(dx) + np.abs(dy) <= radius
    if kind == "hbar":
        return (np.abs(dx) <= radius) & (np.abs(dy) <= radius * 0.35)
    if kind == "vbar":
        return (np.abs(dy) <= radius) & (np.abs(dx) <= radius * 0.35)
    raise ValueError(kind)


def render(rng: np.random.Generator, y: int, s: int, spec: SynthSpec) -> np.ndarray:
    size = spec.image_size
    frac = spec.contrast * s / (spec.n_types - 1)
    tone = LIGHT_TONE + frac * (DARK_TONE - LIGHT_TONE)
    radius = size * rng.uniform(0.22, 0.32)
    cx = rng.uniform(radius, size - radius)
    cy = rng.uniform(radius, size - radius)
    img = np.broadcast_to(tone, (size, size, 3)).copy()
    img[_glyph_mask(GLYPHS[y], size, cx, cy, radius)] = FOREGROUND
    img += rng.normal(0.0, spec.noise * 255.0, img.shape)
    return np.clip(np.rint(img), 0, 255).astype(np.uint8)


def generate(spec: SynthSpec) -> Tuple[DatasetManifest, np.ndarray]:
    """Render ``spec.n_samples`` images and their manifest.

    Each sample draws from its own generator seeded by (seed, index), so
    output does not depend on generation order.
    """
    names = condition_names(spec.n_classes)
    rows, images = [], np.empty((spec.n_samples, spec.image_size, spec.image_size, 3), dtype=np.uint8)
    for i in range(spec.n_samples):
        rng = np.random.default_rng([spec.seed, i])
        y, s = sample_pair(rng, spec.n_classes, spec.n_types, spec.rho)
        images[i] = render(rng, y, s, spec)
        rows.append({"id": f"synth{i:06d}", "image_path": f"images/synth{i:06d}.png", "condition": names[y],
                     "fitzpatrick": str(s + 1), "source": SourceDomain.SYNTH.value})
    return manifest_from_rows(rows), images


def write_synth(spec: SynthSpec, out_dir) -> Path:
    """Write PNG images plus ``manifest.csv`` under ``out_dir``."""
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    manifest, images = generate(spec)
    rows = []
    for sample, img in zip(manifest.samples, images):
        Image.fromarray(img).save(out_dir / sample.image_ref, optimize=False)
        rows.append({"id": sample.sample_id, "image_path": sample.image_ref,
                     "condition": manifest.conditions.decode(sample.condition),
                     "fitzpatrick": manifest.skin_types.decode(sample.skin_type)[len("Fitz"):],
                     "source": sample.source_domain})
    path = out_dir / "manifest.csv"
    write_manifest(rows, path)
    return path


def mutual_information(a: np.ndarray, b: np.ndarray) -> float:
    """Plug-in estimate of I(a; b) in nats."""
    joint = np.zeros((a.max() + 1, b.max() + 1))
    np.add.at(joint, (a, b), 1.0)
    joint /= joint.sum()
    pa, pb = joint.sum(axis=1, keepdims=True), joint.sum(axis=0, keepdims=True)
    nz = joint > 0
    return float((joint[nz] * np.log(joint[nz] / (pa @ pb)[nz])).sum())


def linear_probe(representations, labels, test_fraction: float = 0.3, seed: int = 0, max_iter: int = 200,
                 l2: float = 1e-4, class_accuracy: Optional[float] = None) -> ProbeResult:
    """Held-out accuracy of a multinomial logistic regression on frozen features.

    Features are centred and divided by one global scale, which keeps the
    probe invariant to orthogonal rotations of the representation. The fit
    is full-batch L-BFGS in float64 with a fixed iteration budget.
    """
    x = torch.as_tensor(np.asarray(representations), dtype=torch.float64)
    y_np = np.asarray(labels, dtype=np.int64)
    classes = np.unique(y_np)
    if len(classes) < 2:
        raise ValueError("linear probe needs at least two distinct labels")
    n_types = int(y_np.max()) + 1
    y = torch.as_tensor(y_np)

    order = np.random.default_rng(seed).permutation(len(y_np))
    n_test = max(1, int(round(test_fraction * len(y_np))))
    test_idx, train_idx = torch.as_tensor(order[:n_test]), torch.as_tensor(order[n_test:])

    mean = x[train_idx].mean(dim=0)
    scale = (x[train_idx] - mean).pow(2).sum(dim=1).mean().sqrt().clamp_min(1e-12)
    x = (x - mean) / scale * np.sqrt(x.shape[1])

    weight = torch.zeros(x.shape[1], n_types, dtype=torch.float64, requires_grad=True)
    bias = torch.zeros(n_types, dtype=torch.float64, requires_grad=True)
    opt = torch.optim.LBFGS([weight, bias], lr=1.0, max_iter=max_iter, line_search_fn="strong_wolfe",
                            tolerance_grad=1e-9, tolerance_change=1e-12, history_size=20)
    xtr, ytr = x[train_idx], y[train_idx]

    def closure():
        opt.zero_grad()
        loss = torch.nn.functional.cross_entropy(xtr @ weight + bias, ytr) + l2 * weight.pow(2).sum()
        loss.backward()
        return loss

    opt.step(closure)
    with torch.no_grad():
        pred = (x[test_idx] @ weight + bias).argmax(dim=1)
        acc = float((pred == y[test_idx]).double().mean())
    return ProbeResult(acc, 1.0 / len(classes), class_accuracy)
