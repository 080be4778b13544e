"""Training loop for the baseline, mitigation and disentangled variants."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field, fields, replace
from enum import Enum
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F
from torch.utils.data import DataLoader, WeightedRandomSampler

from .core import DataError, PredictionLog
from .data import (ArrayDataset, DatasetManifest, ManifestDataset, class_balanced_weights, resample_weights,
                   reweight_table)
from .losses import (DEFAULT_SCOPES, LITERAL_SCOPES, LossReport, LossWeights, confusion_loss, contrastive_loss,
                     sensitive_loss, target_loss, total_loss)
from .metrics import fairness_report
from .model import ModelBundle, Variant, build_bundle, predict_proba

logger = logging.getLogger(__name__)


class Method(str, Enum):
    BASE = "base"
    RESM = "resm"
    REWT = "rewt"
    ATRB = "atrb"
    FDC_NO_CL = "fdc_no_cl"
    FDC = "fdc"

    @property
    def variant(self) -> Variant:
        return {Method.ATRB: Variant.ATRB, Method.FDC_NO_CL: Variant.FDC_NO_CL,
                Method.FDC: Variant.FDC}.get(self, Variant.BASE)


@dataclass
class TrainConfig:
    method: Method = Method.FDC
    alpha: float = 1.0
    beta: float = 1.0
    tau: float = 0.1
    lr: float = 1e-4
    lr_step: int = 2
    lr_gamma: float = 0.9
    batch_size: int = 64
    epochs: int = 20
    seed: int = 0
    sampler: str = "auto"
    backbone: str = "resnet18"
    dim: Optional[int] = None
    image_size: int = 224
    augment: bool = True
    weights_path: Optional[str] = None
    literal_scopes: bool = False
    check_scopes: bool = False

    def __post_init__(self):
        self.method = Method(self.method)
        if self.lr <= 0 or self.batch_size <= 0 or self.epochs < 0:
            raise ValueError("lr and batch_size must be positive and epochs non-negative")
        LossWeights(self.alpha, self.beta, self.tau)

    @property
    def loss_weights(self) -> LossWeights:
        return LossWeights(self.alpha, self.beta, self.tau)

    @classmethod
    def from_mapping(cls, values: Dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(values) - known
        if unknown:
            raise ValueError(f"unknown config keys: {', '.join(sorted(unknown))}")
        return cls(**values)

    def to_dict(self) -> Dict:
        d = asdict(self)
        d["method"] = self.method.value
        return d


@dataclass
class TrainState:
    epoch: int = 0
    lr: float = 0.0
    lr_history: List[float] = field(default_factory=list)
    epoch_history: List[LossReport] = field(default_factory=list)
    step_history: List[LossReport] = field(default_factory=list)


def lr_at(config: TrainConfig, epoch: int) -> float:
    """Multiplicative step decay: ``lr * gamma ** (epoch // step)``."""
    return config.lr * config.lr_gamma ** (epoch // config.lr_step)


def make_dataset(manifest: DatasetManifest, images: Optional[np.ndarray], config: TrainConfig, train: bool):
    if images is not None:
        return ArrayDataset(images, manifest)
    return ManifestDataset(manifest, config.image_size, train=train and config.augment, seed=config.seed)


def sampler_weights(config: TrainConfig, manifest: DatasetManifest) -> Optional[np.ndarray]:
    mode = config.sampler
    if mode == "auto":
        mode = "group_balanced" if config.method is Method.RESM else "class_balanced"
    if mode == "uniform":
        return None
    if mode == "group_balanced":
        return resample_weights(manifest).sample_weights(manifest)
    if mode == "class_balanced":
        return class_balanced_weights(manifest).sample_weights(manifest)
    raise ValueError(f"unknown sampler mode {config.sampler!r}")


def _scopes(config: TrainConfig, bundle: ModelBundle) -> Dict[str, Tuple[str, ...]]:
    scopes = dict(LITERAL_SCOPES if config.literal_scopes else DEFAULT_SCOPES)
    if bundle.variant is Variant.ATRB:
        scopes["l_c"] = ("phi", "psi", "f_c")
    return scopes


def compute_losses(bundle: ModelBundle, images, conditions, skin_types, config: TrainConfig,
                   sample_weights: Optional[torch.Tensor] = None) -> Dict[str, torch.Tensor]:
    """Forward pass returning every loss term the variant uses."""
    if bundle.variant is Variant.ATRB:
        probs = predict_proba(bundle, images, skin_types)
        return {"l_c": target_loss(probs, conditions, sample_weights)}
    z = bundle.phi(images)
    losses = {"l_c": target_loss(F.softmax(bundle.f_c(z), dim=1), conditions, sample_weights)}
    if bundle.f_s is not None:
        skin_probs = F.softmax(bundle.f_s(z), dim=1)
        losses["l_conf"] = confusion_loss(skin_probs)
        losses["l_s"] = sensitive_loss(skin_probs, skin_types)
    if bundle.H is not None and len(conditions) >= 2:
        losses["l_contr"] = contrastive_loss(bundle.H(z), conditions, config.tau)
    return losses


def scoped_step(bundle: ModelBundle, optimizer: torch.optim.Optimizer, losses: Dict[str, torch.Tensor],
                coefficients: Dict[str, float], scopes: Dict[str, Tuple[str, ...]], check: bool = False) -> None:
    """One optimizer step where each loss only reaches the parameters in its scope.

    Losses with a zero coefficient are skipped entirely. Parameters that
    receive no gradient keep ``grad=None`` and are left untouched by Adam.
    """
    grads: Dict[int, torch.Tensor] = {}
    active = [name for name in losses if coefficients.get(name, 0.0) != 0.0]
    for k, name in enumerate(active):
        params = [p for scope in scopes[name] for p in bundle.scope(scope)]
        if not params:
            continue
        loss = losses[name] if coefficients[name] == 1.0 else coefficients[name] * losses[name]
        parts = torch.autograd.grad(loss, params, retain_graph=k < len(active) - 1, allow_unused=True)
        for p, g in zip(params, parts):
            if g is None:
                continue
            grads[id(p)] = g if id(p) not in grads else grads[id(p)] + g
    before = {}
    if check:
        before = {n: p.detach().clone() for n, p in bundle.named_parameters() if id(p) not in grads}
    for p in bundle.parameters():
        p.grad = grads.get(id(p))
    optimizer.step()
    for n, p in bundle.named_parameters():
        if n in before and not torch.equal(before[n], p.detach()):
            raise AssertionError(f"parameter {n} changed outside the active loss scopes")


def train(config: TrainConfig, manifest: DatasetManifest, images: Optional[np.ndarray] = None,
          bundle: Optional[ModelBundle] = None) -> Tuple[ModelBundle, TrainState]:
    """Train one model; deterministic given ``config.seed``.

    ``images`` holds pre-decoded uint8 images aligned with the manifest;
    without it, images are decoded (and augmented) from disk.
    """
    if len(manifest) == 0:
        raise DataError("training set is empty")
    torch.use_deterministic_algorithms(True, warn_only=True)
    if bundle is None:
        bundle = build_bundle(config.method.variant, len(manifest.conditions), len(manifest.skin_types),
                              config.backbone, config.dim, config.seed, config.weights_path)
    scopes = _scopes(config, bundle)
    coefficients = {"l_c": 1.0, "l_conf": config.alpha, "l_s": 1.0, "l_contr": config.beta}

    per_sample_weight = None
    if config.method is Method.REWT:
        per_sample_weight = torch.from_numpy(reweight_table(manifest).sample_weights(manifest))

    dataset = make_dataset(manifest, images, config, train=True)
    weights = sampler_weights(config, manifest)
    generator = torch.Generator().manual_seed(config.seed)
    if weights is None:
        sampler = torch.utils.data.RandomSampler(dataset, generator=generator)
    else:
        sampler = WeightedRandomSampler(torch.from_numpy(weights), len(dataset), replacement=True,
                                        generator=generator)
    loader = DataLoader(dataset, batch_size=config.batch_size, sampler=sampler,
                        generator=torch.Generator().manual_seed(config.seed))

    optimizer = torch.optim.Adam(bundle.parameters(), lr=config.lr, betas=(0.9, 0.999), eps=1e-8)
    state = TrainState(lr=config.lr)
    for epoch in range(config.epochs):
        state.epoch = epoch
        state.lr = lr_at(config, epoch)
        state.lr_history.append(state.lr)
        for group in optimizer.param_groups:
            group["lr"] = state.lr
        dataset.set_epoch(epoch)
        bundle.train()
        epoch_reports = []
        for x, y, s, idx in loader:
            w = per_sample_weight[idx] if per_sample_weight is not None else None
            losses = compute_losses(bundle, x, y, s, config, w)
            scoped_step(bundle, optimizer, losses, coefficients, scopes, config.check_scopes)
            report = loss_report(losses, config.loss_weights)
            epoch_reports.append(report)
            state.step_history.append(report)
        state.epoch_history.append(_mean_report(epoch_reports))
        logger.info("epoch %d lr %.3g %s", epoch, state.lr, state.epoch_history[-1])
    state.epoch = config.epochs
    bundle.eval()
    return bundle, state


def loss_report(losses: Dict[str, torch.Tensor], weights: LossWeights) -> LossReport:
    parts = {k: float(losses[k].detach()) if k in losses else 0.0 for k in ("l_c", "l_conf", "l_s", "l_contr")}
    total, _ = total_loss(parts["l_c"], parts["l_conf"], parts["l_s"], parts["l_contr"], weights)
    return LossReport(**parts, l_total=total)


def _mean_report(reports: Sequence[LossReport]) -> LossReport:
    if not reports:
        return LossReport()
    keys = ("l_c", "l_conf", "l_s", "l_contr", "l_total")
    return LossReport(**{k: float(np.mean([getattr(r, k) for r in reports])) for k in keys})


def _eval_batches(bundle: ModelBundle, manifest: DatasetManifest, images, config: TrainConfig, batch_size: int):
    dataset = make_dataset(manifest, images, config, train=False)
    loader = DataLoader(dataset, batch_size=batch_size, shuffle=False)
    bundle.eval()
    with torch.no_grad():
        for x, y, s, idx in loader:
            yield x, y, s, idx


def check_vocabularies(meta: Dict, manifest: DatasetManifest) -> None:
    for key, vocab in (("conditions", manifest.conditions), ("skin_types", manifest.skin_types)):
        if key in meta and tuple(meta[key]) != vocab.names:
            raise DataError(f"{key} vocabulary mismatch: checkpoint {meta[key]} vs data {list(vocab.names)}")


def evaluate(bundle: ModelBundle, manifest: DatasetManifest, images: Optional[np.ndarray] = None,
             config: Optional[TrainConfig] = None, batch_size: int = 256) -> PredictionLog:
    """Evaluation-mode predictions for every sample of ``manifest``."""
    config = config or TrainConfig(image_size=224)
    if len(manifest.conditions) != bundle.n_classes or len(manifest.skin_types) != bundle.n_types:
        raise DataError("checkpoint and test set vocabularies differ in size")
    probs = []
    for x, _, s, _ in _eval_batches(bundle, manifest, images, config, batch_size):
        probs.append(predict_proba(bundle, x, s if bundle.variant is Variant.ATRB else None).double())
    p = torch.cat(probs).numpy() if probs else np.zeros((0, bundle.n_classes))
    return PredictionLog(manifest.ids(), manifest.conditions_array(), p.argmax(axis=1), p,
                         manifest.skin_array(), manifest.conditions, manifest.skin_types)


def extract_representations(bundle: ModelBundle, manifest: DatasetManifest, images: Optional[np.ndarray] = None,
                            config: Optional[TrainConfig] = None, batch_size: int = 256) -> np.ndarray:
    """Frozen feature-extractor outputs z for every sample."""
    config = config or TrainConfig(image_size=224)
    feats = [bundle.phi(x).double() for x, _, _, _ in _eval_batches(bundle, manifest, images, config, batch_size)]
    return torch.cat(feats).numpy()


def sweep(config: TrainConfig, parameter: str, grid: Sequence[float], train_set: DatasetManifest,
          test_set: DatasetManifest, train_images: Optional[np.ndarray] = None,
          test_images: Optional[np.ndarray] = None) -> List[Dict[str, float]]:
    """Train and evaluate once per grid value of ``alpha`` or ``beta``; other settings fixed."""
    if parameter not in ("alpha", "beta"):
        raise ValueError("sweep parameter must be 'alpha' or 'beta'")
    if not grid:
        raise ValueError("sweep grid is empty")
    rows = []
    for value in grid:
        run_config = replace(config, **{parameter: float(value)})
        bundle, _ = train(run_config, train_set, train_images)
        log = evaluate(bundle, test_set, test_images, run_config)
        report = fairness_report(log)
        rows.append({"alpha": run_config.alpha, "beta": run_config.beta, "accuracy": report.accuracy,
                     "pqd": report.pqd, "dpm": report.dpm, "eom": report.eom})
    return rows
