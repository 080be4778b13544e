"""Loss terms of the disentangled contrastive objective.

All functions take probability vectors (post-softmax), not logits, and
return scalar tensors that stay on the autograd graph.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Dict, Optional, Tuple

import torch

EPS = 1e-12

# Which parameter groups each loss is allowed to update.
# "phi" = feature extractor, "f_c" = target head, "f_s" = skin-type head, "H" = projection head.
DEFAULT_SCOPES: Dict[str, Tuple[str, ...]] = {
    "l_c": ("phi", "f_c"),
    "l_conf": ("phi",),
    "l_s": ("f_s",),
    "l_contr": ("phi", "H"),
}

# Literal reading where the confusion term also trains the skin-type head.
LITERAL_SCOPES: Dict[str, Tuple[str, ...]] = {**DEFAULT_SCOPES, "l_conf": ("phi", "f_s")}


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 1.0
    beta: float = 1.0
    tau: float = 0.1

    def __post_init__(self):
        if not self.tau > 0:
            raise ValueError(f"tau must be positive, got {self.tau}")
        if self.alpha < 0 or self.beta < 0:
            raise ValueError(f"loss weights must be non-negative, got alpha={self.alpha} beta={self.beta}")


@dataclass(frozen=True)
class LossReport:
    l_c: float = 0.0
    l_conf: float = 0.0
    l_s: float = 0.0
    l_contr: float = 0.0
    l_total: float = 0.0


def _check_labels(labels: torch.Tensor, n_classes: int) -> None:
    if labels.numel() and (int(labels.min()) < 0 or int(labels.max()) >= n_classes):
        raise ValueError(f"label index out of range [0, {n_classes})")


def _nll(probs: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    _check_labels(labels, probs.shape[-1])
    picked = probs.gather(1, labels.long().view(-1, 1)).squeeze(1)
    return -picked.clamp_min(EPS).log()


def target_loss(class_probs: torch.Tensor, true_conditions: torch.Tensor,
                sample_weights: Optional[torch.Tensor] = None) -> torch.Tensor:
    """Cross-entropy on skin conditions.

    ``sample_weights`` multiplies each per-sample term before averaging
    (used by the reweighting baseline).
    """
    per_sample = _nll(class_probs, true_conditions)
    if sample_weights is not None:
        per_sample = per_sample * sample_weights.to(per_sample.dtype)
    return per_sample.mean()


def sensitive_loss(skin_probs: torch.Tensor, true_types: torch.Tensor) -> torch.Tensor:
    return _nll(skin_probs, true_types).mean()


def confusion_loss(skin_probs: torch.Tensor) -> torch.Tensor:
    """Cross-entropy against the uniform distribution over skin types.

    Bounded below by ln N, reached only when the skin-type head is
    maximally uncertain.
    """
    n_types = skin_probs.shape[-1]
    if n_types < 2:
        raise ValueError("confusion loss needs at least two skin types")
    return -(skin_probs.clamp_min(EPS).log().sum(dim=1) / n_types).mean()


def contrastive_loss(embeddings: torch.Tensor, true_conditions: torch.Tensor, tau: float = 0.1) -> torch.Tensor:
    """Supervised contrastive loss with cosine similarity.

    For each anchor, every other sample with the same condition is a
    positive and every sample of another condition a negative. Each
    positive is scored against the anchor's full negative set only
    (other positives are not in the denominator). Anchors without any
    positive are left out of the mean.
    """
    if embeddings.shape[0] < 2:
        raise ValueError("contrastive loss needs a batch of at least 2")
    if not tau > 0:
        raise ValueError("tau must be positive")
    norms = embeddings.norm(dim=1, keepdim=True)
    if bool((norms == 0).any()):
        raise ValueError("zero-norm embedding: cosine similarity undefined")
    unit = embeddings / norms
    sim = unit @ unit.T / tau

    labels = true_conditions.view(-1)
    same = labels.view(-1, 1) == labels.view(1, -1)
    eye = torch.eye(len(labels), dtype=torch.bool, device=labels.device)
    pos = same & ~eye
    neg = ~same

    has_neg = neg.any(dim=1)
    # rows without negatives get a finite dummy so the backward pass stays NaN-free
    masked = torch.where(neg, sim, torch.full_like(sim, -math.inf))
    masked = torch.where(has_neg.view(-1, 1), masked, torch.zeros_like(sim))
    lse_neg = torch.logsumexp(masked, dim=1)
    lse_neg = torch.where(has_neg, lse_neg, torch.full_like(lse_neg, -math.inf))

    # -log(e^s / (e^s + sum_n e^s_n)) = logaddexp(s, lse_neg) - s
    pair = torch.logaddexp(sim, lse_neg.view(-1, 1)) - sim
    pair = torch.where(pos, pair, torch.zeros_like(pair))

    n_pos = pos.sum(dim=1)
    contributing = n_pos > 0
    if not bool(contributing.any()):
        return embeddings.sum() * 0.0
    per_anchor = pair.sum(dim=1)[contributing] / n_pos[contributing].to(sim.dtype)
    return per_anchor.mean()


def total_loss(l_c, l_conf, l_s, l_contr, weights: LossWeights, scopes: Optional[Dict[str, Tuple[str, ...]]] = None):
    """Weighted sum ``l_c + alpha*l_conf + l_s + beta*l_contr``.

    Returns the total together with the per-loss parameter-scope table.
    Accepts floats or scalar tensors.
    """
    for name, value in (("l_c", l_c), ("l_conf", l_conf), ("l_s", l_s), ("l_contr", l_contr)):
        finite = bool(torch.isfinite(value)) if isinstance(value, torch.Tensor) else math.isfinite(value)
        if not finite:
            raise ValueError(f"{name} is not finite")
    total = l_c + weights.alpha * l_conf + l_s + weights.beta * l_contr
    return total, dict(scopes or DEFAULT_SCOPES)
