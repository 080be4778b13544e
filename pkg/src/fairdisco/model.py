"""Network variants built from a shared feature extractor and swappable heads."""

from __future__ import annotations

import io
import json
import zipfile
from enum import Enum
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

PROJECTION_HIDDEN = 512
PROJECTION_OUT = 128


class Variant(str, Enum):
    BASE = "BASE"
    ATRB = "ATRB"
    FDC_NO_CL = "FDC_NO_CL"
    FDC = "FDC"


class TinyBackbone(nn.Module):
    """Three conv blocks and a global average pool; CPU-friendly stand-in for ResNet-18."""

    def __init__(self, out_dim: int = 64):
        super().__init__()
        self.out_dim = out_dim
        self.conv1 = nn.Conv2d(3, 16, 3)
        self.conv2 = nn.Conv2d(16, 32, 3)
        self.conv3 = nn.Conv2d(32, out_dim, 3)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = F.max_pool2d(F.relu(self.conv1(x)), 2)
        x = F.max_pool2d(F.relu(self.conv2(x)), 2)
        x = F.relu(self.conv3(x))
        return x.mean(dim=(2, 3))


def resnet18_backbone(weights_path: Optional[str] = None) -> nn.Module:
    """ResNet-18 with its final fully connected layer removed (512-d output)."""
    from torchvision.models import resnet18

    net = resnet18(weights=None)
    if weights_path:
        state = torch.load(weights_path, map_location="cpu", weights_only=True)
        state = {k: v for k, v in state.items() if not k.startswith("fc.")}
        net.load_state_dict(state, strict=False)
    net.fc = nn.Identity()
    net.out_dim = 512
    return net


def make_backbone(name: str, dim: Optional[int] = None, weights_path: Optional[str] = None) -> nn.Module:
    if name == "tiny":
        return TinyBackbone(dim or 64)
    if name == "resnet18":
        if dim not in (None, 512):
            raise ValueError("resnet18 backbone has a fixed 512-d output")
        return resnet18_backbone(weights_path)
    raise ValueError(f"unknown backbone {name!r}")


class ModelBundle(nn.Module):
    """Feature extractor plus the heads a variant needs.

    Submodule names double as parameter-scope names: ``phi``, ``f_c``,
    ``f_s``, ``H`` and ``psi``. Heads hold linear maps; softmax is applied
    in the forward helpers.
    """

    def __init__(self, variant: Variant, n_classes: int, n_types: int, backbone: str = "tiny",
                 dim: Optional[int] = None, weights_path: Optional[str] = None):
        super().__init__()
        self.variant = Variant(variant)
        self.backbone_name = backbone
        self.n_classes = n_classes
        self.n_types = n_types
        # construction order fixes the RNG draws: phi and f_c first so every variant shares them
        self.phi = make_backbone(backbone, dim, weights_path)
        self.dim = self.phi.out_dim
        self.f_c = nn.Linear(self.dim, n_classes)
        self.f_s = self.H = self.psi = None
        if self.variant in (Variant.FDC, Variant.FDC_NO_CL):
            self.f_s = nn.Linear(self.dim, n_types)
        if self.variant is Variant.FDC:
            self.H = nn.Sequential(
                nn.Linear(self.dim, PROJECTION_HIDDEN), nn.ReLU(), nn.Linear(PROJECTION_HIDDEN, PROJECTION_OUT)
            )
        if self.variant is Variant.ATRB:
            self.psi = nn.Linear(n_types, self.dim, bias=False)

    def scope(self, name: str) -> List[nn.Parameter]:
        module = getattr(self, name, None)
        return [] if module is None else list(module.parameters())

    def attribute_embedding(self, skin_types: torch.Tensor) -> torch.Tensor:
        if (skin_types < 0).any() or (skin_types >= self.n_types).any():
            raise ValueError("attribute-aware model needs a known skin type for every sample")
        onehot = F.one_hot(skin_types.long(), self.n_types).to(self.psi.weight.dtype)
        return self.psi(onehot)

    def declared_parameter_count(self) -> int:
        D, M, N = self.dim, self.n_classes, self.n_types
        heads = D * M + M
        if self.f_s is not None:
            heads += D * N + N
        if self.H is not None:
            heads += D * PROJECTION_HIDDEN + PROJECTION_HIDDEN + PROJECTION_HIDDEN * PROJECTION_OUT + PROJECTION_OUT
        if self.psi is not None:
            heads += N * D
        return heads + sum(p.numel() for p in self.phi.parameters())


def forward_base(bundle: ModelBundle, images: torch.Tensor) -> torch.Tensor:
    if bundle.variant is Variant.ATRB:
        raise ValueError("ATRB models need skin types; use forward_atrb")
    return F.softmax(bundle.f_c(bundle.phi(images)), dim=1)


def forward_atrb(bundle: ModelBundle, images: torch.Tensor, skin_types: torch.Tensor) -> torch.Tensor:
    if bundle.variant is not Variant.ATRB:
        raise ValueError(f"forward_atrb needs an ATRB model, got {bundle.variant.value}")
    z = bundle.phi(images) + bundle.attribute_embedding(skin_types)
    return F.softmax(bundle.f_c(z), dim=1)


def forward_fairdisco(bundle: ModelBundle, images: torch.Tensor
                      ) -> Tuple[torch.Tensor, torch.Tensor, Optional[torch.Tensor]]:
    """Class probabilities, skin-type probabilities and projections from one shared z."""
    if bundle.variant not in (Variant.FDC, Variant.FDC_NO_CL):
        raise ValueError(f"forward_fairdisco needs an FDC model, got {bundle.variant.value}")
    z = bundle.phi(images)
    class_probs = F.softmax(bundle.f_c(z), dim=1)
    skin_probs = F.softmax(bundle.f_s(z), dim=1)
    r = bundle.H(z) if bundle.H is not None else None
    return class_probs, skin_probs, r


def predict_proba(bundle: ModelBundle, images: torch.Tensor, skin_types: Optional[torch.Tensor] = None) -> torch.Tensor:
    if bundle.variant is Variant.ATRB:
        if skin_types is None:
            raise ValueError("attribute-aware model needs skin types at inference")
        return forward_atrb(bundle, images, skin_types)
    return forward_base(bundle, images)


def build_bundle(variant, n_classes: int, n_types: int, backbone: str = "tiny", dim: Optional[int] = None,
                 seed: int = 0, weights_path: Optional[str] = None) -> ModelBundle:
    torch.manual_seed(seed)
    return ModelBundle(Variant(variant), n_classes, n_types, backbone, dim, weights_path)


# -- checkpoint archive -------------------------------------------------------

_ZIP_DATE = (1980, 1, 1, 0, 0, 0)


def _write_entry(zf: zipfile.ZipFile, name: str, payload: bytes) -> None:
    info = zipfile.ZipInfo(name, date_time=_ZIP_DATE)
    info.compress_type = zipfile.ZIP_DEFLATED
    zf.writestr(info, payload)


def save_checkpoint(bundle: ModelBundle, path, metadata: Dict) -> None:
    """Write named parameter arrays and a metadata record into one zip archive.

    Entry timestamps are pinned so identical weights give identical bytes.
    """
    meta = {
        **metadata,
        "variant": bundle.variant.value,
        "backbone": bundle.backbone_name,
        "D": bundle.dim,
        "M": bundle.n_classes,
        "N": bundle.n_types,
    }
    with zipfile.ZipFile(path, "w") as zf:
        _write_entry(zf, "metadata.json", json.dumps(meta, indent=2, sort_keys=True).encode())
        for key, tensor in sorted(bundle.state_dict().items()):
            buf = io.BytesIO()
            np.save(buf, tensor.detach().cpu().numpy(), allow_pickle=False)
            _write_entry(zf, f"params/{key}.npy", buf.getvalue())


def load_checkpoint(path) -> Tuple[ModelBundle, Dict]:
    path = Path(path)
    with zipfile.ZipFile(path) as zf:
        meta = json.loads(zf.read("metadata.json"))
        bundle = ModelBundle(Variant(meta["variant"]), meta["M"], meta["N"], meta["backbone"], meta["D"])
        state = {}
        for name in zf.namelist():
            if name.startswith("params/"):
                state[name[len("params/"):-len(".npy")]] = torch.from_numpy(
                    np.load(io.BytesIO(zf.read(name)), allow_pickle=False))
    bundle.load_state_dict(state)
    bundle.eval()
    return bundle, meta
