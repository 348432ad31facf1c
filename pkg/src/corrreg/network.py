"""Registration network: twin feature extractors, correlation layer and regression head."""

from __future__ import annotations

import copy
import logging
import time
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
import torchvision

from .core import AffineParams, GridImage
from .errors import CheckpointMismatch, ConfigError
from .ingest import NETWORK_SIZE, RegistrationPair, prepare_network_input

log = logging.getLogger(__name__)

EPS = 1e-8
CHECKPOINT_FORMAT = 1
BACKBONES = ("vgg16_block4", "resnet101_stage", "radresnet50_stage")
IDENTITY = (1.0, 0.0, 0.0, 0.0, 1.0, 0.0)


@dataclass
class NetworkConfig:
    backbone: str = "vgg16_block4"
    fine_tune_last: bool = True
    alpha: float = 0.1
    correlation: str = "pearson"
    head_channels: tuple[int, int] = (128, 64)
    head_kernels: tuple[int, int] = (7, 5)
    fc_init_std: float = 1e-3
    backbone_weights: Optional[str] = None

    def __post_init__(self):
        self.head_channels = tuple(int(c) for c in self.head_channels)
        self.head_kernels = tuple(int(k) for k in self.head_kernels)
        if self.backbone not in BACKBONES:
            raise ConfigError(f"unknown backbone {self.backbone!r}; choose from {BACKBONES}")
        if self.correlation not in ("pearson", "cosine"):
            raise ConfigError(f"correlation must be 'pearson' or 'cosine', got {self.correlation!r}")
        if not self.alpha >= 0:
            raise ConfigError(f"alpha must be >= 0, got {self.alpha}")

    def to_dict(self) -> dict:
        return asdict(self)

    def architecture(self) -> dict:
        """Fields that determine parameter shapes and semantics (weights path excluded)."""
        d = self.to_dict()
        d.pop("backbone_weights")
        return d


# --- building blocks -------------------------------------------------------


def feature_l2norm(f: torch.Tensor, eps: float = EPS) -> torch.Tensor:
    """Unit-normalize every spatial fiber along dim 1; zero fibers stay zero."""
    return F.normalize(f, p=2, dim=1, eps=eps)


def correlate(f_m: torch.Tensor, f_f: torch.Tensor, mode: str = "pearson", eps: float = EPS) -> torch.Tensor:
    """Pairwise correlation volume.

    Inputs are ``(B, d, H, W)`` moving and fixed maps.  The output has shape
    ``(B, H*W, H, W)``: channel ``k = p + H*q`` holds the correlation between
    the moving fiber at each ``(i, j)`` and the fixed fiber at row ``p``,
    column ``q``.  ``pearson`` centres fibers along d first, so constant
    fibers correlate to 0.
    """
    if f_m.shape != f_f.shape:
        raise ValueError(f"feature maps differ in shape: {tuple(f_m.shape)} vs {tuple(f_f.shape)}")
    b, d, h, w = f_m.shape
    if mode == "pearson":
        f_m = f_m - f_m.mean(dim=1, keepdim=True)
        f_f = f_f - f_f.mean(dim=1, keepdim=True)
    elif mode != "cosine":
        raise ValueError(f"unknown correlation mode {mode!r}")
    f_m = F.normalize(f_m, p=2, dim=1, eps=eps).reshape(b, d, h * w)
    # column-major flattening of the fixed grid: k = p + H*q
    f_f = F.normalize(f_f, p=2, dim=1, eps=eps).transpose(2, 3).reshape(b, d, h * w)
    corr = torch.bmm(f_f.transpose(1, 2), f_m)
    return corr.view(b, h * w, h, w)


def correlation_index(p: int, q: int, h: int) -> int:
    return p + h * q


def correlation_position(k: int, h: int) -> tuple[int, int]:
    return k % h, k // h


def normalize_correlation(c: torch.Tensor, eps: float = EPS) -> torch.Tensor:
    """ReLU then per-location L2 normalization over the correlation channels."""
    return F.normalize(F.relu(c), p=2, dim=1, eps=eps)


def anchor(theta_hat: torch.Tensor, alpha: float) -> torch.Tensor:
    ident = torch.tensor(IDENTITY, dtype=theta_hat.dtype, device=theta_hat.device)
    return alpha * theta_hat + ident


class RegressionHead(nn.Module):
    """Two conv-BN-ReLU blocks without padding, then a linear layer to 6 outputs."""

    def __init__(self, grid: tuple[int, int] = (14, 14), channels=(128, 64), kernels=(7, 5), fc_init_std=1e-3):
        super().__init__()
        h, w = grid
        c1, c2 = channels
        k1, k2 = kernels
        self.grid = (h, w)
        self.conv = nn.Sequential(
            nn.Conv2d(h * w, c1, kernel_size=k1),
            nn.BatchNorm2d(c1),
            nn.ReLU(inplace=True),
            nn.Conv2d(c1, c2, kernel_size=k2),
            nn.BatchNorm2d(c2),
            nn.ReLU(inplace=True),
        )
        oh, ow = h - k1 - k2 + 2, w - k1 - k2 + 2
        if oh < 1 or ow < 1:
            raise ConfigError(f"head kernels {kernels} too large for a {grid} grid")
        self.fc = nn.Linear(c2 * oh * ow, 6)
        nn.init.normal_(self.fc.weight, std=fc_init_std)
        nn.init.zeros_(self.fc.bias)

    def forward(self, c: torch.Tensor) -> torch.Tensor:
        x = self.conv(c)
        return self.fc(x.flatten(1))


def _load_weights(module: nn.Module, path: Optional[str]) -> None:
    if not path:
        return
    state = torch.load(path, map_location="cpu", weights_only=True)
    if "state_dict" in state:
        state = state["state_dict"]
    own = module.state_dict()
    usable = {k: v for k, v in state.items() if k in own and own[k].shape == v.shape}
    if not usable:
        raise ConfigError(f"no parameters in {path} match the backbone")
    module.load_state_dict(usable, strict=False)
    log.info("loaded %d/%d backbone tensors from %s", len(usable), len(own), path)


def build_backbone(name: str, weights: Optional[str] = None) -> tuple[nn.Sequential, nn.Sequential]:
    """(prefix, last) halves of a backbone cropped to stride 16."""
    if name == "vgg16_block4":
        net = torchvision.models.vgg16(weights=None)
        _load_weights(net, weights)
        feats = net.features
        # 21 = conv4_3; 23 = pool4, output 512 x 14 x 14 at 224 x 224
        return nn.Sequential(*feats[:21]), nn.Sequential(*feats[21:24])
    if name in ("resnet101_stage", "radresnet50_stage"):
        ctor = torchvision.models.resnet101 if name == "resnet101_stage" else torchvision.models.resnet50
        net = ctor(weights=None)
        _load_weights(net, weights)
        prefix = nn.Sequential(
            net.conv1, net.bn1, net.relu, net.maxpool, net.layer1, net.layer2, *list(net.layer3.children())[:-1]
        )
        return prefix, nn.Sequential(list(net.layer3.children())[-1])
    raise ConfigError(f"unknown backbone {name!r}")


class FeatureExtractor(nn.Module):
    """Backbone split into a frozen part and an optionally trainable tail."""

    def __init__(self, backbone: str, fine_tune_last: bool, weights: Optional[str] = None):
        super().__init__()
        prefix, last = build_backbone(backbone, weights)
        if fine_tune_last:
            self.frozen, self.tail = prefix, last
        else:
            self.frozen, self.tail = nn.Sequential(*prefix, *last), nn.Sequential()
        for p in self.frozen.parameters():
            p.requires_grad_(False)

    def train(self, mode: bool = True):
        super().train(mode)
        self.frozen.eval()
        return self

    def frozen_features(self, x: torch.Tensor) -> torch.Tensor:
        with torch.no_grad():
            return self.frozen(x)

    def finish(self, z: torch.Tensor) -> torch.Tensor:
        return feature_l2norm(self.tail(z))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.finish(self.frozen_features(x))


class RegistrationNet(nn.Module):
    def __init__(self, cfg: NetworkConfig | None = None):
        super().__init__()
        self.cfg = cfg or NetworkConfig()
        self.fixed_extractor = FeatureExtractor(self.cfg.backbone, self.cfg.fine_tune_last, self.cfg.backbone_weights)
        # branches start as clones and diverge only through training
        self.moving_extractor = copy.deepcopy(self.fixed_extractor)
        grid = (NETWORK_SIZE[0] // 16, NETWORK_SIZE[1] // 16)
        self.head = RegressionHead(grid, self.cfg.head_channels, self.cfg.head_kernels, self.cfg.fc_init_std)

    def trainable_parameters(self) -> list[nn.Parameter]:
        return [p for p in self.parameters() if p.requires_grad]

    def regress(self, f_m: torch.Tensor, f_f: torch.Tensor) -> torch.Tensor:
        c = normalize_correlation(correlate(f_m, f_f, self.cfg.correlation))
        return anchor(self.head(c), self.cfg.alpha)

    def forward(self, moving: torch.Tensor, fixed: torch.Tensor) -> torch.Tensor:
        f_m = self.moving_extractor(moving)
        f_f = self.fixed_extractor(fixed)
        return self.regress(f_m, f_f)


def build_model(cfg: NetworkConfig | None = None, seed: int = 0) -> RegistrationNet:
    torch.manual_seed(seed)
    return RegistrationNet(cfg)


# --- numpy-facing helpers --------------------------------------------------


def image_tensor(img: GridImage) -> torch.Tensor:
    """Prepared 224x224x3 GridImage -> (1, 3, 224, 224) float32 tensor."""
    if img.pixels.shape != (*NETWORK_SIZE, 3):
        raise ValueError(f"network input must be {NETWORK_SIZE[0]}x{NETWORK_SIZE[1]}x3, got {img.pixels.shape}")
    if not img.standardized:
        raise ValueError("network input must be standardized (use prepare_network_input)")
    return torch.from_numpy(np.ascontiguousarray(img.pixels.transpose(2, 0, 1), dtype=np.float32))[None]


def extract_features(model: RegistrationNet, img: GridImage, branch: str) -> np.ndarray:
    """(H, W, d) L2-normalized feature map from ``moving`` or ``fixed`` branch."""
    x = image_tensor(img)
    ext = {"moving": model.moving_extractor, "fixed": model.fixed_extractor}[branch]
    ext.eval()
    with torch.no_grad():
        f = ext(x)
    return f[0].permute(1, 2, 0).numpy()


def register(pair: RegistrationPair, model: RegistrationNet) -> tuple[AffineParams, dict]:
    """Estimate the sampling map from the pair's fixed grid into its moving image.

    Masks are never consulted.  Timing holds ``network_seconds`` (forward pass
    only) and ``total_seconds`` (preprocessing plus forward pass).
    """
    model.eval()
    t0 = time.perf_counter()
    moving = image_tensor(prepare_network_input(pair.moving))
    fixed = image_tensor(prepare_network_input(pair.fixed))
    t1 = time.perf_counter()
    with torch.no_grad():
        theta = model(moving, fixed)[0].double().numpy()
    t2 = time.perf_counter()
    return AffineParams(theta), {"network_seconds": t2 - t1, "total_seconds": t2 - t0}


# --- checkpoints -----------------------------------------------------------


def save_checkpoint(path, model: RegistrationNet, meta: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format_version": CHECKPOINT_FORMAT,
        "network_config": model.cfg.to_dict(),
        "state_dict": model.state_dict(),
        "meta": dict(meta or {}),
    }
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save(payload, tmp)
    tmp.replace(path)
    return path


def load_checkpoint(path, expected: NetworkConfig | None = None) -> tuple[RegistrationNet, dict]:
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if payload.get("format_version") != CHECKPOINT_FORMAT:
        raise CheckpointMismatch(f"{path}: unsupported checkpoint format {payload.get('format_version')}")
    cfg = NetworkConfig(**payload["network_config"])
    if expected is not None and expected.architecture() != cfg.architecture():
        diff = {k: (v, cfg.architecture()[k]) for k, v in expected.architecture().items() if cfg.architecture()[k] != v}
        raise CheckpointMismatch(f"{path}: network config mismatch (expected, stored): {diff}")
    # weights come from the state dict; skip re-reading the original backbone file
    model = RegistrationNet(NetworkConfig(**{**cfg.to_dict(), "backbone_weights": None}))
    model.cfg = cfg
    model.load_state_dict(payload["state_dict"])
    model.eval()
    return model, payload.get("meta", {})
