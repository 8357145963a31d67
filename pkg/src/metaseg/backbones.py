"""Small segmentation backbones with an explicit feature/head split.

Every model is `phi` (feature extractor, C channels per pixel at input
resolution) followed by `head` (3x3 conv + ReLU + 1x1 logit conv). Meta-learners
address the two groups by parameter name prefix ("phi." / "head.").
Normalization is batch-stat-only (no running stats) so inner-loop adaptation
on a tiny support batch is well defined.
"""

from collections import OrderedDict

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .errors import ConfigError, ShapeError
from .seeding import derive_seed

ARCHS = ("mini-unet", "mini-fcn-res", "mini-efficient", "mini-dilated")


def _bn(c):
    return nn.BatchNorm2d(c, track_running_stats=False)


class _ConvBlock(nn.Sequential):
    def __init__(self, cin, cout):
        super().__init__(nn.Conv2d(cin, cout, 3, padding=1), _bn(cout), nn.ReLU())


class _MiniUnet(nn.Module):
    def __init__(self, cin, c):
        super().__init__()
        self.enc1 = _ConvBlock(cin, c)
        self.enc2 = _ConvBlock(c, 2 * c)
        self.bott = _ConvBlock(2 * c, 4 * c)
        self.pool = nn.MaxPool2d(2)
        self.up1 = nn.ConvTranspose2d(4 * c, 2 * c, 2, stride=2)
        self.dec1 = _ConvBlock(4 * c, 2 * c)
        self.up2 = nn.ConvTranspose2d(2 * c, c, 2, stride=2)
        self.dec2 = _ConvBlock(2 * c, c)

    def forward(self, x):
        e1 = self.enc1(x)
        e2 = self.enc2(self.pool(e1))
        b = self.bott(self.pool(e2))
        d1 = self.dec1(torch.cat([self.up1(b), e2], dim=1))
        return self.dec2(torch.cat([self.up2(d1), e1], dim=1))


class _ResBlock(nn.Module):
    def __init__(self, c):
        super().__init__()
        self.c1 = nn.Conv2d(c, c, 3, padding=1)
        self.b1 = _bn(c)
        self.c2 = nn.Conv2d(c, c, 3, padding=1)
        self.b2 = _bn(c)

    def forward(self, x):
        h = F.relu(self.b1(self.c1(x)))
        return F.relu(x + self.b2(self.c2(h)))


class _MiniFcnRes(nn.Module):
    def __init__(self, cin, c):
        super().__init__()
        self.stem = nn.Sequential(nn.Conv2d(cin, c, 3, stride=2, padding=1), _bn(c), nn.ReLU())
        self.blocks = nn.Sequential(_ResBlock(c), _ResBlock(c), _ResBlock(c))

    def forward(self, x):
        h = self.blocks(self.stem(x))
        return F.interpolate(h, size=x.shape[-2:], mode="bilinear", align_corners=False)


class _DwSep(nn.Module):
    def __init__(self, cin, cout):
        super().__init__()
        self.depth = nn.Conv2d(cin, cin, 3, padding=1, groups=cin)
        self.b1 = _bn(cin)
        self.point = nn.Conv2d(cin, cout, 1)
        self.b2 = _bn(cout)

    def forward(self, x):
        h = F.relu(self.b1(self.depth(x)))
        return F.relu(self.b2(self.point(h)))


def _mini_efficient(cin, c):
    return nn.Sequential(_DwSep(cin, c), _DwSep(c, c), _DwSep(c, c))


def _mini_dilated(cin, c):
    layers = []
    for d, ci in zip((1, 2, 4), (cin, c, c)):
        layers += [nn.Conv2d(ci, c, 3, padding=d, dilation=d), _bn(c), nn.ReLU()]
    return nn.Sequential(*layers)


_PHI_BUILDERS = {
    "mini-unet": _MiniUnet,
    "mini-fcn-res": _MiniFcnRes,
    "mini-efficient": _mini_efficient,
    "mini-dilated": _mini_dilated,
}


class SegModel(nn.Module):
    """phi + head; forward returns (embedding, per-pixel logits)."""

    def __init__(self, arch, width, in_channels, head_in_channels, phi, head):
        super().__init__()
        self.arch = arch
        self.width = width
        self.in_channels = in_channels
        self.head_in_channels = head_in_channels
        self.phi = phi
        self.head = head

    def forward(self, x):
        emb = self.phi(x)
        return emb, self.head(emb).squeeze(1)


def build_model(arch, width, in_channels=1, rng_seed=0, head_in_channels=None) -> SegModel:
    """Deterministic model construction; same seed, same initial parameters."""
    if arch not in ARCHS:
        raise ConfigError(f"unknown arch {arch!r}; choose from {ARCHS}")
    if width < 4:
        raise ConfigError(f"width {width} < 4")
    hin = width if head_in_channels is None else head_in_channels
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(derive_seed(rng_seed, "init", arch, width, in_channels, hin))
        phi = _PHI_BUILDERS[arch](in_channels, width)
        head = nn.Sequential(
            nn.Conv2d(hin, width, 3, padding=1), nn.ReLU(), nn.Conv2d(width, 1, 1)
        )
    return SegModel(arch, width, in_channels, hin, phi, head)


def images_to_batch(images) -> torch.Tensor:
    """Stack HxW arrays (or accept BxHxW / Bx1xHxW) into a float (B,1,H,W)."""
    if isinstance(images, torch.Tensor):
        x = images.float()
    else:
        arr = np.asarray(images, dtype=np.float32)
        if arr.ndim == 2:
            arr = arr[None]
        x = torch.from_numpy(arr)
    if x.dim() == 3:
        x = x.unsqueeze(1)
    if x.dim() != 4:
        raise ShapeError(f"expected (B,1,H,W)-compatible input, got {tuple(x.shape)}")
    return x


def forward(model: SegModel, images):
    x = images_to_batch(images)
    if x.shape[1] != model.in_channels:
        raise ShapeError(f"model expects {model.in_channels} channels, got {x.shape[1]}")
    return model(x)


# ---------------------------------------------------------------------------
# named parameter sets

def named_params(model) -> OrderedDict:
    return OrderedDict(model.named_parameters())


def clone_params(params) -> OrderedDict:
    out = OrderedDict()
    for name, p in params.items():
        out[name] = p.detach().clone().requires_grad_(p.requires_grad)
    return out


def params_equal(a, b) -> bool:
    if list(a) != list(b):
        return False
    return all(torch.equal(a[k], b[k]) for k in a)


def functional_forward(model: SegModel, params, images):
    x = images_to_batch(images)
    if x.shape[1] != model.in_channels:
        raise ShapeError(f"model expects {model.in_channels} channels, got {x.shape[1]}")
    return torch.func.functional_call(model, dict(params), (x,))


# ---------------------------------------------------------------------------
# checkpoints

def save_checkpoint(path, model: SegModel, extra=None):
    torch.save(
        {
            "arch": model.arch,
            "width": model.width,
            "in_channels": model.in_channels,
            "head_in_channels": model.head_in_channels,
            "state": model.state_dict(),
            "extra": extra or {},
        },
        str(path),
    )


def load_checkpoint(path):
    blob = torch.load(str(path), weights_only=True)
    model = build_model(
        blob["arch"],
        blob["width"],
        in_channels=blob["in_channels"],
        head_in_channels=blob["head_in_channels"],
    )
    model.load_state_dict(blob["state"])
    return model, blob["extra"]
