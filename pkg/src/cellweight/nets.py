"""Detector (inception-block U-Net) and patch classifier.

Both models take channels-last input ``(B, H, W, 3)`` to match how images
are stored on disk, and transpose internally.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from pathlib import Path

import torch
from torch import nn


@dataclass(frozen=True)
class DetectorSpec:
    input_shape: tuple[int, int, int] = (256, 256, 3)
    levels: int = 4
    base_filters: int = 16
    batch_norm: bool = False

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(self.input_shape))
        if self.levels < 1 or self.base_filters < 4:
            raise ValueError("levels must be >= 1 and base_filters >= 4")


@dataclass(frozen=True)
class ClassifierSpec:
    input_shape: tuple[int, int, int] = (28, 28, 3)
    conv_filters: tuple[int, ...] = (16, 32, 64)
    dense_units: tuple[int, ...] = (200, 3)

    def __post_init__(self):
        for name in ("input_shape", "conv_filters", "dense_units"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        if self.dense_units[-1] < 2:
            raise ValueError("classifier needs at least 2 classes")

    @property
    def n_classes(self) -> int:
        return self.dense_units[-1]


@dataclass(frozen=True)
class InitSpec:
    scheme: str = "glorot_uniform"
    optimizer: str = "adam"
    learning_rate: float = 1e-4

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")


def _conv(cin: int, cout: int, k: int, batch_norm: bool) -> nn.Sequential:
    layers: list[nn.Module] = [nn.Conv2d(cin, cout, k, padding=k // 2)]
    if batch_norm:
        layers.append(nn.BatchNorm2d(cout))
    layers.append(nn.ReLU())
    return nn.Sequential(*layers)


class InceptionBlock(nn.Module):
    """Parallel 1x1 / 3x3 / factorized 5x5 / pool+1x1 branches, concatenated."""

    def __init__(self, cin: int, cout: int, batch_norm: bool = False):
        super().__init__()
        q = cout // 4
        widths = [cout - 3 * q, q, q, q]
        self.b1 = _conv(cin, widths[0], 1, batch_norm)
        self.b3 = _conv(cin, widths[1], 3, batch_norm)
        self.b5 = nn.Sequential(_conv(cin, widths[2], 3, batch_norm), _conv(widths[2], widths[2], 3, batch_norm))
        self.bp = nn.Sequential(nn.MaxPool2d(3, stride=1, padding=1), _conv(cin, widths[3], 1, batch_norm))

    def forward(self, x):
        return torch.cat([self.b1(x), self.b3(x), self.b5(x), self.bp(x)], dim=1)


class Detector(nn.Module):
    def __init__(self, spec: DetectorSpec):
        super().__init__()
        self.spec = spec
        f, bn = spec.base_filters, spec.batch_norm
        cin = spec.input_shape[2]
        self.down = nn.ModuleList()
        for level in range(spec.levels):
            self.down.append(InceptionBlock(cin, f << level, bn))
            cin = f << level
        self.pool = nn.MaxPool2d(2)
        self.bottom = InceptionBlock(cin, f << spec.levels, bn)
        self.up = nn.ModuleList()
        self.dec = nn.ModuleList()
        cin = f << spec.levels
        for level in reversed(range(spec.levels)):
            width = f << level
            self.up.append(nn.Sequential(nn.ConvTranspose2d(cin, width, 2, stride=2), nn.ReLU()))
            self.dec.append(InceptionBlock(2 * width, width, bn))
            cin = width
        self.head = nn.Conv2d(f, 1, 1)
        self.out = nn.Sigmoid()

    def forward(self, x):
        x = x.permute(0, 3, 1, 2)
        div = 1 << self.spec.levels
        if x.shape[2] % div or x.shape[3] % div:
            raise ValueError(f"spatial size {tuple(x.shape[2:])} not divisible by {div}")
        skips = []
        for block in self.down:
            x = block(x)
            skips.append(x)
            x = self.pool(x)
        x = self.bottom(x)
        for up, dec, skip in zip(self.up, self.dec, reversed(skips)):
            x = dec(torch.cat([up(x), skip], dim=1))
        return self.out(self.head(x)).permute(0, 2, 3, 1)


class Classifier(nn.Module):
    """VGG-style: 3x3 conv + ReLU + 2x2 max-pool per stage, then dense layers."""

    def __init__(self, spec: ClassifierSpec):
        super().__init__()
        self.spec = spec
        h, w, cin = spec.input_shape
        layers: list[nn.Module] = []
        for filters in spec.conv_filters:
            layers += [nn.Conv2d(cin, filters, 3, padding=1), nn.ReLU(), nn.MaxPool2d(2)]
            cin, h, w = filters, h // 2, w // 2
        self.features = nn.Sequential(*layers)
        dense: list[nn.Module] = [nn.Flatten()]
        width = cin * h * w
        for units in spec.dense_units[:-1]:
            dense += [nn.Linear(width, units), nn.ReLU()]
            width = units
        dense.append(nn.Linear(width, spec.dense_units[-1]))
        self.dense = nn.Sequential(*dense)
        self.out = nn.Softmax(dim=1)

    def forward(self, x):
        if tuple(x.shape[1:]) != self.spec.input_shape:
            raise ValueError(f"expected input (B, {', '.join(map(str, self.spec.input_shape))}), got {tuple(x.shape)}")
        return self.out(self.dense(self.features(x.permute(0, 3, 1, 2))))


def glorot_init(model: nn.Module, seed: int) -> nn.Module:
    gen = torch.Generator().manual_seed(seed)
    for m in model.modules():
        if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d, nn.Linear)):
            nn.init.xavier_uniform_(m.weight, generator=gen)
            nn.init.zeros_(m.bias)
    return model


def build_detector(spec: DetectorSpec = DetectorSpec(), seed: int = 0) -> Detector:
    h, w, _ = spec.input_shape
    div = 1 << spec.levels
    if h % div or w % div:
        raise ValueError(f"input {h}x{w} not divisible by 2**levels = {div}")
    return glorot_init(Detector(spec), seed)


def build_classifier(spec: ClassifierSpec = ClassifierSpec(), seed: int = 0) -> Classifier:
    return glorot_init(Classifier(spec), seed)


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters() if p.requires_grad)


def save_model(model: Detector | Classifier, path: str | Path, **extra) -> Path:
    """Self-describing checkpoint: model kind, spec fields and weights."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    kind = "detector" if isinstance(model, Detector) else "classifier"
    torch.save({"kind": kind, "spec": asdict(model.spec), "state_dict": model.state_dict(), **extra}, path)
    return path


def load_model(path: str | Path) -> Detector | Classifier:
    ckpt = torch.load(path, map_location="cpu", weights_only=True)
    if ckpt["kind"] == "detector":
        model = Detector(DetectorSpec(**ckpt["spec"]))
    elif ckpt["kind"] == "classifier":
        model = Classifier(ClassifierSpec(**ckpt["spec"]))
    else:
        raise ValueError(f"{path}: unknown model kind {ckpt['kind']!r}")
    model.load_state_dict(ckpt["state_dict"])
    model.eval()
    return model
