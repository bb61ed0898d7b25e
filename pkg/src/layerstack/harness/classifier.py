"""Tiny colour/shape classifier used to score prompt alignment of generated layers."""
from __future__ import annotations

import re
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from ..layerspace import LayerSet, composite
from ..textcond import COLORS, SHAPES
from .checkpoint import CheckpointError, read_container, save_module

_PHRASE = re.compile(r"^an? (\w+) (\w+)")


def parse_attributes(prompt: str) -> tuple[str, str] | None:
    """``"a red circle"`` -> ("red", "circle"); None when the prompt is not a shape phrase."""
    m = _PHRASE.match(prompt.strip().lower())
    if not m or m.group(1) not in COLORS or m.group(2) not in SHAPES:
        return None
    return m.group(1), m.group(2)


class AttributeClassifier(nn.Module):
    """Input: masked RGB region plus the mask (4 channels)."""

    def __init__(self, width: int = 32):
        super().__init__()
        self.width = width
        self.features = nn.Sequential(
            nn.Conv2d(4, width, 3, padding=1), nn.ReLU(),
            nn.Conv2d(width, width, 3, padding=1, stride=2), nn.ReLU(),
            nn.Conv2d(width, 2 * width, 3, padding=1, stride=2), nn.ReLU(),
            nn.Conv2d(2 * width, 2 * width, 3, padding=1), nn.ReLU(),
        )
        self.color_head = nn.Linear(4 * width + 3, len(COLORS))
        self.shape_head = nn.Linear(4 * width + 3, len(SHAPES))

    def forward(self, x):
        h = self.features(x)
        pooled = torch.cat([h.mean(dim=(2, 3)), h.amax(dim=(2, 3))], dim=1)
        m = x[:, 3:4]
        area = m.sum(dim=(2, 3)).clamp_min(1.0)
        mean_rgb = (x[:, :3] * m).sum(dim=(2, 3)) / area
        z = torch.cat([pooled, mean_rgb], dim=1)
        return self.color_head(z), self.shape_head(z)


def region_inputs(ls: LayerSet) -> list[torch.Tensor]:
    """One (4, H, W) input per foreground: the composite restricted to its mask."""
    comp = composite(ls).pixels
    out = []
    for fg in ls.foregrounds:
        m = fg.mask.grid
        x = np.concatenate([comp * m[..., None], m[..., None]], axis=-1)
        out.append(torch.from_numpy(x).permute(2, 0, 1).float())
    return out


def build_examples(samples) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    xs, cs, ss = [], [], []
    for ls in samples:
        for x, fg in zip(region_inputs(ls), ls.foregrounds):
            attr = parse_attributes(fg.prompt)
            if attr is None:
                continue
            xs.append(x)
            cs.append(COLORS.index(attr[0]))
            ss.append(SHAPES.index(attr[1]))
    return torch.stack(xs), torch.tensor(cs), torch.tensor(ss)


def train_classifier(samples, steps: int = 600, batch: int = 64, seed: int = 0, lr: float = 2e-3) -> AttributeClassifier:
    x, c, s = build_examples(samples)
    torch.manual_seed(seed)
    model = AttributeClassifier()
    opt = torch.optim.Adam(model.parameters(), lr=lr)
    g = torch.Generator().manual_seed(seed)
    for _ in range(steps):
        idx = torch.randint(0, len(x), (batch,), generator=g)
        lc, ls_ = model(x[idx])
        loss = F.cross_entropy(lc, c[idx]) + F.cross_entropy(ls_, s[idx])
        opt.zero_grad()
        loss.backward()
        opt.step()
    model.eval()
    return model


@dataclass
class Predictions:
    color: np.ndarray
    shape: np.ndarray


def predict(model: AttributeClassifier, x: torch.Tensor) -> Predictions:
    with torch.no_grad():
        lc, ls_ = model(x)
    return Predictions(lc.argmax(1).numpy(), ls_.argmax(1).numpy())


def accuracy(model: AttributeClassifier, samples) -> tuple[float, float]:
    x, c, s = build_examples(samples)
    p = predict(model, x)
    return float((p.color == c.numpy()).mean()), float((p.shape == s.numpy()).mean())


def save_classifier(path, model: AttributeClassifier, meta: dict | None = None):
    return save_module(path, model, "attribute-classifier", {"width": model.width}, meta)


def load_classifier(path) -> AttributeClassifier:
    header, tensors = read_container(path)
    if header.get("kind") != "attribute-classifier":
        raise CheckpointError(f"{path} is not an attribute classifier checkpoint")
    model = AttributeClassifier(**header["config"])
    model.load_state_dict(tensors)
    model.eval()
    return model
