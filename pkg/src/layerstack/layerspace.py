"""Layer data model and compositing.

A composable image is a background layer plus ``k`` foreground layers. Every
layer carries an RGB image in [-1, 1] and a single-channel mask in [0, 1].
After binarization the masks partition the pixel grid, so compositing is a
plain masked sum.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import ndimage

MIN_LAYERS = 2
MAX_LAYERS = 4
OVERLAP_TOL = 1e-6


class LayerValidationError(ValueError):
    """Raised when a layer set breaks a structural invariant."""


def _as_mask(grid) -> np.ndarray:
    arr = np.asarray(grid, dtype=np.float32)
    if arr.ndim != 2:
        raise LayerValidationError(f"mask must be H x W, got shape {arr.shape}")
    return arr


@dataclass(frozen=True)
class LayerMask:
    grid: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "grid", _as_mask(self.grid))

    @property
    def height(self) -> int:
        return self.grid.shape[0]

    @property
    def width(self) -> int:
        return self.grid.shape[1]

    @property
    def binary(self) -> bool:
        return bool(np.all((self.grid == 0) | (self.grid == 1)))

    @property
    def area_fraction(self) -> float:
        return float(self.grid.mean())

    def check_range(self):
        if not np.all((self.grid >= 0) & (self.grid <= 1)):
            raise LayerValidationError("mask values must lie in [0, 1]")


def _as_image(pixels) -> np.ndarray:
    arr = np.asarray(pixels, dtype=np.float32)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise LayerValidationError(f"image must be H x W x 3, got shape {arr.shape}")
    return arr


@dataclass(frozen=True)
class ForegroundLayer:
    image: np.ndarray
    mask: LayerMask
    prompt: str

    def __post_init__(self):
        object.__setattr__(self, "image", _as_image(self.image))
        if not isinstance(self.mask, LayerMask):
            object.__setattr__(self, "mask", LayerMask(self.mask))
        if self.image.shape[:2] != self.mask.grid.shape:
            raise LayerValidationError(
                f"image {self.image.shape[:2]} and mask {self.mask.grid.shape} differ in size"
            )


@dataclass(frozen=True)
class LayerSet:
    background_image: np.ndarray
    background_mask: LayerMask
    foregrounds: tuple[ForegroundLayer, ...]
    global_prompt: str
    background_prompt: str = "the background"

    def __post_init__(self):
        object.__setattr__(self, "background_image", _as_image(self.background_image))
        if not isinstance(self.background_mask, LayerMask):
            object.__setattr__(self, "background_mask", LayerMask(self.background_mask))
        object.__setattr__(self, "foregrounds", tuple(self.foregrounds))

    @property
    def num_layers(self) -> int:
        return 1 + len(self.foregrounds)

    @property
    def shape(self) -> tuple[int, int]:
        return self.background_mask.grid.shape

    @property
    def layer_prompts(self) -> list[str]:
        return [self.background_prompt] + [fg.prompt for fg in self.foregrounds]

    def images(self) -> np.ndarray:
        """Stacked layer images, background first: (layers, H, W, 3)."""
        return np.stack([self.background_image] + [fg.image for fg in self.foregrounds])

    def masks(self) -> np.ndarray:
        """Stacked layer masks, background first: (layers, H, W)."""
        return np.stack([self.background_mask.grid] + [fg.mask.grid for fg in self.foregrounds])

    def permuted(self, order: Sequence[int]) -> "LayerSet":
        """Reorder the foregrounds; ``order`` indexes into ``self.foregrounds``."""
        if sorted(order) != list(range(len(self.foregrounds))):
            raise ValueError(f"{order} is not a permutation of the foreground indices")
        return LayerSet(
            self.background_image,
            self.background_mask,
            tuple(self.foregrounds[i] for i in order),
            self.global_prompt,
            self.background_prompt,
        )

    @classmethod
    def from_arrays(
        cls,
        images: np.ndarray,
        masks: np.ndarray,
        prompts: Sequence[str],
        global_prompt: str,
    ) -> "LayerSet":
        """Build from stacked arrays with the background at index 0."""
        images = np.asarray(images, dtype=np.float32)
        masks = np.asarray(masks, dtype=np.float32)
        if len(images) != len(masks) or len(images) != len(prompts):
            raise LayerValidationError("images, masks and prompts must have the same layer count")
        fgs = tuple(
            ForegroundLayer(images[i], LayerMask(masks[i]), prompts[i]) for i in range(1, len(images))
        )
        return cls(images[0], LayerMask(masks[0]), fgs, global_prompt, prompts[0])


@dataclass(frozen=True)
class CompositeImage:
    pixels: np.ndarray = field(repr=False)


def background_from_foregrounds(masks: Sequence[LayerMask], shape: tuple[int, int] | None = None) -> LayerMask:
    """Complement of the union of foreground masks, ``1 - sum(m_i)``.

    ``shape`` is only needed when ``masks`` is empty.
    """
    if not masks:
        if shape is None:
            raise ValueError("shape is required when no foreground masks are given")
        return LayerMask(np.ones(shape, dtype=np.float32))
    grids = [m.grid if isinstance(m, LayerMask) else _as_mask(m) for m in masks]
    ref = grids[0].shape
    for g in grids[1:]:
        if g.shape != ref:
            raise LayerValidationError(f"mask shapes differ: {ref} vs {g.shape}")
    total = np.sum(np.stack(grids).astype(np.float64), axis=0)
    if np.any(total > 1 + OVERLAP_TOL):
        bad = np.argwhere(total > 1 + OVERLAP_TOL)[0]
        raise LayerValidationError(
            f"foreground masks overlap (sum {total[tuple(bad)]:.4f} at pixel {tuple(bad)})"
        )
    return LayerMask(np.clip(1.0 - total, 0.0, 1.0).astype(np.float32))


def binarize_masks(soft_masks) -> list[LayerMask]:
    """Per-pixel argmax over layers.

    ``soft_masks`` is (layers, H, W, 3) or (layers, H, W). Channels are averaged,
    then the layer with the largest value takes the pixel. Ties go to the lowest
    layer index, which makes the background the owner of ambiguous pixels.
    """
    stack = np.asarray(soft_masks, dtype=np.float32)
    if stack.ndim == 4:
        stack = stack.mean(axis=-1)
    if stack.ndim != 3 or stack.shape[0] < 1:
        raise LayerValidationError(f"expected (layers, H, W[, 3]) soft masks, got {stack.shape}")
    winner = np.argmax(stack, axis=0)
    return [LayerMask((winner == i).astype(np.float32)) for i in range(stack.shape[0])]


def dilate_mask(mask: LayerMask, kernel: int) -> LayerMask:
    """Square max-filter dilation; pixels beyond the border count as unset."""
    if kernel < 1 or kernel % 2 == 0:
        raise ValueError(f"dilation kernel must be a positive odd integer, got {kernel}")
    grid = mask.grid if isinstance(mask, LayerMask) else _as_mask(mask)
    out = ndimage.maximum_filter(grid, size=kernel, mode="constant", cval=0.0)
    return LayerMask(out.astype(np.float32))


def validate(layer_set: LayerSet, strict: bool = True) -> None:
    """Check every structural invariant of a layer set.

    With ``strict`` the masks must be binary; otherwise soft masks are accepted
    as long as they are in range and still sum to one.
    """
    h, w = layer_set.shape
    if not MIN_LAYERS <= layer_set.num_layers <= MAX_LAYERS:
        raise LayerValidationError(
            f"layer count {layer_set.num_layers} outside [{MIN_LAYERS}, {MAX_LAYERS}]"
        )
    if layer_set.background_image.shape[:2] != (h, w):
        raise LayerValidationError("background image and mask differ in size")
    images = [layer_set.background_image] + [fg.image for fg in layer_set.foregrounds]
    masks = [layer_set.background_mask] + [fg.mask for fg in layer_set.foregrounds]
    for i, (img, m) in enumerate(zip(images, masks)):
        if img.shape != (h, w, 3) or m.grid.shape != (h, w):
            raise LayerValidationError(f"layer {i} has shape {img.shape}/{m.grid.shape}, expected {(h, w)}")
        if not np.all(np.isfinite(img)) or np.abs(img).max() > 1.0:
            raise LayerValidationError(f"layer {i} image values outside [-1, 1]")
        m.check_range()
        if strict and not m.binary:
            raise LayerValidationError(f"layer {i} mask is not binary")
    fg = [m.grid for m in masks[1:]]
    if strict:
        for a in range(len(fg)):
            for b in range(a + 1, len(fg)):
                if np.any(fg[a] * fg[b] != 0):
                    raise LayerValidationError(f"foreground masks {a + 1} and {b + 1} overlap")
    expected = background_from_foregrounds([LayerMask(g) for g in fg])
    if np.abs(expected.grid - layer_set.background_mask.grid).max() > OVERLAP_TOL:
        raise LayerValidationError("background mask is not the complement of the foreground masks")


def composite(layer_set: LayerSet, strict: bool = True) -> CompositeImage:
    """Masked sum ``m_b * B + sum(m_i * F_i)`` over binary masks."""
    h, w = layer_set.shape
    for fg in layer_set.foregrounds:
        if fg.image.shape[:2] != (h, w):
            raise LayerValidationError("foreground and background sizes differ")
    if strict:
        for i, m in enumerate([layer_set.background_mask] + [fg.mask for fg in layer_set.foregrounds]):
            if not m.binary:
                raise LayerValidationError(f"layer {i} mask is not binary")
    out =layer_set.background_mask.grid[..., None] * layer_set.background_image
    for fg in layer_set.foregrounds:
        out = out + fg.mask.grid[..., None] * fg.image
    return CompositeImage(out.astype(np.float32))


def to_signed(mask: np.ndarray) -> np.ndarray:
    """[0, 1] mask to the [-1, 1] range used by the diffusion process."""
    return 2.0 * mask - 1.0


def to_unit(mask: np.ndarray) -> np.ndarray:
    return (mask + 1.0) / 2.0


def exclusivity(soft_masks) -> float:
    """Mean top-1 minus top-2 margin across layers; 1 for one-hot, 0 for uniform."""
    stack = np.asarray(soft_masks, dtype=np.float64)
    if stack.ndim == 4:
        stack = stack.mean(axis=-1)
    stack = np.clip(stack, 0.0, 1.0)
    if stack.shape[0] < 2:
        return 1.0
    top = np.sort(stack, axis=0)
    return float(np.mean(top[-1] - top[-2]))
