"""Editing recipes built on the sampler.

All of them pin some layers by substituting their clean estimate inside the
DDIM update, so pinned layers come out exactly equal to their inputs.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
import torch

from .layerspace import (
    MAX_LAYERS,
    ForegroundLayer,
    LayerMask,
    LayerSet,
    LayerValidationError,
    background_from_foregrounds,
    binarize_masks,
    composite,
    validate,
)
from .sampler import (
    Conditions,
    GuidanceConfig,
    Override,
    SampleTrace,
    denoise_loop,
    initial_noise,
    latents_to_layer_sets,
    make_generators,
)
from .schedule import NoiseSchedule, ddim_timesteps, q_sample
from .textcond import NEG_SEPARATOR, PromptBundle, PromptTexts, Vocabulary


@dataclass
class EditRequest:
    source: LayerSet
    targets: tuple[int, ...]
    prompts: dict[int, str] = field(default_factory=dict)
    style: str = ""
    strength: float = 0.8
    k_mask_freeze: int = 1
    global_prompt: str | None = None
    mask_priors: dict[int, LayerMask] = field(default_factory=dict)

    def __post_init__(self):
        self.targets = tuple(sorted(set(int(i) for i in self.targets)))
        n = self.source.num_layers
        if not self.targets:
            raise ValueError("at least one target layer is required")
        if any(not 0 <= i < n for i in self.targets):
            raise ValueError(f"target indices {self.targets} out of range for {n} layers")
        if not 0 < self.strength <= 1:
            raise ValueError(f"strength must lie in (0, 1], got {self.strength}")
        if self.k_mask_freeze < 0:
            raise ValueError("k_mask_freeze must be >= 0")


def layer_set_to_latent(ls: LayerSet) -> torch.Tensor:
    """(layers, 6, H, W): RGB image then the [-1, 1] mask replicated three times."""
    img = torch.from_numpy(ls.images()).permute(0, 3, 1, 2)
    m = torch.from_numpy(2.0 * ls.masks() - 1.0)[:, None].expand(-1, 3, -1, -1)
    return torch.cat([img, m.to(img.dtype)], dim=1).contiguous()


def _mask_latent(mask: LayerMask) -> torch.Tensor:
    return torch.from_numpy(2.0 * mask.grid - 1.0)[None].expand(3, -1, -1)


def _encode(model, vocab: Vocabulary, texts: PromptTexts) -> Conditions:
    length = getattr(getattr(model, "config", None), "max_tokens", 16)
    bundle = PromptBundle.stack([PromptBundle.from_texts(texts, vocab, length)])
    return Conditions.encode(model, bundle)


def _finish(x: torch.Tensor, texts: PromptTexts) -> LayerSet:
    sets, _ = latents_to_layer_sets(x, [texts])
    return sets[0]


def inpaint_layers(
    model, sched: NoiseSchedule, vocab: Vocabulary, req: EditRequest, gcfg: GuidanceConfig
) -> tuple[LayerSet, SampleTrace]:
    """Regenerate the target layers from noise while keeping the others.

    Non-target images are pinned at every step; non-target masks only for the
    first ``k_mask_freeze`` steps, after which they adapt to the new content.
    """
    src = req.source
    n = src.num_layers
    if len(req.targets) == n:
        raise ValueError("every layer is targeted; use plain sampling instead")
    missing = [i for i in req.targets if i not in req.prompts]
    if missing:
        raise ValueError(f"no replacement prompt for target layers {missing}")
    prompts = [req.prompts.get(i, p) for i, p in enumerate(src.layer_prompts)]
    texts = PromptTexts.build(req.global_prompt or src.global_prompt, prompts)

    orig = layer_set_to_latent(src)[None]
    gens = make_generators([gcfg.seed])
    z = initial_noise(orig.shape[1:], gens)
    keep = torch.ones(n, dtype=torch.bool)
    keep[list(req.targets)] = False
    x = torch.where(keep[None, :, None, None, None], q_sample(sched, orig, sched.T, z), z)
    for i, prior in req.mask_priors.items():
        if i not in req.targets:
            raise ValueError(f"mask prior given for non-target layer {i}")
        x[0, i, 3:] = q_sample(sched, _mask_latent(prior).to(x.dtype), sched.T, z[0, i, 3:])

    img_sel = torch.zeros(1, n, 6, dtype=torch.bool)
    img_sel[0, keep, :3] = True
    full_sel = img_sel.clone()
    full_sel[0, keep, 3:] = True

    def select(step: int) -> torch.Tensor:
        return full_sel if step < req.k_mask_freeze else img_sel

    trace = SampleTrace()
    cond = _encode(model, vocab, texts)
    x, _ = denoise_loop(
        model, sched, cond, x, ddim_timesteps(sched.T, gcfg.steps), gcfg, gens, Override(orig, select), trace
    )
    return _finish(x, texts), trace


def style_transfer(
    model, sched: NoiseSchedule, vocab: Vocabulary, req: EditRequest, gcfg: GuidanceConfig
) -> tuple[LayerSet, SampleTrace]:
    """Partial-noise restyling of the target layers.

    Every layer is noised to the level matching ``strength`` and the last
    ``floor(strength * steps)`` DDIM steps are run; non-target images and
    masks are pinned throughout.
    """
    if not req.style.strip():
        raise ValueError("style suffix must be non-empty")
    src = req.source
    n = src.num_layers
    n_run = math.floor(req.strength * gcfg.steps)
    if n_run < 1:
        raise ValueError(f"strength {req.strength} leaves no denoising steps out of {gcfg.steps}")
    ts = ddim_timesteps(sched.T, gcfg.steps)[gcfg.steps - n_run:]

    prompts = [
        f"{p}{NEG_SEPARATOR}{req.style}" if i in req.targets else p for i, p in enumerate(src.layer_prompts)
    ]
    texts = PromptTexts.build(req.global_prompt or src.global_prompt, prompts)
    orig = layer_set_to_latent(src)[None]
    gens = make_generators([gcfg.seed])
    z = initial_noise(orig.shape[1:], gens)
    x = q_sample(sched, orig, ts[0], z)

    keep = torch.ones(n, dtype=torch.bool)
    keep[list(req.targets)] = False
    sel = torch.zeros(1, n, 6, dtype=torch.bool)
    sel[0, keep] = True

    trace = SampleTrace()
    cond = _encode(model, vocab, texts)
    x, _ = denoise_loop(model, sched, cond, x, ts, gcfg, gens, Override(orig, lambda step: sel), trace)
    return _finish(x, texts), trace


def complete_priors(priors: Sequence[LayerMask], num_layers: int) -> list[LayerMask]:
    """Accept foreground-only or full priors; return the full partition."""
    priors = [p if isinstance(p, LayerMask) else LayerMask(p) for p in priors]
    if len(priors) == num_layers - 1:
        priors = [background_from_foregrounds(priors)] + priors
    if len(priors) != num_layers:
        raise ValueError(f"{len(priors)} priors for {num_layers} layers")
    expected = background_from_foregrounds(priors[1:])
    if not np.array_equal(expected.grid, priors[0].grid):
        raise LayerValidationError("background prior must be the complement of the foreground priors")
    parts = binarize_masks(np.stack([p.grid for p in priors]))
    if any(not np.array_equal(a.grid, b.grid) for a, b in zip(parts, priors)):
        raise LayerValidationError("mask priors do not form a partition")
    return priors


def prior_initial_latents(
    sched: NoiseSchedule, priors: Sequence[LayerMask], z: torch.Tensor
) -> torch.Tensor:
    """Image channels stay pure noise; mask channels are the priors noised to step T."""
    x = z.clone()
    for i, p in enumerate(priors):
        noise = z[..., i, 3:, :, :]
        x[..., i, 3:, :, :] = q_sample(sched, _mask_latent(p).to(z.dtype).expand_as(noise), sched.T, noise)
    return x


def sample_with_mask_priors(
    model,
    sched: NoiseSchedule,
    vocab: Vocabulary,
    texts: PromptTexts,
    priors: Sequence[LayerMask],
    gcfg: GuidanceConfig,
    resolution: int | None = None,
) -> tuple[LayerSet, SampleTrace]:
    priors = complete_priors(priors, texts.num_layers)
    res = resolution or priors[0].height
    gens = make_generators([gcfg.seed])
    z = initial_noise((texts.num_layers, 6, res, res), gens)
    x = prior_initial_latents(sched, priors, z)
    trace = SampleTrace()
    cond = _encode(model, vocab, texts)
    x, _ = denoise_loop(model, sched, cond, x, ddim_timesteps(sched.T, gcfg.steps), gcfg, gens, trace=trace)
    return _finish(x, texts), trace


@dataclass(frozen=True)
class Addition:
    prompt: str
    prior: LayerMask | None = None
    global_prompt: str | None = None


def _stack_occluding(background_image, foregrounds: Sequence[ForegroundLayer], global_prompt: str) -> LayerSet:
    """Later foregrounds sit on top; earlier masks lose the pixels they cover."""
    masks = [fg.mask.grid.copy() for fg in foregrounds]
    covered = np.zeros_like(masks[0])
    for i in range(len(masks) - 1, -1, -1):
        masks[i] = masks[i] * (1 - covered)
        covered = np.maximum(covered, masks[i])
    fgs = tuple(ForegroundLayer(fg.image, LayerMask(m), fg.prompt) for fg, m in zip(foregrounds, masks))
    return LayerSet(background_image, background_from_foregrounds([f.mask for f in fgs]), fgs, global_prompt)


def iterative_generate(
    model,
    sched: NoiseSchedule,
    vocab: Vocabulary,
    base: LayerSet,
    additions: Sequence[Addition],
    gcfg: GuidanceConfig,
    strict: bool = True,
) -> LayerSet:
    """Grow a layer set one foreground at a time.

    Each round merges everything generated so far into a new background and
    inpaints a fresh foreground on that two-layer set. The per-round
    foregrounds are kept so the final result is a full layer set.
    """
    if base.num_layers != 2:
        raise ValueError("iterative generation starts from a two-layer set")
    validate(base)
    if not additions:
        return base
    if strict and base.num_layers + len(additions) > MAX_LAYERS:
        raise ValueError(f"{base.num_layers + len(additions)} layers exceeds the maximum of {MAX_LAYERS}")

    h, w = base.shape
    history = [base.foregrounds[0]]
    current = base
    global_prompt = base.global_prompt
    for j, add in enumerate(additions):
        merged = composite(current).pixels
        placeholder = ForegroundLayer(np.zeros((h, w, 3), np.float32), LayerMask(np.zeros((h, w))), add.prompt)
        two = LayerSet(merged, LayerMask(np.ones((h, w))), (placeholder,), global_prompt)
        global_prompt = add.global_prompt or global_prompt
        req = EditRequest(
            two,
            targets=(1,),
            prompts={1: add.prompt},
            global_prompt=global_prompt,
            mask_priors={1: add.prior} if add.prior is not None else {},
        )
        current, _ = inpaint_layers(model, sched, vocab, req, replace(gcfg, seed=gcfg.seed + j))
        history.append(current.foregrounds[0])
    return _stack_occluding(base.background_image, history, global_prompt)
