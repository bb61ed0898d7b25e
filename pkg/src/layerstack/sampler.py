"""Guided reverse process: DDIM with classifier-free and self-mask guidance."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Protocol, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .layerspace import LayerSet
from .schedule import NoiseSchedule, ddim_step, ddim_timesteps, predict_x0, q_sample
from .textcond import PromptBundle, PromptTexts, Vocabulary


class SamplingError(RuntimeError):
    pass


class Denoiser(Protocol):
    def encode_text(self, global_ids: torch.Tensor, layer_ids: torch.Tensor): ...

    def denoise(self, x, t, global_cond, layer_cond) -> torch.Tensor: ...


@dataclass
class GuidanceConfig:
    steps: int = 50
    cfg_scale: float = 3.0
    smg_scale: float = 3.0
    blur_kernel: int = 31
    blur_sigma: float = 3.0
    seed: int = 0
    invert_smg_mask: bool = False
    # Clamp each step's x0 estimate to the data range before the DDIM update.
    # At large t the estimate divides by sqrt(alpha_bar) ~ 6e-3, so small noise
    # errors otherwise push pixel values far outside [-1, 1] and saturate samples.
    clip_x0: bool = True
    record_trace: bool = True

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.blur_kernel < 1 or self.blur_kernel % 2 == 0:
            raise ValueError("blur kernel must be odd")
        if self.cfg_scale < 0 or self.smg_scale < 0:
            raise ValueError("guidance scales must be non-negative")

    def blur_for(self, resolution: int, reference: int = 256) -> tuple[int, float]:
        """Scale the blur, set for ``reference`` pixels, to ``resolution``."""
        k = 2 * int(math.floor((self.blur_kernel * resolution / reference - 1) / 2 + 0.5)) + 1
        return max(3, k), self.blur_sigma * resolution / reference


@dataclass
class TraceStep:
    t: int
    x0: torch.Tensor
    masks: torch.Tensor
    cfg_norm: float
    smg_norm: float


@dataclass
class SampleTrace:
    steps: list[TraceStep] = field(default_factory=list)
    forward_passes: int = 0

    @property
    def timesteps(self) -> list[int]:
        return [s.t for s in self.steps]


# --- guidance arithmetic ---------------------------------------------------

def _same_shape(a, b):
    a, b = torch.as_tensor(a), torch.as_tensor(b)
    if a.shape != b.shape and a.dim() and b.dim():
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    return a, b


def cfg_combine(eps_cond, eps_uncond, w: float):
    eps_cond, eps_uncond = _same_shape(eps_cond, eps_uncond)
    if w == 1:
        return eps_cond
    if w == 0:
        return eps_uncond
    return eps_uncond + w * (eps_cond - eps_uncond)


def smg_combine(eps_hat, eps, s: float):
    eps_hat, eps = _same_shape(eps_hat, eps)
    if s == 0:
        return eps
    return eps_hat + (1 + s) * (eps - eps_hat)


# --- self-mask guidance ------------------------------------------------------

def gaussian_blur(x: torch.Tensor, kernel: int, sigma: float) -> torch.Tensor:
    """Separable Gaussian blur over the last two axes with reflect padding."""
    if kernel % 2 == 0:
        raise ValueError("blur kernel must be odd")
    if kernel == 1 or sigma <= 0:
        return x
    r = kernel // 2
    coords = torch.arange(kernel, dtype=torch.float64) - r
    k1 = torch.exp(-0.5 * (coords / sigma) ** 2)
    k1 = (k1 / k1.sum()).to(x.dtype)
    lead = x.shape[:-2]
    h, w = x.shape[-2:]
    y = x.reshape(-1, 1, h, w)
    pad_mode = "reflect" if r < min(h, w) else "replicate"
    y = F.pad(y, (r, r, 0, 0), mode=pad_mode)
    y = F.conv2d(y, k1.view(1, 1, 1, kernel))
    y = F.pad(y, (0, 0, r, r), mode=pad_mode)
    y = F.conv2d(y, k1.view(1, 1, kernel, 1))
    return y.reshape(*lead, h, w)


def smg_degrade(
    sched: NoiseSchedule,
    z_t: torch.Tensor,
    eps_pred: torch.Tensor,
    t,
    mask: torch.Tensor,
    blur: tuple[int, float],
    generator: torch.Generator | None = None,
    noise: torch.Tensor | None = None,
) -> torch.Tensor:
    """Blur-and-renoise degradation merged back by the layer mask.

    The clean estimate is blurred, renoised to level ``t`` with fresh noise,
    then ``mask * z_t + (1 - mask) * degraded``: pixels inside the mask keep
    ``z_t``. ``mask`` broadcasts over the channel axis of ``z_t``.
    """
    m = torch.as_tensor(mask, dtype=z_t.dtype)
    if not torch.all((m == 0) | (m == 1)):
        raise ValueError("self-mask guidance needs a binary mask")
    x0 = predict_x0(sched, z_t, t, eps_pred)
    x0 = gaussian_blur(x0, *blur)
    if noise is None:
        noise = torch.randn(z_t.shape, generator=generator, dtype=z_t.dtype)
    renoised = q_sample(sched, x0, t, noise)
    return m * z_t + (1 - m) * renoised


def extract_predicted_masks(sched: NoiseSchedule, mask_latents: torch.Tensor, eps_pred: torch.Tensor, t):
    """Binary per-layer masks from the current mask latents.

    ``mask_latents`` and ``eps_pred`` are (..., layers, 3, H, W). Returns
    (binary, soft) with shape (..., layers, H, W); soft values are in [0, 1].
    """
    x0 = predict_x0(sched, mask_latents, t, eps_pred)
    soft = ((x0 + 1) / 2).mean(dim=-3)
    return binarize(soft), soft.clamp(0, 1)


def binarize(soft: torch.Tensor) -> torch.Tensor:
    """Per-pixel argmax across the layer axis (-3); ties go to the lowest index."""
    winner = soft.argmax(dim=-3, keepdim=True)
    idx = torch.arange(soft.shape[-3]).view(-1, 1, 1)
    return (winner == idx).to(soft.dtype)


# --- the sampling loop -------------------------------------------------------

@dataclass
class Conditions:
    pos_global: torch.Tensor
    pos_layers: torch.Tensor
    neg_global: torch.Tensor
    neg_layers: torch.Tensor

    @classmethod
    def encode(cls, model: Denoiser, bundle: PromptBundle) -> "Conditions":
        with torch.no_grad():
            pg, pl = model.encode_text(bundle.global_, bundle.layers)
            ng, nl = model.encode_text(bundle.neg_global, bundle.neg_layers)
        return cls(pg, pl, ng, nl)


@dataclass
class Override:
    """Pin part of the clean estimate to known values while sampling.

    ``x0`` has the full latent shape; ``select(step_index)`` returns a boolean
    (B, layers, 6) channel mask of where ``x0`` replaces the prediction.
    """

    x0: torch.Tensor
    select: Callable[[int], torch.Tensor]


def make_generators(seeds: Sequence[int]) -> list[torch.Generator]:
    return [torch.Generator().manual_seed(int(s)) for s in seeds]


def initial_noise(shape: tuple[int, ...], generators: Sequence[torch.Generator], dtype=torch.float32):
    """Per-sample Gaussian noise; sample ``i`` is a function of seed ``i`` only."""
    return torch.stack([torch.randn(shape, generator=g, dtype=dtype) for g in generators])


def _fresh_noise(like: torch.Tensor, generators):
    return torch.stack([torch.randn(like.shape[1:], generator=g, dtype=like.dtype) for g in generators])


def denoise_loop(
    model: Denoiser,
    sched: NoiseSchedule,
    cond: Conditions,
    x: torch.Tensor,
    timesteps: Sequence[int],
    gcfg: GuidanceConfig,
    generators: Sequence[torch.Generator],
    override: Override | None = None,
    trace: SampleTrace | None = None,
):
    """Run DDIM along ``timesteps`` (strictly decreasing, ending at 0).

    ``x`` is (B, layers, 6, H, W). Returns (final latents, final soft masks).
    """
    b, n = x.shape[:2]
    res = x.shape[-1]
    blur = gcfg.blur_for(res)
    w, s = gcfg.cfg_scale, gcfg.smg_scale
    soft = None
    with torch.no_grad():
        for k, (t, t_prev) in enumerate(zip(timesteps[:-1], timesteps[1:])):
            tt = torch.full((b, n), t, dtype=torch.long)
            eps_c = model.denoise(x, tt, cond.pos_global, cond.pos_layers)
            nfe = 1
            if w != 1:
                eps_n = model.denoise(x, tt, cond.neg_global, cond.neg_layers)
                nfe += 1
                eps = cfg_combine(eps_c, eps_n, w)
            else:
                eps = eps_c
            masks, soft = extract_predicted_masks(sched, x[:, :, 3:], eps_c[:, :, 3:], t)
            smg_norm = 0.0
            if s > 0:
                m = 1 - masks if gcfg.invert_smg_mask else masks
                degraded_img = smg_degrade(
                    sched, x[:, :, :3], eps_c[:, :, :3], t, m[:, :, None], blur,
                    noise=_fresh_noise(x[:, :, :3], generators),
                )
                x_hat = torch.cat([degraded_img, x[:, :, 3:]], dim=2)
                eps_hat = model.denoise(x_hat, tt, cond.pos_global, cond.pos_layers)
                nfe += 1
                guide = s * (eps_c - eps_hat)
                eps = eps + guide
                smg_norm = float(guide.norm())
            if not torch.all(torch.isfinite(eps)):
                raise SamplingError(f"non-finite noise prediction at t={t}")
            x0 = predict_x0(sched, x, t, eps)
            if gcfg.clip_x0:
                x0 = x0.clamp(-1.0, 1.0)
            if override is not None:
                sel = override.select(k)[..., None, None]
                x0 = torch.where(sel, override.x0, x0)
            if not torch.all(torch.isfinite(x0)):
                raise SamplingError(f"non-finite x0 estimate at t={t}")
            x = ddim_step(sched, x, eps, t, t_prev, x0_pred=x0)
            if trace is not None:
                trace.forward_passes += nfe
                if gcfg.record_trace:
                    cfg_norm = float((eps_c - eps_n).norm() * w) if w != 1 else 0.0
                    trace.steps.append(TraceStep(t, x0.clone(), masks.clone(), cfg_norm, smg_norm))
    final_soft = ((x[:, :, 3:].clamp(-1, 1) + 1) / 2).mean(dim=2)
    return x, final_soft


@dataclass
class SampleResult:
    layer_sets: list[LayerSet]
    soft_masks: torch.Tensor
    latents: torch.Tensor
    trace: SampleTrace


def latents_to_layer_sets(x: torch.Tensor, texts: Sequence[PromptTexts]) -> tuple[list[LayerSet], torch.Tensor]:
    images = x[:, :, :3].clamp(-1, 1)
    soft = ((x[:, :, 3:].clamp(-1, 1) + 1) / 2).mean(dim=2)
    masks = binarize(soft)
    out = []
    for i, tx in enumerate(texts):
        out.append(
            LayerSet.from_arrays(
                images[i].permute(0, 2, 3, 1).numpy(),
                masks[i].numpy(),
                list(tx.layer_prompts),
                tx.global_prompt,
            )
        )
    return out, soft


def sample_batch(
    model: Denoiser,
    sched: NoiseSchedule,
    vocab: Vocabulary,
    texts: Sequence[PromptTexts],
    gcfg: GuidanceConfig,
    seeds: Sequence[int] | None = None,
    resolution: int = 32,
    x_init: torch.Tensor | None = None,
) -> SampleResult:
    """Sample one layer set per prompt set; all must share a layer count."""
    n = texts[0].num_layers
    if any(tx.num_layers != n for tx in texts):
        raise ValueError("all prompt sets in a batch must have the same layer count")
    max_layers = getattr(getattr(model, "config", None), "max_layers", 4)
    if not 2 <= n <= max_layers:
        raise ValueError(f"layer count {n} outside [2, {max_layers}]")
    seeds = list(seeds) if seeds is not None else [gcfg.seed + i for i in range(len(texts))]
    gens = make_generators(seeds)
    length = getattr(getattr(model, "config", None), "max_tokens", 16)
    bundle = PromptBundle.stack([PromptBundle.from_texts(tx, vocab, length) for tx in texts])
    cond = Conditions.encode(model, bundle)
    x = initial_noise((n, 6, resolution, resolution), gens) if x_init is None else x_init
    trace = SampleTrace()
    x, _ = denoise_loop(model, sched, cond, x, ddim_timesteps(sched.T, gcfg.steps), gcfg, gens, trace=trace)
    sets, soft = latents_to_layer_sets(x, texts)
    return SampleResult(sets, soft, x, trace)


def sample(model, sched, vocab, texts: PromptTexts, gcfg: GuidanceConfig, resolution: int = 32):
    res = sample_batch(model, sched, vocab, [texts], gcfg, [gcfg.seed], resolution)
    return res.layer_sets[0], res.trace
