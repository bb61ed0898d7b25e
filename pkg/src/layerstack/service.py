"""HTTP service around a trained checkpoint.

Layer images and masks travel as base64-encoded 8-bit PNGs using the same
pixel mapping as the on-disk dataset, so a layer set read from a dataset
directory survives the trip bit-exactly.
"""
from __future__ import annotations

import base64
import io
import math
import threading
from pathlib import Path
from typing import Optional

import numpy as np
from fastapi import FastAPI, HTTPException
from PIL import Image
from pydantic import BaseModel, Field, field_validator

from .apps import (
    Addition,
    EditRequest,
    inpaint_layers,
    iterative_generate,
    sample_with_mask_priors,
    style_transfer,
)
from .harness.checkpoint import Checkpoint, load_checkpoint
from .layerspace import LayerMask, LayerSet, LayerValidationError
from .sampler import GuidanceConfig, SamplingError, sample_batch
from .synthdata import from_uint8, to_uint8
from .textcond import BACKGROUND_PROMPT, PromptTexts

# --- wire format ---------------------------------------------------------------


def encode_png(arr: np.ndarray, mode: str) -> str:
    buf = io.BytesIO()
    Image.fromarray(arr, mode=mode).save(buf, format="PNG")
    return base64.b64encode(buf.getvalue()).decode("ascii")


def decode_png(data: str, mode: str) -> np.ndarray:
    try:
        raw = base64.b64decode(data, validate=True)
        with Image.open(io.BytesIO(raw)) as im:
            return np.asarray(im.convert(mode))
    except Exception as exc:  # noqa: BLE001 - any decoding problem is a client error
        raise ValueError(f"could not decode PNG payload: {exc}") from exc


def mask_to_png(mask: LayerMask | np.ndarray) -> str:
    grid = mask.grid if isinstance(mask, LayerMask) else np.asarray(mask)
    return encode_png((grid * 255).astype(np.uint8), "L")


def png_to_mask(data: str) -> LayerMask:
    q = decode_png(data, "L")
    if not np.all((q == 0) | (q == 255)):
        raise ValueError("mask PNG must contain only 0 and 255")
    return LayerMask((q // 255).astype(np.float32))


class LayerPayload(BaseModel):
    prompt: str
    image_png: str
    mask_png: str


class LayerSetPayload(BaseModel):
    global_prompt: str
    layers: list[LayerPayload] = Field(min_length=1)

    @classmethod
    def from_layer_set(cls, ls: LayerSet) -> "LayerSetPayload":
        layers = [
            LayerPayload(prompt=p, image_png=encode_png(to_uint8(img), "RGB"), mask_png=mask_to_png(m))
            for img, m, p in zip(ls.images(), ls.masks(), ls.layer_prompts)
        ]
        return cls(global_prompt=ls.global_prompt, layers=layers)

    def to_layer_set(self) -> LayerSet:
        images = np.stack([from_uint8(decode_png(l.image_png, "RGB")) for l in self.layers])
        masks = np.stack([png_to_mask(l.mask_png).grid for l in self.layers])
        return LayerSet.from_arrays(images, masks, [l.prompt for l in self.layers], self.global_prompt)


class GuidancePayload(BaseModel):
    steps: int = Field(50, ge=1)
    cfg_scale: float = Field(3.0, ge=0)
    smg_scale: float = Field(3.0, ge=0)
    seed: int = 0

    def to_config(self) -> GuidanceConfig:
        return GuidanceConfig(steps=self.steps, cfg_scale=self.cfg_scale, smg_scale=self.smg_scale, seed=self.seed, record_trace=False)


def _background_first(prompts: list[str]) -> list[str]:
    if prompts and prompts[0] != BACKGROUND_PROMPT:
        raise ValueError(f"layer_prompts[0] must be {BACKGROUND_PROMPT!r}")
    return prompts


class SampleRequest(BaseModel):
    global_prompt: str
    layer_prompts: list[str] = Field(min_length=2)
    num_samples: int = Field(1, ge=1, le=64)
    guidance: GuidancePayload = GuidancePayload()

    _check_prompts = field_validator("layer_prompts")(_background_first)


class PriorsRequest(BaseModel):
    global_prompt: str
    layer_prompts: list[str] = Field(min_length=2)
    mask_priors: list[str] = Field(min_length=1, description="foreground masks, or one mask per layer")
    guidance: GuidancePayload = GuidancePayload()

    _check_prompts = field_validator("layer_prompts")(_background_first)


class InpaintRequest(BaseModel):
    source: LayerSetPayload
    targets: list[int] = Field(min_length=1)
    prompts: list[str] = Field(min_length=1)
    mask_priors: Optional[list[Optional[str]]] = None
    k_mask_freeze: int = Field(1, ge=0)
    global_prompt: Optional[str] = None
    guidance: GuidancePayload = GuidancePayload()


class StyleRequest(BaseModel):
    source: LayerSetPayload
    targets: list[int] = Field(min_length=1)
    style: str
    strength: float = Field(0.8, gt=0, le=1)
    global_prompt: Optional[str] = None
    guidance: GuidancePayload = GuidancePayload()


class AdditionPayload(BaseModel):
    prompt: str
    mask_prior: Optional[str] = None
    global_prompt: Optional[str] = None


class IterateRequest(BaseModel):
    base: LayerSetPayload
    additions: list[AdditionPayload] = Field(min_length=1)
    guidance: GuidancePayload = GuidancePayload()


class GenerationResponse(BaseModel):
    layer_sets: list[LayerSetPayload]
    forward_passes: int
    steps_run: int


class HealthResponse(BaseModel):
    status: str
    resolution: int
    max_layers: int
    step: Optional[int] = None


# --- engine ------------------------------------------------------------------------


class Engine:
    """Checkpoint plus one handler per endpoint; handlers raise ValueError on bad input."""

    def __init__(self, ckpt: Checkpoint):
        self.ckpt = ckpt
        self._lock = threading.Lock()

    @classmethod
    def from_path(cls, path) -> "Engine":
        return cls(load_checkpoint(path))

    @property
    def resolution(self) -> int:
        return self.ckpt.model.config.resolution

    def _check_shape(self, ls: LayerSet):
        if ls.shape != (self.resolution, self.resolution):
            raise ValueError(f"layer set is {ls.shape[0]}x{ls.shape[1]}, model expects {self.resolution}x{self.resolution}")

    def health(self) -> HealthResponse:
        cfg = self.ckpt.model.config
        return HealthResponse(status="ok", resolution=cfg.resolution, max_layers=cfg.max_layers, step=self.ckpt.meta.get("step"))

    def sample(self, req: SampleRequest) -> GenerationResponse:
        texts = PromptTexts.build(req.global_prompt, req.layer_prompts)
        g = req.guidance.to_config()
        seeds = [g.seed + i for i in range(req.num_samples)]
        with self._lock:
            out = sample_batch(self.ckpt.model, self.ckpt.schedule, self.ckpt.vocab, [texts] * req.num_samples, g, seeds, self.resolution)
        return GenerationResponse(
            layer_sets=[LayerSetPayload.from_layer_set(ls) for ls in out.layer_sets],
            forward_passes=out.trace.forward_passes,
            steps_run=g.steps,
        )

    def priors(self, req: PriorsRequest) -> GenerationResponse:
        texts = PromptTexts.build(req.global_prompt, req.layer_prompts)
        masks = [png_to_mask(m) for m in req.mask_priors]
        if any(m.grid.shape != (self.resolution, self.resolution) for m in masks):
            raise ValueError(f"mask priors must be {self.resolution}x{self.resolution}")
        g = req.guidance.to_config()
        with self._lock:
            ls, trace = sample_with_mask_priors(self.ckpt.model, self.ckpt.schedule, self.ckpt.vocab, texts, masks, g, self.resolution)
        return GenerationResponse(layer_sets=[LayerSetPayload.from_layer_set(ls)], forward_passes=trace.forward_passes, steps_run=g.steps)

    def inpaint(self, req: InpaintRequest) -> GenerationResponse:
        src = req.source.to_layer_set()
        self._check_shape(src)
        if len(req.prompts) != len(req.targets):
            raise ValueError(f"{len(req.targets)} target layers but {len(req.prompts)} prompts")
        if any(t == 0 and p != BACKGROUND_PROMPT for t, p in zip(req.targets, req.prompts)):
            raise ValueError(f"the background layer keeps the prompt {BACKGROUND_PROMPT!r}")
        priors = {}
        if req.mask_priors is not None:
            if len(req.mask_priors) != len(req.targets):
                raise ValueError("mask_priors must align with targets")
            priors = {t: png_to_mask(m) for t, m in zip(req.targets, req.mask_priors) if m}
        edit = EditRequest(
            src, tuple(req.targets), dict(zip(req.targets, req.prompts)), k_mask_freeze=req.k_mask_freeze,
            global_prompt=req.global_prompt, mask_priors=priors,
        )
        g = req.guidance.to_config()
        with self._lock:
            ls, trace = inpaint_layers(self.ckpt.model, self.ckpt.schedule, self.ckpt.vocab, edit, g)
        return GenerationResponse(layer_sets=[LayerSetPayload.from_layer_set(ls)], forward_passes=trace.forward_passes, steps_run=g.steps)

    def style(self, req: StyleRequest) -> GenerationResponse:
        src = req.source.to_layer_set()
        self._check_shape(src)
        edit = EditRequest(src, tuple(req.targets), style=req.style, strength=req.strength, global_prompt=req.global_prompt)
        g = req.guidance.to_config()
        with self._lock:
            ls, trace = style_transfer(self.ckpt.model, self.ckpt.schedule, self.ckpt.vocab, edit, g)
        return GenerationResponse(
            layer_sets=[LayerSetPayload.from_layer_set(ls)],
            forward_passes=trace.forward_passes,
            steps_run=math.floor(req.strength * g.steps),
        )

    def iterate(self, req: IterateRequest) -> GenerationResponse:
        base = req.base.to_layer_set()
        self._check_shape(base)
        adds = [Addition(a.prompt, png_to_mask(a.mask_prior) if a.mask_prior else None, a.global_prompt) for a in req.additions]
        g = req.guidance.to_config()
        with self._lock:
            ls = iterative_generate(self.ckpt.model, self.ckpt.schedule, self.ckpt.vocab, base, adds, g)
        return GenerationResponse(
            layer_sets=[LayerSetPayload.from_layer_set(ls)],
            forward_passes=len(adds) * g.steps * _passes_per_step(g),
            steps_run=len(adds) * g.steps,
        )


def _passes_per_step(g: GuidanceConfig) -> int:
    return 1 + (g.cfg_scale != 1) + (g.smg_scale > 0)


# --- app -----------------------------------------------------------------------------


def create_app(engine: Engine | str | Path) -> FastAPI:
    if not isinstance(engine, Engine):
        engine = Engine.from_path(engine)
    app = FastAPI(title="layerstack", version="0.1.0")
    app.state.engine = engine

    def run(handler, req):
        try:
            return handler(req)
        except (ValueError, LayerValidationError) as exc:
            raise HTTPException(status_code=422, detail=str(exc)) from exc
        except SamplingError as exc:
            raise HTTPException(status_code=500, detail=str(exc)) from exc

    @app.get("/health", response_model=HealthResponse)
    def health():
        return engine.health()

    @app.post("/sample", response_model=GenerationResponse)
    def sample(req: SampleRequest):
        return run(engine.sample, req)

    @app.post("/priors", response_model=GenerationResponse)
    def priors(req: PriorsRequest):
        return run(engine.priors, req)

    @app.post("/inpaint", response_model=GenerationResponse)
    def inpaint(req: InpaintRequest):
        return run(engine.inpaint, req)

    @app.post("/style", response_model=GenerationResponse)
    def style(req: StyleRequest):
        return run(engine.style, req)

    @app.post("/iterate", response_model=GenerationResponse)
    def iterate(req: IterateRequest):
        return run(engine.iterate, req)

    return app
