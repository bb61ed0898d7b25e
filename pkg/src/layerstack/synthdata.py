"""Procedural multi-layer scenes and the manifest + PNG dataset format.

Layout under a dataset root::

    manifest.jsonl               one DatasetRecord per line
    images/{id}_layer{n}.png     8-bit RGB
    masks/{id}_layer{n}.png      8-bit grayscale, values in {0, 255}

Pixel values map to [-1, 1] through ``(q - 127) / 127``, so 127 is exactly 0
and 254 is exactly 1 (255 clips to 1). Everything the generator produces sits
on that grid, which makes a write/read round trip bit-exact.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
from PIL import Image, ImageDraw

from .layerspace import ForegroundLayer, LayerMask, LayerSet, background_from_foregrounds, dilate_mask, validate
from .textcond import BACKGROUND_COLORS, BACKGROUND_PROMPT, COLORS, SHAPES, TEXTURES

MIN_AREA, MAX_AREA = 0.01, 0.80
CUTOUT_DILATION = 5
FILL_VALUE = 0.0
DEFAULT_LAYER_MIX = (0.85, 0.12, 0.03)

PALETTE = {
    "red": (220, 30, 30),
    "blue": (30, 60, 220),
    "green": (30, 180, 60),
    "yellow": (235, 215, 30),
    "gray": (128, 128, 128),
    "purple": (130, 40, 170),
    "orange": (240, 130, 20),
    "white": (240, 240, 240),
}


class DatasetError(ValueError):
    pass


class PlacementError(RuntimeError):
    pass


def from_uint8(q: np.ndarray) -> np.ndarray:
    return np.clip((q.astype(np.float32) - 127.0) / 127.0, -1.0, 1.0)


def to_uint8(v: np.ndarray) -> np.ndarray:
    return np.clip(np.round(np.asarray(v, dtype=np.float64) * 127.0 + 127.0), 0, 254).astype(np.uint8)


def _rgb(name: str) -> np.ndarray:
    """Palette colour snapped to the 8-bit grid, as a [-1, 1] triple."""
    return from_uint8((np.array(PALETTE[name], dtype=np.int64) * 254 // 255).astype(np.uint8))


@dataclass(frozen=True)
class ForegroundSpec:
    shape: str
    color: str
    size: float  # radius as a fraction of the canvas side
    position: tuple[float, float] | None = None  # centre in [0, 1]^2

    def __post_init__(self):
        if self.shape not in SHAPES:
            raise ValueError(f"unknown shape {self.shape!r}")
        if self.color not in COLORS:
            raise ValueError(f"unknown color {self.color!r}")
        if not 0 < self.size < 1:
            raise ValueError("size must lie in (0, 1)")

    @property
    def phrase(self) -> str:
        return f"a {self.color} {self.shape}"


@dataclass(frozen=True)
class SceneSpec:
    seed: int
    num_layers: int
    foregrounds: tuple[ForegroundSpec, ...]
    texture: str = "plain"
    background_color: str = "gray"

    def __post_init__(self):
        object.__setattr__(self, "foregrounds", tuple(self.foregrounds))
        if self.num_layers not in (2, 3, 4):
            raise ValueError("num_layers must be 2, 3 or 4")
        if len(self.foregrounds) != self.num_layers - 1:
            raise ValueError("need num_layers - 1 foreground specs")
        if self.texture not in TEXTURES:
            raise ValueError(f"unknown texture {self.texture!r}")
        if self.background_color not in BACKGROUND_COLORS:
            raise ValueError(f"unknown background color {self.background_color!r}")


def random_spec(seed: int, num_layers: int) -> SceneSpec:
    rng = np.random.default_rng([seed, 1])
    k = num_layers - 1
    max_size = {1: 0.38, 2: 0.26, 3: 0.2}[k]
    fgs = tuple(
        ForegroundSpec(
            shape=str(rng.choice(SHAPES)),
            color=str(rng.choice(COLORS)),
            size=float(rng.uniform(0.12, max_size)),
        )
        for _ in range(k)
    )
    return SceneSpec(seed, num_layers, fgs, str(rng.choice(TEXTURES)), str(rng.choice(BACKGROUND_COLORS)))


def caption(spec: SceneSpec) -> tuple[str, list[str]]:
    """(global prompt, layer prompts) with the background prompt first."""
    phrases = [fg.phrase for fg in spec.foregrounds]
    glob = f"a {spec.background_color} {spec.texture} background with {' and '.join(phrases)}"
    return glob, [BACKGROUND_PROMPT] + phrases


# --- rendering ---------------------------------------------------------------

def _polygon(shape: str, cx: float, cy: float, r: float) -> list[tuple[float, float]] | None:
    if shape == "triangle":
        return [(cx + r * math.cos(a), cy + r * math.sin(a)) for a in (-math.pi / 2, math.pi / 6, 5 * math.pi / 6)]
    if shape == "star":
        pts = []
        for i in range(10):
            a = -math.pi / 2 + i * math.pi / 5
            rr = r if i % 2 == 0 else r * 0.45
            pts.append((cx + rr * math.cos(a), cy + rr * math.sin(a)))
        return pts
    return None


def render_shape_mask(shape: str, cx: float, cy: float, r: float, res: int) -> np.ndarray:
    """Binary mask of one shape, centre and radius in pixels."""
    if shape == "circle":
        yy, xx = np.mgrid[0:res, 0:res] + 0.5
        return (((xx - cx) ** 2 + (yy - cy) ** 2) <= r * r).astype(np.float32)
    if shape == "square":
        yy, xx = np.mgrid[0:res, 0:res] + 0.5
        s = r * 0.85
        return ((np.abs(xx - cx) <= s) & (np.abs(yy - cy) <= s)).astype(np.float32)
    img = Image.new("L", (res, res), 0)
    ImageDraw.Draw(img).polygon(_polygon(shape, cx, cy, r), fill=255)
    return (np.asarray(img) > 0).astype(np.float32)


def render_background(texture: str, color: str, res: int) -> np.ndarray:
    base = np.array(PALETTE[color], dtype=np.float64)
    yy, xx = np.mgrid[0:res, 0:res]
    if texture == "plain":
        scale = np.ones((res, res))
    elif texture == "gradient":
        scale = 0.45 + 0.55 * xx / max(res - 1, 1)
    elif texture == "stripes":
        scale = np.where((yy // max(res // 8, 1)) % 2 == 0, 1.0, 0.55)
    elif texture == "checker":
        cell = max(res // 4, 1)
        scale = np.where(((yy // cell) + (xx // cell)) % 2 == 0, 1.0, 0.55)
    else:
        raise ValueError(f"unknown texture {texture!r}")
    q = np.clip(np.round(base[None, None] * scale[..., None] * 254 / 255), 0, 254).astype(np.uint8)
    return from_uint8(q)


def _place(spec: SceneSpec, res: int) -> list[np.ndarray]:
    rng = np.random.default_rng([spec.seed, 2])
    sizes = [fg.size for fg in spec.foregrounds]
    for attempt in range(1000):
        if attempt and attempt % 100 == 0:
            sizes = [s * 0.85 for s in sizes]
        masks = []
        for fg, s in zip(spec.foregrounds, sizes):
            r = s * res
            if attempt == 0 and fg.position is not None:
                cx, cy = fg.position[0] * res, fg.position[1] * res
            else:
                cx, cy = rng.uniform(r, res - r, size=2) if r < res / 2 else (res / 2, res / 2)
            masks.append(render_shape_mask(fg.shape, cx, cy, r, res))
        if _acceptable(masks):
            return masks
    raise PlacementError(f"could not place {len(spec.foregrounds)} disjoint shapes for seed {spec.seed}")


def _acceptable(masks: Sequence[np.ndarray]) -> bool:
    for m in masks:
        if not MIN_AREA <= m.mean() <= MAX_AREA:
            return False
    total = np.sum(masks, axis=0)
    return bool(total.max() <= 1)


def generate_scene(spec: SceneSpec, resolution: int = 32) -> tuple[LayerSet, dict]:
    """Render a scene into a validated layer set plus its caption fields.

    Foregrounds are ordered by descending mask area. Each foreground image is
    the full scene cut out with the mask dilated by 5 px; pixels outside the
    dilated region hold ``FILL_VALUE``. Stored masks are not dilated.
    """
    masks = _place(spec, resolution)
    order = sorted(range(len(masks)), key=lambda i: (-masks[i].sum(), i))
    fg_specs = [spec.foregrounds[i] for i in order]
    masks = [masks[i] for i in order]
    ordered = SceneSpec(spec.seed, spec.num_layers, tuple(fg_specs), spec.texture, spec.background_color)

    background = render_background(spec.texture, spec.background_color, resolution)
    scene = background.copy()
    for fg, m in zip(fg_specs, masks):
        scene = np.where(m[..., None] > 0, _rgb(fg.color)[None, None], scene)

    glob, prompts = caption(ordered)
    fgs = []
    for fg, m, prompt in zip(fg_specs, masks, prompts[1:]):
        cut = dilate_mask(LayerMask(m), CUTOUT_DILATION).grid
        image = np.where(cut[..., None] > 0, scene, np.float32(FILL_VALUE)).astype(np.float32)
        fgs.append(ForegroundLayer(image, LayerMask(m), prompt))
    bg_mask = background_from_foregrounds([f.mask for f in fgs])
    ls = LayerSet(background, bg_mask, tuple(fgs), glob, BACKGROUND_PROMPT)
    validate(ls)
    meta = {
        "global_prompt": glob,
        "layer_prompts": prompts,
        "attributes": [{"shape": f.shape, "color": f.color} for f in fg_specs],
    }
    return ls, meta


def sample_layer_counts(n: int, mix: Sequence[float], rng: np.random.Generator) -> np.ndarray:
    mix = np.asarray(mix, dtype=np.float64)
    if mix.shape != (3,) or np.any(mix < 0) or not np.isclose(mix.sum(), 1.0):
        raise ValueError(f"layer mix must be three non-negative weights summing to 1, got {mix.tolist()}")
    return rng.choice([2, 3, 4], size=n, p=mix)


def generate_dataset(
    n: int, seed: int = 0, layer_mix: Sequence[float] = DEFAULT_LAYER_MIX, resolution: int = 32
) -> Iterator[tuple[str, LayerSet, dict]]:
    rng = np.random.default_rng(seed)
    counts = sample_layer_counts(n, layer_mix, rng)
    scene_seeds = rng.integers(0, 2**31 - 1, size=n)
    for i, (k, s) in enumerate(zip(counts, scene_seeds)):
        ls, meta = generate_scene(random_spec(int(s), int(k)), resolution)
        yield f"{i:06d}", ls, meta


# --- dataset store -----------------------------------------------------------

@dataclass
class LayerRecord:
    prompt: str
    image_path: str
    mask_path: str


@dataclass
class DatasetRecord:
    id: str
    num_layers: int
    global_prompt: str
    layers: list[LayerRecord]
    attributes: list[dict] = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps(asdict(self), separators=(",", ":"))

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetRecord":
        rid = d.get("id", "?")
        try:
            layers = [LayerRecord(**layer) for layer in d["layers"]]
            rec = cls(str(d["id"]), int(d["num_layers"]), str(d["global_prompt"]), layers, list(d.get("attributes", [])))
        except (KeyError, TypeError, ValueError) as exc:
            raise DatasetError(f"record {rid}: schema violation ({exc})") from exc
        if rec.num_layers != len(rec.layers):
            raise DatasetError(f"record {rid}: num_layers={rec.num_layers} but {len(rec.layers)} layers listed")
        if rec.layers and rec.layers[0].prompt != BACKGROUND_PROMPT:
            raise DatasetError(f"record {rid}: layer 0 prompt must be {BACKGROUND_PROMPT!r}")
        return rec


def write_dataset(samples, root: str | Path, append: bool = False) -> Path:
    """Write (id, LayerSet, meta) triples; returns the manifest path."""
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    manifest = root / "manifest.jsonl"
    with open(manifest, "a" if append else "w") as fh:
        for rid, ls, meta in samples:
            validate(ls)
            layers = []
            for n, (img, m, prompt) in enumerate(zip(ls.images(), ls.masks(), ls.layer_prompts)):
                ip = f"images/{rid}_layer{n}.png"
                mp = f"masks/{rid}_layer{n}.png"
                Image.fromarray(to_uint8(img), mode="RGB").save(root / ip)
                Image.fromarray((m * 255).astype(np.uint8), mode="L").save(root / mp)
                layers.append(LayerRecord(prompt, ip, mp))
            rec = DatasetRecord(rid, ls.num_layers, ls.global_prompt, layers, list((meta or {}).get("attributes", [])))
            fh.write(rec.to_json() + "\n")
    return manifest


def _load_png(root: Path, rel: str, mode: str, rid: str) -> np.ndarray:
    path = root / rel
    if not path.is_file():
        raise DatasetError(f"record {rid}: missing file {rel}")
    with Image.open(path) as im:
        if im.mode != mode:
            im = im.convert(mode)
        return np.asarray(im)


def read_records(root: str | Path) -> list[DatasetRecord]:
    root = Path(root)
    manifest = root / "manifest.jsonl"
    if not manifest.is_file():
        raise DatasetError(f"no manifest.jsonl under {root}")
    records = []
    for lineno, line in enumerate(manifest.read_text().splitlines(), 1):
        if not line.strip():
            continue
        try:
            d = json.loads(line)
        except json.JSONDecodeError as exc:
            raise DatasetError(f"manifest line {lineno}: invalid JSON ({exc})") from exc
        records.append(DatasetRecord.from_dict(d))
    return records


def load_record(root: str | Path, rec: DatasetRecord) -> LayerSet:
    root = Path(root)
    images, masks = [], []
    for layer in rec.layers:
        images.append(from_uint8(_load_png(root, layer.image_path, "RGB", rec.id)))
        q = _load_png(root, layer.mask_path, "L", rec.id)
        if not np.all((q == 0) | (q == 255)):
            raise DatasetError(f"record {rec.id}: mask {layer.mask_path} is not binary")
        masks.append((q // 255).astype(np.float32))
    ls = LayerSet.from_arrays(np.stack(images), np.stack(masks), [l.prompt for l in rec.layers], rec.global_prompt)
    try:
        validate(ls)
    except ValueError as exc:
        raise DatasetError(f"record {rec.id}: {exc}") from exc
    return ls


def read_dataset(root: str | Path) -> Iterator[tuple[LayerSet, DatasetRecord]]:
    for rec in read_records(root):
        yield load_record(root, rec), rec
