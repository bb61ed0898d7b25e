"""Closed-vocabulary prompts: tokenizer, trainable encoder and condition bundles."""
from __future__ import annotations

import json
import re
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from torch import nn

from .blocks import Attention, FeedForward

PAD, EMPTY, UNK = "<pad>", "<empty>", "<unk>"
BACKGROUND_PROMPT = "the background"
NEG_SEPARATOR = ", "
MAX_TOKENS = 16

COLORS = ("red", "blue", "green", "yellow")
BACKGROUND_COLORS = ("red", "blue", "green", "yellow", "gray", "purple", "orange", "white")
SHAPES = ("circle", "square", "triangle", "star")
TEXTURES = ("plain", "gradient", "stripes", "checker")
STYLE_WORDS = (
    "in", "style", "of", "van", "gogh", "watercolor", "sketch", "pixel", "art",
    "neon", "pastel", "vintage", "oil", "painting", "cartoon", "dark", "bright",
)
_GRAMMAR_WORDS = ("a", "an", "the", "background", "with", "and", ",")

_TOKEN_RE = re.compile(r"[a-z0-9]+|[^\sa-z0-9]")


def tokenize(text: str) -> list[str]:
    return _TOKEN_RE.findall(text.lower())


class Vocabulary:
    def __init__(self, tokens: Sequence[str]):
        tokens = list(tokens)
        if tokens[:3] != [PAD, EMPTY, UNK]:
            raise ValueError("vocabulary must start with the special tokens")
        if len(set(tokens)) != len(tokens):
            raise ValueError("duplicate tokens in vocabulary")
        self.tokens = tokens
        self.ids = {tok: i for i, tok in enumerate(tokens)}

    @classmethod
    def default(cls) -> "Vocabulary":
        words: list[str] = []
        for group in (_GRAMMAR_WORDS, COLORS, BACKGROUND_COLORS, SHAPES, TEXTURES, STYLE_WORDS):
            for w in group:
                if w not in words:
                    words.append(w)
        return cls([PAD, EMPTY, UNK] + words)

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def pad_id(self) -> int:
        return self.ids[PAD]

    @property
    def empty_id(self) -> int:
        return self.ids[EMPTY]

    def encode(self, text: str, length: int = MAX_TOKENS) -> list[int]:
        """Token ids padded or truncated to ``length``; "" encodes as [EMPTY, PAD, ...]."""
        toks = tokenize(text)
        ids = [self.ids.get(t, self.ids[UNK]) for t in toks] or [self.empty_id]
        ids = ids[:length]
        return ids + [self.pad_id] * (length - len(ids))

    def encode_batch(self, texts: Sequence[str], length: int = MAX_TOKENS) -> torch.Tensor:
        return torch.tensor([self.encode(t, length) for t in texts], dtype=torch.long)

    def to_json(self) -> str:
        return json.dumps(self.ids, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "Vocabulary":
        mapping = json.loads(text)
        tokens = [None] * len(mapping)
        for tok, i in mapping.items():
            tokens[i] = tok
        if any(t is None for t in tokens):
            raise ValueError("vocabulary ids are not dense")
        return cls(tokens)

    def save(self, path: str | Path):
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path: str | Path) -> "Vocabulary":
        return cls.from_json(Path(path).read_text())


class PromptEncoder(nn.Module):
    """Token + positional embeddings followed by a small pre-norm transformer."""

    def __init__(self, vocab_size: int, dim: int, max_tokens: int = MAX_TOKENS, depth: int = 2, heads: int = 4):
        super().__init__()
        self.token = nn.Embedding(vocab_size, dim)
        self.position = nn.Parameter(torch.randn(max_tokens, dim) * 0.02)
        self.blocks = nn.ModuleList()
        for _ in range(depth):
            self.blocks.append(
                nn.ModuleDict(
                    {
                        "norm1": nn.LayerNorm(dim),
                        "attn": Attention(dim, dim, heads),
                        "norm2": nn.LayerNorm(dim),
                        "ff": FeedForward(dim),
                    }
                )
            )
        self.norm = nn.LayerNorm(dim)
        nn.init.normal_(self.token.weight, std=0.02)

    def forward(self, ids: torch.Tensor) -> torch.Tensor:
        """(..., L) token ids -> (..., L, D) encodings."""
        lead = ids.shape[:-1]
        x = self.token(ids.reshape(-1, ids.shape[-1])) + self.position[: ids.shape[-1]]
        for blk in self.blocks:
            h = blk["norm1"](x)
            x = x + blk["attn"](h, h)
            x = x + blk["ff"](blk["norm2"](x))
        x = self.norm(x)
        return x.reshape(*lead, *x.shape[-2:])


def encode_prompt(text: str, encoder: PromptEncoder, vocab: Vocabulary) -> torch.Tensor:
    ids = vocab.encode_batch([text], encoder.position.shape[0])
    with torch.no_grad():
        return encoder(ids)[0]


def build_negative_bundle(global_prompt: str, layer_prompts: Sequence[str]) -> tuple[str, list[str]]:
    """Negative prompts for guidance.

    The joined foreground prompts serve as the negative global prompt and the
    negative background prompt; every foreground's negative is "the background".
    ``global_prompt`` is accepted for symmetry and deliberately ignored.
    """
    if len(layer_prompts) < 2:
        raise ValueError("need a background prompt and at least one foreground prompt")
    joined = NEG_SEPARATOR.join(layer_prompts[1:])
    return joined, [joined] + [BACKGROUND_PROMPT] * (len(layer_prompts) - 1)


@dataclass(frozen=True)
class PromptTexts:
    global_prompt: str
    layer_prompts: tuple[str, ...]
    neg_global: str
    neg_layers: tuple[str, ...]

    @classmethod
    def build(cls, global_prompt: str, layer_prompts: Sequence[str]) -> "PromptTexts":
        neg_g, neg_l = build_negative_bundle(global_prompt, layer_prompts)
        return cls(global_prompt, tuple(layer_prompts), neg_g, tuple(neg_l))

    @property
    def num_layers(self) -> int:
        return len(self.layer_prompts)


@dataclass(frozen=True)
class PromptBundle:
    """Positive and negative conditions, background layer first.

    Fields hold token ids ((..., L) for the global prompt and (..., layers, L)
    for the layers) or their encodings with a trailing feature axis. Dropping
    a condition swaps in the EMPTY representation so shapes never change.
    """

    global_: torch.Tensor
    layers: torch.Tensor
    neg_global: torch.Tensor | None = None
    neg_layers: torch.Tensor | None = None

    @classmethod
    def from_texts(cls, texts: PromptTexts, vocab: Vocabulary, length: int = MAX_TOKENS) -> "PromptBundle":
        return cls(
            vocab.encode_batch([texts.global_prompt], length)[0],
            vocab.encode_batch(texts.layer_prompts, length),
            vocab.encode_batch([texts.neg_global], length)[0],
            vocab.encode_batch(texts.neg_layers, length),
        )

    @classmethod
    def stack(cls, bundles: Sequence["PromptBundle"]) -> "PromptBundle":
        return cls(
            torch.stack([b.global_ for b in bundles]),
            torch.stack([b.layers for b in bundles]),
            torch.stack([b.neg_global for b in bundles]),
            torch.stack([b.neg_layers for b in bundles]),
        )

    def map(self, fn) -> "PromptBundle":
        opt = lambda v: None if v is None else fn(v)  # noqa: E731
        return PromptBundle(fn(self.global_), fn(self.layers), opt(self.neg_global), opt(self.neg_layers))


def drop_conditions(
    bundle: PromptBundle, p_drop: float, rng: np.random.Generator, empty: torch.Tensor
) -> tuple[PromptBundle, np.ndarray, np.ndarray]:
    """Classifier-free-guidance condition dropout on a batched bundle.

    Two independent Bernoulli(p_drop) draws per sample: one for the global
    prompt, one for the whole group of layer prompts. ``empty`` is the EMPTY
    representation of a single prompt (ids of shape (L,) or an (L, D)
    encoding). Returns the new bundle and the two boolean drop vectors.
    """
    if not 0.0 <= p_drop <= 1.0:
        raise ValueError(f"p_drop must lie in [0, 1], got {p_drop}")
    batch = bundle.global_.shape[0]
    drop_g = rng.random(batch) < p_drop
    drop_l = rng.random(batch) < p_drop
    g = bundle.global_.clone()
    lay = bundle.layers.clone()
    e = empty.to(g.dtype)
    for i in np.flatnonzero(drop_g):
        g[i] = e
    for i in np.flatnonzero(drop_l):
        lay[i] = e.expand_as(lay[i])
    return replace(bundle, global_=g, layers=lay), drop_g, drop_l
