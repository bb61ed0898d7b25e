"""Layer-collaborative noise-prediction network.

Input is a stack of layers per sample, each holding 3 image channels and 3
(replicated) mask channels. Layers are folded into the batch axis for every
per-layer operation; only the inter-layer attention and the prompt enhancer
mix information across layers, and neither sees a layer position, so the
network is equivariant to reordering the foreground layers.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import torch
import torch.nn.functional as F
from torch import nn

from .blocks import Attention, FeedForward, group_norm, timestep_embedding, zero_module
from .textcond import PromptEncoder


@dataclass
class DenoiserConfig:
    resolution: int = 32
    base_channels: int = 64
    channel_mults: tuple[int, ...] = (1, 2, 4)
    attention_resolutions: tuple[int, ...] = (16, 8)
    num_res_blocks: int = 1
    heads: int = 4
    cond_dim: int = 128
    max_layers: int = 4
    time_dim: int = 256
    norm_groups: int = 32
    vocab_size: int = 64
    max_tokens: int = 16
    text_depth: int = 2
    text_heads: int = 4

    def __post_init__(self):
        self.channel_mults = tuple(self.channel_mults)
        self.attention_resolutions = tuple(self.attention_resolutions)
        if self.resolution % (2 ** (len(self.channel_mults) - 1)):
            raise ValueError("resolution must be divisible by 2^(levels - 1)")
        if self.max_layers < 2:
            raise ValueError("max_layers must be >= 2")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channel_mults"] = list(self.channel_mults)
        d["attention_resolutions"] = list(self.attention_resolutions)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DenoiserConfig":
        return cls(**d)


class ResBlock(nn.Module):
    def __init__(self, c_in: int, c_out: int, time_dim: int, groups: int):
        super().__init__()
        self.norm1 = group_norm(c_in, groups)
        self.conv1 = nn.Conv2d(c_in, c_out, 3, padding=1)
        self.time = nn.Linear(time_dim, c_out)
        self.norm2 = group_norm(c_out, groups)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, padding=1)
        self.skip = nn.Conv2d(c_in, c_out, 1) if c_in != c_out else nn.Identity()

    def forward(self, x, temb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.time(F.silu(temb))[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return self.skip(x) + h


class GlobalAttentionBlock(nn.Module):
    """Self-attention plus cross-attention to the global prompt, per layer."""

    def __init__(self, channels: int, cond_dim: int, heads: int, groups: int):
        super().__init__()
        self.norm = group_norm(channels, groups)
        self.proj_in = nn.Linear(channels, channels)
        self.norm1 = nn.LayerNorm(channels)
        self.self_attn = Attention(channels, channels, heads)
        self.norm2 = nn.LayerNorm(channels)
        self.cross_attn = Attention(channels, cond_dim, heads)
        self.norm3 = nn.LayerNorm(channels)
        self.ff = FeedForward(channels)
        self.proj_out = nn.Linear(channels, channels)

    def forward(self, x, context):
        # x: (N, C, H, W); context: (N, L, D)
        n, c, h, w = x.shape
        tok = self.norm(x).reshape(n, c, h * w).transpose(1, 2)
        tok = self.proj_in(tok)
        y = self.norm1(tok)
        tok = tok + self.self_attn(y, y)
        tok = tok + self.cross_attn(self.norm2(tok), context)
        tok = tok + self.ff(self.norm3(tok))
        tok = self.proj_out(tok)
        return x + tok.transpose(1, 2).reshape(n, c, h, w)


def inter_layer_attend(hidden: torch.Tensor, attn: Attention, norm: nn.LayerNorm) -> torch.Tensor:
    """Attention across the layer axis, independently at every spatial position.

    ``hidden`` is (B, layers, C, H, W).
    """
    b, n, c, h, w = hidden.shape
    tok = hidden.permute(0, 3, 4, 1, 2).reshape(b * h * w, n, c)
    y = norm(tok)
    tok = tok + attn(y, y)
    return tok.reshape(b, h, w, n, c).permute(0, 3, 4, 1, 2)


def intra_layer_attend(
    hidden: torch.Tensor, conds: torch.Tensor, attn: Attention, norm: nn.LayerNorm
) -> torch.Tensor:
    """Spatial tokens of each layer attend to that layer's prompt encoding.

    ``hidden`` is (B, layers, C, H, W); ``conds`` is (B, layers, L, D).
    """
    b, n, c, h, w = hidden.shape
    if conds.shape[:2] != (b, n):
        raise ValueError(f"{conds.shape[1]} layer conditions for {n} layers")
    tok = hidden.reshape(b * n, c, h * w).transpose(1, 2)
    tok = tok + attn(norm(tok), conds.reshape(b * n, *conds.shape[2:]))
    return tok.transpose(1, 2).reshape(b, n, c, h, w)


class LayerCollaborativeBlock(nn.Module):
    """Inter-layer attention, text-guided intra-layer attention, feed-forward."""

    def __init__(self, channels: int, cond_dim: int, heads: int):
        super().__init__()
        self.inter_norm = nn.LayerNorm(channels)
        self.inter_attn = Attention(channels, channels, heads)
        self.intra_norm = nn.LayerNorm(channels)
        self.intra_attn = Attention(channels, cond_dim, heads)
        self.ff_norm = nn.LayerNorm(channels)
        self.ff = FeedForward(channels)

    def zero_outputs(self) -> list[nn.Linear]:
        return [self.inter_attn.to_out, self.intra_attn.to_out, self.ff.last]

    def forward(self, hidden, layer_conds):
        hidden = inter_layer_attend(hidden, self.inter_attn, self.inter_norm)
        hidden = intra_layer_attend(hidden, layer_conds, self.intra_attn, self.intra_norm)
        b, n, c, h, w = hidden.shape
        tok = hidden.permute(0, 1, 3, 4, 2)
        tok = tok + self.ff(self.ff_norm(tok))
        return tok.permute(0, 1, 4, 2, 3)


class PromptEnhancer(nn.Module):
    """Refines layer prompts: self-attention over all layer tokens, then
    cross-attention from layer tokens into the global prompt."""

    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.self_norm = nn.LayerNorm(dim)
        self.self_attn = Attention(dim, dim, heads)
        self.cross_norm = nn.LayerNorm(dim)
        self.cross_attn = Attention(dim, dim, heads)

    def zero_outputs(self) -> list[nn.Linear]:
        return [self.self_attn.to_out, self.cross_attn.to_out]

    def forward(self, layer_conds: torch.Tensor, global_cond: torch.Tensor) -> torch.Tensor:
        # layer_conds: (B, layers, L, D); global_cond: (B, Lg, D)
        b, n, l, d = layer_conds.shape
        if global_cond.shape[0] != b or global_cond.shape[-1] != d:
            raise ValueError(f"global condition {tuple(global_cond.shape)} does not match layers {tuple(layer_conds.shape)}")
        tok = layer_conds.reshape(b, n * l, d)
        y = self.self_norm(tok)
        tok = tok + self.self_attn(y, y)
        tok = tok + self.cross_attn(self.cross_norm(tok), global_cond)
        return tok.reshape(b, n, l, d)


def enhance_layer_conditions(layer_conds, global_cond, enhancer: PromptEnhancer):
    return enhancer(layer_conds, global_cond)


class _Level(nn.Module):
    def __init__(self):
        super().__init__()
        self.res = nn.ModuleList()
        self.attn = nn.ModuleList()
        self.collab = nn.ModuleList()


class LayerDenoiser(nn.Module):
    def __init__(self, config: DenoiserConfig):
        super().__init__()
        cfg = self.config = config
        ch = cfg.base_channels
        g = cfg.norm_groups
        self.text_encoder = PromptEncoder(cfg.vocab_size, cfg.cond_dim, cfg.max_tokens, cfg.text_depth, cfg.text_heads)
        self.enhancer = PromptEnhancer(cfg.cond_dim, cfg.heads)
        self.time_mlp = nn.Sequential(nn.Linear(ch, cfg.time_dim), nn.SiLU(), nn.Linear(cfg.time_dim, cfg.time_dim))

        self.image_in = nn.Conv2d(3, ch, 3, padding=1)
        self.mask_in = nn.Conv2d(3, ch, 3, padding=1)
        self.mask_gate = nn.Parameter(torch.zeros(()))

        self.down = nn.ModuleList()
        self.downsample = nn.ModuleList()
        skips = [ch]
        res = cfg.resolution
        c_cur = ch
        for li, mult in enumerate(cfg.channel_mults):
            level = _Level()
            for _ in range(cfg.num_res_blocks):
                level.res.append(ResBlock(c_cur, ch * mult, cfg.time_dim, g))
                c_cur = ch * mult
                self._add_attention(level, c_cur, res)
                skips.append(c_cur)
            self.down.append(level)
            if li < len(cfg.channel_mults) - 1:
                self.downsample.append(nn.Conv2d(c_cur, c_cur, 3, stride=2, padding=1))
                skips.append(c_cur)
                res //= 2

        self.mid = _Level()
        self.mid.res.append(ResBlock(c_cur, c_cur, cfg.time_dim, g))
        self._add_attention(self.mid, c_cur, res, force=True)
        self.mid.res.append(ResBlock(c_cur, c_cur, cfg.time_dim, g))

        self.up = nn.ModuleList()
        self.upsample = nn.ModuleList()
        for li, mult in reversed(list(enumerate(cfg.channel_mults))):
            level = _Level()
            for _ in range(cfg.num_res_blocks + 1):
                level.res.append(ResBlock(c_cur + skips.pop(), ch * mult, cfg.time_dim, g))
                c_cur = ch * mult
                self._add_attention(level, c_cur, res)
            self.up.append(level)
            if li > 0:
                self.upsample.append(nn.Conv2d(c_cur, c_cur, 3, padding=1))
                res *= 2

        self.out_norm = group_norm(c_cur, g)
        self.image_out = nn.Conv2d(c_cur, 3, 3, padding=1)
        self.mask_out = nn.Conv2d(c_cur, 3, 3, padding=1)

    def _add_attention(self, level: _Level, channels: int, res: int, force: bool = False):
        if force or res in self.config.attention_resolutions:
            level.attn.append(GlobalAttentionBlock(channels, self.config.cond_dim, self.config.heads, self.config.norm_groups))
            level.collab.append(LayerCollaborativeBlock(channels, self.config.cond_dim, self.config.heads))
        else:
            level.attn.append(None)
            level.collab.append(None)

    def zero_init_targets(self) -> list[nn.Linear]:
        """Output projections that start at zero so new modules are identity residuals."""
        out = list(self.enhancer.zero_outputs())
        for m in self.modules():
            if isinstance(m, LayerCollaborativeBlock):
                out.extend(m.zero_outputs())
        return out

    # --- text ---------------------------------------------------------
    def encode_text(self, global_ids: torch.Tensor, layer_ids: torch.Tensor):
        """Token ids (B, L) and (B, layers, L) -> encodings."""
        return self.text_encoder(global_ids), self.text_encoder(layer_ids)

    # --- noise prediction ---------------------------------------------
    def _block(self, level: _Level, i: int, h, temb, gctx, lctx, b, n):
        h = level.res[i](h, temb)
        if level.attn[i] is not None:
            h = level.attn[i](h, gctx)
            h = level.collab[i](h.reshape(b, n, *h.shape[1:]), lctx)
            h = h.reshape(b * n, *h.shape[2:])
        return h

    def denoise(self, x: torch.Tensor, t: torch.Tensor, global_cond: torch.Tensor, layer_cond: torch.Tensor) -> torch.Tensor:
        """Predict noise for every layer.

        x: (B, layers, 6, H, W) with image channels first, then mask channels.
        t: (B, layers) integer timesteps. global_cond: (B, L, D).
        layer_cond: (B, layers, L, D).
        """
        b, n, c, hgt, wid = x.shape
        if c != 6:
            raise ValueError(f"expected 6 channels per layer, got {c}")
        if n > self.config.max_layers:
            raise ValueError(f"{n} layers exceeds max_layers={self.config.max_layers}")
        if tuple(t.shape) != (b, n):
            raise ValueError(f"timesteps must have shape {(b, n)}, got {tuple(t.shape)}")
        if layer_cond.shape[:2] != (b, n):
            raise ValueError("layer conditions do not match the layer stack")

        lctx = self.enhancer(layer_cond, global_cond)
        gctx = global_cond[:, None].expand(b, n, *global_cond.shape[1:]).reshape(b * n, *global_cond.shape[1:])
        temb = self.time_mlp(timestep_embedding(t.reshape(-1), self.config.base_channels).to(x.dtype))

        flat = x.reshape(b * n, c, hgt, wid)
        h = self.image_in(flat[:, :3]) + self.mask_gate * self.mask_in(flat[:, 3:])
        hs = [h]
        for li, level in enumerate(self.down):
            for i in range(len(level.res)):
                h = self._block(level, i, h, temb, gctx, lctx, b, n)
                hs.append(h)
            if li < len(self.downsample):
                h = self.downsample[li](h)
                hs.append(h)
        for i in range(len(self.mid.res)):
            h = self.mid.res[i](h, temb)
            if i < len(self.mid.attn) and self.mid.attn[i] is not None:
                h = self.mid.attn[i](h, gctx)
                h = self.mid.collab[i](h.reshape(b, n, *h.shape[1:]), lctx).reshape(b * n, *h.shape[1:])
        for li, level in enumerate(self.up):
            for i in range(len(level.res)):
                h = torch.cat([h, hs.pop()], dim=1)
                h = self._block(level, i, h, temb, gctx, lctx, b, n)
            if li < len(self.upsample):
                h = self.upsample[li](F.interpolate(h, scale_factor=2, mode="nearest"))
        h = F.silu(self.out_norm(h))
        out = torch.cat([self.image_out(h), self.mask_out(h)], dim=1)
        return out.reshape(b, n, c, hgt, wid)

    def forward(self, x, t, global_ids, layer_ids):
        g, lay = self.encode_text(global_ids, layer_ids)
        return self.denoise(x, t, g, lay)


def init_parameters(config: DenoiserConfig, seed: int = 0) -> LayerDenoiser:
    """Fresh model with fan-in init plus the zero-init and mask-copy rules."""
    gen_state = torch.random.get_rng_state()
    torch.manual_seed(seed)
    try:
        model = LayerDenoiser(config)
    finally:
        torch.random.set_rng_state(gen_state)
    with torch.no_grad():
        for lin in model.zero_init_targets():
            zero_module(lin)
        model.mask_gate.zero_()
        model.mask_in.weight.copy_(model.image_in.weight)
        model.mask_in.bias.copy_(model.image_in.bias)
        model.mask_out.weight.copy_(model.image_out.weight)
        model.mask_out.bias.copy_(model.image_out.bias)
    return model


def predict_noise(model: LayerDenoiser, x, t, global_cond, layer_cond):
    return model.denoise(x, t, global_cond, layer_cond)
