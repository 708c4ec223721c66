"""
Resolution-scalable diffusion transformer (RS-DiT).

A DiT-style noise predictor that carries no absolute positional embedding.
Position information enters only through zero-padded convolutions (the
depthwise convolution inside every FFN and the dense condition embedding),
so one parameter set runs at any input size meeting the divisibility rules.

Most blocks attend inside non-overlapping windows; every g-th block
(1-indexed) attends globally.
"""

import logging
import math
from dataclasses import asdict, dataclass
from typing import Any, Dict, Optional, Tuple, Union

import torch
import torch.nn as nn
import torch.nn.functional as F
from einops import rearrange

from ..constants import (
    DEFAULT_DEPTH,
    DEFAULT_GLOBAL_ATTENTION_PERIOD,
    DEFAULT_HIDDEN_DIM,
    DEFAULT_IMAGE_CHANNELS,
    DEFAULT_MLP_RATIO,
    DEFAULT_NUM_HEADS,
    DEFAULT_PATCH_SIZE,
    DEFAULT_WINDOW_SIZE,
    DENSE_EMBED_BLOCKS,
    DENSE_EMBED_STRIDE,
    TIMESTEP_FREQUENCY_DIM,
)
from ..errors import ConfigurationError, DimensionError

logger = logging.getLogger("ChangenRSDiT")


@dataclass(frozen=True)
class DenoiserConfig:
    """
    Architecture of one RS-DiT.

    The parameter count depends on these fields only, never on input size.
    """
    patch_size: int = DEFAULT_PATCH_SIZE
    hidden_dim: int = DEFAULT_HIDDEN_DIM
    depth: int = DEFAULT_DEPTH
    num_heads: int = DEFAULT_NUM_HEADS
    window_size: int = DEFAULT_WINDOW_SIZE
    global_attention_period: int = DEFAULT_GLOBAL_ATTENTION_PERIOD
    condition_channels: int = 1
    in_channels: int = DEFAULT_IMAGE_CHANNELS
    learn_covariance: bool = True
    mlp_ratio: float = DEFAULT_MLP_RATIO
    # Ablation only: fixed sin-cos position table tied to one input size
    absolute_pos_embed: bool = False
    input_size: Optional[int] = None

    def __post_init__(self):
        for name in ("patch_size", "hidden_dim", "depth", "num_heads", "window_size",
                     "global_attention_period", "condition_channels", "in_channels"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be >= 1, got {getattr(self, name)}", "rsdit")
        if self.hidden_dim % self.num_heads:
            raise ConfigurationError(
                f"hidden_dim {self.hidden_dim} not divisible by num_heads {self.num_heads}", "rsdit"
            )
        if self.hidden_dim % 4:
            raise ConfigurationError("hidden_dim must be divisible by 4", "rsdit")
        if DENSE_EMBED_STRIDE % self.patch_size:
            raise ConfigurationError(
                f"patch_size must divide {DENSE_EMBED_STRIDE} so the condition grid "
                f"can be aligned with the token grid", "rsdit"
            )
        if self.absolute_pos_embed and not self.input_size:
            raise ConfigurationError("absolute_pos_embed requires input_size", "rsdit")

    @property
    def out_channels(self) -> int:
        return 2 * self.in_channels if self.learn_covariance else self.in_channels

    def uses_global_attention(self, block_index: int) -> bool:
        """True for blocks g, 2g, ... (1-indexed)."""
        return block_index % self.global_attention_period == 0

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "DenoiserConfig":
        known = {k: v for k, v in data.items() if k in cls.__dataclass_fields__}
        return cls(**known)


# ========================================================================
# TOKEN PLUMBING
# ========================================================================

def patchify(x: torch.Tensor, patch_size: int) -> Tuple[torch.Tensor, Tuple[int, int]]:
    """
    Cut an image into non-overlapping p x p patches.

    Args:
        x: (C, H, W) or (B, C, H, W) tensor
        patch_size: p

    Returns:
        Tokens of shape (..., H/p * W/p, C * p * p) and the grid (H/p, W/p)
    """
    h, w = x.shape[-2:]
    if h % patch_size or w % patch_size:
        raise DimensionError(f"{h}x{w} is not divisible by patch size {patch_size}", "rsdit")
    tokens = rearrange(x, "... c (h p) (w q) -> ... (h w) (p q c)", p=patch_size, q=patch_size)
    return tokens, (h // patch_size, w // patch_size)


def unpatchify(tokens: torch.Tensor, grid: Tuple[int, int], patch_size: int) -> torch.Tensor:
    """Inverse of `patchify`."""
    gh, gw = grid
    if tokens.shape[-2] != gh * gw:
        raise DimensionError(f"{tokens.shape[-2]} tokens do not fill a {gh}x{gw} grid", "rsdit")
    return rearrange(tokens, "... (h w) (p q c) -> ... c (h p) (w q)",
                     h=gh, w=gw, p=patch_size, q=patch_size)


def pad_to_window(x: torch.Tensor, window_size: int) -> Tuple[torch.Tensor, torch.Tensor]:
    """
    Zero-pad a (B, h, w, d) grid at the bottom/right to window multiples.

    Returns:
        The padded grid and a (B, h', w') boolean mask of real tokens
    """
    b, h, w, _ = x.shape
    pad_h = (-h) % window_size
    pad_w = (-w) % window_size
    valid = torch.ones(b, h, w, dtype=torch.bool, device=x.device)
    if pad_h or pad_w:
        x = F.pad(x, (0, 0, 0, pad_w, 0, pad_h))
        valid = F.pad(valid, (0, pad_w, 0, pad_h), value=False)
    return x, valid


def window_partition(x: torch.Tensor, window_size: int) -> torch.Tensor:
    """
    Split a (B, h, w, ...) grid into windows.

    Returns:
        (B * num_windows, window_size * window_size, ...) tensor
    """
    h, w = x.shape[1:3]
    if h % window_size or w % window_size:
        raise DimensionError(
            f"grid {h}x{w} not divisible by window {window_size}; pad it first", "rsdit"
        )
    return rearrange(x, "b (nh s) (nw t) ... -> (b nh nw) (s t) ...", s=window_size, t=window_size)


def window_reverse(windows: torch.Tensor, window_size: int, h: int, w: int) -> torch.Tensor:
    """Inverse of `window_partition` for a (padded) grid of size h x w."""
    return rearrange(windows, "(b nh nw) (s t) ... -> b (nh s) (nw t) ...",
                     nh=h // window_size, nw=w // window_size, s=window_size, t=window_size)


def attention_pair_count(config: DenoiserConfig, height: int, width: int) -> Dict[str, int]:
    """
    Query-key pairs scored by one forward pass at the given image size.

    Window blocks score (w_s^2)^2 pairs per (padded) window; global blocks
    score n^2 pairs for n tokens.
    """
    gh, gw = height // config.patch_size, width // config.patch_size
    tokens = gh * gw
    ws = config.window_size
    windows = math.ceil(gh / ws) * math.ceil(gw / ws)
    counts = {"window": 0, "global": 0}
    for b in range(1, config.depth + 1):
        if config.uses_global_attention(b):
            counts["global"] += tokens * tokens
        else:
            counts["window"] += windows * (ws * ws) ** 2
    counts["total"] = counts["window"] + counts["global"]
    return counts


def modulate(x: torch.Tensor, shift: torch.Tensor, scale: torch.Tensor) -> torch.Tensor:
    """adaLN modulation of a (B, ..., d) tensor by (B, d) shift/scale."""
    view = (x.shape[0],) + (1,) * (x.ndim - 2) + (x.shape[-1],)
    return x * (1 + scale.view(view)) + shift.view(view)


def sincos_pos_embed_2d(dim: int, gh: int, gw: int) -> torch.Tensor:
    """Fixed 2-D sin-cos position table of shape (gh, gw, dim)."""
    quarter = dim // 4
    omega = 1.0 / 10000 ** (torch.arange(quarter, dtype=torch.float64) / quarter)
    ys = torch.arange(gh, dtype=torch.float64)[:, None] * omega[None]
    xs = torch.arange(gw, dtype=torch.float64)[:, None] * omega[None]
    emb_y = torch.cat([ys.sin(), ys.cos()], dim=1)[:, None, :].expand(gh, gw, 2 * quarter)
    emb_x = torch.cat([xs.sin(), xs.cos()], dim=1)[None, :, :].expand(gh, gw, 2 * quarter)
    return torch.cat([emb_y, emb_x], dim=-1).float()


# ========================================================================
# LAYERS
# ========================================================================

class TimestepEmbedder(nn.Module):
    """Sinusoidal step features followed by a two-layer MLP."""

    def __init__(self, hidden_dim: int, frequency_dim: int = TIMESTEP_FREQUENCY_DIM):
        super().__init__()
        self.frequency_dim = frequency_dim
        self.mlp = nn.Sequential(
            nn.Linear(frequency_dim, hidden_dim),
            nn.SiLU(),
            nn.Linear(hidden_dim, hidden_dim),
        )

    @staticmethod
    def timestep_embedding(t: torch.Tensor, dim: int, max_period: int = 10000) -> torch.Tensor:
        half = dim // 2
        freqs = torch.exp(
            -math.log(max_period) * torch.arange(half, dtype=torch.float32, device=t.device) / half
        )
        args = t[:, None].float() * freqs[None]
        embedding = torch.cat([torch.cos(args), torch.sin(args)], dim=-1)
        if dim % 2:
            embedding = torch.cat([embedding, torch.zeros_like(embedding[:, :1])], dim=-1)
        return embedding

    def forward(self, t: torch.Tensor) -> torch.Tensor:
        freq = self.timestep_embedding(t, self.frequency_dim)
        return self.mlp(freq.to(self.mlp[0].weight.dtype))


class ChannelLayerNorm(nn.Module):
    """LayerNorm over the channel axis of a (B, C, H, W) map."""

    def __init__(self, channels: int, eps: float = 1e-6):
        super().__init__()
        self.norm = nn.LayerNorm(channels, eps=eps)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.norm(x.permute(0, 2, 3, 1)).permute(0, 3, 1, 2)


class DenseEmbedding(nn.Module):
    """
    Condition raster encoder: 8 conv3x3-LN-SiLU blocks, 8x total reduction.

    The first conv of blocks 3, 5 and 7 has stride 2, so the reduction
    happens between every two blocks.
    """

    def __init__(self, in_channels: int, hidden_dim: int):
        super().__init__()
        widths = [hidden_dim // 4] * 2 + [hidden_dim // 2] * 2 + [hidden_dim] * 4
        layers = []
        prev = in_channels
        for b, width in enumerate(widths[:DENSE_EMBED_BLOCKS], start=1):
            stride = 2 if b in (3, 5, 7) else 1
            layers += [
                nn.Conv2d(prev, width, 3, stride=stride, padding=1),
                ChannelLayerNorm(width),
                nn.SiLU(),
            ]
            prev = width
        self.blocks = nn.Sequential(*layers)

    def forward(self, cond: torch.Tensor) -> torch.Tensor:
        h, w = cond.shape[-2:]
        if h % DENSE_EMBED_STRIDE or w % DENSE_EMBED_STRIDE:
            raise DimensionError(
                f"condition {h}x{w} not divisible by {DENSE_EMBED_STRIDE}", "rsdit"
            )
        return self.blocks(cond)


def merge_condition(tokens: torch.Tensor, cond_embedding: torch.Tensor) -> torch.Tensor:
    """
    Add the condition embedding to the (B, h, w, d) token grid.

    A coarser embedding grid is nearest-upsampled by an integer factor first.
    """
    gh, gw = tokens.shape[1:3]
    ch, cw = cond_embedding.shape[-2:]
    if gh % ch or gw % cw or gh // ch != gw // cw:
        raise DimensionError(
            f"condition grid {ch}x{cw} cannot be aligned with token grid {gh}x{gw}", "rsdit"
        )
    factor = gh // ch
    if factor > 1:
        cond_embedding = cond_embedding.repeat_interleave(factor, dim=-2)
        cond_embedding = cond_embedding.repeat_interleave(factor, dim=-1)
    return tokens + cond_embedding.permute(0, 2, 3, 1)


class Attention(nn.Module):
    """Multi-head self-attention over a token sequence with an optional key mask."""

    def __init__(self, dim: int, num_heads: int):
        super().__init__()
        self.num_heads = num_heads
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x: torch.Tensor, key_mask: Optional[torch.Tensor] = None) -> torch.Tensor:
        q, k, v = rearrange(self.qkv(x), "b n (three h e) -> three b h n e",
                            three=3, h=self.num_heads)
        attn_mask = None if key_mask is None else key_mask[:, None, None, :]
        out = F.scaled_dot_product_attention(q, k, v, attn_mask=attn_mask)
        return self.proj(rearrange(out, "b h n e -> b n (h e)"))


class WindowAttention(nn.Module):
    """Attention inside non-overlapping windows of a (B, h, w, d) grid."""

    def __init__(self, dim: int, num_heads: int, window_size: int, use_global: bool):
        super().__init__()
        self.attn = Attention(dim, num_heads)
        self.window_size = window_size
        self.use_global = use_global

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, h, w, d = x.shape
        if self.use_global:
            return self.attn(x.reshape(b, h * w, d)).reshape(b, h, w, d)
        padded, valid = pad_to_window(x, self.window_size)
        hp, wp = padded.shape[1:3]
        windows = window_partition(padded, self.window_size)
        key_mask = None if bool(valid.all()) else window_partition(valid, self.window_size)
        out = self.attn(windows, key_mask)
        return window_reverse(out, self.window_size, hp, wp)[:, :h, :w]


class ConvFFN(nn.Module):
    """fc1 -> 3x3 depthwise conv (zero padding) -> GELU -> fc2."""

    def __init__(self, dim: int, hidden: int):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.dwconv = nn.Conv2d(hidden, hidden, 3, padding=1, groups=hidden)
        self.act = nn.GELU(approximate="tanh")
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        y = self.fc1(x).permute(0, 3, 1, 2)
        y = self.act(self.dwconv(y)).permute(0, 2, 3, 1)
        return self.fc2(y)


class RSDiTBlock(nn.Module):
    """Transformer block with adaLN-Zero timestep conditioning."""

    def __init__(self, dim: int, num_heads: int, mlp_ratio: float, window_size: int,
                 use_global: bool):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim, elementwise_affine=False, eps=1e-6)
        self.attn = WindowAttention(dim, num_heads, window_size, use_global)
        self.norm2 = nn.LayerNorm(dim, elementwise_affine=False, eps=1e-6)
        self.ffn = ConvFFN(dim, int(dim * mlp_ratio))
        self.adaLN_modulation = nn.Sequential(nn.SiLU(), nn.Linear(dim, 6 * dim))

    def forward(self, x: torch.Tensor, c: torch.Tensor) -> torch.Tensor:
        shift_a, scale_a, gate_a, shift_f, scale_f, gate_f = self.adaLN_modulation(c).chunk(6, dim=1)
        view = (x.shape[0], 1, 1, x.shape[-1])
        x = x + gate_a.view(view) * self.attn(modulate(self.norm1(x), shift_a, scale_a))
        x = x + gate_f.view(view) * self.ffn(modulate(self.norm2(x), shift_f, scale_f))
        return x


class FinalLayer(nn.Module):
    def __init__(self, dim: int, patch_size: int, out_channels: int):
        super().__init__()
        self.norm = nn.LayerNorm(dim, elementwise_affine=False, eps=1e-6)
        self.linear = nn.Linear(dim, patch_size * patch_size * out_channels)
        self.adaLN_modulation = nn.Sequential(nn.SiLU(), nn.Linear(dim, 2 * dim))

    def forward(self, x: torch.Tensor, c: torch.Tensor) -> torch.Tensor:
        shift, scale = self.adaLN_modulation(c).chunk(2, dim=1)
        return self.linear(modulate(self.norm(x), shift, scale))


# ========================================================================
# NETWORK
# ========================================================================

class RSDiT(nn.Module):
    """
    Noise (and covariance) predictor conditioned on a dense raster.

    Example:
        >>> net = RSDiT(DenoiserConfig(hidden_dim=32, depth=2, num_heads=2))
        >>> eps, raw_var = net(x, steps, contour_raster)
    """

    def __init__(self, config: DenoiserConfig):
        super().__init__()
        self.config = config
        p = config.patch_size
        self.x_embedder = nn.Linear(config.in_channels * p * p, config.hidden_dim)
        self.t_embedder = TimestepEmbedder(config.hidden_dim)
        self.dense_embedder = DenseEmbedding(config.condition_channels, config.hidden_dim)
        self.blocks = nn.ModuleList([
            RSDiTBlock(
                config.hidden_dim,
                config.num_heads,
                config.mlp_ratio,
                config.window_size,
                use_global=config.uses_global_attention(b),
            )
            for b in range(1, config.depth + 1)
        ])
        self.final_layer = FinalLayer(config.hidden_dim, p, config.out_channels)
        if config.absolute_pos_embed:
            grid = config.input_size // p
            self.register_buffer(
                "pos_embed", sincos_pos_embed_2d(config.hidden_dim, grid, grid), persistent=False
            )
        self.initialize_weights()

    def initialize_weights(self):
        def _basic_init(module):
            if isinstance(module, nn.Linear):
                nn.init.xavier_uniform_(module.weight)
                if module.bias is not None:
                    nn.init.zeros_(module.bias)

        self.apply(_basic_init)
        nn.init.normal_(self.t_embedder.mlp[0].weight, std=0.02)
        nn.init.normal_(self.t_embedder.mlp[2].weight, std=0.02)
        # adaLN-Zero: every residual branch and the output start at zero
        for block in self.blocks:
            nn.init.zeros_(block.adaLN_modulation[-1].weight)
            nn.init.zeros_(block.adaLN_modulation[-1].bias)
        nn.init.zeros_(self.final_layer.adaLN_modulation[-1].weight)
        nn.init.zeros_(self.final_layer.adaLN_modulation[-1].bias)
        nn.init.zeros_(self.final_layer.linear.weight)
        nn.init.zeros_(self.final_layer.linear.bias)

    def num_parameters(self) -> int:
        return sum(p.numel() for p in self.parameters())

    def _check_inputs(self, x: torch.Tensor, cond: torch.Tensor):
        cfg = self.config
        if x.ndim != 4 or x.shape[1] != cfg.in_channels:
            raise DimensionError(
                f"expected (B, {cfg.in_channels}, H, W) input, got {tuple(x.shape)}", "rsdit"
            )
        if cond.ndim != 4 or cond.shape[1] != cfg.condition_channels:
            raise DimensionError(
                f"expected (B, {cfg.condition_channels}, H, W) condition, got {tuple(cond.shape)}",
                "rsdit",
            )
        if cond.shape[0] != x.shape[0] or cond.shape[-2:] != x.shape[-2:]:
            raise DimensionError("condition and input differ in batch or spatial size", "rsdit")
        h, w = x.shape[-2:]
        if h % DENSE_EMBED_STRIDE or w % DENSE_EMBED_STRIDE:
            raise DimensionError(f"{h}x{w} not divisible by {DENSE_EMBED_STRIDE}", "rsdit")

    def embed_tokens(self, x: torch.Tensor, cond: torch.Tensor) -> torch.Tensor:
        """Patch tokens plus the merged condition, as a (B, h, w, d) grid."""
        tokens, (gh, gw) = patchify(x, self.config.patch_size)
        grid = self.x_embedder(tokens).reshape(x.shape[0], gh, gw, -1)
        if self.config.absolute_pos_embed:
            if self.pos_embed.shape[:2] != (gh, gw):
                raise DimensionError(
                    f"absolute position table is {tuple(self.pos_embed.shape[:2])}, "
                    f"input grid is {gh}x{gw}", "rsdit"
                )
            grid = grid + self.pos_embed.to(grid.dtype)
        return merge_condition(grid, self.dense_embedder(cond))

    def forward(
        self,
        x: torch.Tensor,
        t: Union[int, torch.Tensor],
        cond: torch.Tensor,
    ) -> Tuple[torch.Tensor, Optional[torch.Tensor]]:
        """
        Predict noise for a batch.

        Args:
            x: (B, C, H, W) noisy data
            t: Step index, scalar or (B,) tensor
            cond: (B, condition_channels, H, W) dense condition raster

        Returns:
            (eps_pred, raw_var); raw_var is None without a covariance head
        """
        self._check_inputs(x, cond)
        if not isinstance(t, torch.Tensor) or t.ndim == 0:
            t = torch.full((x.shape[0],), int(t), dtype=torch.long, device=x.device)
        gh, gw = x.shape[-2] // self.config.patch_size, x.shape[-1] // self.config.patch_size

        h = self.embed_tokens(x, cond)
        c = self.t_embedder(t.to(x.device))
        for block in self.blocks:
            h = block(h, c)
        out = self.final_layer(h, c).reshape(x.shape[0], gh * gw, -1)
        out = unpatchify(out, (gh, gw), self.config.patch_size)
        if self.config.learn_covariance:
            eps, raw_var = out.chunk(2, dim=1)
            return eps, raw_var
        return out, None
