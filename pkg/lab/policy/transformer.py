"""
Causal Transformer Backbone
LLaMA-style decoder stack (pre-RMSNorm, rotary attention, SwiGLU feed-forward)
that maps a token sequence to per-position hidden states, plus the linear
projection that reads predicted noise off the action positions.
"""
from dataclasses import asdict, dataclass, fields

import torch
import torch.nn as nn
import torch.nn.functional as F
from einops import rearrange

from .exceptions import ShapeError

HEAD_KINDS = ("incontext", "mlp_diffusion", "mlp_flat", "discrete")

ACTION_DIM = 7


@dataclass
class ModelConfig:
    d: int = 128
    n_layers: int = 4
    n_heads: int = 4
    d_ff: int = 512
    H: int = 16
    n_frames: int = 2
    T_train: int = 100
    head_kind: str = "incontext"
    image_size: int = 64
    patch_size: int = 8
    n_queries: int = 32
    qformer_depth: int = 4
    n_lang: int = 16
    vocab: tuple = ()
    init_std: float = 0.02
    query_init_std: float = 0.02
    norm_eps: float = 1e-5
    rope_theta: float = 10000.0
    beta_start: float = 1e-4
    beta_end: float = 0.02
    freeze_language: bool = False
    bins: int = 256

    def __post_init__(self):
        self.vocab = tuple(self.vocab)
        if self.d % self.n_heads:
            raise ShapeError(f"d={self.d} is not divisible by n_heads={self.n_heads}")
        if (self.d // self.n_heads) % 2:
            raise ShapeError("rotary encoding needs an even head width")
        if self.H < 1 or self.n_frames < 1:
            raise ShapeError("H and n_frames must be >= 1")
        if self.d < ACTION_DIM:
            raise ShapeError(f"d must be >= {ACTION_DIM}")
        if self.head_kind not in HEAD_KINDS:
            raise ShapeError(f"unknown head kind: {self.head_kind}")

    @property
    def head_dim(self) -> int:
        return self.d // self.n_heads

    def to_dict(self) -> dict:
        data = asdict(self)
        data["vocab"] = list(self.vocab)
        return data

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in data.items() if k in known})


# ==================== BUILDING BLOCKS ====================

class RMSNorm(nn.Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        super().__init__()
        self.eps = eps
        self.weight = nn.Parameter(torch.ones(dim))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return x * torch.rsqrt(x.pow(2).mean(-1, keepdim=True) + self.eps) * self.weight


class SwiGLU(nn.Module):
    """down(silu(gate(x)) * up(x))"""

    def __init__(self, dim: int, hidden: int):
        super().__init__()
        self.gate = nn.Linear(dim, hidden, bias=False)
        self.up = nn.Linear(dim, hidden, bias=False)
        self.down = nn.Linear(hidden, dim, bias=False)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.down(F.silu(self.gate(x)) * self.up(x))


def rotary_tables(positions: torch.Tensor, head_dim: int, theta: float, dtype: torch.dtype):
    """cos/sin tables of shape (L, head_dim) for the rotate-half layout."""
    inv_freq = 1.0 / (theta ** (torch.arange(0, head_dim, 2, dtype=torch.float64) / head_dim))
    angles = positions.to(torch.float64)[:, None] * inv_freq[None, :]
    angles = torch.cat([angles, angles], dim=-1)
    return angles.cos().to(dtype), angles.sin().to(dtype)


def apply_rotary(x: torch.Tensor, cos: torch.Tensor, sin: torch.Tensor) -> torch.Tensor:
    half = x.shape[-1] // 2
    rotated = torch.cat([-x[..., half:], x[..., :half]], dim=-1)
    return x * cos + rotated * sin


class CausalSelfAttention(nn.Module):
    def __init__(self, dim: int, n_heads: int, theta: float = 10000.0):
        super().__init__()
        self.n_heads = n_heads
        self.head_dim = dim // n_heads
        self.theta = theta
        self.qkv = nn.Linear(dim, 3 * dim, bias=False)
        self.proj = nn.Linear(dim, dim, bias=False)

    def forward(self, x: torch.Tensor, mask: torch.Tensor, positions: torch.Tensor,
                return_weights: bool = False):
        q, k, v = rearrange(self.qkv(x), "b l (k h e) -> k b h l e", k=3, h=self.n_heads)
        cos, sin = rotary_tables(positions, self.head_dim, self.theta, x.dtype)
        q = apply_rotary(q, cos, sin)
        k = apply_rotary(k, cos, sin)

        logits = (q @ k.transpose(-2, -1)) * self.head_dim ** -0.5
        logits = logits.masked_fill(~mask, float("-inf"))
        weights = logits.softmax(dim=-1)
        out = rearrange(weights @ v, "b h l e -> b l (h e)")
        out = self.proj(out)
        if return_weights:
            return out, weights
        return out


class DecoderBlock(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.attn_norm = RMSNorm(config.d, config.norm_eps)
        self.attn = CausalSelfAttention(config.d, config.n_heads, config.rope_theta)
        self.ff_norm = RMSNorm(config.d, config.norm_eps)
        self.ff = SwiGLU(config.d, config.d_ff)

    def forward(self, x, mask, positions):
        x = x + self.attn(self.attn_norm(x), mask, positions)
        return x + self.ff(self.ff_norm(x))


# ==================== BACKBONE ====================

class CausalTransformer(nn.Module):
    """Segment embeddings + decoder blocks + final norm."""

    def __init__(self, config: ModelConfig, n_segments: int):
        super().__init__()
        self.config = config
        self.segment_embed = nn.Embedding(n_segments, config.d)
        self.blocks = nn.ModuleList(DecoderBlock(config) for _ in range(config.n_layers))
        self.norm = RMSNorm(config.d, config.norm_eps)

    def forward(self, seq, position_offset: int = 0) -> torch.Tensor:
        return transformer_forward(self, seq, position_offset)


def transformer_forward(backbone: CausalTransformer, seq, position_offset: int = 0) -> torch.Tensor:
    """Hidden states (B, L, d); row i only ever sees tokens j <= i."""
    tokens = seq.tokens
    if tokens.shape[-1] != backbone.config.d:
        raise ShapeError(f"token width {tokens.shape[-1]} != model width {backbone.config.d}")
    L = tokens.shape[1]
    # Action positions continue the global index after the conditioning prefix.
    positions = torch.arange(L, device=tokens.device) + position_offset
    x = tokens + backbone.segment_embed(seq.segments.to(tokens.device))
    mask = seq.mask.to(tokens.device)
    for block in backbone.blocks:
        x = block(x, mask, positions)
    return backbone.norm(x)


def predict_noise(hidden: torch.Tensor, seq, projection: nn.Linear) -> torch.Tensor:
    """Project the action-position hidden states to (B, H, 7) noise estimates."""
    index = seq.action_index
    if index.numel() == 0:
        raise ShapeError("sequence has no action positions")
    return projection(hidden[:, index.to(hidden.device)])


def init_weights(module: nn.Module, std: float = 0.02) -> None:
    """Small-normal projections, zero biases, unit norm gains."""
    for sub in module.modules():
        if isinstance(sub, nn.Linear):
            nn.init.normal_(sub.weight, std=std)
            if sub.bias is not None:
                nn.init.zeros_(sub.bias)
        elif isinstance(sub, nn.Embedding):
            nn.init.normal_(sub.weight, std=std)
        elif isinstance(sub, RMSNorm):
            nn.init.ones_(sub.weight)
