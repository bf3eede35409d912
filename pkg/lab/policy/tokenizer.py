"""
Multimodal Tokenizer
Turns instruction text, observation frames, the diffusion timestep and noised
actions into the token sequence the causal transformer consumes. Also owns the
action normalization statistics and the padding of 7-D actions to model width.
"""
import math
from dataclasses import dataclass
from enum import IntEnum
from typing import Iterable, List, Optional, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from einops import rearrange

from .exceptions import InvalidRangeError, ShapeError
from .transformer import ACTION_DIM, RMSNorm, SwiGLU


class Segment(IntEnum):
    LANGUAGE = 0
    IMAGE = 1
    TIMESTEP = 2
    ACTION = 3
    READOUT = 4


# ==================== ACTIONS ====================

# Layout of the 7-D end-effector command.
TRANSLATION = slice(0, 3)
ROTATION = slice(3, 6)  # roll, pitch, yaw
GRIPPER = 6


@dataclass(frozen=True)
class Action:
    translation: tuple
    rotation: tuple
    gripper: float

    @classmethod
    def from_vector(cls, vector) -> "Action":
        v = np.asarray(vector, dtype=np.float64)
        if v.shape != (ACTION_DIM,):
            raise ShapeError(f"an action has exactly {ACTION_DIM} components, got {v.shape}")
        return cls(tuple(v[TRANSLATION]), tuple(v[ROTATION]), float(v[GRIPPER]))

    def as_vector(self) -> np.ndarray:
        return np.array([*self.translation, *self.rotation, self.gripper], dtype=np.float64)


@dataclass(frozen=True)
class NormStats:
    low: np.ndarray
    high: np.ndarray

    def __post_init__(self):
        low = np.asarray(self.low, dtype=np.float64)
        high = np.asarray(self.high, dtype=np.float64)
        if low.shape != (ACTION_DIM,) or high.shape != (ACTION_DIM,):
            raise ShapeError("norm stats need 7 low and 7 high values")
        if not np.all(high > low):
            raise InvalidRangeError("norm stats need high > low in every dimension")
        object.__setattr__(self, "low", low)
        object.__setattr__(self, "high", high)

    @classmethod
    def from_actions(cls, actions: np.ndarray, lo_pct: float = 1.0, hi_pct: float = 99.0,
                     min_span: float = 1e-6) -> "NormStats":
        """1st/99th percentile per dimension; constant dimensions are widened to +-1."""
        actions = np.asarray(actions, dtype=np.float64).reshape(-1, ACTION_DIM)
        low = np.percentile(actions, lo_pct, axis=0)
        high = np.percentile(actions, hi_pct, axis=0)
        flat = (high - low) < min_span
        low = np.where(flat, low - 1.0, low)
        high = np.where(flat, high + 1.0, high)
        return cls(low=low, high=high)

    def to_json(self) -> dict:
        return {"low": [float(v) for v in self.low], "high": [float(v) for v in self.high]}

    @classmethod
    def from_json(cls, data: dict) -> "NormStats":
        return cls(low=np.array(data["low"], dtype=np.float64),
                   high=np.array(data["high"], dtype=np.float64))


def normalize_action(action, stats: NormStats) -> np.ndarray:
    """Map each dimension affinely from [low, high] to [-1, 1] and clip."""
    a = np.asarray(action, dtype=np.float64)
    scaled = 2.0 * (a - stats.low) / (stats.high - stats.low) - 1.0
    return np.clip(scaled, -1.0, 1.0)


def denormalize_action(v, stats: NormStats) -> np.ndarray:
    v = np.clip(np.asarray(v, dtype=np.float64), -1.0, 1.0)
    return stats.low + (v + 1.0) * 0.5 * (stats.high - stats.low)


def pad_action_token(v: torch.Tensor, d: int) -> torch.Tensor:
    """Zero-pad the trailing 7-D action axis to model width d."""
    if d < ACTION_DIM:
        raise ShapeError(f"model width {d} is smaller than the action width {ACTION_DIM}")
    if v.shape[-1] != ACTION_DIM:
        raise ShapeError(f"expected a trailing axis of {ACTION_DIM}, got {v.shape[-1]}")
    return F.pad(v, (0, d - ACTION_DIM))


# ==================== LANGUAGE ====================

PAD_TOKEN = "<pad>"
UNK_TOKEN = "<unk>"


class Vocabulary:
    """Closed word list of the simulator's instruction templates. Id 0 is PAD, 1 is UNK."""

    PAD = 0
    UNK = 1

    def __init__(self, words: Iterable[str]):
        unique = sorted({w.lower() for w in words} - {PAD_TOKEN, UNK_TOKEN})
        self.words: List[str] = [PAD_TOKEN, UNK_TOKEN] + unique
        self._ids = {w: i for i, w in enumerate(self.words)}

    def __len__(self) -> int:
        return len(self.words)

    def encode(self, text: str, length: int = 16) -> List[int]:
        ids = [self._ids.get(w, self.UNK) for w in text.lower().split()][:length]
        return ids + [self.PAD] * (length - len(ids))


class InstructionEmbedder(nn.Module):
    """Learned embedding table + learned positional offsets (stand-in for a text encoder)."""

    def __init__(self, vocab_size: int, n_lang: int, d: int):
        super().__init__()
        self.n_lang = n_lang
        self.table = nn.Embedding(vocab_size, d)
        self.position = nn.Parameter(torch.zeros(n_lang, d))

    def forward(self, ids: torch.Tensor) -> torch.Tensor:
        if ids.shape[-1] != self.n_lang:
            raise ShapeError(f"expected {self.n_lang} token ids, got {ids.shape[-1]}")
        return self.table(ids) + self.position


def embed_instruction(text: str, vocab: Vocabulary, embedder: InstructionEmbedder) -> torch.Tensor:
    """(n_lang, d) language tokens for one instruction."""
    ids = torch.tensor([vocab.encode(text, embedder.n_lang)], dtype=torch.long)
    return embedder(ids)[0]


# ==================== IMAGES ====================

def images_to_float(images: torch.Tensor) -> torch.Tensor:
    """uint8 [0, 255] -> float [-1, 1]; float inputs pass through."""
    if images.dtype == torch.uint8:
        return images.float() / 127.5 - 1.0
    return images


class PatchEncoder(nn.Module):
    """Linear patch projection plus learned 2-D position embeddings, trained end to end."""

    def __init__(self, image_size: int, patch: int, d: int):
        super().__init__()
        if image_size % patch:
            raise ShapeError(f"image size {image_size} is not divisible by patch {patch}")
        self.patch = patch
        self.grid = image_size // patch
        self.proj = nn.Linear(patch * patch * 3, d)
        self.position = nn.Parameter(torch.zeros(self.grid * self.grid, d))

    def project(self, images: torch.Tensor) -> torch.Tensor:
        """Patch projections before positions are added. images: (..., H, W, 3)."""
        h, w = images.shape[-3], images.shape[-2]
        if h % self.patch or w % self.patch:
            raise ShapeError(f"image {h}x{w} is not divisible by patch {self.patch}")
        patches = rearrange(
            images_to_float(images), "... (gh p1) (gw p2) c -> ... (gh gw) (p1 p2 c)",
            p1=self.patch, p2=self.patch,
        )
        return self.proj(patches)

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        feats = self.project(images)
        if feats.shape[-2] != self.position.shape[0]:
            raise ShapeError(f"expected {self.position.shape[0]} patches, got {feats.shape[-2]}")
        return feats + self.position


def encode_image(img: torch.Tensor, encoder: PatchEncoder) -> torch.Tensor:
    return encoder(img)


# ==================== Q-FORMER ====================

def film(x: torch.Tensor, gamma: torch.Tensor, beta: torch.Tensor) -> torch.Tensor:
    """gamma * x + beta, broadcast over rows."""
    if gamma.shape[-1] != x.shape[-1] or beta.shape[-1] != x.shape[-1]:
        raise ShapeError(
            f"FiLM widths disagree: x {x.shape[-1]}, gamma {gamma.shape[-1]}, beta {beta.shape[-1]}"
        )
    if gamma.dim() == x.dim() - 1:
        gamma = gamma.unsqueeze(-2)
        beta = beta.unsqueeze(-2)
    return gamma * x + beta


class CrossAttention(nn.Module):
    def __init__(self, dim: int, n_heads: int):
        super().__init__()
        self.n_heads = n_heads
        self.q = nn.Linear(dim, dim, bias=False)
        self.kv = nn.Linear(dim, 2 * dim, bias=False)
        self.proj = nn.Linear(dim, dim, bias=False)

    def forward(self, x: torch.Tensor, context: torch.Tensor) -> torch.Tensor:
        q = rearrange(self.q(x), "b l (h e) -> b h l e", h=self.n_heads)
        k, v = rearrange(self.kv(context), "b l (k h e) -> k b h l e", k=2, h=self.n_heads)
        weights = ((q @ k.transpose(-2, -1)) * q.shape[-1] ** -0.5).softmax(dim=-1)
        return self.proj(rearrange(weights @ v, "b h l e -> b l (h e)"))


class QFormerBlock(nn.Module):
    """Cross-attention from queries to patches, feed-forward, then language FiLM."""

    def __init__(self, d: int, n_heads: int, d_ff: int, eps: float):
        super().__init__()
        self.query_norm = RMSNorm(d, eps)
        self.context_norm = RMSNorm(d, eps)
        self.cross_attn = CrossAttention(d, n_heads)
        self.ff_norm = RMSNorm(d, eps)
        self.ff = SwiGLU(d, d_ff)
        self.film_proj = nn.Linear(d, 2 * d)

    def forward(self, queries, patches, lang_pooled):
        x = queries + self.cross_attn(self.query_norm(queries), self.context_norm(patches))
        x = x + self.ff(self.ff_norm(x))
        gamma, beta = self.film_proj(lang_pooled).chunk(2, dim=-1)
        return film(x, 1.0 + gamma, beta)


class QFormer(nn.Module):
    def __init__(self, d: int, n_heads: int, d_ff: int, n_queries: int = 32, depth: int = 4,
                 eps: float = 1e-5, query_init_std: float = 0.02):
        super().__init__()
        self.query_init_std = query_init_std
        self.queries = nn.Parameter(torch.randn(n_queries, d) * query_init_std)
        self.blocks = nn.ModuleList(QFormerBlock(d, n_heads, d_ff, eps) for _ in range(depth))
        self.norm = RMSNorm(d, eps)

    def reset_film(self) -> None:
        # Identity modulation at init, as FiLM layers usually start.
        for block in self.blocks:
            nn.init.zeros_(block.film_proj.weight)
            nn.init.zeros_(block.film_proj.bias)

    def forward(self, patch_feats: torch.Tensor, lang_tokens: torch.Tensor) -> torch.Tensor:
        """patch_feats (B, P, d), lang_tokens (B, n_lang, d) -> (B, n_queries, d)."""
        if patch_feats.shape[-1] != self.queries.shape[-1]:
            raise ShapeError("patch feature width does not match the query width")
        pooled = lang_tokens.mean(dim=-2)
        x = self.queries.expand(patch_feats.shape[0], -1, -1)
        for block in self.blocks:
            x = block(x, patch_feats, pooled)
        return self.norm(x)


def qformer(patch_feats: torch.Tensor, lang_tokens: torch.Tensor, module: QFormer) -> torch.Tensor:
    return module(patch_feats, lang_tokens)


# ==================== TIMESTEP ====================

def timestep_embedding(t, d: int, T_max: Optional[int] = None, dtype=torch.float32) -> torch.Tensor:
    """Interleaved (sin, cos) pairs over d/2 frequencies spaced geometrically from 1 to 1e-4."""
    if d % 2:
        raise ShapeError(f"timestep embedding width must be even, got {d}")
    t = torch.as_tensor(t, dtype=torch.float64)
    if T_max is not None and t.numel() and (float(t.min()) < 0 or float(t.max()) >= T_max):
        raise InvalidRangeError(f"timestep out of range [0, {T_max})")
    half = d // 2
    exponent = torch.arange(half, dtype=torch.float64) / max(half - 1, 1)
    freqs = torch.exp(-math.log(10000.0) * exponent)
    angles = t[..., None] * freqs
    emb = torch.stack([angles.sin(), angles.cos()], dim=-1)
    return emb.flatten(-2).to(dtype)


# ==================== SEQUENCE ====================

@dataclass
class TokenSequence:
    tokens: torch.Tensor        # (B, L, d)
    segments: torch.Tensor      # (L,) Segment ids
    frame_index: torch.Tensor   # (L,) frame number for image tokens, -1 elsewhere
    mask: torch.Tensor          # (L, L) bool, mask[i, j] = j <= i

    @property
    def length(self) -> int:
        return self.tokens.shape[1]

    def index_of(self, segment: Segment) -> torch.Tensor:
        return (self.segments == int(segment)).nonzero(as_tuple=True)[0]

    @property
    def action_index(self) -> torch.Tensor:
        return self.index_of(Segment.ACTION)

    @property
    def readout_index(self) -> torch.Tensor:
        return self.index_of(Segment.READOUT)


def causal_mask(L: int) -> torch.Tensor:
    return torch.ones(L, L, dtype=torch.bool).tril()


def build_sequence(lang: torch.Tensor, frames: Sequence[torch.Tensor], t_emb: Optional[torch.Tensor],
                   actions: Optional[torch.Tensor], readouts: Optional[torch.Tensor] = None
                   ) -> TokenSequence:
    """
    Concatenate [language | frame 0 | frame 1 | ... | timestep | actions or readouts].

    All inputs are batch-first (B, n, d); t_emb may be (B, d). The timestep
    token is omitted when t_emb is None (discrete head).
    """
    d = lang.shape[-1]
    blocks, segments, frame_index = [lang], [Segment.LANGUAGE] * lang.shape[1], [-1] * lang.shape[1]
    for i, block in enumerate(frames):
        blocks.append(block)
        segments += [Segment.IMAGE] * block.shape[1]
        frame_index += [i] * block.shape[1]
    if t_emb is not None:
        blocks.append(t_emb.unsqueeze(1) if t_emb.dim() == 2 else t_emb)
        segments.append(Segment.TIMESTEP)
        frame_index.append(-1)
    for tail, label in ((actions, Segment.ACTION), (readouts, Segment.READOUT)):
        if tail is not None:
            blocks.append(tail)
            segments += [label] * tail.shape[1]
            frame_index += [-1] * tail.shape[1]

    for block in blocks:
        if block.shape[-1] != d:
            raise ShapeError(f"token width {block.shape[-1]} != {d}")
    batch = max(block.shape[0] for block in blocks)
    tokens = torch.cat([block.expand(batch, -1, -1) for block in blocks], dim=1)
    L = tokens.shape[1]
    return TokenSequence(
        tokens=tokens,
        segments=torch.tensor([int(s) for s in segments], dtype=torch.long),
        frame_index=torch.tensor(frame_index, dtype=torch.long),
        mask=causal_mask(L),
    )
