"""
Baseline Action Heads
The heads the in-context denoiser is compared against. They share the backbone
and its conditioning prefix; only the way actions are produced differs.

  - mlp_diffusion: a 3-hidden-layer MLP denoises each action from its own
    readout embedding, the noised action and the timestep embedding.
  - mlp_flat: the same MLP over the whole chunk flattened into one vector.
  - discrete: per-dimension classification into 256 bins, argmax decode.
"""
import torch
import torch.nn as nn
import torch.nn.functional as F

from .exceptions import InvalidRangeError, ShapeError
from .transformer import ACTION_DIM

BINS = 256


def denoising_mlp(in_dim: int, hidden: int, out_dim: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Linear(in_dim, hidden), nn.SiLU(),
        nn.Linear(hidden, hidden), nn.SiLU(),
        nn.Linear(hidden, hidden), nn.SiLU(),
        nn.Linear(hidden, out_dim),
    )


class MlpDiffusionHead(nn.Module):
    """eps_hat[h] = MLP(readout[h], x_t[h], t_emb); positions never mix."""

    def __init__(self, d: int):
        super().__init__()
        self.d = d
        self.mlp = denoising_mlp(2 * d + ACTION_DIM, d, ACTION_DIM)

    def forward(self, readouts: torch.Tensor, noised: torch.Tensor, t_emb: torch.Tensor) -> torch.Tensor:
        return mlp_diffusion_head(readouts, noised, t_emb, self)


def mlp_diffusion_head(readouts, noised, t_emb, head: MlpDiffusionHead) -> torch.Tensor:
    """readouts (B, H, d), noised (B, H, 7), t_emb (B, d) -> (B, H, 7)."""
    if readouts.shape[:2] != noised.shape[:2] or noised.shape[-1] != ACTION_DIM:
        raise ShapeError(f"readouts {tuple(readouts.shape)} and noised {tuple(noised.shape)} disagree")
    if readouts.shape[-1] != head.d or t_emb.shape[-1] != head.d:
        raise ShapeError("conditioning width does not match the head width")
    t = t_emb.unsqueeze(1).expand(-1, noised.shape[1], -1)
    return head.mlp(torch.cat([readouts, noised, t], dim=-1))


class FlattenedChunkHead(nn.Module):
    """One MLP over the flattened H x 7 chunk, conditioned on a single readout."""

    def __init__(self, d: int, H: int):
        super().__init__()
        self.d = d
        self.H = H
        self.width = H * ACTION_DIM
        self.mlp = denoising_mlp(2 * d + self.width, d, self.width)

    def forward(self, cond: torch.Tensor, noised: torch.Tensor, t_emb: torch.Tensor) -> torch.Tensor:
        flat = flattened_chunk_head(cond, noised.flatten(-2), t_emb, self)
        return flat.view(*noised.shape)


def flattened_chunk_head(cond, noised_flat, t_emb, head: FlattenedChunkHead) -> torch.Tensor:
    """cond (B, d), noised_flat (B, H*7), t_emb (B, d) -> (B, H*7)."""
    if noised_flat.shape[-1] != head.width:
        raise ShapeError(f"expected a flattened chunk of {head.width}, got {noised_flat.shape[-1]}")
    if cond.shape[-1] != head.d or t_emb.shape[-1] != head.d:
        raise ShapeError("conditioning width does not match the head width")
    return head.mlp(torch.cat([cond, noised_flat, t_emb], dim=-1))


# ==================== DISCRETE ====================

def discretize_action(v, bins: int = BINS) -> torch.Tensor:
    """Bin index per dimension for v in [-1, 1]; v = 1 lands in the last bin."""
    v = torch.as_tensor(v, dtype=torch.float64)
    idx = torch.floor((v + 1.0) / 2.0 * bins).long()
    return idx.clamp(0, bins - 1)


def undiscretize_action(indices, bins: int = BINS) -> torch.Tensor:
    """Bin centers."""
    indices = torch.as_tensor(indices)
    if indices.numel() and (int(indices.min()) < 0 or int(indices.max()) >= bins):
        raise InvalidRangeError(f"bin index out of range [0, {bins})")
    return -1.0 + (indices.to(torch.float64) + 0.5) * (2.0 / bins)


class DiscreteActionHead(nn.Module):
    def __init__(self, d: int, bins: int = BINS):
        super().__init__()
        self.bins = bins
        self.proj = nn.Linear(d, ACTION_DIM * bins)

    def forward(self, readouts: torch.Tensor) -> torch.Tensor:
        return discrete_head_forward(readouts, self)


def discrete_head_forward(readouts: torch.Tensor, head: DiscreteActionHead) -> torch.Tensor:
    """(B, H, d) -> (B, H, 7, bins) logits."""
    logits = head.proj(readouts)
    return logits.view(*readouts.shape[:-1], ACTION_DIM, head.bins)


def decode_logits(logits: torch.Tensor) -> torch.Tensor:
    # torch.argmax returns the first maximal index, i.e. ties go to the lowest bin.
    return logits.argmax(dim=-1)


def discrete_loss(logits: torch.Tensor, targets: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Mean cross-entropy over unmasked (position, dimension) pairs."""
    ce = F.cross_entropy(logits.flatten(0, -2), targets.flatten(), reduction="none")
    ce = ce.view(targets.shape)
    weight = mask.to(ce.dtype).unsqueeze(-1).expand_as(ce)
    return (ce * weight).sum() / weight.sum().clamp_min(1.0)
