"""
Diffusion Transformer Policy
Composes the tokenizer, the Q-Former, the causal backbone and one action head
into the network eps_theta(language, observations, t, noised chunk).

The conditioning prefix (language block, then one 32-token block per frame) is
built the same way for every head kind, so head comparisons only differ after
the prefix.
"""
import logging
from dataclasses import dataclass
from typing import List, Sequence, Tuple

import torch
import torch.nn as nn

from .exceptions import SamplerMismatchError, ShapeError
from .heads import DiscreteActionHead, FlattenedChunkHead, MlpDiffusionHead
from .tokenizer import (
    InstructionEmbedder,
    PatchEncoder,
    QFormer,
    Segment,
    TokenSequence,
    Vocabulary,
    build_sequence,
    images_to_float,
    pad_action_token,
    timestep_embedding,
)
from .transformer import ACTION_DIM, CausalTransformer, ModelConfig, init_weights, predict_noise

logger = logging.getLogger(__name__)

DIFFUSION_HEADS = ("incontext", "mlp_diffusion", "mlp_flat")


@dataclass
class Context:
    """Encoded conditioning prefix, reused across denoising steps."""
    lang: torch.Tensor          # (B, n_lang, d)
    frames: List[torch.Tensor]  # n_frames x (B, n_queries, d)

    @property
    def batch_size(self) -> int:
        return self.lang.shape[0]


class DiffusionTransformerPolicy(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        self.vocab = Vocabulary(config.vocab)
        d = config.d

        self.language = InstructionEmbedder(len(self.vocab), config.n_lang, d)
        self.image_encoder = PatchEncoder(config.image_size, config.patch_size, d)
        self.qformer = QFormer(
            d, config.n_heads, config.d_ff,
            n_queries=config.n_queries, depth=config.qformer_depth,
            eps=config.norm_eps, query_init_std=config.query_init_std,
        )
        self.backbone = CausalTransformer(config, n_segments=len(Segment))

        kind = config.head_kind
        if kind == "incontext":
            self.readouts = None
            self.head = nn.Linear(d, ACTION_DIM)
        elif kind == "mlp_diffusion":
            self.readouts = nn.Parameter(torch.zeros(config.H, d))
            self.head = MlpDiffusionHead(d)
        elif kind == "mlp_flat":
            self.readouts = nn.Parameter(torch.zeros(1, d))
            self.head = FlattenedChunkHead(d, config.H)
        else:
            self.readouts = nn.Parameter(torch.zeros(config.H, d))
            self.head = DiscreteActionHead(d, config.bins)

        self.reset_parameters()
        if config.freeze_language:
            self.language.requires_grad_(False)

    def reset_parameters(self) -> None:
        std = self.config.init_std
        init_weights(self, std)
        nn.init.normal_(self.language.position, std=std)
        nn.init.normal_(self.image_encoder.position, std=std)
        nn.init.normal_(self.qformer.queries, std=self.config.query_init_std)
        if self.readouts is not None:
            nn.init.normal_(self.readouts, std=std)
        self.qformer.reset_film()

    @property
    def is_diffusion(self) -> bool:
        return self.config.head_kind in DIFFUSION_HEADS

    # ==================== CONDITIONING ====================

    def encode_instructions(self, texts: Sequence[str]) -> torch.Tensor:
        ids = [self.vocab.encode(text, self.config.n_lang) for text in texts]
        return torch.tensor(ids, dtype=torch.long)

    def encode_context(self, lang_ids: torch.Tensor, frames: torch.Tensor) -> Context:
        """lang_ids (B, n_lang); frames (B, n_frames, S, S, 3) uint8 or float."""
        if frames.dim() != 5 or frames.shape[1] != self.config.n_frames:
            raise ShapeError(
                f"expected frames of shape (B, {self.config.n_frames}, S, S, 3), got {tuple(frames.shape)}"
            )
        lang = self.language(lang_ids)
        feats = self.image_encoder(images_to_float(frames).to(lang.dtype))
        # One independent Q-Former pass per observation frame.
        blocks = [self.qformer(feats[:, i], lang) for i in range(feats.shape[1])]
        return Context(lang=lang, frames=blocks)

    def timestep_tokens(self, t: torch.Tensor, like: torch.Tensor) -> torch.Tensor:
        return timestep_embedding(t, self.config.d, self.config.T_train, dtype=like.dtype)

    def embed_action_tokens(self, noised: torch.Tensor) -> torch.Tensor:
        """Only the 7 action dims enter the sequence; anything beyond is re-padded with zeros."""
        return pad_action_token(noised[..., :ACTION_DIM], self.config.d)

    def _readout_tokens(self, batch: int) -> torch.Tensor:
        return self.readouts.unsqueeze(0).expand(batch, -1, -1)

    # ==================== FORWARD ====================

    def backbone_pass(self, context: Context, t=None, noised=None) -> Tuple[torch.Tensor, TokenSequence]:
        """Hidden states and the sequence they were computed from, for any head kind."""
        B = context.batch_size
        kind = self.config.head_kind
        t_emb = None
        if kind != "discrete":
            t = torch.as_tensor(t, dtype=torch.long).reshape(-1).expand(B)
            t_emb = self.timestep_tokens(t, context.lang)
        if kind == "incontext":
            if noised is None:
                raise ShapeError("the in-context head needs noised action tokens")
            seq = build_sequence(context.lang, context.frames, t_emb, self.embed_action_tokens(noised))
        else:
            seq = build_sequence(context.lang, context.frames, t_emb, None, self._readout_tokens(B))
        return self.backbone(seq), seq

    def forward_eps(self, context: Context, t, noised: torch.Tensor) -> torch.Tensor:
        """(B, H, 7) noise estimate for the noised chunk at timestep t."""
        if not self.is_diffusion:
            raise SamplerMismatchError("the discrete head does not predict noise")
        if noised.shape[1] != self.config.H:
            raise ShapeError(f"expected a chunk of H={self.config.H}, got {noised.shape[1]}")
        hidden, seq = self.backbone_pass(context, t, noised)
        kind = self.config.head_kind
        if kind == "incontext":
            return predict_noise(hidden, seq, self.head)

        actions = noised[..., :ACTION_DIM]
        t_emb = seq.tokens[:, seq.index_of(Segment.TIMESTEP)].squeeze(1)
        readouts = hidden[:, seq.readout_index]
        if kind == "mlp_diffusion":
            return self.head(readouts, actions, t_emb)
        return self.head(readouts[:, 0], actions, t_emb)

    def forward_logits(self, context: Context) -> torch.Tensor:
        """(B, H, 7, bins) logits for the discrete head."""
        if self.config.head_kind != "discrete":
            raise SamplerMismatchError(f"head {self.config.head_kind} has no discrete logits")
        hidden, seq = self.backbone_pass(context)
        return self.head(hidden[:, seq.readout_index])

    def policy_forward(self, lang_ids, frames, t, noised) -> torch.Tensor:
        return self.forward_eps(self.encode_context(lang_ids, frames), t, noised)

    def forward(self, lang_ids, frames, t=None, noised=None) -> torch.Tensor:
        context = self.encode_context(lang_ids, frames)
        if self.is_diffusion:
            return self.forward_eps(context, t, noised)
        return self.forward_logits(context)


def build_policy(config: ModelConfig, seed: int = 0) -> DiffusionTransformerPolicy:
    """Fresh policy with parameters drawn from the given seed."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = DiffusionTransformerPolicy(config)
    n_params = sum(p.numel() for p in model.parameters())
    logger.debug("Built %s policy with %d parameters", config.head_kind, n_params)
    return model


def count_parameters(model: nn.Module, trainable_only: bool = False) -> int:
    return sum(p.numel() for p in model.parameters() if p.requires_grad or not trainable_only)
