"""
Training Data
Turns demonstration episodes into (instruction, frame history, action chunk)
samples for the policy.

  - Frame history: the n_frames renders ending at step t; at episode start the
    first frame is repeated.
  - Chunks that run past the episode end repeat the final action and carry a
    mask so the padded positions never reach the loss.
  - Tasks with fewer episodes are duplicated so every task contributes the
    same number of episodes per epoch.
"""
import logging
from collections import OrderedDict
from dataclasses import dataclass
from typing import Iterator, List, Optional, Sequence, Tuple

import numpy as np
import torch

from .env.dataset import Episode, read_episodes, read_metadata
from .exceptions import DatasetIOError
from .tokenizer import NormStats, Vocabulary, normalize_action

logger = logging.getLogger(__name__)

VALIDATION_EVERY = 20


@dataclass
class Batch:
    lang_ids: torch.Tensor   # (B, n_lang) long
    frames: torch.Tensor     # (B, n_frames, S, S, 3) uint8, or float in [-1, 1] after augmentation
    actions: torch.Tensor    # (B, H, 7) normalized
    mask: torch.Tensor       # (B, H) bool, True on real (non-padded) chunk positions

    def __len__(self) -> int:
        return self.actions.shape[0]

    def to(self, dtype: torch.dtype) -> "Batch":
        frames = self.frames if self.frames.dtype == torch.uint8 else self.frames.to(dtype)
        return Batch(self.lang_ids, frames, self.actions.to(dtype), self.mask)


@dataclass
class LoadedDataset:
    episodes: List[Episode]
    metadata: dict
    norm_stats: NormStats

    @property
    def vocab_words(self) -> List[str]:
        return list(self.metadata.get("vocab", []))

    @property
    def image_size(self) -> int:
        return int(self.metadata.get("image_size", 64))


def load_dataset(data_dir) -> LoadedDataset:
    metadata = read_metadata(data_dir)
    try:
        stats = NormStats.from_json(metadata["norm_stats"])
    except (KeyError, TypeError, ValueError) as exc:
        raise DatasetIOError(f"dataset metadata under {data_dir} has no valid norm_stats ({exc})") from exc
    episodes = read_episodes(data_dir, int(metadata.get("image_size", 64)))
    if not episodes:
        raise DatasetIOError(f"dataset under {data_dir} holds no episodes")
    return LoadedDataset(episodes=episodes, metadata=metadata, norm_stats=stats)


def split_episodes(episodes: Sequence[Episode], every: int = VALIDATION_EVERY
                   ) -> Tuple[List[Episode], List[Episode]]:
    """19:1 split by trajectory, so renders of one trajectory never straddle the split."""
    groups: "OrderedDict[tuple, int]" = OrderedDict()
    for ep in episodes:
        groups.setdefault((ep.task, ep.seed), len(groups))
    train, val = [], []
    for ep in episodes:
        (val if groups[(ep.task, ep.seed)] % every == every - 1 else train).append(ep)
    return train, val


def balance_tasks(episodes: Sequence[Episode]) -> List[Episode]:
    """Cycle each task's episodes up to the largest task's count."""
    by_task: "OrderedDict[str, List[Episode]]" = OrderedDict()
    for ep in episodes:
        by_task.setdefault(ep.task, []).append(ep)
    if not by_task:
        return []
    target = max(len(v) for v in by_task.values())
    balanced = []
    for task, eps in by_task.items():
        if len(eps) < target:
            logger.info("Duplicating %s episodes %d -> %d", task, len(eps), target)
        balanced.extend(eps[i % len(eps)] for i in range(target))
    return balanced


class ChunkDataset:
    def __init__(self, episodes: Sequence[Episode], norm_stats: NormStats, vocab: Vocabulary,
                 n_frames: int, H: int, n_lang: int = 16, balance: bool = True):
        self.episodes = balance_tasks(episodes) if balance else list(episodes)
        self.norm_stats = norm_stats
        self.n_frames = n_frames
        self.H = H
        self._lang = [np.asarray(vocab.encode(ep.instruction, n_lang), dtype=np.int64) for ep in self.episodes]
        self._actions = [normalize_action(ep.actions, norm_stats).astype(np.float32) for ep in self.episodes]
        self.index = [(e, t) for e, ep in enumerate(self.episodes) for t in range(len(ep))]

    def __len__(self) -> int:
        return len(self.index)

    def frame_history(self, episode: int, t: int) -> np.ndarray:
        steps = [max(t - k, 0) for k in reversed(range(self.n_frames))]
        return self.episodes[episode].images[steps]

    def chunk(self, episode: int, t: int) -> Tuple[np.ndarray, np.ndarray]:
        actions = self._actions[episode]
        end = len(actions)
        steps = np.minimum(np.arange(t, t + self.H), end - 1)
        mask = np.arange(t, t + self.H) < end
        return actions[steps], mask

    def __getitem__(self, k: int) -> dict:
        e, t = self.index[k]
        actions, mask = self.chunk(e, t)
        return {
            "lang_ids": self._lang[e],
            "frames": self.frame_history(e, t),
            "actions": actions,
            "mask": mask,
        }

    def collate(self, indices: Sequence[int]) -> Batch:
        items = [self[int(k)] for k in indices]
        return Batch(
            lang_ids=torch.from_numpy(np.stack([it["lang_ids"] for it in items])),
            frames=torch.from_numpy(np.stack([it["frames"] for it in items])),
            actions=torch.from_numpy(np.stack([it["actions"] for it in items])),
            mask=torch.from_numpy(np.stack([it["mask"] for it in items])),
        )

    def batches(self, batch_size: int, generator: torch.Generator) -> Iterator[Batch]:
        """Endless shuffled batches; each pass over the data is a fresh permutation."""
        if not len(self):
            raise DatasetIOError("cannot draw batches from an empty dataset")
        size = min(batch_size, len(self))
        while True:
            order = torch.randperm(len(self), generator=generator).tolist()
            # The ragged tail of each pass is dropped.
            for start in range(0, len(order) - size + 1, size):
                yield self.collate(order[start:start + size])


def augment_brightness(frames: torch.Tensor, max_delta: float, generator: torch.Generator
                       ) -> torch.Tensor:
    """Scale each sample's frames by 1 + U(-max_delta, max_delta); returns floats in [-1, 1]."""
    pixels = frames.float() if frames.dtype == torch.uint8 else (frames + 1.0) * 127.5
    scale = 1.0 + (torch.rand(frames.shape[0], generator=generator) * 2.0 - 1.0) * max_delta
    scale = scale.view(-1, *([1] * (frames.dim() - 1)))
    return (pixels * scale).clamp(0.0, 255.0) / 127.5 - 1.0


def make_datasets(loaded: LoadedDataset, vocab: Vocabulary, n_frames: int, H: int, n_lang: int = 16,
                  validation: bool = True) -> Tuple[ChunkDataset, Optional[ChunkDataset]]:
    if validation:
        train_eps, val_eps = split_episodes(loaded.episodes)
    else:
        train_eps, val_eps = list(loaded.episodes), []
    if not train_eps:
        train_eps, val_eps = val_eps, []
    train = ChunkDataset(train_eps, loaded.norm_stats, vocab, n_frames, H, n_lang)
    val = ChunkDataset(val_eps, loaded.norm_stats, vocab, n_frames, H, n_lang, balance=False) if val_eps else None
    return train, val
