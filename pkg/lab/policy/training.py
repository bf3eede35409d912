"""
Training
Diffusion-objective training for the in-context and MLP heads, cross-entropy
for the discrete head, AdamW with a warmup + half-cosine schedule.

All randomness comes from three generators derived from the run seed
(initialization, data order/augmentation, diffusion noise), so a run at one
thread is reproducible bit for bit.
"""
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np
import pandas as pd
import torch

from .data import Batch, ChunkDataset, LoadedDataset, augment_brightness, make_datasets
from .exceptions import DatasetIOError, InvalidRangeError, ShapeError
from .fileio import atomic_write_text, dump_json
from .heads import discrete_loss as _discrete_ce
from .heads import discretize_action
from .model import DiffusionTransformerPolicy, build_policy, count_parameters
from .scheduler import NoiseSchedule, forward_noise, make_noise_schedule
from .transformer import ACTION_DIM, HEAD_KINDS, ModelConfig

logger = logging.getLogger(__name__)

METRIC_COLUMNS = ["step", "loss", "lr", "wall_ms"]
PARAM_GROUPS = ("image_encoder", "qformer", "language", "backbone", "head", "readouts")


@dataclass
class TrainConfig:
    batch_size: int = 64
    steps: int = 2000
    lr_peak: float = 3e-4
    warmup_steps: int = 100
    weight_decay: float = 0.01
    betas: Tuple[float, float] = (0.9, 0.999)
    seed: int = 0
    head_kind: str = "incontext"
    H: int = 16
    n_frames: int = 2
    T_train: int = 100
    exec_steps: int = 8
    grad_clip: float = 1.0
    lr_decay: bool = True
    lr_multipliers: Dict[str, float] = field(default_factory=dict)
    augment_brightness: float = 0.1
    log_every: int = 100
    val_batches: int = 8
    workers: int = 1

    def __post_init__(self):
        self.betas = tuple(self.betas)
        if self.steps < 1 or self.batch_size < 1:
            raise InvalidRangeError("steps and batch_size must be positive")
        if not 0 <= self.warmup_steps < self.steps:
            raise InvalidRangeError(f"need 0 <= warmup_steps < steps, got {self.warmup_steps} / {self.steps}")
        if self.lr_peak <= 0:
            raise InvalidRangeError("lr_peak must be positive")
        if self.head_kind not in HEAD_KINDS:
            raise InvalidRangeError(f"unknown head kind: {self.head_kind}")
        if not 1 <= self.exec_steps <= self.H:
            raise InvalidRangeError(f"need 1 <= exec_steps <= H, got {self.exec_steps}")

    def to_dict(self) -> dict:
        data = asdict(self)
        data["betas"] = list(self.betas)
        return data

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in data.items() if k in known})

    def model_config(self, base: ModelConfig, **extra) -> ModelConfig:
        """Model config with the shared fields (head, horizon, history, T_train) taken from here."""
        data = base.to_dict()
        data.update(head_kind=self.head_kind, H=self.H, n_frames=self.n_frames, T_train=self.T_train, **extra)
        return ModelConfig.from_dict(data)


@dataclass
class TrainResult:
    model: DiffusionTransformerPolicy
    model_config: ModelConfig
    final_loss: float
    val_loss: Optional[float]
    metrics: pd.DataFrame
    checkpoint: Optional[Path] = None


# ==================== OBJECTIVES ====================

def diffusion_loss(model: DiffusionTransformerPolicy, schedule: NoiseSchedule, batch: Batch,
                   generator: Optional[torch.Generator] = None, t: Optional[torch.Tensor] = None,
                   eps: Optional[torch.Tensor] = None) -> torch.Tensor:
    """Masked mean of (eps - eps_hat)^2 over batch, chunk positions and the 7 action dims."""
    if len(batch) == 0:
        raise ShapeError("empty batch")
    x0 = batch.actions[..., :ACTION_DIM]
    B = x0.shape[0]
    if t is None:
        t = torch.randint(0, schedule.T_train, (B,), generator=generator)
    if eps is None:
        eps = torch.randn(x0.shape, generator=generator, dtype=x0.dtype)
    x_t = forward_noise(schedule, x0, t, eps)
    context = model.encode_context(batch.lang_ids, batch.frames)
    eps_hat = model.forward_eps(context, t, x_t)
    weight = batch.mask.to(x0.dtype).unsqueeze(-1).expand_as(eps)
    return ((eps - eps_hat) ** 2 * weight).sum() / weight.sum().clamp_min(1.0)


def discrete_loss(model: DiffusionTransformerPolicy, batch: Batch) -> torch.Tensor:
    if len(batch) == 0:
        raise ShapeError("empty batch")
    targets = discretize_action(batch.actions[..., :ACTION_DIM].clamp(-1.0, 1.0), model.config.bins)
    logits = model.forward_logits(model.encode_context(batch.lang_ids, batch.frames))
    return _discrete_ce(logits, targets, batch.mask)


def objective(model: DiffusionTransformerPolicy, schedule: NoiseSchedule, batch: Batch,
              generator: Optional[torch.Generator] = None) -> torch.Tensor:
    if model.is_diffusion:
        return diffusion_loss(model, schedule, batch, generator)
    return discrete_loss(model, batch)


# ==================== OPTIMIZATION ====================

def lr_schedule(step: int, cfg: TrainConfig) -> float:
    """Linear warmup to lr_peak, then half-cycle cosine down to 0 at cfg.steps."""
    if cfg.warmup_steps and step < cfg.warmup_steps:
        return cfg.lr_peak * step / cfg.warmup_steps
    if not cfg.lr_decay:
        return cfg.lr_peak
    progress = (step - cfg.warmup_steps) / max(cfg.steps - cfg.warmup_steps, 1)
    progress = min(max(progress, 0.0), 1.0)
    return cfg.lr_peak * 0.5 * (1.0 + math.cos(math.pi * progress))


def _multiplier(name: str, multipliers: Dict[str, float]) -> Tuple[str, float]:
    match = max((p for p in multipliers if name == p or name.startswith(p + ".")), key=len, default=None)
    return (match, float(multipliers[match])) if match is not None else ("", 1.0)


def param_groups(model: torch.nn.Module, cfg: TrainConfig) -> List[dict]:
    """AdamW groups keyed by (lr multiplier prefix, decay); vectors are not decayed."""
    for prefix in cfg.lr_multipliers:
        if prefix.split(".", 1)[0] not in PARAM_GROUPS:
            raise InvalidRangeError(f"lr_multipliers prefix {prefix!r} matches no parameter group")
    groups: Dict[Tuple[str, bool], dict] = {}
    for name, p in model.named_parameters():
        if not p.requires_grad:
            continue
        prefix, mult = _multiplier(name, cfg.lr_multipliers)
        decay = p.dim() >= 2
        key = (prefix, decay)
        if key not in groups:
            groups[key] = {
                "params": [], "names": [], "lr": cfg.lr_peak * mult,
                "weight_decay": cfg.weight_decay if decay else 0.0,
            }
        groups[key]["params"].append(p)
        groups[key]["names"].append(name)
    return list(groups.values())


def make_optimizer(model: torch.nn.Module, cfg: TrainConfig):
    optimizer = torch.optim.AdamW(param_groups(model, cfg), lr=cfg.lr_peak, betas=cfg.betas, eps=1e-8)
    scheduler = torch.optim.lr_scheduler.LambdaLR(optimizer, lambda s: lr_schedule(s, cfg) / cfg.lr_peak)
    return optimizer, scheduler


def derive_seeds(seed: int) -> Dict[str, int]:
    children = np.random.SeedSequence(seed).spawn(4)
    names = ("init", "data", "noise", "augment")
    return {name: int(child.generate_state(1)[0]) for name, child in zip(names, children)}


# ==================== LOOP ====================

class MetricsLog:
    """Append-only `step,loss,lr,wall_ms` CSV, flushed every few steps."""

    def __init__(self, path: Optional[Path]):
        self.path = Path(path) if path else None
        self.rows: List[dict] = []
        self._pending: List[dict] = []
        if self.path is not None:
            try:
                self.path.parent.mkdir(parents=True, exist_ok=True)
                pd.DataFrame(columns=METRIC_COLUMNS).to_csv(self.path, index=False, lineterminator="\n")
            except OSError as exc:
                raise DatasetIOError(f"cannot write metrics log {self.path}: {exc}") from exc

    def append(self, **row) -> None:
        self.rows.append(row)
        self._pending.append(row)

    def flush(self) -> None:
        if self.path is None or not self._pending:
            return
        try:
            pd.DataFrame(self._pending, columns=METRIC_COLUMNS).to_csv(
                self.path, mode="a", header=False, index=False, lineterminator="\n")
        except OSError as exc:
            raise DatasetIOError(f"cannot append to metrics log {self.path}: {exc}") from exc
        self._pending = []

    def frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.rows, columns=METRIC_COLUMNS)


@torch.no_grad()
def validation_loss(model: DiffusionTransformerPolicy, schedule: NoiseSchedule, dataset: ChunkDataset,
                    batch_size: int, n_batches: int, seed: int) -> float:
    generator = torch.Generator().manual_seed(seed)
    batches = dataset.batches(batch_size, generator)
    losses = [float(objective(model, schedule, next(batches), generator)) for _ in range(n_batches)]
    return float(np.mean(losses))


def train(cfg: TrainConfig, dataset: LoadedDataset, base_model: Optional[ModelConfig] = None,
          out: Optional[Path] = None, metrics_path: Optional[Path] = None) -> TrainResult:
    """Train a policy on `dataset`; writes the checkpoint to `out` when given."""
    from .checkpoint import save_checkpoint

    torch.set_num_threads(max(int(cfg.workers), 1))
    seeds = derive_seeds(cfg.seed)
    torch.manual_seed(cfg.seed)

    model_config = cfg.model_config(
        base_model or ModelConfig(), vocab=dataset.vocab_words, image_size=dataset.image_size,
    )
    model = build_policy(model_config, seed=seeds["init"])
    model.train()
    schedule = make_noise_schedule(model_config.T_train, model_config.beta_start, model_config.beta_end)

    train_set, val_set = make_datasets(dataset, model.vocab, model_config.n_frames, model_config.H,
                                       model_config.n_lang)
    logger.info(
        "Training %s head: %d parameters, %d train samples, %d validation samples",
        model_config.head_kind, count_parameters(model, trainable_only=True),
        len(train_set), len(val_set) if val_set else 0,
    )

    optimizer, scheduler = make_optimizer(model, cfg)
    data_gen = torch.Generator().manual_seed(seeds["data"])
    noise_gen = torch.Generator().manual_seed(seeds["noise"])
    augment_gen = torch.Generator().manual_seed(seeds["augment"])
    batches = train_set.batches(cfg.batch_size, data_gen)
    log = MetricsLog(metrics_path)

    loss_value = float("nan")
    start = time.perf_counter()
    for step in range(cfg.steps):
        batch = next(batches)
        if cfg.augment_brightness > 0:
            batch = replace(batch, frames=augment_brightness(batch.frames, cfg.augment_brightness, augment_gen))
        lr = lr_schedule(step, cfg)

        loss = objective(model, schedule, batch, noise_gen)
        optimizer.zero_grad(set_to_none=True)
        loss.backward()
        if cfg.grad_clip > 0:
            torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
        optimizer.step()
        scheduler.step()

        loss_value = float(loss.detach())
        log.append(step=step, loss=loss_value, lr=lr, wall_ms=round((time.perf_counter() - start) * 1000.0, 3))
        if (step + 1) % cfg.log_every == 0 or step == cfg.steps - 1:
            log.flush()
            logger.info("step %d/%d loss %.5f lr %.3e", step + 1, cfg.steps, loss_value, lr)

    model.eval()
    val_loss = None
    if val_set is not None and cfg.val_batches > 0:
        val_loss = validation_loss(model, schedule, val_set, cfg.batch_size, cfg.val_batches, seeds["noise"])
        logger.info("Validation loss %.5f", val_loss)

    checkpoint = None
    if out is not None:
        checkpoint = save_checkpoint(out, model, cfg.to_dict(), dataset.norm_stats)
        logger.info("Checkpoint written to %s", checkpoint)
    if metrics_path is not None:
        summary = {
            "final_loss": loss_value, "val_loss": val_loss, "steps": cfg.steps,
            "parameters": count_parameters(model, trainable_only=True),
        }
        atomic_write_text(Path(metrics_path).with_suffix(".summary.json"), dump_json(summary) + "\n")

    return TrainResult(model=model, model_config=model_config, final_loss=loss_value,
                       val_loss=val_loss, metrics=log.frame(), checkpoint=checkpoint)
