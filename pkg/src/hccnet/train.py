"""Optimisation: LR/WD schedules, grouped AdamW, class-balanced BCE, fine-tuning runs."""

from __future__ import annotations

import csv
import logging
import math
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence, Union

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .augment import AugmentConfig, central_crop, sequence_view, stack_series
from .backbone import decay_eligible, inflate_stem_weight
from .checkpoint import CheckpointManifest, apply_tensors, save_checkpoint
from .encoder import HCCNet, build_model, compute_time_deltas
from .volumes import LabeledSequence

log = logging.getLogger(__name__)

REFERENCE_BATCH = 128


@dataclass(frozen=True)
class OptimizerConfig:
    base_lr: float = 1e-4  # scaling factor alpha
    batch_size: int = 32
    warmup: int = 20
    steps: int = 400
    min_lr: float = 1e-6
    weight_decay: float = 1e-5
    weight_decay_end: float = 1e-5
    wd_schedule: str = "constant"  # or "cosine"
    clip: float = 3.0
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    accum_steps: int = 1

    def __post_init__(self):
        if not 0 <= self.warmup <= self.steps:
            raise ValueError(f"need 0 <= warmup ({self.warmup}) <= steps ({self.steps})")
        if self.clip <= 0:
            raise ValueError("clip must be positive")
        if self.batch_size < 1 or self.accum_steps < 1 or self.batch_size % self.accum_steps:
            raise ValueError("batch_size must be a positive multiple of accum_steps")
        if self.wd_schedule not in ("constant", "cosine"):
            raise ValueError(f"unknown wd_schedule {self.wd_schedule!r}")

    @property
    def peak_lr(self) -> float:
        return scaled_base_lr(self.base_lr, self.batch_size)


def scaled_base_lr(alpha: float, batch_size: int) -> float:
    """Square-root scaling relative to a batch of 128."""
    if batch_size < 1:
        raise ValueError("batch size must be >= 1")
    return alpha * math.sqrt(batch_size / REFERENCE_BATCH)


def _cosine(progress: float) -> float:
    return 0.5 * (1.0 + math.cos(math.pi * progress))


def lr_at_step(step: int, cfg: OptimizerConfig) -> float:
    """Linear warmup to the scaled peak, then cosine decay to ``min_lr``."""
    if not 0 <= step <= cfg.steps:
        raise ValueError(f"step {step} outside [0, {cfg.steps}]")
    peak = cfg.peak_lr
    if step < cfg.warmup:
        return peak * step / cfg.warmup
    span = cfg.steps - cfg.warmup
    c = _cosine((step - cfg.warmup) / span) if span else 0.0
    return peak * c + cfg.min_lr * (1.0 - c)


def wd_at_step(step: int, cfg: OptimizerConfig) -> float:
    if not 0 <= step <= cfg.steps:
        raise ValueError(f"step {step} outside [0, {cfg.steps}]")
    if cfg.wd_schedule == "constant":
        return cfg.weight_decay
    c = _cosine(step / cfg.steps) if cfg.steps else 1.0
    return cfg.weight_decay * c + cfg.weight_decay_end * (1.0 - c)


# ---------------------------------------------------------------------------
# optimiser


def make_optimizer(module: nn.Module, cfg: OptimizerConfig) -> torch.optim.AdamW:
    """AdamW with a decayed group (conv/linear weights) and an undecayed one."""
    decay, no_decay = [], []
    for name, p in module.named_parameters():
        if not p.requires_grad:
            continue
        (decay if decay_eligible(name, p) else no_decay).append(p)
    groups = [
        {"params": decay, "decay": True},
        {"params": no_decay, "decay": False, "weight_decay": 0.0},
    ]
    return torch.optim.AdamW(groups, lr=0.0, betas=cfg.betas, eps=cfg.eps, weight_decay=0.0)


def adamw_step(optimizer: torch.optim.Optimizer, lr: float, wd: float, clip: Optional[float]) -> float:
    """Clip by global norm, then one decoupled-weight-decay Adam update.

    Returns the gradient norm measured before clipping.
    """
    params = [p for g in optimizer.param_groups for p in g["params"] if p.grad is not None]
    for group in optimizer.param_groups:
        group["lr"] = lr
        group["weight_decay"] = wd if group.get("decay", True) else 0.0
    if clip is not None and params:
        norm = float(torch.nn.utils.clip_grad_norm_(params, clip))
    else:
        norm = float(torch.norm(torch.stack([p.grad.norm() for p in params]))) if params else 0.0
    optimizer.step()
    return norm


# ---------------------------------------------------------------------------
# losses


def smooth_targets(labels: torch.Tensor, smoothing: float) -> torch.Tensor:
    return labels * (1.0 - smoothing) + smoothing / 2.0


def class_balanced_bce(probs, labels, pos_weight: float = 1.0, smoothing: float = 0.0) -> torch.Tensor:
    """Mean of ``-[w * y~ * ln p + (1 - y~) * ln(1 - p)]`` over the batch."""
    p = probs if torch.is_tensor(probs) else torch.as_tensor(probs, dtype=torch.float64)
    y = torch.as_tensor(labels, dtype=p.dtype)
    if p.numel() == 0:
        raise ValueError("empty batch")
    y = smooth_targets(y, smoothing)
    return -(pos_weight * y * torch.log(p) + (1 - y) * torch.log1p(-p)).mean()


def class_balanced_bce_with_logits(logits, labels, pos_weight: float = 1.0, smoothing: float = 0.0):
    if logits.numel() == 0:
        raise ValueError("empty batch")
    y = smooth_targets(torch.as_tensor(labels, dtype=logits.dtype), smoothing)
    return -(pos_weight * y * F.logsigmoid(logits) + (1 - y) * F.logsigmoid(-logits)).mean()


def resolve_pos_weight(weight: Union[str, float], labels: Sequence[int]) -> float:
    if weight != "auto":
        w = float(weight)
        if w <= 0:
            raise ValueError("positive-class weight must be > 0")
        return w
    labels = np.asarray(labels)
    n_pos = int((labels == 1).sum())
    if n_pos == 0:
        warnings.warn("no positives in the training split; using pos_weight=1", RuntimeWarning)
        return 1.0
    return float((labels == 0).sum()) / n_pos


# ---------------------------------------------------------------------------
# data sources


class VolumeSequences:
    """Labeled visit sequences rendered to multi-channel crops on demand."""

    def __init__(self, sequences: Sequence[LabeledSequence], crop: int, augment: AugmentConfig):
        self.sequences = list(sequences)
        self.crop = crop
        self.augment = augment

    def __len__(self):
        return len(self.sequences)

    @property
    def labels(self) -> list[int]:
        return [s.label for s in self.sequences]

    def batch(self, indices, rng: Optional[np.random.Generator], dtype=torch.float32):
        vols, lengths, deltas, labels = [], [], [], []
        for i in indices:
            seq = self.sequences[i]
            for visit in seq.visits:
                if rng is None:
                    v = central_crop(stack_series(visit), self.crop)
                else:
                    v = sequence_view(visit, self.crop, self.augment, rng)
                vols.append(v.data)
            lengths.append(len(seq.visits))
            deltas.append(compute_time_deltas(seq))
            labels.append(seq.label)
        x = torch.from_numpy(np.stack(vols)).to(dtype)
        return x, lengths, deltas, torch.tensor(labels, dtype=dtype)


class EmbeddingSequences:
    """Sequences of precomputed visit embeddings ``(n_i, H)``."""

    def __init__(self, embeddings: Sequence[torch.Tensor], deltas: Sequence, labels: Sequence[int]):
        self.embeddings = list(embeddings)
        self.deltas = [np.asarray(d, dtype=np.float64) for d in deltas]
        self._labels = [int(y) for y in labels]

    def __len__(self):
        return len(self.embeddings)

    @property
    def labels(self) -> list[int]:
        return self._labels

    def batch(self, indices, rng=None, dtype=torch.float32):
        x = torch.cat([self.embeddings[i] for i in indices]).to(dtype)
        return (
            x,
            [self.embeddings[i].shape[0] for i in indices],
            [self.deltas[i] for i in indices],
            torch.tensor([self._labels[i] for i in indices], dtype=dtype),
        )


class EpochSampler:
    """Shuffled passes over the dataset, drawn ``batch_size`` at a time."""

    def __init__(self, n: int, rng: np.random.Generator):
        self.n, self.rng, self._queue = n, rng, []

    def take(self, k: int) -> list[int]:
        out = []
        while len(out) < k:
            if not self._queue:
                self._queue = self.rng.permutation(self.n).tolist()
            out.append(self._queue.pop())
        return out


# ---------------------------------------------------------------------------
# fine-tuning


@dataclass(frozen=True)
class FinetuneConfig:
    variant: str = "P"
    channels: Optional[int] = None
    input_channels: int = 4
    steps: int = 400
    warmup: int = 20
    batch_size: int = 32
    base_lr: float = 1e-4
    min_lr: float = 1e-6
    weight_decay: float = 1e-5
    clip: float = 3.0
    label_smoothing: float = 0.1
    dropout: float = 0.2
    pos_weight: Union[str, float] = "auto"
    seeds: tuple[int, ...] = tuple(range(10))
    max_len: int = 8
    crop: int = 72
    accum_steps: int = 1

    def optimizer(self) -> OptimizerConfig:
        return OptimizerConfig(
            base_lr=self.base_lr,
            batch_size=self.batch_size,
            warmup=self.warmup,
            steps=self.steps,
            min_lr=self.min_lr,
            weight_decay=self.weight_decay,
            weight_decay_end=self.weight_decay,
            wd_schedule="constant",
            clip=self.clip,
            accum_steps=self.accum_steps,
        )


@dataclass
class RunResult:
    seed: int
    checkpoint: Optional[Path]
    losses: list[float] = field(default_factory=list)
    model: Optional[HCCNet] = None


def write_loss_log(path, rows) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "loss", "lr", "wd"])
        w.writerows(rows)


def stem_adapter(name, tensor, shape):
    if name.endswith("stem.conv.weight") and tensor.shape[0] == shape[0] and tensor.shape[2:] == shape[2:]:
        return inflate_stem_weight(tensor, shape[1])
    return tensor


def train_classifier(
    model: HCCNet,
    data,
    opt: OptimizerConfig,
    seed: int,
    pos_weight: float,
    smoothing: float,
    dtype=torch.float32,
    on_step: Optional[Callable[[int, float], None]] = None,
) -> list[tuple]:
    """Minimise class-balanced BCE over ``opt.steps`` steps; returns loss-log rows."""
    rng = np.random.default_rng([seed, 1])
    torch.manual_seed(seed)
    sampler = EpochSampler(len(data), rng)
    optimizer = make_optimizer(model, opt)
    micro = opt.batch_size // opt.accum_steps
    rows = []
    model.train()
    for step in range(opt.steps):
        lr, wd = lr_at_step(step + 1, opt), wd_at_step(step + 1, opt)
        optimizer.zero_grad(set_to_none=False)
        total = 0.0
        for _ in range(opt.accum_steps):
            x, lengths, deltas, y = data.batch(sampler.take(micro), rng, dtype)
            logits = model(x, lengths, deltas)
            loss = class_balanced_bce_with_logits(logits, y, pos_weight, smoothing) / opt.accum_steps
            loss.backward()
            total += loss.item()
        adamw_step(optimizer, lr, wd, opt.clip)
        rows.append((step + 1, total, lr, wd))
        if on_step is not None:
            on_step(step + 1, total)
    model.eval()
    return rows


def run_finetune(
    cfg: FinetuneConfig,
    data,
    init: str = "pretrained",
    pretrained: Optional[dict] = None,
    out_dir=None,
    stage: Optional[str] = None,
    config_snapshot: Optional[dict] = None,
    dtype=torch.float32,
    keep_models: bool = False,
) -> list[RunResult]:
    """Train one model per seed; ``init`` is ``"pretrained"`` or ``"random"``."""
    if init not in ("pretrained", "random"):
        raise ValueError(f"init must be 'pretrained' or 'random', got {init!r}")
    if init == "pretrained" and not pretrained:
        raise FileNotFoundError("pretrained initialisation requested without pretrained tensors")
    stage = stage or ("finetune" if init == "pretrained" else "baseline")
    pos_weight = resolve_pos_weight(cfg.pos_weight, data.labels)
    opt = cfg.optimizer()
    results = []
    for seed in cfg.seeds:
        model = build_model(
            cfg.variant, cfg.input_channels, init_seed=seed, channels=cfg.channels,
            dropout=cfg.dropout, max_len=cfg.max_len,
        ).to(dtype)
        if init == "pretrained":
            # the classification layer is task specific and stays freshly initialised
            apply_tensors(model, pretrained, exclude=("pooler.classifier.",), adapt=stem_adapter)
        rows = train_classifier(model, data, opt, seed, pos_weight, cfg.label_smoothing, dtype)
        ckpt = None
        if out_dir is not None:
            out = Path(out_dir)
            manifest = CheckpointManifest(
                variant=cfg.variant, stage=stage, step=cfg.steps, seed=seed,
                config={"finetune": _jsonable(asdict(cfg)), "pos_weight": pos_weight, **(config_snapshot or {})},
            )
            ckpt = save_checkpoint(model, manifest, out / f"seed{seed:02d}.ckpt")
            write_loss_log(out / f"seed{seed:02d}_loss.csv", rows)
        log.info("%s seed %d: final loss %.4f", stage, seed, rows[-1][1] if rows else float("nan"))
        results.append(RunResult(seed, ckpt, [r[1] for r in rows], model if keep_models else None))
    return results


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    return obj


@torch.no_grad()
def predict(model: HCCNet, data, batch_size: int = 8, dtype=torch.float32) -> np.ndarray:
    """Eval-mode probabilities using central crops (``rng=None``)."""
    model.eval()
    out = []
    for start in range(0, len(data), batch_size):
        idx = list(range(start, min(start + batch_size, len(data))))
        x, lengths, deltas, _ = data.batch(idx, None, dtype)
        out.append(model.predict_proba(x, lengths, deltas).double().numpy())
    return np.concatenate(out) if out else np.zeros(0)
