"""Self-supervised pre-training.

Backbone: self-distillation between a student and an EMA teacher over
multi-crop views (two global, two local).  Encoder: binary prediction of
whether the visit embeddings of a sequence were shuffled.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .augment import AugmentConfig, multi_crop, sequence_view
from .backbone import Backbone, init_weights
from .encoder import HCCNet, compute_time_deltas
from .train import OptimizerConfig, adamw_step, make_optimizer
from .volumes import LabeledSequence, StudyVisit


@dataclass(frozen=True)
class DinoHeadConfig:
    hidden_dim: int = 2048
    bottleneck_dim: int = 256
    out_dim: int = 1024
    student_temp: float = 0.1
    teacher_temp: float = 0.04
    center_momentum: float = 0.9
    ema_momentum: float = 0.9995

    def __post_init__(self):
        if self.out_dim < 2:
            raise ValueError("need at least two prototypes")
        if not 0 < self.teacher_temp < self.student_temp:
            raise ValueError("need 0 < teacher_temp < student_temp")


class DinoHead(nn.Module):
    """3-layer MLP with L2 normalisation feeding a weight-normalised prototype layer."""

    def __init__(self, in_dim: int, cfg: DinoHeadConfig = DinoHeadConfig()):
        super().__init__()
        self.mlp = nn.Sequential(
            nn.Linear(in_dim, cfg.hidden_dim),
            nn.GELU(),
            nn.Linear(cfg.hidden_dim, cfg.hidden_dim),
            nn.GELU(),
            nn.Linear(cfg.hidden_dim, cfg.bottleneck_dim),
        )
        # direction only; the per-prototype gain is fixed to 1
        self.prototypes = nn.Parameter(torch.zeros(cfg.out_dim, cfg.bottleneck_dim))

    def forward(self, x):
        z = F.normalize(self.mlp(x), dim=-1)
        return z @ F.normalize(self.prototypes, dim=-1).t()


class DinoNet(nn.Module):
    def __init__(self, backbone: Backbone, head: DinoHead):
        super().__init__()
        self.backbone = backbone
        self.head = head

    def forward(self, x):
        return self.head(self.backbone(x))


def dino_head_forward(embedding: torch.Tensor, head: DinoHead, temperature: float) -> torch.Tensor:
    return F.softmax(head(embedding) / temperature, dim=-1)


def dino_loss(
    student_logits: Sequence[torch.Tensor],
    teacher_logits: Sequence[torch.Tensor],
    center: torch.Tensor,
    student_temp: float = 0.1,
    teacher_temp: float = 0.04,
) -> torch.Tensor:
    """Mean cross-entropy over (teacher global i, student view j != i) pairs.

    ``student_logits`` lists all views with the global ones first, in the same
    order as ``teacher_logits``.
    """
    if len(teacher_logits) < 1 or len(student_logits) < len(teacher_logits):
        raise ValueError(
            f"need student views ({len(student_logits)}) to include the "
            f"{len(teacher_logits)} teacher views"
        )
    targets = [F.softmax((t.detach() - center) / teacher_temp, dim=-1) for t in teacher_logits]
    log_probs = [F.log_softmax(s / student_temp, dim=-1) for s in student_logits]
    total, pairs = 0.0, 0
    for i, q in enumerate(targets):
        for j, logp in enumerate(log_probs):
            if j == i:
                continue
            total = total + torch.sum(-q * logp, dim=-1).mean()
            pairs += 1
    return total / pairs


@torch.no_grad()
def teacher_ema_update(teacher: nn.Module, student: nn.Module, m: float) -> None:
    """``theta_t <- m * theta_t + (1 - m) * theta_s`` for every parameter."""
    for pt, ps in zip(teacher.parameters(), student.parameters()):
        if pt.shape != ps.shape:
            raise ValueError("teacher and student parameter shapes differ")
        pt.mul_(m).add_(ps.detach(), alpha=1.0 - m)


def ema_momentum(step: int, total: int, base: float = 0.9995) -> float:
    """Cosine ascent from ``base`` at step 0 to 1 at ``total``."""
    if total <= 0:
        return 1.0
    return 1.0 - (1.0 - base) * 0.5 * (1.0 + math.cos(math.pi * min(step, total) / total))


@torch.no_grad()
def update_center(center: torch.Tensor, teacher_logits: torch.Tensor, momentum: float = 0.9) -> torch.Tensor:
    center.mul_(momentum).add_(teacher_logits.mean(dim=0), alpha=1.0 - momentum)
    return center


class DinoState:
    """Student with its EMA teacher, plus the centre and optimiser state, for backbone pre-training."""

    def __init__(self, backbone: Backbone, head_cfg: DinoHeadConfig, opt_cfg: OptimizerConfig, seed: int = 0):
        head = DinoHead(backbone.embed_dim, head_cfg)
        init_weights(head, seed + 7919)
        self.head_cfg = head_cfg
        self.opt_cfg = opt_cfg
        self.student = DinoNet(backbone, head)
        self.teacher = copy.deepcopy(self.student)
        for p in self.teacher.parameters():
            p.requires_grad_(False)
        dtype = next(backbone.parameters()).dtype
        self.center = torch.zeros(head_cfg.out_dim, dtype=dtype)
        self.optimizer = make_optimizer(self.student, opt_cfg)
        self.step = 0


def pretrain_backbone_step(
    views: Sequence[tuple], state: DinoState, lr: float, wd: float, momentum: float
) -> float:
    """One step on a batch of ``(globals, locals)`` view tuples of single-channel volumes."""
    n_global = len(views[0][0])
    dtype = state.center.dtype

    def stack(k, which):
        return torch.from_numpy(np.stack([v[which][k].data for v in views])).to(dtype)

    globals_ = [stack(k, 0) for k in range(n_global)]
    locals_ = [stack(k, 1) for k in range(len(views[0][1]))]
    B = len(views)

    state.student.train()
    s_global = state.student(torch.cat(globals_)).split(B)
    s_local = state.student(torch.cat(locals_)).split(B) if locals_ else ()
    with torch.no_grad():
        t_out = state.teacher(torch.cat(globals_))
    t_global = t_out.split(B)

    cfg = state.head_cfg
    loss = dino_loss(list(s_global) + list(s_local), t_global, state.center, cfg.student_temp, cfg.teacher_temp)
    state.optimizer.zero_grad(set_to_none=False)
    loss.backward()
    adamw_step(state.optimizer, lr, wd, state.opt_cfg.clip)
    teacher_ema_update(state.teacher, state.student, momentum)
    update_center(state.center, t_out, cfg.center_momentum)
    state.step += 1
    return loss.item()


def sample_dino_views(visits: Sequence[StudyVisit], rng: np.random.Generator, cfg: AugmentConfig):
    return [multi_crop(v, rng, cfg) for v in visits]


# ---------------------------------------------------------------------------
# sequence-order prediction

SHUFFLE_PROB = 2.0 / 3.0


@dataclass
class SopSample:
    embeddings: torch.Tensor  # (n, H), possibly permuted
    deltas: np.ndarray  # true chronological order, cls slot first
    permutation: np.ndarray
    label: int


def random_nonidentity_permutation(n: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform draw from the ``n! - 1`` non-identity permutations."""
    ident = np.arange(n)
    while True:
        p = rng.permutation(n)
        if not np.array_equal(p, ident):
            return p


def make_sop_batch(sequences, rng: np.random.Generator, shuffle_prob: float = SHUFFLE_PROB) -> list[SopSample]:
    """Shuffle visit embeddings (never the slot-wise time encodings).

    ``sequences`` holds ``(embeddings, deltas)`` pairs.  Single-visit
    sequences are always negatives.
    """
    out = []
    for emb, deltas in sequences:
        n = emb.shape[0]
        perm = np.arange(n)
        label = 0
        if n >= 2 and rng.random() < shuffle_prob:
            perm = random_nonidentity_permutation(n, rng)
            label = 1
        out.append(SopSample(emb[torch.from_numpy(perm)], np.asarray(deltas), perm, label))
    return out


def sop_loss(logits: torch.Tensor, labels) -> torch.Tensor:
    labels = torch.as_tensor(labels, dtype=logits.dtype)
    return F.binary_cross_entropy_with_logits(logits, labels)


def freeze_backbone(model: HCCNet) -> None:
    for p in model.backbone.parameters():
        p.requires_grad_(False)


@torch.no_grad()
def embed_sequences(
    backbone: Backbone,
    sequences: Sequence[LabeledSequence],
    rng: np.random.Generator,
    crop: int,
    augment: AugmentConfig,
    dtype=torch.float32,
):
    """Frozen-backbone embeddings of one augmented multi-channel crop per visit."""
    backbone.eval()
    vols, lengths = [], []
    for seq in sequences:
        for visit in seq.visits:
            vols.append(sequence_view(visit, crop, augment, rng).data)
        lengths.append(len(seq.visits))
    emb = backbone(torch.from_numpy(np.stack(vols)).to(dtype))
    chunks = torch.split(emb, lengths)
    return [(c, compute_time_deltas(s)) for c, s in zip(chunks, sequences)]


def pretrain_encoder_step(
    samples: Sequence[SopSample],
    model: HCCNet,
    optimizer: torch.optim.Optimizer,
    lr: float,
    wd: float,
    clip: Optional[float] = 1.0,
) -> float:
    """One order-prediction update of encoder + pooler; the backbone stays frozen."""
    model.encoder.train()
    model.pooler.train()
    emb = torch.cat([s.embeddings for s in samples])
    logits = model.pooler(model.encode(emb, [len(s.permutation) for s in samples], [s.deltas for s in samples]))
    loss = sop_loss(logits, [s.label for s in samples])
    optimizer.zero_grad(set_to_none=False)
    loss.backward()
    adamw_step(optimizer, lr, wd, clip)
    return loss.item()


def encoder_parameters(model: HCCNet) -> nn.ModuleDict:
    return nn.ModuleDict({"encoder": model.encoder, "pooler": model.pooler})
