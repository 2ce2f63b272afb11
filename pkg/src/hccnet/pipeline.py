"""Stage orchestration shared by the CLI and the end-to-end checks.

Directory layout below ``cfg["out"]``::

    cohort/manifest.json, cohort/volumes/*.lsv
    checkpoints/backbone.ckpt, checkpoints/encoder.ckpt
    checkpoints/{finetune,baseline}/seedNN.ckpt (+ seedNN_loss.csv)
    report/{finetune,baseline}/metrics.json ..., report/comparison.tsv
"""

from __future__ import annotations

import csv
import hashlib
import logging
from collections import Counter
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from .augment import AugmentConfig
from .backbone import BackboneConfig, Backbone, VARIANTS, init_weights
from .checkpoint import (
    CheckpointError,
    CheckpointManifest,
    apply_tensors,
    load_checkpoint,
    save_checkpoint,
    select_prefix,
)
from .config import synthetic_config
from .encoder import build_model
from .metrics import PredictionSet, aggregate_runs, cumulative_gain_mae, evaluate_predictions, reliability
from .pretrain import (
    DinoHeadConfig,
    DinoState,
    ema_momentum,
    embed_sequences,
    freeze_backbone,
    make_sop_batch,
    pretrain_backbone_step,
    pretrain_encoder_step,
    sample_dino_views,
)
from .report import comparison_table, emit_report, format_table, read_metrics_json
from .train import (
    EpochSampler,
    FinetuneConfig,
    OptimizerConfig,
    VolumeSequences,
    lr_at_step,
    make_optimizer,
    predict,
    run_finetune,
    stem_adapter,
    wd_at_step,
    write_loss_log,
)
from .volumes import finetune_sequences, generate_cohort, load_cohort, pretrain_sequence, save_cohort, split_dataset

log = logging.getLogger(__name__)


class MissingDependencyError(RuntimeError):
    pass


class VariantMismatchError(RuntimeError):
    pass


def paths(cfg: dict) -> dict[str, Path]:
    out = Path(cfg["out"])
    return {
        "cohort": out / "cohort",
        "ckpt": out / "checkpoints",
        "backbone": out / "checkpoints" / "backbone.ckpt",
        "encoder": out / "checkpoints" / "encoder.ckpt",
        "finetune": out / "checkpoints" / "finetune",
        "baseline": out / "checkpoints" / "baseline",
        "report": out / "report",
    }


def _augment(cfg: dict, **kw) -> AugmentConfig:
    a = cfg["augment"]
    return AugmentConfig(
        p_flip=a["p_flip"], p_rot90=a["p_rot90"], p_intensity=a["p_intensity"],
        scale_range=tuple(a["scale_range"]), shift_range=tuple(a["shift_range"]), **kw,
    )


def _opt(section: dict, wd_schedule: str) -> OptimizerConfig:
    return OptimizerConfig(
        base_lr=section["base_lr"], batch_size=section["batch_size"], warmup=section["warmup"],
        steps=section["steps"], min_lr=section["min_lr"], weight_decay=section["weight_decay"],
        weight_decay_end=section.get("weight_decay_end", section["weight_decay"]),
        wd_schedule=wd_schedule, clip=section["clip"], accum_steps=section.get("accum_steps", 1),
    )


def _manifest(cfg: dict, stage: str, step: int, seed: int) -> CheckpointManifest:
    return CheckpointManifest(
        variant=cfg["variant"], stage=stage, step=step, seed=seed,
        config={"resolved": cfg, "channels": cfg["channels"]},
    )


def _require(path: Path, stage: str, cfg: dict):
    """Load a dependency checkpoint and check it matches the configured variant."""
    if not path.exists():
        raise MissingDependencyError(f"missing {stage} checkpoint at {path}; run `{stage}` first")
    tensors, manifest = load_checkpoint(path)
    if manifest.variant != cfg["variant"] or manifest.config.get("channels") != cfg["channels"]:
        raise VariantMismatchError(
            f"{path} was trained for variant {manifest.variant} (channels={manifest.config.get('channels')}), "
            f"config requests {cfg['variant']} (channels={cfg['channels']})"
        )
    return tensors, manifest


def load_split(cfg: dict):
    records = load_cohort(paths(cfg)["cohort"])
    return split_dataset(records, cfg["split"]["dev_fraction"], cfg["seed"])


# ---------------------------------------------------------------------------
# stages


def gen_data(cfg: dict) -> dict:
    syn = synthetic_config(cfg)
    records = generate_cohort(syn)
    manifest = save_cohort(records, paths(cfg)["cohort"])
    hist = Counter(len(r.visits) for r in records)
    summary = {
        "patients": len(records),
        "positives": sum(r.diagnosis_date is not None for r in records),
        "visit_histogram": dict(sorted(hist.items())),
        "manifest": str(manifest),
        "manifest_sha256": hashlib.sha256(manifest.read_bytes()).hexdigest(),
    }
    return summary


def pretrain_backbone(cfg: dict) -> Path:
    sec = cfg["backbone_pretrain"]
    seed = cfg["seed"]
    dev, _ = load_split(cfg)
    visits = [v for r in dev for v in r.visits]
    v = VARIANTS[cfg["variant"]]
    backbone = Backbone(BackboneConfig(cfg["channels"] or v.channels, v.blocks, 1))
    init_weights(backbone, seed)
    torch.manual_seed(seed)
    head_cfg = DinoHeadConfig(
        hidden_dim=sec["hidden_dim"], bottleneck_dim=sec["bottleneck_dim"], out_dim=sec["out_dim"],
        student_temp=sec["student_temp"], teacher_temp=sec["teacher_temp"],
        center_momentum=sec["center_momentum"], ema_momentum=sec["ema_momentum"],
    )
    opt = _opt(sec, "cosine")
    state = DinoState(backbone, head_cfg, opt, seed)
    aug = _augment(cfg, global_crop=sec["global_crop"], local_crop=sec["local_crop"])
    rng = np.random.default_rng([seed, 2])
    sampler = EpochSampler(len(visits), rng)
    rows = []
    for step in range(1, opt.steps + 1):
        lr, wd = lr_at_step(step, opt), wd_at_step(step, opt)
        m = ema_momentum(step - 1, opt.steps, head_cfg.ema_momentum)
        views = sample_dino_views([visits[i] for i in sampler.take(opt.batch_size)], rng, aug)
        loss = pretrain_backbone_step(views, state, lr, wd, m)
        rows.append((step, loss, lr, wd, m))
        if step % 50 == 0 or step == opt.steps:
            log.info("backbone step %d/%d loss %.4f", step, opt.steps, loss)
    p = paths(cfg)
    tensors = {f"backbone.{k}": t for k, t in state.student.backbone.state_dict().items()}
    tensors.update({f"dino_head.{k}": t for k, t in state.student.head.state_dict().items()})
    tensors["dino_center"] = state.center
    save_checkpoint(tensors, _manifest(cfg, "backbone-pretrain", opt.steps, seed), p["backbone"])
    with open(p["ckpt"] / "backbone_loss.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "loss", "lr", "wd", "ema_m"])
        w.writerows(rows)
    return p["backbone"]


def _series_count(records) -> int:
    return len(records[0].visits[0].series)


def pretrain_encoder(cfg: dict) -> Path:
    p = paths(cfg)
    bb_tensors, _ = _require(p["backbone"], "pretrain-backbone", cfg)
    sec = cfg["encoder_pretrain"]
    seed = cfg["seed"]
    dev, _ = load_split(cfg)
    model = build_model(
        cfg["variant"], _series_count(dev), init_seed=seed, channels=cfg["channels"],
        dropout=sec["dropout"], max_len=sec["max_len"],
    )
    apply_tensors(model, bb_tensors, prefixes=("backbone.",), adapt=stem_adapter)
    freeze_backbone(model)
    opt = _opt(sec, "cosine")
    optimizer = make_optimizer(model, opt)
    aug = _augment(cfg)
    sequences = [pretrain_sequence(r, sec["max_len"]) for r in dev]
    rng = np.random.default_rng([seed, 3])
    torch.manual_seed(seed)
    sampler = EpochSampler(len(sequences), rng)
    rows = []
    for step in range(1, opt.steps + 1):
        lr, wd = lr_at_step(step, opt), wd_at_step(step, opt)
        batch = [sequences[i] for i in sampler.take(opt.batch_size)]
        embedded = embed_sequences(model.backbone, batch, rng, sec["crop"], aug)
        samples = make_sop_batch(embedded, rng, sec["shuffle_prob"])
        loss = pretrain_encoder_step(samples, model, optimizer, lr, wd, opt.clip)
        rows.append((step, loss, lr, wd))
        if step % 50 == 0 or step == opt.steps:
            log.info("encoder step %d/%d loss %.4f", step, opt.steps, loss)
    tensors = select_prefix(model.state_dict(), ("encoder.", "pooler."))
    save_checkpoint(tensors, _manifest(cfg, "encoder-pretrain", opt.steps, seed), p["encoder"])
    write_loss_log(p["ckpt"] / "encoder_loss.csv", rows)
    return p["encoder"]


def _finetune_config(cfg: dict, section: str, input_channels: int) -> FinetuneConfig:
    s = cfg[section]
    return FinetuneConfig(
        variant=cfg["variant"], channels=cfg["channels"], input_channels=input_channels,
        steps=s["steps"], warmup=s["warmup"], batch_size=s["batch_size"], base_lr=s["base_lr"],
        min_lr=s["min_lr"], weight_decay=s["weight_decay"], clip=s["clip"],
        label_smoothing=s["label_smoothing"], dropout=s["dropout"], pos_weight=s["pos_weight"],
        seeds=tuple(cfg["seeds"]), max_len=s["max_len"], crop=s["crop"],
        accum_steps=s.get("accum_steps", 1),
    )


def finetune(cfg: dict, init: str = "pretrained"):
    """Fine-tune from pre-trained weights, or train the baseline from scratch."""
    p = paths(cfg)
    section = "finetune" if init == "pretrained" else "baseline"
    pretrained = None
    if init == "pretrained":
        if not p["backbone"].exists():
            raise MissingDependencyError(f"missing pretrain-backbone checkpoint at {p['backbone']}")
        if not p["encoder"].exists():
            raise MissingDependencyError(f"missing pretrain-encoder checkpoint at {p['encoder']}")
        bb, _ = _require(p["backbone"], "pretrain-backbone", cfg)
        enc, _ = _require(p["encoder"], "pretrain-encoder", cfg)
        pretrained = {**select_prefix(bb, ("backbone.",)), **enc}
    dev, _ = load_split(cfg)
    fcfg = _finetune_config(cfg, section, _series_count(dev))
    data = VolumeSequences(finetune_sequences(dev, fcfg.max_len), fcfg.crop, _augment(cfg))
    if len(data) == 0:
        raise ValueError("no fine-tuning sequences in the development split")
    return run_finetune(
        fcfg, data, init=init, pretrained=pretrained, out_dir=p[section], stage=section,
        config_snapshot={"resolved": cfg, "channels": cfg["channels"]},
    )


def _checkpoints(directory: Path) -> list[Path]:
    return sorted(directory.glob("seed*.ckpt"))


def evaluate(cfg: dict, stages: Sequence[str] = ("finetune", "baseline")) -> dict[str, Path]:
    p = paths(cfg)
    ev = cfg["evaluate"]
    _, test = load_split(cfg)
    seqs = finetune_sequences(test, ev["max_len"])
    if not seqs:
        raise ValueError("test split has no usable sequences")
    data = VolumeSequences(seqs, ev["crop"], _augment(cfg))
    ids = [s.patient_id for s in seqs]
    labels = [s.label for s in seqs]
    written = {}
    for stage in stages:
        ckpts = _checkpoints(p[stage])
        if not ckpts:
            continue
        runs, pooled_s, pooled_y = [], [], []
        for path in ckpts:
            tensors, manifest = load_checkpoint(path)
            if manifest.variant != cfg["variant"] or manifest.config.get("channels") != cfg["channels"]:
                raise VariantMismatchError(f"{path} is variant {manifest.variant}, config says {cfg['variant']}")
            model = build_model(cfg["variant"], _series_count(test), channels=cfg["channels"])
            apply_tensors(model, tensors)
            scores = predict(model, data, ev["batch_size"])
            preds = PredictionSet(scores, labels, ids, manifest.seed)
            m = evaluate_predictions(preds, ev["threshold"], ev["n_bins"])
            m["seed"] = manifest.seed
            runs.append(m)
            pooled_s.append(scores)
            pooled_y.append(labels)
        report = aggregate_runs(runs, label=stage)
        gains = {
            k: cumulative_gain_mae([r[k] for r in runs], ev["gain_normalization"])
            for k in ("auroc", "auprc")
            if all(np.isfinite(r[k]) for r in runs)
        }
        calib = reliability(np.concatenate(pooled_s), np.concatenate(pooled_y), ev["n_bins"])
        files = emit_report(report, gains, calib, p["report"] / stage)
        written[stage] = files["json"]
    if not written:
        raise MissingDependencyError("no fine-tuned or baseline checkpoints found to evaluate")
    return written


def compare(report_paths: Sequence[Path], out: Optional[Path] = None) -> str:
    if len(report_paths) < 2:
        raise ValueError("need at least two reports to compare")
    reports = [read_metrics_json(r) for r in report_paths]
    rows = comparison_table(reports[0], reports[1:])
    table = format_table(rows)
    if out is not None:
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        Path(out).write_text(table + "\n")
    return table


__all__ = [
    "CheckpointError",
    "MissingDependencyError",
    "VariantMismatchError",
    "compare",
    "evaluate",
    "finetune",
    "gen_data",
    "pretrain_backbone",
    "pretrain_encoder",
]
