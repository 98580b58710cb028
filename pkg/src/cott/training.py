"""CoTT objective, optimisation loop and checkpoints."""

from __future__ import annotations

import copy
import io
import json
import logging
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import IO, Mapping, Optional, Sequence

import numpy as np
import torch

from .backend import Backend, BackboneConfig, Vocabulary, reference_backbone
from .contrastive import ProjectionHead, batch_contrastive_loss
from .data import Instance, TaskSpec
from .errors import (
    ConfigError,
    CorruptCheckpoint,
    EmptyDataset,
    NoCounterfactualAvailable,
    VersionMismatch,
)
from .evaluation import micro_macro_f1
from .reasoner import argmax_steps, predict_batch, step_one_batch, step_two_batch

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "cott-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class TrainConfig:
    """Loss weights, schedule and model size. Defaults follow the published
    BERT-scale setting; the tiny reference backbone needs a larger learning
    rate (see ``DESK_SCALE``)."""

    alpha: float = 0.1
    beta: float = 0.1
    tau: float = 1.0
    learning_rate: float = 1e-5
    lr_decay: float = 0.5
    decay_every: int = 2  # epochs
    weight_decay: float = 1e-2
    batch_size: int = 8
    epochs: int = 10
    seed: int = 0
    selection_split: str = "auto"  # "auto" picks dev when present, else train
    condition_on_gold: bool = False  # ablation: step II sees the gold step
    two_step: bool = True  # False gives plain prompt tuning on the step-I head
    hidden_size: int = 32
    num_layers: int = 2
    num_heads: int = 4
    max_length: int = 64

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ConfigError("alpha and beta must be non-negative")
        if not self.tau > 0:
            raise ConfigError("tau must be positive")
        if self.batch_size < 1 or self.epochs < 1 or self.decay_every < 1:
            raise ConfigError("batch_size, epochs and decay_every must be at least 1")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")
        if self.selection_split not in ("auto", "train", "dev"):
            raise ConfigError(f"selection_split must be auto, train or dev, not {self.selection_split!r}")

    def backbone(self) -> BackboneConfig:
        return BackboneConfig(
            hidden_size=self.hidden_size,
            num_layers=self.num_layers,
            num_heads=self.num_heads,
            max_length=self.max_length,
        )

    def replace(self, **changes) -> "TrainConfig":
        return TrainConfig(**{**asdict(self), **changes})

    @classmethod
    def from_mapping(cls, values: Mapping) -> "TrainConfig":
        known = {f.name: f for f in fields(cls)}
        unknown = sorted(set(values) - set(known))
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        typed = {}
        for key, value in values.items():
            default = getattr(cls, key)
            kind = type(default)
            if kind is bool:
                if not isinstance(value, bool):
                    raise ConfigError(f"{key} must be a boolean")
            elif kind is int:
                if isinstance(value, bool) or not isinstance(value, int):
                    raise ConfigError(f"{key} must be an integer")
            elif kind is float:
                if isinstance(value, bool) or not isinstance(value, (int, float)):
                    raise ConfigError(f"{key} must be a number")
                value = float(value)
            elif not isinstance(value, str):
                raise ConfigError(f"{key} must be a string")
            typed[key] = value
        return cls(**typed)


# Settings that let the reference backbone learn the synthetic tasks quickly.
DESK_SCALE = dict(learning_rate=3e-3, batch_size=32, weight_decay=0.0)


def load_config(path) -> TrainConfig:
    try:
        values = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigError(f"cannot read config {path}: {e}") from None
    if not isinstance(values, dict) or any(isinstance(v, (dict, list)) for v in values.values()):
        raise ConfigError("config must be a flat JSON object")
    return TrainConfig.from_mapping(values)


def learning_rate_at(config: TrainConfig, epoch: int) -> float:
    """Step decay; ``epoch`` counts from zero."""
    return config.learning_rate * config.lr_decay ** (epoch // config.decay_every)


# --------------------------------------------------------------------- the loss


def _masked_joint(step_log_probs: Sequence[np.ndarray], hat: Sequence[int]) -> np.ndarray:
    """Counterfactual sampling distribution over the flattened step space,
    computed in log space so a near-certain prediction cannot divide by zero."""
    joint = np.zeros(1)
    for lp in step_log_probs:
        joint = np.add.outer(joint, lp).ravel()
    flat_hat = int(np.ravel_multi_index(tuple(hat), [len(lp) for lp in step_log_probs]))
    joint[flat_hat] = -np.inf
    joint = joint - joint.max()
    p = np.exp(joint)
    return p / p.sum()


def draw_counterfactuals(
    task: TaskSpec,
    step_log_probs: Sequence[torch.Tensor],
    predicted: Sequence[tuple[str, ...]],
    rng: np.random.Generator,
) -> list[Optional[tuple[str, ...]]]:
    if task.joint_size < 2:
        return [None] * len(predicted)
    lps = [lp.detach().cpu().numpy() for lp in step_log_probs]
    shape = [len(s) for s in task.step_sets]
    out = []
    for i, step in enumerate(predicted):
        hat = [task.step_sets[s].index(sym) for s, sym in enumerate(step)]
        p = _masked_joint([lp[i] for lp in lps], hat)
        flat = int(rng.choice(len(p), p=p))
        idx = np.unravel_index(flat, shape)
        out.append(tuple(task.step_sets[s][int(j)] for s, j in enumerate(idx)))
    return out


def batch_loss(
    b: Backend,
    g: ProjectionHead,
    task: TaskSpec,
    instances: Sequence[Instance],
    rng: np.random.Generator,
    config: TrainConfig,
    counterfactuals: Optional[Sequence[Optional[tuple[str, ...]]]] = None,
) -> tuple[torch.Tensor, dict]:
    """Mean CoTT loss over ``instances`` plus per-term diagnostics.

    ``counterfactuals`` pins the negative steps instead of sampling them
    (used for gradient checks).
    """
    n = len(instances)
    out = step_one_batch(b, task, instances)
    rows = torch.arange(n)
    step_nll = torch.zeros(n, dtype=out.h.dtype)
    for s, lp in enumerate(out.step_log_probs):
        gold = torch.tensor([task.step_sets[s].index(x.step[s]) for x in instances])
        step_nll = step_nll - lp[rows, gold]
    gold_y = torch.tensor([task.labels.index(x.label) for x in instances])
    label_nll = -out.label_log_probs[rows, gold_y]

    zeros = torch.zeros(n, dtype=out.h.dtype)
    step2_nll, contrastive = zeros, zeros
    diag = {"counterfactual_evaluations": 0, "counterfactual_unavailable": 0}
    if config.two_step:
        if config.condition_on_gold:
            steps = [tuple(x.step) for x in instances]
        else:
            steps = argmax_steps(task, out.step_log_probs)
        lp2, h2 = step_two_batch(b, task, instances, steps)
        step2_nll = -lp2[rows, gold_y]

        if config.beta > 0:
            if counterfactuals is None:
                counterfactuals = draw_counterfactuals(task, out.step_log_probs, steps, rng)
            keep = [i for i, c in enumerate(counterfactuals) if c is not None]
            diag["counterfactual_unavailable"] = n - len(keep)
            if keep:
                _, h_neg = step_two_batch(
                    b, task, [instances[i] for i in keep], [counterfactuals[i] for i in keep]
                )
                diag["counterfactual_evaluations"] = len(keep)
                idx = torch.tensor(keep)
                lc = batch_contrastive_loss(g, out.h[idx], h2[idx], h_neg, config.tau)
                contrastive = zeros.index_put((idx,), lc)

    per_instance = config.alpha * step_nll + label_nll + config.beta * contrastive + step2_nll
    loss = per_instance.mean()
    diag.update(
        loss=float(loss.detach()),
        step_nll=float(step_nll.detach().mean()),
        label_nll=float(label_nll.detach().mean()),
        step2_nll=float(step2_nll.detach().mean()),
        contrastive=float(contrastive.detach().mean()),
        per_instance=per_instance.detach(),
    )
    return loss, diag


def instance_loss(
    b: Backend,
    g: ProjectionHead,
    task: TaskSpec,
    inst: Instance,
    rng: np.random.Generator,
    config: TrainConfig,
    counterfactual: Optional[tuple[str, ...]] = None,
) -> tuple[torch.Tensor, dict]:
    if counterfactual is None and config.beta > 0 and task.joint_size < 2:
        logger.debug("no counterfactual step available for %s; contrastive term is zero", inst.id)
    pinned = None if counterfactual is None else [tuple(counterfactual)]
    return batch_loss(b, g, task, [inst], rng, config, pinned)


# ----------------------------------------------------------------- training loop


@dataclass
class TrainResult:
    backend: Backend
    head: ProjectionHead
    task: TaskSpec
    config: TrainConfig
    best_epoch: int
    selection_split: str
    history: list[dict] = field(default_factory=list)

    def save(self, path) -> None:
        save_checkpoint(path, self.backend, self.head, self.task, self.config)


def build_model(task: TaskSpec, instances: Sequence[Instance], config: TrainConfig) -> tuple[Backend, ProjectionHead]:
    backend = reference_backbone(config.backbone(), task.vocabulary(instances), seed=config.seed)
    head = ProjectionHead(config.hidden_size, dtype=backend.dtype, seed=config.seed + 1)
    return backend, head


def final_predictions(b: Backend, task: TaskSpec, instances: Sequence[Instance], config: TrainConfig) -> list[str]:
    traces = predict_batch(b, task, instances, keep_hidden=False)
    if config.two_step:
        return [t.prediction for t in traces]
    return [t.intuitive for t in traces]


def selection_score(b, task, instances, config) -> float:
    preds = final_predictions(b, task, instances, config)
    micro, _ = micro_macro_f1(preds, [x.label for x in instances], task.labels)
    return micro


def train(
    config: TrainConfig,
    splits: Mapping[str, Sequence[Instance]],
    task: TaskSpec,
    backend: Optional[Backend] = None,
    head: Optional[ProjectionHead] = None,
    log: Optional[IO[str]] = None,
) -> TrainResult:
    """Mini-batch Adam on the mean CoTT loss; keeps the best epoch.

    ``log`` receives one JSON line per optimisation step.
    """
    train_set = list(splits.get("train", ()))
    if not train_set:
        raise EmptyDataset("training split is empty")
    if backend is None or head is None:
        backend, head = build_model(task, train_set, config)
    selection = config.selection_split
    if selection == "auto":
        selection = "dev" if splits.get("dev") else "train"
    select_set = list(splits.get(selection) or ())
    if not select_set:
        raise EmptyDataset(f"selection split {selection!r} is empty")
    logger.info("selecting checkpoints on the %s split", selection)

    torch.manual_seed(config.seed)
    order_rng, cf_rng = (np.random.default_rng(s) for s in np.random.SeedSequence(config.seed).spawn(2))
    params = list(backend.parameters()) + list(head.parameters())
    opt = torch.optim.Adam(params, lr=config.learning_rate, weight_decay=config.weight_decay)

    best = (-1.0, -1, None)
    history = []
    step = 0
    for epoch in range(config.epochs):
        lr = learning_rate_at(config, epoch)
        for group in opt.param_groups:
            group["lr"] = lr
        backend.train()
        order = order_rng.permutation(len(train_set))
        for start in range(0, len(order), config.batch_size):
            batch = [train_set[int(i)] for i in order[start : start + config.batch_size]]
            loss, diag = batch_loss(backend, head, task, batch, cf_rng, config)
            opt.zero_grad()
            loss.backward()
            opt.step()
            step += 1
            if log is not None:
                record = {k: v for k, v in diag.items() if k != "per_instance"}
                log.write(json.dumps({"step": step, "epoch": epoch, "lr": lr, **record}) + "\n")
        backend.eval()
        score = selection_score(backend, task, select_set, config)
        history.append({"epoch": epoch, "lr": lr, "selection_micro_f1": score})
        logger.info("epoch %d lr %.3g %s micro-F1 %.4f", epoch, lr, selection, score)
        if score >= best[0]:  # ties go to the later, longer-trained epoch
            best = (score, epoch, (copy.deepcopy(backend.state_dict()), copy.deepcopy(head.state_dict())))

    backend.load_state_dict(best[2][0])
    head.load_state_dict(best[2][1])
    return TrainResult(backend, head, task, config, best[1], selection, history)


# ------------------------------------------------------------------- checkpoints


@dataclass
class Checkpoint:
    backend: Backend
    head: ProjectionHead
    task: TaskSpec
    config: TrainConfig


def save_checkpoint(path, backend: Backend, head: ProjectionHead, task: TaskSpec, config: TrainConfig) -> None:
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "backbone_config": backend.config.to_dict(),
        "vocabulary": list(backend.vocab.tokens),
        "task": task.to_dict(),
        "train_config": asdict(config),
        "backend": backend.state_dict(),
        "head": head.state_dict(),
    }
    path = Path(path)
    buf = io.BytesIO()
    torch.save(payload, buf)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(buf.getvalue())
    os.replace(tmp, path)


def load_checkpoint(path) -> Checkpoint:
    try:
        payload = torch.load(Path(path), map_location="cpu", weights_only=True)
    except FileNotFoundError:
        raise
    except Exception as e:  # torch raises a variety of errors on damaged archives
        raise CorruptCheckpoint(f"{path}: {e}") from None
    if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
        raise CorruptCheckpoint(f"{path}: not a CoTT checkpoint")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise VersionMismatch(payload.get("version"), CHECKPOINT_VERSION)
    try:
        bcfg = BackboneConfig(**payload["backbone_config"])
        backend = Backend(Vocabulary(payload["vocabulary"]), bcfg)
        backend.load_state_dict(payload["backend"])
        head_state = payload["head"]
        d_proj, d = head_state["W2"].shape
        head = ProjectionHead(d, d_proj, dtype=backend.dtype)
        head.load_state_dict(head_state)
        task = TaskSpec.from_dict(payload["task"])
        config = TrainConfig.from_mapping(payload["train_config"])
    except (KeyError, RuntimeError, TypeError, ValueError) as e:
        raise CorruptCheckpoint(f"{path}: {e}") from None
    backend.eval()
    return Checkpoint(backend, head, task, config)
