"""Multi-task loss, episodic fine-tuning with early stopping, proxy pretraining and random search."""

from __future__ import annotations

import copy
import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn as nn

from .curriculum import BalanceMode, CurriculumKind, EpisodePlan
from .data_model import CohortManifest
from .evaluation import roc_auc
from .model import (
    BackboneConfig,
    Checkpoint,
    MultiTaskModel,
    backbone_checkpoint,
    build_model,
    load_backbone_weights,
    model_checkpoint,
)
from .preprocessing import check_shape, z_transform

log = logging.getLogger(__name__)

LOGIT_CLAMP = 30.0
LR_RANGE = (1e-5, 2e-3)
OPTIMIZERS = ("sgd", "adam", "adamw")
BATCH_SIZES = (1, 4, 8, 16)


class TrainingDiverged(RuntimeError):
    pass


# ---------------------------------------------------------------- data


@dataclass
class CohortTensors:
    """Standardized volumes and targets of a cohort, held in memory."""

    subject_ids: list[str]
    volumes: torch.Tensor  # (N, 1, X, Y, Z) float32
    age: torch.Tensor
    sex: torch.Tensor
    dx: torch.Tensor
    stages: list[int | None]

    def __len__(self) -> int:
        return len(self.subject_ids)

    @classmethod
    def from_manifest(cls, manifest: CohortManifest) -> "CohortTensors":
        vols = []
        for rec in manifest.records:
            v = manifest.load_volume(rec)
            check_shape(v, manifest.canonical_shape)
            vols.append(z_transform(v).data)
        recs = manifest.records
        return cls(
            subject_ids=[r.subject_id for r in recs],
            volumes=torch.from_numpy(np.stack(vols)[:, None]) if vols else torch.empty(0),
            age=torch.tensor([r.age for r in recs], dtype=torch.float32),
            sex=torch.tensor([r.sex_label for r in recs], dtype=torch.float32),
            dx=torch.tensor([r.dx_label for r in recs], dtype=torch.float32),
            stages=[r.hy_stage for r in recs],
        )

    def select(self, subject_ids: Sequence[str]) -> "CohortTensors":
        pos = {s: i for i, s in enumerate(self.subject_ids)}
        idx = [pos[s] for s in subject_ids]
        t = torch.tensor(idx, dtype=torch.long)
        return CohortTensors(
            list(subject_ids), self.volumes[t], self.age[t], self.sex[t], self.dx[t],
            [self.stages[i] for i in idx],
        )


# ---------------------------------------------------------------- loss


@dataclass
class LossBreakdown:
    l_age: torch.Tensor | float
    l_sex: torch.Tensor | float
    l_dx: torch.Tensor | float
    l_total: torch.Tensor | float

    def item(self) -> "LossBreakdown":
        vals = (self.l_age, self.l_sex, self.l_dx, self.l_total)
        return LossBreakdown(*(float(v.detach()) if torch.is_tensor(v) else float(v) for v in vals))

    def __add__(self, other: "LossBreakdown") -> "LossBreakdown":
        return LossBreakdown(
            self.l_age + other.l_age, self.l_sex + other.l_sex,
            self.l_dx + other.l_dx, self.l_total + other.l_total,
        )

    def as_dict(self) -> dict[str, float]:
        return {k: float(v) for k, v in asdict(self.item()).items()}


def bce_with_logits_sum(logits: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    """Summed binary cross-entropy computed from logits clamped to +/-30."""
    z = logits.clamp(-LOGIT_CLAMP, LOGIT_CLAMP)
    return (nn.functional.softplus(z) - targets * z).sum()


def _check_binary(name: str, labels: torch.Tensor) -> None:
    if not torch.all((labels == 0) | (labels == 1)):
        raise ValueError(f"{name} labels must be 0 or 1")


def multitask_loss(age_pred, sex_logit, dx_logit, age_true, sex_true, dx_true) -> LossBreakdown:
    """Summed L1 age loss plus summed BCE for sex and diagnosis; no weighting."""
    preds = [torch.as_tensor(p).reshape(-1) for p in (age_pred, sex_logit, dx_logit)]
    dtype = preds[0].dtype
    targets = [torch.as_tensor(t, dtype=dtype).reshape(-1) for t in (age_true, sex_true, dx_true)]
    n = preds[0].numel()
    if any(t.numel() != n for t in preds + targets):
        raise ValueError("predictions and targets must have equal batch length")
    for p in preds:
        if not torch.isfinite(p).all():
            raise ValueError("non-finite prediction")
    _check_binary("sex", targets[1])
    _check_binary("dx", targets[2])
    l_age = (targets[0] - preds[0]).abs().sum()
    l_sex = bce_with_logits_sum(preds[1], targets[1])
    l_dx = bce_with_logits_sum(preds[2], targets[2])
    return LossBreakdown(l_age, l_sex, l_dx, l_age + l_sex + l_dx)


def sex_only_loss(age_pred, sex_logit, dx_logit, age_true, sex_true, dx_true) -> LossBreakdown:
    sex_true = torch.as_tensor(sex_true, dtype=sex_logit.dtype).reshape(-1)
    _check_binary("sex", sex_true)
    l_sex = bce_with_logits_sum(sex_logit.reshape(-1), sex_true)
    zero = torch.zeros((), dtype=l_sex.dtype)
    return LossBreakdown(zero, l_sex, zero, l_sex)


# ---------------------------------------------------------------- config


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 3e-4
    optimizer: str = "adam"
    batch_size: int = 8
    epochs_per_episode: int = 30
    patience: int = 15
    seed: int = 0
    kind: CurriculumKind = CurriculumKind.CURRICULUM
    balance: BalanceMode = BalanceMode.OFF
    pretrained: str | None = None
    weight_decay: float = 1e-2
    momentum: float = 0.9

    def __post_init__(self):
        object.__setattr__(self, "kind", CurriculumKind(self.kind))
        object.__setattr__(self, "balance", BalanceMode(self.balance))
        lo, hi = LR_RANGE
        # 0 is admitted as a frozen run; anything else must lie in the searched range
        if self.learning_rate != 0 and not lo <= self.learning_rate <= hi:
            raise ValueError(f"learning_rate {self.learning_rate} outside [{lo}, {hi}]")
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"optimizer must be one of {OPTIMIZERS}")
        if self.batch_size not in BATCH_SIZES:
            raise ValueError(f"batch_size must be one of {BATCH_SIZES}")
        if self.epochs_per_episode < 1 or self.patience < 1:
            raise ValueError("epochs_per_episode and patience must be >= 1")

    def to_json(self) -> dict:
        d = asdict(self)
        d["kind"] = self.kind.value
        d["balance"] = self.balance.value
        return d


def make_optimizer(params, config: TrainConfig) -> torch.optim.Optimizer:
    if config.optimizer == "sgd":
        return torch.optim.SGD(params, lr=config.learning_rate, momentum=config.momentum)
    if config.optimizer == "adam":
        return torch.optim.Adam(params, lr=config.learning_rate)
    return torch.optim.AdamW(params, lr=config.learning_rate, weight_decay=config.weight_decay)


# ---------------------------------------------------------------- loops


@dataclass
class EpochRecord:
    episode: int
    epoch: int
    train: LossBreakdown
    val: LossBreakdown
    val_auc: float | None

    def jsonl_rows(self) -> list[dict]:
        rows = []
        for split, losses, auc in (("train", self.train, None), ("val", self.val, self.val_auc)):
            rows.append({"episode": self.episode, "epoch": self.epoch, "split": split, **losses.as_dict(), "val_auc": auc})
        return rows


@dataclass
class TrainResult:
    model: MultiTaskModel
    log: list[EpochRecord]
    stop_reasons: list[str]
    config: TrainConfig

    @property
    def best_checkpoint(self) -> Checkpoint:
        return model_checkpoint(self.model)

    @property
    def stopping_reason(self) -> str:
        return self.stop_reasons[-1] if self.stop_reasons else ""

    def write_log(self, path: str | Path) -> Path:
        return write_jsonl(self.log, path)


def write_jsonl(records: Sequence[EpochRecord], path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w") as fh:
        for rec in records:
            for row in rec.jsonl_rows():
                fh.write(json.dumps(row) + "\n")
    return path


def _batches(n: int, batch_size: int, order: np.ndarray):
    for start in range(0, n, batch_size):
        yield torch.from_numpy(order[start:start + batch_size])


@torch.no_grad()
def predict(model: MultiTaskModel, data: CohortTensors, batch_size: int = 16):
    """Age predictions, sex logits and dx logits for every subject (float64 numpy)."""
    was_training = model.training
    model.eval()
    dtype = next(model.parameters()).dtype
    outs = [[], [], []]
    for start in range(0, len(data), batch_size):
        x = data.volumes[start:start + batch_size].to(dtype)
        for acc, o in zip(outs, model(x)):
            acc.append(o.reshape(-1).double())
    model.train(was_training)
    return tuple(torch.cat(o).numpy() if o else np.empty(0) for o in outs)


def evaluate_losses(model: MultiTaskModel, data: CohortTensors, loss_fn=multitask_loss):
    age, sex, dx = (torch.from_numpy(a) for a in predict(model, data))
    losses = loss_fn(age, sex, dx, data.age.double(), data.sex.double(), data.dx.double()).item()
    try:
        auc = roc_auc(data.dx.numpy(), dx.numpy())
    except ValueError:
        auc = None
    return losses, auc


def train_episode(
    model: MultiTaskModel,
    train: CohortTensors,
    val: CohortTensors,
    config: TrainConfig,
    episode: int = 0,
    loss_fn: Callable = multitask_loss,
) -> tuple[MultiTaskModel, list[EpochRecord], str]:
    """Fine-tune ``model`` on one episode, with early stopping on validation loss.

    The model comes back holding the weights of the epoch with the lowest
    validation ``l_total`` seen in this episode. A fresh optimizer is created,
    so no optimizer state crosses episode boundaries.
    """
    if len(train) == 0 or len(val) == 0:
        raise ValueError("episode and validation set must be non-empty")
    optimizer = make_optimizer(model.parameters(), config)
    dtype = next(model.parameters()).dtype
    best_loss = math.inf
    best_state = copy.deepcopy(model.state_dict())
    since_best = 0
    reason = "max_epochs"
    records = []
    for epoch in range(config.epochs_per_episode):
        model.train()
        order = np.random.default_rng([config.seed, episode, epoch]).permutation(len(train))
        totals = None
        for idx in _batches(len(train), config.batch_size, order):
            x = train.volumes[idx].to(dtype)
            age, sex, dx = model(x)
            if not all(torch.isfinite(o).all() for o in (age, sex, dx)):
                raise TrainingDiverged(f"non-finite model output in episode {episode}, epoch {epoch}")
            losses = loss_fn(age, sex, dx, train.age[idx].to(dtype), train.sex[idx].to(dtype), train.dx[idx].to(dtype))
            if not torch.isfinite(losses.l_total):
                raise TrainingDiverged(
                    f"non-finite training loss in episode {episode}, epoch {epoch}: {losses.item()}"
                )
            optimizer.zero_grad(set_to_none=True)
            losses.l_total.backward()
            optimizer.step()
            batch_losses = losses.item()
            totals = batch_losses if totals is None else totals + batch_losses
        val_losses, val_auc = evaluate_losses(model, val, loss_fn)
        if not math.isfinite(val_losses.l_total):
            raise TrainingDiverged(f"non-finite validation loss in episode {episode}, epoch {epoch}")
        records.append(EpochRecord(episode, epoch, totals, val_losses, val_auc))
        log.debug("episode %d epoch %d train %.3f val %.3f auc %s", episode, epoch,
                  totals.l_total, val_losses.l_total, val_auc)
        if val_losses.l_total < best_loss:
            best_loss = val_losses.l_total
            best_state = copy.deepcopy(model.state_dict())
            since_best = 0
        else:
            since_best += 1
            if since_best >= config.patience:
                reason = "early_stop"
                break
    model.load_state_dict(best_state)
    return model, records, reason


def prepare_model(backbone: BackboneConfig, config: TrainConfig, age_reference: float = 0.0) -> MultiTaskModel:
    """Fresh model for ``config.seed``, with the pretrained backbone loaded when configured.

    ``age_reference`` (normally the training-set mean age) is added to the age
    head output so the head starts near the data instead of at 0 years.
    """
    model = build_model(backbone, seed=config.seed)
    model.age_offset.fill_(age_reference)
    if config.pretrained:
        load_backbone_weights(model, config.pretrained)
    return model


def run_curriculum_training(
    train: CohortTensors,
    val: CohortTensors,
    plan: EpisodePlan,
    config: TrainConfig,
    model: MultiTaskModel,
) -> TrainResult:
    """Fine-tune ``model`` episode by episode; weights carry over, optimizer state does not."""
    missing = {s for e in plan.episodes for s in e.subject_ids} - set(train.subject_ids)
    if missing:
        raise ValueError(f"plan references {len(missing)} subjects absent from the training data")
    records, reasons = [], []
    for k, episode in enumerate(plan.episodes):
        subset = train.select(episode.subject_ids)
        model, rows, reason = train_episode(model, subset, val, config, episode=k)
        records.extend(rows)
        reasons.append(reason)
    return TrainResult(model, records, reasons, config)


# ---------------------------------------------------------------- pretraining


@dataclass
class PretrainResult:
    checkpoint: Checkpoint
    log: list[EpochRecord]
    val_accuracy: float


def pretrain_proxy(
    train: CohortTensors,
    val: CohortTensors,
    backbone: BackboneConfig,
    config: TrainConfig,
) -> PretrainResult:
    """Supervised sex-classification pretraining; returns a backbone-only checkpoint."""
    for name, data in (("train", train), ("val", val)):
        if len(torch.unique(data.sex)) < 2:
            raise ValueError(f"pretraining {name} cohort must contain both sexes")
    model = build_model(backbone, seed=config.seed)
    model, records, _ = train_episode(model, train, val, config, episode=0, loss_fn=sex_only_loss)
    _, sex_logit, _ = predict(model, val)
    accuracy = float(np.mean((sex_logit >= 0) == (val.sex.numpy() == 1)))
    return PretrainResult(backbone_checkpoint(model), records, accuracy)


# ---------------------------------------------------------------- search


@dataclass(frozen=True)
class SearchSpace:
    learning_rate: tuple[float, float] = LR_RANGE
    optimizers: tuple[str, ...] = OPTIMIZERS
    batch_sizes: tuple[int, ...] = BATCH_SIZES

    def sample(self, rng: np.random.Generator) -> dict:
        lo, hi = self.learning_rate
        return {
            "learning_rate": float(math.exp(rng.uniform(math.log(lo), math.log(hi)))),
            "optimizer": str(rng.choice(list(self.optimizers))),
            "batch_size": int(rng.choice(list(self.batch_sizes))),
        }


@dataclass
class SearchResult:
    best_config: TrainConfig
    trials: list[dict] = field(default_factory=list)

    @property
    def best_trial(self) -> dict:
        return max(self.trials, key=lambda t: t["val_auc"])


def hyperparameter_search(
    space: SearchSpace,
    n_trials: int,
    seed: int,
    budget_epochs: int,
    train: CohortTensors,
    val: CohortTensors,
    plan: EpisodePlan,
    backbone: BackboneConfig,
    base: TrainConfig = TrainConfig(),
) -> SearchResult:
    """Random search over learning rate, optimizer and batch size, scored by validation ROC-AUC."""
    if n_trials < 1:
        raise ValueError("n_trials must be >= 1")
    rng = np.random.default_rng(seed)
    trials = []
    best_config, best_auc = None, -math.inf
    for i in range(n_trials):
        params = space.sample(rng)
        config = replace(base, epochs_per_episode=budget_epochs, **params)
        model = prepare_model(backbone, config, float(train.age.mean()))
        result = run_curriculum_training(train, val, plan, config, model)
        _, auc = evaluate_losses(result.model, val)
        auc = float("nan") if auc is None else auc
        trials.append({"trial": i, **params, "val_auc": auc})
        log.info("trial %d %s val_auc=%.4f", i, params, auc)
        if auc > best_auc or best_config is None:
            best_config, best_auc = config, auc
    return SearchResult(replace(best_config, epochs_per_episode=base.epochs_per_episode), trials)
