"""Optimization harness: splits, MIL training, label sweeps, gradient checks.

Everything here is a deterministic function of (corpus, split seed, train
seed): module init, bag order, dropout draws, and label subsampling all
derive from seeded streams, so repeated runs produce identical histories.
"""

from __future__ import annotations

import copy
import logging
from dataclasses import dataclass, field

import numpy as np
import torch

from .checkpoint import state_checksum
from .config import BAGS_PER_STEP, N_FOLDS, VAL_FRACTION, AugmentConfig, TrainConfig
from .contrastive import CpcResult
from .data import Bag, augment
from .encoder import PatchEncoder, encode_instances, to_tensor
from .errors import ConfigurationError, NumericError
from .metrics import accuracy, roc_auc
from .mil import MilModel, mil_loss
from .profiles import Profile
from .seeding import STREAM_MIL, STREAM_SPLITS, STREAM_SWEEP, make_rng, seed_torch

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# Splits
# ---------------------------------------------------------------------------

@dataclass
class Fold:
    train_ids: list[str]
    val_ids: list[str]


@dataclass
class SplitPlan:
    folds: list[Fold]
    seed: int


def make_splits(
    labels: dict[str, int],
    n_folds: int = N_FOLDS,
    val_fraction: float = VAL_FRACTION,
    seed: int = 0,
) -> SplitPlan:
    """Independent random class-balanced splits, identical for identical seed.

    Requires equally many items per class so both sides stay exactly
    balanced; the validation side holds round(val_fraction * per-class count)
    items of each class.
    """
    pos = sorted(k for k, v in labels.items() if v == 1)
    neg = sorted(k for k, v in labels.items() if v == 0)
    if len(pos) != len(neg):
        raise ValueError(
            f"class-balanced splits need equal classes, got {len(pos)} pos / {len(neg)} neg"
        )
    n_val = round(val_fraction * len(pos))
    if n_val < 1 or n_val >= len(pos):
        raise ValueError(
            f"validation fraction {val_fraction} gives {n_val} per class from {len(pos)}"
        )
    folds = []
    for f in range(n_folds):
        rng = make_rng(seed, STREAM_SPLITS, f)
        val_pos = set(rng.choice(pos, size=n_val, replace=False).tolist())
        val_neg = set(rng.choice(neg, size=n_val, replace=False).tolist())
        val = sorted(val_pos | val_neg)
        train = sorted((set(pos) - val_pos) | (set(neg) - val_neg))
        folds.append(Fold(train_ids=train, val_ids=val))
    return SplitPlan(folds=folds, seed=seed)


# ---------------------------------------------------------------------------
# MIL training
# ---------------------------------------------------------------------------

@dataclass
class FoldResult:
    fold: int
    model: MilModel
    history: list[dict]
    best_epoch: int
    val_auc: float
    val_accuracy: float
    val_probs: dict[str, float]


@dataclass
class TrainResult:
    folds: list[FoldResult] = field(default_factory=list)

    @property
    def val_aucs(self) -> list[float]:
        return [f.val_auc for f in self.folds]

    @property
    def val_accuracies(self) -> list[float]:
        return [f.val_accuracy for f in self.folds]


def embed_bags(encoder: PatchEncoder, bags: dict[str, Bag]) -> dict[str, torch.Tensor]:
    """Cache per-bag instance embeddings; valid only while the encoder is fixed."""
    encoder.eval()
    return {bag_id: encode_instances(encoder, bag.instances) for bag_id, bag in sorted(bags.items())}


def _bag_output(
    model: MilModel,
    bag: Bag,
    cache: dict[str, torch.Tensor] | None,
    augment_cfg: AugmentConfig | None = None,
    rng: np.random.Generator | None = None,
):
    if augment_cfg is not None:
        pixels = np.stack([augment(p, augment_cfg, rng) for p in bag.instances])
        if cache is not None:
            # frozen mode: the encoder takes no gradients, embed directly
            return model.forward_embeddings(encode_instances(model.encoder, pixels))
        return model(to_tensor(pixels, next(model.parameters()).dtype))
    if cache is not None:
        return model.forward_embeddings(cache[bag.bag_id])
    return model(to_tensor(bag.instances, next(model.parameters()).dtype))


def _eval_losses(model, bags, ids, cache, config) -> tuple[float, dict[str, float]]:
    model.eval()
    losses, probs = [], {}
    with torch.no_grad():
        for bag_id in ids:
            bag = bags[bag_id]
            out = _bag_output(model, bag, cache)
            losses.append(float(mil_loss(out.scores, out.attention, bag.bag_label, config.loss)))
            probs[bag_id] = float(out.probability)
    return float(np.mean(losses)), probs


def train_mil(
    bags: list[Bag] | dict[str, Bag],
    splits: SplitPlan,
    pretrained: CpcResult | None,
    config: TrainConfig,
    profile: Profile,
    train_subsets: list[list[str]] | None = None,
    log_fn=None,
) -> TrainResult:
    """Train one MIL model per fold and keep the best-validation-loss epoch.

    Modes: frozen (pretrained encoder as fixed feature bank + trainable
    reducer), finetune (pretrained encoder updated end to end), scratch
    (randomly initialized encoder, end to end). Each optimizer step
    accumulates gradients over 4 bags. `train_subsets` optionally replaces
    each fold's training ids (label-budget runs); validation sets are
    untouched. When `config.augment` is set, training instances are
    re-augmented every epoch; validation always sees clean instances.
    """
    if isinstance(bags, list):
        bags = {bag.bag_id: bag for bag in bags}
    if config.mode in ("frozen", "finetune") and pretrained is None:
        raise ConfigurationError(f"{config.mode} mode requires a pretraining checkpoint")
    result = TrainResult()

    for fold_idx, fold in enumerate(splits.folds):
        train_ids = sorted(train_subsets[fold_idx]) if train_subsets is not None else fold.train_ids
        missing = [i for i in train_ids + fold.val_ids if i not in bags]
        if missing:
            raise ConfigurationError(f"split references unknown bags: {missing[:4]}")

        seed_torch(config.seed, STREAM_MIL, fold_idx, 0)
        if config.mode == "frozen":
            # copy: frozen mode flips requires_grad on the encoder it is given,
            # which must not leak into the caller's pretraining result
            model = MilModel(profile, "frozen", encoder=copy.deepcopy(pretrained.encoder),
                             attention_dropout=config.attention_dropout)
        elif config.mode == "finetune":
            model = MilModel(profile, "finetune", encoder=copy.deepcopy(pretrained.encoder),
                             attention_dropout=config.attention_dropout)
        else:
            model = MilModel(profile, "finetune", attention_dropout=config.attention_dropout)
        if config.dtype == "float64":
            model = model.double()
        cache = embed_bags(model.encoder, bags) if config.mode == "frozen" else None
        optimizer = torch.optim.Adam(
            [p for p in model.parameters() if p.requires_grad],
            lr=config.effective_lr, betas=config.betas, eps=config.eps,
            weight_decay=config.weight_decay,
        )

        aug = config.augment if config.augment is not None and config.augment.enabled() else None

        best_val = float("inf")
        best_state = copy.deepcopy(model.state_dict())
        best_epoch = 0
        since_improved = 0
        history: list[dict] = []
        for epoch in range(1, config.max_epochs + 1):
            order = make_rng(config.seed, STREAM_MIL, fold_idx, 1, epoch).permutation(len(train_ids))
            aug_rng = make_rng(config.seed, STREAM_MIL, fold_idx, 2, epoch) if aug else None
            model.train()
            step_losses = []
            for lo in range(0, len(order), config.bags_per_step):
                group = [train_ids[i] for i in order[lo : lo + config.bags_per_step]]
                optimizer.zero_grad()
                group_loss = torch.zeros((), dtype=next(model.parameters()).dtype)
                for bag_id in group:
                    bag = bags[bag_id]
                    out = _bag_output(model, bag, cache, aug, aug_rng)
                    group_loss = group_loss + mil_loss(
                        out.scores, out.attention, bag.bag_label, config.loss
                    )
                group_loss = group_loss / len(group)
                if not torch.isfinite(group_loss):
                    raise NumericError(
                        f"non-finite MIL loss in fold {fold_idx} epoch {epoch}", batch_ids=group
                    )
                group_loss.backward()
                optimizer.step()
                step_losses.append(float(group_loss.item()))

            val_loss, val_probs = _eval_losses(model, bags, fold.val_ids, cache, config)
            val_labels = [bags[i].bag_label for i in fold.val_ids]
            entry = {
                "fold": fold_idx,
                "epoch": epoch,
                "train_loss": float(np.mean(step_losses)),
                "val_loss": val_loss,
                "val_auc": roc_auc(val_labels, [val_probs[i] for i in fold.val_ids]),
                "encoder_checksum": state_checksum(model.encoder),
            }
            history.append(entry)
            if log_fn is not None:
                log_fn(entry)
            if val_loss < best_val:
                best_val = val_loss
                best_state = copy.deepcopy(model.state_dict())
                best_epoch = epoch
                since_improved = 0
            else:
                since_improved += 1
                if since_improved >= config.patience:
                    break

        model.load_state_dict(best_state)
        val_loss, val_probs = _eval_losses(model, bags, fold.val_ids, cache, config)
        val_labels = [bags[i].bag_label for i in fold.val_ids]
        scores = [val_probs[i] for i in fold.val_ids]
        result.folds.append(
            FoldResult(
                fold=fold_idx,
                model=model,
                history=history,
                best_epoch=best_epoch,
                val_auc=roc_auc(val_labels, scores),
                val_accuracy=accuracy(val_labels, scores),
                val_probs=val_probs,
            )
        )
    return result


# ---------------------------------------------------------------------------
# Label-efficiency sweep
# ---------------------------------------------------------------------------

def subsample_labels(
    train_ids: list[str], labels: dict[str, int], budget: int, seed: int, fold: int
) -> list[str]:
    """First `budget` ids per class of a fixed seeded shuffle, so smaller
    budgets are strict subsets of larger ones."""
    chosen = []
    for cls in (0, 1):
        ids = sorted(i for i in train_ids if labels[i] == cls)
        if budget > len(ids):
            raise ValueError(f"budget {budget} exceeds {len(ids)} available for class {cls}")
        order = make_rng(seed, STREAM_SWEEP, fold, cls).permutation(len(ids))
        chosen.extend(ids[i] for i in order[:budget])
    return sorted(chosen)


@dataclass
class SweepPoint:
    budget: int
    aucs: list[float]

    @property
    def mean(self) -> float:
        return float(np.mean(self.aucs))

    @property
    def std(self) -> float:
        return float(np.std(self.aucs))


def label_efficiency_sweep(
    bags: list[Bag] | dict[str, Bag],
    splits: SplitPlan,
    pretrained: CpcResult,
    budgets: list[int],
    config: TrainConfig,
    profile: Profile,
    log_fn=None,
) -> list[SweepPoint]:
    """Frozen-mode AUC as a function of labeled bags per class.

    Budgets beyond the available training labels are skipped with a warning;
    the full budget reproduces plain train_mil exactly (no resampling).
    """
    if isinstance(bags, list):
        bags = {bag.bag_id: bag for bag in bags}
    labels = {bag_id: bag.bag_label for bag_id, bag in bags.items()}
    max_budget = min(
        sum(1 for i in fold.train_ids if labels[i] == cls)
        for fold in splits.folds
        for cls in (0, 1)
    )
    points = []
    for budget in budgets:
        if budget > max_budget:
            log.warning("budget %d exceeds %d available per class, skipped", budget, max_budget)
            continue
        subsets = [
            subsample_labels(fold.train_ids, labels, budget, splits.seed, f)
            for f, fold in enumerate(splits.folds)
        ]
        run = train_mil(bags, splits, pretrained, config, profile, train_subsets=subsets)
        point = SweepPoint(budget=budget, aucs=run.val_aucs)
        points.append(point)
        if log_fn is not None:
            log_fn({"budget": budget, "mean_auc": point.mean, "std_auc": point.std})
    return points


# ---------------------------------------------------------------------------
# Finite-difference gradient checking
# ---------------------------------------------------------------------------

@dataclass
class GradReport:
    max_rel_error: float
    per_param: dict[str, float]
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance


def check_gradients(
    loss_fn,
    named_params: list[tuple[str, torch.Tensor]],
    eps: float = 1e-5,
    tolerance: float = 1e-4,
) -> GradReport:
    """Compare analytic gradients against central finite differences.

    `loss_fn` must be a deterministic scalar re-evaluated after each in-place
    parameter nudge; use 64-bit parameters. Relative error per element is
    |analytic - numeric| / max(|analytic|, |numeric|, 1e-8).
    """
    params = list(named_params)
    for _, p in params:
        p.grad = None
    loss = loss_fn()
    loss.backward()
    analytic = {
        name: (p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p))
        for name, p in params
    }
    report = {}
    for name, p in params:
        numeric = torch.zeros_like(p.detach())
        flat = p.detach().reshape(-1)
        num_flat = numeric.reshape(-1)
        for i in range(flat.numel()):
            orig = flat[i].item()
            with torch.no_grad():
                flat[i] = orig + eps
                f_plus = float(loss_fn())
                flat[i] = orig - eps
                f_minus = float(loss_fn())
                flat[i] = orig
            num_flat[i] = (f_plus - f_minus) / (2 * eps)
        a = analytic[name]
        denom = torch.clamp(torch.maximum(a.abs(), numeric.abs()), min=1e-8)
        report[name] = float(((a - numeric).abs() / denom).max())
    return GradReport(
        max_rel_error=max(report.values()) if report else 0.0,
        per_param=report,
        tolerance=tolerance,
    )
