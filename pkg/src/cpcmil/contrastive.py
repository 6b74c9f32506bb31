"""InfoNCE objective and the self-supervised pretraining loop.

Each training step encodes a batch of tiles into feature grids, summarizes
them with the autoregressive context network, predicts feature rows one to
three steps below each context row, and scores every prediction against a
candidate bank holding all feature vectors in the batch (its own target is
the positive; everything else, from the same grid and from other tiles, acts
as a negative). Loss terms are reduced in fixed (offset, batch, row, column)
order so repeated runs are bitwise identical.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from . import checkpoint as ckpt
from .config import CpcTrainConfig
from .context import ContextNetwork, PredictionHeads
from .data import Patch, augment
from .encoder import PatchEncoder, encode_grid_batched, to_tensor
from .errors import ConfigurationError, NumericError
from .profiles import Profile, get_profile
from .seeding import STREAM_CPC, child_seed, make_rng, seed_torch


def info_nce_loss(
    predictions: torch.Tensor,
    positives: torch.Tensor,
    negatives: torch.Tensor,
) -> torch.Tensor:
    """Mean over rows of -log(exp(z.z_hat) / sum over candidates exp(z_i.z_hat)).

    `negatives` is either a shared (K, D) bank or per-row (M, K, D); the
    candidate set is the row's positive plus all K negatives. Softmax is
    computed with max subtraction, so large scores cannot overflow.
    """
    if negatives.numel() == 0 or negatives.shape[-2] == 0:
        raise ValueError("at least one negative is required")
    if predictions.shape != positives.shape or negatives.shape[-1] != predictions.shape[-1]:
        raise ValueError(
            f"dimension mismatch: predictions {tuple(predictions.shape)}, "
            f"positives {tuple(positives.shape)}, negatives {tuple(negatives.shape)}"
        )
    pos = (predictions * positives).sum(dim=-1, keepdim=True)
    if negatives.ndim == 2:
        neg = predictions @ negatives.T
    else:
        neg = torch.einsum("md,mkd->mk", predictions, negatives)
    scores = torch.cat([pos, neg], dim=1)
    return -F.log_softmax(scores, dim=1)[:, 0].mean()


def grid_contrastive_loss(
    features: torch.Tensor,
    context: torch.Tensor,
    heads: PredictionHeads,
    negatives: int | None = None,
    generator: torch.Generator | None = None,
) -> tuple[torch.Tensor, int]:
    """Contrastive loss over every valid (row, offset) pair of a grid batch.

    `features` and `context` are (B, R, C, D). With `negatives=None` the
    candidate bank is dense (all B*R*C feature vectors); otherwise each
    prediction scores against its positive plus `negatives` sampled bank
    vectors, excluding the positive. Returns (loss, candidate-set size).
    """
    b, r, c, d = features.shape
    bank = features.reshape(b * r * c, d)
    terms = []
    n_candidates = bank.shape[0] if negatives is None else negatives + 1
    for k in heads.offsets:
        if r - k < 1:
            raise ConfigurationError(f"offset {k} too large for a {r}-row grid")
        preds = heads(context[:, : r - k].reshape(-1, d), k)
        rows = torch.arange(k, r)
        target = (
            torch.arange(b)[:, None, None] * (r * c)
            + rows[None, :, None] * c
            + torch.arange(c)[None, None, :]
        ).reshape(-1)
        if negatives is None:
            scores = preds @ bank.T
            terms.append(F.cross_entropy(scores, target, reduction="none"))
        else:
            if negatives >= bank.shape[0]:
                raise ConfigurationError(
                    f"{negatives} negatives requested from a bank of {bank.shape[0]}"
                )
            draw = torch.randint(
                0, bank.shape[0] - 1, (preds.shape[0], negatives), generator=generator
            )
            draw = draw + (draw >= target[:, None]).long()  # skip the positive slot
            pos = (preds * bank[target]).sum(dim=-1, keepdim=True)
            neg = torch.einsum("md,mkd->mk", preds, bank[draw])
            scores = torch.cat([pos, neg], dim=1)
            terms.append(-F.log_softmax(scores, dim=1)[:, 0])
    return torch.cat(terms).mean(), n_candidates


def chance_level(candidates: int) -> float:
    """Loss of a scorer with no information: ln(K+1) for K negatives."""
    return math.log(candidates)


def cut_grids(tiles: np.ndarray, sub: int, stride: int, n: int) -> np.ndarray:
    """(B, S, S, 3) tiles to (B, n, n, sub, sub, 3) overlapping sub-patch grids."""
    b = tiles.shape[0]
    out = np.empty((b, n, n, sub, sub, 3), dtype=tiles.dtype)
    for i in range(n):
        for j in range(n):
            y, x = i * stride, j * stride
            out[:, i, j] = tiles[:, y : y + sub, x : x + sub]
    return out


@dataclass
class CpcResult:
    encoder: PatchEncoder
    context_net: ContextNetwork
    heads: PredictionHeads
    history: list[dict] = field(default_factory=list)
    initial_loss: float = float("nan")
    chance: float = float("nan")


def cpc_pretrain(
    tiles: list[Patch] | np.ndarray,
    profile: Profile,
    config: CpcTrainConfig,
    log_fn=None,
) -> CpcResult:
    """Train encoder, context network, and prediction heads on unlabeled tiles.

    Deterministic given (config.seed, profile): module init, tile order,
    augmentation draws, and negative sampling all derive from it. Masks are
    re-applied after every optimizer step. A non-finite loss aborts with the
    offending tile ids.
    """
    if isinstance(tiles, np.ndarray):
        pixels_all = tiles
        tile_ids = [f"tile{i}" for i in range(len(tiles))]
    else:
        if not tiles:
            raise ConfigurationError("empty tile corpus")
        pixels_all = np.stack([t.pixels for t in tiles]).astype(np.float32)
        tile_ids = [f"{t.source_id}@{t.origin[0]},{t.origin[1]}" for t in tiles]
    if pixels_all.shape[1] != profile.cpc_tile:
        raise ConfigurationError(
            f"tiles are {pixels_all.shape[1]} px, profile expects {profile.cpc_tile}"
        )
    if max(config.offsets) > profile.grid_size - 1:
        raise ConfigurationError(
            f"offsets {config.offsets} exceed a {profile.grid_size}-row grid"
        )

    dtype = torch.float64 if config.dtype == "float64" else torch.float32
    seed_torch(config.seed, STREAM_CPC, 0)
    encoder = PatchEncoder(profile).to(dtype)
    context_net = ContextNetwork(profile).to(dtype)
    heads = PredictionHeads(profile.feature_dim, profile.feature_dim, config.offsets).to(dtype)
    params = (
        list(encoder.parameters()) + list(context_net.parameters()) + list(heads.parameters())
    )
    optimizer = torch.optim.Adam(
        params, lr=config.learning_rate, betas=config.betas, eps=config.eps
    )
    neg_gen = torch.Generator().manual_seed(child_seed(config.seed, STREAM_CPC, 3))

    stride, n = profile.cpc_stride, profile.grid_size
    n_tiles = len(pixels_all)
    batch = min(config.batch_size, n_tiles)
    result = CpcResult(encoder, context_net, heads)

    for epoch in range(config.epochs):
        order = make_rng(config.seed, STREAM_CPC, 1, epoch).permutation(n_tiles)
        losses = []
        n_candidates = 0
        for lo in range(0, n_tiles - batch + 1, batch):
            batch_idx = order[lo : lo + batch]
            pixels = pixels_all[batch_idx]
            if config.augment is not None and config.augment.enabled():
                pixels = np.stack(
                    [
                        augment(
                            pixels[i],
                            config.augment,
                            make_rng(config.seed, STREAM_CPC, 2, epoch, int(batch_idx[i])),
                        )
                        for i in range(len(batch_idx))
                    ]
                )
            grids = to_tensor(cut_grids(pixels, profile.cpc_sub, stride, n), dtype)
            z = encode_grid_batched(encoder, grids)
            ctx = context_net(z.permute(0, 3, 1, 2)).permute(0, 2, 3, 1)
            loss, n_candidates = grid_contrastive_loss(
                z, ctx, heads, config.negatives, neg_gen
            )
            if not torch.isfinite(loss):
                raise NumericError(
                    f"non-finite contrastive loss at epoch {epoch + 1}",
                    batch_ids=[tile_ids[i] for i in batch_idx],
                )
            if epoch == 0 and lo == 0:
                result.initial_loss = float(loss.item())
                result.chance = chance_level(n_candidates)
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            context_net.apply_masks()
            losses.append(float(loss.item()))
        entry = {
            "epoch": epoch + 1,
            "loss": float(np.mean(losses)),
            "candidates": n_candidates,
        }
        result.history.append(entry)
        if log_fn is not None:
            log_fn(entry)
    encoder.eval()
    context_net.eval()
    heads.eval()
    return result


def save_pretrained(path, result: CpcResult, profile: Profile) -> None:
    ckpt.save_checkpoint(
        path,
        {"encoder": result.encoder, "context": result.context_net, "heads": result.heads},
        profile.name,
    )


def load_pretrained(path) -> tuple[Profile, CpcResult]:
    """Rebuild pretrained modules from a checkpoint; profile and head offsets
    come from the file itself."""
    profile_name, sections = ckpt.load_checkpoint(path)
    profile = get_profile(profile_name)
    for name in ("encoder", "context", "heads"):
        if name not in sections:
            raise ConfigurationError(f"{path}: missing checkpoint section {name!r}")
    offsets = tuple(
        sorted(int(key.split(".")[1]) for key in sections["heads"] if key.endswith(".weight"))
    )
    encoder = PatchEncoder(profile)
    context_net = ContextNetwork(profile)
    heads = PredictionHeads(profile.feature_dim, profile.feature_dim, offsets)
    ckpt.load_into(encoder, sections["encoder"])
    ckpt.load_into(context_net, sections["context"])
    ckpt.load_into(heads, sections["heads"])
    encoder.eval()
    context_net.eval()
    heads.eval()
    return profile, CpcResult(encoder, context_net, heads)
