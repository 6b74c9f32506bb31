"""Autoregressive context network over feature grids.

Causality contract: the context vector at grid row r may depend only on
feature rows strictly above r. The first block pads the top of the grid with
zeros and drops the bottom row, then applies a masked convolution whose
kernel rows below the centre are zeroed; later blocks keep the centre row,
so strictness from the original input is preserved through the whole stack.
Batch statistics are computed per channel and per row, over batch and
columns only, so normalization never mixes information across rows.
"""

from __future__ import annotations

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigurationError
from .profiles import Profile


def pad_downshift(grid: torch.Tensor) -> torch.Tensor:
    """Zero the top row and shift every row down one; (B, C, R, W) layout.

    [[a], [b]] becomes [[0], [a]]: the bottom input row drops out.
    """
    out = torch.zeros_like(grid)
    out[:, :, 1:, :] = grid[:, :, :-1, :]
    return out


class MaskedConv2d(nn.Conv2d):
    """Same-padding convolution with kernel rows below the centre zeroed.

    Columns are unrestricted: row causality is the only constraint. The mask
    multiplies the weight in the forward pass (masked taps therefore receive
    zero gradient) and `apply_mask` re-zeroes the stored weight so checkpoints
    carry exact zeros after any number of optimizer updates.
    """

    def __init__(self, in_channels: int, out_channels: int, kernel_size: int):
        if kernel_size % 2 == 0:
            raise ConfigurationError(f"masked conv kernel must be odd, got {kernel_size}")
        super().__init__(in_channels, out_channels, kernel_size, padding=kernel_size // 2)
        mask = torch.zeros(1, 1, kernel_size, kernel_size)
        mask[:, :, : kernel_size // 2 + 1, :] = 1.0
        self.register_buffer("mask", mask)
        self.apply_mask()

    def apply_mask(self) -> None:
        with torch.no_grad():
            self.weight.mul_(self.mask)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self._conv_forward(x, self.weight * self.mask, self.bias)


class RowBatchNorm(nn.Module):
    """Batch normalization with statistics per (channel, row).

    Means and variances reduce over the batch and column axes only; the
    affine transform stays per channel. Running statistics are tracked per
    (channel, row) and used in eval mode.
    """

    def __init__(self, channels: int, rows: int, eps: float = 1e-5, momentum: float = 0.1):
        super().__init__()
        self.eps = eps
        self.momentum = momentum
        self.weight = nn.Parameter(torch.ones(channels))
        self.bias = nn.Parameter(torch.zeros(channels))
        self.register_buffer("running_mean", torch.zeros(channels, rows))
        self.register_buffer("running_var", torch.ones(channels, rows))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[1:3] != self.running_mean.shape:
            raise ConfigurationError(
                f"expected (B, {self.running_mean.shape[0]}, {self.running_mean.shape[1]}, W) "
                f"input, got {tuple(x.shape)}"
            )
        if self.training:
            mean = x.mean(dim=(0, 3))
            var = x.var(dim=(0, 3), unbiased=False)
            with torch.no_grad():
                self.running_mean.mul_(1 - self.momentum).add_(self.momentum * mean)
                self.running_var.mul_(1 - self.momentum).add_(self.momentum * var)
        else:
            mean, var = self.running_mean, self.running_var
        x = (x - mean[None, :, :, None]) / torch.sqrt(var[None, :, :, None] + self.eps)
        return x * self.weight[None, :, None, None] + self.bias[None, :, None, None]


def gated(x: torch.Tensor) -> torch.Tensor:
    """tanh on the first half of the channels times sigmoid on the second."""
    a, b = x.chunk(2, dim=1)
    return torch.tanh(a) * torch.sigmoid(b)


class ContextBlockA(nn.Module):
    """Pad-downshift, wide masked conv, row-safe batchnorm, gated halving."""

    def __init__(self, in_dim: int, gate_width: int, rows: int, kernel: int = 7):
        super().__init__()
        self.conv = MaskedConv2d(in_dim, 2 * gate_width, kernel)
        self.norm = RowBatchNorm(2 * gate_width, rows)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return gated(self.norm(self.conv(pad_downshift(x))))


class ContextBlockB(nn.Module):
    """Residual 3x3 masked conv block; shape in equals shape out."""

    def __init__(self, gate_width: int, rows: int):
        super().__init__()
        self.conv = MaskedConv2d(gate_width, 2 * gate_width, 3)
        self.norm = RowBatchNorm(2 * gate_width, rows)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return x + gated(self.norm(self.conv(x)))


class ContextHead(nn.Module):
    """ReLU, 1x1 conv back to the feature width, batchnorm, ReLU."""

    def __init__(self, gate_width: int, out_dim: int, rows: int):
        super().__init__()
        self.conv = nn.Conv2d(gate_width, out_dim, 1)
        self.norm = RowBatchNorm(out_dim, rows)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return F.relu(self.norm(self.conv(F.relu(x))))


class ContextNetwork(nn.Module):
    """Feature grid (B, D, R, R) to context grid of the same shape."""

    def __init__(self, profile: Profile):
        super().__init__()
        rows = profile.grid_size
        self.profile = profile
        self.block_a = ContextBlockA(
            profile.feature_dim, profile.gate_width, rows, kernel=profile.context_kernel
        )
        self.blocks_b = nn.ModuleList(
            ContextBlockB(profile.gate_width, rows) for _ in range(profile.blocks_b)
        )
        self.head = ContextHead(profile.gate_width, profile.feature_dim, rows)

    @property
    def layer_count(self) -> int:
        return 2 + len(self.blocks_b)

    def masked_convs(self) -> list[MaskedConv2d]:
        return [m for m in self.modules() if isinstance(m, MaskedConv2d)]

    def apply_masks(self) -> None:
        for conv in self.masked_convs():
            conv.apply_mask()

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[1] != self.profile.feature_dim:
            raise ConfigurationError(
                f"expected {self.profile.feature_dim} feature channels, got {x.shape[1]}"
            )
        h = self.block_a(x)
        for block in self.blocks_b:
            h = block(h)
        return self.head(h)


class PredictionHeads(nn.Module):
    """Independent affine maps W_k from context vectors to predicted features.

    Initialized to zero so every candidate score starts equal and the first
    contrastive loss sits exactly at chance level.
    """

    def __init__(self, context_dim: int, feature_dim: int, offsets: tuple[int, ...] = (1, 2, 3)):
        super().__init__()
        if any(k < 1 for k in offsets):
            raise ConfigurationError(f"prediction offsets must be >= 1, got {offsets}")
        self.offsets = tuple(offsets)
        self.heads = nn.ModuleDict(
            {str(k): nn.Linear(context_dim, feature_dim) for k in self.offsets}
        )
        for head in self.heads.values():
            nn.init.zeros_(head.weight)
            nn.init.zeros_(head.bias)

    def forward(self, context: torch.Tensor, k: int) -> torch.Tensor:
        if k not in self.offsets:
            raise ValueError(f"offset {k} not in configured offsets {self.offsets}")
        return self.heads[str(k)](context)


def context_forward(features: np.ndarray, net: ContextNetwork) -> np.ndarray:
    """One (R, C, D) feature grid to its (R, C, D) context grid, eval mode."""
    dtype = next(net.parameters()).dtype
    was_training = net.training
    net.eval()
    with torch.no_grad():
        x = torch.from_numpy(np.ascontiguousarray(np.moveaxis(features, 2, 0))).to(dtype)
        out = net(x.unsqueeze(0)).squeeze(0)
    if was_training:
        net.train()
    return np.moveaxis(out.numpy(), 0, 2)


def predict_future(context: np.ndarray | torch.Tensor, t: int, k: int,
                   heads: PredictionHeads) -> np.ndarray | torch.Tensor:
    """Predicted feature row t+k from context row t: one affine map per column."""
    rows = context.shape[0]
    if k not in heads.offsets:
        raise ValueError(f"offset {k} not in configured offsets {heads.offsets}")
    if not 0 <= t or not t + k <= rows - 1:
        raise ValueError(f"row {t} with offset {k} leaves the {rows}-row grid")
    is_numpy = isinstance(context, np.ndarray)
    row = torch.from_numpy(context[t]) if is_numpy else context[t]
    dtype = next(heads.parameters()).dtype
    out = heads(row.to(dtype), k)
    return out.detach().numpy() if is_numpy else out
