"""Patch encoder and the frozen-mode feature reducer.

The encoder is a batchnorm-free convolutional stack ending in a global
average pool, so one set of weights encodes both the small sub-patches used
by the contrastive task and the larger instance patches used by the bag
classifier: any square input whose side is divisible by the stack's total
downsampling factor maps to one D-dimensional embedding.
"""

from __future__ import annotations

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .data import Patch, PatchGrid
from .errors import ConfigurationError
from .profiles import Profile


def init_he_uniform(module: nn.Module) -> None:
    """He-style fan-in uniform init for conv/linear weights, zero biases."""
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.Linear)):
            nn.init.kaiming_uniform_(m.weight, nonlinearity="relu")
            if m.bias is not None:
                nn.init.zeros_(m.bias)


class Bottleneck(nn.Module):
    """Residual 1-3-1 bottleneck, no batch normalization."""

    expansion = 4

    def __init__(self, in_channels: int, width: int, stride: int = 1):
        super().__init__()
        out_channels = width * self.expansion
        self.conv1 = nn.Conv2d(in_channels, width, 1)
        self.conv2 = nn.Conv2d(width, width, 3, stride=stride, padding=1)
        self.conv3 = nn.Conv2d(width, out_channels, 1)
        self.shortcut = None
        if stride != 1 or in_channels != out_channels:
            self.shortcut = nn.Conv2d(in_channels, out_channels, 1, stride=stride)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = F.relu(self.conv1(x))
        h = F.relu(self.conv2(h))
        h = self.conv3(h)
        s = x if self.shortcut is None else self.shortcut(x)
        return F.relu(h + s)


class PatchEncoder(nn.Module):
    """Map (B, 3, S, S) pixels to (B, D) embeddings.

    Profiles with explicit stage widths use plain {3x3 conv, ReLU, 2x2 average
    pool} stages; the full-scale profile uses a bottleneck residual stack
    truncated after its third stage (output width 1024). Both end in a global
    spatial pool and contain no batchnorm layers.
    """

    def __init__(self, profile: Profile):
        super().__init__()
        self.profile = profile
        if profile.encoder_widths:
            if profile.encoder_widths[-1] != profile.feature_dim:
                raise ConfigurationError(
                    f"last stage width {profile.encoder_widths[-1]} must equal "
                    f"feature dim {profile.feature_dim}"
                )
            layers: list[nn.Module] = []
            in_ch = 3
            for width in profile.encoder_widths:
                layers += [nn.Conv2d(in_ch, width, 3, padding=1), nn.ReLU(), nn.AvgPool2d(2)]
                in_ch = width
            self.stack = nn.Sequential(*layers)
            self.downsample = 2 ** len(profile.encoder_widths)
        else:
            stages: list[nn.Module] = [
                nn.Conv2d(3, 64, 7, stride=2, padding=3),
                nn.ReLU(),
                nn.MaxPool2d(3, stride=2, padding=1),
            ]
            in_ch = 64
            for width, n_blocks, stride in ((64, 3, 1), (128, 4, 2), (256, 6, 2)):
                for b in range(n_blocks):
                    stages.append(Bottleneck(in_ch, width, stride=stride if b == 0 else 1))
                    in_ch = width * Bottleneck.expansion
            if in_ch != profile.feature_dim:
                raise ConfigurationError(
                    f"residual stack emits {in_ch} channels, profile wants {profile.feature_dim}"
                )
            self.stack = nn.Sequential(*stages)
            self.downsample = 16
        init_he_uniform(self)

    @property
    def feature_dim(self) -> int:
        return self.profile.feature_dim

    def _check_input(self, x: torch.Tensor) -> None:
        if x.ndim != 4 or x.shape[1] != 3:
            raise ConfigurationError(f"expected (B, 3, S, S) input, got {tuple(x.shape)}")
        side = x.shape[2]
        if x.shape[3] != side or side % self.downsample != 0 or side < self.downsample:
            raise ConfigurationError(
                f"input side {tuple(x.shape[2:])} must be square and divisible "
                f"by {self.downsample}"
            )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        self._check_input(x)
        h = self.stack(x)
        return h.mean(dim=(2, 3))


class FeatureReducer(nn.Module):
    """Trainable affine map shrinking frozen-encoder embeddings (e.g. 1024 to 512)."""

    def __init__(self, in_dim: int, out_dim: int):
        super().__init__()
        self.linear = nn.Linear(in_dim, out_dim)
        init_he_uniform(self)

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        if z.shape[-1] != self.linear.in_features:
            raise ConfigurationError(
                f"reducer expects width {self.linear.in_features}, got {z.shape[-1]}"
            )
        return self.linear(z)


# ---------------------------------------------------------------------------
# Array-facing helpers
# ---------------------------------------------------------------------------

def to_tensor(pixels: np.ndarray, dtype: torch.dtype = torch.float32) -> torch.Tensor:
    """(..., S, S, 3) arrays to (..., 3, S, S) tensors."""
    return torch.from_numpy(np.ascontiguousarray(np.moveaxis(pixels, -1, -3))).to(dtype)


def encode_patch(encoder: PatchEncoder, patch: Patch | np.ndarray) -> np.ndarray:
    """One patch to one length-D embedding, inference mode."""
    pixels = patch.pixels if isinstance(patch, Patch) else patch
    dtype = next(encoder.parameters()).dtype
    with torch.no_grad():
        z = encoder(to_tensor(pixels, dtype).unsqueeze(0))
    return z.squeeze(0).numpy()


def encode_grid(encoder: PatchEncoder, grid: PatchGrid) -> np.ndarray:
    """FeatureGrid (R, C, D): location (r, c) is exactly encode_patch(grid[r][c])."""
    rows, cols = grid.shape
    out = np.empty((rows, cols, encoder.feature_dim), dtype=np.float64)
    for r in range(rows):
        for c in range(cols):
            out[r, c] = encode_patch(encoder, grid.patches[r, c])
    return out.astype(grid.patches.dtype if grid.patches.dtype == np.float64 else np.float32)


def encode_grid_batched(encoder: PatchEncoder, grids: torch.Tensor) -> torch.Tensor:
    """Training-path encoding: (B, R, C, 3, s, s) to (B, R, C, D) in one pass."""
    b, r, c = grids.shape[:3]
    flat = grids.reshape(b * r * c, *grids.shape[3:])
    return encoder(flat).reshape(b, r, c, -1)


def encode_instances(encoder: PatchEncoder, instances: np.ndarray,
                     batch_size: int = 64) -> torch.Tensor:
    """Embed a bag's (N, S, S, 3) instances without gradients, in chunks."""
    dtype = next(encoder.parameters()).dtype
    outs = []
    with torch.no_grad():
        for lo in range(0, len(instances), batch_size):
            outs.append(encoder(to_tensor(instances[lo : lo + batch_size], dtype)))
    return torch.cat(outs, dim=0)
