"""Geometry and architecture profiles.

Three profiles share one set of shape contracts:

* ``paper``  - the full-scale geometry (256 px tiles, 64 px sub-patches,
  1024-d features, 10 residual context blocks, 1024->512 reducer, 256 hidden
  attention units). Used for shape and parameter-count checks; training it is
  out of desk scope.
* ``desk``   - a 1/16-width replica that trains in minutes on a CPU
  (32 px tiles, 8 px sub-patches, 64-d features, 4 context blocks).
* ``tiny``   - a few-hundred-parameter profile for finite-difference
  verification.

All profiles keep the 50%-overlap sub-patch rule, so the CPC feature grid is
7x7 for paper and desk, 3x3 for tiny.
"""

from __future__ import annotations

from dataclasses import dataclass

from .errors import ConfigurationError


@dataclass(frozen=True)
class Profile:
    name: str
    mil_patch: int            # MIL instance side length, px
    cpc_tile: int             # tile fed to CPC, px
    cpc_sub: int              # sub-patch side inside a tile, px
    cpc_overlap: float        # sub-patch overlap fraction
    feature_dim: int          # encoder embedding width D
    encoder_widths: tuple[int, ...]  # conv stage widths; () selects the residual stack
    gate_width: int           # channels after the gated activation
    blocks_b: int             # number of residual masked-conv blocks
    reduced_dim: int          # frozen-mode reducer output width
    attention_hidden: int     # gated-attention hidden units
    context_kernel: int = 7   # first masked conv kernel

    @property
    def cpc_stride(self) -> int:
        stride = self.cpc_sub * (1.0 - self.cpc_overlap)
        if abs(stride - round(stride)) > 1e-9 or round(stride) <= 0:
            raise ConfigurationError(
                f"sub-patch stride {stride} is not a positive integer"
            )
        return int(round(stride))

    @property
    def grid_size(self) -> int:
        span = self.cpc_tile - self.cpc_sub
        if span % self.cpc_stride != 0:
            raise ConfigurationError(
                f"tile {self.cpc_tile} minus sub {self.cpc_sub} not divisible "
                f"by stride {self.cpc_stride}"
            )
        return span // self.cpc_stride + 1


PAPER = Profile(
    name="paper",
    mil_patch=256,
    cpc_tile=256,
    cpc_sub=64,
    cpc_overlap=0.5,
    feature_dim=1024,
    encoder_widths=(),
    gate_width=128,
    blocks_b=10,
    reduced_dim=512,
    attention_hidden=256,
)

DESK = Profile(
    name="desk",
    mil_patch=32,
    cpc_tile=32,
    cpc_sub=8,
    cpc_overlap=0.5,
    feature_dim=64,
    encoder_widths=(16, 32, 64),
    gate_width=8,
    blocks_b=4,
    reduced_dim=32,
    attention_hidden=16,
)

TINY = Profile(
    name="tiny",
    mil_patch=8,
    cpc_tile=16,
    cpc_sub=8,
    cpc_overlap=0.5,
    feature_dim=8,
    encoder_widths=(8,),
    gate_width=2,
    blocks_b=1,
    reduced_dim=4,
    attention_hidden=4,
)

PROFILES = {p.name: p for p in (PAPER, DESK, TINY)}


def get_profile(name: str) -> Profile:
    try:
        return PROFILES[name]
    except KeyError:
        raise ConfigurationError(
            f"unknown profile {name!r}; choose from {sorted(PROFILES)}"
        ) from None
