"""Configuration dataclasses and the key=value config-file reader.

Defaults encode the published hyperparameters: Adam at 1e-3 for contrastive
pretraining with batches of 16 tiles, 5e-5 when finetuning and 2e-4 with the
encoder frozen, an effective batch of 4 bags, up to 100 epochs with patience
25, and 5 class-balanced splits holding out 25% for validation.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field, fields
from pathlib import Path

from .errors import ConfigurationError

MIL_LEARNING_RATES = {"frozen": 2e-4, "finetune": 5e-5, "scratch": 5e-5}
CPC_LEARNING_RATE = 1e-3
CPC_BATCH_SIZE = 16
BAGS_PER_STEP = 4
MAX_EPOCHS = 100
PATIENCE = 25
N_FOLDS = 5
VAL_FRACTION = 0.25


@dataclass
class SyntheticSpec:
    """Parameters of the planted-motif corpus generator.

    Positive images receive one or more motif cells: tight clusters of dark
    elliptical blobs planted inside patch-lattice cells. Background texture
    (tint field, scattered dots, pixel noise) is shared across classes, so
    the bag label is decidable only from the motifs.
    """

    n_images: int = 64
    image_size: int = 128
    patch_size: int = 32
    class_balance: float = 0.5
    motif_density: float = 1.5     # expected motif cells per positive image
    dot_rate: float = 3.0          # mean background dots per lattice cell
    dot_dispersion: float = 6.0    # gamma shape for per-cell dot-rate spread
    motif_blobs: tuple[int, int] = (16, 24)
    blob_radius: tuple[float, float] = (1.4, 2.6)
    cluster_spread: float = 4.5    # std of blob centres about the cell centre
    noise_std: float = 0.03
    margin: int = 0                # white (non-tissue) border width
    seed: int = 0

    def __post_init__(self) -> None:
        if self.n_images <= 0:
            raise ConfigurationError("n_images must be positive")
        if not 0.0 < self.class_balance < 1.0:
            raise ConfigurationError("class_balance must be in (0, 1)")
        if self.motif_density < 1.0:
            raise ConfigurationError(
                "motif_density must be >= 1 so positive images get a motif"
            )
        if self.image_size < self.patch_size:
            raise ConfigurationError("image_size must be >= patch_size")
        usable = self.image_size - 2 * self.margin
        if usable < self.patch_size:
            raise ConfigurationError("margin leaves no room for a patch cell")

    @property
    def n_positive(self) -> int:
        return int(round(self.n_images * self.class_balance))


@dataclass
class AugmentConfig:
    """Switches for the patch transforms; everything off is the identity."""

    hflip: bool = False
    vflip: bool = False
    channel_drop: float = 0.0    # probability of zeroing one colour channel
    spatial_jitter: int = 0      # max crop offset, px
    color_jitter: float = 0.0    # max per-channel scale perturbation

    def enabled(self) -> bool:
        return bool(
            self.hflip
            or self.vflip
            or self.channel_drop > 0
            or self.spatial_jitter > 0
            or self.color_jitter > 0
        )


# Appendix-B style pretraining augmentation: flips on tiles, channel dropping
# and spatial jitter at the sub-patch level.
CPC_AUGMENT = AugmentConfig(hflip=True, vflip=True, channel_drop=0.25, spatial_jitter=2)


@dataclass
class MilLossConfig:
    """Bag-loss selection: regularized smooth margin ("svm_kl") or plain CE."""

    mode: str = "svm_kl"
    margin: float = 1.0
    tau: float = 1.0
    kl_coefficient: float = 0.5

    def __post_init__(self) -> None:
        if self.mode not in ("svm_kl", "ce"):
            raise ConfigurationError(f"unknown loss mode {self.mode!r}")
        if self.tau <= 0:
            raise ConfigurationError("tau must be positive")
        if self.margin < 0 or self.kl_coefficient < 0:
            raise ConfigurationError("margin and kl_coefficient must be >= 0")


@dataclass
class CpcTrainConfig:
    epochs: int = 30
    batch_size: int = CPC_BATCH_SIZE
    learning_rate: float = CPC_LEARNING_RATE
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    offsets: tuple[int, ...] = (1, 2, 3)   # rows predicted below each context row
    tiles_per_image: int | None = 12       # per-epoch subsample; None = all tiles
    negatives: int | None = None           # None = every other vector in the batch
    augment: AugmentConfig = field(default_factory=lambda: AugmentConfig(**vars(CPC_AUGMENT)))
    seed: int = 0
    dtype: str = "float32"

    def __post_init__(self) -> None:
        if self.epochs <= 0 or self.batch_size <= 0:
            raise ConfigurationError("epochs and batch_size must be positive")
        if any(k < 1 for k in self.offsets):
            raise ConfigurationError("prediction offsets must be >= 1")


@dataclass
class TrainConfig:
    mode: str = "frozen"                   # frozen | finetune | scratch
    learning_rate: float | None = None     # None picks the mode default
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.0
    bags_per_step: int = BAGS_PER_STEP
    max_epochs: int = MAX_EPOCHS
    patience: int = PATIENCE
    loss: MilLossConfig = field(default_factory=MilLossConfig)
    attention_dropout: float = 0.25
    augment: AugmentConfig | None = None   # applied to instances when set
    seed: int = 0
    dtype: str = "float32"

    def __post_init__(self) -> None:
        if self.mode not in MIL_LEARNING_RATES:
            raise ConfigurationError(f"unknown training mode {self.mode!r}")
        if self.max_epochs <= 0 or self.patience < 0 or self.bags_per_step <= 0:
            raise ConfigurationError("invalid epoch/patience/batch settings")

    @property
    def effective_lr(self) -> float:
        return MIL_LEARNING_RATES[self.mode] if self.learning_rate is None else self.learning_rate


def read_config_file(path: str | Path) -> dict[str, dict[str, str]]:
    """Read a [section] key = value file into nested string dicts."""
    parser = configparser.ConfigParser()
    read = parser.read(str(path))
    if not read:
        raise ConfigurationError(f"config file not found: {path}")
    return {section: dict(parser.items(section)) for section in parser.sections()}


def dataclass_to_items(obj) -> list[tuple[str, str]]:
    """Flatten a config dataclass to (key, repr) pairs for run manifests."""
    items: list[tuple[str, str]] = []
    for f in fields(obj):
        value = getattr(obj, f.name)
        if hasattr(value, "__dataclass_fields__"):
            items.extend((f"{f.name}.{k}", v) for k, v in dataclass_to_items(value))
        else:
            items.append((f.name, repr(value)))
    return items
