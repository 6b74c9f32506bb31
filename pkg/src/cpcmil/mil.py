"""Gated-attention bag classification.

Instances are embedded, attention-pooled into one bag embedding, and scored
by a two-logit linear classifier. Two loss modes are selectable per run: a
temperature-smoothed multiclass SVM margin loss plus, on negative bags only,
a KL-to-uniform penalty pushing attention toward equal usage of instances;
or plain cross-entropy with no regularizer.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .config import MilLossConfig
from .encoder import FeatureReducer, PatchEncoder, init_he_uniform
from .errors import ConfigurationError
from .profiles import Profile


class GatedAttention(nn.Module):
    """Instance weights a_k = softmax_k(w^T (tanh(V z_k) * sigm(U z_k))).

    V, U, and w are bias-free. Dropout acts on the gated hidden layer in
    training mode only.
    """

    def __init__(self, in_dim: int, hidden: int, dropout: float = 0.25):
        super().__init__()
        self.attention_v = nn.Linear(in_dim, hidden, bias=False)
        self.attention_u = nn.Linear(in_dim, hidden, bias=False)
        self.attention_w = nn.Linear(hidden, 1, bias=False)
        self.dropout = nn.Dropout(dropout)
        init_he_uniform(self)

    def logits(self, z: torch.Tensor) -> torch.Tensor:
        gate = torch.tanh(self.attention_v(z)) * torch.sigmoid(self.attention_u(z))
        return self.attention_w(self.dropout(gate)).squeeze(-1)

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        return F.softmax(self.logits(z), dim=0)


@dataclass
class MilOutput:
    scores: torch.Tensor        # (2,) class scores (negative, positive)
    probability: torch.Tensor   # scalar P(positive)
    attention: torch.Tensor     # (N,) softmax weights
    logits: torch.Tensor        # (N,) pre-softmax attention logits
    hidden: torch.Tensor        # (N, D') pooled-over embeddings
    bag_embedding: torch.Tensor  # (D',)


class MilModel(nn.Module):
    """Attention-MIL head over a patch encoder.

    frozen mode: the encoder is a fixed feature extractor (no gradient); a
    trainable affine reducer shrinks its embeddings before pooling.
    finetune mode: the attention network connects directly to the encoder and
    gradients flow end to end; no reducer.
    """

    def __init__(
        self,
        profile: Profile,
        mode: str,
        encoder: PatchEncoder | None = None,
        attention_dropout: float = 0.25,
    ):
        super().__init__()
        if mode not in ("frozen", "finetune"):
            raise ConfigurationError(f"unknown MIL mode {mode!r}")
        self.profile = profile
        self.mode = mode
        if mode == "frozen":
            if encoder is None:
                raise ConfigurationError("frozen mode requires a pretrained encoder")
            self.encoder = encoder
            self.encoder.requires_grad_(False)
            self.reducer = FeatureReducer(profile.feature_dim, profile.reduced_dim)
            head_dim = profile.reduced_dim
        else:
            self.encoder = encoder if encoder is not None else PatchEncoder(profile)
            self.reducer = None
            head_dim = profile.feature_dim
        self.attention = GatedAttention(head_dim, profile.attention_hidden, attention_dropout)
        self.classifier = nn.Linear(head_dim, 2)
        init_he_uniform(self.classifier)

    def head_modules(self) -> list[nn.Module]:
        mods: list[nn.Module] = [self.attention, self.classifier]
        if self.reducer is not None:
            mods.append(self.reducer)
        return mods

    def forward_embeddings(self, z: torch.Tensor) -> MilOutput:
        """Pool precomputed encoder embeddings (N, D) into one bag score pair."""
        if z.ndim != 2 or z.shape[0] == 0:
            raise ValueError(f"expected a non-empty (N, D) embedding matrix, got {tuple(z.shape)}")
        h = self.reducer(z) if self.reducer is not None else z
        logits = self.attention.logits(h)
        a = F.softmax(logits, dim=0)
        bag = a @ h
        scores = self.classifier(bag)
        return MilOutput(
            scores=scores,
            probability=F.softmax(scores, dim=0)[1],
            attention=a,
            logits=logits,
            hidden=h,
            bag_embedding=bag,
        )

    def forward(self, instances: torch.Tensor) -> MilOutput:
        """Encode a whole bag (N, 3, S, S) and pool it; one bag per call."""
        if instances.shape[0] == 0:
            raise ValueError("empty bag")
        if self.mode == "frozen":
            with torch.no_grad():
                z = self.encoder(instances)
            z = z.detach()
        else:
            z = self.encoder(instances)
        return self.forward_embeddings(z)

    def count_trainable_params(self) -> int:
        return sum(p.numel() for p in self.parameters() if p.requires_grad)


def attention_weights(z: torch.Tensor, attention: GatedAttention) -> torch.Tensor:
    """Softmax attention profile for embeddings (N, D): positive, sums to one."""
    return attention(z)


def bag_embedding(z: torch.Tensor, a: torch.Tensor) -> torch.Tensor:
    """Convex combination sum_k a_k z_k."""
    if z.shape[0] != a.shape[0]:
        raise ValueError(f"{z.shape[0]} embeddings vs {a.shape[0]} weights")
    return a @ z


def classify_bag(bag: torch.Tensor, classifier: nn.Linear) -> tuple[torch.Tensor, torch.Tensor]:
    """Affine score pair and softmax positive-class probability."""
    scores = classifier(bag)
    return scores, F.softmax(scores, dim=-1)[..., 1]


def smooth_svm_loss(
    scores: torch.Tensor, label: int | torch.Tensor, margin: float = 1.0, tau: float = 1.0
) -> torch.Tensor:
    """L = tau * logsumexp_j((s_j + margin*[j != y]) / tau) - s_y.

    Non-negative and smooth; approaches the hard multiclass hinge as tau -> 0.
    """
    if tau <= 0:
        raise ValueError(f"tau must be positive, got {tau}")
    y = int(label) if not isinstance(label, torch.Tensor) else int(label.item())
    delta = torch.full_like(scores, margin)
    delta[..., y] = 0.0
    return tau * torch.logsumexp((scores + delta) / tau, dim=-1) - scores[..., y]


def kl_uniform(a: torch.Tensor) -> torch.Tensor:
    """D_KL(a || uniform) = sum_k a_k log(a_k N); zero exactly when uniform."""
    n = a.shape[0]
    return (a * torch.log(a * n)).sum()


def mil_loss(
    scores: torch.Tensor,
    attention: torch.Tensor,
    label: int,
    config: MilLossConfig,
) -> torch.Tensor:
    """Bag loss: smooth-SVM plus KL-to-uniform on negative bags, or plain CE."""
    if config.mode == "ce":
        return F.cross_entropy(scores.unsqueeze(0), torch.tensor([int(label)]))
    loss = smooth_svm_loss(scores, label, config.margin, config.tau)
    if int(label) == 0 and config.kl_coefficient > 0:
        loss = loss + config.kl_coefficient * kl_uniform(attention)
    return loss


def save_mil_model(path, model: MilModel) -> None:
    from . import checkpoint as ckpt

    sections = {
        "encoder": model.encoder,
        "attention": model.attention,
        "classifier": model.classifier,
    }
    if model.reducer is not None:
        sections["reducer"] = model.reducer
    ckpt.save_checkpoint(path, sections, model.profile.name)


def load_mil_model(path) -> MilModel:
    """Rebuild a trained bag classifier; mode is implied by the stored sections."""
    from . import checkpoint as ckpt
    from .profiles import get_profile

    profile_name, sections = ckpt.load_checkpoint(path)
    profile = get_profile(profile_name)
    mode = "frozen" if "reducer" in sections else "finetune"
    model = MilModel(profile, mode, encoder=PatchEncoder(profile))
    ckpt.load_into(model.encoder, sections["encoder"])
    ckpt.load_into(model.attention, sections["attention"])
    ckpt.load_into(model.classifier, sections["classifier"])
    if model.reducer is not None:
        ckpt.load_into(model.reducer, sections["reducer"])
    model.eval()
    return model
