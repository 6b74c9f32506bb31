"""Verification suites: independent oracles for the core numeric contracts.

Each suite re-derives its expected values from first principles (brute-force
pair counting, closed-form losses, sliding-window tiling, finite differences)
and checks the production code against them. The causality and gradient
suites run in 64-bit arithmetic: the 64-bit CPU convolution path reduces via
plain im2col matrix products, so masked-tap zeros stay exact and equality
checks can demand zero tolerance.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from .config import MilLossConfig
from .context import ContextNetwork, PredictionHeads
from .contrastive import grid_contrastive_loss, info_nce_loss
from .data import ForegroundMask, RawImage, extract_patches
from .encoder import PatchEncoder
from .errors import VerificationError
from .metrics import roc_auc
from .mil import MilModel, kl_uniform, mil_loss, smooth_svm_loss
from .profiles import DESK, PAPER, TINY
from .seeding import STREAM_VERIFY, make_rng, seed_torch
from .training import check_gradients


@dataclass
class SuiteResult:
    name: str
    passed: bool
    details: list[str] = field(default_factory=list)

    def line(self) -> str:
        return f"[{'PASS' if self.passed else 'FAIL'}] {self.name}: {'; '.join(self.details)}"


def _randomize(module: torch.nn.Module, rng: np.random.Generator, scale: float = 0.5) -> None:
    """Fill parameters and normalization stats with seeded random values."""
    with torch.no_grad():
        for p in module.parameters():
            p.copy_(torch.from_numpy(rng.normal(0.0, scale, p.shape)).to(p.dtype))
        for name, b in module.named_buffers():
            if name.endswith("running_mean"):
                b.copy_(torch.from_numpy(rng.normal(0.0, 0.3, b.shape)).to(b.dtype))
            elif name.endswith("running_var"):
                b.copy_(torch.from_numpy(rng.uniform(0.5, 1.5, b.shape)).to(b.dtype))
    for m in module.modules():
        if hasattr(m, "apply_mask"):
            m.apply_mask()


# ---------------------------------------------------------------------------
# Suite 1: row causality of the composed context network
# ---------------------------------------------------------------------------

def causality_suite(trials: int = 1000, seed: int = 0) -> SuiteResult:
    """Randomized perturbation trials: changing feature rows >= r must leave
    context rows <= r exactly unchanged (strictly-above receptive fields)."""
    rng = make_rng(seed, STREAM_VERIFY, 1)
    profile = DESK
    rows = profile.grid_size
    net = ContextNetwork(profile).double().eval()
    failures = 0
    for trial in range(trials):
        if trial % 100 == 0:
            _randomize(net, rng)
        x = torch.from_numpy(rng.normal(0.0, 1.0, (1, profile.feature_dim, rows, rows)))
        r = int(rng.integers(0, rows))
        with torch.no_grad():
            base = net(x)
            perturbed = x.clone()
            perturbed[:, :, r:, :] = torch.from_numpy(
                rng.normal(0.0, 1.0, (1, profile.feature_dim, rows - r, rows))
            )
            out = net(perturbed)
        if not torch.equal(base[:, :, : r + 1, :], out[:, :, : r + 1, :]):
            failures += 1
    return SuiteResult(
        name="causality",
        passed=failures == 0,
        details=[f"{trials} perturbation trials", f"{failures} violations", "zero tolerance"],
    )


# ---------------------------------------------------------------------------
# Suite 2: finite-difference gradient checks
# ---------------------------------------------------------------------------

def gradient_suite(seed: int = 0, eps: float = 1e-5, tolerance: float = 1e-4) -> SuiteResult:
    rng = make_rng(seed, STREAM_VERIFY, 2)
    details = []
    worst = 0.0

    def run(label, loss_fn, named_params):
        nonlocal worst
        report = check_gradients(loss_fn, named_params, eps=eps, tolerance=tolerance)
        details.append(f"{label}: max rel err {report.max_rel_error:.2e}")
        worst = max(worst, report.max_rel_error)

    # contrastive loss against leaf inputs
    preds = torch.from_numpy(rng.normal(0, 1, (4, 6))).requires_grad_()
    pos = torch.from_numpy(rng.normal(0, 1, (4, 6))).requires_grad_()
    neg = torch.from_numpy(rng.normal(0, 1, (4, 5, 6))).requires_grad_()
    run(
        "info_nce/inputs",
        lambda: info_nce_loss(preds, pos, neg),
        [("predictions", preds), ("positives", pos), ("negatives", neg)],
    )

    # contrastive loss through the tiny context network and heads
    seed_torch(seed, STREAM_VERIFY, 21)
    net = ContextNetwork(TINY).double()
    heads = PredictionHeads(TINY.feature_dim, TINY.feature_dim, (1, 2)).double()
    _randomize(net, rng)
    _randomize(heads, rng)
    net.eval()
    features = torch.from_numpy(rng.normal(0, 1, (2, 3, 3, TINY.feature_dim)))

    def context_loss():
        ctx = net(features.permute(0, 3, 1, 2)).permute(0, 2, 3, 1)
        return grid_contrastive_loss(features, ctx, heads)[0]

    run(
        "info_nce/context+heads",
        context_loss,
        list(net.named_parameters()) + list(heads.named_parameters()),
    )

    # encoder path: random linear functional of tiny-profile embeddings
    seed_torch(seed, STREAM_VERIFY, 22)
    encoder = PatchEncoder(TINY).double()
    pixels = torch.from_numpy(rng.uniform(0, 1, (2, 3, 8, 8)))
    probe = torch.from_numpy(rng.normal(0, 1, (2, TINY.feature_dim)))
    run(
        "encode_patch",
        lambda: (encoder(pixels) * probe).sum(),
        list(encoder.named_parameters()),
    )

    # bare losses against leaf inputs
    scores = torch.from_numpy(rng.normal(0, 1, (2,))).requires_grad_()
    run("smooth_svm", lambda: smooth_svm_loss(scores, 1), [("scores", scores)])
    logits = torch.from_numpy(rng.normal(0, 1, (5,))).requires_grad_()
    run("kl_uniform", lambda: kl_uniform(F.softmax(logits, dim=0)), [("logits", logits)])

    # full MIL paths, one small bag
    bag_pixels = torch.from_numpy(rng.uniform(0, 1, (3, 3, 8, 8)))
    for mode, loss_cfg, label in (
        ("frozen", MilLossConfig(mode="svm_kl"), 0),
        ("finetune", MilLossConfig(mode="ce"), 1),
    ):
        seed_torch(seed, STREAM_VERIFY, 23)
        frozen_encoder = PatchEncoder(TINY).double() if mode == "frozen" else None
        model = MilModel(TINY, mode, encoder=frozen_encoder).double()
        model.eval()  # dropout off so the loss is deterministic

        def mil_path(model=model, cfg=loss_cfg, y=label):
            out = model(bag_pixels)
            return mil_loss(out.scores, out.attention, y, cfg)

        run(
            f"mil_loss/{mode}/{loss_cfg.mode}",
            mil_path,
            [(n, p) for n, p in model.named_parameters() if p.requires_grad],
        )

    return SuiteResult(
        name="gradients",
        passed=worst < tolerance,
        details=details + [f"overall max {worst:.2e} (tolerance {tolerance:g})"],
    )


# ---------------------------------------------------------------------------
# Suite 3: closed-form loss values
# ---------------------------------------------------------------------------

def loss_value_suite(seed: int = 0) -> SuiteResult:
    rng = make_rng(seed, STREAM_VERIFY, 3)
    checks = []

    # all-equal candidate scores: loss is exactly ln(K+1)
    k = 7
    preds = torch.zeros(3, 5, dtype=torch.float64)
    pos = torch.from_numpy(rng.normal(0, 1, (3, 5)))
    neg = torch.from_numpy(rng.normal(0, 1, (3, k, 5)))
    value = float(info_nce_loss(preds, pos, neg))
    checks.append(("uniform info_nce = ln(K+1)", abs(value - math.log(k + 1)) < 1e-9))

    # equal scores, margin 1, tau 1: log(1 + e)
    value = float(smooth_svm_loss(torch.zeros(2, dtype=torch.float64), 1))
    checks.append(("equal-score svm = log(1+e)", abs(value - math.log(1 + math.e)) < 1e-9))

    # uniform attention: exactly zero
    value = float(kl_uniform(torch.full((4,), 0.25, dtype=torch.float64)))
    checks.append(("kl(uniform) = 0", value == 0.0))

    # near-one-hot, N=4: approaches ln 4
    eps = 1e-9
    a = torch.tensor([1 - 3 * eps, eps, eps, eps], dtype=torch.float64)
    checks.append(("kl(one-hot, N=4) -> ln 4", abs(float(kl_uniform(a)) - math.log(4)) < 1e-6))

    # tau -> 0 recovers the hard multiclass hinge
    max_gap = 0.0
    for _ in range(100):
        s = torch.from_numpy(rng.normal(0, 2, (2,)))
        y = int(rng.integers(0, 2))
        smooth = float(smooth_svm_loss(s, y, margin=1.0, tau=1e-6))
        hinge = max(0.0, float(s[1 - y]) + 1.0 - float(s[y]))
        max_gap = max(max_gap, abs(smooth - hinge))
    checks.append((f"tau->0 hinge (max gap {max_gap:.1e})", max_gap < 1e-4))

    return SuiteResult(
        name="loss-values",
        passed=all(ok for _, ok in checks),
        details=[f"{name}: {'ok' if ok else 'FAIL'}" for name, ok in checks],
    )


# ---------------------------------------------------------------------------
# Suite 4: rank AUC against the brute-force pairwise statistic
# ---------------------------------------------------------------------------

def pairwise_auc(labels, scores) -> float:
    """O(P*N) oracle: mean over all (positive, negative) pairs with ties half-credited."""
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    total = 0.0
    for p in pos:
        for n in neg:
            total += 1.0 if p > n else (0.5 if p == n else 0.0)
    return total / (len(pos) * len(neg))


def auc_suite(seed: int = 0, instances: int = 100, points: int = 200) -> SuiteResult:
    rng = make_rng(seed, STREAM_VERIFY, 4)
    worst = 0.0
    for _ in range(instances):
        labels = rng.integers(0, 2, points)
        if labels.min() == labels.max():
            labels[0] = 1 - labels[0]
        # quantized scores force ties, mixed with continuous ones
        scores = np.where(
            rng.random(points) < 0.5,
            np.round(rng.normal(0, 1, points), 1),
            rng.normal(0, 1, points),
        )
        fast = roc_auc(labels.tolist(), scores.tolist())
        slow = pairwise_auc(labels.tolist(), scores.tolist())
        worst = max(worst, abs(fast - slow))
    return SuiteResult(
        name="auc-oracle",
        passed=worst < 1e-12,
        details=[f"{instances} instances of {points} points", f"max |diff| {worst:.2e}"],
    )


# ---------------------------------------------------------------------------
# Suite 5: frozen-head parameter count, full-scale profile
# ---------------------------------------------------------------------------

def param_count_suite() -> SuiteResult:
    d, r, h = PAPER.feature_dim, PAPER.reduced_dim, PAPER.attention_hidden
    expected = (d * r + r) + (h * r) + (h * r) + h + (r * 2 + 2)
    seed_torch(0, STREAM_VERIFY, 5)
    model = MilModel(PAPER, "frozen", encoder=PatchEncoder(PAPER))
    counted = model.count_trainable_params()
    return SuiteResult(
        name="param-count",
        passed=counted == expected == 788226 and expected < 800000,
        details=[f"counted {counted}", f"shape arithmetic {expected}", "limit 800000"],
    )


# ---------------------------------------------------------------------------
# Suite 6: tiling geometry against a sliding-window oracle
# ---------------------------------------------------------------------------

def _window_count(h: int, w: int, size: int, stride: int) -> int:
    count = 0
    r = 0
    while r + size <= h:
        c = 0
        while c + size <= w:
            count += 1
            c += stride
        r += stride
    return count


def geometry_suite() -> SuiteResult:
    checks = [("tile 256 / sub 64 / overlap 0.5 grid", PAPER.grid_size == 7)]
    image = RawImage(np.zeros((2048, 1536, 3), dtype=np.float32), id="oracle")
    mask = ForegroundMask(mask=np.ones((2048, 1536), dtype=bool))
    for overlap, stride, expected in ((0.0, 256, 48), (0.5, 128, 165)):
        got = len(extract_patches(image, mask, size=256, overlap=overlap))
        oracle = _window_count(2048, 1536, 256, stride)
        checks.append(
            (f"2048x1536 overlap {overlap} -> {got}", got == oracle == expected)
        )
    return SuiteResult(
        name="geometry",
        passed=all(ok for _, ok in checks),
        details=[f"{name}: {'ok' if ok else 'FAIL'}" for name, ok in checks],
    )


def run_all(seed: int = 0, causality_trials: int = 1000) -> list[SuiteResult]:
    return [
        causality_suite(trials=causality_trials, seed=seed),
        gradient_suite(seed=seed),
        loss_value_suite(seed=seed),
        auc_suite(seed=seed),
        param_count_suite(),
        geometry_suite(),
    ]


def require_all(results: list[SuiteResult]) -> None:
    failed = [r.name for r in results if not r.passed]
    if failed:
        raise VerificationError(f"verification suites failed: {', '.join(failed)}")
