import math

import numpy as np
import pytest
import torch
from scipy.special import logsumexp

from cpcmil import (
    ConfigurationError,
    CpcTrainConfig,
    NumericError,
    chance_level,
    cpc_pretrain,
    get_profile,
    grid_contrastive_loss,
    info_nce_loss,
    load_pretrained,
    save_pretrained,
)
from cpcmil.context import (
    ContextBlockA,
    ContextBlockB,
    ContextNetwork,
    MaskedConv2d,
    PredictionHeads,
    RowBatchNorm,
    context_forward,
    pad_downshift,
    predict_future,
)
from cpcmil.contrastive import cut_grids
from cpcmil.seeding import seed_torch

TINY = get_profile("tiny")
DESK = get_profile("desk")


# ---------------------------------------------------------------------------
# Independent oracle: InfoNCE over a feature grid, written directly from the
# definition with explicit loops and scipy's logsumexp.
# ---------------------------------------------------------------------------

def oracle_grid_infonce(features, context, heads):
    feats = features.detach().numpy().astype(np.float64)
    ctx = context.detach().numpy().astype(np.float64)
    b, r, c, d = feats.shape
    bank = feats.reshape(-1, d)
    terms = []
    for k in heads.offsets:
        w = heads.heads[str(k)].weight.detach().numpy().astype(np.float64)
        bias = heads.heads[str(k)].bias.detach().numpy().astype(np.float64)
        for bi in range(b):
            for row in range(r - k):
                for col in range(c):
                    pred = w @ ctx[bi, row, col] + bias
                    scores = bank @ pred
                    target = (bi * r + row + k) * c + col
                    terms.append(logsumexp(scores) - scores[target])
    return float(np.mean(terms))


def randomized_heads(dim, offsets, seed=0):
    heads = PredictionHeads(dim, dim, offsets)
    gen = np.random.default_rng(seed)
    with torch.no_grad():
        for head in heads.heads.values():
            head.weight.copy_(torch.from_numpy(gen.normal(0, 0.4, head.weight.shape)))
            head.bias.copy_(torch.from_numpy(gen.normal(0, 0.1, head.bias.shape)))
    return heads


class TestPadDownshift:
    def test_exact_shift(self):
        x = torch.arange(12.0).reshape(1, 1, 3, 4)
        out = pad_downshift(x)
        assert torch.equal(out[0, 0, 0], torch.zeros(4))
        assert torch.equal(out[0, 0, 1], x[0, 0, 0])
        assert torch.equal(out[0, 0, 2], x[0, 0, 1])


class TestMaskedConv:
    def test_effective_weight_rows_below_center_are_zero(self):
        conv = MaskedConv2d(2, 4, 7)
        effective = (conv.weight * conv.mask).detach()
        assert torch.equal(effective[:, :, 4:, :], torch.zeros_like(effective[:, :, 4:, :]))
        assert effective[:, :, :4, :].abs().sum() > 0

    def test_masked_taps_get_zero_gradient(self):
        conv = MaskedConv2d(1, 1, 3)
        out = conv(torch.rand(1, 1, 5, 5))
        out.sum().backward()
        grad = conv.weight.grad
        assert torch.equal(grad[:, :, 2, :], torch.zeros(1, 1, 3))
        assert grad[:, :, :2, :].abs().sum() > 0

    def test_apply_mask_rezeros_after_update(self):
        conv = MaskedConv2d(1, 1, 3)
        with torch.no_grad():
            conv.weight.add_(1.0)  # pollute every tap, as an optimizer step would
        assert conv.weight[0, 0, 2, 0] != 0.0
        conv.apply_mask()
        assert torch.equal(conv.weight[0, 0, 2, :], torch.zeros(3))

    def test_even_kernel_rejected(self):
        with pytest.raises(ConfigurationError):
            MaskedConv2d(1, 1, 4)


class TestRowBatchNorm:
    def test_matches_hand_normalization(self):
        torch.manual_seed(0)
        x = torch.rand(4, 2, 3, 5, dtype=torch.float64)
        norm = RowBatchNorm(2, 3).double().train()
        out = norm(x).detach().numpy()
        arr = x.numpy()
        mean = arr.mean(axis=(0, 3), keepdims=True)
        var = arr.var(axis=(0, 3), keepdims=True)
        want = (arr - mean) / np.sqrt(var + norm.eps)
        assert np.allclose(out, want, atol=1e-12)

    def test_rows_do_not_mix(self):
        # perturbing one row leaves every other row's output bitwise intact
        torch.manual_seed(1)
        norm = RowBatchNorm(2, 4).double().train()
        x = torch.rand(3, 2, 4, 5, dtype=torch.float64)
        base = norm(x.clone()).detach()
        x2 = x.clone()
        x2[:, :, 2, :] += 10.0
        out = norm(x2).detach()
        for row in (0, 1, 3):
            assert torch.equal(out[:, :, row], base[:, :, row])

    def test_running_stats_update_and_eval_use(self):
        norm = RowBatchNorm(1, 2)
        x = torch.ones(2, 1, 2, 3) * 4.0
        norm.train()
        norm(x)
        # one update: running = 0.9 * init + 0.1 * batch
        assert torch.allclose(norm.running_mean, torch.full((1, 2), 0.4))
        assert torch.allclose(norm.running_var, torch.full((1, 2), 0.9))
        norm.eval()
        out = norm(torch.zeros(1, 1, 2, 3))
        want = (0.0 - 0.4) / math.sqrt(0.9 + norm.eps)
        assert torch.allclose(out, torch.full_like(out, want))

    def test_shape_check(self):
        norm = RowBatchNorm(2, 3)
        with pytest.raises(ConfigurationError):
            norm(torch.rand(1, 2, 4, 5))


def randomize_net(net, seed=0):
    gen = np.random.default_rng(seed)
    with torch.no_grad():
        for p in net.parameters():
            p.copy_(torch.from_numpy(gen.normal(0, 0.5, tuple(p.shape))))
        for name, buf in net.named_buffers():
            if name.endswith("running_mean"):
                buf.copy_(torch.from_numpy(gen.normal(0, 0.3, tuple(buf.shape))))
            elif name.endswith("running_var"):
                buf.copy_(torch.from_numpy(gen.uniform(0.5, 1.5, tuple(buf.shape))))
    if hasattr(net, "apply_masks"):
        net.apply_masks()
    elif hasattr(net, "conv") and isinstance(net.conv, MaskedConv2d):
        net.conv.apply_mask()
    return net


class TestCausality:
    def test_block_a_strict(self):
        # output row r must ignore input rows >= r
        block = randomize_net(ContextBlockA(4, 3, rows=5, kernel=7)).double().eval()
        x = torch.rand(2, 4, 5, 5, dtype=torch.float64)
        base = block(x).detach()
        for r in range(5):
            x2 = x.clone()
            x2[:, :, r:, :] = torch.rand_like(x2[:, :, r:, :]) * 3.0
            out = block(x2).detach()
            assert torch.equal(out[:, :, :r + 1], base[:, :, :r + 1])

    def test_block_b_inclusive(self):
        # output row r may see rows <= r but nothing below
        block = randomize_net(ContextBlockB(3, rows=5)).double().eval()
        x = torch.rand(2, 3, 5, 5, dtype=torch.float64)
        base = block(x).detach()
        for r in range(4):
            x2 = x.clone()
            x2[:, :, r + 1 :, :] = torch.rand_like(x2[:, :, r + 1 :, :]) * 3.0
            out = block(x2).detach()
            assert torch.equal(out[:, :, : r + 1], base[:, :, : r + 1])

    def test_network_strict_composed(self):
        net = randomize_net(ContextNetwork(TINY)).double().eval()
        x = torch.rand(2, 8, 3, 3, dtype=torch.float64)
        base = net(x).detach()
        for r in range(3):
            x2 = x.clone()
            x2[:, :, r:, :] = torch.rand_like(x2[:, :, r:, :])
            out = net(x2).detach()
            assert torch.equal(out[:, :, : r + 1], base[:, :, : r + 1])

    def test_first_context_row_is_input_independent(self):
        net = randomize_net(ContextNetwork(TINY)).double().eval()
        a = net(torch.rand(1, 8, 3, 3, dtype=torch.float64)).detach()
        b = net(torch.rand(1, 8, 3, 3, dtype=torch.float64)).detach()
        assert torch.equal(a[:, :, 0], b[:, :, 0])

    def test_layer_count_matches_profile(self):
        assert ContextNetwork(TINY).layer_count == 2 + TINY.blocks_b
        assert ContextNetwork(get_profile("paper")).layer_count == 12


class TestPredictionHeads:
    def test_zero_init_gives_zero_predictions(self):
        heads = PredictionHeads(8, 8, (1, 2))
        out = heads(torch.rand(5, 8), 1)
        assert torch.equal(out, torch.zeros(5, 8))

    def test_offset_validation(self):
        with pytest.raises(ConfigurationError):
            PredictionHeads(4, 4, (0, 1))
        heads = PredictionHeads(4, 4, (1,))
        with pytest.raises(ValueError):
            heads(torch.rand(2, 4), 3)

    def test_predict_future_row_bounds(self):
        heads = randomized_heads(8, (1, 2))
        context = np.random.default_rng(0).normal(size=(3, 3, 8))
        out = predict_future(context, t=0, k=2, heads=heads)
        assert out.shape == (3, 8)
        with pytest.raises(ValueError):
            predict_future(context, t=1, k=2, heads=heads)  # lands outside the grid

    def test_predict_future_matches_affine(self):
        heads = randomized_heads(4, (1,)).double()
        context = np.random.default_rng(1).normal(size=(3, 2, 4))
        out = predict_future(context, t=1, k=1, heads=heads)
        w = heads.heads["1"].weight.detach().numpy()
        bias = heads.heads["1"].bias.detach().numpy()
        assert np.allclose(out, context[1] @ w.T + bias, atol=1e-12)


class TestInfoNce:
    def test_uniform_scores_hit_chance_exactly(self):
        preds = torch.zeros(6, 4, dtype=torch.float64)
        positives = torch.rand(6, 4, dtype=torch.float64)
        negatives = torch.rand(9, 4, dtype=torch.float64)
        loss = info_nce_loss(preds, positives, negatives)
        assert float(loss.detach()) == pytest.approx(math.log(10), abs=1e-12)
        assert chance_level(10) == pytest.approx(math.log(10), abs=0)

    def test_matches_scalar_oracle(self):
        gen = np.random.default_rng(7)
        preds = gen.normal(size=(5, 3))
        pos = gen.normal(size=(5, 3))
        neg = gen.normal(size=(8, 3))
        loss = info_nce_loss(
            torch.from_numpy(preds), torch.from_numpy(pos), torch.from_numpy(neg)
        )
        want = []
        for i in range(5):
            scores = np.concatenate([[preds[i] @ pos[i]], neg @ preds[i]])
            want.append(logsumexp(scores) - scores[0])
        assert float(loss.detach()) == pytest.approx(np.mean(want), abs=1e-12)

    def test_empty_negatives_rejected(self):
        with pytest.raises(ValueError):
            info_nce_loss(torch.rand(2, 3), torch.rand(2, 3), torch.zeros(0, 3))

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError):
            info_nce_loss(torch.rand(2, 3), torch.rand(2, 4), torch.rand(5, 3))


class TestGridLoss:
    def test_dense_matches_loop_oracle(self):
        gen = torch.Generator().manual_seed(0)
        features = torch.randn(2, 3, 3, 8, generator=gen, dtype=torch.float64)
        context = torch.randn(2, 3, 3, 8, generator=gen, dtype=torch.float64)
        heads = randomized_heads(8, (1, 2)).double()
        loss, candidates = grid_contrastive_loss(features, context, heads)
        assert candidates == 2 * 3 * 3
        assert float(loss.detach()) == pytest.approx(
            oracle_grid_infonce(features, context, heads), abs=1e-10
        )

    def test_zero_heads_sit_exactly_at_chance(self):
        gen = torch.Generator().manual_seed(1)
        features = torch.randn(2, 3, 3, 8, generator=gen, dtype=torch.float64)
        context = torch.randn(2, 3, 3, 8, generator=gen, dtype=torch.float64)
        heads = PredictionHeads(8, 8, (1, 2)).double()
        loss, candidates = grid_contrastive_loss(features, context, heads)
        assert float(loss.detach()) == pytest.approx(math.log(candidates), abs=1e-12)

    def test_subsampled_bank(self):
        gen = torch.Generator().manual_seed(2)
        features = torch.randn(2, 3, 3, 8, generator=gen, dtype=torch.float64)
        context = torch.randn(2, 3, 3, 8, generator=gen, dtype=torch.float64)
        heads = PredictionHeads(8, 8, (1,)).double()
        loss, candidates = grid_contrastive_loss(
            features, context, heads, negatives=5, generator=torch.Generator().manual_seed(3)
        )
        assert candidates == 6
        assert float(loss.detach()) == pytest.approx(math.log(6), abs=1e-12)  # zero heads
        with pytest.raises(ConfigurationError):
            grid_contrastive_loss(features, context, heads, negatives=18)

    def test_offset_too_large_rejected(self):
        features = torch.randn(1, 3, 3, 8)
        heads = PredictionHeads(8, 8, (3,))
        with pytest.raises(ConfigurationError):
            grid_contrastive_loss(features, features, heads)


class TestCutGrids:
    def test_matches_manual_slices(self):
        tiles = np.random.default_rng(0).uniform(0, 1, (2, 16, 16, 3)).astype(np.float32)
        grids = cut_grids(tiles, sub=8, stride=4, n=3)
        assert grids.shape == (2, 3, 3, 8, 8, 3)
        assert np.array_equal(grids[1, 2, 1], tiles[1, 8:16, 4:12])


class TestPretraining:
    def make_tiles(self, n=40, size=16, seed=0):
        gen = np.random.default_rng(seed)
        base = gen.uniform(0.2, 0.8, (n, 1, 1, 3))
        noise = gen.normal(0, 0.05, (n, size, size, 3))
        return np.clip(base + noise, 0, 1).astype(np.float32)

    def test_initial_loss_is_exactly_chance(self):
        config = CpcTrainConfig(epochs=1, batch_size=8, seed=0, offsets=(1, 2), augment=None)
        result = cpc_pretrain(self.make_tiles(), TINY, config)
        assert result.chance == pytest.approx(math.log(8 * 9), abs=1e-12)
        assert result.initial_loss == pytest.approx(result.chance, rel=5e-5)

    def test_rerun_bitwise_identical(self):
        config = CpcTrainConfig(epochs=2, batch_size=8, seed=3, offsets=(1, 2))
        a = cpc_pretrain(self.make_tiles(), TINY, config)
        b = cpc_pretrain(self.make_tiles(), TINY, config)
        assert [h["loss"] for h in a.history] == [h["loss"] for h in b.history]
        for pa, pb in zip(a.encoder.parameters(), b.encoder.parameters()):
            assert torch.equal(pa, pb)

    def test_seed_changes_trajectory(self):
        tiles = self.make_tiles()
        a = cpc_pretrain(tiles, TINY, CpcTrainConfig(epochs=1, batch_size=8, seed=0, offsets=(1, 2)))
        b = cpc_pretrain(tiles, TINY, CpcTrainConfig(epochs=1, batch_size=8, seed=1, offsets=(1, 2)))
        assert a.history[-1]["loss"] != b.history[-1]["loss"]

    def test_masks_stay_zero_after_training(self):
        config = CpcTrainConfig(epochs=2, batch_size=8, seed=0, offsets=(1, 2))
        result = cpc_pretrain(self.make_tiles(), TINY, config)
        for conv in result.context_net.masked_convs():
            k = conv.weight.shape[2]
            below = conv.weight[:, :, k // 2 + 1 :, :].detach()
            assert torch.equal(below, torch.zeros_like(below))

    def test_checkpoint_round_trip_reproduces_outputs(self, tmp_path):
        config = CpcTrainConfig(epochs=1, batch_size=8, seed=5, offsets=(1, 2))
        result = cpc_pretrain(self.make_tiles(), TINY, config)
        path = tmp_path / "cpc.ckpt"
        save_pretrained(path, result, TINY)
        profile, loaded = load_pretrained(path)
        assert profile.name == "tiny"
        assert loaded.heads.offsets == (1, 2)
        feats = np.random.default_rng(0).normal(size=(3, 3, 8)).astype(np.float32)
        a = context_forward(feats, result.context_net)
        b = context_forward(feats, loaded.context_net)
        assert np.array_equal(a, b)

    def test_wrong_tile_size_rejected(self):
        config = CpcTrainConfig(epochs=1, batch_size=8, offsets=(1, 2))
        with pytest.raises(ConfigurationError):
            cpc_pretrain(self.make_tiles(size=32), TINY, config)

    def test_nan_loss_raises_numeric_error_with_ids(self):
        # an absurd learning rate overflows the weights after the first step
        config = CpcTrainConfig(epochs=2, batch_size=8, seed=0, offsets=(1, 2),
                                learning_rate=1e30)
        with pytest.raises(NumericError) as err:
            cpc_pretrain(self.make_tiles(), TINY, config)
        assert err.value.batch_ids


class TestContextForward:
    def test_restores_training_flag(self):
        net = ContextNetwork(TINY).train()
        context_forward(np.zeros((3, 3, 8), dtype=np.float32), net)
        assert net.training
