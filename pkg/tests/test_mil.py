import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from cpcmil import (
    ConfigurationError,
    GatedAttention,
    MilLossConfig,
    MilModel,
    PatchEncoder,
    get_profile,
    kl_uniform,
    load_mil_model,
    mil_loss,
    save_mil_model,
    smooth_svm_loss,
)
from cpcmil.mil import attention_weights, bag_embedding, classify_bag
from cpcmil.seeding import seed_torch

DESK = get_profile("desk")
TINY = get_profile("tiny")


def hand_attention() -> GatedAttention:
    att = GatedAttention(in_dim=2, hidden=2, dropout=0.0)
    with torch.no_grad():
        att.attention_v.weight.copy_(torch.tensor([[1.0, -0.5], [0.25, 0.75]]))
        att.attention_u.weight.copy_(torch.tensor([[0.5, 0.5], [-1.0, 0.0]]))
        att.attention_w.weight.copy_(torch.tensor([[2.0, -1.0]]))
    return att.double().eval()


HAND_Z = torch.tensor([[0.6, -0.4], [0.1, 0.2]], dtype=torch.float64)


class TestGatedAttention:
    def test_matches_hand_computation(self):
        # worked example: gate = tanh(Vz) * sigm(Uz), logits = w . gate
        att = hand_attention()
        with torch.no_grad():
            logits = att.logits(HAND_Z)
            weights = att(HAND_Z)
        assert float(logits[0]) == pytest.approx(0.74996744098449275, abs=1e-15)
        assert float(logits[1]) == pytest.approx(-0.082290305431834326, abs=1e-15)
        assert float(weights[0]) == pytest.approx(0.69683210668671125, abs=1e-15)
        assert float(weights[1]) == pytest.approx(0.30316789331328869, abs=1e-15)

    def test_weights_form_distribution(self):
        seed_torch(0)
        att = GatedAttention(8, 4).eval()
        with torch.no_grad():
            a = att(torch.randn(11, 8))
        assert float(a.sum()) == pytest.approx(1.0, abs=1e-6)
        assert (a > 0).all()

    def test_no_biases(self):
        att = GatedAttention(8, 4)
        for lin in (att.attention_v, att.attention_u, att.attention_w):
            assert lin.bias is None

    def test_dropout_only_in_training(self):
        seed_torch(1)
        att = GatedAttention(8, 4, dropout=0.5)
        z = torch.randn(6, 8)
        att.eval()
        assert torch.equal(att.logits(z), att.logits(z))
        att.train()
        torch.manual_seed(0)
        a = att.logits(z)
        torch.manual_seed(1)
        b = att.logits(z)
        assert not torch.equal(a, b)


class TestBagOps:
    def test_bag_embedding_is_convex_combination(self):
        att = hand_attention()
        with torch.no_grad():
            a = att(HAND_Z)
            bag = bag_embedding(HAND_Z, a)
        assert float(bag[0]) == pytest.approx(0.4484160533433556, abs=1e-15)
        assert float(bag[1]) == pytest.approx(-0.21809926401202676, abs=1e-15)

    def test_length_mismatch_rejected(self):
        with pytest.raises(ValueError):
            bag_embedding(torch.rand(3, 2), torch.rand(2))

    def test_classify_bag_probability(self):
        clf = torch.nn.Linear(2, 2)
        with torch.no_grad():
            clf.weight.copy_(torch.eye(2))
            clf.bias.zero_()
        with torch.no_grad():
            scores, prob = classify_bag(torch.tensor([0.0, 1.0]), clf)
        assert torch.allclose(scores, torch.tensor([0.0, 1.0]))
        assert float(prob) == pytest.approx(1 / (1 + math.exp(-1.0)), abs=1e-7)

    def test_attention_weights_delegates(self):
        att = hand_attention()
        with torch.no_grad():
            assert torch.equal(attention_weights(HAND_Z, att), att(HAND_Z))


class TestLosses:
    def test_smooth_svm_frozen_values(self):
        scores = torch.tensor([0.2, -0.1], dtype=torch.float64)
        assert float(smooth_svm_loss(scores, 1)) == pytest.approx(
            1.5410084538329922, abs=1e-15
        )
        assert float(smooth_svm_loss(scores, 0)) == pytest.approx(
            1.1031860488854579, abs=1e-15
        )

    def test_equal_scores_closed_form(self):
        scores = torch.zeros(2, dtype=torch.float64)
        assert float(smooth_svm_loss(scores, 1)) == pytest.approx(
            math.log(1 + math.e), abs=1e-12
        )

    def test_tau_limit_approaches_hinge(self):
        gen = np.random.default_rng(0)
        for _ in range(50):
            scores = torch.tensor(gen.normal(0, 2, 2))
            y = int(gen.integers(0, 2))
            smooth = float(smooth_svm_loss(scores, y, margin=1.0, tau=1e-7))
            hinge = max(0.0, 1.0 + float(scores[1 - y]) - float(scores[y]))
            assert smooth == pytest.approx(hinge, abs=1e-5)

    def test_tau_must_be_positive(self):
        with pytest.raises(ValueError):
            smooth_svm_loss(torch.zeros(2), 0, tau=0.0)

    def test_kl_uniform_frozen_value(self):
        a = torch.tensor([0.7, 0.2, 0.1], dtype=torch.float64)
        assert float(kl_uniform(a)) == pytest.approx(0.29679373612477222, abs=1e-15)

    def test_kl_uniform_zero_at_uniform(self):
        a = torch.full((4,), 0.25, dtype=torch.float64)
        assert float(kl_uniform(a)) == 0.0

    @given(st.integers(2, 16), st.integers(0, 10_000))
    @settings(max_examples=40, deadline=None)
    def test_kl_uniform_nonnegative(self, n, seed):
        gen = np.random.default_rng(seed)
        a = torch.tensor(gen.dirichlet(np.ones(n)))
        assert float(kl_uniform(a)) >= -1e-12

    def test_mil_loss_modes(self):
        scores = torch.tensor([0.2, -0.1], dtype=torch.float64)
        attention = torch.tensor([0.7, 0.2, 0.1], dtype=torch.float64)
        svm_kl = MilLossConfig(mode="svm_kl", kl_coefficient=0.5)
        ce = MilLossConfig(mode="ce")
        # negative bag: svm + beta * kl
        want = 1.1031860488854579 + 0.5 * 0.29679373612477222
        assert float(mil_loss(scores, attention, 0, svm_kl)) == pytest.approx(want, abs=1e-14)
        # positive bag: no regularizer
        assert float(mil_loss(scores, attention, 1, svm_kl)) == pytest.approx(
            1.5410084538329922, abs=1e-14
        )
        # ce ignores attention entirely
        assert float(mil_loss(scores, attention, 1, ce)) == pytest.approx(
            0.85435524446852706, abs=1e-14
        )


def fresh_model(mode="frozen", profile=DESK, seed=0) -> MilModel:
    seed_torch(seed)
    encoder = PatchEncoder(profile)
    return MilModel(profile, mode, encoder=encoder)


class TestMilModel:
    def test_frozen_trainable_param_count(self):
        model = fresh_model("frozen")
        # reducer 64*32+32, V and U 32*16, w 16, classifier 32*2+2
        assert model.count_trainable_params() == 3186

    def test_frozen_encoder_gets_no_gradient(self):
        model = fresh_model("frozen").train()
        out = model(torch.rand(5, 3, 32, 32))
        mil_loss(out.scores, out.attention, 0, MilLossConfig()).backward()
        assert all(p.grad is None for p in model.encoder.parameters())
        assert model.reducer.linear.weight.grad is not None

    def test_finetune_encoder_gets_gradient(self):
        model = fresh_model("finetune").train()
        out = model(torch.rand(5, 3, 32, 32))
        mil_loss(out.scores, out.attention, 1, MilLossConfig()).backward()
        grads = [p.grad for p in model.encoder.parameters()]
        assert any(g is not None and g.abs().sum() > 0 for g in grads)

    def test_permutation_invariance(self):
        model = fresh_model("frozen").double().eval()
        z = torch.rand(9, 64, dtype=torch.float64)
        perm = torch.randperm(9, generator=torch.Generator().manual_seed(0))
        with torch.no_grad():
            base = model.forward_embeddings(z)
            out = model.forward_embeddings(z[perm])
        assert float(out.probability) == pytest.approx(float(base.probability), abs=1e-12)
        assert torch.allclose(out.attention, base.attention[perm], atol=1e-12)

    def test_empty_bag_rejected(self):
        model = fresh_model("frozen")
        with pytest.raises(ValueError):
            model(torch.zeros(0, 3, 32, 32))
        with pytest.raises(ValueError):
            model.forward_embeddings(torch.zeros(0, 64))

    def test_mode_validation(self):
        with pytest.raises(ConfigurationError):
            MilModel(DESK, "linear-probe")
        with pytest.raises(ConfigurationError):
            MilModel(DESK, "frozen", encoder=None)

    def test_output_shapes_and_consistency(self):
        model = fresh_model("finetune", profile=TINY).eval()
        with torch.no_grad():
            out = model(torch.rand(4, 3, 8, 8))
        assert out.scores.shape == (2,)
        assert out.attention.shape == (4,)
        assert out.hidden.shape == (4, 8)
        assert float(out.attention.sum()) == pytest.approx(1.0, abs=1e-6)
        assert float(out.probability) == pytest.approx(
            float(torch.softmax(out.scores, dim=0)[1]), abs=1e-7
        )

    def test_save_load_round_trip(self, tmp_path):
        for mode in ("frozen", "finetune"):
            model = fresh_model(mode, profile=TINY, seed=3).eval()
            path = tmp_path / f"{mode}.ckpt"
            save_mil_model(path, model)
            loaded = load_mil_model(path)
            assert loaded.mode == mode
            assert (loaded.reducer is not None) == (mode == "frozen")
            bag = torch.rand(5, 3, 8, 8)
            with torch.no_grad():
                a = model(bag)
                b = loaded(bag)
            assert torch.equal(a.scores, b.scores)
            assert torch.equal(a.attention, b.attention)
