import math
import random

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from msda.data import Example
from msda.encoders import EncoderConfig, build_encoder
from msda.evaluation import accuracy_of
from msda.mixing import (
    GLOBAL,
    AttentionParams,
    ExpertBank,
    MixWeights,
    MixingError,
    attention_weights,
    domain_classifier_weights,
    finetune_average_search,
    mix_average,
    mix_domain_classifier,
    mix_weighted,
    search_static_weights,
    uniform_weights,
)
from msda.seeding import stable_seed

from conftest import assert_grads_match, finite_difference_grads


class TestMixWeights:
    def test_negative_weight_rejected(self):
        with pytest.raises(MixingError):
            MixWeights(torch.tensor([1.2, -0.2]), (0, 1))

    def test_sum_must_be_one(self):
        with pytest.raises(MixingError):
            MixWeights(torch.tensor([0.4, 0.4]), (0, 1))

    def test_member_count_must_match(self):
        with pytest.raises(MixingError):
            MixWeights(torch.tensor([0.5, 0.5]), (0, 1, 2))


class TestAverage:
    def test_forced_arithmetic_mean(self):
        assert mix_average([0.2, 0.4, 0.6], 0.8).item() == pytest.approx(0.5, abs=1e-9)

    def test_identity_when_all_members_agree(self):
        assert mix_average([0.3, 0.3, 0.3], 0.3).item() == pytest.approx(0.3, abs=1e-9)

    def test_third_forced_value(self):
        assert mix_average([0.9, 0.9, 0.1], 0.5).item() == pytest.approx(0.6, abs=1e-9)

    def test_empty_subset_rejected(self):
        with pytest.raises(MixingError):
            mix_average([], 0.5)


class TestWeighted:
    def test_one_hot_selects_member(self):
        w = MixWeights(torch.tensor([0.0, 1.0, 0.0]), (0, 1, 2))
        assert mix_weighted([0.1, 0.7, 0.3], w).item() == pytest.approx(0.7, abs=1e-9)

    def test_uniform_weights_reduce_to_average_exactly(self):
        probs = torch.tensor([0.23, 0.61, 0.18], dtype=torch.float64)
        g = torch.tensor(0.4, dtype=torch.float64)
        members = (0, 1, 2, GLOBAL)
        via_weighted = mix_weighted(torch.cat([probs, g.reshape(1)]), uniform_weights(members))
        via_average = mix_average(probs, g)
        assert via_weighted.item() == via_average.item()

    def test_forced_dot_product(self):
        w = MixWeights(torch.tensor([0.25, 0.25, 0.5]), (0, 1, 2))
        assert mix_weighted([0.2, 0.4, 0.6], w).item() == pytest.approx(0.45, abs=1e-9)

    def test_dimension_mismatch_rejected(self):
        w = MixWeights(torch.tensor([0.5, 0.5]), (0, 1))
        with pytest.raises(MixingError):
            mix_weighted([0.2, 0.4, 0.6], w)


class TestDomainClassifierWeights:
    def test_zero_logits_give_uniform(self):
        d, k = 4, 3
        w = domain_classifier_weights(
            (torch.zeros(d, k, dtype=torch.float64), torch.zeros(k, dtype=torch.float64)),
            torch.randn(d, dtype=torch.float64),
        )
        assert torch.equal(w.weights, torch.full((k,), 1.0 / 3.0, dtype=torch.float64))

    def test_matches_direct_softmax_oracle(self):
        # Rig (weight, bias) so the logits are exactly [10, 0, 0].
        d, k = 2, 3
        weight = torch.zeros(d, k, dtype=torch.float64)
        bias = torch.tensor([10.0, 0.0, 0.0], dtype=torch.float64)
        got = domain_classifier_weights((weight, bias), torch.ones(d, dtype=torch.float64))
        exp = [math.exp(v) for v in (10.0, 0.0, 0.0)]
        oracle = [v / sum(exp) for v in exp]
        assert got.weights.tolist() == pytest.approx(oracle, abs=1e-12)
        assert got.weights[0].item() == pytest.approx(0.99991, abs=1e-5)

    def test_width_mismatch_rejected(self):
        with pytest.raises(MixingError):
            domain_classifier_weights((torch.zeros(3, 2), torch.zeros(2)), torch.zeros(4))

    @settings(max_examples=50, deadline=None)
    @given(st.integers(min_value=0, max_value=2**31 - 1))
    def test_always_sums_to_one(self, seed):
        gen = torch.Generator().manual_seed(seed)
        d, k = 5, 4
        w = domain_classifier_weights(
            (
                torch.randn(d, k, generator=gen, dtype=torch.float64),
                torch.randn(k, generator=gen, dtype=torch.float64),
            ),
            torch.randn(d, generator=gen, dtype=torch.float64),
        )
        assert w.weights.sum().item() == pytest.approx(1.0, abs=1e-9)
        assert (w.weights >= 0).all()


class TestDomainClassifierMix:
    def test_one_hot_selects_expert(self):
        w = MixWeights(torch.tensor([0.0, 0.0, 1.0]), (0, 1, 2))
        assert mix_domain_classifier([0.2, 0.4, 0.6], w).item() == pytest.approx(0.6, abs=1e-9)

    def test_uniform_is_expert_mean(self):
        w = uniform_weights((0, 1, 2))
        assert mix_domain_classifier([0.2, 0.4, 0.6], w).item() == pytest.approx(0.4, abs=1e-9)

    def test_zero_logit_classifier_reduces_to_plain_expert_average(self):
        probs = torch.tensor([0.15, 0.55, 0.95], dtype=torch.float64)
        k = 3
        dc = domain_classifier_weights(
            (torch.zeros(2, k, dtype=torch.float64), torch.zeros(k, dtype=torch.float64)),
            torch.ones(2, dtype=torch.float64),
        )
        assert mix_domain_classifier(probs, dc).item() == mix_weighted(probs, uniform_weights(range(k))).item()

    def test_global_member_rejected(self):
        w = MixWeights(torch.tensor([0.5, 0.5]), (0, GLOBAL))
        with pytest.raises(MixingError):
            mix_domain_classifier([0.2, 0.4], w)

    def test_wrong_member_set_rejected(self):
        w = MixWeights(torch.tensor([0.5, 0.5]), (0, 2))
        with pytest.raises(MixingError):
            mix_domain_classifier([0.2, 0.4], w)


def attention_oracle(query_mat, key_mat, query_rep, member_reps, scale=False):
    """Direct numpy evaluation: q = r_g Q^T, k_m = r_m K^T, softmax(q k^T)."""
    q = np.asarray(query_rep) @ np.asarray(query_mat).T
    k = np.stack([np.asarray(r) for r in member_reps]) @ np.asarray(key_mat).T
    logits = k @ q
    if scale:
        logits = logits / math.sqrt(len(q))
    e = np.exp(logits - logits.max())
    return e / e.sum()


class TestAttention:
    def _params(self, dim, init=None, seed=0):
        p = AttentionParams(dim, seed=seed).double()
        if init is not None:
            with torch.no_grad():
                p.query.copy_(init[0])
                p.key.copy_(init[1])
        return p

    def test_identity_projections_equal_reps_give_uniform(self):
        d = 3
        eye = torch.eye(d, dtype=torch.float64)
        params = self._params(d, (eye, eye))
        rep = torch.tensor([0.5, -1.0, 2.0], dtype=torch.float64)
        w = attention_weights(params, rep, [rep, rep, rep], (0, 1, GLOBAL))
        assert torch.allclose(w.weights, torch.full((3,), 1.0 / 3.0, dtype=torch.float64))

    def test_zero_projections_give_uniform(self):
        d = 4
        params = self._params(d, (torch.zeros(d, d), torch.zeros(d, d)))
        reps = [torch.randn(d, dtype=torch.float64) for _ in range(3)]
        w = attention_weights(params, reps[0], reps, (0, 1, GLOBAL))
        assert torch.allclose(w.weights, torch.full((3,), 1.0 / 3.0, dtype=torch.float64))

    def test_matches_equation_oracle_on_hand_set_inputs(self):
        d = 2
        q_mat = torch.tensor([[1.0, 2.0], [-0.5, 0.25]], dtype=torch.float64)
        k_mat = torch.tensor([[0.7, -1.0], [1.5, 0.1]], dtype=torch.float64)
        params = self._params(d, (q_mat, k_mat))
        r_g = torch.tensor([0.2, -0.4], dtype=torch.float64)
        r_1 = torch.tensor([1.0, 0.5], dtype=torch.float64)
        r_2 = torch.tensor([-0.3, 0.8], dtype=torch.float64)
        got = attention_weights(params, r_g, [r_1, r_2, r_g], (0, 1, GLOBAL))
        oracle = attention_oracle(q_mat.numpy(), k_mat.numpy(), r_g.numpy(), [r_1, r_2, r_g])
        assert got.weights.detach().numpy() == pytest.approx(oracle, abs=1e-12)

    def test_scaling_flag_divides_logits_by_sqrt_d(self):
        d = 4
        gen = torch.Generator().manual_seed(0)
        q_mat = torch.randn(d, d, generator=gen, dtype=torch.float64)
        k_mat = torch.randn(d, d, generator=gen, dtype=torch.float64)
        params = self._params(d, (q_mat, k_mat))
        reps = [torch.randn(d, generator=gen, dtype=torch.float64) for _ in range(3)]
        got = attention_weights(params, reps[0], reps, (0, 1, GLOBAL), scale=True)
        oracle = attention_oracle(q_mat, k_mat, reps[0], reps, scale=True)
        assert got.weights.detach().numpy() == pytest.approx(oracle, abs=1e-12)

    def test_restriction_drops_members_before_softmax(self):
        d = 3
        gen = torch.Generator().manual_seed(3)
        params = self._params(
            d,
            (
                torch.randn(d, d, generator=gen, dtype=torch.float64),
                torch.randn(d, d, generator=gen, dtype=torch.float64),
            ),
        )
        reps = [torch.randn(d, generator=gen, dtype=torch.float64) for _ in range(4)]
        subset = attention_weights(params, reps[3], [reps[0], reps[2], reps[3]], (0, 2, GLOBAL))
        direct = attention_oracle(params.query.detach(), params.key.detach(), reps[3], [reps[0], reps[2], reps[3]])
        assert subset.weights.detach().numpy() == pytest.approx(direct, abs=1e-12)
        # zeroing an excluded member after the softmax would leave weights
        # that no longer sum to one; the subset weights are a true simplex
        full = attention_weights(params, reps[3], reps, (0, 1, 2, GLOBAL))
        zero_masked = full.weights.detach()[torch.tensor([0, 2, 3])]
        assert zero_masked.sum().item() < 1.0 - 1e-6
        assert subset.weights.detach().sum().item() == pytest.approx(1.0, abs=1e-9)

    def test_gradients_match_finite_differences(self):
        d = 6
        params = self._params(d, seed=4)
        gen = torch.Generator().manual_seed(9)
        reps = [torch.randn(d, generator=gen, dtype=torch.float64) for _ in range(4)]

        def loss_fn():
            w = attention_weights(params, reps[3], reps, (0, 1, 2, GLOBAL))
            return (w.weights * torch.tensor([0.3, -0.2, 0.9, 0.1], dtype=torch.float64)).sum()

        loss = loss_fn()
        analytic = torch.autograd.grad(loss, [params.query, params.key])
        fd = finite_difference_grads(loss_fn, [params.query, params.key], max_coords=36, eps=1e-6)
        assert_grads_match(list(analytic), fd, rel_tol=1e-4)

    def test_empty_member_list_rejected(self):
        params = self._params(2)
        with pytest.raises(MixingError):
            attention_weights(params, torch.zeros(2), [], ())

    @settings(max_examples=40, deadline=None)
    @given(st.integers(min_value=0, max_value=2**31 - 1))
    def test_weights_live_on_the_simplex(self, seed):
        gen = torch.Generator().manual_seed(seed)
        d = 5
        params = self._params(d, (torch.randn(d, d, generator=gen), torch.randn(d, d, generator=gen)))
        reps = [torch.randn(d, generator=gen) for _ in range(3)]
        w = attention_weights(params, reps[0], reps, (0, 1, GLOBAL))
        assert (w.weights >= 0).all()
        assert w.weights.sum().item() == pytest.approx(1.0, abs=1e-6)


def _tiny_bank(domains=("a", "b", "c")) -> ExpertBank:
    cfg = dict(dim=8, num_layers=1, vocab_hash_size=64)
    experts = [
        build_encoder(EncoderConfig(seed=10 + i, **cfg)) for i, _ in enumerate(domains)
    ]
    shared = build_encoder(EncoderConfig(seed=99, **cfg))
    return ExpertBank(tuple(domains), experts, shared)


class TestFinetuneSearch:
    def test_draw_normalization(self):
        # a single trial returns its draw normalized to the simplex
        probs = torch.tensor([[0.9, 0.1], [0.8, 0.2], [0.7, 0.3]], dtype=torch.float64)
        got = search_static_weights(probs, (0, 1, GLOBAL), [1, 0], trials=1, seed=5, metric=accuracy_of)
        rng = random.Random(stable_seed("finetune-average", 5))
        draw = [rng.randint(0, 10) for _ in range(3)]
        while not any(draw):
            draw = [rng.randint(0, 10) for _ in range(3)]
        expected = [v / sum(draw) for v in draw]
        assert got.weights.tolist() == pytest.approx(expected, abs=1e-12)
        assert got.weights.sum().item() == pytest.approx(1.0, abs=1e-12)

    def test_exhaustive_rescoring_oracle_agrees(self):
        # expert 1 perfect on validation, the others anti-correlated noise
        n = 40
        labels = [i % 2 for i in range(n)]
        gen = random.Random(17)
        perfect = [0.9 if y == 1 else 0.1 for y in labels]
        noise_a = [gen.random() * 0.5 + (0.5 if y == 0 else 0.0) for y in labels]
        noise_b = [gen.random() for _ in labels]
        gprobs = [gen.random() for _ in labels]
        probs = torch.tensor([noise_a, perfect, noise_b, gprobs], dtype=torch.float64)
        members = (0, 1, 2, GLOBAL)
        trials, seed = 500, 123
        got = search_static_weights(probs, members, labels, trials, seed, accuracy_of)

        # oracle: replay the exact candidate stream and rescore exhaustively
        rng = random.Random(stable_seed("finetune-average", seed))
        best_score, best_weights = -1.0, None
        for _ in range(trials):
            draw = [rng.randint(0, 10) for _ in members]
            while not any(draw):
                draw = [rng.randint(0, 10) for _ in members]
            weights = np.array(draw, dtype=float) / sum(draw)
            mixed = weights @ probs.numpy()
            score = accuracy_of([1 if p >= 0.5 else 0 for p in mixed], labels)
            if score > best_score:
                best_score, best_weights = score, weights
        assert got.weights.detach().numpy() == pytest.approx(best_weights, abs=1e-12)
        assert int(np.argmax(got.weights.detach().numpy())) == 1  # the perfect expert dominates

    def test_single_trial_returned_regardless_of_score(self):
        probs = torch.tensor([[0.1, 0.9], [0.1, 0.9]], dtype=torch.float64)
        got = search_static_weights(probs, (0, GLOBAL), [1, 0], trials=1, seed=0, metric=accuracy_of)
        assert len(got.members) == 2

    def test_empty_validation_rejected(self):
        bank = _tiny_bank()
        with pytest.raises(MixingError):
            finetune_average_search(bank, [], trials=3, seed=0, metric=accuracy_of)

    def test_bank_level_search_orders_members_experts_then_global(self):
        bank = _tiny_bank()
        val = [
            Example(id=f"v{i}", text=f"word{i} thing stuff", domain="a", label=i % 2)
            for i in range(6)
        ]
        w = finetune_average_search(bank, val, trials=4, seed=1, metric=accuracy_of)
        assert w.members == (0, 1, 2, GLOBAL)


class TestExpertBank:
    def test_requires_two_experts(self):
        cfg = dict(dim=8, num_layers=1, vocab_hash_size=64)
        with pytest.raises(MixingError):
            ExpertBank(("a",), [build_encoder(EncoderConfig(**cfg))], build_encoder(EncoderConfig(**cfg)))

    def test_requires_matching_widths(self):
        a = build_encoder(EncoderConfig(dim=8, num_layers=1, vocab_hash_size=64))
        b = build_encoder(EncoderConfig(dim=16, num_layers=1, vocab_hash_size=64))
        g = build_encoder(EncoderConfig(dim=8, num_layers=1, vocab_hash_size=64))
        with pytest.raises(MixingError):
            ExpertBank(("a", "b"), [a, b], g)

    def test_member_probs_shape(self):
        bank = _tiny_bank()
        probs = bank.member_probs(["one thing", "another thing entirely"])
        assert probs.shape == (4, 2)
        assert ((probs > 0) & (probs < 1)).all()
