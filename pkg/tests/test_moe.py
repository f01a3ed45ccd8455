import numpy as np
import pytest

from prime import autodiff as ad
from prime import moe
from prime import nn
from prime.data import MODALITIES, Modality
from prime.errors import InvalidConfig
from prime.tokenizer import TokenBlock


def blocks_with_tq(t_q=2, d=8, seed=0):
    rng = np.random.default_rng(seed)
    out = {}
    for m in MODALITIES:
        out[m] = TokenBlock(ad.Tensor(rng.normal(size=(t_q, d))), m,
                            np.ones(t_q, dtype=bool))
    return out


class TestFuseConcat:
    def test_labels_fixed_order(self):
        seq = moe.fuse_concat(blocks_with_tq())
        assert seq.tokens.data.shape == (6, 8)
        assert list(seq.modality_of_token) == [0, 0, 1, 1, 2, 2]

    def test_reliability_is_provenance_and_keep(self):
        blocks = blocks_with_tq()
        blocks[Modality.RNA].provenance[:] = [True, False]
        keep = {
            Modality.IMAGE: np.array([True, False]),
            Modality.RNA: np.array([True, True]),
            Modality.TEXT: np.array([False, False]),
        }
        seq = moe.fuse_concat(blocks, keep)
        assert list(seq.reliability) == [True, False, True, False, False, False]

    def test_round_trip_recovers_blocks(self):
        blocks = blocks_with_tq()
        seq = moe.fuse_concat(blocks)
        parts = moe.split_by_modality(seq)
        for m in MODALITIES:
            assert np.array_equal(parts[m].data, blocks[m].tokens.data)

    def test_missing_block_rejected(self):
        blocks = blocks_with_tq()
        del blocks[Modality.TEXT]
        with pytest.raises(InvalidConfig):
            moe.fuse_concat(blocks)


class TestMoeFeedForward:
    def test_single_expert_equals_plain_ffn(self):
        rng = np.random.default_rng(1)
        layer = moe.MoeFeedForward(rng, 8, n_experts=1, top_k=1)
        x = ad.Tensor(np.random.default_rng(2).normal(size=(5, 8)))
        labels = np.zeros(5, dtype=np.intp)
        with ad.no_grad():
            out, stats = layer(x, labels)
            plain = layer.experts[0](x)
        assert np.allclose(out.data, plain.data, atol=1e-12)
        assert np.allclose(stats.frac_tokens, [1.0])

    def test_full_topk_matches_dense_oracle(self):
        rng = np.random.default_rng(3)
        layer = moe.MoeFeedForward(rng, 8, n_experts=3, top_k=3)
        x = ad.Tensor(np.random.default_rng(4).normal(size=(6, 8)))
        labels = np.array([0, 0, 1, 1, 2, 2], dtype=np.intp)
        with ad.no_grad():
            out, _ = layer(x, labels)
            gate_in = ad.add(x, ad.take_rows(layer.modality_embed, labels))
            probs = ad.softmax(layer.gate(gate_in), axis=-1).data
            oracle = np.zeros((6, 8))
            for e in range(3):
                oracle += probs[:, e : e + 1] * layer.experts[e](x).data
        assert np.allclose(out.data, oracle, atol=1e-12)

    def test_modality_embedding_can_split_equal_tokens(self):
        rng = np.random.default_rng(5)
        layer = moe.MoeFeedForward(rng, 4, n_experts=2, top_k=1)
        # construct gate + embeddings so identical x routes differently
        layer.gate.w.data = np.zeros((4, 2))
        layer.gate.w.data[0, 0] = 1.0
        layer.gate.w.data[1, 1] = 1.0
        layer.modality_embed.data = np.zeros((3, 4))
        layer.modality_embed.data[0, 0] = 5.0  # image tokens prefer expert 0
        layer.modality_embed.data[1, 1] = 5.0  # rna tokens prefer expert 1
        x = ad.Tensor(np.zeros((2, 4)))
        with ad.no_grad():
            _, stats = layer(x, np.array([0, 1], dtype=np.intp))
        assert np.allclose(stats.frac_tokens, [0.5, 0.5])

    def test_modality_blind_when_embeddings_zero(self):
        rng = np.random.default_rng(6)
        layer = moe.MoeFeedForward(rng, 8, n_experts=4, top_k=2)
        layer.modality_embed.data = np.zeros((3, 8))
        x = ad.Tensor(np.random.default_rng(7).normal(size=(6, 8)))
        with ad.no_grad():
            a, _ = layer(x, np.array([0, 0, 1, 1, 2, 2], dtype=np.intp))
            b, _ = layer(x, np.array([2, 1, 0, 2, 1, 0], dtype=np.intp))
        assert np.array_equal(a.data, b.data)

    def test_renormalized_weights_sum_to_one(self):
        rng = np.random.default_rng(8)
        layer = moe.MoeFeedForward(rng, 8, n_experts=4, top_k=2)
        x = ad.Tensor(np.random.default_rng(9).normal(size=(7, 8)))
        labels = np.zeros(7, dtype=np.intp)
        gate_in = ad.add(x, ad.take_rows(layer.modality_embed, labels))
        with ad.no_grad():
            probs = ad.softmax(layer.gate(gate_in), axis=-1).data
        top2 = np.sort(probs, axis=-1)[:, -2:]
        renorm = top2 / top2.sum(-1, keepdims=True)
        assert np.allclose(renorm.sum(-1), 1.0, atol=1e-12)

    def test_tie_break_prefers_lower_index(self):
        rng = np.random.default_rng(10)
        layer = moe.MoeFeedForward(rng, 4, n_experts=3, top_k=1)
        layer.gate.w.data = np.zeros((4, 3))  # all logits equal -> tie
        layer.modality_embed.data = np.zeros((3, 4))
        x = ad.Tensor(np.ones((3, 4)))
        with ad.no_grad():
            _, stats = layer(x, np.zeros(3, dtype=np.intp))
        assert np.allclose(stats.frac_tokens, [1.0, 0.0, 0.0])


class TestRouterLoss:
    def test_uniform_is_one(self):
        st = moe.RouterStats(np.full(4, 0.25), ad.Tensor(np.full(4, 0.25)))
        assert np.isclose(moe.router_loss(st).item(), 1.0)

    def test_collapse_is_expert_count(self):
        f = np.array([1.0, 0.0, 0.0, 0.0])
        st = moe.RouterStats(f, ad.Tensor(f))
        assert np.isclose(moe.router_loss(st).item(), 4.0)

    def test_matches_hand_formula(self):
        rng = np.random.default_rng(11)
        f = rng.dirichlet(np.ones(5))
        p = rng.dirichlet(np.ones(5))
        st = moe.RouterStats(f, ad.Tensor(p))
        assert np.isclose(moe.router_loss(st).item(), 5.0 * float(f @ p))

    def test_matched_utilization_bounded_below_by_one(self):
        # with f == p the loss is E * sum(p^2) >= 1 (Cauchy-Schwarz),
        # equality exactly at uniform utilization
        rng = np.random.default_rng(12)
        for _ in range(50):
            p = rng.dirichlet(np.ones(4))
            st = moe.RouterStats(p.copy(), ad.Tensor(p))
            assert moe.router_loss(st).item() >= 1.0 - 1e-12
        uni = np.full(4, 0.25)
        st = moe.RouterStats(uni, ad.Tensor(uni))
        assert np.isclose(moe.router_loss(st).item(), 1.0)

    def test_uniform_is_global_minimum_under_matched_utilization(self):
        rng = np.random.default_rng(13)
        uni_val = moe.router_loss(
            moe.RouterStats(np.full(4, 0.25), ad.Tensor(np.full(4, 0.25)))
        ).item()
        for _ in range(50):
            p = rng.dirichlet(np.ones(4))
            st = moe.RouterStats(p.copy(), ad.Tensor(p))
            assert moe.router_loss(st).item() >= uni_val - 1e-12


class TestBackbone:
    def test_depth_zero_is_identity(self):
        bb = moe.FusionBackbone(np.random.default_rng(0), 8, 2, depth=0,
                                n_experts=2, top_k=1)
        seq = moe.fuse_concat(blocks_with_tq())
        with ad.no_grad():
            out, stats = bb(seq)
        assert np.array_equal(out.tokens.data, seq.tokens.data)
        assert stats == []

    def test_odd_depth_rejected(self):
        with pytest.raises(InvalidConfig):
            moe.FusionBackbone(np.random.default_rng(0), 8, 2, depth=3,
                               n_experts=2, top_k=1)

    def test_shape_preserved(self):
        for depth in (2, 4):
            bb = moe.FusionBackbone(np.random.default_rng(1), 8, 2, depth=depth,
                                    n_experts=2, top_k=1)
            seq = moe.fuse_concat(blocks_with_tq())
            with ad.no_grad():
                out, stats = bb(seq)
            assert out.tokens.data.shape == (6, 8)
            assert len(stats) == depth // 2

    def test_gradient_through_depth_two(self):
        bb = moe.FusionBackbone(np.random.default_rng(2), 8, 2, depth=2,
                                n_experts=3, top_k=2)
        seq = moe.fuse_concat(blocks_with_tq(seed=3))
        w = ad.constant(np.random.default_rng(4).normal(size=(6, 8)))

        def f():
            out, _ = bb(seq)
            return ad.sum_(ad.mul(out.tokens, w))

        err, _ = ad.grad_check(f, list(bb.named_parameters()), coords_per_param=4)
        assert err < 1e-4
