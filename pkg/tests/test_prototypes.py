import numpy as np
import pytest

from prime import autodiff as ad
from prime import prototypes as pb
from prime.data import MODALITIES, Modality
from prime.errors import NoObservedModality, ZeroVector
from prime.tokenizer import TokenBlock


def make_bank(seed=0, k_c=3, t_q=4, d=8, tau=0.07):
    return pb.PrototypeBank(np.random.default_rng(seed), k_c, t_q, d, tau)


def observed_block(tokens, modality=Modality.IMAGE):
    arr = np.asarray(tokens, dtype=np.float64)
    return TokenBlock(ad.Tensor(arr), modality, np.ones(arr.shape[0], dtype=bool))


def set_bank_from_pooled(bank, pooled_rows):
    # craft prototypes whose token-mean equals the given pooled rows
    k, t, d = bank.prototypes.data.shape
    bank.prototypes.data = np.repeat(np.asarray(pooled_rows)[:, None, :], t, axis=1)


class TestSoftAssign:
    def test_single_prototype(self):
        bank = make_bank(k_c=1)
        q = pb.soft_assign(bank, observed_block(np.random.default_rng(1).normal(size=(4, 8))))
        assert np.allclose(q.data, [1.0])

    def test_one_hot_limit_at_small_tau(self):
        bank = make_bank(k_c=3, tau=1e-3)
        pooled = np.eye(3, 8)  # orthogonal pooled prototypes
        set_bank_from_pooled(bank, pooled)
        z = np.repeat(pooled[1][None, :], 4, axis=0)  # matches prototype 1
        q = pb.soft_assign(bank, observed_block(z)).data
        assert q[1] > 1.0 - 1e-9
        assert np.argmax(q) == 1

    def test_hand_computed_cosines(self):
        bank = make_bank(k_c=3, tau=0.1)
        d = 8
        base = np.zeros(d)
        base[0] = 1.0
        cosines = np.array([0.9, 0.1, -0.5])
        rows = np.stack([c * base + np.sqrt(1 - c * c) * np.eye(d)[1] for c in cosines])
        set_bank_from_pooled(bank, rows)
        q = pb.soft_assign(bank, observed_block(np.repeat(base[None, :], 4, 0))).data
        expected = np.exp(cosines / 0.1)
        expected /= expected.sum()
        assert np.allclose(q, expected, atol=1e-9)

    def test_zero_pooled_vector_raises(self):
        bank = make_bank()
        z = np.zeros((4, 8))
        with pytest.raises(ZeroVector):
            pb.soft_assign(bank, observed_block(z))

    def test_scale_invariance(self):
        bank = make_bank(k_c=5)
        rng = np.random.default_rng(3)
        z = rng.normal(size=(4, 8))
        q1 = pb.soft_assign(bank, observed_block(z)).data
        q2 = pb.soft_assign(bank, observed_block(7.3 * z)).data
        assert np.allclose(q1, q2, atol=1e-12)

    def test_simplex(self):
        bank = make_bank(k_c=6)
        rng = np.random.default_rng(4)
        for _ in range(20):
            q = pb.soft_assign(bank, observed_block(rng.normal(size=(4, 8)))).data
            assert np.all(q >= 0)
            assert abs(q.sum() - 1.0) < 1e-9


class TestConsensus:
    def test_single_modality_identity(self):
        a = ad.Tensor(np.array([0.2, 0.3, 0.5]))
        assert np.allclose(pb.consensus([a]).data, a.data)

    def test_idempotent_on_identical(self):
        a = ad.Tensor(np.array([0.2, 0.3, 0.5]))
        b = ad.Tensor(np.array([0.2, 0.3, 0.5]))
        assert np.allclose(pb.consensus([a, b]).data, a.data)

    def test_simple_mean(self):
        a = ad.Tensor(np.array([1.0, 0.0]))
        b = ad.Tensor(np.array([0.0, 1.0]))
        assert np.allclose(pb.consensus([a, b]).data, [0.5, 0.5])

    def test_empty_raises(self):
        with pytest.raises(NoObservedModality):
            pb.consensus([])


class TestImpute:
    def test_one_hot_returns_exact_prototype(self):
        bank = make_bank(k_c=4)
        cons = ad.Tensor(np.array([0.0, 0.0, 1.0, 0.0]))
        block = pb.impute_missing(bank, cons, Modality.RNA)
        assert np.array_equal(block.tokens.data, bank.prototypes.data[2])
        assert not block.provenance.any()

    def test_uniform_two_prototypes(self):
        bank = make_bank(k_c=2)
        cons = ad.Tensor(np.array([0.5, 0.5]))
        block = pb.impute_missing(bank, cons, Modality.TEXT)
        expected = 0.5 * (bank.prototypes.data[0] + bank.prototypes.data[1])
        assert np.allclose(block.tokens.data, expected, atol=1e-15)

    def test_matches_loop_oracle(self):
        bank = make_bank(k_c=5)
        rng = np.random.default_rng(9)
        w = rng.dirichlet(np.ones(5))
        out = pb.impute_missing(bank, ad.Tensor(w), Modality.IMAGE).tokens.data
        oracle = np.zeros_like(out)
        for k in range(5):
            oracle += w[k] * bank.prototypes.data[k]
        assert np.allclose(out, oracle, atol=1e-12)

    def test_convex_hull_invariant(self):
        bank = make_bank(k_c=6)
        rng = np.random.default_rng(10)
        lo = bank.prototypes.data.min(axis=0)
        hi = bank.prototypes.data.max(axis=0)
        for _ in range(25):
            w = rng.dirichlet(np.full(6, 0.4))
            out = pb.impute_missing(bank, ad.Tensor(w), Modality.RNA).tokens.data
            assert np.all(out >= lo - 1e-12)
            assert np.all(out <= hi + 1e-12)


class TestRefine:
    def test_shape_preserved(self):
        mod = pb.RefinementModule(np.random.default_rng(0), 8, 2)
        x = ad.Tensor(np.random.default_rng(1).normal(size=(4, 8)))
        with ad.no_grad():
            assert mod(x).data.shape == (4, 8)

    def test_distinct_inputs_distinct_outputs(self):
        mod = pb.RefinementModule(np.random.default_rng(2), 8, 2)
        rng = np.random.default_rng(3)
        with ad.no_grad():
            a = mod(ad.Tensor(rng.normal(size=(4, 8)))).data
            b = mod(ad.Tensor(rng.normal(size=(4, 8)))).data
        assert not np.allclose(a, b)

    def test_gradient(self):
        mod = pb.RefinementModule(np.random.default_rng(4), 8, 2)
        rng = np.random.default_rng(5)
        x = ad.constant(rng.normal(size=(4, 8)))
        w = ad.constant(rng.normal(size=(4, 8)))

        def f():
            return ad.sum_(ad.mul(mod(x), w))

        err, _ = ad.grad_check(f, list(mod.named_parameters()), coords_per_param=4)
        assert err < 1e-4


class TestCompletePatient:
    def setup_method(self):
        rng = np.random.default_rng(11)
        self.bank = make_bank(k_c=4, tau=0.2)
        self.refiners = {m: pb.RefinementModule(rng, 8, 2) for m in MODALITIES}
        r2 = np.random.default_rng(12)
        self.blocks = {
            m: observed_block(r2.normal(size=(4, 8)), m) for m in MODALITIES
        }

    def test_trimodal_has_no_imputed_provenance(self):
        with ad.no_grad():
            out = pb.complete_patient(self.bank, self.refiners, self.blocks)
        assert all(out[m].provenance.all() for m in MODALITIES)

    def test_image_only_imputes_others(self):
        with ad.no_grad():
            out = pb.complete_patient(self.bank, self.refiners,
                                      {Modality.IMAGE: self.blocks[Modality.IMAGE]})
        assert out[Modality.IMAGE].provenance.all()
        assert not out[Modality.RNA].provenance.any()
        assert not out[Modality.TEXT].provenance.any()

    def test_two_modality_manual_pipeline_oracle(self):
        obs = {Modality.IMAGE: self.blocks[Modality.IMAGE],
               Modality.TEXT: self.blocks[Modality.TEXT]}
        with ad.no_grad():
            out = pb.complete_patient(self.bank, self.refiners, obs)
            # manual two-step: mean of the two assignments, mixture, refine
            qi = pb.soft_assign(self.bank, obs[Modality.IMAGE]).data
            qt = pb.soft_assign(self.bank, obs[Modality.TEXT]).data
            cons = 0.5 * (qi + qt)
            mix = np.einsum("k,ktd->td", cons, self.bank.prototypes.data)
            refined = self.refiners[Modality.RNA](ad.Tensor(mix)).data
        assert np.allclose(out[Modality.RNA].tokens.data, refined, atol=1e-10)

    def test_full_availability_independent_of_bank(self):
        with ad.no_grad():
            a = pb.complete_patient(self.bank, self.refiners, self.blocks)
            self.bank.prototypes.data = self.bank.prototypes.data * 3.0 + 1.0
            b = pb.complete_patient(self.bank, self.refiners, self.blocks)
        for m in MODALITIES:
            assert np.array_equal(a[m].tokens.data, b[m].tokens.data)

    def test_no_observed_raises(self):
        with pytest.raises(NoObservedModality):
            pb.complete_patient(self.bank, self.refiners, {})
