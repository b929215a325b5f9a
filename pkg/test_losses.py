"""
Tests for the boosting-aware losses: hand values, finite-difference
gradients, the all-ones reduction and the invariances of the softmax terms.
"""

import math

import numpy as np
import pytest

from losses import (
    LossInputError, LossBatch, LossTerm, boosted_itc, info_nce, boosted_id, boosted_sdm,
    combined_objective, weighted_cross_entropy, weighted_kl_divergence, evaluate_objective,
    get_loss, list_losses, get_preset, list_presets,
)
from gradcheck import numerical_gradient, relative_error


def unit_rows(rng, b, d):
    x = rng.standard_normal((b, d))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def random_batch(seed):
    rng = np.random.default_rng(seed)
    b = int(rng.integers(2, 9))
    d = int(rng.integers(2, 17))
    img, txt = unit_rows(rng, b, d), unit_rows(rng, b, d)
    weights = np.where(rng.random(b) < 0.4, 1.6, 1.0)
    identities = rng.integers(0, 3, size=b)
    classifier = 0.5 * rng.standard_normal((3, d))
    return img, txt, weights, identities, classifier


class TestHandValues:

    def test_itc_two_by_two(self):
        out = boosted_itc(np.eye(2), np.eye(2), np.array([1.6, 1.0]), tau=1.0)
        expected = 0.5 * 2.6 * math.log(1.0 + math.exp(-1.0))
        assert out.value == pytest.approx(expected, abs=1e-12)
        assert out.value == pytest.approx(0.40724, abs=1e-5)

    def test_id_image_side(self):
        value, _ = weighted_cross_entropy(np.eye(2), [0, 1], np.array([1.6, 1.0]))
        assert value == pytest.approx(2.6 * math.log(1.0 + math.exp(-1.0)), abs=1e-12)
        assert value == pytest.approx(0.81448, abs=1e-5)

    def test_id_sums_both_modalities(self):
        out = boosted_id(np.eye(2), np.eye(2), [0, 1], np.array([1.6, 1.0]), np.eye(2))
        assert out.value == pytest.approx(2 * 0.81448, abs=1e-5)

    def test_sdm_two_distinct_identities(self):
        p = [math.e / (math.e + 1.0), 1.0 / (math.e + 1.0)]
        q = [1.0, 0.0]
        row = sum(pi * (math.log(pi) - math.log(qi + 1e-8)) for pi, qi in zip(p, q))
        out = boosted_sdm(np.eye(2), np.eye(2), [0, 1], np.ones(2), tau=1.0, eps=1e-8)
        assert out.value == pytest.approx(2 * row, rel=1e-12)
        assert math.isfinite(out.value)

    def test_sdm_zero_when_distribution_matches(self):
        e1 = np.array([[1.0, 0.0], [-1.0, 0.0]])
        out = boosted_sdm(e1, e1, [0, 1], np.ones(2), tau=0.001, eps=0.0)
        assert out.value == 0.0
        assert np.all(out.grad_img == 0.0)

    def test_single_pair_itc_is_zero(self):
        out = boosted_itc(np.array([[0.6, 0.8]]), np.array([[1.0, 0.0]]), np.array([1.6]), tau=0.05)
        assert out.value == 0.0

    def test_kl_zero_mass_entries_contribute_nothing(self):
        value, grad = weighted_kl_divergence(np.array([[0.0, -2000.0]]), np.array([[1.0, 0.0]]),
                                             np.ones(1), eps=0.0)
        assert value == 0.0
        assert np.all(np.isfinite(grad))


class TestGradients:
    """Analytic gradients against central differences on 50 random batches per loss."""

    @pytest.mark.parametrize("seed", range(50))
    def test_itc(self, seed):
        img, txt, w, _, _ = random_batch(seed)
        out = boosted_itc(img, txt, w, tau=0.5)
        for matrix, analytic in ((img, out.grad_img), (txt, out.grad_txt)):
            numeric = numerical_gradient(lambda: boosted_itc(img, txt, w, 0.5).value, matrix)
            assert relative_error(analytic, numeric) <= 1e-5

    @pytest.mark.parametrize("seed", range(50))
    def test_id(self, seed):
        img, txt, w, ids, cls = random_batch(seed)
        out = boosted_id(img, txt, ids, w, cls)
        for matrix, analytic in ((img, out.grad_img), (txt, out.grad_txt), (cls, out.grad_classifier)):
            numeric = numerical_gradient(lambda: boosted_id(img, txt, ids, w, cls).value, matrix)
            assert relative_error(analytic, numeric) <= 1e-5

    @pytest.mark.parametrize("seed", range(50))
    def test_sdm(self, seed):
        img, txt, w, ids, _ = random_batch(seed)
        out = boosted_sdm(img, txt, ids, w, tau=0.5)
        for matrix, analytic in ((img, out.grad_img), (txt, out.grad_txt)):
            numeric = numerical_gradient(lambda: boosted_sdm(img, txt, ids, w, 0.5).value, matrix)
            assert relative_error(analytic, numeric) <= 1e-5

    @pytest.mark.parametrize("seed", range(10))
    def test_sdm_one_direction(self, seed):
        img, txt, w, ids, _ = random_batch(seed)
        out = boosted_sdm(img, txt, ids, w, tau=0.5, bidirectional=False)
        numeric = numerical_gradient(
            lambda: boosted_sdm(img, txt, ids, w, 0.5, bidirectional=False).value, img)
        assert relative_error(out.grad_img, numeric) <= 1e-5


class TestReduction:
    """All-ones weights reproduce the unweighted losses bit for bit."""

    @pytest.mark.parametrize("seed", range(10))
    def test_itc_equals_info_nce(self, seed):
        img, txt, _, _, _ = random_batch(seed)
        a = boosted_itc(img, txt, np.ones(len(img)), 0.07)
        b = info_nce(img, txt, 0.07)
        assert a.value == b.value
        np.testing.assert_array_equal(a.grad_img, b.grad_img)

    def test_weights_are_linear_in_id(self):
        img, txt, _, ids, cls = random_batch(3)
        w = np.ones(len(img))
        base = boosted_id(img, txt, ids, w, cls).value
        w2 = w.copy()
        w2[0] = 2.0
        single = boosted_id(img[:1], txt[:1], ids[:1], np.ones(1), cls).value
        assert boosted_id(img, txt, ids, w2, cls).value == pytest.approx(base + single, rel=1e-12)

    def test_boosting_misranked_pair_increases_itc(self):
        img = np.array([[1.0, 0.0], [0.0, 1.0]])
        txt = np.array([[0.6, 0.8], [0.0, 1.0]])
        low = boosted_itc(img, txt, np.array([1.0, 1.0]), 0.1).value
        high = boosted_itc(img, txt, np.array([1.6, 1.0]), 0.1).value
        assert high > low


class TestInvariances:

    def test_log_softmax_translation(self):
        rng = np.random.default_rng(0)
        logits = rng.standard_normal((4, 5))
        targets = rng.integers(0, 5, size=4)
        w = np.full(4, 1.6)
        a, ga = weighted_cross_entropy(logits, targets, w)
        b, gb = weighted_cross_entropy(logits + 123.0, targets, w)
        assert abs(a - b) <= 1e-12
        np.testing.assert_allclose(ga, gb, atol=1e-12)
        q = np.full((4, 5), 0.2)
        ka, _ = weighted_kl_divergence(logits, q, w)
        kb, _ = weighted_kl_divergence(logits - 50.0, q, w)
        assert abs(ka - kb) <= 1e-12

    @pytest.mark.parametrize("loss", ['itc', 'sdm', 'id'])
    def test_permutation_equivariance(self, loss):
        img, txt, w, ids, cls = random_batch(11)
        perm = np.random.default_rng(5).permutation(len(img))

        def run(i, t, ww, yy):
            batch = LossBatch(img_emb=i, txt_emb=t, identities=yy, weights=ww, classifier=cls, tau=0.3)
            return get_loss(loss).compute(batch, ww)

        a = run(img, txt, w, ids)
        b = run(img[perm], txt[perm], w[perm], ids[perm])
        assert b.value == pytest.approx(a.value, rel=1e-12)
        np.testing.assert_allclose(b.grad_img, a.grad_img[perm], atol=1e-12)
        np.testing.assert_allclose(b.grad_txt, a.grad_txt[perm], atol=1e-12)


class TestErrors:

    def test_bad_tau(self):
        with pytest.raises(LossInputError, match="tau"):
            boosted_itc(np.eye(2), np.eye(2), np.ones(2), tau=0.0)

    def test_weight_length(self):
        with pytest.raises(LossInputError, match="length 3, batch size is 2"):
            boosted_itc(np.eye(2), np.eye(2), np.ones(3), tau=1.0)

    def test_label_out_of_range(self):
        with pytest.raises(LossInputError, match=r"\[0, 2\)"):
            boosted_id(np.eye(2), np.eye(2), [0, 2], np.ones(2), np.eye(2))

    def test_combined_shape_mismatch(self):
        a = boosted_itc(np.eye(2), np.eye(2), np.ones(2), 1.0)
        b = boosted_itc(np.eye(3), np.eye(3), np.ones(3), 1.0)
        with pytest.raises(LossInputError):
            combined_objective([(a, 1.0), (b, 1.0)])


class TestObjective:

    def test_single_term_identity(self):
        out = boosted_itc(np.eye(2), np.eye(2), np.array([1.6, 1.0]), 1.0)
        combined = combined_objective([(out, 1.0)])
        assert combined.value == out.value
        np.testing.assert_array_equal(combined.grad_img, out.grad_img)

    def test_half_half_equals_term(self):
        out = boosted_itc(np.eye(2), np.eye(2), np.array([1.6, 1.0]), 1.0)
        assert combined_objective([(out, 0.5), (out, 0.5)]).value == pytest.approx(out.value)

    def test_irra_objective_is_sum_of_parts(self):
        eye = np.eye(2)
        w = np.array([1.6, 1.0])
        batch = LossBatch(img_emb=eye, txt_emb=eye, identities=np.array([0, 1]), weights=w,
                          classifier=eye, tau=1.0)
        terms, enabled = get_preset('irra+b')
        assert enabled
        total = evaluate_objective(terms, batch).value
        expected = (boosted_itc(eye, eye, np.ones(2), 1.0).value +
                    boosted_sdm(eye, eye, [0, 1], w, 1.0).value +
                    boosted_id(eye, eye, [0, 1], w, eye).value)
        assert total == pytest.approx(expected, rel=1e-12)

    def test_registries(self):
        assert list_losses() == ['itc', 'id', 'sdm']
        assert list_presets() == ['clip', 'clip+b', 'irra', 'irra+b']
        with pytest.raises(ValueError, match="Unknown loss: tal"):
            get_loss('tal')
        with pytest.raises(ValueError, match="Unknown loss preset"):
            get_preset('rde')
        with pytest.raises(ValueError):
            LossTerm.from_dict({'name': 'tal'})

    def test_check_finite_flags_nan(self):
        out = boosted_itc(np.eye(2), np.eye(2), np.ones(2), 1.0)
        assert out.check_finite() is out
        out.grad_txt[0, 0] = np.nan
        with pytest.raises(LossInputError, match="itc produced non-finite"):
            out.check_finite("itc")
