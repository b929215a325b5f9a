"""
Tests for retrieval metrics, distractor galleries and cross-dataset evaluation.
"""

import numpy as np
import pytest

from dataset import SynthConfig, generate
from encoder import init_params, load_params, save_params
from evaluation import (
    TOP_K, EvaluationError, Metrics, RetrievalRun, DistractorGallery, average_precision,
    per_query_ap, evaluate, build_run, distractor_gallery, remap_identities, merge_galleries,
    evaluate_with_distractors, cross_dataset_eval, eval_summary,
)


def brute_force_metrics(sim, query_ids, gallery_ids):
    hits = {k: 0 for k in TOP_K}
    aps = []
    for q in range(sim.shape[0]):
        order = sorted(range(sim.shape[1]), key=lambda j: (-sim[q, j], j))
        relevant = [gallery_ids[j] == query_ids[q] for j in order]
        for k in TOP_K:
            hits[k] += any(relevant[:k])
        found, precision_sum = 0, 0.0
        for rank, rel in enumerate(relevant, 1):
            if rel:
                found += 1
                precision_sum += found / rank
        aps.append(precision_sum / found)
    n = sim.shape[0]
    return [hits[k] / n for k in TOP_K] + [sum(aps) / n]


def random_run(rng, ties=False):
    n_q = int(rng.integers(1, 20))
    n_g = int(rng.integers(2, 30))
    d = int(rng.integers(2, 6))
    n_ids = int(rng.integers(1, 5))
    gallery_ids = rng.integers(0, n_ids, size=n_g)
    query_ids = rng.choice(np.unique(gallery_ids), size=n_q)
    q = rng.standard_normal((n_q, d))
    g = rng.standard_normal((n_g, d))
    if ties:
        q, g = np.round(q), np.round(g)
    return RetrievalRun(q, query_ids, g, gallery_ids)


def small_corpus(seed, **overrides):
    params = dict(n_identities=12, images_per_id=3, p_latent=4, p_img=8, p_txt=6, seed=seed,
                  name=f"synth{seed}")
    params.update(overrides)
    return SynthConfig(**params)


class TestMetricOracle:

    def test_matches_brute_force(self):
        rng = np.random.default_rng(99)
        for trial in range(100):
            run = random_run(rng, ties=trial % 3 == 0)
            m = evaluate(run)
            sim = run.query_emb @ run.gallery_emb.T
            expected = brute_force_metrics(sim, run.query_ids, run.gallery_ids)
            assert [m.r1, m.r5, m.r10, m.map] == pytest.approx(expected, abs=1e-12), trial

    def test_hand_average_precision(self):
        ap = average_precision(np.array([[True, False, True]]))
        assert ap[0] == pytest.approx(0.8333, abs=1e-4)
        assert ap[0] == pytest.approx(5.0 / 6.0, abs=1e-15)

    def test_perfect_retrieval(self):
        emb = np.eye(3)
        m = evaluate(RetrievalRun(emb, np.arange(3), emb, np.arange(3)))
        assert m == Metrics(1.0, 1.0, 1.0, 1.0)

    def test_recall_is_monotone_in_k(self):
        rng = np.random.default_rng(4)
        for _ in range(20):
            m = evaluate(random_run(rng))
            assert m.r1 <= m.r5 <= m.r10

    def test_ties_follow_gallery_index(self):
        run = RetrievalRun(np.array([[1.0, 0.0]]), np.array([1]),
                           np.array([[1.0, 0.0], [1.0, 0.0]]), np.array([0, 1]))
        m = evaluate(run)
        assert m.r1 == 0.0 and m.map == 0.5

    def test_query_identity_absent_from_gallery(self):
        run = RetrievalRun(np.eye(2), np.array([0, 5]), np.eye(2), np.array([0, 1]))
        with pytest.raises(EvaluationError, match=r"absent from gallery: \[5\]"):
            evaluate(run)

    def test_deterministic(self):
        run = random_run(np.random.default_rng(8))
        assert evaluate(run) == evaluate(run)

    def test_str_is_percent(self):
        assert str(Metrics(0.5, 0.75, 1.0, 0.25)) == "R@1=50.00 R@5=75.00 R@10=100.00 mAP=25.00"


class TestDistractors:

    def test_distractors_never_raise_any_query_ap(self):
        rng = np.random.default_rng(12)
        for _ in range(50):
            run = random_run(rng)
            d = run.query_emb.shape[1]
            n_extra = int(rng.integers(1, 10))
            extra = DistractorGallery(rng.standard_normal((n_extra, d)),
                                      rng.integers(0, 3, size=n_extra), "foreign")
            remapped = remap_identities(run, [extra])
            before = per_query_ap(run)
            after = per_query_ap(merge_galleries(run, remapped))
            assert np.all(after <= before + 1e-15)
            assert evaluate(merge_galleries(run, remapped)).r1 <= evaluate(run).r1

    def test_remap_keeps_sources_disjoint(self):
        run = RetrievalRun(np.eye(2), np.array([0, 1]), np.eye(2), np.array([0, 1]))
        a = DistractorGallery(np.eye(2), np.array([0, 1]), "a")
        b = DistractorGallery(np.eye(2), np.array([0, 0]), "b")
        ra, rb = remap_identities(run, [a, b])
        assert set(ra.identities.tolist()) == {2, 3}
        assert set(rb.identities.tolist()) == {4}

    def test_identity_collision_raises(self):
        run = RetrievalRun(np.eye(2), np.array([0, 1]), np.eye(2), np.array([0, 1]))
        with pytest.raises(EvaluationError, match="shares identities"):
            evaluate_with_distractors(run, [DistractorGallery(np.eye(2), np.array([1, 7]), "x")])

    def test_pipeline_on_two_generated_datasets(self):
        primary = generate(small_corpus(1), 'test')
        foreign = [generate(small_corpus(2), 'test'), generate(small_corpus(3, confusion_rate=0.6), 'test')]
        params = init_params(8, 6, 12, hidden=8, dim=4, seed=0)
        run = build_run(params, primary)
        galleries = remap_identities(run, [distractor_gallery(params, ds) for ds in foreign])
        with_distractors = evaluate_with_distractors(run, galleries)
        plain = evaluate(run)
        assert with_distractors.r1 <= plain.r1
        summary = eval_summary(with_distractors, run, galleries)
        assert summary['distractor_sources'] == ['synth2', 'synth3']
        assert summary['n_gallery'] == primary.images.shape[0] + sum(
            ds.images.shape[0] for ds in foreign)
        assert summary['n_queries'] == len(primary.samples)


class TestCrossDataset:

    def test_same_dataset_equals_in_domain(self, tmp_path):
        ds = generate(small_corpus(1), 'test')
        params = init_params(8, 6, 12, hidden=8, dim=4, seed=0)
        save_params(params, str(tmp_path))
        from_checkpoint = cross_dataset_eval(str(tmp_path), ds)
        in_memory = cross_dataset_eval(params, ds)
        loaded, _ = load_params(str(tmp_path))
        assert from_checkpoint == evaluate(build_run(loaded, ds))
        assert in_memory == evaluate(build_run(params, ds))
        assert from_checkpoint == in_memory

    def test_dimension_mismatch_names_both(self):
        ds = generate(small_corpus(1, p_img=10), 'test')
        params = init_params(8, 6, 12, hidden=8, dim=4, seed=0)
        with pytest.raises(EvaluationError, match=r"\(8, 6\).*\(10, 6\)"):
            cross_dataset_eval(params, ds)
