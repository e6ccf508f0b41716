"""Baseline detectors: likelihood statistics, consistency, clustering entropy."""

import math

import numpy as np
import pytest

from halluguard.detectors import (
    DetectorConfig,
    HalluGuardScorer,
    ORIENTATIONS,
    energy_score,
    lexical_consistency,
    ln_entropy,
    perplexity,
    rouge_l,
    score_sample,
    semantic_entropy_lite,
)

from conftest import make_bundle


class TestPerplexity:
    def test_certain_tokens(self):
        assert perplexity([0.0, 0.0, 0.0]) == 0.0

    def test_uniform_over_four(self):
        lp = [-math.log(4.0)] * 5
        assert perplexity(lp) == pytest.approx(math.log(4.0))
        assert perplexity(lp) == pytest.approx(1.3863, abs=5e-5)

    def test_hand_mean(self):
        assert perplexity([-1.0, -2.0, -3.0]) == pytest.approx(2.0)

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            perplexity([])

    def test_concatenation_invariance(self, rng):
        lp = list(-rng.random(7))
        assert perplexity(lp + lp) == pytest.approx(perplexity(lp), abs=1e-12)


class TestLnEntropy:
    def test_fully_certain(self):
        bundle = make_bundle(seed=1, k=3)
        for g in bundle.generations:
            g.logprob = np.zeros_like(g.logprob)
        assert ln_entropy(bundle) == 0.0

    def test_mean_of_two(self):
        bundle = make_bundle(seed=2, k=2, t=4)
        bundle.generations[0].logprob = np.full(4, -1.0, dtype=np.float32)
        bundle.generations[1].logprob = np.full(4, -3.0, dtype=np.float32)
        assert ln_entropy(bundle) == pytest.approx(2.0)

    def test_constant_mean(self):
        bundle = make_bundle(seed=3, k=3, t=5)
        for g in bundle.generations:
            g.logprob = np.full(5, -math.log(4.0), dtype=np.float32)
        assert ln_entropy(bundle) == pytest.approx(math.log(4.0), rel=1e-6)


class TestEnergy:
    def test_uniform_logits(self):
        assert energy_score([math.log(4.0)] * 3) == pytest.approx(-math.log(4.0))

    def test_single_step(self):
        assert energy_score([5.0]) == -5.0

    def test_hand_mean(self):
        assert energy_score([2.0, 4.0]) == pytest.approx(-3.0)


def lcs_oracle(a, b):
    """Quadratic-table LCS, kept independent of the implementation."""
    ta, tb = a.split(), b.split()
    table = [[0] * (len(tb) + 1) for _ in range(len(ta) + 1)]
    for i in range(1, len(ta) + 1):
        for j in range(1, len(tb) + 1):
            if ta[i - 1] == tb[j - 1]:
                table[i][j] = table[i - 1][j - 1] + 1
            else:
                table[i][j] = max(table[i - 1][j], table[i][j - 1])
    return table[-1][-1]


class TestRougeL:
    def test_identical(self):
        assert rouge_l("a b c", "a b c") == 1.0

    def test_disjoint(self):
        assert rouge_l("a b", "c d") == 0.0

    def test_partial_overlap_against_oracle(self):
        cand, ref = "a b c d", "a c d"
        lcs = lcs_oracle(cand, ref)
        assert lcs == 3
        p, r = lcs / 4, lcs / 3
        expected = 2 * p * r / (p + r)
        assert rouge_l(cand, ref) == pytest.approx(expected)
        assert rouge_l(cand, ref) == pytest.approx(6.0 / 7.0)

    def test_empty_sides(self):
        assert rouge_l("", "a") == 0.0
        assert rouge_l("a", "") == 0.0

    def test_random_against_oracle(self, rng):
        words = ["w%d" % i for i in range(6)]
        for _ in range(30):
            a = " ".join(rng.choice(words, size=rng.integers(1, 8)))
            b = " ".join(rng.choice(words, size=rng.integers(1, 8)))
            lcs = lcs_oracle(a, b)
            if lcs == 0:
                assert rouge_l(a, b) == 0.0
                continue
            p, r = lcs / len(a.split()), lcs / len(b.split())
            assert rouge_l(a, b) == pytest.approx(2 * p * r / (p + r))


class TestLexicalConsistency:
    def test_identical_texts(self):
        assert lexical_consistency(["x y"] * 4) == 1.0

    def test_disjoint_pair(self):
        assert lexical_consistency(["a b", "c d"]) == 0.0

    def test_hand_mean_over_three_pairs(self):
        # Pairwise sims 1.0, 0.5, 0.5 average to 2/3.
        texts = ["a b", "a b", "a c"]
        assert rouge_l(texts[0], texts[1]) == 1.0
        assert rouge_l(texts[0], texts[2]) == 0.5
        assert lexical_consistency(texts) == pytest.approx(2.0 / 3.0)

    def test_permutation_invariance(self, rng):
        texts = ["a b c", "a d", "b c", "e f a"]
        base = lexical_consistency(texts)
        for _ in range(5):
            perm = list(rng.permutation(len(texts)))
            assert lexical_consistency([texts[i] for i in perm]) == pytest.approx(base)

    def test_range_for_rouge(self, rng):
        texts = [" ".join(rng.choice(["a", "b", "c"], size=3)) for _ in range(5)]
        value = lexical_consistency(texts)
        assert 0.0 <= value <= 1.0

    def test_embed_cosine(self):
        e = np.array([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
        value = lexical_consistency(["", "", ""], sim="embed-cosine", embeddings=e)
        assert value == pytest.approx((1.0 + 0.0 + 0.0) / 3.0)


class TestSemanticEntropyLite:
    def test_identical_embeddings(self):
        e = np.tile([1.0, 0.0], (4, 1))
        assert semantic_entropy_lite(e) == 0.0

    def test_orthogonal_singletons(self):
        assert semantic_entropy_lite(np.eye(4)) == pytest.approx(math.log(4.0))

    def test_two_pairs(self):
        e = np.array([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0], [0.0, 1.0]])
        assert semantic_entropy_lite(e) == pytest.approx(math.log(2.0))

    def test_single_linkage_chains(self):
        # 0-1 and 1-2 are linked, 0-2 is not: single linkage still merges all.
        e = np.array(
            [[1.0, 0.0], [math.cos(0.4), math.sin(0.4)], [math.cos(0.8), math.sin(0.8)]]
        )
        threshold = math.cos(0.5)
        assert semantic_entropy_lite(e, link_threshold=threshold) == 0.0

    def test_rotation_invariance(self, rng):
        e = rng.normal(size=(6, 4))
        q, _ = np.linalg.qr(rng.normal(size=(4, 4)))
        base = semantic_entropy_lite(e, 0.8)
        rotated = semantic_entropy_lite(e @ q, 0.8)
        assert rotated == pytest.approx(base, abs=1e-12)

    def test_zero_norm_rejected(self):
        with pytest.raises(ValueError):
            semantic_entropy_lite(np.array([[0.0, 0.0], [1.0, 0.0]]))


class TestScoreSample:
    def test_requested_detectors_present(self):
        bundle = make_bundle(seed=30, k=4, d=6, t=5)
        out = score_sample(bundle, ["halluguard", "perplexity"], DetectorConfig())
        assert out.scores["halluguard"] is not None
        assert out.scores["perplexity"] is not None
        assert out.orientation["halluguard"] == "lower-is-hallucinated"

    def test_missing_states_marks_unavailable(self):
        bundle = make_bundle(seed=31, with_states=False)
        out = score_sample(bundle, ["halluguard", "perplexity", "ln_entropy"])
        assert out.scores["halluguard"] is None
        assert out.scores["perplexity"] is not None
        assert out.scores["ln_entropy"] is not None

    def test_deterministic(self):
        bundle = make_bundle(seed=32)
        cfg = DetectorConfig()
        a = score_sample(bundle, list(ORIENTATIONS), cfg)
        b = score_sample(bundle, list(ORIENTATIONS), cfg)
        assert a.scores == b.scores

    def test_unknown_detector_rejected(self):
        with pytest.raises(ValueError):
            score_sample(make_bundle(seed=33), ["nope"])


class TestHalluGuardScorer:
    def test_fit_then_score(self):
        bundles = [make_bundle(seed=40 + i, k=4, d=6, t=5) for i in range(6)]
        scorer = HalluGuardScorer().fit(bundles)
        scores = scorer.score_samples(bundles)
        assert scores.shape == (6,)
        assert np.all(np.isfinite(scores))

    def test_get_params_roundtrip(self):
        scorer = HalluGuardScorer(ridge=0.01, clip=False)
        params = scorer.get_params()
        clone = HalluGuardScorer(**params)
        assert clone.ridge == 0.01
        assert clone.clip is False

    def test_calibrated_scores_centered(self):
        bundles = [make_bundle(seed=50 + i, k=4, d=6, t=5) for i in range(8)]
        scorer = HalluGuardScorer(clip=False).fit(bundles)
        scores = scorer.score_samples(bundles)
        # Sum of three unit-variance z components, so the mean sits near 0.
        assert abs(scores.mean()) < 1.0
