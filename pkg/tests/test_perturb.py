import numpy as np
import pytest
from scipy import stats

from protoseq.corpus import entity_class
from protoseq.perturb import PerturbError, inject_noise, reduce_few_shot

from helpers import make_corpus_text, parse_text, random_corpus


def reservoir_oracle(items, keep, seed):
    # Independent rewrite of Algorithm R with the library's rng contract.
    rng = np.random.default_rng(seed)
    out = list(items[:keep])
    for i in range(keep, len(items)):
        j = int(rng.integers(0, i + 1))
        if j < keep:
            out[j] = items[i]
    return out


@pytest.fixture
def corpus100():
    sentences = []
    for s in range(20):
        sentences.append([(f"w{s}_{i}", "B-LOC" if i == 0 else "O")
                          for i in range(5)])
    return parse_text(make_corpus_text(sentences))


class TestInjectNoise:
    def test_rate_zero_is_identity(self, corpus100):
        out = inject_noise(corpus100, 0.0, seed=3)
        assert out.observed_tags() == corpus100.observed_tags()
        assert not out.has_noise
        assert out.provenance[-1]["rate"] == 0.0

    def test_exact_count_at_half(self, corpus100):
        out = inject_noise(corpus100, 0.5, seed=3)
        flipped = sum(t.observed_tag != t.gold_tag
                      for _, _, t in out.iter_tokens())
        assert flipped == 50
        assert sum(out.noise_mask()) == 50

    @pytest.mark.parametrize("rate", [-0.1, 1.5])
    def test_rate_out_of_range(self, corpus100, rate):
        with pytest.raises(PerturbError):
            inject_noise(corpus100, rate, seed=0)

    def test_never_maps_to_gold_and_preserves_rest(self, corpus100):
        out = inject_noise(corpus100, 0.3, seed=11)
        for (_, _, before), (_, _, after) in zip(corpus100.iter_tokens(),
                                                 out.iter_tokens()):
            assert after.gold_tag == before.gold_tag
            if after.is_noisy:
                assert after.observed_tag != after.gold_tag
                assert after.observed_tag in out.tag_inventory
            else:
                assert after.observed_tag == before.observed_tag

    def test_floor_count(self, corpus100):
        out = inject_noise(corpus100, 0.333, seed=2)
        assert sum(out.noise_mask()) == int(0.333 * 100)

    def test_deterministic(self, corpus100):
        a = inject_noise(corpus100, 0.4, seed=9)
        b = inject_noise(corpus100, 0.4, seed=9)
        assert a.observed_tags() == b.observed_tags()

    def test_rejects_already_noisy(self, corpus100):
        once = inject_noise(corpus100, 0.2, seed=1)
        with pytest.raises(PerturbError):
            inject_noise(once, 0.2, seed=2)

    def test_replacement_uniform_chi_square(self):
        # All-O corpus with a 3-tag inventory: each corrupted token has two
        # candidate replacements; pooled over 10 seeds they should be uniform.
        sentences = [[(f"t{i}_{j}", "O") for j in range(10)] for i in range(20)]
        sentences[0][0] = ("a", "B-A")
        sentences[0][1] = ("b", "B-B")
        ds = parse_text(make_corpus_text(sentences))
        counts = {"B-A": 0, "B-B": 0}
        for seed in range(10):
            noisy = inject_noise(ds, 0.3, seed=seed)
            for _, _, tok in noisy.iter_tokens():
                if tok.is_noisy and tok.gold_tag == "O":
                    counts[tok.observed_tag] += 1
        total = sum(counts.values())
        assert total >= 500
        _, p_value = stats.chisquare(list(counts.values()))
        assert p_value > 0.01


class TestReduceFewShot:
    def test_identity_when_keeping_all(self, corpus100):
        containing = sum(
            any(entity_class(t.observed_tag) == "LOC" for t in s.tokens)
            for s in corpus100.sentences)
        out = reduce_few_shot(corpus100, "LOC", containing, seed=0)
        assert out.observed_tags() == corpus100.observed_tags()

    def test_exact_counts(self):
        rng = np.random.default_rng(17)
        sentences = []
        for i in range(10):
            sentences.append([(f"l{i}", "B-LOC"), ("x", "O")])
        for i in range(7):
            sentences.append([(f"p{i}", "B-PER"), ("y", "O")])
        ds = parse_text(make_corpus_text(sentences))
        out = reduce_few_shot(ds, "LOC", 5, seed=3)
        loc_sents = sum(
            any(entity_class(t.observed_tag) == "LOC" for t in s.tokens)
            for s in out.sentences)
        assert loc_sents == 5
        per_sents = sum(
            any(entity_class(t.observed_tag) == "PER" for t in s.tokens)
            for s in out.sentences)
        assert per_sents == 7

    def test_keep_count_too_large_names_maximum(self, corpus100):
        with pytest.raises(PerturbError, match="20"):
            reduce_few_shot(corpus100, "LOC", 21, seed=0)

    def test_unknown_class(self, corpus100):
        with pytest.raises(PerturbError, match="unknown entity class"):
            reduce_few_shot(corpus100, "XYZ", 1, seed=0)

    def test_matches_reservoir_oracle(self, corpus100):
        containing = [
            sid for sid, s in enumerate(corpus100.sentences)
            if any(entity_class(t.observed_tag) == "LOC" for t in s.tokens)
        ]
        for seed in (0, 1, 2, 3):
            out = reduce_few_shot(corpus100, "LOC", 8, seed=seed)
            kept_surfaces = {
                s.tokens[0].surface for s in out.sentences
                if any(entity_class(t.observed_tag) == "LOC" for t in s.tokens)
            }
            expected = {
                corpus100.sentences[sid].tokens[0].surface
                for sid in reservoir_oracle(containing, 8, seed)
            }
            assert kept_surfaces == expected

    def test_deterministic(self, corpus100):
        a = reduce_few_shot(corpus100, "LOC", 6, seed=4)
        b = reduce_few_shot(corpus100, "LOC", 6, seed=4)
        assert a.observed_tags() == b.observed_tags()

    def test_roundtrip_reduced(self):
        rng = np.random.default_rng(13)
        ds = parse_text(random_corpus(rng, n_sentences=30))
        cls = ds.entity_classes[0]
        containing = sum(
            any(entity_class(t.observed_tag) == cls for t in s.tokens)
            for s in ds.sentences)
        out = reduce_few_shot(ds, cls, max(0, containing - 2), seed=1)
        assert len(out.sentences) == len(ds.sentences) - min(2, containing)
