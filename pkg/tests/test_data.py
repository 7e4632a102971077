import collections
import filecmp
import math

import numpy as np
import pytest

from unitrec.data import (
    BOS,
    EOS,
    SEP,
    UNK,
    DataFormatError,
    RawExample,
    SamplingError,
    SyntheticSpec,
    Vocabulary,
    build_history,
    candidate_sequence,
    dataset_stats,
    detokenize,
    encode_example,
    generate_synthetic,
    read_dataset,
    sample_negatives,
    save_synthetic,
    tokenize,
    word_topic,
    write_dataset,
)
from unitrec.masks import build_global_mask, build_local_mask

SMALL = SyntheticSpec(n_train=40, n_test=10, seed=5)


@pytest.fixture
def vocab():
    return Vocabulary(["red", "green", "blue"])


def replay_truncation(turns, max_len):
    """Keep the newest max_len tokens, then repair a cut turn so it starts with SEP."""
    flat = []
    for i, t in enumerate(turns):
        flat += [(SEP, i)] + [(tok, i) for tok in t]
    tail = flat[-max_len:]
    if tail[0][0] != SEP:
        cut = tail[0][1]
        n_cut = sum(1 for _, i in tail if i == cut)
        tail = tail[n_cut:] if n_cut < 2 else [(SEP, cut)] + tail[1:]
    first = tail[0][1]
    return [tok for tok, _ in tail], [i - first for _, i in tail]


class TestVocabulary:
    def test_reserved_ids(self, vocab):
        assert [vocab.stoi[t] for t in ("<pad>", "<bos>", "<eos>", "<sep>", "<unk>")] == [0, 1, 2, 3, 4]
        assert vocab.stoi["red"] == 5

    def test_save_load(self, vocab, tmp_path):
        vocab.save(tmp_path / "v.txt")
        assert Vocabulary.load(tmp_path / "v.txt") == vocab

    def test_load_rejects_missing_header(self, tmp_path):
        (tmp_path / "v.txt").write_text("red\n")
        with pytest.raises(DataFormatError):
            Vocabulary.load(tmp_path / "v.txt")


class TestTokenize:
    def test_empty(self, vocab):
        assert tokenize("", vocab) == []

    def test_known(self, vocab):
        assert tokenize("Red BLUE", vocab) == [5, 7]

    def test_unknown_word_position(self, vocab):
        ids = tokenize("red purple blue", vocab)
        assert ids == [5, UNK, 7]
        assert ids.count(UNK) == 1

    def test_round_trip(self, vocab):
        ids = [7, 5, 6, 6]
        assert tokenize(detokenize(ids, vocab), vocab) == ids


class TestBuildHistory:
    def test_two_turns(self):
        h = build_history([[10, 11], [12, 13, 14]], max_len=64)
        assert len(h) == 7
        assert h.tokens == (SEP, 10, 11, SEP, 12, 13, 14)
        assert h.turn_ids == (0, 0, 0, 1, 1, 1, 1)

    def test_single_turn_masks_agree(self):
        h = build_history([[9, 9, 8]], max_len=64)
        assert set(h.turn_ids) == {0}
        np.testing.assert_array_equal(build_local_mask(h.turn_ids), build_global_mask(len(h)))

    @pytest.mark.parametrize("seed", range(20))
    def test_truncation_matches_replay(self, seed):
        rng = np.random.default_rng(seed)
        turns = [rng.integers(5, 50, size=int(rng.integers(1, 6))).tolist() for _ in range(10)]
        h = build_history(turns, max_len=16)
        tokens, turn_ids = replay_truncation(turns, 16)
        assert list(h.tokens) == tokens and list(h.turn_ids) == turn_ids
        assert len(h) <= 16
        newest = [SEP, *turns[-1]]
        assert list(h.tokens[-len(newest):]) == newest[-len(h):] or len(newest) > 16

    def test_newest_turn_head_truncated(self):
        h = build_history([[5, 6], list(range(10, 30))], max_len=6)
        assert h.tokens == (SEP, 25, 26, 27, 28, 29)

    def test_nothing_fits(self):
        with pytest.raises(ValueError):
            build_history([[5, 6]], max_len=1)

    def test_empty_turn(self):
        with pytest.raises(ValueError):
            build_history([[5], []], max_len=10)


def test_candidate_sequence():
    assert candidate_sequence([7, 8, 9], 10) == (BOS, 7, 8, 9, EOS)
    assert candidate_sequence([7, 8, 9], 4) == (BOS, 7, 8, EOS)


class TestSampling:
    def example(self, n_cands=6, positives=(2,)):
        vocab = Vocabulary([f"w{i}" for i in range(n_cands)])
        raw = RawExample(["w0 w1"], [f"w{i}" for i in range(n_cands)], list(positives), id="ex7")
        return encode_example(raw, vocab, 32)

    def test_exhaustion(self, rng):
        ex = self.example()
        (inst,) = sample_negatives(ex, 5, rng)
        assert inst.positive == ex.candidates[2]
        assert sorted(inst.negatives) == sorted(c for i, c in enumerate(ex.candidates) if i != 2)

    def test_too_few_names_example(self, rng):
        with pytest.raises(SamplingError, match="ex7"):
            sample_negatives(self.example(), 6, rng)

    def test_deterministic(self):
        ex = self.example(10)
        a = sample_negatives(ex, 3, np.random.default_rng(9))
        b = sample_negatives(ex, 3, np.random.default_rng(9))
        assert a == b

    def test_one_instance_per_positive(self, rng):
        out = sample_negatives(self.example(8, positives=(1, 4)), 2, rng)
        assert len(out) == 2
        for inst in out:
            assert not set(inst.negatives) & {out[0].positive, out[1].positive}

    def test_uniform(self):
        ex = self.example(11, positives=(0,))
        rng = np.random.default_rng(2024)
        draws, K = 10_000, 3
        counts = collections.Counter()
        for _ in range(draws):
            (inst,) = sample_negatives(ex, K, rng)
            counts.update(inst.negatives)
        p = K / 10
        sigma = math.sqrt(draws * p * (1 - p))
        assert len(counts) == 10
        for c in counts.values():
            assert abs(c - draws * p) <= 3 * sigma


class TestDatasetFiles:
    def test_round_trip(self, tmp_path):
        rows = [RawExample(["a b", "c"], ["x", "y z"], [1], id="u1"), RawExample(["é"], ["q"], [0], id="u2")]
        write_dataset(tmp_path / "d.jsonl", rows)
        assert read_dataset(tmp_path / "d.jsonl") == rows

    def test_header_optional(self, tmp_path):
        (tmp_path / "d.jsonl").write_text('{"history": ["a"], "candidates": ["b"], "positive_indices": [0]}\n')
        assert read_dataset(tmp_path / "d.jsonl")[0].candidates == ["b"]

    @pytest.mark.parametrize(
        "line", ["not json", '{"history": ["a"]}', '{"format": "unitrec-dataset", "version": 9}',
                 '{"history": ["a"], "candidates": ["b"], "positive_indices": [3]}']
    )
    def test_bad_lines(self, tmp_path, line):
        (tmp_path / "d.jsonl").write_text(line + "\n")
        with pytest.raises(DataFormatError, match=":1:"):
            read_dataset(tmp_path / "d.jsonl")


class TestSynthetic:
    def test_byte_identical(self, tmp_path):
        save_synthetic(generate_synthetic(SMALL), tmp_path / "a")
        save_synthetic(generate_synthetic(SMALL), tmp_path / "b")
        for name in ("train.jsonl", "test.jsonl", "vocab.txt"):
            assert filecmp.cmp(tmp_path / "a" / name, tmp_path / "b" / name, shallow=False)

    def test_shapes(self):
        ds = generate_synthetic(SMALL)
        assert len(ds.train) == 40 and len(ds.test) == 10
        assert len(ds.vocab) == SMALL.vocab_size
        for ex in ds.train:
            assert len(ex.candidates) == SMALL.n_candidates and len(ex.positive_indices) == 1
            assert SMALL.min_turns <= len(ex.history) <= SMALL.max_turns

    def test_vocab_too_small(self):
        with pytest.raises(ValueError, match="too small"):
            SyntheticSpec(n_topics=8, vocab_size=40)

    def test_two_candidates_one_negative(self, rng):
        spec = SyntheticSpec(n_candidates=2, n_train=20, n_test=0)
        ds = generate_synthetic(spec)
        for ex in ds.train:
            (inst,) = sample_negatives(encode_example(ex, ds.vocab, 128), 1, rng)
            assert inst.K == 1

    def test_topic_mass_audit(self):
        spec = SyntheticSpec(n_topics=2, n_train=200, n_test=0, seed=3)
        ds = generate_synthetic(spec)
        pos_share, neg_share = [], []
        for ex in ds.train:
            topic = ds.user_topics[ex.id]
            for j, cand in enumerate(ex.candidates):
                words = cand.split()
                share = sum(word_topic(w) == topic for w in words) / len(words)
                (pos_share if j in ex.positive_indices else neg_share).append(share)
        assert np.mean(pos_share) >= 0.60
        assert np.mean(neg_share) <= 0.20

    def test_bag_of_words_classifier(self):
        ds = generate_synthetic(SyntheticSpec(n_train=0, n_test=500))
        correct = 0
        for ex in ds.test:
            votes = collections.Counter(word_topic(w) for t in ex.history for w in t.split())
            votes.pop(None, None)
            topic = votes.most_common(1)[0][0]
            scores = [sum(word_topic(w) == topic for w in c.split()) / len(c.split()) for c in ex.candidates]
            correct += int(np.argmax(scores) in ex.positive_indices)
        assert correct / len(ds.test) > 0.95

    def test_stats(self):
        ds = generate_synthetic(SMALL)
        stats = dataset_stats(ds.train)
        assert stats["avg_candidates"] == SMALL.n_candidates
        assert SMALL.min_turns <= stats["avg_history_turns"] <= SMALL.max_turns
        assert SMALL.min_tokens <= stats["avg_candidate_tokens"] <= SMALL.max_tokens
