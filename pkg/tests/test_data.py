import json

import numpy as np
import pytest
from hypothesis import given, strategies as st

from avdialog.data import (CorpusError, SynthSpec, TimeRegion, build_decoder_context,
                           build_vocabulary, generate_synthetic_corpus, load_corpus,
                           save_corpus)
from avdialog.vocab import RESERVED, SOS, Vocabulary, tokenize
from avdialog.vocab import build_vocabulary as build_vocab_from_streams


def test_tokenize_lowercases_and_splits_punctuation():
    assert tokenize("Is he Walking?") == ["is", "he", "walking", "?"]
    assert tokenize("it's a dog.") == ["it's", "a", "dog", "."]


class TestVocabulary:
    def test_reserved_ids_fixed(self):
        v = Vocabulary(["dog"])
        assert [v.id_of(t) for t in RESERVED] == [0, 1, 2, 3]
        assert v.id_of("dog") == 4

    def test_bijection_and_contiguous_ids(self, tiny_vocab):
        tokens = tiny_vocab.tokens()
        assert len(set(tokens)) == len(tokens)
        assert [tiny_vocab.id_of(t) for t in tokens] == list(range(len(tiny_vocab)))

    def test_min_count_threshold(self):
        streams = [["person"] * 5, ["walks"] * 6]
        v = build_vocab_from_streams(streams, min_count=6)
        assert v.id_of("person") == v.unk_id
        assert "walks" in v

    def test_min_count_one_covers_everything(self, tiny_corpus):
        v = build_vocabulary(tiny_corpus, min_count=1)
        for stream in tiny_corpus.token_streams():
            assert all(t in v for t in stream)

    @given(st.lists(st.lists(st.sampled_from(["a", "b", "cc", "d"]), max_size=6), max_size=8))
    def test_identical_multisets_identical_vocab(self, streams):
        flat = sorted(t for s in streams for t in s)
        assert build_vocab_from_streams(streams) == build_vocab_from_streams([flat])


class TestCorpusIO:
    def test_roundtrip(self, tiny_corpus, tmp_path):
        save_corpus(tiny_corpus, tmp_path / "d.json", tmp_path / "feat")
        reloaded = load_corpus(tmp_path / "d.json", tmp_path / "feat")
        assert reloaded.samples == tiny_corpus.samples
        for vid, fs in tiny_corpus.features.items():
            got = reloaded.features[vid]
            assert np.array_equal(got.audio, fs.audio)
            assert np.array_equal(got.visual, fs.visual)
            assert got.duration == fs.duration

    def test_empty_dialog_list_is_valid(self, tmp_path):
        (tmp_path / "d.json").write_text(json.dumps({"dialogs": []}))
        corpus = load_corpus(tmp_path / "d.json", tmp_path)
        assert corpus.samples == []

    def test_turn_counts(self, tiny_corpus, tmp_path):
        save_corpus(tiny_corpus, tmp_path / "d.json", tmp_path / "feat")
        doc = json.loads((tmp_path / "d.json").read_text())
        doc["dialogs"] = doc["dialogs"][:1]
        (tmp_path / "one.json").write_text(json.dumps(doc))
        corpus = load_corpus(tmp_path / "one.json", tmp_path / "feat")
        assert len(corpus.samples) == 1
        assert corpus.num_turns() == 2

    def test_missing_feature_file_names_video(self, tiny_corpus, tmp_path):
        save_corpus(tiny_corpus, tmp_path / "d.json", tmp_path / "feat")
        (tmp_path / "feat" / "vid0000.audio.bin").unlink()
        with pytest.raises(CorpusError, match="vid0000"):
            load_corpus(tmp_path / "d.json", tmp_path / "feat")

    def test_malformed_region_rejected(self, tiny_corpus, tmp_path):
        save_corpus(tiny_corpus, tmp_path / "d.json", tmp_path / "feat")
        doc = json.loads((tmp_path / "d.json").read_text())
        doc["dialogs"][0]["reasons"][0][0] = {"start": 3.0, "end": 1.0}
        (tmp_path / "bad.json").write_text(json.dumps(doc))
        with pytest.raises(CorpusError):
            load_corpus(tmp_path / "bad.json", tmp_path / "feat")


class TestDecoderContext:
    def test_first_turn_same_under_both_policies(self, tiny_corpus):
        s = tiny_corpus.samples[0]
        full = build_decoder_context(s, 0, "full")
        prev = build_decoder_context(s, 0, "previous_question_only")
        assert full == prev == list(s.turns[0].question) + [SOS]

    def test_previous_question_only_ignores_history(self, tiny_corpus):
        s = tiny_corpus.samples[0]
        ctx = build_decoder_context(s, 1, "previous_question_only")
        assert ctx == list(s.turns[1].question) + [SOS]

    def test_full_concatenates_all_prior_turns(self, tiny_corpus):
        s = tiny_corpus.samples[0]
        ctx = build_decoder_context(s, 1, "full")
        expected = (list(s.turns[0].question) + list(s.turns[0].answer)
                    + list(s.turns[1].question) + [SOS])
        assert ctx == expected

    def test_context_length_property(self, tiny_corpus):
        for s in tiny_corpus.samples:
            for t in range(len(s.turns)):
                ctx = build_decoder_context(s, t, "previous_question_only")
                assert len(ctx) == len(s.turns[t].question) + 1

    def test_out_of_range(self, tiny_corpus):
        with pytest.raises(IndexError):
            build_decoder_context(tiny_corpus.samples[0], 5)


class TestSyntheticCorpus:
    def test_deterministic(self):
        spec = SynthSpec(num_videos=3, turns_per_dialog=2, T_a=6, T_v=4,
                         D_a=4, D_v=4, vocab_size=2)
        a = generate_synthetic_corpus(spec, 7)
        b = generate_synthetic_corpus(spec, 7)
        assert a.samples == b.samples
        assert all(np.array_equal(a.features[k].audio, b.features[k].audio)
                   for k in a.features)

    def test_counts(self):
        spec = SynthSpec(num_videos=10, turns_per_dialog=3, T_a=6, T_v=6,
                         D_a=4, D_v=4, vocab_size=2)
        c = generate_synthetic_corpus(spec, 1)
        assert len(c.samples) == 10
        assert c.num_turns() == 30

    def test_planted_regions_inside_video(self):
        spec = SynthSpec(num_videos=5, turns_per_dialog=4, T_a=8, T_v=8,
                         D_a=4, D_v=4, vocab_size=3)
        c = generate_synthetic_corpus(spec, 3)
        for s in c.samples:
            duration = c.features[s.video_id].duration
            for regions in s.reasons:
                for r in regions:
                    assert 0.0 <= r.start <= r.end <= duration

    def test_caption_leaks_answer(self, tiny_corpus):
        for s in tiny_corpus.samples:
            for turn in s.turns:
                sig = turn.answer[2]
                assert sig in s.caption

    def test_vocab_stable_across_rebuilds(self, tiny_corpus):
        v1 = build_vocabulary(tiny_corpus)
        v2 = build_vocabulary(tiny_corpus)
        assert v1 == v2


def test_time_region_rejects_reversed():
    with pytest.raises(CorpusError):
        TimeRegion(3.0, 1.0)
