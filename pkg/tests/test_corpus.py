import json
import math

import pytest
from hypothesis import given, strategies as st

from logicl.corpus import (
    Corpus,
    RawLogLine,
    chronological_split,
    compile_rules,
    group_by_session,
    group_by_window,
    load_corpus_jsonl,
    preprocess_line,
    save_corpus_jsonl,
)
from logicl.errors import ConfigError, CorpusFormatError, EmptyCorpusError

from conftest import make_seq


class TestPreprocessLine:
    def test_header_stripped_parameters_retained(self):
        raw = "081109 203518 143 INFO dfs.DataNode: Receiving block blk_123"
        rules = [(r"^\d{6} \d{6} \d+ ", "")]
        assert preprocess_line(raw, rules) == "INFO dfs.DataNode: Receiving block blk_123"

    def test_whitespace_normalized(self):
        assert preprocess_line("  hello   world  ", []) == "hello world"

    @given(st.text(max_size=200))
    def test_idempotent_without_rules(self, raw):
        once = preprocess_line(raw, [])
        assert preprocess_line(once, []) == once

    def test_rules_apply_in_order(self):
        rules = [("cat", "dog"), ("dog", "bird")]
        assert preprocess_line("cat", rules) == "bird"

    def test_invalid_rule_fails_at_compile_time(self):
        with pytest.raises(ConfigError):
            compile_rules([("(unclosed", "")])


class TestGroupBySession:
    def lines(self, keys, labels=None):
        labels = labels or [0] * len(keys)
        return [
            RawLogLine(line_no=i, text=f"msg {i} key={k}", label=l)
            for i, (k, l) in enumerate(zip(keys, labels))
        ]

    def test_partition_by_key(self):
        seqs = group_by_session(self.lines(["A", "B", "A", "B"]), r"key=(\w+)", "dom")
        assert len(seqs) == 2
        assert all(len(s.messages) == 2 for s in seqs)
        by_key = {s.id: s.messages for s in seqs}
        assert by_key["dom:A"] == ["msg 0 key=A", "msg 2 key=A"]

    def test_any_anomalous_rule(self):
        seqs = group_by_session(self.lines(["A"] * 4, [0, 0, 1, 0]), r"key=(\w+)", "dom")
        assert len(seqs) == 1 and seqs[0].label == 1

    def test_no_match_is_an_error(self):
        with pytest.raises(EmptyCorpusError):
            group_by_session(self.lines(["A"]), r"nothing=(\w+)", "dom")

    def test_unmatched_lines_dropped_with_warning(self, caplog):
        lines = self.lines(["A", "A"]) + [RawLogLine(line_no=9, text="no session here")]
        with caplog.at_level("WARNING"):
            seqs = group_by_session(lines, r"key=(\w+)", "dom")
        assert len(seqs) == 1
        assert "dropped 1" in caplog.text

    def test_pattern_needs_capture_group(self):
        with pytest.raises(ConfigError):
            group_by_session(self.lines(["A"]), r"key=\w+", "dom")


class TestGroupByWindow:
    def lines(self, n, labels=None):
        labels = labels or [0] * n
        return [RawLogLine(line_no=i, text=f"line {i}", label=labels[i]) for i in range(n)]

    def test_remainder_kept(self):
        seqs = group_by_window(self.lines(100), 40, "dom")
        assert [len(s.messages) for s in seqs] == [40, 40, 20]

    def test_exact_multiple(self):
        assert len(group_by_window(self.lines(40), 40, "dom")) == 1

    def test_drop_partial(self):
        seqs = group_by_window(self.lines(100), 40, "dom", drop_partial=True)
        assert [len(s.messages) for s in seqs] == [40, 40]

    def test_empty_input(self):
        with pytest.raises(EmptyCorpusError):
            group_by_window([], 40, "dom")

    @given(st.integers(min_value=1, max_value=200), st.integers(min_value=1, max_value=50))
    def test_window_count_closed_form(self, n, w):
        seqs = group_by_window(self.lines(n), w, "dom")
        assert len(seqs) == math.ceil(n / w)
        assert sum(len(s.messages) for s in seqs) == n

    @given(st.integers(min_value=1, max_value=120), st.integers(min_value=1, max_value=17))
    def test_concatenation_reproduces_input(self, n, w):
        lines = self.lines(n)
        seqs = group_by_window(lines, w, "dom")
        flattened = [m for s in seqs for m in s.messages]
        assert flattened == [ln.text for ln in lines]

    def test_label_is_max_over_members(self):
        labels = [0] * 10
        labels[7] = 1
        seqs = group_by_window(self.lines(10, labels), 5, "dom")
        assert [s.label for s in seqs] == [0, 1]


class TestChronologicalSplit:
    def corpus(self, n=10):
        return Corpus([make_seq(f"s{i}", [f"m{i}"]) for i in range(n)])

    def test_prefix_split(self):
        train, test = chronological_split(self.corpus(), 7, 3)
        assert [s.id for s in train] == [f"s{i}" for i in range(7)]
        assert [s.id for s in test] == ["s7", "s8", "s9"]

    def test_full_train_empty_test(self):
        train, test = chronological_split(self.corpus(), 10, 0)
        assert len(train) == 10 and len(test) == 0

    def test_ids_disjoint(self):
        train, test = chronological_split(self.corpus(), 6, 4)
        assert {s.id for s in train} & {s.id for s in test} == set()

    def test_counts_exceeding_size(self):
        with pytest.raises(ConfigError):
            chronological_split(self.corpus(), 8, 3)


class TestJsonlRoundTrip:
    def test_single_line_decode(self, tmp_path):
        path = tmp_path / "c.jsonl"
        path.write_text('{"id":"s1","domain":"BGL","label":0,"messages":["a","b"]}\n')
        corpus = load_corpus_jsonl(path)
        assert len(corpus) == 1
        assert corpus.sequences[0].messages == ["a", "b"]

    def test_round_trip_lossless(self, tmp_path, tiny_corpus):
        path = tmp_path / "c.jsonl"
        save_corpus_jsonl(tiny_corpus, path)
        assert load_corpus_jsonl(path) == tiny_corpus

    def test_save_load_save_byte_stable(self, tmp_path, tiny_corpus):
        p1, p2 = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
        save_corpus_jsonl(tiny_corpus, p1)
        save_corpus_jsonl(load_corpus_jsonl(p1), p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_missing_field_names_field_and_line(self, tmp_path):
        path = tmp_path / "c.jsonl"
        path.write_text(
            '{"id":"s1","domain":"d","label":0,"messages":["a"]}\n'
            '{"id":"s2","domain":"d","label":0}\n'
        )
        with pytest.raises(CorpusFormatError, match="missing field messages at line 2"):
            load_corpus_jsonl(path)

    def test_malformed_json_cites_line(self, tmp_path):
        path = tmp_path / "c.jsonl"
        path.write_text('{"id":"s1","domain":"d","label":0,"messages":["a"]}\n{oops\n')
        with pytest.raises(CorpusFormatError, match="line 2"):
            load_corpus_jsonl(path)

    def test_bad_label_rejected(self, tmp_path):
        path = tmp_path / "c.jsonl"
        path.write_text(json.dumps({"id": "x", "domain": "d", "label": 2, "messages": ["a"]}) + "\n")
        with pytest.raises(CorpusFormatError):
            load_corpus_jsonl(path)


class TestCorpusInvariants:
    def test_duplicate_ids_rejected(self):
        with pytest.raises(CorpusFormatError):
            Corpus([make_seq("x", ["a"]), make_seq("x", ["b"])])

    def test_domains_derived(self, tiny_corpus):
        assert tiny_corpus.domains == {"alpha", "beta"}
