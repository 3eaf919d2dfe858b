from __future__ import annotations

from pathlib import Path

import pytest

from dygrag.exceptions import (
    InvalidParameterError,
    UnknownTargetError,
    UnknownTokenError,
)
from dygrag.graphdata import bin_time_steps, parse_edge_list, SplitSpec, TemporalGraph
from dygrag.sequencer import (
    build_queries,
    build_vocab,
    ego_sequence,
    format_sample,
    Node,
    parse_sample,
    read_samples,
    RetrievalPool,
    Special,
    TimeStep,
    Vocab,
    write_samples,
)


class TestVocab:
    def test_size(self) -> None:
        vocab = Vocab(4, ["a", "b", "c", "d", "e"])
        assert len(vocab) == 7 + 5 + 5

    def test_pad_is_zero(self, toy_vocab: Vocab) -> None:
        assert toy_vocab.pad_id == 0

    def test_layout(self, toy_vocab: Vocab) -> None:
        assert toy_vocab.index(TimeStep(1)) == 7
        assert toy_vocab.node_offset == 7 + 4
        assert toy_vocab.token(toy_vocab.node_offset) == Node(0)
        assert [toy_vocab.is_node_id(i) for i in (10, 11)] == [False, True]

    def test_string_round_trip(self, toy_vocab: Vocab) -> None:
        for token in toy_vocab:
            assert toy_vocab.parse(toy_vocab.render(token)) == token

    def test_render(self, toy_vocab: Vocab) -> None:
        tokens = (Special.HIST, Node(0), TimeStep(2), Special.EOHIST)
        assert toy_vocab.render_all(tokens) == "[hist] a [time_2] [eohist]"

    def test_unknown(self, toy_vocab: Vocab) -> None:
        with pytest.raises(UnknownTokenError, match="'zz'"):
            toy_vocab.parse("zz")
        with pytest.raises(UnknownTokenError):
            toy_vocab.index(TimeStep(99))

    def test_rejects_bracketed_names(self) -> None:
        with pytest.raises(InvalidParameterError, match="must not start"):
            Vocab(3, ["a", "[pred]"])

    def test_encode_decode(self, toy_vocab: Vocab) -> None:
        tokens = (Special.PRED, TimeStep(3), Node(4), Special.EOPRED)
        assert toy_vocab.decode(toy_vocab.encode(tokens)) == tokens


class TestEgoSequence:
    def test_direct_construction(
        self, toy_graph: TemporalGraph, toy_vocab: Vocab
    ) -> None:
        sample = ego_sequence(toy_graph, "a", 3)
        render = toy_vocab.render_all
        assert render(sample.x) == "[hist] a [time_1] b [time_2] c [eohist]"
        assert render(sample.y) == "[pred] [time_3] d [eopred]"
        assert sample.last_time == 2
        assert sample.last_raw_time == 10.0
        assert sample.query_id == "a@3"

    def test_inductive(self, toy_graph: TemporalGraph, toy_vocab: Vocab) -> None:
        sample = ego_sequence(toy_graph, "f", 3)
        assert toy_vocab.render_all(sample.x) == "[hist] f [eohist]"
        assert sample.last_time == 0
        assert sample.is_inductive
        assert sample.history_nodes == ()

    def test_inductive_can_be_refused(self, toy_graph: TemporalGraph) -> None:
        with pytest.raises(InvalidParameterError):
            ego_sequence(toy_graph, "f", 3, allow_empty=False)

    def test_unknown_target(self, toy_graph: TemporalGraph) -> None:
        with pytest.raises(UnknownTargetError):
            ego_sequence(toy_graph, "nobody", 3)

    def test_time_tokens_increase(self, synth: TemporalGraph) -> None:
        for node in range(synth.node_count):
            sample = ego_sequence(synth, node, synth.step_count)
            steps = [t.step for t in sample.x if isinstance(t, TimeStep)]
            assert steps == sorted(set(steps))
            assert all(step < sample.prediction_step for step in steps)

    def test_no_leakage(self, synth: TemporalGraph) -> None:
        step = synth.step_count
        for node in range(synth.node_count):
            sample = ego_sequence(synth, node, step)
            later = {c.partner for c in synth.timeline(node) if c.step >= step}
            earlier = {c.partner for c in synth.timeline(node) if c.step < step}
            assert set(sample.history_nodes) <= earlier
            assert sample.output_nodes <= later

    def test_truncation_keeps_recent_blocks(self) -> None:
        lines = [f"a p{t} {t}" for t in range(10)] + ["a q 10"]
        graph = bin_time_steps(parse_edge_list(lines), 11)
        sample = ego_sequence(graph, "a", 11, max_len=9)
        assert len(sample.x) <= 9
        assert sample.x[-2] == Node(graph.node_id("p9"))
        assert sample.last_time == 10

    def test_output_budget(self, toy_graph: TemporalGraph) -> None:
        sample = ego_sequence(toy_graph, "a", 3, max_output=0)
        assert sample.y == (Special.PRED, TimeStep(3), Special.EOPRED)


class TestBuildPool:
    def test_one_sample_per_active_node(
        self, synth: TemporalGraph, synth_split: SplitSpec, synth_pool: RetrievalPool
    ) -> None:
        targets = [s.target.id for s in synth_pool]
        assert len(targets) == len(set(targets)) == 8
        last_train = synth_split.train_steps.stop - 1
        assert all(s.prediction_step <= last_train for s in synth_pool)

    def test_single_step_nodes_skipped(self, synth_pool: RetrievalPool) -> None:
        # the shared targets only appear at the last training step
        assert synth_pool.skipped == 4

    def test_index_of(self, synth_pool: RetrievalPool) -> None:
        sample = synth_pool[3]
        assert synth_pool.index_of(sample.query_id) == 3
        with pytest.raises(KeyError):
            synth_pool.index_of("missing@1")

    def test_queries_allow_inductive(self, synth: TemporalGraph) -> None:
        queries = build_queries(synth, synth.step_count)
        assert any(q.is_inductive for q in queries)
        assert all(q.prediction_step == synth.step_count for q in queries)


class TestSampleFiles:
    def test_line_format(self, toy_graph: TemporalGraph, toy_vocab: Vocab) -> None:
        sample = ego_sequence(toy_graph, "a", 3)
        assert format_sample(sample, toy_vocab) == (
            "a\t[hist] a [time_1] b [time_2] c [eohist]\t"
            "[pred] [time_3] d [eopred]\t2\t10.0"
        )
        assert parse_sample(format_sample(sample, toy_vocab), toy_vocab) == sample

    def test_file_round_trip(
        self, synth_pool: RetrievalPool, synth_vocab: Vocab, tmp_path: Path
    ) -> None:
        path = tmp_path / "pool.tsv"
        write_samples(path, synth_pool, synth_vocab)
        assert read_samples(path, synth_vocab) == synth_pool.samples

    def test_malformed(self, toy_vocab: Vocab) -> None:
        with pytest.raises(ValueError, match="5 tab-separated"):
            parse_sample("a\tb", toy_vocab)


def test_build_vocab(toy_graph: TemporalGraph) -> None:
    vocab = build_vocab(toy_graph)
    assert vocab.node_names == toy_graph.node_names
    assert vocab.step_count == 3
