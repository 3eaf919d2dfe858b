from __future__ import annotations

import itertools
from pathlib import Path

import pytest

from dygrag.exceptions import (
    DegenerateTimeRangeError,
    EdgeListParseError,
    EmptyInputError,
    EmptySplitWarning,
    InvalidParameterError,
    UnknownTargetError,
)
from dygrag.graphdata import (
    bin_time_steps,
    load_graph,
    parse_edge_list,
    read_node_map,
    serialize_edge_list,
    split,
    SplitSpec,
    synth_graph,
    SynthParams,
    TemporalGraph,
    write_node_map,
)
from dygrag.sequencer import build_pool


class TestParseEdgeList:
    def test_counts(self) -> None:
        graph = parse_edge_list(["x y 1", "y z 2", "x z 3"])
        assert len(graph.events) == 3
        assert graph.node_count == 3

    def test_sorted_by_time(self) -> None:
        graph = parse_edge_list(["a b 5", "c d 1"])
        assert [e.t for e in graph.events] == [1.0, 5.0]
        assert graph.node_names == ("c", "d", "a", "b")

    def test_missing_timestamp(self) -> None:
        with pytest.raises(EdgeListParseError, match="line 1: expected 'u v t'"):
            parse_edge_list(["a b"])

    @pytest.mark.parametrize("stamp", ["soon", "-1", "nan"])
    def test_bad_timestamp(self, stamp: str) -> None:
        with pytest.raises(EdgeListParseError, match="line 2: bad timestamp"):
            parse_edge_list(["a b 1", f"a c {stamp}"])

    def test_comments_and_blank_lines(self) -> None:
        graph = parse_edge_list(["# header", "", "a b 1  # trailing"])
        assert len(graph.events) == 1

    def test_self_loops_dropped(self) -> None:
        graph = parse_edge_list(["a a 1", "a b 2"])
        assert len(graph.events) == 1

    @pytest.mark.parametrize("lines", [[], ["# only a comment"], ["a a 3"]])
    def test_empty(self, lines: list[str]) -> None:
        with pytest.raises(EmptyInputError):
            parse_edge_list(lines)

    def test_serialize_round_trip(self, toy_graph: TemporalGraph) -> None:
        text = serialize_edge_list(toy_graph)
        again = parse_edge_list(text.splitlines())
        assert serialize_edge_list(again) == text
        assert again.events == toy_graph.events

    def test_serialize_keeps_fractions(self) -> None:
        graph = parse_edge_list(["a b 1.25", "a c 3"])
        assert serialize_edge_list(graph) == "a b 1.25\na c 3\n"


class TestBinTimeSteps:
    def test_step_arithmetic(self) -> None:
        lines = [f"n{t} m{t} {t}" for t in range(100)]
        graph = bin_time_steps(parse_edge_list(lines), 10)
        assert graph.step_of(37) == 4
        assert graph.steps[37] == 4

    def test_steps_cover_range(self) -> None:
        lines = [f"n{t} m{t} {t}" for t in range(100)]
        graph = bin_time_steps(parse_edge_list(lines), 10)
        assert min(graph.steps) == 1
        assert max(graph.steps) == 10
        assert list(graph.steps) == sorted(graph.steps)

    def test_degenerate(self) -> None:
        with pytest.raises(DegenerateTimeRangeError):
            bin_time_steps(parse_edge_list(["a b 1", "c d 1"]), 3)

    def test_too_few_steps(self) -> None:
        with pytest.raises(InvalidParameterError, match="T=2"):
            bin_time_steps(parse_edge_list(["a b 1", "c d 2"]), 2)

    def test_timeline(self, toy_graph: TemporalGraph) -> None:
        names = toy_graph.node_names
        contacts = [(c.step, names[c.partner]) for c in toy_graph.timeline("a")]
        assert contacts == [(1, "b"), (2, "c"), (3, "d")]

    def test_unknown_target(self, toy_graph: TemporalGraph) -> None:
        with pytest.raises(UnknownTargetError, match="'zz'"):
            toy_graph.timeline("zz")

    def test_events_per_step(self, toy_graph: TemporalGraph) -> None:
        assert toy_graph.events_per_step() == {1: 1, 2: 2, 3: 3}


class TestSplit:
    def test_definition(self) -> None:
        lines = [f"a{t} b{t} {t}" for t in range(5)]
        graph = bin_time_steps(parse_edge_list(lines), 5)
        spec = SplitSpec.for_steps(5)
        parts = split(graph, spec)
        assert spec.train_steps == range(1, 4)
        assert [e.t for e in parts.train] == [0.0, 1.0, 2.0]
        assert [e.t for e in parts.val] == [3.0]
        assert [e.t for e in parts.test] == [4.0]

    def test_disjoint_and_complete(self, synth: TemporalGraph) -> None:
        parts = split(synth, SplitSpec.for_steps(synth.step_count))
        combined = [*parts.train, *parts.val, *parts.test]
        assert sorted(combined, key=lambda e: (e.t, e.u, e.v)) == sorted(
            synth.events, key=lambda e: (e.t, e.u, e.v)
        )

    def test_empty_validation_warns(self) -> None:
        graph = bin_time_steps(parse_edge_list(["a b 0", "a c 0.5", "a d 3"]), 3)
        with pytest.warns(EmptySplitWarning, match="val"):
            split(graph, SplitSpec.for_steps(3))

    def test_spec_must_partition(self) -> None:
        with pytest.raises(InvalidParameterError):
            SplitSpec(range(1, 3), 4, 5)

    def test_text_round_trip(self) -> None:
        spec = SplitSpec.for_steps(8)
        assert spec.to_text() == "train 1 6\nval 7\ntest 8\n"
        assert SplitSpec.from_text(spec.to_text()) == spec

    def test_malformed_manifest(self) -> None:
        with pytest.raises(ValueError, match="malformed"):
            SplitSpec.from_text("val 3\n")


class TestSynthGraph:
    def test_deterministic(self) -> None:
        params = SynthParams(communities=4, members=10, steps=8, overlap=0.9)
        first = synth_graph(params, seed=11)
        second = synth_graph(params, seed=11)
        assert first == second
        assert serialize_edge_list(first) == serialize_edge_list(second)

    def test_steps_match_params(self, synth: TemporalGraph) -> None:
        assert synth.step_count == 6
        assert set(synth.steps) == set(range(1, 7))

    def test_full_overlap_gives_identical_outputs(
        self, synth: TemporalGraph, synth_split: SplitSpec
    ) -> None:
        pool = build_pool(synth, synth_split)
        by_community: dict[str, set[frozenset[int]]] = {}
        for sample in pool:
            community = synth.node_names[sample.target.id][:2]
            by_community.setdefault(community, set()).add(sample.output_nodes)
        assert len(by_community) == 2
        assert all(len(outputs) == 1 for outputs in by_community.values())

    def test_no_overlap_keeps_communities_apart(self) -> None:
        params = SynthParams(communities=3, members=4, steps=6, overlap=0.0)
        graph = synth_graph(params, seed=2)
        pool = build_pool(graph, SplitSpec.for_steps(6))
        for a, b in itertools.combinations(pool, 2):
            if graph.node_names[a.target.id][:2] != graph.node_names[b.target.id][:2]:
                assert not (a.output_nodes & b.output_nodes)

    @pytest.mark.parametrize(
        "kwargs",
        [
            {"overlap": 1.5},
            {"members": 1},
            {"steps": 3},
            {"targets": 0},
        ],
    )
    def test_invalid(self, kwargs: dict[str, float]) -> None:
        with pytest.raises(InvalidParameterError):
            SynthParams(**kwargs)  # type: ignore[arg-type]


def test_node_map_round_trip(toy_graph: TemporalGraph, tmp_path: Path) -> None:
    path = tmp_path / "nodes.txt"
    write_node_map(toy_graph, path)
    assert read_node_map(path) == toy_graph.node_names


def test_load_graph(edge_file: Path) -> None:
    graph = load_graph(edge_file, 3)
    assert graph.step_count == 3
    assert graph.node_count == 7
