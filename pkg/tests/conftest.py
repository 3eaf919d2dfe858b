from __future__ import annotations

from pathlib import Path

import numpy as np
import pytest

from dygrag.backbone import BackboneConfig, SequenceModel
from dygrag.graphdata import (
    bin_time_steps,
    parse_edge_list,
    SplitSpec,
    synth_graph,
    SynthParams,
    TemporalGraph,
)
from dygrag.sequencer import build_pool, build_vocab, RetrievalPool, Vocab


def pytest_addoption(parser: pytest.Parser) -> None:
    parser.addoption(
        "--run-slow",
        action="store_true",
        default=False,
        help="run the desk-scale training tests",
    )


def pytest_collection_modifyitems(
    config: pytest.Config, items: list[pytest.Item]
) -> None:
    if config.getoption("--run-slow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --run-slow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


# Binned into T=3 steps of width 10:
#   a: b @1, c @2, d @3      e: b @2, d @3      f: g @3
TOY_EDGES = """\
# u v t
a b 0
a c 10
e b 12
a d 20
e d 22
f g 30
"""


@pytest.fixture
def toy_graph() -> TemporalGraph:
    return bin_time_steps(parse_edge_list(TOY_EDGES.splitlines()), 3)


@pytest.fixture
def toy_vocab(toy_graph: TemporalGraph) -> Vocab:
    return build_vocab(toy_graph)


@pytest.fixture
def synth_params() -> SynthParams:
    return SynthParams(communities=2, members=4, steps=6, overlap=1.0, targets=2)


@pytest.fixture
def synth(synth_params: SynthParams) -> TemporalGraph:
    return synth_graph(synth_params, seed=0)


@pytest.fixture
def synth_split(synth: TemporalGraph) -> SplitSpec:
    return SplitSpec.for_steps(synth.step_count)


@pytest.fixture
def synth_vocab(synth: TemporalGraph) -> Vocab:
    return build_vocab(synth)


@pytest.fixture
def synth_pool(synth: TemporalGraph, synth_split: SplitSpec) -> RetrievalPool:
    return build_pool(synth, synth_split)


@pytest.fixture
def tiny_config() -> BackboneConfig:
    return BackboneConfig(layers=1, heads=2, hidden_dim=8, max_len=64)


@pytest.fixture
def tiny_model(tiny_config: BackboneConfig, synth_vocab: Vocab) -> SequenceModel:
    return SequenceModel(tiny_config, len(synth_vocab), np.random.default_rng(0))


@pytest.fixture
def edge_file(tmp_path: Path) -> Path:
    path = tmp_path / "edges.txt"
    path.write_text(TOY_EDGES, encoding="utf-8")
    return path
