"""Map ego histories of a temporal graph to token sequences."""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass
from itertools import groupby
from pathlib import Path
from typing import Iterable, Iterator, Sequence, Union

import numpy as np
import numpy.typing as npt

from .exceptions import InvalidParameterError, UnknownTokenError
from .graphdata import Contact, SplitSpec, TemporalGraph

logger = logging.getLogger(__name__)


class Special(enum.Enum):
    # declaration order is vocabulary order; PAD must stay first
    PAD = "[pad]"
    HIST = "[hist]"
    EOHIST = "[eohist]"
    PRED = "[pred]"
    EOPRED = "[eopred]"
    MASK = "[mask]"
    UNK = "[unk]"


@dataclass(frozen=True)
class TimeStep:
    step: int


@dataclass(frozen=True)
class Node:
    id: int


Token = Union[Special, TimeStep, Node]


class Vocab:
    """Bijection between tokens and contiguous integer ids."""

    def __init__(self, step_count: int, node_names: Sequence[str]) -> None:
        for name in node_names:
            if name.startswith("["):
                raise InvalidParameterError(
                    "node name", name, "must not start with '['"
                )
        self.step_count = step_count
        self.node_names = tuple(node_names)
        self._tokens: tuple[Token, ...] = (
            *Special,
            *(TimeStep(k) for k in range(1, step_count + 2)),
            *(Node(i) for i in range(len(self.node_names))),
        )
        self._index = {token: i for i, token in enumerate(self._tokens)}
        self._by_string = {self.render(token): token for token in self._tokens}
        self.special_count = len(Special)
        self.time_count = step_count + 1
        self.node_count = len(self.node_names)
        self.node_offset = self.special_count + self.time_count

    def __len__(self) -> int:
        return len(self._tokens)

    def __iter__(self) -> Iterator[Token]:
        return iter(self._tokens)

    def __repr__(self) -> str:
        return (
            f"<Vocab steps={self.step_count} nodes={self.node_count} size={len(self)}>"
        )

    def index(self, token: Token) -> int:
        try:
            return self._index[token]
        except KeyError:
            raise UnknownTokenError(repr(token)) from None

    def token(self, index: int) -> Token:
        return self._tokens[index]

    def render(self, token: Token) -> str:
        if isinstance(token, Special):
            return token.value
        if isinstance(token, TimeStep):
            return f"[time_{token.step}]"
        return self.node_names[token.id]

    def parse(self, text: str) -> Token:
        try:
            return self._by_string[text]
        except KeyError:
            raise UnknownTokenError(text) from None

    def encode(self, tokens: Iterable[Token]) -> npt.NDArray[np.intp]:
        return np.array([self.index(t) for t in tokens], dtype=np.intp)

    def decode(self, ids: Iterable[int]) -> tuple[Token, ...]:
        return tuple(self._tokens[int(i)] for i in ids)

    def render_all(self, tokens: Iterable[Token]) -> str:
        return " ".join(self.render(t) for t in tokens)

    def parse_all(self, text: str) -> tuple[Token, ...]:
        return tuple(self.parse(part) for part in text.split())

    @property
    def pad_id(self) -> int:
        return self._index[Special.PAD]

    def node_ids(self) -> npt.NDArray[np.intp]:
        return np.arange(self.node_offset, len(self), dtype=np.intp)

    def is_node_id(self, index: int) -> bool:
        return index >= self.node_offset


def build_vocab(graph: TemporalGraph) -> Vocab:
    return Vocab(graph.step_count, graph.node_names)


@dataclass(frozen=True)
class EgoSample:
    query_id: str
    target: Node
    x: tuple[Token, ...]
    y: tuple[Token, ...]
    last_time: int
    prediction_step: int
    last_raw_time: float = 0.0

    @property
    def history_nodes(self) -> tuple[int, ...]:
        """Partner node ids in ``x``, target excluded."""
        return tuple(t.id for t in self.x[2:] if isinstance(t, Node))

    @property
    def output_nodes(self) -> frozenset[int]:
        return frozenset(t.id for t in self.y if isinstance(t, Node))

    @property
    def is_inductive(self) -> bool:
        return self.last_time == 0


def _history_blocks(contacts: Sequence[Contact]) -> list[list[Token]]:
    blocks = []
    for step, group in groupby(contacts, key=lambda c: c.step):
        blocks.append([TimeStep(step), *(Node(c.partner) for c in group)])
    return blocks


def _truncate(blocks: list[list[Token]], budget: int) -> list[list[Token]]:
    """Drop the oldest history until at most ``budget`` tokens remain."""
    blocks = [list(b) for b in blocks]
    while blocks and sum(map(len, blocks)) > budget:
        excess = sum(map(len, blocks)) - budget
        oldest = blocks[0]
        if len(blocks) > 1 or len(oldest) - excess < 2:
            blocks.pop(0)
        else:
            del oldest[1 : 1 + excess]
    return blocks


def ego_sequence(
    graph: TemporalGraph,
    target: int | str,
    prediction_step: int,
    *,
    allow_empty: bool = True,
    max_len: int | None = None,
    max_output: int | None = None,
) -> EgoSample:
    node = graph.node_id(target)
    timeline = graph.timeline(node)
    history = [c for c in timeline if c.step < prediction_step]
    future = [c for c in timeline if c.step == prediction_step]
    if not history and not allow_empty:
        raise InvalidParameterError(
            "history", graph.node_names[node], "non-empty history before the step"
        )

    blocks = _history_blocks(history)
    if max_len is not None:
        if max_len < 4:
            raise InvalidParameterError("max_len", max_len, ">= 4")
        blocks = _truncate(blocks, max_len - 3)
    x: list[Token] = [Special.HIST, Node(node)]
    for block in blocks:
        x.extend(block)
    x.append(Special.EOHIST)

    partners = [Node(c.partner) for c in future]
    if max_output is not None:
        partners = partners[:max_output]
    y = (Special.PRED, TimeStep(prediction_step), *partners, Special.EOPRED)

    # truncation only removes the oldest history, so the last contact survives
    last_block = blocks[-1][0] if blocks else None
    return EgoSample(
        query_id=f"{graph.node_names[node]}@{prediction_step}",
        target=Node(node),
        x=tuple(x),
        y=y,
        last_time=last_block.step if isinstance(last_block, TimeStep) else 0,
        prediction_step=prediction_step,
        last_raw_time=history[-1].t if blocks else 0.0,
    )


@dataclass(frozen=True)
class RetrievalPool:
    samples: tuple[EgoSample, ...]
    skipped: int = 0

    def __len__(self) -> int:
        return len(self.samples)

    def __iter__(self) -> Iterator[EgoSample]:
        return iter(self.samples)

    def __getitem__(self, index: int) -> EgoSample:
        return self.samples[index]

    def index_of(self, query_id: str) -> int:
        for i, sample in enumerate(self.samples):
            if sample.query_id == query_id:
                return i
        raise KeyError(query_id)


def build_pool(
    graph: TemporalGraph,
    spec: SplitSpec,
    *,
    max_len: int | None = None,
    max_output: int | None = None,
) -> RetrievalPool:
    """One sample per node active in training: its last training step is the target."""
    last_train = spec.train_steps.stop - 1
    samples = []
    skipped = 0
    for node in range(graph.node_count):
        steps = sorted({c.step for c in graph.timeline(node) if c.step <= last_train})
        if not steps:
            continue
        if len(steps) == 1:
            skipped += 1
            continue
        samples.append(
            ego_sequence(
                graph,
                node,
                steps[-1],
                allow_empty=False,
                max_len=max_len,
                max_output=max_output,
            )
        )
    if skipped:
        logger.info("pool: skipped %d node(s) active at one step only", skipped)
    return RetrievalPool(tuple(samples), skipped)


def build_queries(
    graph: TemporalGraph,
    step: int,
    *,
    max_len: int | None = None,
    max_output: int | None = None,
) -> tuple[EgoSample, ...]:
    """Queries for every node interacting at ``step``; history may be empty."""
    active = sorted(
        node
        for node, contacts in graph.timelines.items()
        if any(c.step == step for c in contacts)
    )
    return tuple(
        ego_sequence(graph, node, step, max_len=max_len, max_output=max_output)
        for node in active
    )


def format_sample(sample: EgoSample, vocab: Vocab) -> str:
    return "\t".join(
        (
            vocab.render(sample.target),
            vocab.render_all(sample.x),
            vocab.render_all(sample.y),
            str(sample.last_time),
            repr(sample.last_raw_time),
        )
    )


def parse_sample(line: str, vocab: Vocab) -> EgoSample:
    fields = line.rstrip("\n").split("\t")
    if len(fields) != 5:
        msg = f"expected 5 tab-separated fields, got {len(fields)}"
        raise ValueError(msg)
    target_text, x_text, y_text, last_time, last_raw_time = fields
    target = vocab.parse(target_text)
    y = vocab.parse_all(y_text)
    if not isinstance(target, Node) or len(y) < 3 or not isinstance(y[1], TimeStep):
        msg = f"malformed sample line: {line!r}"
        raise ValueError(msg)
    return EgoSample(
        query_id=f"{target_text}@{y[1].step}",
        target=target,
        x=vocab.parse_all(x_text),
        y=y,
        last_time=int(last_time),
        prediction_step=y[1].step,
        last_raw_time=float(last_raw_time),
    )


def write_samples(path: Path, samples: Iterable[EgoSample], vocab: Vocab) -> None:
    path.write_text(
        "".join(format_sample(s, vocab) + "\n" for s in samples), encoding="utf-8"
    )


def read_samples(path: Path, vocab: Vocab) -> tuple[EgoSample, ...]:
    lines = path.read_text(encoding="utf-8").splitlines()
    return tuple(parse_sample(line, vocab) for line in lines if line.strip())
