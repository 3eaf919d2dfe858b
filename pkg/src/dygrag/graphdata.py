"""Temporal interaction graphs: parsing, time binning, splits and synthesis."""

from __future__ import annotations

import dataclasses
import logging
import math
import sys
import warnings
from collections import defaultdict
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

from .exceptions import (
    DegenerateTimeRangeError,
    EdgeListParseError,
    EmptyInputError,
    EmptySplitWarning,
    InvalidParameterError,
    UnknownTargetError,
)

if sys.version_info >= (3, 11):
    from typing import Self
else:
    from typing_extensions import Self

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class TemporalEvent:
    """An undirected interaction; endpoints are stored with ``u < v``."""

    u: int
    v: int
    t: float

    def other(self, node: int) -> int:
        return self.v if node == self.u else self.u


@dataclass(frozen=True)
class Contact:
    """One entry of a node's timeline."""

    step: int
    t: float
    partner: int


@dataclass(frozen=True)
class TemporalGraph:
    node_names: tuple[str, ...]
    events: tuple[TemporalEvent, ...]
    step_count: int = 0
    steps: tuple[int, ...] = ()
    time_origin: float = 0.0
    step_width: float = 0.0

    @property
    def node_count(self) -> int:
        return len(self.node_names)

    @property
    def is_binned(self) -> bool:
        return self.step_count > 0

    @cached_property
    def node_index(self) -> Mapping[str, int]:
        return {name: i for i, name in enumerate(self.node_names)}

    def node_id(self, node: int | str) -> int:
        if isinstance(node, str):
            try:
                return self.node_index[node]
            except KeyError:
                raise UnknownTargetError(node) from None
        if not 0 <= node < self.node_count:
            raise UnknownTargetError(node)
        return node

    def step_of(self, t: float) -> int:
        """The step, in ``[1..T]``, holding raw timestamp ``t``."""
        if not self.is_binned:
            msg = "graph has not been binned into steps"
            raise ValueError(msg)
        step = int(math.floor((t - self.time_origin) / self.step_width)) + 1
        return min(max(step, 1), self.step_count)

    @cached_property
    def timelines(self) -> Mapping[int, tuple[Contact, ...]]:
        """Per node, its contacts in raw-time order."""
        if not self.is_binned:
            msg = "graph has not been binned into steps"
            raise ValueError(msg)
        contacts: dict[int, list[Contact]] = defaultdict(list)
        for event, step in zip(self.events, self.steps):
            contacts[event.u].append(Contact(step, event.t, event.v))
            contacts[event.v].append(Contact(step, event.t, event.u))
        return {node: tuple(cs) for node, cs in contacts.items()}

    def timeline(self, node: int | str) -> tuple[Contact, ...]:
        return self.timelines.get(self.node_id(node), ())

    def events_per_step(self) -> dict[int, int]:
        counts = dict.fromkeys(range(1, self.step_count + 1), 0)
        for step in self.steps:
            counts[step] += 1
        return counts


def _assemble(named: Iterable[tuple[str, str, float]]) -> TemporalGraph:
    """Sort events by time (stable) and densely index node names."""
    ordered = sorted(named, key=lambda e: e[2])
    if not ordered:
        raise EmptyInputError("edge list")
    index: dict[str, int] = {}
    events = []
    for u_name, v_name, t in ordered:
        u = index.setdefault(u_name, len(index))
        v = index.setdefault(v_name, len(index))
        events.append(TemporalEvent(min(u, v), max(u, v), t))
    return TemporalGraph(node_names=tuple(index), events=tuple(events))


def _parse_timestamp(text: str) -> float:
    value = float(text)
    if not math.isfinite(value) or value < 0:
        raise ValueError(text)
    return value


def parse_edge_list(lines: Iterable[str]) -> TemporalGraph:
    """Parse ``u v t`` lines; ``#`` starts a comment, self-loops are dropped."""
    named: list[tuple[str, str, float]] = []
    self_loops = 0
    for line_number, line in enumerate(lines, 1):
        content = line.split("#", 1)[0].strip()
        if not content:
            continue
        fields = content.split()
        if len(fields) != 3:
            raise EdgeListParseError(line_number, line.rstrip("\n"), "expected 'u v t'")
        u, v, t_text = fields
        try:
            t = _parse_timestamp(t_text)
        except ValueError:
            raise EdgeListParseError(
                line_number, line.rstrip("\n"), "bad timestamp"
            ) from None
        if u == v:
            self_loops += 1
            continue
        named.append((u, v, t))
    if self_loops:
        logger.debug("dropped %d self-loop(s)", self_loops)
    return _assemble(named)


def _format_time(t: float) -> str:
    return str(int(t)) if t.is_integer() else repr(t)


def serialize_edge_list(graph: TemporalGraph) -> str:
    names = graph.node_names
    return "".join(
        f"{names[e.u]} {names[e.v]} {_format_time(e.t)}\n" for e in graph.events
    )


def bin_time_steps(graph: TemporalGraph, step_count: int) -> TemporalGraph:
    """Assign every event to one of ``step_count`` equal-width raw-time intervals."""
    if step_count < 3:
        raise InvalidParameterError("T", step_count, "T >= 3")
    times = np.array([e.t for e in graph.events], dtype=np.float64)
    t_min, t_max = float(times.min()), float(times.max())
    if t_min == t_max:
        raise DegenerateTimeRangeError(t_min)
    width = (t_max - t_min) / step_count
    steps = np.floor((times - t_min) / width).astype(np.int64) + 1
    steps = np.minimum(steps, step_count)
    return dataclasses.replace(
        graph,
        step_count=step_count,
        steps=tuple(int(s) for s in steps),
        time_origin=t_min,
        step_width=width,
    )


@dataclass(frozen=True)
class SplitSpec:
    train_steps: range
    val_step: int
    test_step: int

    def __post_init__(self) -> None:
        covered = [*self.train_steps, self.val_step, self.test_step]
        if covered != list(range(1, len(covered) + 1)):
            raise InvalidParameterError(
                "split", covered, "train, val and test steps partition [1..T]"
            )

    @classmethod
    def for_steps(cls, step_count: int) -> Self:
        if step_count < 3:
            raise InvalidParameterError("T", step_count, "T >= 3")
        return cls(range(1, step_count - 1), step_count - 1, step_count)

    @property
    def step_count(self) -> int:
        return self.test_step

    def to_text(self) -> str:
        return (
            f"train {self.train_steps.start} {self.train_steps.stop - 1}\n"
            f"val {self.val_step}\n"
            f"test {self.test_step}\n"
        )

    @classmethod
    def from_text(cls, text: str) -> Self:
        fields = {}
        for line in text.splitlines():
            if line.strip():
                name, *values = line.split()
                fields[name] = [int(v) for v in values]
        try:
            first, last = fields["train"]
            return cls(range(first, last + 1), fields["val"][0], fields["test"][0])
        except (KeyError, ValueError, IndexError):
            msg = f"malformed split manifest: {text!r}"
            raise ValueError(msg) from None


@dataclass(frozen=True)
class EventSplit:
    train: tuple[TemporalEvent, ...]
    val: tuple[TemporalEvent, ...]
    test: tuple[TemporalEvent, ...]


def split(graph: TemporalGraph, spec: SplitSpec) -> EventSplit:
    if graph.step_count != spec.step_count:
        raise InvalidParameterError(
            "split", spec.step_count, f"matches the graph's T={graph.step_count}"
        )
    parts: dict[str, list[TemporalEvent]] = {"train": [], "val": [], "test": []}
    for event, step in zip(graph.events, graph.steps):
        if step == spec.test_step:
            parts["test"].append(event)
        elif step == spec.val_step:
            parts["val"].append(event)
        else:
            parts["train"].append(event)
    for name in ("val", "test"):
        if not parts[name]:
            warnings.warn(
                EmptySplitWarning(f"the {name} split holds no event"), stacklevel=2
            )
    return EventSplit(tuple(parts["train"]), tuple(parts["val"]), tuple(parts["test"]))


@dataclass(frozen=True)
class SynthParams:
    communities: int = 4
    members: int = 10
    steps: int = 8
    overlap: float = 0.9
    targets: int = 5
    history_partners: int = 2
    newcomers: int = 1
    step_width: int = 10

    def __post_init__(self) -> None:
        if self.communities * self.members < 4:
            raise InvalidParameterError(
                "communities*members", self.communities * self.members, ">= 4"
            )
        if self.members < 2:
            raise InvalidParameterError("members", self.members, ">= 2")
        if self.steps < 4:
            raise InvalidParameterError("steps", self.steps, ">= 4")
        if not 0.0 <= self.overlap <= 1.0:
            raise InvalidParameterError("overlap", self.overlap, "0 <= overlap <= 1")
        if self.targets < 1 or self.history_partners < 1 or self.step_width < 2:
            raise InvalidParameterError(
                "targets/history_partners/step_width",
                (self.targets, self.history_partners, self.step_width),
                "targets >= 1, history_partners >= 1, step_width >= 2",
            )


def synth_graph(params: SynthParams, seed: int) -> TemporalGraph:
    """A community graph with a planted, retrievable output structure.

    Up to step T-3 members talk to random members of their own community.
    From step T-2 on, every member talks to ``targets`` partners per step;
    each slot is the community's shared target with probability ``overlap``
    and a partner private to that member otherwise. Newcomers first show up
    at step T, talking to the shared targets.
    """
    rng = np.random.default_rng(seed)
    width = params.step_width
    last = params.steps
    named: list[tuple[str, str, float]] = []

    def stamp(step: int) -> float:
        return float((step - 1) * width + int(rng.integers(0, width)))

    for c in range(params.communities):
        members = [f"c{c}m{i}" for i in range(params.members)]
        shared = [f"c{c}t{j}" for j in range(params.targets)]
        for step in range(1, last - 2):
            for i, member in enumerate(members):
                others = [m for k, m in enumerate(members) if k != i]
                count = min(params.history_partners, len(others))
                for k in rng.choice(len(others), size=count, replace=False):
                    named.append((member, others[int(k)], stamp(step)))
        for step in range(last - 2, last + 1):
            for i, member in enumerate(members):
                for j, target in enumerate(shared):
                    partner = (
                        target
                        if rng.random() < params.overlap
                        else f"c{c}m{i}s{step}p{j}"
                    )
                    named.append((member, partner, stamp(step)))
        for n in range(params.newcomers):
            for target in shared:
                named.append((f"c{c}n{n}", target, stamp(last)))

    # pin the raw-time range so that equal-width bins coincide with the steps
    named.sort(key=lambda e: e[2])
    u, v, _ = named[0]
    named[0] = (u, v, 0.0)
    u, v, _ = named[-1]
    named[-1] = (u, v, float(last * width))
    return bin_time_steps(_assemble(named), last)


def write_node_map(graph: TemporalGraph, path: Path) -> None:
    path.write_text(
        "".join(f"{name} {i}\n" for i, name in enumerate(graph.node_names)),
        encoding="utf-8",
    )


def read_node_map(path: Path) -> tuple[str, ...]:
    pairs = []
    for line in path.read_text(encoding="utf-8").splitlines():
        if line.strip():
            name, index = line.rsplit(None, 1)
            pairs.append((int(index), name))
    pairs.sort()
    if [i for i, _ in pairs] != list(range(len(pairs))):
        msg = f"node map {path} is not dense"
        raise ValueError(msg)
    return tuple(name for _, name in pairs)


def load_graph(path: Path, step_count: int) -> TemporalGraph:
    with path.open(encoding="utf-8") as fp:
        return bin_time_steps(parse_edge_list(fp), step_count)
