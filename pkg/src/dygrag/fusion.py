"""Fuse retrieved demonstrations into the generator's input."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Final, Mapping, Sequence

import numpy as np
import numpy.typing as npt
from tqdm import tqdm

from .backbone import (
    generate,
    OUTPUT_PARAMETERS,
    prediction_loss,
    ranked_nodes,
    SequenceModel,
)
from .exceptions import (
    EmptyDemonstrationsError,
    InvalidParameterError,
    SequenceTooLongError,
    ShapeMismatchError,
    TrainingDivergedError,
)
from .numerics import (
    adam_step,
    AdamState,
    Array,
    backward,
    concat,
    DiffTensor,
    embedding,
    matmul,
    mean,
    Module,
    no_grad,
    relu,
    reshape,
    scale,
    tensor,
)
from .retriever import RankedDemos, Retriever
from .sequencer import EgoSample, Token, Vocab
from .util import chunked

logger = logging.getLogger(__name__)

FUSION_STRATEGIES: Final = ("graph", "concat", "mlp")


@dataclass(frozen=True)
class SummaryGraph:
    """Token graph of a set of demonstrations.

    ``tokens`` holds one vocabulary id per node; ``edges`` are undirected pairs
    of node positions with ``i < j``. Self-loops are implied.
    """

    tokens: tuple[int, ...]
    edges: frozenset[tuple[int, int]]

    @property
    def node_count(self) -> int:
        return len(self.tokens)

    def canonical(self) -> SummaryGraph:
        """The same graph with nodes ordered by token id."""
        order = sorted(range(self.node_count), key=lambda i: self.tokens[i])
        position = {old: new for new, old in enumerate(order)}
        edges = frozenset(
            (min(position[i], position[j]), max(position[i], position[j]))
            for i, j in self.edges
        )
        return SummaryGraph(tuple(self.tokens[i] for i in order), edges)

    def normalized_adjacency(self) -> Array:
        """``D^-1/2 (A + I) D^-1/2``."""
        a = np.eye(self.node_count)
        for i, j in self.edges:
            a[i, j] = a[j, i] = 1.0
        inv_sqrt = 1.0 / np.sqrt(a.sum(axis=1))
        return np.asarray(inv_sqrt[:, None] * a * inv_sqrt[None, :], dtype=np.float64)


def build_summary_graph(demos: Sequence[Sequence[int]]) -> SummaryGraph:
    """Merge demonstrations into one graph joining consecutive tokens."""
    if not any(len(d) for d in demos):
        raise EmptyDemonstrationsError()
    tokens = sorted({int(t) for demo in demos for t in demo})
    position = {t: i for i, t in enumerate(tokens)}
    edges = set()
    for demo in demos:
        for a, b in zip(demo, demo[1:]):
            i, j = position[int(a)], position[int(b)]
            if i != j:
                edges.add((min(i, j), max(i, j)))
    return SummaryGraph(tuple(tokens), frozenset(edges))


def gcn_readout(
    graph: SummaryGraph, table: DiffTensor, weight: DiffTensor
) -> DiffTensor:
    """Mean over nodes of ``relu(Â X W)``, X gathered from ``table`` by token id."""
    g = graph.canonical()
    a_hat = tensor(g.normalized_adjacency())
    features = embedding(table, np.asarray(g.tokens, dtype=np.intp))
    return mean(relu(matmul(matmul(a_hat, features), weight)), axis=0)


@dataclass(frozen=True)
class AugmentedQuery:
    prefix: DiffTensor | None
    token_ids: npt.NDArray[np.intp]


def augment_query(
    model: SequenceModel, prefix: DiffTensor | None, x_ids: npt.ArrayLike
) -> AugmentedQuery:
    """Pair the query tokens with soft prefix rows (a single vector is one row)."""
    ids = np.asarray(x_ids, dtype=np.intp).reshape(-1)
    config = model.config
    if prefix is not None:
        if len(prefix.shape) == 1:
            prefix = reshape(prefix, (1, prefix.shape[0]))
        if len(prefix.shape) != 2 or prefix.shape[1] != config.hidden_dim:
            raise ShapeMismatchError(
                "augment_query", prefix.shape, (1, config.hidden_dim)
            )
        if prefix.shape[0] > config.prefix_slots:
            raise SequenceTooLongError(
                len(ids) + prefix.shape[0], config.max_len + config.prefix_slots
            )
    if len(ids) > config.max_len:
        raise SequenceTooLongError(len(ids), config.max_len)
    return AugmentedQuery(prefix, ids)


@dataclass(frozen=True)
class FusionConfig:
    strategy: str = "graph"
    k: int = 7
    epochs: int = 20
    learning_rate: float = 1e-3
    batch_size: int = 8
    include_outputs: bool = True
    prefix_positional: bool = True
    ground_truth_demos: bool = False
    prefix_vectors: int = 15

    def __post_init__(self) -> None:
        if self.strategy not in FUSION_STRATEGIES:
            raise InvalidParameterError(
                "strategy", self.strategy, f"one of {FUSION_STRATEGIES}"
            )
        if self.k < 0:
            raise InvalidParameterError("k", self.k, "k >= 0")
        if self.epochs < 0 or self.batch_size < 1 or self.learning_rate <= 0:
            raise InvalidParameterError(
                "finetune",
                (self.epochs, self.learning_rate, self.batch_size),
                "epochs >= 0, learning_rate > 0, batch_size >= 1",
            )
        if self.prefix_vectors < 1:
            raise InvalidParameterError("prefix_vectors", self.prefix_vectors, ">= 1")


class FusionHead(Module):
    """Trainable fusion weights: a GCN layer or a two-layer MLP."""

    def __init__(
        self,
        config: FusionConfig,
        hidden_dim: int,
        rng: np.random.Generator | None = None,
    ) -> None:
        super().__init__()
        self.config = config
        rng = rng if rng is not None else np.random.default_rng(0)
        d = hidden_dim
        if config.strategy == "graph":
            self.register("gcn.weight", rng.normal(0.0, 1.0 / math.sqrt(d), (d, d)))
        elif config.strategy == "mlp":
            width = max(config.k, 1) * d
            out = config.prefix_vectors * d
            self.register(
                "mlp.hidden.weight", rng.normal(0.0, 1.0 / math.sqrt(width), (width, d))
            )
            self.register("mlp.hidden.bias", np.zeros(d))
            self.register(
                "mlp.out.weight", rng.normal(0.0, 1.0 / math.sqrt(d), (d, out))
            )
            self.register("mlp.out.bias", np.zeros(out))


class FusionGenerator:
    """A frozen copy of the backbone, its output layer and a fusion head.

    ``backbone`` itself is left untouched and serves the no-demonstration path.
    """

    def __init__(
        self,
        backbone: SequenceModel,
        head: FusionHead,
        vocab: Vocab,
    ) -> None:
        self.backbone = backbone
        self.head = head
        self.config = head.config
        self.vocab = vocab
        self.model = backbone.clone()
        self.model.freeze(keep=OUTPUT_PARAMETERS)
        self.truncated = 0
        self._representations: dict[str, DiffTensor] = {}

    def trainable(self) -> dict[str, DiffTensor]:
        params = {f"head.{n}": p for n, p in self.head.parameters().items()}
        params.update(
            (f"model.{n}", p)
            for n, p in self.model.parameters(trainable_only=True).items()
        )
        return params

    def zero_grad(self) -> None:
        self.head.zero_grad()
        self.model.zero_grad()

    def state_dict(self) -> dict[str, Array]:
        state = {f"head.{n}": a for n, a in self.head.state_dict().items()}
        model_state = self.model.state_dict()
        state.update((f"model.{n}", model_state[n]) for n in OUTPUT_PARAMETERS)
        return state

    @classmethod
    def from_state(
        cls,
        backbone: SequenceModel,
        config: FusionConfig,
        vocab: Vocab,
        state: Mapping[str, Array],
    ) -> FusionGenerator:
        head = FusionHead(config, backbone.config.hidden_dim)
        head.load_state_dict(
            {n[len("head.") :]: a for n, a in state.items() if n.startswith("head.")}
        )
        generator = cls(backbone, head, vocab)
        generator.model.load_state_dict(
            {n[len("model.") :]: a for n, a in state.items() if n.startswith("model.")},
            strict=False,
        )
        return generator

    def _demo_tokens(self, demo: EgoSample) -> tuple[Token, ...]:
        return demo.x + demo.y if self.config.include_outputs else demo.x

    def _represent(self, demo: EgoSample) -> DiffTensor:
        cached = self._representations.get(demo.query_id)
        if cached is None:
            with no_grad():
                ids = self.vocab.encode(self._demo_tokens(demo))
                cached = self.model.represent(ids, self.vocab.pad_id)
            self._representations[demo.query_id] = cached
        return cached

    def prefix(self, demos: Sequence[EgoSample]) -> DiffTensor | None:
        if not demos or self.config.strategy == "concat":
            return None
        d = self.model.config.hidden_dim
        if self.config.strategy == "graph":
            graph = build_summary_graph(
                [self.vocab.encode(self._demo_tokens(demo)) for demo in demos]
            )
            e_fus = gcn_readout(
                graph, self.model["token_embedding"], self.head["gcn.weight"]
            )
            return reshape(e_fus, (1, d))

        slots = max(self.config.k, 1)
        rows = [reshape(self._represent(demo), (1, d)) for demo in demos[:slots]]
        rows += [tensor(np.zeros((1, d)))] * (slots - len(rows))
        flat = concat(rows, axis=1)
        hidden = relu(
            matmul(flat, self.head["mlp.hidden.weight"]) + self.head["mlp.hidden.bias"]
        )
        out = matmul(hidden, self.head["mlp.out.weight"]) + self.head["mlp.out.bias"]
        return reshape(out, (self.config.prefix_vectors, d))

    def inputs(
        self, x: Sequence[Token], demos: Sequence[EgoSample], reserve: int
    ) -> AugmentedQuery:
        """The augmented query; ``reserve`` positions are kept free for the output."""
        x_ids = self.vocab.encode(x)
        if self.config.strategy != "concat" or not demos:
            return augment_query(self.model, self.prefix(demos), x_ids)
        budget = self.model.config.max_len - len(x_ids) - reserve
        # best demonstration sits next to the query; the lowest ranked go first
        blocks = [self.vocab.encode(self._demo_tokens(d)) for d in demos]
        while blocks and sum(map(len, blocks)) > budget:
            blocks.pop()
        if len(blocks) < len(demos):
            self.truncated += 1
        ids = np.concatenate([*reversed(blocks), x_ids]).astype(np.intp)
        return augment_query(self.model, None, ids)

    def loss(self, sample: EgoSample, demos: Sequence[EgoSample]) -> DiffTensor:
        y_ids = self.vocab.encode(sample.y)
        query = self.inputs(sample.x, demos, reserve=len(y_ids))
        return prediction_loss(
            self.model,
            query.token_ids,
            y_ids,
            query.prefix,
            prefix_positional=self.config.prefix_positional,
        )

    def predict(
        self, query: EgoSample, demos: Sequence[EgoSample], max_new: int
    ) -> tuple[Token, ...]:
        """Greedy output tokens; without demonstrations the plain backbone answers."""
        if not demos:
            return generate(
                self.backbone,
                self.vocab,
                self.vocab.encode(query.x),
                query.prediction_step,
                max_new,
            )
        with no_grad():
            augmented = self.inputs(query.x, demos, reserve=max_new + 2)
        return generate(
            self.model,
            self.vocab,
            augmented.token_ids,
            query.prediction_step,
            max_new,
            augmented.prefix,
            prefix_positional=self.config.prefix_positional,
        )


@dataclass
class FinetuneResult:
    generator: FusionGenerator
    loss_curve: list[float] = field(default_factory=list)


def finetune_generator(
    backbone: SequenceModel,
    samples: Sequence[EgoSample],
    demonstrations: Mapping[int, Sequence[int]],
    vocab: Vocab,
    config: FusionConfig,
    seed: int,
    *,
    progress: bool = False,
) -> FinetuneResult:
    """Train the fusion head and output layer with the rest of the backbone frozen.

    ``demonstrations`` maps a pool index to the ranked pool indices of its
    demonstrations; at most ``config.k`` of them are used.
    """
    rng = np.random.default_rng(seed)
    head = FusionHead(config, backbone.config.hidden_dim, rng)
    generator = FusionGenerator(backbone, head, vocab)
    params = generator.trainable()
    state = AdamState(learning_rate=config.learning_rate)

    def demos_of(i: int) -> list[EgoSample]:
        return [samples[j] for j in demonstrations.get(i, ())[: config.k]]

    def evaluate() -> float:
        with no_grad():
            losses = [
                generator.loss(s, demos_of(i)).item() for i, s in enumerate(samples)
            ]
        return float(np.mean(losses))

    result = FinetuneResult(generator, [evaluate()])
    for epoch in tqdm(
        range(config.epochs), desc="finetune", disable=not progress, leave=False
    ):
        order = rng.permutation(len(samples)).tolist()
        for batch in chunked(order, config.batch_size):
            generator.zero_grad()
            losses = [generator.loss(samples[i], demos_of(i)) for i in batch]
            total = losses[0]
            for loss in losses[1:]:
                total = total + loss
            mean_loss = scale(total, 1.0 / len(batch))
            if not math.isfinite(mean_loss.item()):
                raise TrainingDivergedError("finetune", state.step_count + 1)
            backward(mean_loss)
            # batches without demonstrations leave the head without gradients
            adam_step(
                {n: p for n, p in params.items() if p.grad is not None}, state
            )
        result.loss_curve.append(evaluate())
        logger.debug("finetune epoch %d: loss %.6f", epoch + 1, result.loss_curve[-1])
    if generator.truncated:
        logger.warning(
            "finetune: dropped demonstrations to fit max_len %d time(s)",
            generator.truncated,
        )
    return result


@dataclass(frozen=True)
class RagPrediction:
    query_id: str
    nodes: tuple[int, ...]
    demos: RankedDemos | None = None


def predict_with_rag(
    generator: FusionGenerator,
    retriever: Retriever,
    query: EgoSample,
    samples: Sequence[EgoSample],
    k: int,
    max_new: int,
) -> RagPrediction:
    """Retrieve ``k`` time-filtered demonstrations and generate with them.

    ``k == 0`` and no-signal retrievals take the plain backbone path.
    """
    if k == 0:
        tokens = generator.predict(query, (), max_new)
        return RagPrediction(query.query_id, ranked_nodes(tokens))
    ranked = retriever.rank(query, k, time_filter=True)
    demos = [samples[i] for i in ranked.candidates]
    tokens = generator.predict(query, demos, max_new)
    return RagPrediction(query.query_id, ranked_nodes(tokens), ranked)
