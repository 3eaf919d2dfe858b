"""Demonstration retrieval: annotation, contrastive training, ranking, baselines."""

from __future__ import annotations

import logging
import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Collection, Final, Iterable, Iterator, Mapping, Protocol, Sequence

import numpy as np
import numpy.typing as npt
from tqdm import tqdm

from .backbone import SequenceModel
from .exceptions import (
    AugmentationError,
    EmptyCandidatePoolError,
    EmptyInputError,
    InvalidParameterError,
    NoPositivesError,
    TrainingDivergedError,
)
from .numerics import (
    adam_step,
    AdamState,
    backward,
    concat,
    cross_entropy,
    DiffTensor,
    masked_fill,
    matmul,
    mul,
    no_grad,
    power,
    reshape,
    scale,
    sum_,
)
from .sequencer import EgoSample, Node, Special, TimeStep, Token, Vocab
from .util import (
    format_mapping_line,
    parse_mapping_line,
    quote_field,
    round_half_up,
    unquote_field,
)

logger = logging.getLogger(__name__)

RETRIEVER_KINDS: Final = ("trained", "bm25", "jaccard", "groundtruth")


######################################################################
# annotation


def _node_set(items: Iterable[Token | int]) -> frozenset[int]:
    return frozenset(
        t.id if isinstance(t, Node) else t for t in items if isinstance(t, (Node, int))
    )


def output_jaccard(y_i: Iterable[Token | int], y_j: Iterable[Token | int]) -> float:
    """Jaccard similarity of the node sets; 0 when both are empty."""
    a, b = _node_set(y_i), _node_set(y_j)
    union = len(a | b)
    return len(a & b) / union if union else 0.0


def jaccard_matrix(sets: Sequence[Collection[int]]) -> npt.NDArray[np.float64]:
    """All-pairs Jaccard similarity, computed on a 0/1 incidence matrix."""
    universe = sorted(set().union(*sets)) if sets else []
    column = {node: i for i, node in enumerate(universe)}
    incidence = np.zeros((len(sets), len(universe)))
    for row, members in enumerate(sets):
        incidence[row, [column[n] for n in members]] = 1.0
    inter = incidence @ incidence.T
    sizes = incidence.sum(axis=1)
    union = sizes[:, None] + sizes[None, :] - inter
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(union > 0, inter / union, 0.0)


class Annotation(Mapping[int, tuple[int, ...]]):
    """Positive pool pairs ``i -> (j, ...)`` with output similarity >= threshold.

    Only queries with at least one positive are keys.
    """

    def __init__(
        self,
        positives: Mapping[int, Sequence[int]],
        threshold: float,
        pool_size: int,
        similarity: Mapping[tuple[int, int], float] | None = None,
    ) -> None:
        self._positives = {
            q: tuple(sorted(ps)) for q, ps in sorted(positives.items()) if ps
        }
        self.threshold = threshold
        self.pool_size = pool_size
        self.similarity = dict(similarity or {})

    def __getitem__(self, query: int) -> tuple[int, ...]:
        return self._positives[query]

    def __iter__(self) -> Iterator[int]:
        return iter(self._positives)

    def __len__(self) -> int:
        return len(self._positives)

    def __repr__(self) -> str:
        return (
            f"<Annotation threshold={self.threshold} queries={len(self)} "
            f"pairs={self.pair_count}>"
        )

    @property
    def pair_count(self) -> int:
        return sum(map(len, self._positives.values()))

    @property
    def without_positives(self) -> int:
        return self.pool_size - len(self)

    def pairs(self) -> set[tuple[int, int]]:
        return {(q, p) for q, ps in self._positives.items() for p in ps}


def annotate_pool(samples: Sequence[EgoSample], threshold: float = 0.8) -> Annotation:
    sets = [s.output_nodes for s in samples]
    similarity = jaccard_matrix(sets)
    hits = similarity >= threshold
    np.fill_diagonal(hits, False)
    positives: dict[int, list[int]] = {}
    cache: dict[tuple[int, int], float] = {}
    for i, j in zip(*np.nonzero(hits)):
        positives.setdefault(int(i), []).append(int(j))
        cache[int(i), int(j)] = float(similarity[i, j])
    annotation = Annotation(positives, threshold, len(samples), cache)
    if annotation.without_positives:
        logger.info(
            "annotation: %d of %d pool sample(s) have no positive",
            annotation.without_positives,
            len(samples),
        )
    return annotation


def write_annotation(
    path: Path, annotation: Annotation, samples: Sequence[EgoSample]
) -> None:
    lines = [
        format_mapping_line(
            samples[q].query_id,
            (quote_field(samples[p].query_id) for p in annotation[q]),
        )
        for q in annotation
    ]
    path.write_text("".join(line + "\n" for line in lines), encoding="utf-8")


def read_annotation(
    path: Path, samples: Sequence[EgoSample], threshold: float
) -> Annotation:
    index = {s.query_id: i for i, s in enumerate(samples)}
    positives: dict[int, list[int]] = {}
    similarity: dict[tuple[int, int], float] = {}
    for line in path.read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        key, values = parse_mapping_line(line)
        q = index[key]
        for value in values:
            p = index[unquote_field(value)]
            positives.setdefault(q, []).append(p)
            similarity[q, p] = output_jaccard(samples[q].y, samples[p].y)
    return Annotation(positives, threshold, len(samples), similarity)


######################################################################
# configuration


@dataclass(frozen=True)
class RetrieverConfig:
    decay_rate: float = 0.1
    mix: float = 1.0
    temperature: float = 0.1
    batch_size: int = 128
    mask_portion: float = 0.8
    crop_portion: float = 0.6
    epochs: int = 10
    learning_rate: float = 1e-3
    time_unit: float = 1.0
    threshold: float = 0.8
    kind: str = "trained"
    use_decay: bool = True
    use_ccl: bool = True
    cosine: bool = False

    def __post_init__(self) -> None:
        checks = [
            ("decay_rate", self.decay_rate >= 0, "decay_rate >= 0"),
            ("mix", self.mix >= 0, "mix >= 0"),
            ("temperature", self.temperature > 0, "temperature > 0"),
            ("batch_size", self.batch_size >= 2, "batch_size >= 2"),
            ("mask_portion", 0 <= self.mask_portion < 1, "0 <= portion < 1"),
            ("crop_portion", 0 <= self.crop_portion < 1, "0 <= portion < 1"),
            ("epochs", self.epochs >= 0, "epochs >= 0"),
            ("time_unit", self.time_unit > 0, "time_unit > 0"),
            ("kind", self.kind in RETRIEVER_KINDS, f"one of {RETRIEVER_KINDS}"),
        ]
        for name, ok, constraint in checks:
            if not ok:
                raise InvalidParameterError(name, getattr(self, name), constraint)

    @property
    def effective_decay_rate(self) -> float:
        return self.decay_rate if self.use_decay else 0.0

    @property
    def effective_mix(self) -> float:
        return self.mix if self.use_ccl else 0.0


#: Per-dataset decay rate, loss mix and augmentation portions.
PRESETS: Final[Mapping[str, RetrieverConfig]] = {
    name: RetrieverConfig(
        decay_rate=decay, mix=mix, mask_portion=mask, crop_portion=crop
    )
    for name, decay, mix, mask, crop in [
        ("uci", 1e-4, 1.0, 0.8, 0.4),
        ("hepth", 0.1, 0.4, 0.8, 0.6),
        ("mmconv", 10.0, 1.0, 0.8, 0.6),
        ("wikipedia", 1.0, 0.2, 0.6, 0.8),
        ("enron", 10.0, 0.2, 0.6, 0.8),
        ("reddit", 1.0, 0.2, 0.2, 0.8),
    ]
}


######################################################################
# losses


def time_decay(
    t_q: npt.ArrayLike,
    t_p: npt.ArrayLike,
    decay_rate: float,
    time_unit: float = 1.0,
) -> npt.NDArray[np.float64]:
    """``exp(-rate * |t_q - t_p| / time_unit)``, broadcasting."""
    if decay_rate < 0:
        raise InvalidParameterError("decay_rate", decay_rate, "decay_rate >= 0")
    delta = np.abs(
        np.asarray(t_q, dtype=np.float64) - np.asarray(t_p, dtype=np.float64)
    )
    return np.exp(-decay_rate * (delta / time_unit))


def info_nce(
    scores: DiffTensor,
    positives: npt.ArrayLike,
    temperature: float,
    exclude: npt.ArrayLike | None = None,
) -> DiffTensor:
    """Mean over rows of ``-log softmax(scores / temperature)[positive]``.

    Column ``exclude[i]`` of row ``i`` takes no part in the softmax.
    """
    logits = scale(scores, 1.0 / temperature)
    if exclude is not None:
        rows = np.arange(scores.shape[0])
        mask = np.zeros(scores.shape, dtype=bool)
        mask[rows, np.asarray(exclude, dtype=np.intp)] = True
        logits = masked_fill(logits, mask, -np.inf)
    return cross_entropy(logits, positives)


def _check_batch(n: int) -> None:
    if n < 2:
        raise InvalidParameterError("batch size", n, ">= 2 (in-batch negatives)")


def time_aware_nce(
    queries: DiffTensor,
    positives: DiffTensor,
    query_times: npt.ArrayLike,
    positive_times: npt.ArrayLike,
    decay_rate: float,
    temperature: float,
    time_unit: float = 1.0,
) -> DiffTensor:
    """InfoNCE over the 2N batch sequences with decay-reweighted dot products."""
    n = queries.shape[0]
    _check_batch(n)
    keys = concat([queries, positives], axis=0)
    times = np.concatenate(
        [
            np.asarray(query_times, dtype=np.float64),
            np.asarray(positive_times, dtype=np.float64),
        ]
    )
    decay = time_decay(times[:n, None], times[None, :], decay_rate, time_unit)
    scores = mul(matmul(queries, keys.T), decay)
    rows = np.arange(n)
    return info_nce(scores, n + rows, temperature, exclude=rows)


def context_nce(
    first_views: DiffTensor, second_views: DiffTensor, temperature: float
) -> DiffTensor:
    """NT-Xent with anchors ``first_views`` and their positives in ``second_views``."""
    n = first_views.shape[0]
    _check_batch(n)
    keys = concat([first_views, second_views], axis=0)
    rows = np.arange(n)
    return info_nce(matmul(first_views, keys.T), n + rows, temperature, exclude=rows)


def augment(
    x: Sequence[Token],
    kind: str,
    portion: float,
    rng: np.random.Generator,
    *,
    strict: bool = True,
) -> tuple[Token, ...]:
    """Mask or crop the history tokens of ``x``.

    Only node and time tokens after the target are touched. Without ``strict``
    a portion that would remove every such token is clamped to leave one.
    Cropping deletes a contiguous run of interactions; every surviving node
    stays under its own time token.
    """
    if kind not in ("mask", "crop"):
        raise InvalidParameterError("kind", kind, "'mask' or 'crop'")
    if not 0.0 <= portion < 1.0:
        raise InvalidParameterError("portion", portion, "0 <= portion < 1")
    positions = [
        i for i in range(2, len(x)) if isinstance(x[i], (Node, TimeStep))
    ]
    n = len(positions)
    count = round_half_up(portion * n)
    if count >= n and count > 0:
        if strict:
            raise AugmentationError(kind, portion, n)
        count = n - 1
    if count <= 0:
        return tuple(x)

    tokens = list(x)
    if kind == "mask":
        for i in rng.choice(n, size=count, replace=False):
            tokens[positions[int(i)]] = Special.MASK
        return tuple(tokens)

    owner: dict[int, int] = {}
    block = None
    for i in positions:
        if isinstance(tokens[i], TimeStep):
            block = i
        elif block is not None:
            owner[i] = block
    start = int(rng.integers(0, n - count + 1))
    dropped = set(positions[start : start + count])
    # surviving nodes keep the time token of their block
    dropped -= {owner[i] for i in owner if i not in dropped}
    kept = [t for i, t in enumerate(tokens) if i not in dropped]
    # time tokens left without a following node are removed
    return tuple(
        t
        for i, t in enumerate(kept)
        if not (isinstance(t, TimeStep) and not isinstance(kept[i + 1], Node))
    )


def _normalize_rows(a: DiffTensor) -> DiffTensor:
    norms = power(sum_(mul(a, a), axis=1), -0.5)
    return mul(a, reshape(norms, (a.shape[0], 1)))


def represent_batch(
    encoder: SequenceModel,
    sequences: Sequence[Sequence[Token]],
    vocab: Vocab,
    cosine: bool = False,
) -> DiffTensor:
    d = encoder.config.hidden_dim
    rows = [
        reshape(encoder.represent(vocab.encode(seq), vocab.pad_id), (1, d))
        for seq in sequences
    ]
    stacked = concat(rows, axis=0)
    return _normalize_rows(stacked) if cosine else stacked


def tcl_loss(
    encoder: SequenceModel,
    pairs: Sequence[tuple[EgoSample, EgoSample]],
    vocab: Vocab,
    config: RetrieverConfig,
) -> DiffTensor:
    _check_batch(len(pairs))
    queries = represent_batch(encoder, [q.x for q, _ in pairs], vocab, config.cosine)
    positives = represent_batch(encoder, [p.x for _, p in pairs], vocab, config.cosine)
    return time_aware_nce(
        queries,
        positives,
        [q.last_raw_time for q, _ in pairs],
        [p.last_raw_time for _, p in pairs],
        config.effective_decay_rate,
        config.temperature,
        config.time_unit,
    )


def ccl_loss(
    encoder: SequenceModel,
    queries: Sequence[EgoSample],
    vocab: Vocab,
    config: RetrieverConfig,
    rng: np.random.Generator,
) -> DiffTensor:
    _check_batch(len(queries))
    masked = [
        augment(q.x, "mask", config.mask_portion, rng, strict=False) for q in queries
    ]
    cropped = [
        augment(q.x, "crop", config.crop_portion, rng, strict=False) for q in queries
    ]
    return context_nce(
        represent_batch(encoder, masked, vocab, config.cosine),
        represent_batch(encoder, cropped, vocab, config.cosine),
        config.temperature,
    )


def retrieval_loss(
    encoder: SequenceModel,
    pairs: Sequence[tuple[EgoSample, EgoSample]],
    vocab: Vocab,
    config: RetrieverConfig,
    rng: np.random.Generator,
) -> DiffTensor:
    """Time-aware loss plus ``mix`` times the context-aware loss."""
    loss = tcl_loss(encoder, pairs, vocab, config)
    if config.effective_mix > 0:
        context = ccl_loss(encoder, [q for q, _ in pairs], vocab, config, rng)
        loss = loss + scale(context, config.effective_mix)
    return loss


######################################################################
# training


@dataclass
class RetrieverTraining:
    encoder: SequenceModel
    loss_curve: list[float] = field(default_factory=list)


def _batches(order: Sequence[int], size: int) -> list[list[int]]:
    batches = [list(order[i : i + size]) for i in range(0, len(order), size)]
    if len(batches) > 1 and len(batches[-1]) < 2:
        batches[-2].extend(batches.pop())
    return batches


def train_retriever(
    backbone: SequenceModel,
    samples: Sequence[EgoSample],
    annotation: Annotation,
    vocab: Vocab,
    config: RetrieverConfig,
    seed: int,
    *,
    progress: bool = False,
) -> RetrieverTraining:
    """Fine-tune a copy of the backbone as the retrieval encoder.

    Every epoch pairs each annotated query with one of its positives, drawn
    uniformly. The loss curve holds a deterministic evaluation (first positive,
    fixed augmentation seed) at initialization and after each epoch.
    """
    if len(annotation) < 2:
        raise NoPositivesError(len(annotation))
    if annotation.without_positives:
        logger.info(
            "train-retriever: %d pool sample(s) without positive are not queries",
            annotation.without_positives,
        )
    rng = np.random.default_rng(seed)
    encoder = backbone.clone()
    queries = list(annotation)
    params = encoder.parameters(trainable_only=True)
    state = AdamState(learning_rate=config.learning_rate)

    def evaluate() -> float:
        eval_rng = np.random.default_rng(seed)
        losses = []
        with no_grad():
            for batch in _batches(queries, config.batch_size):
                pairs = [(samples[q], samples[annotation[q][0]]) for q in batch]
                loss = retrieval_loss(encoder, pairs, vocab, config, eval_rng)
                losses.append(loss.item())
        return float(np.mean(losses))

    result = RetrieverTraining(encoder, [evaluate()])
    for epoch in tqdm(
        range(config.epochs), desc="train-retriever", disable=not progress, leave=False
    ):
        order = [queries[int(i)] for i in rng.permutation(len(queries))]
        for batch in _batches(order, config.batch_size):
            pairs = [
                (samples[q], samples[int(rng.choice(annotation[q]))]) for q in batch
            ]
            encoder.zero_grad()
            loss = retrieval_loss(encoder, pairs, vocab, config, rng)
            if not math.isfinite(loss.item()):
                raise TrainingDivergedError("train-retriever", state.step_count + 1)
            backward(loss)
            adam_step(params, state)
        result.loss_curve.append(evaluate())
        logger.debug(
            "train-retriever epoch %d: loss %.6f", epoch + 1, result.loss_curve[-1]
        )
    return result


######################################################################
# ranking


@dataclass(frozen=True)
class RankedDemos:
    """Top-k pool indices for one query, best first.

    ``no_signal`` marks a query the retriever cannot score at all.
    """

    query_id: str
    candidates: tuple[int, ...] = ()
    scores: tuple[float, ...] = ()
    k: int = 0
    no_signal: bool = False

    def __len__(self) -> int:
        return len(self.candidates)

    def top(self, k: int) -> tuple[int, ...]:
        return self.candidates[:k]


class Retriever(Protocol):
    def rank(
        self,
        query: EgoSample,
        k: int,
        *,
        time_filter: bool = True,
        exclude: str | None = None,
    ) -> RankedDemos: ...


class _PoolRanker:
    """Shared candidate filtering and top-k selection."""

    def __init__(self, samples: Sequence[EgoSample]) -> None:
        self.samples = tuple(samples)
        self._last_times = np.array([s.last_time for s in self.samples], dtype=np.int64)

    def eligible(
        self, query: EgoSample, time_filter: bool, exclude: str | None
    ) -> npt.NDArray[np.bool_]:
        mask = np.ones(len(self.samples), dtype=bool)
        if time_filter:
            # history-free queries fall back to their prediction step
            reference = query.last_time or query.prediction_step
            mask &= self._last_times < reference
        if exclude is not None:
            mask &= np.array([s.query_id != exclude for s in self.samples], dtype=bool)
        return mask

    def top_k(
        self,
        query: EgoSample,
        scores: npt.NDArray[np.float64],
        k: int,
        time_filter: bool,
        exclude: str | None,
    ) -> RankedDemos:
        if k < 0:
            raise InvalidParameterError("k", k, "k >= 0")
        index = np.nonzero(self.eligible(query, time_filter, exclude))[0]
        if index.size == 0:
            raise EmptyCandidatePoolError(query.query_id)
        order = np.lexsort((index, -scores[index]))
        top = index[order[:k]]
        return RankedDemos(
            query.query_id,
            tuple(int(i) for i in top),
            tuple(float(scores[i]) for i in top),
            k,
        )


class RetrievalIndex(_PoolRanker):
    """Pool representations from a trained encoder, scored by dot product."""

    def __init__(
        self,
        encoder: SequenceModel,
        samples: Sequence[EgoSample],
        vocab: Vocab,
        cosine: bool = False,
    ) -> None:
        super().__init__(samples)
        if not self.samples:
            raise EmptyInputError("retrieval pool")
        self.encoder = encoder
        self.vocab = vocab
        self.cosine = cosine
        with no_grad():
            self.representations = represent_batch(
                encoder, [s.x for s in self.samples], vocab, cosine
            ).data

    def score(self, query: EgoSample) -> npt.NDArray[np.float64]:
        with no_grad():
            q = represent_batch(self.encoder, [query.x], self.vocab, self.cosine).data
        return (self.representations @ q[0]).astype(np.float64)

    def rank(
        self,
        query: EgoSample,
        k: int,
        *,
        time_filter: bool = True,
        exclude: str | None = None,
    ) -> RankedDemos:
        return self.top_k(query, self.score(query), k, time_filter, exclude)


class BM25Index(_PoolRanker):
    """Okapi BM25 over the history node tokens of the pool samples."""

    def __init__(
        self, samples: Sequence[EgoSample], k1: float = 1.2, b: float = 0.75
    ) -> None:
        super().__init__(samples)
        self.k1, self.b = k1, b
        self.doc_freqs = [Counter(s.history_nodes) for s in self.samples]
        self.doc_lens = np.array(
            [sum(f.values()) for f in self.doc_freqs], dtype=np.float64
        )
        self.avgdl = float(self.doc_lens.mean()) if len(self.doc_lens) else 0.0
        self.df: Counter[int] = Counter()
        for freq in self.doc_freqs:
            self.df.update(freq.keys())

    def idf(self, term: int) -> float:
        n, df = len(self.doc_freqs), self.df.get(term, 0)
        return math.log((n - df + 0.5) / (df + 0.5) + 1.0)

    def scores(self, terms: Collection[int]) -> npt.NDArray[np.float64]:
        scores = np.zeros(len(self.doc_freqs))
        avgdl = self.avgdl or 1.0
        for i, freq in enumerate(self.doc_freqs):
            norm = self.k1 * (1 - self.b + self.b * self.doc_lens[i] / avgdl)
            for term in terms:
                tf = freq.get(term, 0)
                if tf:
                    scores[i] += self.idf(term) * tf * (self.k1 + 1) / (tf + norm)
        return scores

    def rank(
        self,
        query: EgoSample,
        k: int,
        *,
        time_filter: bool = True,
        exclude: str | None = None,
    ) -> RankedDemos:
        terms = set(query.history_nodes)
        if not terms:
            return RankedDemos(query.query_id, k=k, no_signal=True)
        return self.top_k(query, self.scores(terms), k, time_filter, exclude)


class JaccardIndex(_PoolRanker):
    """Jaccard similarity of history node sets."""

    def __init__(self, samples: Sequence[EgoSample]) -> None:
        super().__init__(samples)
        self.node_sets = [frozenset(s.history_nodes) for s in self.samples]

    def rank(
        self,
        query: EgoSample,
        k: int,
        *,
        time_filter: bool = True,
        exclude: str | None = None,
    ) -> RankedDemos:
        nodes = frozenset(query.history_nodes)
        if not nodes:
            return RankedDemos(query.query_id, k=k, no_signal=True)
        scores = np.array([output_jaccard(nodes, s) for s in self.node_sets])
        return self.top_k(query, scores, k, time_filter, exclude)


class GroundTruthRetriever(_PoolRanker):
    """Oracle ranking by the similarity of the true outputs."""

    def rank(
        self,
        query: EgoSample,
        k: int,
        *,
        time_filter: bool = True,
        exclude: str | None = None,
    ) -> RankedDemos:
        target = query.output_nodes
        scores = np.array(
            [output_jaccard(target, s.output_nodes) for s in self.samples]
        )
        return self.top_k(query, scores, k, time_filter, exclude)


######################################################################
# evaluation and persistence


def relevant_candidates(
    query: EgoSample, samples: Sequence[EgoSample], threshold: float = 0.8
) -> frozenset[int]:
    target = query.output_nodes
    return frozenset(
        i
        for i, s in enumerate(samples)
        if output_jaccard(target, s.output_nodes) >= threshold
    )


def hr_at_k(ranked: RankedDemos, relevant: Collection[int], k: int) -> int:
    """1 when one of the top ``k`` candidates is relevant."""
    if not relevant:
        raise EmptyInputError("relevant set")
    return int(any(c in relevant for c in ranked.top(k)))


@dataclass(frozen=True)
class HitRate:
    k: int
    hits: int
    scored: int
    skipped: int = 0
    no_signal: int = 0

    @property
    def rate(self) -> float:
        return self.hits / self.scored if self.scored else 0.0


def hit_rate(
    rankings: Iterable[RankedDemos],
    relevant: Mapping[str, Collection[int]],
    k: int,
) -> HitRate:
    """Aggregate ``hr_at_k``; no-signal rankings count as misses."""
    hits = scored = skipped = no_signal = 0
    for ranked in rankings:
        targets = relevant.get(ranked.query_id, ())
        if not targets:
            skipped += 1
            continue
        scored += 1
        if ranked.no_signal:
            no_signal += 1
            continue
        hits += hr_at_k(ranked, targets, k)
    if skipped:
        logger.info("hit rate: %d query(ies) without relevant candidate", skipped)
    return HitRate(k, hits, scored, skipped, no_signal)


_NO_SIGNAL: Final = "-"


def format_ranking(ranked: RankedDemos, samples: Sequence[EgoSample]) -> str:
    if ranked.no_signal:
        return format_mapping_line(ranked.query_id, [_NO_SIGNAL])
    return format_mapping_line(
        ranked.query_id,
        (
            f"{quote_field(samples[c].query_id)} {score!r}"
            for c, score in zip(ranked.candidates, ranked.scores)
        ),
    )


def parse_ranking(line: str, samples: Sequence[EgoSample], k: int) -> RankedDemos:
    query_id, values = parse_mapping_line(line)
    if values == [_NO_SIGNAL]:
        return RankedDemos(query_id, k=k, no_signal=True)
    index = {s.query_id: i for i, s in enumerate(samples)}
    candidates, scores = [], []
    for value in values:
        cand, score = value.rsplit(" ", 1)
        candidates.append(index[unquote_field(cand)])
        scores.append(float(score))
    return RankedDemos(query_id, tuple(candidates), tuple(scores), k)


def write_rankings(
    path: Path, rankings: Iterable[RankedDemos], samples: Sequence[EgoSample]
) -> None:
    path.write_text(
        "".join(format_ranking(r, samples) + "\n" for r in rankings), encoding="utf-8"
    )


def read_rankings(
    path: Path, samples: Sequence[EgoSample], k: int
) -> dict[str, RankedDemos]:
    rankings = {}
    for line in path.read_text(encoding="utf-8").splitlines():
        if line.strip():
            ranked = parse_ranking(line, samples, k)
            rankings[ranked.query_id] = ranked
    return rankings

