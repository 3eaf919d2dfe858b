"""Decoder-only sequence model: pre-training, encoding and greedy generation."""

from __future__ import annotations

import logging
import math
import sys
from dataclasses import dataclass, field
from typing import Final, Iterable, Mapping, Sequence

import numpy as np
import numpy.typing as npt
from tqdm import tqdm

from .exceptions import (
    EmptyInputError,
    InvalidParameterError,
    SequenceTooLongError,
    TrainingDivergedError,
)
from .numerics import (
    adam_step,
    AdamState,
    Array,
    backward,
    concat,
    cross_entropy,
    DiffTensor,
    dropout,
    embedding,
    gelu,
    layer_norm,
    masked_fill,
    masked_mean,
    matmul,
    Module,
    no_grad,
    scale,
    softmax,
)
from .sequencer import EgoSample, Node, Special, TimeStep, Token, Vocab
from .util import chunked

if sys.version_info >= (3, 11):
    from typing import Self
else:
    from typing_extensions import Self

logger = logging.getLogger(__name__)

IGNORE_INDEX: Final = -100
LAYER_NORM_EPS: Final = 1e-5
INIT_SCALE: Final = 0.02

#: The parameters left trainable when the generator is fine-tuned.
OUTPUT_PARAMETERS: Final = ("output.weight", "output.bias")


@dataclass(frozen=True)
class BackboneConfig:
    layers: int = 2
    heads: int = 2
    hidden_dim: int = 64
    max_len: int = 128
    dropout: float = 0.0
    prefix_slots: int = 15

    def __post_init__(self) -> None:
        if self.layers < 1 or self.heads < 1:
            raise InvalidParameterError(
                "layers/heads", (self.layers, self.heads), ">= 1"
            )
        if self.hidden_dim % self.heads:
            raise InvalidParameterError(
                "hidden_dim", self.hidden_dim, f"divisible by heads={self.heads}"
            )
        if self.max_len < 8:
            raise InvalidParameterError("max_len", self.max_len, ">= 8")
        if not 0.0 <= self.dropout < 1.0:
            raise InvalidParameterError("dropout", self.dropout, "0 <= dropout < 1")
        if self.prefix_slots < 1:
            raise InvalidParameterError("prefix_slots", self.prefix_slots, ">= 1")

    @property
    def head_dim(self) -> int:
        return self.hidden_dim // self.heads


#: (layers, heads, hidden_dim) used for the public datasets; ``desk`` is the default.
PRESETS: Final[Mapping[str, BackboneConfig]] = {
    "desk": BackboneConfig(),
    "uci": BackboneConfig(layers=6, heads=8, hidden_dim=768),
    "hepth": BackboneConfig(layers=12, heads=2, hidden_dim=256),
    "mmconv": BackboneConfig(layers=2, heads=2, hidden_dim=256),
    "wikipedia": BackboneConfig(layers=2, heads=6, hidden_dim=768),
    "enron": BackboneConfig(layers=2, heads=6, hidden_dim=768),
    "reddit": BackboneConfig(layers=2, heads=8, hidden_dim=512),
}


@dataclass(frozen=True)
class LMTrainingConfig:
    epochs: int = 50
    learning_rate: float = 1e-3
    batch_size: int = 8

    def __post_init__(self) -> None:
        if self.epochs < 0 or self.batch_size < 1 or self.learning_rate <= 0:
            raise InvalidParameterError(
                "pretrain",
                (self.epochs, self.learning_rate, self.batch_size),
                "epochs >= 0, learning_rate > 0, batch_size >= 1",
            )


class SequenceModel(Module):
    """Pre-LN causal transformer over vocabulary ids.

    An optional soft prefix of up to ``prefix_slots`` embedding rows can be
    placed in front of the tokens; token positions then shift by the prefix
    length.
    """

    def __init__(
        self,
        config: BackboneConfig,
        vocab_size: int,
        rng: np.random.Generator | None = None,
    ) -> None:
        super().__init__()
        self.config = config
        self.vocab_size = vocab_size
        rng = rng if rng is not None else np.random.default_rng(0)
        d = config.hidden_dim

        def normal(*shape: int) -> Array:
            return rng.normal(0.0, INIT_SCALE, size=shape)

        self.register("token_embedding", normal(vocab_size, d))
        self.register(
            "position_embedding", normal(config.max_len + config.prefix_slots, d)
        )
        for layer in range(config.layers):
            p = f"blocks.{layer}."
            self.register(p + "ln1.gain", np.ones(d))
            self.register(p + "ln1.bias", np.zeros(d))
            for proj in ("query", "key", "value", "output"):
                self.register(p + f"attn.{proj}.weight", normal(d, d))
                self.register(p + f"attn.{proj}.bias", np.zeros(d))
            self.register(p + "ln2.gain", np.ones(d))
            self.register(p + "ln2.bias", np.zeros(d))
            self.register(p + "mlp.up.weight", normal(d, 4 * d))
            self.register(p + "mlp.up.bias", np.zeros(4 * d))
            self.register(p + "mlp.down.weight", normal(4 * d, d))
            self.register(p + "mlp.down.bias", np.zeros(d))
        self.register("final_norm.gain", np.ones(d))
        self.register("final_norm.bias", np.zeros(d))
        self.register("output.weight", normal(d, vocab_size))
        self.register("output.bias", np.zeros(vocab_size))

    @classmethod
    def from_state(
        cls, config: BackboneConfig, state: Mapping[str, Array]
    ) -> Self:
        model = cls(config, int(state["token_embedding"].shape[0]))
        model.load_state_dict(state)
        return model

    def clone(self) -> Self:
        """An independent, fully trainable copy."""
        return self.from_state(self.config, self.state_dict())

    def _linear(self, prefix: str, a: DiffTensor) -> DiffTensor:
        return matmul(a, self[prefix + ".weight"]) + self[prefix + ".bias"]

    def _attention(self, layer: int, a: DiffTensor) -> DiffTensor:
        p = f"blocks.{layer}.attn."
        q = self._linear(p + "query", a)
        k = self._linear(p + "key", a)
        v = self._linear(p + "value", a)
        n = a.shape[0]
        future = np.triu(np.ones((n, n), dtype=bool), k=1)
        hd = self.config.head_dim
        heads = []
        for h in range(self.config.heads):
            cols = (slice(None), slice(h * hd, (h + 1) * hd))
            scores = scale(matmul(q[cols], k[cols].T), 1.0 / math.sqrt(hd))
            weights = softmax(masked_fill(scores, future, -np.inf), axis=-1)
            heads.append(matmul(weights, v[cols]))
        return self._linear(p + "output", concat(heads, axis=1))

    def _block(
        self, layer: int, h: DiffTensor, rng: np.random.Generator | None
    ) -> DiffTensor:
        p = f"blocks.{layer}."
        rate = self.config.dropout
        a = layer_norm(h, self[p + "ln1.gain"], self[p + "ln1.bias"], LAYER_NORM_EPS)
        h = h + dropout(self._attention(layer, a), rate, rng)
        a = layer_norm(h, self[p + "ln2.gain"], self[p + "ln2.bias"], LAYER_NORM_EPS)
        up = gelu(self._linear(p + "mlp.up", a))
        return h + dropout(self._linear(p + "mlp.down", up), rate, rng)

    def hidden_states(
        self,
        ids: npt.ArrayLike,
        prefix: DiffTensor | None = None,
        *,
        prefix_positional: bool = True,
        rng: np.random.Generator | None = None,
    ) -> DiffTensor:
        """Final-normalized hidden states of the token positions, prefix dropped."""
        index = np.asarray(ids, dtype=np.intp).reshape(-1)
        n = index.shape[0]
        m = 0 if prefix is None else prefix.shape[0]
        if n == 0:
            raise EmptyInputError("token sequence")
        if n > self.config.max_len:
            raise SequenceTooLongError(n, self.config.max_len)
        if m > self.config.prefix_slots:
            raise SequenceTooLongError(
                n + m, self.config.max_len + self.config.prefix_slots
            )
        positions = self["position_embedding"]
        h = embedding(self["token_embedding"], index) + positions[m : m + n]
        if prefix is not None:
            if prefix_positional:
                prefix = prefix + positions[0:m]
            h = concat([prefix, h], axis=0)
        h = dropout(h, self.config.dropout, rng)
        for layer in range(self.config.layers):
            h = self._block(layer, h, rng)
        h = layer_norm(
            h, self["final_norm.gain"], self["final_norm.bias"], LAYER_NORM_EPS
        )
        return h[m:] if m else h

    def encode(self, ids: npt.ArrayLike) -> DiffTensor:
        return self.hidden_states(ids)

    def logits(
        self,
        ids: npt.ArrayLike,
        prefix: DiffTensor | None = None,
        *,
        prefix_positional: bool = True,
        rng: np.random.Generator | None = None,
    ) -> DiffTensor:
        h = self.hidden_states(
            ids, prefix, prefix_positional=prefix_positional, rng=rng
        )
        return self._linear("output", h)

    def represent(self, ids: npt.ArrayLike, pad_id: int = 0) -> DiffTensor:
        """Mean of the hidden states over non-pad positions."""
        index = np.asarray(ids, dtype=np.intp).reshape(-1)
        keep = index != pad_id
        if not keep.any():
            raise EmptyInputError("non-pad tokens")
        return masked_mean(self.encode(index), keep, axis=0)


def prediction_targets(x_len: int, seq: npt.ArrayLike) -> npt.NDArray[np.intp]:
    """Shifted targets with every position before the first output node ignored.

    The ``[pred]`` and time tokens opening ``y`` are forced at generation time
    and are not supervised.
    """
    targets = np.array(np.asarray(seq, dtype=np.intp)[1:], dtype=np.intp)
    targets[: x_len + 1] = IGNORE_INDEX
    return targets


def prediction_loss(
    model: SequenceModel,
    x_ids: npt.ArrayLike,
    y_ids: npt.ArrayLike,
    prefix: DiffTensor | None = None,
    *,
    prefix_positional: bool = True,
    rng: np.random.Generator | None = None,
) -> DiffTensor:
    x = np.asarray(x_ids, dtype=np.intp)
    seq = np.concatenate([x, np.asarray(y_ids, dtype=np.intp)])
    logits = model.logits(
        seq[:-1], prefix, prefix_positional=prefix_positional, rng=rng
    )
    return cross_entropy(logits, prediction_targets(len(x), seq), IGNORE_INDEX)


@dataclass
class TrainingResult:
    model: SequenceModel
    #: evaluation loss at initialization, then after every epoch
    loss_curve: list[float] = field(default_factory=list)

    @property
    def final_loss(self) -> float:
        return self.loss_curve[-1]


def encode_samples(
    samples: Iterable[EgoSample], vocab: Vocab
) -> list[tuple[npt.NDArray[np.intp], npt.NDArray[np.intp]]]:
    return [(vocab.encode(s.x), vocab.encode(s.y)) for s in samples]


def mean_prediction_loss(
    model: SequenceModel,
    encoded: Sequence[tuple[npt.NDArray[np.intp], npt.NDArray[np.intp]]],
) -> float:
    with no_grad():
        losses = [prediction_loss(model, x, y).item() for x, y in encoded]
    return float(np.mean(losses))


def train_lm(
    samples: Sequence[EgoSample],
    vocab: Vocab,
    config: BackboneConfig,
    training: LMTrainingConfig,
    seed: int,
    *,
    progress: bool = False,
) -> TrainingResult:
    """Next-token training on ``x‖y``, scored on the output span."""
    if not samples:
        raise EmptyInputError("training pool")
    rng = np.random.default_rng(seed)
    model = SequenceModel(config, len(vocab), rng)
    encoded = encode_samples(samples, vocab)
    too_long = max(len(x) + len(y) - 1 for x, y in encoded)
    if too_long > config.max_len:
        raise SequenceTooLongError(too_long, config.max_len)

    state = AdamState(learning_rate=training.learning_rate)
    result = TrainingResult(model, [mean_prediction_loss(model, encoded)])
    params = model.parameters(trainable_only=True)
    for epoch in tqdm(
        range(training.epochs), desc="pretrain", disable=not progress, leave=False
    ):
        order = rng.permutation(len(encoded)).tolist()
        for batch in chunked(order, training.batch_size):
            model.zero_grad()
            total: DiffTensor | None = None
            for i in batch:
                x, y = encoded[i]
                loss = prediction_loss(model, x, y, rng=rng)
                total = loss if total is None else total + loss
            assert total is not None
            mean_loss = scale(total, 1.0 / len(batch))
            if not math.isfinite(mean_loss.item()):
                raise TrainingDivergedError("pretrain", state.step_count + 1)
            backward(mean_loss)
            adam_step(params, state)
        result.loss_curve.append(mean_prediction_loss(model, encoded))
        logger.debug("pretrain epoch %d: loss %.6f", epoch + 1, result.loss_curve[-1])
    return result


def generate(
    model: SequenceModel,
    vocab: Vocab,
    x_ids: npt.ArrayLike,
    prediction_step: int,
    max_new: int,
    prefix: DiffTensor | None = None,
    *,
    prefix_positional: bool = True,
) -> tuple[Token, ...]:
    """Greedy decoding of ``y`` after the history ``x``.

    ``[pred]`` and the prediction step's time token are forced; afterwards only
    node tokens and ``[eopred]`` may be emitted.  ``max_new`` bounds the emitted
    tokens alone, so the result holds at most ``max_new + 2`` tokens.
    """
    seq = [int(i) for i in np.asarray(x_ids, dtype=np.intp).reshape(-1)]
    seq += [vocab.index(Special.PRED), vocab.index(TimeStep(prediction_step))]
    start = len(seq) - 2
    stop = vocab.index(Special.EOPRED)
    allowed = np.full(len(vocab), False)
    allowed[vocab.node_ids()] = True
    allowed[stop] = True
    with no_grad():
        for _ in range(max_new):
            if len(seq) >= model.config.max_len:
                break
            logits = model.logits(
                seq, prefix, prefix_positional=prefix_positional
            ).data[-1]
            choice = int(np.argmax(np.where(allowed, logits, -np.inf)))
            seq.append(choice)
            if choice == stop:
                break
    return vocab.decode(seq[start:])


def ranked_nodes(tokens: Iterable[Token]) -> tuple[int, ...]:
    """Distinct node ids in order of first occurrence."""
    return tuple(dict.fromkeys(t.id for t in tokens if isinstance(t, Node)))
