from __future__ import annotations

import math

import numpy as np
import pytest

from dygrag.backbone import generate, OUTPUT_PARAMETERS, ranked_nodes, SequenceModel
from dygrag.exceptions import (
    EmptyDemonstrationsError,
    InvalidParameterError,
    SequenceTooLongError,
    ShapeMismatchError,
)
from dygrag.fusion import (
    augment_query,
    build_summary_graph,
    finetune_generator,
    FusionConfig,
    FusionGenerator,
    FusionHead,
    gcn_readout,
    predict_with_rag,
    SummaryGraph,
)
from dygrag.graphdata import TemporalGraph
from dygrag.numerics import grad_check, parameter, sum_, tensor
from dygrag.retriever import annotate_pool, JaccardIndex
from dygrag.sequencer import ego_sequence, RetrievalPool, Vocab


def _generator(
    model: SequenceModel, vocab: Vocab, strategy: str = "graph", **kwargs: object
) -> FusionGenerator:
    config = FusionConfig(strategy=strategy, **kwargs)  # type: ignore[arg-type]
    head = FusionHead(config, model.config.hidden_dim, np.random.default_rng(0))
    return FusionGenerator(model, head, vocab)


class TestSummaryGraph:
    def test_chain(self) -> None:
        graph = build_summary_graph([[10, 11, 12, 13, 14]])
        assert graph.node_count == 5
        assert len(graph.edges) == 4

    def test_identical_demos(self) -> None:
        demo = [10, 11, 12, 13, 14]
        assert build_summary_graph([demo, demo]) == build_summary_graph([demo])

    def test_shared_token_merges(self) -> None:
        graph = build_summary_graph([[1, 2, 3], [1, 4, 5]])
        assert graph.node_count == 3 + 3 - 1
        assert graph.edges == {(0, 1), (1, 2), (0, 3), (3, 4)}

    def test_repeated_token_has_no_self_edge(self) -> None:
        graph = build_summary_graph([[7, 7, 8]])
        assert graph.tokens == (7, 8)
        assert graph.edges == {(0, 1)}

    @pytest.mark.parametrize("demos", [[], [[]], [[], []]])
    def test_empty(self, demos: list[list[int]]) -> None:
        with pytest.raises(EmptyDemonstrationsError):
            build_summary_graph(demos)

    def test_normalized_adjacency(self) -> None:
        single = SummaryGraph((4,), frozenset())
        np.testing.assert_array_equal(single.normalized_adjacency(), [[1.0]])
        pair = SummaryGraph((4, 5), frozenset({(0, 1)}))
        np.testing.assert_allclose(pair.normalized_adjacency(), np.full((2, 2), 0.5))

    def test_canonical_orders_by_token(self) -> None:
        graph = SummaryGraph((9, 3, 5), frozenset({(0, 1), (1, 2)}))
        canonical = graph.canonical()
        assert canonical.tokens == (3, 5, 9)
        assert canonical.edges == {(0, 2), (0, 1)}


class TestGcnReadout:
    def test_single_node(self) -> None:
        table = tensor([[0.0, 0.0], [1.0, -2.0]])
        weight = tensor(np.eye(2))
        out = gcn_readout(SummaryGraph((1,), frozenset()), table, weight)
        np.testing.assert_allclose(out.data, [1.0, 0.0])

    def test_path_by_hand(self) -> None:
        features = np.array([[1.0, 2.0], [0.5, -1.0], [3.0, 0.0]])
        weight = np.array([[1.0, -0.5], [0.25, 2.0]])
        graph = build_summary_graph([[0, 1, 2]])
        s = 1 / math.sqrt(6)
        a_hat = np.array([[0.5, s, 0.0], [s, 1 / 3, s], [0.0, s, 0.5]])
        expected = np.maximum(a_hat @ features @ weight, 0.0).mean(axis=0)
        out = gcn_readout(graph, tensor(features), tensor(weight))
        np.testing.assert_allclose(out.data, expected, atol=1e-9)

    def test_node_order_does_not_matter(self) -> None:
        rng = np.random.default_rng(5)
        table, weight = tensor(rng.normal(size=(4, 3))), tensor(rng.normal(size=(3, 3)))
        graph = SummaryGraph((3, 1, 2), frozenset({(0, 1), (1, 2)}))
        np.testing.assert_allclose(
            gcn_readout(graph, table, weight).data,
            gcn_readout(graph.canonical(), table, weight).data,
        )

    def test_gradients(self) -> None:
        rng = np.random.default_rng(0)
        table = parameter(rng.uniform(0.5, 1.5, (4, 3)), "table")
        weight = parameter(rng.uniform(0.5, 1.5, (3, 3)), "weight")
        graph = build_summary_graph([[0, 1, 2], [2, 3]])
        worst = grad_check(
            lambda p: sum_(gcn_readout(graph, p[0], p[1])), [table, weight]
        )
        assert worst <= 1e-3


class TestAugmentQuery:
    def test_vector_becomes_one_row(self, tiny_model: SequenceModel) -> None:
        query = augment_query(tiny_model, tensor(np.ones(8)), [11, 12])
        assert query.prefix is not None
        assert query.prefix.shape == (1, 8)
        assert query.token_ids.tolist() == [11, 12]

    def test_wrong_width(self, tiny_model: SequenceModel) -> None:
        with pytest.raises(ShapeMismatchError):
            augment_query(tiny_model, tensor(np.ones((1, 5))), [11])

    def test_too_many_rows(self, tiny_model: SequenceModel) -> None:
        with pytest.raises(SequenceTooLongError):
            augment_query(tiny_model, tensor(np.ones((16, 8))), [11])

    def test_too_many_tokens(self, tiny_model: SequenceModel) -> None:
        with pytest.raises(SequenceTooLongError):
            augment_query(tiny_model, None, np.full(65, 11))


def test_invalid_strategy() -> None:
    with pytest.raises(InvalidParameterError):
        FusionConfig(strategy="attention")


class TestFusionGenerator:
    def test_only_head_and_output_train(
        self, tiny_model: SequenceModel, synth_vocab: Vocab
    ) -> None:
        generator = _generator(tiny_model, synth_vocab)
        assert sorted(generator.trainable()) == sorted(
            ["head.gcn.weight", *(f"model.{n}" for n in OUTPUT_PARAMETERS)]
        )
        assert tiny_model.parameters(trainable_only=True)

    def test_graph_prefix_is_one_row(
        self, tiny_model: SequenceModel, synth_vocab: Vocab, synth_pool: RetrievalPool
    ) -> None:
        generator = _generator(tiny_model, synth_vocab)
        prefix = generator.prefix(synth_pool.samples[:3])
        assert prefix is not None
        assert prefix.shape == (1, 8)

    def test_mlp_prefix_rows(
        self, tiny_model: SequenceModel, synth_vocab: Vocab, synth_pool: RetrievalPool
    ) -> None:
        generator = _generator(tiny_model, synth_vocab, "mlp", k=3, prefix_vectors=4)
        prefix = generator.prefix(synth_pool.samples[:2])
        assert prefix is not None
        assert prefix.shape == (4, 8)

    def test_no_demos_no_prefix(
        self, tiny_model: SequenceModel, synth_vocab: Vocab
    ) -> None:
        assert _generator(tiny_model, synth_vocab).prefix([]) is None

    def test_concat_truncates_lowest_ranked(
        self, tiny_model: SequenceModel, synth_vocab: Vocab, synth_pool: RetrievalPool
    ) -> None:
        generator = _generator(tiny_model, synth_vocab, "concat")
        query = synth_pool[4]
        demos = synth_pool.samples[:4]
        augmented = generator.inputs(query.x, demos, reserve=5)
        x_ids = synth_vocab.encode(query.x)
        best = synth_vocab.encode(demos[0].x + demos[0].y)
        assert augmented.prefix is None
        assert generator.truncated == 1
        assert len(augmented.token_ids) <= 64 - 5
        assert augmented.token_ids[-len(x_ids) :].tolist() == x_ids.tolist()
        before_query = augmented.token_ids[: -len(x_ids)]
        assert before_query[-len(best) :].tolist() == best.tolist()

    def test_predict_without_demos_uses_backbone(
        self, tiny_model: SequenceModel, synth_vocab: Vocab, synth_pool: RetrievalPool
    ) -> None:
        generator = _generator(tiny_model, synth_vocab)
        generator.model["output.bias"].data[synth_vocab.node_offset] = 50.0
        query = synth_pool[0]
        x_ids = synth_vocab.encode(query.x)
        plain = generate(tiny_model, synth_vocab, x_ids, query.prediction_step, 3)
        assert generator.predict(query, (), 3) == plain

    def test_state_round_trip(
        self, tiny_model: SequenceModel, synth_vocab: Vocab, synth_pool: RetrievalPool
    ) -> None:
        generator = _generator(tiny_model, synth_vocab)
        generator.model["output.bias"].data += 0.5
        state = generator.state_dict()
        again = FusionGenerator.from_state(
            tiny_model, generator.config, synth_vocab, state
        )
        sample, demos = synth_pool[0], synth_pool.samples[1:3]
        assert again.loss(sample, demos).item() == pytest.approx(
            generator.loss(sample, demos).item(), abs=1e-12
        )


class TestFinetune:
    @pytest.mark.parametrize("strategy", ["graph", "concat", "mlp"])
    def test_curve_and_frozen_backbone(
        self,
        strategy: str,
        tiny_model: SequenceModel,
        synth_vocab: Vocab,
        synth_pool: RetrievalPool,
    ) -> None:
        before = tiny_model.state_dict()
        annotation = annotate_pool(synth_pool.samples)
        config = FusionConfig(strategy=strategy, k=2, epochs=1, prefix_vectors=2)
        result = finetune_generator(
            tiny_model, synth_pool.samples, annotation, synth_vocab, config, seed=0
        )
        assert len(result.loss_curve) == 2
        assert all(math.isfinite(v) for v in result.loss_curve)
        for name, value in tiny_model.state_dict().items():
            np.testing.assert_array_equal(value, before[name])
        tuned = result.generator.model.state_dict()
        for name, value in before.items():
            if name not in OUTPUT_PARAMETERS:
                np.testing.assert_array_equal(tuned[name], value)


class TestPredictWithRag:
    def test_uses_retrieved_demos(
        self,
        tiny_model: SequenceModel,
        synth: TemporalGraph,
        synth_vocab: Vocab,
        synth_pool: RetrievalPool,
    ) -> None:
        generator = _generator(tiny_model, synth_vocab)
        query = ego_sequence(synth, "c0m0", synth.step_count)
        result = predict_with_rag(
            generator, JaccardIndex(synth_pool.samples), query, synth_pool.samples, 3, 4
        )
        assert result.query_id == query.query_id
        assert result.demos is not None
        assert 0 < len(result.demos) <= 3
        assert len(result.nodes) <= 4

    def test_zero_k(
        self,
        tiny_model: SequenceModel,
        synth: TemporalGraph,
        synth_vocab: Vocab,
        synth_pool: RetrievalPool,
    ) -> None:
        generator = _generator(tiny_model, synth_vocab)
        query = ego_sequence(synth, "c0m0", synth.step_count)
        result = predict_with_rag(
            generator, JaccardIndex(synth_pool.samples), query, synth_pool.samples, 0, 4
        )
        assert result.demos is None

    def test_no_signal_falls_back(
        self,
        tiny_model: SequenceModel,
        synth: TemporalGraph,
        synth_vocab: Vocab,
        synth_pool: RetrievalPool,
    ) -> None:
        generator = _generator(tiny_model, synth_vocab)
        newcomer = ego_sequence(synth, "c0n0", synth.step_count)
        result = predict_with_rag(
            generator,
            JaccardIndex(synth_pool.samples),
            newcomer,
            synth_pool.samples,
            3,
            4,
        )
        assert result.demos is not None
        assert result.demos.no_signal
        plain = generate(
            tiny_model,
            synth_vocab,
            synth_vocab.encode(newcomer.x),
            newcomer.prediction_step,
            4,
        )
        assert result.nodes == ranked_nodes(plain)
