"""Stage orchestration, configuration and the experiment matrix.

Every stage writes its artifacts to ``<output_dir>/<stage>/<hash>/``, where
the hash covers the configuration the stage depends on, the hashes of the
stages it reads from and, for seeded stages, the seed.  ``manifest.ini`` is
written last; a directory holding one is complete and is never recomputed.
"""

from __future__ import annotations

import dataclasses
import itertools
import logging
import os
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from contextlib import contextmanager
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Any, Callable, Final, Iterable, Iterator, Mapping, Sequence

from inifile import IniFile

from .backbone import PRESETS as BACKBONE_PRESETS
from .backbone import BackboneConfig, LMTrainingConfig, SequenceModel, train_lm
from .exceptions import (
    ConfigError,
    EmptyCandidatePoolError,
    InvalidParameterError,
    MissingPrerequisiteError,
)
from .fusion import (
    finetune_generator,
    FUSION_STRATEGIES,
    FusionConfig,
    FusionGenerator,
    predict_with_rag,
)
from .graphdata import (
    load_graph,
    read_node_map,
    serialize_edge_list,
    split,
    SplitSpec,
    synth_graph,
    SynthParams,
    write_node_map,
)
from .metrics import combine_reports, EvalReport, evaluate_run, read_dump, write_dump
from .numerics import load_checkpoint, save_checkpoint
from .retriever import PRESETS as RETRIEVER_PRESETS
from .retriever import (
    annotate_pool,
    BM25Index,
    GroundTruthRetriever,
    hit_rate,
    JaccardIndex,
    RankedDemos,
    read_annotation,
    read_rankings,
    relevant_candidates,
    RetrievalIndex,
    Retriever,
    RETRIEVER_KINDS,
    RetrieverConfig,
    train_retriever,
    write_annotation,
    write_rankings,
)
from .sequencer import (
    build_pool,
    build_queries,
    build_vocab,
    EgoSample,
    read_samples,
    RetrievalPool,
    Vocab,
    write_samples,
)
from .util import checksum

logger = logging.getLogger(__name__)

ENV_PREFIX: Final = "DYGRAG_"
MANIFEST: Final = "manifest.ini"
SPLITS: Final = ("val", "test")
HR_CUTOFFS: Final = (1, 3, 5, 7)


######################################################################
# configuration


@dataclass(frozen=True)
class DatasetConfig:
    #: edge list file; empty selects the planted-community generator
    path: str = ""
    #: time steps for a file dataset (the generator bins to ``synth.steps``)
    steps: int = 16
    max_history: int = 96
    max_output: int = 24
    synth_seed: int = 0

    def __post_init__(self) -> None:
        if self.steps < 3 or self.max_history < 4 or self.max_output < 0:
            raise InvalidParameterError(
                "dataset",
                (self.steps, self.max_history, self.max_output),
                "steps >= 3, max_history >= 4, max_output >= 0",
            )


@dataclass(frozen=True)
class EvaluateConfig:
    k: int = 5
    max_new: int = 24
    split: str = "test"

    def __post_init__(self) -> None:
        if self.k < 1:
            raise InvalidParameterError("k", self.k, "k >= 1")
        if self.max_new < 1:
            raise InvalidParameterError("max_new", self.max_new, "max_new >= 1")
        if self.split not in SPLITS:
            raise InvalidParameterError("split", self.split, f"one of {SPLITS}")


@dataclass(frozen=True)
class RunConfig:
    output_dir: str = "runs"
    seeds: tuple[int, ...] = (0,)
    jobs: int = 1
    progress: bool = False

    def __post_init__(self) -> None:
        if not self.seeds:
            raise InvalidParameterError("seeds", self.seeds, "at least one seed")
        if self.jobs < 1:
            raise InvalidParameterError("jobs", self.jobs, "jobs >= 1")


SECTIONS: Final[Mapping[str, type[Any]]] = {
    "dataset": DatasetConfig,
    "synth": SynthParams,
    "backbone": BackboneConfig,
    "pretrain": LMTrainingConfig,
    "retriever": RetrieverConfig,
    "fusion": FusionConfig,
    "evaluate": EvaluateConfig,
    "pipeline": RunConfig,
}

_PRESETS: Final[Mapping[str, Mapping[str, Any]]] = {
    "backbone": BACKBONE_PRESETS,
    "retriever": {"desk": RetrieverConfig(), **RETRIEVER_PRESETS},
}


def _render(value: object) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(map(str, value))
    if isinstance(value, float):
        return repr(value)
    return str(value)


_TRUE: Final = frozenset({"1", "true", "yes", "on"})
_FALSE: Final = frozenset({"0", "false", "no", "off"})


def _coerce(key: str, text: str, type_name: str) -> object:
    text = text.strip()
    try:
        if type_name == "bool":
            if text.lower() in _TRUE | _FALSE:
                return text.lower() in _TRUE
            raise ValueError(text)
        if type_name == "int":
            return int(text)
        if type_name == "float":
            return float(text)
        if type_name.startswith("tuple"):
            return tuple(int(part) for part in text.split(",") if part.strip())
    except ValueError:
        raise ConfigError(key, f"expected {type_name}, got {text!r}") from None
    return text


def _field_types(cls: type[Any]) -> dict[str, str]:
    return {
        f.name: f.type if isinstance(f.type, str) else f.type.__name__
        for f in dataclasses.fields(cls)
    }


def _build_section(section: str, values: Mapping[str, str]) -> Any:
    cls = SECTIONS[section]
    values = dict(values)
    base = cls()
    preset = values.pop("preset", None)
    if preset is not None:
        presets = _PRESETS.get(section, {})
        if preset not in presets:
            raise ConfigError(f"{section}.preset", f"unknown preset {preset!r}")
        base = presets[preset]
    types = _field_types(cls)
    changes = {}
    for name, text in values.items():
        key = f"{section}.{name}"
        if name not in types:
            raise ConfigError(key, "unknown key")
        changes[name] = _coerce(key, text, types[name])
    try:
        return dataclasses.replace(base, **changes)
    except InvalidParameterError as exc:
        raise ConfigError(section, exc.message()) from exc


@dataclass(frozen=True)
class PipelineConfig:
    """All settings of a pipeline run, one frozen section per stage group."""

    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    synth: SynthParams = field(default_factory=SynthParams)
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    pretrain: LMTrainingConfig = field(default_factory=LMTrainingConfig)
    retriever: RetrieverConfig = field(default_factory=RetrieverConfig)
    fusion: FusionConfig = field(default_factory=FusionConfig)
    evaluate: EvaluateConfig = field(default_factory=EvaluateConfig)
    pipeline: RunConfig = field(default_factory=RunConfig)

    def __post_init__(self) -> None:
        limit = self.backbone.max_len
        if self.dataset.max_history + self.dataset.max_output + 3 > limit:
            raise ConfigError(
                "dataset.max_history",
                f"history and output budgets must fit backbone.max_len {limit}",
            )
        if self.dataset.max_history + self.evaluate.max_new + 2 > limit:
            raise ConfigError(
                "evaluate.max_new",
                f"history and generation must fit backbone.max_len {limit}",
            )
        slots = self.backbone.prefix_slots
        if self.fusion.strategy == "mlp" and self.fusion.prefix_vectors > slots:
            raise ConfigError(
                "fusion.prefix_vectors",
                f"mlp prefix vectors must fit backbone.prefix_slots {slots}",
            )

    @property
    def output_path(self) -> Path:
        return Path(self.pipeline.output_dir)

    def items(self) -> Iterator[tuple[str, str]]:
        """Every setting as a ``(section.key, text)`` pair."""
        for section in SECTIONS:
            values = getattr(self, section)
            for f in dataclasses.fields(values):
                yield f"{section}.{f.name}", _render(getattr(values, f.name))

    def with_overrides(self, overrides: Mapping[str, str]) -> PipelineConfig:
        return config_from_mapping({**dict(self.items()), **overrides})


def config_from_mapping(values: Mapping[str, str]) -> PipelineConfig:
    grouped: dict[str, dict[str, str]] = {section: {} for section in SECTIONS}
    for key, value in values.items():
        section, _, name = key.partition(".")
        if section not in grouped or not name:
            raise ConfigError(key, "unknown section")
        grouped[section][name] = value
    return PipelineConfig(
        **{section: _build_section(section, v) for section, v in grouped.items()}
    )


def load_config(
    path: Path | None = None,
    overrides: Iterable[str] = (),
    environ: Mapping[str, str] | None = None,
) -> PipelineConfig:
    """Settings from ``path``, then ``DYGRAG_<SECTION>__<KEY>``, then ``key=value``."""
    values: dict[str, str] = {}
    if path is not None:
        if not path.is_file():
            raise ConfigError(str(path), "no such config file")
        inifile = IniFile(str(path))
        values.update((key, str(value)) for key, value in inifile.items())
    for name, value in (os.environ if environ is None else environ).items():
        section, sep, key = name[len(ENV_PREFIX) :].partition("__")
        if name.startswith(ENV_PREFIX) and sep:
            values[f"{section.lower()}.{key.lower()}"] = value
    for item in overrides:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(item, "expected section.key=value")
        values[key.strip()] = value
    return config_from_mapping(values)


def save_config(config: PipelineConfig, path: Path) -> None:
    inifile = IniFile(str(path))
    for key, value in config.items():
        inifile[key] = value
    inifile.save()


######################################################################
# stage graph

STAGES: Final = (
    "preprocess",
    "pretrain",
    "annotate",
    "train-retriever",
    "retrieve",
    "finetune",
    "evaluate",
)

#: the stages whose artifacts each stage reads
REQUIRES: Final[Mapping[str, tuple[str, ...]]] = {
    "preprocess": (),
    "pretrain": ("preprocess",),
    "annotate": ("preprocess",),
    "train-retriever": ("preprocess", "pretrain", "annotate"),
    "retrieve": ("preprocess", "train-retriever"),
    "finetune": ("preprocess", "pretrain", "retrieve"),
    "evaluate": ("preprocess", "pretrain", "retrieve", "finetune"),
}

_SEEDLESS: Final = frozenset({"preprocess", "annotate"})


def _stage_keys(config: PipelineConfig, stage: str) -> tuple[str, ...]:
    """Config sections (or single dotted keys) a stage's output depends on."""
    if stage == "preprocess":
        return ("dataset",) if config.dataset.path else ("dataset", "synth")
    if stage == "train-retriever" and config.retriever.kind != "trained":
        return ("retriever.kind",)
    return {
        "pretrain": ("backbone", "pretrain"),
        "annotate": ("retriever.threshold",),
        "train-retriever": ("retriever",),
        "retrieve": (
            "retriever.kind",
            "retriever.cosine",
            "retriever.threshold",
            "fusion.k",
        ),
        "finetune": ("fusion",),
        "evaluate": ("evaluate",),
    }[stage]


def stage_settings(config: PipelineConfig, stage: str) -> list[tuple[str, str]]:
    selected = _stage_keys(config, stage)
    return [
        (key, value)
        for key, value in config.items()
        if key in selected or key.partition(".")[0] in selected
    ]


def stage_hash(config: PipelineConfig, stage: str, seed: int) -> str:
    items: list[tuple[str, object]] = list(stage_settings(config, stage))
    items += [
        (f"upstream.{up}", stage_hash(config, up, seed)) for up in REQUIRES[stage]
    ]
    if stage not in _SEEDLESS:
        items.append(("seed", seed))
    return checksum(items)


def stage_dir(config: PipelineConfig, stage: str, seed: int) -> Path:
    return config.output_path / stage / stage_hash(config, stage, seed)


def read_manifest(path: Path) -> dict[str, str]:
    inifile = IniFile(str(path / MANIFEST))
    return {key: str(value) for key, value in inifile.items()}


@dataclass(frozen=True)
class Dataset:
    vocab: Vocab
    spec: SplitSpec
    pool: RetrievalPool
    queries: Mapping[str, tuple[EgoSample, ...]]


def load_dataset(path: Path) -> Dataset:
    """Read the artifacts of the preprocess stage."""
    spec = SplitSpec.from_text((path / "split.txt").read_text(encoding="utf-8"))
    vocab = Vocab(spec.step_count, read_node_map(path / "nodes.txt"))
    pool = RetrievalPool(read_samples(path / "pool.tsv", vocab))
    queries = {name: read_samples(path / f"{name}.tsv", vocab) for name in SPLITS}
    return Dataset(vocab, spec, pool, queries)


@dataclass
class StageContext:
    config: PipelineConfig
    stage: str
    seed: int
    path: Path
    inputs: Mapping[str, Path]
    results: dict[str, str] = field(default_factory=dict)

    def input(self, stage: str, name: str) -> Path:
        if stage not in self.inputs:
            msg = f"stage {self.stage!r} does not read from {stage!r}"
            raise LookupError(msg)
        return self.inputs[stage] / name

    @cached_property
    def dataset(self) -> Dataset:
        return load_dataset(self.inputs["preprocess"])

    @property
    def progress(self) -> bool:
        return self.config.pipeline.progress

    def load_backbone(self) -> SequenceModel:
        state = load_checkpoint(self.input("pretrain", "backbone.ckpt"))
        return SequenceModel.from_state(self.config.backbone, state)


StageFunction = Callable[[StageContext], None]
_STAGE_FUNCTIONS: dict[str, StageFunction] = {}


def _stage(name: str) -> Callable[[StageFunction], StageFunction]:
    def decorator(fn: StageFunction) -> StageFunction:
        _STAGE_FUNCTIONS[name] = fn
        return fn

    return decorator


def _write_curve(path: Path, curve: Sequence[float]) -> None:
    path.write_text("".join(f"{value!r}\n" for value in curve), encoding="utf-8")


######################################################################
# stages


@_stage("preprocess")
def _preprocess(ctx: StageContext) -> None:
    settings = ctx.config.dataset
    if settings.path:
        graph = load_graph(Path(settings.path), settings.steps)
    else:
        graph = synth_graph(ctx.config.synth, settings.synth_seed)
    spec = SplitSpec.for_steps(graph.step_count)
    events = split(graph, spec)
    vocab = build_vocab(graph)
    budgets = {"max_len": settings.max_history, "max_output": settings.max_output}
    pool = build_pool(graph, spec, **budgets)

    (ctx.path / "edges.txt").write_text(serialize_edge_list(graph), encoding="utf-8")
    write_node_map(graph, ctx.path / "nodes.txt")
    (ctx.path / "split.txt").write_text(spec.to_text(), encoding="utf-8")
    write_samples(ctx.path / "pool.tsv", pool, vocab)
    for name, step in zip(SPLITS, (spec.val_step, spec.test_step)):
        queries = build_queries(graph, step, **budgets)
        write_samples(ctx.path / f"{name}.tsv", queries, vocab)
        ctx.results[f"{name}_queries"] = str(len(queries))
    ctx.results.update(
        nodes=str(graph.node_count),
        train_events=str(len(events.train)),
        pool=str(len(pool)),
        pool_skipped=str(pool.skipped),
    )


@_stage("pretrain")
def _pretrain(ctx: StageContext) -> None:
    data = ctx.dataset
    result = train_lm(
        data.pool.samples,
        data.vocab,
        ctx.config.backbone,
        ctx.config.pretrain,
        ctx.seed,
        progress=ctx.progress,
    )
    save_checkpoint(ctx.path / "backbone.ckpt", result.model.state_dict())
    _write_curve(ctx.path / "loss.txt", result.loss_curve)
    ctx.results["final_loss"] = f"{result.final_loss:.6f}"


@_stage("annotate")
def _annotate(ctx: StageContext) -> None:
    samples = ctx.dataset.pool.samples
    annotation = annotate_pool(samples, ctx.config.retriever.threshold)
    write_annotation(ctx.path / "annotation.txt", annotation, samples)
    ctx.results["pairs"] = str(annotation.pair_count)
    ctx.results["without_positives"] = str(annotation.without_positives)


@_stage("train-retriever")
def _train_retriever(ctx: StageContext) -> None:
    settings = ctx.config.retriever
    ctx.results["kind"] = settings.kind
    if settings.kind != "trained":
        return
    data = ctx.dataset
    annotation = read_annotation(
        ctx.input("annotate", "annotation.txt"), data.pool.samples, settings.threshold
    )
    training = train_retriever(
        ctx.load_backbone(),
        data.pool.samples,
        annotation,
        data.vocab,
        settings,
        ctx.seed,
        progress=ctx.progress,
    )
    save_checkpoint(ctx.path / "retriever.ckpt", training.encoder.state_dict())
    _write_curve(ctx.path / "loss.txt", training.loss_curve)
    ctx.results["final_loss"] = f"{training.loss_curve[-1]:.6f}"


def _build_retriever(ctx: StageContext) -> Retriever:
    settings = ctx.config.retriever
    samples = ctx.dataset.pool.samples
    if settings.kind == "trained":
        state = load_checkpoint(ctx.input("train-retriever", "retriever.ckpt"))
        encoder = SequenceModel.from_state(ctx.config.backbone, state)
        return RetrievalIndex(encoder, samples, ctx.dataset.vocab, settings.cosine)
    if settings.kind == "bm25":
        return BM25Index(samples)
    if settings.kind == "jaccard":
        return JaccardIndex(samples)
    return GroundTruthRetriever(samples)


def _rank_all(
    retriever: Retriever,
    queries: Iterable[EgoSample],
    k: int,
    *,
    exclude_self: bool = False,
) -> list[RankedDemos]:
    """Rank every query; queries with no eligible candidate get an empty ranking."""
    rankings = []
    empty = 0
    for query in queries:
        try:
            if exclude_self:
                ranked = retriever.rank(
                    query, k, time_filter=False, exclude=query.query_id
                )
            else:
                ranked = retriever.rank(query, k)
        except EmptyCandidatePoolError:
            empty += 1
            ranked = RankedDemos(query.query_id, k=k)
        rankings.append(ranked)
    if empty:
        logger.info("retrieve: %d query(ies) without eligible candidates", empty)
    return rankings


@_stage("retrieve")
def _retrieve(ctx: StageContext) -> None:
    data = ctx.dataset
    samples = data.pool.samples
    k = ctx.config.fusion.k
    retriever = _build_retriever(ctx)

    train = _rank_all(retriever, samples, k, exclude_self=True)
    write_rankings(ctx.path / "train_demos.txt", train, samples)

    depth = max(k, *HR_CUTOFFS)
    threshold = ctx.config.retriever.threshold
    for name, queries in data.queries.items():
        rankings = _rank_all(retriever, queries, depth)
        write_rankings(ctx.path / f"{name}_demos.txt", rankings, samples)
        relevant = {
            q.query_id: relevant_candidates(q, samples, threshold) for q in queries
        }
        for cutoff in HR_CUTOFFS:
            hr = hit_rate(rankings, relevant, cutoff)
            ctx.results[f"{name}_hr@{cutoff}"] = f"{hr.rate:.6f}"
        ctx.results[f"{name}_scored"] = str(hr.scored)
        ctx.results[f"{name}_no_signal"] = str(hr.no_signal)


@_stage("finetune")
def _finetune(ctx: StageContext) -> None:
    data = ctx.dataset
    samples = data.pool.samples
    settings = ctx.config.fusion
    if settings.ground_truth_demos:
        oracle = GroundTruthRetriever(samples)
        ranked = _rank_all(oracle, samples, settings.k, exclude_self=True)
        rankings = {r.query_id: r for r in ranked}
    else:
        rankings = read_rankings(
            ctx.input("retrieve", "train_demos.txt"), samples, settings.k
        )
    demonstrations = {
        i: rankings[s.query_id].top(settings.k)
        for i, s in enumerate(samples)
        if s.query_id in rankings
    }
    result = finetune_generator(
        ctx.load_backbone(),
        samples,
        demonstrations,
        data.vocab,
        settings,
        ctx.seed,
        progress=ctx.progress,
    )
    save_checkpoint(ctx.path / "fusion.ckpt", result.generator.state_dict())
    _write_curve(ctx.path / "loss.txt", result.loss_curve)
    ctx.results["final_loss"] = f"{result.loss_curve[-1]:.6f}"


class StoredRankings:
    """Replays the rankings written by the retrieve stage."""

    def __init__(self, rankings: Mapping[str, RankedDemos]) -> None:
        self.rankings = rankings

    def rank(
        self,
        query: EgoSample,
        k: int,
        *,
        time_filter: bool = True,
        exclude: str | None = None,
    ) -> RankedDemos:
        ranked = self.rankings.get(query.query_id)
        if ranked is None:
            return RankedDemos(query.query_id, k=k)
        return dataclasses.replace(
            ranked, candidates=ranked.top(k), scores=ranked.scores[:k], k=k
        )


@_stage("evaluate")
def _evaluate(ctx: StageContext) -> None:
    data = ctx.dataset
    settings = ctx.config.evaluate
    k = ctx.config.fusion.k
    generator = FusionGenerator.from_state(
        ctx.load_backbone(),
        ctx.config.fusion,
        data.vocab,
        load_checkpoint(ctx.input("finetune", "fusion.ckpt")),
    )
    stored = StoredRankings(
        read_rankings(
            ctx.input("retrieve", f"{settings.split}_demos.txt"),
            data.pool.samples,
            k,
        )
    )
    names = data.vocab.node_names
    predictions: dict[str, list[str]] = {}
    truth: dict[str, list[str]] = {}
    for query in data.queries[settings.split]:
        predicted = predict_with_rag(
            generator, stored, query, data.pool.samples, k, settings.max_new
        )
        predictions[query.query_id] = [names[n] for n in predicted.nodes]
        truth[query.query_id] = sorted(names[n] for n in query.output_nodes)

    report = evaluate_run(predictions, truth, settings.k)
    write_dump(ctx.path / "predictions.txt", predictions)
    write_dump(ctx.path / "truth.txt", truth)
    (ctx.path / "report.txt").write_text(report.to_text(), encoding="utf-8")
    ctx.results.update((s.name, f"{s.mean:.6f}") for s in report.summaries)


######################################################################
# running

_locks: dict[Path, threading.Lock] = {}
_locks_guard = threading.Lock()


@contextmanager
def _locked(path: Path) -> Iterator[None]:
    with _locks_guard:
        lock = _locks.setdefault(path.resolve(), threading.Lock())
    with lock:
        yield


@dataclass(frozen=True)
class StageResult:
    stage: str
    seed: int
    hash: str
    path: Path
    cached: bool = False
    results: Mapping[str, str] = field(default_factory=dict)


def _results_of(manifest: Mapping[str, str]) -> dict[str, str]:
    return {
        key[len("results.") :]: value
        for key, value in manifest.items()
        if key.startswith("results.")
    }


def _write_manifest(ctx: StageContext, digest: str, wall_time: float) -> None:
    inifile = IniFile(str(ctx.path / MANIFEST))
    inifile["stage.name"] = ctx.stage
    inifile["stage.hash"] = digest
    inifile["stage.seed"] = str(ctx.seed)
    inifile["stage.wall_time"] = f"{wall_time:.3f}"
    for up, path in ctx.inputs.items():
        inifile[f"upstream.{up}"] = path.name
    for key, value in stage_settings(ctx.config, ctx.stage):
        inifile[f"config.{key}"] = value
    for key, value in ctx.results.items():
        inifile[f"results.{key}"] = value
    inifile.save()


def run_stage(
    name: str, config: PipelineConfig, seed: int | None = None
) -> StageResult:
    """Run one stage, or return its cached artifacts when they are up to date."""
    if name not in STAGES:
        raise ConfigError("stage", f"unknown stage {name!r}, expected one of {STAGES}")
    seed = config.pipeline.seeds[0] if seed is None else seed
    digest = stage_hash(config, name, seed)
    path = config.output_path / name / digest
    with _locked(path):
        if (path / MANIFEST).is_file():
            logger.info("%s: cached (%s)", name, digest)
            return StageResult(
                name, seed, digest, path, True, _results_of(read_manifest(path))
            )
        inputs = {}
        for up in REQUIRES[name]:
            up_path = stage_dir(config, up, seed)
            if not (up_path / MANIFEST).is_file():
                raise MissingPrerequisiteError(name, up)
            inputs[up] = up_path

        path.mkdir(parents=True, exist_ok=True)
        ctx = StageContext(config, name, seed, path, inputs)
        started = time.perf_counter()
        _STAGE_FUNCTIONS[name](ctx)
        wall_time = time.perf_counter() - started
        _write_manifest(ctx, digest, wall_time)
        logger.info("%s: wrote %s in %.1fs", name, path, wall_time)
        return StageResult(name, seed, digest, path, False, dict(ctx.results))


def run_all(
    config: PipelineConfig, seeds: Sequence[int] | None = None
) -> list[StageResult]:
    """Run every stage for every seed; returns the evaluate result of each seed."""
    evaluated = []
    for seed in seeds or config.pipeline.seeds:
        for name in STAGES:
            result = run_stage(name, config, seed)
        evaluated.append(result)
    return evaluated


def evaluation_dirs(
    config: PipelineConfig, seeds: Sequence[int] | None = None
) -> list[Path]:
    """Completed evaluate directories for ``config``, in seed order."""
    paths = (stage_dir(config, "evaluate", s) for s in seeds or config.pipeline.seeds)
    return [path for path in paths if (path / MANIFEST).is_file()]


def load_report(path: Path) -> EvalReport:
    manifest = read_manifest(path)
    return evaluate_run(
        read_dump(path / "predictions.txt"),
        read_dump(path / "truth.txt"),
        int(manifest["config.evaluate.k"]),
    )


def emit_report(artifacts: Sequence[Path]) -> str:
    """Aggregate evaluate directories into a report, deterministic in its inputs."""
    if not artifacts:
        return "nothing to report\n"
    runs = []
    for path in artifacts:
        manifest = read_manifest(path)
        runs.append((int(manifest["stage.seed"]), manifest["stage.hash"], path))
    runs.sort()
    lines = ["runs:"]
    for seed, digest, path in runs:
        upstream = " ".join(
            f"{key[len('upstream.') :]}={value}"
            for key, value in sorted(read_manifest(path).items())
            if key.startswith("upstream.")
        )
        lines.append(f"  seed {seed}: evaluate={digest} {upstream}")
    report = combine_reports([load_report(path) for _, _, path in runs])
    return "\n".join(
        [*lines, "", report.to_text().rstrip("\n"), "", *report.to_lines()]
    ) + "\n"


######################################################################
# experiment matrix

ABLATIONS: Final[Mapping[str, Mapping[str, str]]] = {
    "full": {},
    "no-ccl": {"retriever.use_ccl": "false"},
    "no-decay": {"retriever.use_decay": "false"},
}


@dataclass(frozen=True)
class MatrixCell:
    k: int
    ablation: str
    strategy: str
    retriever: str

    @property
    def label(self) -> str:
        return f"k={self.k} {self.ablation} {self.strategy} {self.retriever}"

    def apply(self, config: PipelineConfig) -> PipelineConfig:
        return config.with_overrides(
            {
                "fusion.k": str(self.k),
                "fusion.strategy": self.strategy,
                "retriever.kind": self.retriever,
                **ABLATIONS[self.ablation],
            }
        )


@dataclass(frozen=True)
class MatrixAxes:
    k: tuple[int, ...] = (7,)
    ablations: tuple[str, ...] = ("full",)
    strategies: tuple[str, ...] = ("graph",)
    retrievers: tuple[str, ...] = ("trained",)

    def __post_init__(self) -> None:
        for axis, values, allowed in (
            ("ablations", self.ablations, tuple(ABLATIONS)),
            ("strategies", self.strategies, FUSION_STRATEGIES),
            ("retrievers", self.retrievers, RETRIEVER_KINDS),
        ):
            unknown = [v for v in values if v not in allowed]
            if unknown:
                raise ConfigError(f"matrix.{axis}", f"unknown {unknown!r}")
        if not (self.k and self.ablations and self.strategies and self.retrievers):
            raise ConfigError("matrix", "every axis needs at least one value")

    def cells(self) -> list[MatrixCell]:
        return [
            MatrixCell(*values)
            for values in itertools.product(
                self.k, self.ablations, self.strategies, self.retrievers
            )
        ]


@dataclass(frozen=True)
class MatrixRow:
    cell: MatrixCell
    report: EvalReport
    hashes: tuple[str, ...]
    #: mean retrieval hit rate per cutoff over the seeds
    hit_rates: Mapping[int, float] = field(default_factory=dict)


@dataclass(frozen=True)
class MatrixReport:
    rows: tuple[MatrixRow, ...]

    def to_text(self) -> str:
        names = [s.name for s in self.rows[0].report.summaries]
        hr_names = [f"hr@{c}" for c in HR_CUTOFFS]
        table = [["cell", *names, *hr_names, "runs"]]
        for row in self.rows:
            table.append(
                [
                    row.cell.label,
                    *(f"{s.mean:.4f}±{s.std:.4f}" for s in row.report.summaries),
                    *(f"{row.hit_rates.get(c, 0.0):.4f}" for c in HR_CUTOFFS),
                    ",".join(row.hashes),
                ]
            )
        widths = [max(len(r[i]) for r in table) for i in range(len(table[0]))]
        return "".join(
            "  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip() + "\n"
            for r in table
        )


def retrieval_hit_rates(
    config: PipelineConfig, seeds: Sequence[int] | None = None
) -> dict[int, float]:
    """Mean hit rate per cutoff on the evaluated split, from the retrieve manifests."""
    split = config.evaluate.split
    manifests = [
        read_manifest(stage_dir(config, "retrieve", seed))
        for seed in seeds or config.pipeline.seeds
    ]
    return {
        cutoff: sum(float(m[f"results.{split}_hr@{cutoff}"]) for m in manifests)
        / len(manifests)
        for cutoff in HR_CUTOFFS
    }


def run_matrix(
    config: PipelineConfig, axes: MatrixAxes, jobs: int | None = None
) -> MatrixReport:
    """One row per cell, each aggregated over the configured seeds."""

    def run_cell(cell: MatrixCell) -> MatrixRow:
        cell_config = cell.apply(config)
        evaluated = run_all(cell_config)
        report = combine_reports([load_report(r.path) for r in evaluated])
        hashes = tuple(r.hash for r in evaluated)
        return MatrixRow(cell, report, hashes, retrieval_hit_rates(cell_config))

    cells = axes.cells()
    workers = jobs or config.pipeline.jobs
    if workers <= 1:
        rows = [run_cell(cell) for cell in cells]
    else:
        with ThreadPoolExecutor(max_workers=workers) as executor:
            rows = list(executor.map(run_cell, cells))
    return MatrixReport(tuple(rows))
