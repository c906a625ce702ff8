"""Ablation grid runner

Each grid cell trains (or reuses) a model and evaluates it on the test bags,
producing one MetricsReport. A failing cell is recorded and the grid carries
on. Stage-1 and stage-2 models are cached per (seed, backbone, length,
pretraining) so experiments that share a model train it once.
"""

from __future__ import annotations

from typing import (
    Any,
    Callable,
    Dict,
    List,
    NamedTuple,
    Optional,
    Tuple,
)

import logging
from dataclasses import dataclass

import numpy as np
from scipy.stats import spearmanr

from .baggen import CellPools
from .config import JsonConfig
from .core import Diagnosis, MetricsReport, PatientBag, sha256_hex
from .errors import Fatal
from .evaluation import (
    PartitionSpec,
    evaluate_bags,
    partition_patients,
    perceptron_predictions,
)
from .features import BACKBONES, FeatureCache, FeatureExtractor, build_extractor
from .metrics import metrics_from_labels, utc_now
from .model import (
    AggregatorClassifier,
    Stage1CellClassifier,
    TrainConfig,
    TrainResult,
    train_stage1,
    train_stage2,
)
from .reports import PlotPoint
from .rng import derive_seed, seeded_rng
from .synth import SynthConfig, generate_patient


__all__ = (
    'AblationBundle',
    'AblationConfig',
    'AblationContext',
    'EXPERIMENTS',
    'run_ablations',
)

logger = logging.getLogger(__name__)

EXPERIMENTS = ('group_size', 'backbone', 'length', 'pretraining', 'perceptron', 'stain')


@dataclass(frozen=True)
class AblationConfig(JsonConfig):
    experiments: Tuple[str, ...] = EXPERIMENTS
    seeds: Tuple[int, ...] = (0, 1, 2, 3, 4)
    group_sizes: Tuple[int, ...] = (20, 30, 40, 50, 60, 70, 80, 90, 100)
    backbones: Tuple[str, ...] = (
        'alexnet',
        'inception_v3',
        'resnet50',
        'vgg16',
        'vit_b16',
    )
    train_lengths: Tuple[int, ...] = (1, 2, 4, 8, 16, 32)
    eval_length: int = 15
    stain_jitters: Tuple[float, ...] = (0.0, 0.06, 0.12, 0.24)
    stain_patients: int = 20
    stain_images: int = 2
    pretrained_backbones: bool = True

    def __post_init__(self) -> None:
        unknown = sorted(set(self.experiments) - set(EXPERIMENTS))
        if unknown:
            raise Fatal(f'unknown ablation experiment(s): {", ".join(unknown)}')
        missing = sorted(set(self.backbones) - set(BACKBONES))
        if missing:
            raise Fatal(f'unknown backbone(s) in ablation grid: {", ".join(missing)}')
        if not self.seeds:
            raise Fatal('ablation grid needs at least one seed')

    @classmethod
    def desk(cls) -> AblationConfig:
        """Reduced grid sized for a CPU and the synthetic corpus"""
        return cls(
            seeds=(0, 1, 2),
            group_sizes=(1, 2, 3, 4, 6, 8),
            backbones=('toy_cnn',),
            train_lengths=(1, 4, 15),
            stain_jitters=(0.0, 0.06, 0.2),
            stain_patients=12,
            pretrained_backbones=False,
        )


class AblationContext(NamedTuple):
    pools: CellPools
    test_bags: List[PatientBag]
    extractor: FeatureExtractor
    stage1: TrainConfig
    stage2: TrainConfig
    synth_config: Optional[SynthConfig] = None
    config_digest: Optional[str] = None


class AblationBundle(NamedTuple):
    reports: List[MetricsReport]
    failures: List[Dict[str, Any]]
    series: Dict[str, List[PlotPoint]]
    summary: Dict[str, Any]


def _cell_rng(seed: int, key: str) -> np.random.Generator:
    """Stream that depends only on the seed and the grid cell"""
    digest = sha256_hex(f'{derive_seed(seed, "ablate")}:{key}')
    return seeded_rng(int(digest[:15], 16))


ExperimentFn = Callable[['_Runner', int], None]

_EXPERIMENTS: Dict[str, ExperimentFn] = {}


def _experiment(name: str) -> Callable[[ExperimentFn], ExperimentFn]:
    def inner(func: ExperimentFn) -> ExperimentFn:
        _EXPERIMENTS[name] = func
        return func

    return inner


class _Runner:
    def __init__(self, config: AblationConfig, context: AblationContext):
        self.config = config
        self.context = context
        self.digest = context.config_digest or config.digest()
        self.reports: List[MetricsReport] = []
        self.failures: List[Dict[str, Any]] = []
        self.series: Dict[str, List[PlotPoint]] = {}
        self._extractors: Dict[str, FeatureCache] = {
            context.extractor.name: FeatureCache(context.extractor)
        }
        self._stage1: Dict[Tuple[int, str], TrainResult] = {}
        self._stage2: Dict[Tuple[int, str, int, bool], TrainResult] = {}

    def encoder(self, backbone: Optional[str] = None) -> FeatureCache:
        name = backbone or self.context.extractor.name
        if name not in self._extractors:
            extractor = build_extractor(name, self.config.pretrained_backbones)
            self._extractors[name] = FeatureCache(extractor)
        return self._extractors[name]

    def stage1(self, seed: int, backbone: Optional[str] = None) -> TrainResult:
        encoder = self.encoder(backbone)
        key = (seed, encoder.extractor.name)
        if key not in self._stage1:
            cfg = self.context.stage1.replace(
                seed=seed, backbone=encoder.extractor.name
            )
            self._stage1[key] = train_stage1(
                self.context.pools,
                cfg,
                encoder.extractor,
                _cell_rng(seed, f'stage1/{encoder.extractor.name}'),
            )
        return self._stage1[key]

    def stage2(
        self,
        seed: int,
        backbone: Optional[str] = None,
        length: Optional[int] = None,
        pretrained: bool = True,
    ) -> AggregatorClassifier:
        encoder = self.encoder(backbone)
        length = length or self.context.stage2.sequence_length
        key = (seed, encoder.extractor.name, length, pretrained)
        if key not in self._stage2:
            base = self.context.stage2
            cfg = base.replace(
                seed=seed,
                backbone=encoder.extractor.name,
                length=length,
                n_cells_range=(
                    base.n_cells_range if length == base.sequence_length else None
                ),
                from_scratch=not pretrained,
            )
            init = self.stage1(seed, backbone).checkpoint if pretrained else None
            self._stage2[key] = train_stage2(
                self.context.pools,
                cfg,
                init,
                encoder.extractor,
                _cell_rng(seed, f'stage2/{"/".join(map(str, key[1:]))}'),
            )
        return self._stage2[key].model

    def evaluate(
        self,
        name: str,
        seed: int,
        model: AggregatorClassifier,
        bags: List[PatientBag],
        backbone: Optional[str] = None,
        length: Optional[int] = None,
        extra: Optional[Dict[str, Any]] = None,
    ) -> MetricsReport:
        report, _ = evaluate_bags(
            model,
            bags,
            self.encoder(backbone),
            length=length,
            name=name,
            seed=seed,
            config_digest=self.digest,
            extra=extra,
        )
        return report

    def cell(
        self,
        experiment: str,
        key: str,
        x: Any,
        seed: int,
        run: Callable[[str], MetricsReport],
    ) -> None:
        name = f'ablate/{experiment}/{key}/seed{seed}'
        try:
            report = run(name)
        except (Fatal, ValueError, RuntimeError) as exc:
            failure = {
                'experiment': experiment,
                'key': key,
                'seed': seed,
                'error': str(exc),
            }
            logger.error('ablation cell failed', extra=failure)
            self.failures.append(failure)
            return

        report = report._replace(
            extra={**report.extra, 'experiment': experiment, 'key': key, 'x': x}
        )
        self.reports.append(report)
        self.series.setdefault(experiment, []).append(
            PlotPoint(x, f'seed{seed}', report.accuracy)
        )


@_experiment('group_size')
def _group_size(runner: _Runner, seed: int) -> None:
    for size in runner.config.group_sizes:

        def run(name: str, size: int = size) -> MetricsReport:
            bags = partition_patients(
                runner.context.test_bags,
                PartitionSpec(size),
                _cell_rng(seed, f'partition/{size}'),
            )
            if not bags:
                raise Fatal(f'no patient has {size} cells')
            return runner.evaluate(
                name, seed, runner.stage2(seed), bags, extra={'group_size': size}
            )

        runner.cell('group_size', str(size), size, seed, run)


@_experiment('backbone')
def _backbone(runner: _Runner, seed: int) -> None:
    for backbone in runner.config.backbones:

        def run(name: str, backbone: str = backbone) -> MetricsReport:
            model = runner.stage2(seed, backbone)
            extractor = runner.encoder(backbone).extractor
            return runner.evaluate(
                name,
                seed,
                model,
                runner.context.test_bags,
                backbone,
                extra={'d_g': extractor.dim, 'pretrained': extractor.pretrained},
            )

        runner.cell('backbone', backbone, backbone, seed, run)


@_experiment('length')
def _length(runner: _Runner, seed: int) -> None:
    for length in runner.config.train_lengths:

        def run(name: str, length: int = length) -> MetricsReport:
            return runner.evaluate(
                name,
                seed,
                runner.stage2(seed, length=length),
                runner.context.test_bags,
                length=runner.config.eval_length,
                extra={
                    'train_length': length,
                    'eval_length': runner.config.eval_length,
                },
            )

        runner.cell('length', str(length), length, seed, run)


@_experiment('pretraining')
def _pretraining(runner: _Runner, seed: int) -> None:
    for key, pretrained in (('stage1-init', True), ('from-scratch', False)):

        def run(name: str, pretrained: bool = pretrained) -> MetricsReport:
            return runner.evaluate(
                name,
                seed,
                runner.stage2(seed, pretrained=pretrained),
                runner.context.test_bags,
                extra={'stage1_init': pretrained},
            )

        runner.cell('pretraining', key, key, seed, run)


@_experiment('perceptron')
def _perceptron(runner: _Runner, seed: int) -> None:
    bags = runner.context.test_bags

    def run_recurrent(name: str) -> MetricsReport:
        return runner.evaluate(name, seed, runner.stage2(seed), bags)

    def run_perceptron(name: str) -> MetricsReport:
        started = utc_now()
        classifier = Stage1CellClassifier(runner.stage1(seed).model, runner.encoder())
        predictions = perceptron_predictions(bags, classifier, seed)
        return metrics_from_labels(
            [b.diagnosis for b in bags],
            predictions,
            name=name,
            seed=seed,
            config_digest=runner.digest,
            started_at=started,
            finished_at=utc_now(),
            extra={'evaluated_on_training_set': True},
        )

    runner.cell('perceptron', 'recurrent', 'recurrent', seed, run_recurrent)
    runner.cell(
        'perceptron', 'ideal-perceptron', 'ideal-perceptron', seed, run_perceptron
    )


@_experiment('stain')
def _stain(runner: _Runner, seed: int) -> None:
    synth = runner.context.synth_config
    for jitter in runner.config.stain_jitters:

        def run(name: str, jitter: float = jitter) -> MetricsReport:
            if synth is None:
                raise Fatal('the stain sweep needs the synthetic generator config')
            config = synth.replace(stain_jitter=jitter)
            rng = _cell_rng(seed, f'stain/{jitter}')
            bags = []
            for index in range(runner.config.stain_patients):
                diagnosis = Diagnosis.ALL if index % 2 == 0 else Diagnosis.HEALTHY
                _, bag = generate_patient(
                    config,
                    diagnosis,
                    runner.config.stain_images,
                    rng,
                    f'stain{index:03d}_{diagnosis.value}',
                )
                bags.append(bag)
            return runner.evaluate(
                name, seed, runner.stage2(seed), bags, extra={'stain_jitter': jitter}
            )

        runner.cell('stain', f'{jitter:g}', jitter, seed, run)


def _summarise(runner: _Runner) -> Dict[str, Any]:
    cells: Dict[str, List[float]] = {}
    for report in runner.reports:
        key = f'{report.extra["experiment"]}/{report.extra["key"]}'
        if report.accuracy is not None:
            cells.setdefault(key, []).append(report.accuracy)

    summary: Dict[str, Any] = {
        'cells': {
            key: {
                'mean': float(np.mean(values)),
                'std': float(np.std(values)),
                'n': len(values),
            }
            for key, values in sorted(cells.items())
        },
        'failures': len(runner.failures),
    }

    sizes = [
        (size, summary['cells'][f'group_size/{size}']['mean'])
        for size in runner.config.group_sizes
        if f'group_size/{size}' in summary['cells']
    ]
    if len(sizes) >= 3:
        rho, p_value = spearmanr([s for s, _ in sizes], [a for _, a in sizes])
        summary['group_size_spearman'] = {
            'rho': None if np.isnan(rho) else float(rho),
            'p_value': None if np.isnan(p_value) else float(p_value),
        }
    return summary


def _mean_series(series: Dict[str, List[PlotPoint]]) -> Dict[str, List[PlotPoint]]:
    out = {}
    for experiment, points in series.items():
        by_x: Dict[str, List[float]] = {}
        order: List[Any] = []
        for point in points:
            if str(point.x) not in by_x:
                order.append(point.x)
            if point.value is not None:
                by_x.setdefault(str(point.x), []).append(point.value)
            else:
                by_x.setdefault(str(point.x), [])
        means = [
            PlotPoint(x, 'mean', float(np.mean(by_x[str(x)])) if by_x[str(x)] else None)
            for x in order
        ]
        out[experiment] = list(points) + means
    return out


def run_ablations(config: AblationConfig, context: AblationContext) -> AblationBundle:
    runner = _Runner(config, context)
    for seed in config.seeds:
        for experiment in config.experiments:
            logger.info(
                'ablation experiment',
                extra={'experiment': experiment, 'seed': seed},
            )
            _EXPERIMENTS[experiment](runner, seed)

    bundle = AblationBundle(
        runner.reports, runner.failures, _mean_series(runner.series), _summarise(runner)
    )
    logger.info(
        'ablations complete',
        extra={'reports': len(bundle.reports), 'failures': len(bundle.failures)},
    )
    return bundle
