"""Patient-level leukemia screening from blood smears as multiple-instance learning

A patient is a bag of white-blood-cell crops carrying only a patient label.
Cells are detected, embedded by a frozen backbone, packed into fixed-length
sequences and read by a recurrent aggregator whose per-sequence decisions are
pooled into a diagnosis.
"""

from __future__ import annotations

from typing import Any, Dict, List, NamedTuple, Optional, Tuple, Union

import logging
from pathlib import Path

from .ablation import AblationBundle, AblationConfig, AblationContext, run_ablations
from .baggen import pools_from_manifest
from .checkpoint import Checkpoint, save_checkpoint
from .config import RunConfig
from .core import DatasetManifest, MetricsReport, PatientBag
from .detect import (
    DetectorTrainConfig,
    DetectorCellClassifier,
    detector_checkpoint,
    evaluate_detector,
    oracle_detector,
    train_detector,
)
from .errors import Fatal
from .evaluation import (
    AttackTable,
    PartitionSpec,
    bags_from_manifest,
    evaluate_bags,
    exclude_training_cells,
    partition_patients,
    run_attack_experiment,
)
from .features import FeatureCache, build_extractor
from .metrics import utc_now
from .model import (
    AggregatorClassifier,
    GroundTruthClassifier,
    TrainConfig,
    train_stage1,
    train_stage2,
)
from .reports import (
    PlotPoint,
    render_line_chart,
    write_bundle,
    write_json,
    write_plot_csv,
    write_report,
)
from .rng import spawn_rngs, stream_rng
from .synth import CONFIG_NAME, SynthConfig, corpus_digest, generate_corpus


__version__ = '0.1.0'

logger = logging.getLogger(__name__)


class Budget(NamedTuple):
    synth: SynthConfig
    n_all: int
    n_healthy: int
    images_per_patient: int
    test_fraction: float
    detector: DetectorTrainConfig
    two_class_detector: bool
    backbone: str
    pretrained: bool
    stage1: TrainConfig
    stage2: TrainConfig
    partition_sizes: Tuple[int, ...]
    attack_group_sizes: Tuple[Optional[int], ...]
    ablation: AblationConfig

    def to_json(self) -> Dict[str, Any]:
        return {
            key: value.to_json() if hasattr(value, 'to_json') else value
            for key, value in self._asdict().items()
        }


BUDGETS: Dict[str, Budget] = {
    'desk': Budget(
        synth=SynthConfig(),
        n_all=50,
        n_healthy=50,
        images_per_patient=2,
        test_fraction=0.2,
        detector=DetectorTrainConfig(epochs=10),
        two_class_detector=False,
        backbone='toy_cnn',
        pretrained=False,
        stage1=TrainConfig(stage=1, epochs=10, sequences_per_epoch=2048),
        stage2=TrainConfig(
            stage=2, epochs=15, sequences_per_epoch=2048, validation_sequences=256
        ),
        partition_sizes=(2, 4),
        attack_group_sizes=(None, 4),
        ablation=AblationConfig.desk(),
    ),
    'full': Budget(
        synth=SynthConfig(),
        n_all=100,
        n_healthy=100,
        images_per_patient=8,
        test_fraction=0.15,
        detector=DetectorTrainConfig(
            backbone='resnet50', epochs=30, image_size=512, pretrained=True
        ),
        two_class_detector=True,
        backbone='alexnet',
        pretrained=True,
        stage1=TrainConfig(stage=1, epochs=20, sequences_per_epoch=2048),
        stage2=TrainConfig(stage=2, epochs=20, sequences_per_epoch=2048),
        partition_sizes=(10, 20, 30),
        attack_group_sizes=(None, 10, 20, 30),
        ablation=AblationConfig(group_sizes=(5, 10, 15, 20, 25, 30)),
    ),
}


def run_config(
    seed: int, budget: str, out_dir: Union[str, Path], command: str = 'repro'
) -> RunConfig:
    try:
        preset = BUDGETS[budget]
    except KeyError:
        raise Fatal(
            f'unknown budget {budget!r} (choose from {", ".join(sorted(BUDGETS))})'
        ) from None
    return RunConfig(
        command=command,
        seed=seed,
        out_dir=str(out_dir),
        backbone=preset.backbone,
        sequence_length=preset.stage2.sequence_length,
        budget=budget,
        options=preset.to_json(),
    )


def _tag(checkpoint: Checkpoint, digest: str) -> Checkpoint:
    return checkpoint._replace(metadata={**checkpoint.metadata, 'run_digest': digest})


def _holdout_report(
    name: str, report: Optional[MetricsReport], seed: int, digest: str
) -> List[MetricsReport]:
    if report is None:
        return []
    return [report._replace(name=name, seed=seed, config_digest=digest)]


def _attack_points(table: AttackTable, prefix: str = '') -> List[PlotPoint]:
    return [
        PlotPoint(x, f'{prefix}{series}', value) for x, series, value in table.series()
    ]


def _evaluate_partitions(
    model: AggregatorClassifier,
    bags: List[PatientBag],
    encoder: FeatureCache,
    sizes: Tuple[int, ...],
    seed: int,
    digest: str,
) -> List[MetricsReport]:
    rng = stream_rng(seed, 'eval')
    reports = []
    for size in sizes:
        grouped = partition_patients(bags, PartitionSpec(size), rng)
        if not grouped:
            continue
        report, _ = evaluate_bags(
            model,
            grouped,
            encoder,
            name=f'evaluate/partition{size}',
            seed=seed,
            config_digest=digest,
            extra={'partition_size': size},
        )
        reports.append(report)
    return reports


def reproduce(
    out_dir: Union[str, Path],
    seed: int = 0,
    budget: str = 'desk',
    workers: int = 1,
) -> Dict[str, Any]:
    """synth -> detector -> stage 1 -> stage 2 -> evaluation and attacks -> ablations

    Every stage draws from its own stream of `seed`. Returns the bundle
    document written to `out_dir/bundle.json`.
    """
    config = run_config(seed, budget, out_dir)
    preset = BUDGETS[budget]
    digest = config.digest()
    started = utc_now()

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    plots_dir = out / 'plots'
    plots_dir.mkdir(parents=True, exist_ok=True)
    write_json(
        out / 'run.json',
        {'config': config.to_json(), 'digest': digest, 'started_at': started},
    )

    logger.info(
        'repro: synth', extra={'budget': budget, 'seed': seed, 'digest': digest}
    )
    manifest = generate_corpus(
        preset.synth.replace(seed=seed),
        preset.n_all,
        preset.n_healthy,
        stream_rng(seed, 'synth'),
        out / 'corpus',
        preset.images_per_patient,
        preset.test_fraction,
        workers,
        digest,
    )

    logger.info('repro: train-detector')
    agnostic_rng, two_class_rng = spawn_rngs(stream_rng(seed, 'detect'), 2)
    detector = train_detector(manifest, preset.detector, agnostic_rng)
    save_checkpoint(detector_checkpoint(detector, digest), out / 'detector.ckpt')
    detector_map = evaluate_detector(detector, manifest, 'test')
    oracle_map = evaluate_detector(oracle_detector(manifest), manifest, 'test')

    classifier_detector = None
    if preset.two_class_detector:
        classifier_detector = train_detector(
            manifest, preset.detector.replace(classes='blast-normal'), two_class_rng
        )
        save_checkpoint(
            detector_checkpoint(classifier_detector, digest),
            out / 'detector-blast-normal.ckpt',
        )

    extractor = build_extractor(preset.backbone, preset.pretrained)
    encoder = FeatureCache(extractor)
    pools = pools_from_manifest(manifest, 'train')

    logger.info('repro: train stage 1')
    stage1_cfg = preset.stage1.replace(seed=seed, backbone=extractor.name)
    stage1 = train_stage1(pools, stage1_cfg, extractor, stream_rng(seed, 'stage1'))
    save_checkpoint(_tag(stage1.checkpoint, digest), out / 'stage1.ckpt')

    logger.info('repro: train stage 2')
    stage2_cfg = preset.stage2.replace(seed=seed, backbone=extractor.name)
    stage2 = train_stage2(
        pools, stage2_cfg, stage1.checkpoint, extractor, stream_rng(seed, 'stage2')
    )
    save_checkpoint(_tag(stage2.checkpoint, digest), out / 'stage2.ckpt')

    reports: List[MetricsReport] = []
    reports += _holdout_report('train/stage1-holdout', stage1.holdout, seed, digest)
    reports += _holdout_report('train/stage2-holdout', stage2.holdout, seed, digest)

    logger.info('repro: evaluate')
    model = stage2.model
    oracle_bags = exclude_training_cells(
        bags_from_manifest(manifest, 'test', oracle_detector(manifest)), pools
    )
    detected_bags = bags_from_manifest(manifest, 'test', detector)
    evaluations = (('oracle', oracle_bags), ('detector', detected_bags))
    for source, bags in evaluations:
        report, predictions = evaluate_bags(
            model,
            bags,
            encoder,
            name=f'evaluate/{source}',
            seed=seed,
            config_digest=digest,
        )
        reports.append(report)
        write_json(
            out / 'predictions' / f'{source}.json',
            {
                'config_digest': digest,
                'predictions': [p.to_json() for p in predictions],
            },
        )
    reports += _evaluate_partitions(
        model, oracle_bags, encoder, preset.partition_sizes, seed, digest
    )

    attacks = run_attack_experiment(
        model,
        oracle_bags,
        encoder,
        GroundTruthClassifier(),
        stream_rng(seed, 'eval'),
        group_sizes=preset.attack_group_sizes,
    )
    attack_points = _attack_points(attacks, 'gt/')
    extra: Dict[str, Any] = {'attacks': {'gt': attacks.to_json()}}
    if classifier_detector is not None:
        detector_attacks = run_attack_experiment(
            model,
            detected_bags,
            encoder,
            DetectorCellClassifier(classifier_detector),
            stream_rng(seed, 'eval'),
            group_sizes=preset.attack_group_sizes,
        )
        attack_points += _attack_points(detector_attacks, 'detector/')
        extra['attacks']['detector'] = detector_attacks.to_json()

    write_plot_csv(plots_dir / 'attacks.csv', attack_points)
    render_line_chart(
        plots_dir / 'attacks.png',
        attack_points,
        'Recall under attack',
        'group size',
        'recall',
    )

    logger.info('repro: ablate')
    ablation_config = preset.ablation.replace(
        seeds=tuple(seed + s for s in preset.ablation.seeds)
    )
    ablation = run_ablations(
        ablation_config,
        AblationContext(
            pools, oracle_bags, extractor, stage1_cfg, stage2_cfg, preset.synth, digest
        ),
    )
    reports += ablation.reports
    _plot_ablation(plots_dir, ablation)

    extra.update(
        {
            'config_digest': digest,
            'corpus_digest': corpus_digest(manifest),
            'extractor_digest': extractor.digest(),
            'detector_map': {
                'trained': detector_map.to_json(),
                'oracle': oracle_map.to_json(),
            },
            'ablation': {'summary': ablation.summary, 'failures': ablation.failures},
        }
    )
    bundle = _write_reports(out, reports, extra)

    write_json(
        out / 'run.json',
        {
            'config': config.to_json(),
            'digest': digest,
            'bundle_digest': bundle['digest'],
            'started_at': started,
            'finished_at': utc_now(),
        },
    )
    logger.info('repro complete', extra={'bundle_digest': bundle['digest']})
    return bundle


def _plot_ablation(plots_dir: Path, ablation: AblationBundle) -> None:
    for experiment, points in sorted(ablation.series.items()):
        write_plot_csv(plots_dir / f'ablate_{experiment}.csv', points)
        render_line_chart(
            plots_dir / f'ablate_{experiment}.png',
            points,
            f'Ablation: {experiment}',
            experiment,
        )


def _write_reports(
    out: Path, reports: List[MetricsReport], extra: Dict[str, Any]
) -> Dict[str, Any]:
    for report in reports:
        write_report(out / 'reports', report)
    return write_bundle(out, reports, extra, report_dir='reports')


def ablate(
    manifest: DatasetManifest,
    grid: AblationConfig,
    out_dir: Union[str, Path],
    seed: int = 0,
    budget: str = 'desk',
) -> Dict[str, Any]:
    """Run an ablation grid against an existing corpus

    Training hyperparameters come from the budget preset; the corpus's train
    split supplies the pools and its test split the evaluation bags.
    """
    config = run_config(seed, budget, out_dir, command='ablate')
    config = config.replace(
        options={
            **config.options,
            'ablation': grid.to_json(),
            'corpus_digest': corpus_digest(manifest),
        }
    )
    preset = BUDGETS[budget]
    digest = config.digest()

    synth_path = manifest.root / CONFIG_NAME
    synth_config = SynthConfig.load(synth_path) if synth_path.exists() else None

    extractor = build_extractor(preset.backbone, preset.pretrained)
    pools = pools_from_manifest(manifest, 'train')
    test_bags = exclude_training_cells(bags_from_manifest(manifest, 'test'), pools)

    ablation = run_ablations(
        grid,
        AblationContext(
            pools,
            test_bags,
            extractor,
            preset.stage1.replace(seed=seed, backbone=extractor.name),
            preset.stage2.replace(seed=seed, backbone=extractor.name),
            synth_config,
            digest,
        ),
    )

    out = Path(out_dir)
    plots_dir = out / 'plots'
    plots_dir.mkdir(parents=True, exist_ok=True)
    _plot_ablation(plots_dir, ablation)
    return _write_reports(
        out,
        ablation.reports,
        {
            'config_digest': digest,
            'extractor_digest': extractor.digest(),
            'ablation': {'summary': ablation.summary, 'failures': ablation.failures},
        },
    )
