from __future__ import annotations

from typing import Any, Callable, Dict, List, NoReturn, Optional, Tuple

import sys
import json
import argparse
from pathlib import Path
from signal import SIGINT

import numpy as np
from PIL import Image

from . import BUDGETS, ablate, reproduce
from .ablation import AblationConfig
from .baggen import (
    PACKING_MODES,
    TRAINING_POLICY,
    default_cell_range,
    generate_epoch,
    load_epoch,
    pools_from_manifest,
    save_epoch,
)
from .checkpoint import (
    KIND_AGGREGATOR,
    Checkpoint,
    load_checkpoint,
    save_checkpoint,
)
from .config import RunConfig
from .core import AnnotatedImage, CellCrop, DatasetManifest
from .crops import crop_boxes
from .detect import (
    CLASS_MAPS,
    DetectorModel,
    DetectorTrainConfig,
    detect_cells,
    detection_to_json,
    detector_checkpoint,
    evaluate_detector,
    load_detector,
    train_detector,
)
from .errors import Fatal
from .evaluation import (
    AttackMode,
    AttackSpec,
    ClassSource,
    PartitionSpec,
    apply_attack,
    bags_from_manifest,
    cell_classifier,
    evaluate_bags,
    partition_patients,
    predict_bag,
)
from .features import (
    BACKBONES,
    FeatureExtractor,
    build_extractor,
    save_feature_dump,
)
from .log import configure_logging
from .manifest import load_manifest
from .model import (
    AGGREGATIONS,
    AggregatorClassifier,
    TrainConfig,
    load_model,
    train_stage1,
    train_stage2,
)
from .reports import write_json
from .rng import deterministic_mode, stream_rng
from .synth import (
    MANIFEST_NAME,
    SynthConfig,
    class_counts,
    corpus_digest,
    generate_corpus,
)


Args = argparse.Namespace
Parser = argparse.ArgumentParser
Handler = Callable[[Args, Parser], Dict[str, Any]]


class ArgumentParser(argparse.ArgumentParser):
    """Usage errors surface as Fatal so they share the structured error line"""

    def error(self, message: str) -> NoReturn:
        raise Fatal(
            f'{self.prog}: {message}', returncode=2, extended=self.format_usage()
        )


def main(argv: Optional[List[str]] = None) -> int:
    try:
        run_main(argv)
    except Fatal as exc:
        error: Dict[str, Any] = {
            'level': 'error',
            'event': 'fatal',
            'error': type(exc).__name__,
            'message': str(exc),
            'returncode': exc.returncode,
        }
        if exc.extended:
            error['extended'] = exc.extended.strip()
        print(json.dumps(error, sort_keys=True), file=sys.stderr)
        return exc.returncode
    except KeyboardInterrupt:
        return 128 + SIGINT
    except SystemExit as exc:
        # --help and --version exit through argparse
        return exc.code if isinstance(exc.code, int) else 0
    return 0


def run_main(argv: Optional[List[str]] = None) -> None:
    parser = build_parser()
    args = parser.parse_args(argv)

    configure_logging(args.log_level)
    if args.deterministic or args.command == 'repro':
        deterministic_mode()

    result = args.handler(args, parser)
    _emit(result, getattr(args, 'json_out', None))


def _emit(document: Dict[str, Any], target: Optional[str]) -> None:
    if target and target != '-':
        write_json(target, document)
    else:
        print(json.dumps(document, indent=1, sort_keys=True, default=str))


def _run_config(args: Args, out_dir: str = '', **options: Any) -> RunConfig:
    """Everything on the command line except where output goes and log settings"""
    skipped = {'handler', 'log_level', 'json_out', 'out', 'workers', 'deterministic'}
    recorded = {k: v for k, v in vars(args).items() if k not in skipped}
    recorded.update(options)
    return RunConfig(
        command=args.command,
        seed=getattr(args, 'seed', 0),
        out_dir=out_dir,
        backbone=getattr(args, 'backbone', None) or 'toy_cnn',
        sequence_length=getattr(args, 'length', None) or 15,
        budget=getattr(args, 'budget', 'desk'),
        options=recorded,
    )


def _manifest(path: str) -> DatasetManifest:
    manifest_path = Path(path)
    if manifest_path.is_dir():
        manifest_path = manifest_path / MANIFEST_NAME
    return load_manifest(manifest_path)


def _read_image(path: str) -> AnnotatedImage:
    try:
        with Image.open(path) as img:
            pixels = np.asarray(img.convert('RGB'), dtype=np.uint8)
    except OSError as exc:
        raise Fatal(f'unable to read image {path}: {exc}') from None
    return AnnotatedImage(Path(path).name, pixels)


def _load_aggregator(
    path: str, backbone: Optional[str], random_init: bool
) -> Tuple[AggregatorClassifier, Checkpoint, FeatureExtractor]:
    """Build the extractor the checkpoint names, then load against its digest"""
    peek = load_checkpoint(path, expected_kind=KIND_AGGREGATOR)
    extractor = build_extractor(
        backbone or peek.metadata['backbone'], pretrained=not random_init
    )
    model, checkpoint = load_model(path, extractor)
    return model, checkpoint, extractor


def _cmd_synth(args: Args, _parser: Parser) -> Dict[str, Any]:
    config = SynthConfig.load(args.config) if args.config else SynthConfig()
    config = config.replace(seed=args.seed)
    digest = _run_config(args, args.out, synth=config.to_json()).digest()
    manifest = generate_corpus(
        config,
        args.n_all,
        args.n_healthy,
        stream_rng(args.seed, 'synth'),
        args.out,
        args.images_per_patient,
        args.test_fraction,
        args.workers,
        digest,
    )
    return {
        'manifest': str(Path(args.out) / MANIFEST_NAME),
        'images': len(manifest),
        'cells': class_counts(manifest),
        'corpus_digest': corpus_digest(manifest),
        'config_digest': digest,
    }


def _cmd_train_detector(args: Args, _parser: Parser) -> Dict[str, Any]:
    config = DetectorTrainConfig()
    if args.config:
        config = DetectorTrainConfig.load(args.config)
    overrides = {
        key: value
        for key, value in (
            ('epochs', args.epochs),
            ('backbone', args.backbone),
            ('classes', args.classes),
            ('pretrained', args.pretrained or None),
        )
        if value is not None
    }
    config = config.replace(**overrides)
    digest = _run_config(args, args.out, detector=config.to_json()).digest()

    manifest = _manifest(args.manifest)
    detector = train_detector(manifest, config, stream_rng(args.seed, 'detect'))
    save_checkpoint(detector_checkpoint(detector, digest), args.out)

    result: Dict[str, Any] = {
        'checkpoint': args.out,
        'train_map': detector.train_map,
        'config_digest': digest,
    }
    if manifest.split('test'):
        result['test_map'] = evaluate_detector(detector, manifest, 'test').to_json()
    return result


def _cmd_detect(args: Args, _parser: Parser) -> Dict[str, Any]:
    detector: DetectorModel = load_detector(args.ckpt)
    image = _read_image(args.image)
    result = detect_cells(detector, image, args.score_threshold, args.nms_iou)
    document = detection_to_json(result)
    document['config_digest'] = _run_config(args).digest()
    return document


def _cmd_generate_epoch(args: Args, parser: Parser) -> Dict[str, Any]:
    if args.count < 1:
        parser.error('--count must be >= 1')
    cell_range = None
    if args.min_cells is not None or args.max_cells is not None:
        lo, hi = default_cell_range(args.length)
        cell_range = (args.min_cells or lo, args.max_cells or hi)

    pools = pools_from_manifest(_manifest(args.pools), args.split)
    sequences = generate_epoch(
        pools,
        args.length,
        args.count,
        args.balance,
        None,
        stream_rng(args.seed, 'baggen'),
        cell_range,
    )

    digest = _run_config(args, args.out).digest()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    path = out / 'epoch.json'
    save_epoch(sequences, path, digest)
    if args.verify:
        # fails on any crop reference the pools cannot resolve
        load_epoch(path, pools, TRAINING_POLICY, stream_rng(args.seed, 'baggen'))

    return {
        'epoch': str(path),
        'sequences': len(sequences),
        'all': sum(1 for s in sequences if s.blast_count >= 1),
        'config_digest': digest,
    }


def _cmd_extract_features(args: Args, _parser: Parser) -> Dict[str, Any]:
    manifest = _manifest(args.manifest)
    extractor = build_extractor(args.backbone, pretrained=not args.random_init)
    crops: List[CellCrop] = []
    for image in manifest.iter_images(args.split):
        crops.extend(crop_boxes(image, image.boxes))
    if not crops:
        raise Fatal(f'no annotated cells in the {args.split!r} split')

    digest = _run_config(args, args.out).digest()
    features = save_feature_dump(args.out, crops, extractor, digest)
    return {
        'prefix': args.out,
        'shape': list(features.shape),
        'backbone': extractor.name,
        'extractor_digest': extractor.digest(),
        'config_digest': digest,
    }


def _cmd_train(args: Args, parser: Parser) -> Dict[str, Any]:
    if args.stage == 1 and (args.init or args.from_scratch):
        parser.error('--init and --from-scratch only apply to --stage 2')
    if args.stage == 2 and not (args.init or args.from_scratch):
        parser.error('--stage 2 needs --init CKPT (or --from-scratch)')
    if args.stage == 2 and args.init and args.from_scratch:
        parser.error('--init and --from-scratch are mutually exclusive')

    config = TrainConfig(stage=args.stage)
    if args.config:
        config = TrainConfig.load(args.config)
    overrides = {
        key: value
        for key, value in (
            ('length', args.length),
            ('epochs', args.epochs),
            ('from_scratch', args.from_scratch or None),
        )
        if value is not None
    }
    extractor = build_extractor(args.backbone, pretrained=not args.random_init)
    config = config.replace(
        stage=args.stage, seed=args.seed, backbone=extractor.name, **overrides
    )
    digest = _run_config(args, args.out, train=config.to_json()).digest()

    pools = pools_from_manifest(_manifest(args.pools), 'train')
    if args.stage == 1:
        result = train_stage1(pools, config, extractor, stream_rng(args.seed, 'stage1'))
    else:
        init = None
        if args.init:
            init = load_checkpoint(
                args.init,
                expected_kind=KIND_AGGREGATOR,
                extractor_digest=extractor.digest(),
            )
        rng = stream_rng(args.seed, 'stage2')
        result = train_stage2(pools, config, init, extractor, rng)

    checkpoint = result.checkpoint._replace(
        metadata={**result.checkpoint.metadata, 'run_digest': digest}
    )
    save_checkpoint(checkpoint, args.out)
    return {
        'checkpoint': args.out,
        'stage': args.stage,
        'epochs': len(result.history),
        'holdout_accuracy': result.holdout_accuracy,
        'extractor_digest': extractor.digest(),
        'config_digest': digest,
    }


def _cmd_predict(args: Args, _parser: Parser) -> Dict[str, Any]:
    model, _, extractor = _load_aggregator(args.ckpt, args.backbone, args.random_init)
    detector = load_detector(args.detector) if args.detector else None

    manifest = _manifest(args.bag)
    bags = bags_from_manifest(manifest, None, detector, allow_unlabelled=True)
    predictions = [
        predict_bag(model, bag, extractor, args.packing, args.aggregation, args.length)
        for bag in bags
    ]
    digest = _run_config(args).digest()
    if len(predictions) == 1:
        return {**predictions[0].to_json(), 'config_digest': digest}
    return {'patients': [p.to_json() for p in predictions], 'config_digest': digest}


def _cmd_evaluate(args: Args, parser: Parser) -> Dict[str, Any]:
    manifest = _manifest(args.manifest)
    source = None if args.class_source is None else ClassSource(args.class_source)
    if source is None:
        synthetic = manifest.synthetic
        source = ClassSource.GROUND_TRUTH if synthetic else ClassSource.DETECTOR
    elif source is ClassSource.GROUND_TRUTH and not manifest.synthetic:
        parser.error('--class-source gt needs a synthetic manifest')
    attack = AttackSpec(AttackMode(args.attack), source)
    if attack.mode is not AttackMode.NONE and source is ClassSource.DETECTOR:
        if not args.detector:
            parser.error('--class-source detector needs --detector CKPT')

    model, _, extractor = _load_aggregator(args.ckpt, args.backbone, args.random_init)
    crop_detector = load_detector(args.crop_detector) if args.crop_detector else None
    class_detector = load_detector(args.detector) if args.detector else None

    bags = bags_from_manifest(manifest, args.split, crop_detector)
    if args.partition_size:
        bags = partition_patients(
            bags, PartitionSpec(args.partition_size), stream_rng(args.seed, 'eval')
        )
    if attack.mode is not AttackMode.NONE:
        classifier = cell_classifier(source, class_detector)
        bags = [apply_attack(bag, attack, classifier) for bag in bags]

    digest = _run_config(args).digest()
    report, predictions = evaluate_bags(
        model,
        bags,
        extractor,
        args.packing,
        args.aggregation,
        args.length,
        name=f'evaluate/{attack.mode.value}',
        seed=args.seed,
        config_digest=digest,
        extra={
            'attack': attack.to_json(),
            'partition_size': args.partition_size,
            'split': args.split,
        },
    )
    document = report.to_json()
    document['predictions'] = [p.to_json() for p in predictions]
    return document


def _cmd_ablate(args: Args, _parser: Parser) -> Dict[str, Any]:
    grid = AblationConfig.load(args.grid) if args.grid else AblationConfig.desk()
    return ablate(_manifest(args.manifest), grid, args.out, args.seed, args.budget)


def _cmd_repro(args: Args, _parser: Parser) -> Dict[str, Any]:
    bundle = reproduce(args.out, args.seed, args.budget, args.workers)
    return {
        'out': args.out,
        'digest': bundle['digest'],
        'reports': len(bundle['reports']),
    }


def _add_model_options(parser: Parser) -> None:
    parser.add_argument('--ckpt', required=True, help='Aggregator checkpoint')
    parser.add_argument(
        '--backbone',
        choices=sorted(BACKBONES),
        help='Frozen extractor (default: the one the checkpoint was trained with)',
    )
    parser.add_argument(
        '--random-init',
        action='store_true',
        help='Do not load pretrained backbone weights',
    )
    parser.add_argument('--packing', choices=PACKING_MODES, default='chunk')
    parser.add_argument('--aggregation', choices=AGGREGATIONS, default='max')
    parser.add_argument(
        '--length', type=int, help='Sequence length (default: the trained length)'
    )


def _json_out(parser: Parser) -> None:
    parser.add_argument(
        '--json-out',
        nargs='?',
        const='-',
        default='-',
        metavar='PATH',
        help='Write the JSON result to PATH (default: stdout)',
    )


def build_parser() -> Parser:
    parser = ArgumentParser(
        'blast-mil',
        description='Patient-level leukemia classification from blood smear images',
    )
    parser.add_argument(
        '--log-level',
        choices=('debug', 'info', 'warning', 'error'),
        default='info',
        help='Threshold for the JSON log lines on stderr',
    )
    parser.add_argument(
        '--deterministic',
        action='store_true',
        help='Single-threaded deterministic kernels (always on for repro)',
    )
    parser.add_argument(
        '--workers', type=int, default=1, help='Threads for image generation'
    )

    commands = parser.add_subparsers(dest='command', metavar='command')
    commands.required = True

    def command(name: str, handler: Handler, help_text: str) -> Parser:
        sub = commands.add_parser(name, help=help_text, description=help_text)
        sub.set_defaults(handler=handler)
        return sub

    sub = command('synth', _cmd_synth, 'Generate a synthetic annotated corpus')
    sub.add_argument('--out', required=True, help='Corpus directory')
    sub.add_argument('--all', dest='n_all', type=int, default=50, help='ALL patients')
    sub.add_argument(
        '--healthy', dest='n_healthy', type=int, default=50, help='HEALTHY patients'
    )
    sub.add_argument('--images-per-patient', type=int, default=2)
    sub.add_argument('--test-fraction', type=float, default=0.15)
    sub.add_argument('--seed', type=int, default=0)
    sub.add_argument('--config', help='SynthConfig JSON')
    _json_out(sub)

    sub = command('train-detector', _cmd_train_detector, 'Train the cell detector')
    sub.add_argument('--manifest', required=True)
    sub.add_argument('--out', required=True, help='Checkpoint path')
    sub.add_argument('--epochs', type=int)
    sub.add_argument('--seed', type=int, default=0)
    sub.add_argument('--backbone', choices=('toy', 'resnet50'))
    sub.add_argument('--classes', choices=sorted(CLASS_MAPS))
    sub.add_argument(
        '--pretrained', action='store_true', help='COCO-pretrained weights'
    )
    sub.add_argument('--config', help='DetectorTrainConfig JSON')
    _json_out(sub)

    sub = command('detect', _cmd_detect, 'Detect cells in one image')
    sub.add_argument('--ckpt', required=True, help='Detector checkpoint')
    sub.add_argument('--image', required=True)
    sub.add_argument('--score-threshold', type=float, default=0.5)
    sub.add_argument('--nms-iou', type=float, default=0.5)
    _json_out(sub)

    sub = command(
        'generate-epoch', _cmd_generate_epoch, 'Write one epoch of generated sequences'
    )
    sub.add_argument('--pools', required=True, help='Manifest supplying the cell pools')
    sub.add_argument('--split', choices=('train', 'test'), default='train')
    sub.add_argument('--length', type=int, default=15)
    sub.add_argument('--count', type=int, required=True)
    sub.add_argument('--balance', type=float, default=0.5)
    sub.add_argument('--min-cells', type=int)
    sub.add_argument('--max-cells', type=int)
    sub.add_argument('--seed', type=int, default=0)
    sub.add_argument('--out', required=True)
    sub.add_argument(
        '--verify', action='store_true', help='Re-load the epoch with augmentation'
    )
    _json_out(sub)

    sub = command(
        'extract-features', _cmd_extract_features, 'Dump frozen features of all cells'
    )
    sub.add_argument('--manifest', required=True)
    sub.add_argument('--backbone', choices=sorted(BACKBONES), default='toy_cnn')
    sub.add_argument('--split', choices=('train', 'test'), default='train')
    sub.add_argument('--random-init', action='store_true')
    sub.add_argument('--out', required=True, help='Prefix for .npy and .json')
    _json_out(sub)

    sub = command('train', _cmd_train, 'Train the aggregator (stage 1 or 2)')
    sub.add_argument('--stage', type=int, choices=(1, 2), required=True)
    sub.add_argument('--pools', required=True, help='Manifest supplying the cell pools')
    sub.add_argument('--backbone', choices=sorted(BACKBONES), default='toy_cnn')
    sub.add_argument('--random-init', action='store_true')
    sub.add_argument('--length', type=int)
    sub.add_argument('--epochs', type=int)
    sub.add_argument('--init', help='Stage-1 checkpoint (stage 2)')
    sub.add_argument('--from-scratch', action='store_true')
    sub.add_argument('--out', required=True, help='Checkpoint path')
    sub.add_argument('--seed', type=int, default=0)
    sub.add_argument('--config', help='TrainConfig JSON')
    _json_out(sub)

    sub = command('predict', _cmd_predict, 'Predict the diagnosis of one bag')
    _add_model_options(sub)
    sub.add_argument('--bag', required=True, help='Directory holding a manifest')
    sub.add_argument('--detector', help='Crop with this detector instead of the boxes')
    _json_out(sub)

    sub = command('evaluate', _cmd_evaluate, 'Patient-level evaluation and attacks')
    _add_model_options(sub)
    sub.add_argument('--manifest', required=True)
    sub.add_argument('--split', choices=('train', 'test'), default='test')
    sub.add_argument('--partition-size', type=int)
    sub.add_argument(
        '--attack', choices=[m.value for m in AttackMode], default=AttackMode.NONE.value
    )
    sub.add_argument('--class-source', choices=[s.value for s in ClassSource])
    sub.add_argument('--detector', help='Two-class detector supplying cell classes')
    sub.add_argument(
        '--crop-detector', help='Crop with this detector instead of the boxes'
    )
    sub.add_argument('--seed', type=int, default=0)
    _json_out(sub)

    sub = command('ablate', _cmd_ablate, 'Run an ablation grid on a corpus')
    sub.add_argument('--grid', help='AblationConfig JSON (default: the desk grid)')
    sub.add_argument('--manifest', required=True)
    sub.add_argument('--out', required=True)
    sub.add_argument('--budget', choices=sorted(BUDGETS), default='desk')
    sub.add_argument('--seed', type=int, default=0)
    _json_out(sub)

    sub = command('repro', _cmd_repro, 'Run the whole pipeline end to end')
    sub.add_argument('--out', required=True)
    sub.add_argument('--budget', choices=sorted(BUDGETS), default='desk')
    sub.add_argument('--seed', type=int, default=0)
    _json_out(sub)

    return parser


if __name__ == '__main__':
    sys.exit(main())
