from __future__ import annotations

from typing import Any, Dict, Iterator, List, Union

import os
import sys
import json
import shlex
import unittest
from contextlib import contextmanager
from pathlib import Path
from subprocess import run, CompletedProcess
from tempfile import TemporaryDirectory
from unittest import TestCase

from ..model import TrainConfig
from ..synth import SynthConfig


PACKAGE_ROOT = Path(__file__).resolve().parents[2]

SLOW = os.environ.get('BLAST_MIL_SLOW_TESTS') == '1'


class PipelineTest(TestCase):

    maxDiff = None

    def test_synth_train_evaluate_predict(self) -> None:
        with TemporaryDirectory(prefix='blast-mil-test') as cwd, change_dir(
            cwd
        ), update_env(PYTHONPATH=str(PACKAGE_ROOT)), delete_env(
            ['BLAST_MIL_WEIGHTS_DIR']
        ):

            SynthConfig(
                image_size=128, cells_per_image=(1, 1), red_cells_per_image=4
            ).save('synth.json')
            small = dict(epochs=1, sequences_per_epoch=16, batch_size=8, augment=False)
            TrainConfig(stage=1, **small).save('stage1.json')
            TrainConfig(
                stage=2, n_cells_range=(1, 2), validation_sequences=8, **small
            ).save('stage2.json')

            synth = blast_mil(
                'synth --out corpus --all 10 --healthy 6 --images-per-patient 3 '
                '--test-fraction 0.25 --config synth.json'
            )
            self.assertEqual(synth['images'], 48)

            stage1 = blast_mil(
                'train --stage 1 --pools corpus --out stage1.ckpt --config stage1.json'
            )
            self.assertEqual(stage1['stage'], 1)

            stage2 = blast_mil(
                'train --stage 2 --pools corpus --init stage1.ckpt --length 4 '
                '--out stage2.ckpt --config stage2.json'
            )
            self.assertEqual(stage2['extractor_digest'], stage1['extractor_digest'])

            report = blast_mil(
                'evaluate --ckpt stage2.ckpt --manifest corpus --json-out eval.json'
            )
            self.assertEqual(
                report['tp'] + report['fp'] + report['tn'] + report['fn'], 4
            )
            self.assertEqual(len(report['predictions']), 4)
            self.assertTrue(report['config_digest'])

            attacked = blast_mil(
                'evaluate --ckpt stage2.ckpt --manifest corpus --attack remove-blast'
            )
            self.assertEqual(attacked['name'], 'evaluate/remove-blast')
            self.assertEqual(attacked['extra']['attack']['source'], 'gt')
            self.assertEqual(
                attacked['tp'] + attacked['fn'], report['tp'] + report['fn']
            )

            parts = blast_mil(
                'evaluate --ckpt stage2.ckpt --manifest corpus --partition-size 1'
            )
            self.assertEqual(parts['extra']['patients'], 12)

            predicted = blast_mil('predict --ckpt stage2.ckpt --bag corpus --length 4')
            self.assertEqual(len(predicted['patients']), 16)
            for patient in predicted['patients']:
                self.assertEqual(
                    patient['probability'], max(patient['per_sequence'], default=0.0)
                )

    def test_detector_round_trip(self) -> None:
        with TemporaryDirectory(prefix='blast-mil-test') as cwd, change_dir(
            cwd
        ), update_env(PYTHONPATH=str(PACKAGE_ROOT)):
            SynthConfig(
                image_size=128, cells_per_image=(1, 1), red_cells_per_image=4
            ).save('synth.json')
            blast_mil('synth --out corpus --all 2 --healthy 2 --config synth.json')

            trained = blast_mil(
                'train-detector --manifest corpus --out detector.ckpt --epochs 1'
            )
            self.assertIsNotNone(trained['train_map'])

            image = sorted(Path('corpus', 'images').rglob('*.png'))[0]
            found = blast_mil(
                [
                    'detect',
                    '--ckpt',
                    'detector.ckpt',
                    '--image',
                    str(image),
                    '--score-threshold',
                    '0.0',
                ]
            )
            scores = [b['score'] for b in found['boxes']]
            self.assertEqual(scores, sorted(scores, reverse=True))

    def test_usage_error_exit_code(self) -> None:
        with update_env(PYTHONPATH=str(PACKAGE_ROOT)):
            res = test_cmd(
                [sys.executable, '-m', 'blast_mil', 'frobnicate'],
                check=False,
                capture_output=True,
            )
        self.assertEqual(res.returncode, 2)
        error = json.loads(res.stderr.decode().strip().splitlines()[-1])
        self.assertEqual(error['event'], 'fatal')
        self.assertIn('frobnicate', error['message'])


class SetupTest(TestCase):
    def test_metadata_and_commands(self) -> None:
        with change_dir(str(PACKAGE_ROOT)):
            name = test_cmd([sys.executable, 'setup.py', '--name'], capture_output=True)
            self.assertEqual(name.stdout.decode().split()[-1], 'blast_mil')

            listed = test_cmd(
                [sys.executable, 'setup.py', '--help-commands'], capture_output=True
            )
            commands = listed.stdout.decode()
            self.assertRegex(commands, r'(?m)^  check\s')
            self.assertRegex(commands, r'(?m)^  coverage\s')


@unittest.skipUnless(SLOW, 'set BLAST_MIL_SLOW_TESTS=1 to run the desk reproduction')
class ReproTest(TestCase):
    def test_reruns_are_identical(self) -> None:
        with TemporaryDirectory(prefix='blast-mil-repro') as cwd, change_dir(
            cwd
        ), update_env(PYTHONPATH=str(PACKAGE_ROOT)):
            first = blast_mil('repro --out run1 --budget desk --seed 0')
            second = blast_mil('repro --out run2 --budget desk --seed 0')
            self.assertEqual(first['digest'], second['digest'])

            with open('run1/bundle.json') as f:
                bundle = json.load(f)
            names = {r['name'] for r in bundle['reports']}
            self.assertIn('evaluate/oracle', names)
            self.assertIn('evaluate/detector', names)
            self.assertTrue(Path('run1/plots/attacks.png').is_file())

            attacks = bundle['extra']['attacks']['gt']
            recall = {(a['group_size'], a['mode']): a['recall'] for a in attacks}
            self.assertLessEqual(recall[(None, 'remove-blast')], recall[(None, 'none')])


def blast_mil(cmd: Union[str, List[str]]) -> Dict[str, Any]:
    if isinstance(cmd, str):
        cmd = shlex.split(cmd)
    res = test_cmd(
        [sys.executable, '-m', 'blast_mil', '--log-level', 'warning'] + cmd,
        capture_output=True,
    )
    stdout = res.stdout.decode()
    target = cmd[cmd.index('--json-out') + 1] if '--json-out' in cmd else '-'
    if target != '-':
        # the document goes to the file and nothing to stdout
        if stdout.strip():
            raise AssertionError(f'unexpected output with --json-out: {stdout!r}')
        stdout = Path(target).read_text()
    result: Dict[str, Any] = json.loads(stdout)
    return result


@contextmanager
def change_dir(cwd: str) -> Iterator[None]:
    old_cwd = os.getcwd()
    try:
        os.chdir(cwd)
        yield
    finally:
        os.chdir(old_cwd)


@contextmanager
def update_env(**kwargs: str) -> Iterator[None]:
    old_env = dict(os.environ)
    os.environ.update(kwargs)
    try:
        yield
    finally:
        changed_keys = set(kwargs)
        old_keys = set(old_env)
        for k in changed_keys - old_keys:
            del os.environ[k]
        os.environ.update(old_env)


@contextmanager
def delete_env(keys: List[str]) -> Iterator[None]:
    present_keys = [k for k in keys if k in os.environ]
    old = [os.environ.pop(k) for k in present_keys]
    try:
        yield
    finally:
        for key, value in zip(present_keys, old):
            os.environ[key] = value


def test_cmd(cmd: Union[str, List[str]], **kwargs: Any) -> CompletedProcess:
    if isinstance(cmd, str):
        # test calls don't need to worry much about input validation
        cmd = shlex.split(cmd)
    kwargs.setdefault('check', True)
    return run(cmd, **kwargs)


test_cmd.__test__ = False  # helper, not a pytest test
