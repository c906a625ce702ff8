from __future__ import annotations

import csv
import json
from pathlib import Path
from tempfile import TemporaryDirectory
from unittest import TestCase

from .core import MetricsReport
from .errors import Fatal
from .reports import (
    BUNDLE_NAME,
    PlotPoint,
    bundle_digest,
    render_line_chart,
    slug,
    write_bundle,
    write_plot_csv,
    write_report,
)


def report(name: str, accuracy: float = 0.5, **fields) -> MetricsReport:
    return MetricsReport(
        1,
        1,
        1,
        1,
        accuracy,
        0.5,
        0.5,
        0.5,
        name=name,
        seed=0,
        config_digest='cfg',
        **fields,
    )


class ReportFileTest(TestCase):
    def test_slug(self) -> None:
        self.assertEqual(
            slug('ablate/group_size/20/seed0'), 'ablate__group_size__20__seed0'
        )
        self.assertEqual(slug('///'), 'report')

    def test_report_needs_a_digest(self) -> None:
        with TemporaryDirectory() as tmp:
            with self.assertRaisesRegex(Fatal, 'no config digest'):
                write_report(tmp, report('x')._replace(config_digest=None))
            path = write_report(tmp, report('evaluate/oracle'))
            self.assertEqual(path.name, 'evaluate__oracle.json')
            self.assertEqual(
                MetricsReport.from_json(json.loads(path.read_text())),
                report('evaluate/oracle'),
            )

    def test_plot_csv(self) -> None:
        with TemporaryDirectory() as tmp:
            path = Path(tmp) / 'plots' / 'p.csv'
            write_plot_csv(
                path, [PlotPoint(1, 'seed0', 0.25), PlotPoint('all', 'mean', None)]
            )
            with open(path, newline='') as f:
                rows = list(csv.reader(f))
        self.assertEqual(
            rows,
            [['x', 'series', 'value'], ['1', 'seed0', '0.25'], ['all', 'mean', '']],
        )

    def test_charts_render(self) -> None:
        numeric = [PlotPoint(x, 'seed0', x / 10) for x in (1, 2, 4)]
        categorical = [
            PlotPoint('all', 'none', 1.0),
            PlotPoint(4, 'none', 0.5),
            PlotPoint(8, 'none', None),
        ]
        with TemporaryDirectory() as tmp:
            for name, points in (('numeric', numeric), ('categorical', categorical)):
                path = Path(tmp) / f'{name}.png'
                render_line_chart(path, points, name, 'x')
                with self.subTest(name=name):
                    self.assertGreater(path.stat().st_size, 0)


class BundleTest(TestCase):
    def test_digest_ignores_order_and_timestamps(self) -> None:
        a, b = report('a'), report('b', accuracy=0.75)
        stamped = a._replace(started_at='2020-01-01T00:00:00+00:00')
        self.assertEqual(bundle_digest([a, b]), bundle_digest([b, stamped]))
        self.assertNotEqual(bundle_digest([a, b]), bundle_digest([a]))
        self.assertNotEqual(bundle_digest([a], {'k': 1}), bundle_digest([a], {'k': 2}))

    def test_bundle_file(self) -> None:
        reports = [report('evaluate/oracle'), report('train/stage1-holdout')]
        with TemporaryDirectory() as tmp:
            document = write_bundle(
                tmp, reports, {'corpus_digest': 'x'}, report_dir='reports'
            )
            on_disk = json.loads((Path(tmp) / BUNDLE_NAME).read_text())
        self.assertEqual(on_disk, document)
        self.assertEqual(
            document['digest'], bundle_digest(reports, {'corpus_digest': 'x'})
        )
        self.assertEqual(
            [r['file'] for r in document['reports']],
            ['reports/evaluate__oracle.json', 'reports/train__stage1-holdout.json'],
        )
