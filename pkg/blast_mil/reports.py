"""Report files: metrics JSON, plot-ready CSV, PNG line charts, bundle digest"""

from __future__ import annotations

from typing import Any, Dict, Iterable, List, NamedTuple, Optional, Sequence, Union

import csv
import json
import logging
import re
from pathlib import Path

import matplotlib

matplotlib.use('Agg')

# pylint: disable=wrong-import-position
import matplotlib.pyplot as plt

from .core import MetricsReport, canonical_json, sha256_hex
from .errors import Fatal


logger = logging.getLogger(__name__)

BUNDLE_NAME = 'bundle.json'


class PlotPoint(NamedTuple):
    x: Any
    series: str
    value: Optional[float]


def slug(name: str) -> str:
    return re.sub(r'[^A-Za-z0-9_.=-]+', '__', name).strip('_') or 'report'


def write_json(path: Union[str, Path], data: Any) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'w') as f:
        f.write(json.dumps(json.loads(canonical_json(data)), indent=1, sort_keys=True))
        f.write('\n')


def write_report(out_dir: Union[str, Path], report: MetricsReport) -> Path:
    if not report.config_digest:
        raise Fatal(f'report {report.name!r} has no config digest')
    path = Path(out_dir) / f'{slug(report.name)}.json'
    write_json(path, report.to_json())
    return path


def write_plot_csv(path: Union[str, Path], points: Iterable[PlotPoint]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'w', newline='') as f:
        writer = csv.writer(f)
        writer.writerow(('x', 'series', 'value'))
        for point in points:
            value = '' if point.value is None else repr(point.value)
            writer.writerow((point.x, point.series, value))


def render_line_chart(
    path: Union[str, Path],
    points: Sequence[PlotPoint],
    title: str,
    xlabel: str,
    ylabel: str = 'accuracy',
) -> None:
    by_series: Dict[str, List[PlotPoint]] = {}
    for point in points:
        if point.value is not None:
            by_series.setdefault(point.series, []).append(point)

    # any non-numeric x turns the whole axis categorical, in first-seen order
    categories: List[str] = []
    if not all(_numeric(p.x) for p in points):
        categories = list(dict.fromkeys(str(p.x) for p in points))

    fig, ax = plt.subplots(figsize=(6, 4))
    try:
        for series, series_points in sorted(by_series.items()):
            xs = [
                categories.index(str(p.x)) if categories else p.x
                for p in series_points
            ]
            ax.plot(xs, [p.value for p in series_points], marker='o', label=series)
        if categories:
            ax.set_xticks(range(len(categories)))
            ax.set_xticklabels(categories)
        ax.set_title(title)
        ax.set_xlabel(xlabel)
        ax.set_ylabel(ylabel)
        ax.grid(True, alpha=0.3)
        if by_series:
            ax.legend(loc='best', fontsize='small')
        fig.tight_layout()
        fig.savefig(str(path), dpi=100)
    finally:
        plt.close(fig)


def _numeric(value: Any) -> bool:
    return isinstance(value, (int, float)) and not isinstance(value, bool)


def bundle_digest(
    reports: Iterable[MetricsReport], extra: Optional[Dict[str, Any]] = None
) -> str:
    """Digest over the report digests and the extra results, never timestamps"""
    entries = sorted(
        (r.name, r.seed if r.seed is not None else -1, r.digest()) for r in reports
    )
    return sha256_hex(canonical_json({'reports': entries, 'extra': extra or {}}))


def write_bundle(
    out_dir: Union[str, Path],
    reports: Sequence[MetricsReport],
    extra: Optional[Dict[str, Any]] = None,
    report_dir: str = '',
) -> Dict[str, Any]:
    """Write bundle.json; `report_dir` is where the report files sit relative to it"""
    prefix = f'{report_dir}/' if report_dir else ''
    document: Dict[str, Any] = {
        'reports': [
            {
                'name': r.name,
                'seed': r.seed,
                'digest': r.digest(),
                'file': f'{prefix}{slug(r.name)}.json',
            }
            for r in sorted(reports, key=lambda r: r.name)
        ],
        'extra': extra or {},
        'digest': bundle_digest(reports, extra),
    }
    write_json(Path(out_dir) / BUNDLE_NAME, document)
    logger.info(
        'wrote report bundle',
        extra={'reports': len(reports), 'digest': document['digest']},
    )
    return document
