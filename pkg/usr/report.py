"""
CSV and SVG emission of evaluation reports, plus console tables
"""
import csv
import io
from os import makedirs
from os.path import dirname

from tabulate import tabulate

from usr.errors import DataError, ParameterError
from usr.eval import QualityReport, StabilityReport, ClusterReport, AblationRow

QUALITY_HEADER = ('image', 'psnr_db', 'ssim')
STABILITY_HEADER = ('image', 'instability', 'dims')
CLUSTER_HEADER = ('index', 'label', 'pc1', 'pc2', 'silhouette_overall')
ABLATION_HEADER = ('variant', 'n_vddc', 'psnr_db', 'ssim')

SVG_WIDTH = 640
SVG_HEIGHT = 480
SVG_MARGIN = 40
PALETTE = ('#1f77b4', '#d62728', '#2ca02c')


def _num(x: float) -> str:
    return repr(float(x))


def report_rows(report) -> tuple[tuple[str, ...], list[list]]:
    if isinstance(report, QualityReport):
        return QUALITY_HEADER, [[r.image, _num(r.psnr_db), _num(r.ssim)] for r in report.rows]
    if isinstance(report, StabilityReport):
        return STABILITY_HEADER, [[i.image, _num(i.instability), i.dims] for i in report.images]
    if isinstance(report, ClusterReport):
        return CLUSTER_HEADER, [[i, label, _num(report.coords[i, 0]), _num(report.coords[i, 1]),
                                 _num(report.silhouette)] for i, label in enumerate(report.labels)]
    if isinstance(report, list) and all(isinstance(r, AblationRow) for r in report):
        return ABLATION_HEADER, [[r.variant, r.n_vddc, _num(r.psnr_db), _num(r.ssim)] for r in report]
    raise ParameterError(f'no tabular form for {type(report).__name__}')


def to_csv(report) -> str:
    header, rows = report_rows(report)
    out = io.StringIO()
    writer = csv.writer(out, lineterminator='\n')
    writer.writerow(header)
    writer.writerows(rows)
    return out.getvalue()


def to_svg(report: ClusterReport) -> str:
    """
    Scatter of the PCA coordinates, one circle per sample, colour by label
    """
    if not isinstance(report, ClusterReport):
        raise ParameterError('only cluster reports have an SVG form')
    labels = sorted(set(report.labels))
    colors = {label: PALETTE[i % len(PALETTE)] for i, label in enumerate(labels)}
    xs, ys = report.coords[:, 0], report.coords[:, 1]

    def scale(values, size):
        low, high = float(values.min()), float(values.max())
        span = high - low if high > low else 1.0
        return [SVG_MARGIN + (v - low) / span * (size - 2 * SVG_MARGIN) for v in values]

    px, py = scale(xs, SVG_WIDTH), scale(ys, SVG_HEIGHT)
    lines = [
        '<?xml version="1.0" encoding="UTF-8"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{SVG_WIDTH}" height="{SVG_HEIGHT}" '
        f'viewBox="0 0 {SVG_WIDTH} {SVG_HEIGHT}">',
        f'<rect x="0" y="0" width="{SVG_WIDTH}" height="{SVG_HEIGHT}" fill="#ffffff"/>',
        f'<text x="{SVG_MARGIN}" y="24" font-family="sans-serif" font-size="14">'
        f'silhouette {report.silhouette:.4f}</text>',
    ]
    for i, label in enumerate(labels):
        lines.append(f'<text x="{SVG_WIDTH - 120}" y="{24 + 16 * i}" font-family="sans-serif" font-size="12" '
                     f'fill="{colors[label]}">{label}</text>')
    for x, y, label in zip(px, py, report.labels):
        # svg y grows downwards
        lines.append(f'<circle cx="{x:.3f}" cy="{SVG_HEIGHT - y:.3f}" r="4" fill="{colors[label]}"/>')
    lines.append('</svg>')
    return '\n'.join(lines) + '\n'


def emit_report(report, path: str, fmt: str = 'csv'):
    if fmt == 'csv':
        contents = to_csv(report)
    elif fmt == 'svg':
        contents = to_svg(report)
    else:
        raise ParameterError(f'unknown report format "{fmt}", expected csv or svg')
    folder = dirname(path)
    try:
        if folder:
            makedirs(folder, exist_ok=True)
        with open(path, 'w', newline='') as fp:
            fp.write(contents)
    except OSError as e:
        raise DataError(f'cannot write report "{path}": {e.strerror}')


def format_table(report, floatfmt: str = '.4f') -> str:
    header, rows = report_rows(report)
    rows = [[float(c) if isinstance(c, str) and c[:1] in '-0123456789' and k > 0 else c
             for k, c in enumerate(row)] for row in rows]
    return tabulate(rows, headers=header, floatfmt=floatfmt)


def format_quality(report: QualityReport) -> str:
    """
    Network vs bicubic means, then the per-mode breakdown
    """
    summary = [['network', report.mean_psnr, report.mean_ssim]]
    if report.baseline:
        summary.append(['bicubic', report.baseline_psnr,
                        sum(r.ssim for r in report.baseline) / len(report.baseline)])
    modes = [[m, p, s, n] for m, (p, s, n) in report.by_mode().items()]
    return '\n\n'.join([
        tabulate(summary, headers=['method', 'psnr_db', 'ssim'], floatfmt='.4f'),
        tabulate(modes, headers=['mode', 'psnr_db', 'ssim', 'images'], floatfmt='.4f'),
    ])
