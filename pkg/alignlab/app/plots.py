import logging
import math
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from .utils import PlotError, read_csv

logger = logging.getLogger('alignlab.plots')

WIDTH, HEIGHT = 640, 420
MARGIN = dict(left=70, right=150, top=40, bottom=50)
COLOURS = '#1f77b4', '#d62728', '#2ca02c', '#9467bd', '#ff7f0e'


class SVG:
    def __init__(self, width: int = WIDTH, height: int = HEIGHT):
        self.width = width
        self.height = height
        self.svg = (
            f'<svg version="1.1" width="{width}" height="{height}" viewBox="0 0 {width} {height}" '
            f'xmlns="http://www.w3.org/2000/svg" font-family="sans-serif" font-size="12">\n'
            f'<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>\n'
        )

    def line(self, x1, y1, x2, y2, stroke='black', extra=''):
        self.svg += f'<line x1="{x1:.2f}" y1="{y1:.2f}" x2="{x2:.2f}" y2="{y2:.2f}" stroke="{stroke}" {extra}/>\n'

    def polyline(self, points: Sequence[Tuple[float, float]], stroke, extra=''):
        pts = ' '.join(f'{x:.2f},{y:.2f}' for x, y in points)
        self.svg += f'<polyline points="{pts}" fill="none" stroke="{stroke}" stroke-width="1.5" {extra}/>\n'

    def circle(self, x, y, fill, r=2.5):
        self.svg += f'<circle cx="{x:.2f}" cy="{y:.2f}" r="{r}" fill="{fill}"/>\n'

    def filled_rectangle(self, x1, y1, x2, y2, fill, extra=''):
        self.svg += (
            f'<rect x="{x1:.2f}" y="{y1:.2f}" width="{x2 - x1:.2f}" height="{y2 - y1:.2f}" fill="{fill}" {extra}/>\n'
        )

    def text(self, x, y, string, extra=''):
        string = str(string).replace('&', '&amp;').replace('<', '&lt;')
        self.svg += f'<text x="{x:.2f}" y="{y:.2f}" {extra}>{string}</text>\n'

    def get_svg(self) -> str:
        return f'{self.svg}</svg>\n'


class Axis:
    """
    Maps data values onto pixel range [lo, hi], optionally on a log10 scale.
    """

    def __init__(self, values: Iterable[float], lo: float, hi: float, log: bool = False):
        values = [v for v in values if v is not None and math.isfinite(v) and (v > 0 or not log)]
        if not values:
            raise PlotError('nothing to plot')
        self.log = log
        vmin, vmax = min(values), max(values)
        if log:
            vmin, vmax = math.floor(math.log10(vmin)), math.ceil(math.log10(vmax))
        if vmin == vmax:
            vmin, vmax = vmin - 1 if log else vmin - 0.5, vmax + 1 if log else vmax + 0.5
        self.vmin, self.vmax, self.lo, self.hi = vmin, vmax, lo, hi

    def __call__(self, v: float) -> float:
        v = math.log10(v) if self.log else v
        return self.lo + (v - self.vmin) / (self.vmax - self.vmin) * (self.hi - self.lo)

    def ticks(self) -> List[Tuple[float, str]]:
        if self.log:
            return [(10.0 ** e, f'1e{e}') for e in range(int(self.vmin), int(self.vmax) + 1)]
        return [(float(v), f'{v:.3g}') for v in np.linspace(self.vmin, self.vmax, 5)]

    def usable(self, v: Optional[float]) -> bool:
        return v is not None and math.isfinite(v) and (v > 0 or not self.log)


def _frame(svg: SVG, x: Axis, y: Axis, title: str, xlabel: str, ylabel: str):
    left, right = MARGIN['left'], svg.width - MARGIN['right']
    top, bottom = MARGIN['top'], svg.height - MARGIN['bottom']
    svg.line(left, bottom, right, bottom)
    svg.line(left, top, left, bottom)
    for v, label in x.ticks():
        svg.line(x(v), bottom, x(v), bottom + 4)
        svg.text(x(v), bottom + 18, label, 'text-anchor="middle"')
    for v, label in y.ticks():
        svg.line(left - 4, y(v), left, y(v))
        svg.text(left - 8, y(v) + 4, label, 'text-anchor="end"')
    svg.text((left + right) / 2, 22, title, 'text-anchor="middle" font-size="14"')
    svg.text((left + right) / 2, svg.height - 12, xlabel, 'text-anchor="middle"')
    mid = (top + bottom) / 2
    svg.text(16, mid, ylabel, f'text-anchor="middle" transform="rotate(-90 16 {mid:.2f})"')


def _legend(svg: SVG, names: Sequence[str]):
    x = svg.width - MARGIN['right'] + 12
    for i, name in enumerate(names):
        y = MARGIN['top'] + 12 + 18 * i
        svg.line(x, y, x + 18, y, COLOURS[i % len(COLOURS)], 'stroke-width="2"')
        svg.text(x + 24, y + 4, name)


def line_chart(
    series: Dict[str, List[Tuple[float, float]]],
    *,
    title: str,
    xlabel: str,
    ylabel: str,
    log_x: bool = False,
    log_y: bool = False,
    hlines: Dict[str, float] = None,
) -> str:
    """
    Polylines with markers, one per named series, plus optional horizontal reference lines.
    """
    hlines = hlines or {}
    svg = SVG()
    xs = [p[0] for pts in series.values() for p in pts]
    ys = [p[1] for pts in series.values() for p in pts] + list(hlines.values())
    x = Axis(xs, MARGIN['left'], svg.width - MARGIN['right'], log_x)
    y = Axis(ys, svg.height - MARGIN['bottom'], MARGIN['top'], log_y)
    _frame(svg, x, y, title, xlabel, ylabel)
    names = list(series) + list(hlines)
    for i, (name, points) in enumerate(series.items()):
        colour = COLOURS[i % len(COLOURS)]
        points = [(x(a), y(b)) for a, b in points if x.usable(a) and y.usable(b)]
        if len(points) > 1:
            svg.polyline(points, colour)
        for px, py in points:
            svg.circle(px, py, colour)
    for i, value in enumerate(hlines.values(), start=len(series)):
        if y.usable(value):
            svg.line(x.lo, y(value), x.hi, y(value), COLOURS[i % len(COLOURS)], 'stroke-dasharray="5,4"')
    _legend(svg, names)
    return svg.get_svg()


def bar_chart(edges: Sequence[float], counts: Sequence[int], *, title: str, xlabel: str, ylabel: str) -> str:
    svg = SVG()
    x = Axis(edges, MARGIN['left'], svg.width - MARGIN['right'])
    y = Axis([0] + list(counts), svg.height - MARGIN['bottom'], MARGIN['top'])
    _frame(svg, x, y, title, xlabel, ylabel)
    for lo, hi, count in zip(edges[:-1], edges[1:], counts):
        if count:
            svg.filled_rectangle(x(lo) + 0.5, y(count), x(hi) - 0.5, y(0), COLOURS[0])
    return svg.get_svg()


def _float(v: str) -> Optional[float]:
    try:
        return float(v) if v != '' else None
    except ValueError:
        raise PlotError(f'not a number: {v!r}')


def _column(rows: List[Dict[str, str]], name: str) -> List[Optional[float]]:
    return [_float(r[name]) for r in rows]


def _medians(rows: List[Dict[str, str]], key: str, value: str) -> List[Tuple[float, float]]:
    groups: Dict[float, List[float]] = {}
    for r in rows:
        k, v = _float(r[key]), _float(r[value])
        if k is not None and v is not None and math.isfinite(v):
            groups.setdefault(k, []).append(v)
    return [(k, float(np.median(groups[k]))) for k in sorted(groups)]


def _sweep(rows, name):
    ok = [r for r in rows if r.get('status', 'ok') == 'ok']
    series = {col: _medians(ok, 'n', col) for col in ('train_mse', 'test_mse', 'ols_test_mse')}
    sigma2 = [v for v in _column(ok, 'sigma2') if v]
    return line_chart(
        {k: v for k, v in series.items() if v},
        title=f'{name}: median MSE against n',
        xlabel='n',
        ylabel='MSE',
        log_x=True,
        log_y=True,
        hlines={'noise σ²': sigma2[0]} if sigma2 else None,
    )


def _histogram(rows, name):
    edges = _column(rows, 'bin_lo') + [_float(rows[-1]['bin_hi'])]
    return bar_chart(edges, [int(c) for c in _column(rows, 'count')], title=name, xlabel='|cos|', ylabel='neurons')


def _trajectory(rows, name):
    steps = _column(rows, 'step')
    return line_chart(
        {'train loss': list(zip(steps, _column(rows, 'train_loss')))},
        title=name,
        xlabel='step',
        ylabel='loss',
        log_y=True,
    )


def _concentration(rows, name):
    return line_chart(
        {'median sup deviation': _medians(rows, 'n', 'sup_dev')},
        title=name,
        xlabel='n',
        ylabel='sup deviation',
        log_x=True,
        log_y=True,
    )


def plot_kind(header: Sequence[str]) -> str:
    header = set(header)
    if {'bin_lo', 'bin_hi', 'count'} <= header:
        return 'histogram'
    if {'step', 'lr', 'train_loss'} <= header:
        return 'trajectory'
    if {'n', 'sup_dev'} <= header:
        return 'concentration'
    if {'n', 'seed', 'train_mse', 'test_mse'} <= header:
        return 'sweep'
    raise PlotError(f'unrecognised csv columns: {", ".join(sorted(header))}')


PLOTTERS = dict(sweep=_sweep, histogram=_histogram, trajectory=_trajectory, concentration=_concentration)


def render(path: Union[str, Path]) -> str:
    path = Path(path)
    if not path.exists():
        raise PlotError(f'{path} does not exist')
    rows = read_csv(path)
    if not rows:
        raise PlotError(f'{path} has no rows')
    try:
        return PLOTTERS[plot_kind(rows[0].keys())](rows, path.stem)
    except KeyError as e:
        raise PlotError(f'{path} is missing column {e}') from e


def emit_plots(csv_paths: Iterable[Union[str, Path]], out_dir: Union[str, Path] = None) -> List[Path]:
    """
    Write one standalone svg per csv, next to the csv unless `out_dir` is given.
    """
    written = []
    for csv_path in csv_paths:
        csv_path = Path(csv_path)
        svg = render(csv_path)
        target = (Path(out_dir) if out_dir else csv_path.parent) / f'{csv_path.stem}.svg'
        target.parent.mkdir(parents=True, exist_ok=True)
        target.write_text(svg)
        logger.info('plotted %s -> %s', csv_path, target)
        written.append(target)
    return written
