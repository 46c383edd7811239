"""Coverage, bias and figure generation from persisted study records.

Coverage follows the strict-inequality convention: a replication covers the
truth only when ``lower < truth < upper``.  Failed fits are excluded from
every aggregate and counted separately.  Boxplot figures are emitted as
deterministic SVG documents (geometry constants frozen in one style record)
so they can be golden-tested byte for byte; matplotlib renderings of the
same figures are produced alongside by :mod:`melsmlab.figures`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.stats import norm, t as student_t

from .harness import StudyRecord
from .rng import stream
from .simgen import psd_factor


class ReportError(ValueError):
    pass


# --- coverage and summaries ----------------------------------------------------


def coverage(records: list[StudyRecord], level: float = 0.95) -> float:
    """Percent of non-failed replications whose interval strictly covers truth."""
    live = [r for r in records if r.flag != "failed"]
    if not live:
        raise ReportError("no non-failed records to compute coverage from")
    hits = sum(1 for r in live if r.lower < r.truth < r.upper)
    return 100.0 * hits / len(live)


@dataclass
class CoverageRow:
    practice: str
    scenario: str
    model: str
    estimand: str
    coverage: float
    mean: float
    bias: float
    sd: float | None
    n: int
    n_excluded: int


@dataclass
class CoverageTable:
    rows: list[CoverageRow]

    def to_csv_text(self) -> str:
        lines = ["practice,scenario,model,estimand,coverage,mean,bias,sd,n,n_excluded"]
        for r in self.rows:
            sd = "" if r.sd is None else repr(r.sd)
            lines.append(
                f"{r.practice},{r.scenario},{r.model},{r.estimand},"
                f"{r.coverage!r},{r.mean!r},{r.bias!r},{sd},{r.n},{r.n_excluded}"
            )
        return "\n".join(lines) + "\n"

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_csv_text(), encoding="utf-8")


def summarize(records: list[StudyRecord], level: float = 0.95) -> CoverageTable:
    """Per-(scenario, model, estimand) coverage, mean estimate, bias and spread."""
    groups: dict[tuple[str, str, str, str], list[StudyRecord]] = {}
    order: list[tuple[str, str, str, str]] = []
    for rec in records:
        key = (rec.practice, rec.scenario, rec.model, rec.estimand)
        if key not in groups:
            groups[key] = []
            order.append(key)
        groups[key].append(rec)

    rows = []
    for key in order:
        group = groups[key]
        live = [r for r in group if r.flag != "failed"]
        excluded = len(group) - len(live)
        if not live:
            continue
        estimates = np.array([r.estimate for r in live])
        truth = live[0].truth
        rows.append(
            CoverageRow(
                practice=key[0], scenario=key[1], model=key[2], estimand=key[3],
                coverage=coverage(live, level),
                mean=float(estimates.mean()),
                bias=float(estimates.mean() - truth) if truth is not None else math.nan,
                sd=float(estimates.std(ddof=1)) if len(estimates) > 1 else None,
                n=len(live),
                n_excluded=excluded,
            )
        )
    return CoverageTable(rows=rows)


# --- deterministic SVG boxplots --------------------------------------------------


@dataclass(frozen=True)
class BoxplotStyle:
    width: float = 720.0
    row_height: float = 34.0
    box_height: float = 16.0
    margin_left: float = 190.0
    margin_right: float = 86.0
    margin_top: float = 30.0
    margin_bottom: float = 44.0
    font_size: float = 11.0
    tick_count: int = 5
    truth_color: str = "#cc0000"
    box_fill: str = "#9ecae1"
    box_stroke: str = "#31708f"


DEFAULT_STYLE = BoxplotStyle()


@dataclass
class BoxGroup:
    label: str
    estimates: np.ndarray
    coverage_percent: float | None = None


def box_stats(values: np.ndarray) -> dict:
    """Median, quartile box, 1.5*IQR whiskers and outliers (type-7 quantiles)."""
    values = np.asarray(values, dtype=float)
    if values.size == 0:
        raise ReportError("cannot compute box statistics of an empty group")
    q1, med, q3 = np.quantile(values, [0.25, 0.5, 0.75])
    iqr = q3 - q1
    in_lo = values[values >= q1 - 1.5 * iqr]
    in_hi = values[values <= q3 + 1.5 * iqr]
    lo = float(in_lo.min()) if in_lo.size else float(q1)
    hi = float(in_hi.max()) if in_hi.size else float(q3)
    outliers = values[(values < lo) | (values > hi)]
    return {
        "q1": float(q1), "median": float(med), "q3": float(q3),
        "whisker_low": lo, "whisker_high": hi,
        "outliers": [float(v) for v in outliers],
    }


def _nice_ticks(lo: float, hi: float, count: int) -> list[float]:
    if hi <= lo:
        return [lo]
    raw = (hi - lo) / max(count - 1, 1)
    mag = 10.0 ** math.floor(math.log10(raw))
    for mult in (1.0, 2.0, 2.5, 5.0, 10.0):
        step = mult * mag
        if step >= raw:
            break
    first = math.ceil(lo / step) * step
    ticks = []
    v = first
    while v <= hi + 1e-9 * step:
        ticks.append(round(v, 10))
        v += step
    return ticks


def _fmt(x: float) -> str:
    return f"{x:.2f}"


def boxplot_svg(groups: list[BoxGroup], truth: float | None,
                title: str = "", style: BoxplotStyle = DEFAULT_STYLE) -> str:
    """Horizontal boxplots, one per group, with a red line at the truth and the
    coverage percentage rendered beside each box."""
    if not groups:
        raise ReportError("at least one group is required")
    values = np.concatenate([np.asarray(g.estimates, dtype=float) for g in groups])
    lo = float(values.min())
    hi = float(values.max())
    if truth is not None:
        lo = min(lo, truth)
        hi = max(hi, truth)
    if hi - lo <= 0:
        lo, hi = lo - 1.0, hi + 1.0
    pad = 0.05 * (hi - lo)
    lo -= pad
    hi += pad

    plot_w = style.width - style.margin_left - style.margin_right
    height = style.margin_top + style.row_height * len(groups) + style.margin_bottom
    plot_bottom = style.margin_top + style.row_height * len(groups)

    def xmap(v: float) -> float:
        return style.margin_left + (v - lo) / (hi - lo) * plot_w

    fs = style.font_size
    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{_fmt(style.width)}" '
        f'height="{_fmt(height)}" viewBox="0 0 {_fmt(style.width)} {_fmt(height)}">',
        f'<rect x="0" y="0" width="{_fmt(style.width)}" height="{_fmt(height)}" fill="white"/>',
    ]
    if title:
        out.append(
            f'<text x="{_fmt(style.width / 2)}" y="{_fmt(fs + 6)}" text-anchor="middle" '
            f'font-size="{_fmt(fs + 1)}" font-family="sans-serif">{_escape(title)}</text>'
        )

    for tick in _nice_ticks(lo, hi, style.tick_count):
        x = xmap(tick)
        out.append(
            f'<line x1="{_fmt(x)}" y1="{_fmt(style.margin_top)}" x2="{_fmt(x)}" '
            f'y2="{_fmt(plot_bottom)}" stroke="#dddddd" stroke-width="1"/>'
        )
        out.append(
            f'<text x="{_fmt(x)}" y="{_fmt(plot_bottom + fs + 6)}" text-anchor="middle" '
            f'font-size="{_fmt(fs)}" font-family="sans-serif">{tick:g}</text>'
        )

    for gi, group in enumerate(groups):
        cy = style.margin_top + style.row_height * (gi + 0.5)
        st = box_stats(group.estimates)
        half = style.box_height / 2.0
        x_q1, x_q3 = xmap(st["q1"]), xmap(st["q3"])
        x_med = xmap(st["median"])
        x_lo, x_hi = xmap(st["whisker_low"]), xmap(st["whisker_high"])
        stroke = style.box_stroke
        out.append(
            f'<line x1="{_fmt(x_lo)}" y1="{_fmt(cy)}" x2="{_fmt(x_q1)}" y2="{_fmt(cy)}" '
            f'stroke="{stroke}" stroke-width="1"/>'
        )
        out.append(
            f'<line x1="{_fmt(x_q3)}" y1="{_fmt(cy)}" x2="{_fmt(x_hi)}" y2="{_fmt(cy)}" '
            f'stroke="{stroke}" stroke-width="1"/>'
        )
        for x_cap in (x_lo, x_hi):
            out.append(
                f'<line x1="{_fmt(x_cap)}" y1="{_fmt(cy - half / 2)}" x2="{_fmt(x_cap)}" '
                f'y2="{_fmt(cy + half / 2)}" stroke="{stroke}" stroke-width="1"/>'
            )
        out.append(
            f'<rect x="{_fmt(x_q1)}" y="{_fmt(cy - half)}" width="{_fmt(x_q3 - x_q1)}" '
            f'height="{_fmt(style.box_height)}" fill="{style.box_fill}" '
            f'stroke="{stroke}" stroke-width="1"/>'
        )
        out.append(
            f'<line x1="{_fmt(x_med)}" y1="{_fmt(cy - half)}" x2="{_fmt(x_med)}" '
            f'y2="{_fmt(cy + half)}" stroke="{stroke}" stroke-width="2"/>'
        )
        for v in st["outliers"]:
            out.append(
                f'<circle cx="{_fmt(xmap(v))}" cy="{_fmt(cy)}" r="2.00" '
                f'fill="none" stroke="{stroke}" stroke-width="1"/>'
            )
        out.append(
            f'<text x="{_fmt(style.margin_left - 8)}" y="{_fmt(cy + fs / 3)}" '
            f'text-anchor="end" font-size="{_fmt(fs)}" font-family="sans-serif">'
            f'{_escape(group.label)}</text>'
        )
        if group.coverage_percent is not None:
            out.append(
                f'<text x="{_fmt(style.width - style.margin_right + 8)}" '
                f'y="{_fmt(cy + fs / 3)}" text-anchor="start" font-size="{_fmt(fs)}" '
                f'font-family="sans-serif">{group.coverage_percent:.0f}%</text>'
            )

    if truth is not None:
        x_t = xmap(truth)
        out.append(
            f'<line x1="{_fmt(x_t)}" y1="{_fmt(style.margin_top)}" x2="{_fmt(x_t)}" '
            f'y2="{_fmt(plot_bottom)}" stroke="{style.truth_color}" stroke-width="1.5"/>'
        )
    out.append("</svg>")
    return "\n".join(out) + "\n"


def _escape(text: str) -> str:
    return text.replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;")


def figure_groups(records: list[StudyRecord], estimand: str) -> tuple[list[BoxGroup], float | None]:
    """Per-(model, scenario) estimate groups for one estimand, plus the truth."""
    keyed: dict[tuple[str, str], list[StudyRecord]] = {}
    order: list[tuple[str, str]] = []
    for rec in records:
        if rec.estimand != estimand or rec.flag == "failed":
            continue
        key = (rec.model, rec.scenario)
        if key not in keyed:
            keyed[key] = []
            order.append(key)
        keyed[key].append(rec)
    scenarios = {key[1] for key in order}
    groups = []
    truth = None
    for key in order:
        recs = keyed[key]
        label = key[0] if len(scenarios) == 1 else f"{key[0]} {key[1]}"
        cov = coverage(recs) if all(r.truth is not None for r in recs) else None
        groups.append(
            BoxGroup(
                label=label,
                estimates=np.array([r.estimate for r in recs]),
                coverage_percent=cov,
            )
        )
        if truth is None and recs[0].truth is not None:
            truth = recs[0].truth
    return groups, truth


# --- variance-inflation identity -------------------------------------------------


def inflation_analytic(delta: np.ndarray, cov: np.ndarray) -> float:
    """Quadratic form delta' Sigma delta: the residual-variance inflation a
    location bias delta induces."""
    delta = np.asarray(delta, dtype=float)
    cov = np.asarray(cov, dtype=float)
    if cov.shape != (delta.size, delta.size):
        raise ValueError(
            f"dimension mismatch: delta has {delta.size} entries, covariance is {cov.shape}"
        )
    return float(delta @ cov @ delta)


def inflation_monte_carlo(delta: np.ndarray, cov: np.ndarray, omega: float,
                          n_draws: int = 1_000_000, seed: int = 0) -> float:
    """Brute-force check of the inflation identity: the sample variance of
    eps - delta'X with X ~ MVN(0, cov) and eps ~ N(0, omega^2)."""
    if n_draws < 10_000:
        raise ValueError("n_draws must be at least 10^4")
    delta = np.asarray(delta, dtype=float)
    cov = np.asarray(cov, dtype=float)
    rng = stream(seed, "inflation")
    factor = psd_factor(cov)
    x = rng.standard_normal((n_draws, delta.size)) @ factor.T
    eps = omega * rng.standard_normal(n_draws)
    resid = eps - x @ delta
    return float(np.var(resid, ddof=1))


def kolmogorov_distance_gaussian_vs_student(sd_gaussian: float, df: float,
                                            scale: float) -> float:
    """Sup-distance between N(0, sd) and a scaled Student-t CDF on a fine grid."""
    span = 12.0 * max(sd_gaussian, scale)
    grid = np.linspace(-span, span, 40001)
    gauss = norm.cdf(grid, scale=sd_gaussian)
    stud = student_t.cdf(grid / scale, df)
    return float(np.max(np.abs(gauss - stud)))
