"""Reference metrics and the robustness protocol over per-image score tables."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from typing import Iterable, Sequence
from xml.sax.saxutils import escape

import numpy as np

LUMA = np.array([0.299, 0.587, 0.114])

# metrics reported on a 0-100 scale are divided by 100 before averaging
DEFAULT_METRIC_SCALE = {"musiq": 0.01}


def _as_array(x) -> np.ndarray:
    if hasattr(x, "detach"):
        x = x.detach().cpu().numpy()
    return np.asarray(x, dtype=np.float64)


def luma(image) -> np.ndarray:
    """BT.601 full-range Y of an ``(H, W, 3)`` image; 2-D input is returned as is."""
    a = _as_array(image)
    if a.ndim == 2:
        return a
    if a.ndim != 3 or a.shape[-1] != 3:
        raise ValueError(f"expected (H, W, 3) or (H, W), got {a.shape}")
    return a @ LUMA


def psnr(a, b, max_val: float = 1.0) -> float:
    """PSNR in dB on the Y channel; identical inputs give ``inf``."""
    a, b = _as_array(a), _as_array(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    if max_val <= 0:
        raise ValueError("max_val must be positive")
    mse = float(np.mean((luma(a) - luma(b)) ** 2))
    if mse == 0:
        return math.inf
    return 10.0 * math.log10(max_val**2 / mse)


def _gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    t = np.arange(size) - (size - 1) / 2
    g = np.exp(-(t**2) / (2 * sigma**2))
    return g / g.sum()


def _filter_valid(x: np.ndarray, g: np.ndarray) -> np.ndarray:
    n = len(g)
    x = np.lib.stride_tricks.sliding_window_view(x, n, axis=0) @ g
    return np.lib.stride_tricks.sliding_window_view(x, n, axis=1) @ g


def ssim(a, b, max_val: float = 1.0) -> float:
    """Mean single-scale SSIM of the Y channels over the valid 11x11 Gaussian-window region."""
    ya, yb = luma(a), luma(b)
    if ya.shape != yb.shape:
        raise ValueError(f"shape mismatch {ya.shape} vs {yb.shape}")
    if min(ya.shape) < 11:
        raise ValueError("SSIM needs images of side >= 11")
    g = _gaussian_window()
    c1, c2 = (0.01 * max_val) ** 2, (0.03 * max_val) ** 2
    mu_a, mu_b = _filter_valid(ya, g), _filter_valid(yb, g)
    var_a = _filter_valid(ya * ya, g) - mu_a**2
    var_b = _filter_valid(yb * yb, g) - mu_b**2
    cov = _filter_valid(ya * yb, g) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


@dataclass(frozen=True)
class ScoreRow:
    image_id: str
    dataset: str
    metric: str
    score: float


SCORE_HEADER = ["image_id", "dataset", "metric", "score"]


class ScoreTable:
    def __init__(self, rows: Iterable[ScoreRow] = ()):
        self._rows: dict[tuple[str, str, str], float] = {}
        for r in rows:
            self.add(r.image_id, r.dataset, r.metric, r.score)

    def add(self, image_id: str, dataset: str, metric: str, score: float) -> None:
        score = float(score)
        if not math.isfinite(score):
            raise ValueError(f"non-finite score for {image_id}/{dataset}/{metric}")
        key = (image_id, dataset, metric)
        if key in self._rows:
            raise ValueError(f"duplicate score row {key}")
        self._rows[key] = score

    def __len__(self) -> int:
        return len(self._rows)

    def rows(self) -> list[ScoreRow]:
        return [ScoreRow(*k, v) for k, v in sorted(self._rows.items())]

    def datasets(self) -> list[str]:
        return sorted({k[1] for k in self._rows})

    def metrics(self, dataset: str | None = None) -> list[str]:
        return sorted({k[2] for k in self._rows if dataset is None or k[1] == dataset})

    def images(self, dataset: str) -> list[str]:
        return sorted({k[0] for k in self._rows if k[1] == dataset})

    def score(self, image_id: str, dataset: str, metric: str) -> float:
        try:
            return self._rows[(image_id, dataset, metric)]
        except KeyError:
            raise KeyError(f"no {metric!r} score for image {image_id!r} in {dataset!r}") from None

    def scores(self, dataset: str, metric: str) -> list[float]:
        return [v for (i, ds, m), v in sorted(self._rows.items()) if ds == dataset and m == metric]

    @classmethod
    def from_csv(cls, text: str) -> "ScoreTable":
        reader = csv.reader(io.StringIO(text))
        header = next(reader, None)
        if header != SCORE_HEADER:
            raise ValueError(f"score CSV header must be {','.join(SCORE_HEADER)}")
        table = cls()
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 4:
                raise ValueError(f"line {lineno}: expected 4 fields, got {len(row)}")
            try:
                score = float(row[3])
            except ValueError:
                raise ValueError(f"line {lineno}: bad score {row[3]!r}") from None
            table.add(row[0], row[1], row[2], score)
        return table

    def to_csv(self) -> str:
        return _csv([SCORE_HEADER] + [[r.image_id, r.dataset, r.metric, repr(r.score)] for r in self.rows()])


def _csv(rows: Sequence[Sequence]) -> str:
    buf = io.StringIO()
    csv.writer(buf, lineterminator="\n").writerows(rows)
    return buf.getvalue()


@dataclass(frozen=True)
class FailureCounts:
    deficient: int
    poor: int
    collapse: int
    mu_g: float
    n: int


def failure_counts(scores: Sequence[float]) -> FailureCounts:
    """Count scores strictly below ``mu``, ``0.9 mu`` and ``0.8 mu`` where ``mu`` is their mean.

    The thresholds presume a positive-valued metric; a negative mean is rejected.
    """
    x = np.asarray(scores, dtype=np.float64)
    if x.size == 0:
        raise ValueError("no scores")
    if not np.all(np.isfinite(x)):
        raise ValueError("scores must be finite")
    # correctly rounded mean, kept inside the data range so equal scores never count
    mu = min(max(math.fsum(x.tolist()) / x.size, float(x.min())), float(x.max()))
    if mu < 0:
        raise ValueError(f"mean score {mu} is negative; failure levels assume a positive metric")
    return FailureCounts(
        deficient=int(np.sum(x < mu)),
        poor=int(np.sum(x < 0.9 * mu)),
        collapse=int(np.sum(x < 0.8 * mu)),
        mu_g=mu,
        n=int(x.size),
    )


def averaged_scores(
    table: ScoreTable, dataset: str, metrics: Sequence[str], scale: dict[str, float] | None = None
) -> dict[str, float]:
    """Per-image mean of ``metrics`` after per-metric scaling."""
    if not metrics:
        raise ValueError("no metrics given")
    scale = DEFAULT_METRIC_SCALE if scale is None else scale
    images = table.images(dataset)
    if not images:
        raise ValueError(f"no images in dataset {dataset!r}")
    return {
        img: sum(table.score(img, dataset, m) * scale.get(m.lower(), 1.0) for m in metrics) / len(metrics)
        for img in images
    }


def sorted_curve(
    table: ScoreTable, dataset: str, metrics: Sequence[str], scale: dict[str, float] | None = None
) -> list[tuple[int, str, float]]:
    """Rows ``(rank, image_id, avg_score)`` by descending score, ties broken by image id."""
    avg = averaged_scores(table, dataset, metrics, scale)
    ordered = sorted(avg.items(), key=lambda kv: (-kv[1], kv[0]))
    return [(rank, img, s) for rank, (img, s) in enumerate(ordered, start=1)]


def curve_csv(rows: Sequence[tuple[int, str, float]]) -> str:
    return _csv([["rank", "image_id", "avg_score"]] + [[r, i, repr(s)] for r, i, s in rows])


def variance_report(table: ScoreTable, dataset: str, metric: str) -> tuple[float, float]:
    """``(mean, population variance)`` of one metric over a dataset."""
    x = np.asarray(table.scores(dataset, metric), dtype=np.float64)
    if x.size == 0:
        raise ValueError(f"no {metric!r} scores in dataset {dataset!r}")
    mean = float(np.mean(x))
    return mean, float(np.mean((x - mean) ** 2))


FAILURE_HEADER = ["dataset", "metric_set", "mu_g", "n", "deficient", "poor", "collapse"]


def failure_report(
    table: ScoreTable,
    metrics: Sequence[str],
    datasets: Sequence[str] | None = None,
    scale: dict[str, float] | None = None,
) -> str:
    """Failure-report CSV; multi-metric sets are averaged per image first."""
    rows = [FAILURE_HEADER]
    for ds in datasets or table.datasets():
        fc = failure_counts(list(averaged_scores(table, ds, metrics, scale).values()))
        rows.append([ds, "+".join(metrics), repr(fc.mu_g), fc.n, fc.deficient, fc.poor, fc.collapse])
    return _csv(rows)


def curve_svg(curves: dict[str, Sequence[tuple[int, str, float]]], width: int = 480, height: int = 320) -> str:
    """Minimal SVG line chart of sorted curves, one polyline per label."""
    pad = 40
    colors = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"]
    ys = [s for rows in curves.values() for _, _, s in rows]
    n = max((len(rows) for rows in curves.values()), default=1)
    lo, hi = (min(ys), max(ys)) if ys else (0.0, 1.0)
    if hi == lo:
        hi = lo + 1.0

    def px(rank, s):
        x = pad + (rank - 1) / max(n - 1, 1) * (width - 2 * pad)
        y = height - pad - (s - lo) / (hi - lo) * (height - 2 * pad)
        return f"{x:.2f},{y:.2f}"

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<line x1="{pad}" y1="{height - pad}" x2="{width - pad}" y2="{height - pad}" stroke="black"/>',
        f'<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{height - pad}" stroke="black"/>',
        f'<text x="{pad}" y="{pad - 8}" font-size="11">{hi:.3g}</text>',
        f'<text x="{pad}" y="{height - pad + 14}" font-size="11">{lo:.3g}</text>',
    ]
    for i, (label, rows) in enumerate(sorted(curves.items())):
        c = colors[i % len(colors)]
        pts = " ".join(px(r, s) for r, _, s in rows)
        out.append(f'<polyline fill="none" stroke="{c}" points="{pts}"/>')
        out.append(f'<text x="{width - pad - 80}" y="{pad + 14 * i}" font-size="11" fill="{c}">{escape(label)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"
