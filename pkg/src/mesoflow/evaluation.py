"""Metrics and the three experiment protocols.

Metrics operate on de-normalized physical units; the PSNR peak is the
band's dynamic-range width recorded in the dataset metadata, so absolute
values are stable across samples (results files record this choice).
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ContractError, GridRangeError
from .imagery import BandInfo, FrameSequence
from .networks import InterpolationModel
from .warpcore import linear_interpolate

log = logging.getLogger(__name__)

#: Published full-scale reference results (band 13, t=0.5) for annotating
#: desk-scale comparisons; not reproducible without the full training corpus.
REFERENCE_FULL_SCALE = {"band": 13, "linear_psnr_db": 38.667, "ssm_t_psnr_db": 45.439}

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def rmse(pred, truth) -> float:
    """Root mean squared error in the inputs' units."""
    p = np.asarray(pred, dtype=np.float64)
    y = np.asarray(truth, dtype=np.float64)
    if p.shape != y.shape:
        raise ContractError(f"shape mismatch: {p.shape} vs {y.shape}")
    return float(np.sqrt(np.mean((p - y) ** 2)))


def psnr(pred, truth, value_range: float) -> float:
    """20*log10(range / rmse) in dB; +inf sentinel for exact matches."""
    if value_range <= 0:
        raise ContractError(f"value range must be > 0, got {value_range}")
    err = rmse(pred, truth)
    if err == 0.0:
        return math.inf
    return 20.0 * math.log10(value_range / err)


def _gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    half = size // 2
    xs = np.arange(-half, half + 1, dtype=np.float64)
    g = np.exp(-(xs**2) / (2 * sigma**2))
    k = np.outer(g, g)
    return k / k.sum()


def _local_means(img: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Valid-mode weighted local means via a sliding window."""
    win = np.lib.stride_tricks.sliding_window_view(img, kernel.shape)
    return np.tensordot(win, kernel, axes=((2, 3), (0, 1)))


def ssim(pred, truth, value_range: float) -> float:
    """Mean local structural similarity (11x11 Gaussian window, sigma 1.5)."""
    if value_range <= 0:
        raise ContractError(f"value range must be > 0, got {value_range}")
    x = np.asarray(pred, dtype=np.float64)
    y = np.asarray(truth, dtype=np.float64)
    if x.shape != y.shape:
        raise ContractError(f"shape mismatch: {x.shape} vs {y.shape}")
    if min(x.shape) < SSIM_WINDOW:
        raise ContractError(f"image smaller than the {SSIM_WINDOW}px ssim window")
    kernel = _gaussian_window()
    mu_x = _local_means(x, kernel)
    mu_y = _local_means(y, kernel)
    xx = _local_means(x * x, kernel) - mu_x**2
    yy = _local_means(y * y, kernel) - mu_y**2
    xy = _local_means(x * y, kernel) - mu_x * mu_y
    c1 = (SSIM_K1 * value_range) ** 2
    c2 = (SSIM_K2 * value_range) ** 2
    num = (2 * mu_x * mu_y + c1) * (2 * xy + c2)
    den = (mu_x**2 + mu_y**2 + c1) * (xx + yy + c2)
    return float(np.mean(num / den))


@dataclass(frozen=True)
class MetricsRecord:
    model_name: str
    band_id: int
    t: float
    gap_minutes: float
    psnr_db: float
    rmse: float
    ssim: float
    n_samples: int = 1

    def __post_init__(self):
        if self.rmse < 0:
            raise ContractError("rmse must be >= 0")
        if not -1.0 <= self.ssim <= 1.0 + 1e-12:
            raise ContractError(f"ssim outside [-1, 1]: {self.ssim}")


@dataclass(frozen=True)
class SweepResult:
    axis: str  # "t" or "gap"
    points: tuple[tuple[float, MetricsRecord], ...]
    sample_count: int

    def __post_init__(self):
        if self.axis not in ("t", "gap"):
            raise ContractError(f"axis must be 't' or 'gap', got {self.axis!r}")
        values = [v for v, _ in self.points]
        if any(b <= a for a, b in zip(values, values[1:])):
            raise ContractError("sweep axis values must be strictly increasing")


# ---------------------------------------------------------------------------
# Predictors
# ---------------------------------------------------------------------------


class LinearPredictor:
    """Time-weighted blend of the two inputs; the classic baseline."""

    name = "linear"

    def applicable(self, band_id: int) -> bool:
        return True

    def predict(self, i0: np.ndarray, i1: np.ndarray, t: float) -> np.ndarray:
        return linear_interpolate(i0, i1, t)


class NetworkPredictor:
    """Wraps a trained model; applies only to its band scope."""

    def __init__(self, model: InterpolationModel, name: str | None = None):
        self.model = model
        self.name = name or model.spec.name

    def applicable(self, band_id: int) -> bool:
        scope = self.model.spec.band_scope
        return scope == "all" or scope == band_id

    def predict(self, i0: np.ndarray, i1: np.ndarray, t: float) -> np.ndarray:
        return self.model.interpolate(i0, i1, t)


@dataclass(frozen=True)
class EvalSample:
    """A frame pair with ground-truth intermediates keyed by t."""

    band: BandInfo
    i0: np.ndarray
    i1: np.ndarray
    truths: dict
    gap_minutes: float

    def truth_at(self, t: float, tol: float = 1e-6):
        for key, frame in self.truths.items():
            if abs(key - t) <= tol:
                return frame
        return None


def samples_from_sequences(
    seqs: list[FrameSequence], gap_steps: int, stride: int | None = None
) -> list[EvalSample]:
    """Slice sequences into evaluation samples with all interior truths."""
    if gap_steps < 2:
        raise ContractError("gap_steps must be >= 2")
    stride = stride or gap_steps
    samples = []
    for seq in seqs:
        px = seq.pixel_stack()
        gap_min = gap_steps * seq.cadence_s / 60.0
        for start in range(0, len(seq) - gap_steps, stride):
            truths = {j / gap_steps: px[start + j] for j in range(1, gap_steps)}
            samples.append(
                EvalSample(
                    band=seq.band,
                    i0=px[start],
                    i1=px[start + gap_steps],
                    truths=truths,
                    gap_minutes=gap_min,
                )
            )
    return samples


def _mean_record(name, band_id, t, gap_minutes, rows) -> MetricsRecord:
    return MetricsRecord(
        model_name=name,
        band_id=band_id,
        t=t,
        gap_minutes=gap_minutes,
        psnr_db=float(np.mean([r[0] for r in rows])),
        rmse=float(np.mean([r[1] for r in rows])),
        ssim=float(np.mean([r[2] for r in rows])),
        n_samples=len(rows),
    )


def _measure(predictor, sample: EvalSample, t: float):
    truth = sample.truth_at(t)
    if truth is None:
        return None
    pred = predictor.predict(sample.i0, sample.i1, t)
    width = sample.band.range_width
    return psnr(pred, truth, width), rmse(pred, truth), ssim(pred, truth, width)


def compare_models(predictors, samples: list[EvalSample], t: float = 0.5) -> list[MetricsRecord]:
    """Per band x model metrics averaged over samples at one t.

    The linear baseline is always included.  Models that do not apply to a
    band are skipped with a warning.
    """
    if not samples:
        raise ContractError("no evaluation samples")
    preds = list(predictors)
    if not any(p.name == "linear" for p in preds):
        preds.insert(0, LinearPredictor())
    by_band: dict[int, list[EvalSample]] = {}
    for s in samples:
        by_band.setdefault(s.band.band_id, []).append(s)

    records = []
    for band_id in sorted(by_band):
        for p in preds:
            if not p.applicable(band_id):
                log.warning("model %s does not apply to band %d; skipped", p.name, band_id)
                continue
            rows = []
            for s in by_band[band_id]:
                m = _measure(p, s, t)
                if m is None:
                    log.warning("sample without truth at t=%g skipped", t)
                    continue
                rows.append(m)
            if rows:
                gap = float(np.mean([s.gap_minutes for s in by_band[band_id]]))
                records.append(_mean_record(p.name, band_id, t, gap, rows))
    return records


def time_sweep(predictor, samples: list[EvalSample], ts=None) -> SweepResult:
    """Mean metrics per t over the samples; samples missing a truth are skipped."""
    if ts is None:
        ts = [round(0.1 * k, 10) for k in range(1, 10)]
    if not samples:
        raise ContractError("no evaluation samples")
    points = []
    skipped = 0
    for t in ts:
        rows = []
        for s in samples:
            m = _measure(predictor, s, t)
            if m is None:
                skipped += 1
                continue
            rows.append(m)
        if rows:
            band_id = samples[0].band.band_id
            gap = float(np.mean([s.gap_minutes for s in samples]))
            points.append((t, _mean_record(predictor.name, band_id, t, gap, rows)))
    if skipped:
        log.warning("%d sample evaluations skipped for missing truths", skipped)
    return SweepResult(axis="t", points=tuple(points), sample_count=len(samples))


def gap_sweep(
    predictor, seqs: list[FrameSequence], gaps_minutes=None, t: float = 0.5
) -> SweepResult:
    """Mean metrics at one t while widening the input gap.

    Gaps that do not fit the sequences (too long, or without a frame at
    the requested t) are skipped with a warning.
    """
    if gaps_minutes is None:
        gaps_minutes = [5 * k for k in range(1, 10)]
    if not seqs:
        raise ContractError("no sequences")
    cadence_min = seqs[0].cadence_s / 60.0
    points = []
    n_used = 0
    for gap_min in sorted(gaps_minutes):
        steps = gap_min / cadence_min
        if abs(steps - round(steps)) > 1e-9:
            log.warning("gap %g min is not a whole number of frames; skipped", gap_min)
            continue
        steps = int(round(steps))
        if steps < 2 or abs(t * steps - round(t * steps)) > 1e-9:
            log.warning("gap %g min has no frame at t=%g; skipped", gap_min, t)
            continue
        if all(len(s) <= steps for s in seqs):
            log.warning("sequences too short for a %g min gap; skipped", gap_min)
            continue
        samples = samples_from_sequences([s for s in seqs if len(s) > steps], steps)
        rows = [m for s in samples if (m := _measure(predictor, s, t)) is not None]
        if rows:
            n_used = max(n_used, len(rows))
            band_id = samples[0].band.band_id
            points.append((float(gap_min), _mean_record(predictor.name, band_id, t, gap_min, rows)))
    return SweepResult(axis="gap", points=tuple(points), sample_count=n_used)


@dataclass(frozen=True)
class SeriesReconstruction:
    timestamps: tuple[float, ...]
    observed: tuple[float, ...]
    reconstructed: tuple[float, ...]
    rmse: float


def reconstruct_series(
    predictor, seq: FrameSequence, downsample_factor: int = 10, pixel=(0, 0)
) -> SeriesReconstruction:
    """Rebuild a 1-step point series from a k-step downsampled sequence.

    Every k-th frame is kept as input; the interior steps of each interval
    are interpolated at t = i/k.  Kept frames enter the reconstruction
    bit-exactly.
    """
    k = int(downsample_factor)
    if len(seq) <= k:
        raise ContractError(f"sequence of {len(seq)} frames is too short for factor {k}")
    h, w = seq.shape
    row, col = int(round(pixel[0])), int(round(pixel[1]))
    if not (0 <= row < h and 0 <= col < w):
        raise GridRangeError(f"pixel ({row}, {col}) outside grid {h}x{w}")

    px = seq.pixel_stack()
    ts = seq.timestamps()
    n_intervals = (len(seq) - 1) // k
    last = n_intervals * k
    observed = [float(px[i, row, col]) for i in range(last + 1)]
    recon = list(observed)
    for start in range(0, last, k):
        i0, i1 = px[start], px[start + k]
        for j in range(1, k):
            pred = predictor.predict(i0, i1, j / k)
            recon[start + j] = float(pred[row, col])
    err = float(np.sqrt(np.mean((np.array(recon) - np.array(observed)) ** 2)))
    return SeriesReconstruction(
        timestamps=tuple(float(t) for t in ts[: last + 1]),
        observed=tuple(observed),
        reconstructed=tuple(recon),
        rmse=err,
    )


# ---------------------------------------------------------------------------
# Delimited output
# ---------------------------------------------------------------------------

CSV_HEADER = ["model", "band", "t", "gap_min", "psnr_db", "rmse", "ssim", "n_samples"]


def write_metrics_csv(records: list[MetricsRecord], path) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_HEADER)
        for r in records:
            writer.writerow(
                [r.model_name, r.band_id, r.t, r.gap_minutes, r.psnr_db, r.rmse, r.ssim, r.n_samples]
            )
    return path


def write_sweep_csv(sweeps: dict, path) -> Path:
    """One row per (model, axis value); ``sweeps`` maps name -> SweepResult."""
    path = Path(path)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_HEADER)
        for name, sweep in sweeps.items():
            for value, rec in sweep.points:
                writer.writerow(
                    [name, rec.band_id, rec.t, rec.gap_minutes, rec.psnr_db, rec.rmse, rec.ssim, rec.n_samples]
                )
    return path
