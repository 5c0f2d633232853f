"""Beat-level signal preparation: segmentation, smoothing, baseline
correction and rasterization into fixed-size binary images.

The stages run per beat in pipeline order: cut a symmetric window around
each annotated QRS peak, smooth it with a sum-normalized Hanning window
(reflected edges, trimmed back), shift the modal amplitude to 0 mV, then
plot the trace onto an H x W grid whose amplitude axis is fixed by
percentile bounds computed over the whole beat population.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateRange, InvalidOrder, SignalTooShort
from .wfdb import AnnotationEntry


@dataclass(frozen=True)
class BeatSegment:
    samples: np.ndarray     # (2*half + 1,) in mV
    fs: float
    center_index: int       # annotated QRS sample in the source signal
    symbol: str
    record_name: str
    half: int


@dataclass(frozen=True)
class SmoothingConfig:
    N: int                  # window order; N+1 coefficients
    normalize: bool = True  # fixed true: coefficients sum to 1

    def __post_init__(self):
        if self.N < 2 or self.N % 2:
            raise InvalidOrder(f"window order must be even and >= 2, got {self.N}")


@dataclass(frozen=True)
class RasterGrid:
    bits: np.ndarray        # (H, W) uint8 in {0, 1}
    value_range: tuple[float, float]

    @property
    def height(self) -> int:
        return self.bits.shape[0]

    @property
    def width(self) -> int:
        return self.bits.shape[1]


def default_window_order(fs: float) -> int:
    """20 ms of support, rounded up to an even order (8 at 360 Hz)."""
    n = int(round(0.02 * fs))
    if n < 2:
        n = 2
    if n % 2:
        n += 1
    return n


def segment_beats(
    signal: np.ndarray,
    annotations: list[AnnotationEntry],
    x_ms: float,
    fs: float,
    record_name: str = "",
) -> tuple[list[BeatSegment], int]:
    """Cut one window of +/- x_ms around every annotated peak.

    Returns the kept segments and the count of beats dropped because
    their window ran off either end of the signal.
    """
    if x_ms <= 0:
        raise ValueError("x_ms must be positive")
    half = int(np.floor(x_ms * fs / 1000.0 + 0.5))
    n = signal.shape[0]
    beats: list[BeatSegment] = []
    dropped = 0
    for ann in annotations:
        c = ann.sample_index
        if c - half < 0 or c + half >= n:
            dropped += 1
            continue
        beats.append(
            BeatSegment(
                samples=signal[c - half : c + half + 1].copy(),
                fs=fs,
                center_index=c,
                symbol=ann.symbol,
                record_name=record_name,
                half=half,
            )
        )
    return beats, dropped


def hanning_window(N: int) -> np.ndarray:
    """w(n) = 0.5 (1 - cos(2 pi n / N)) for n = 0..N; endpoints are 0."""
    if N < 2:
        raise InvalidOrder(f"window order must be >= 2, got {N}")
    n = np.arange(N + 1, dtype=np.float64)
    return 0.5 * (1.0 - np.cos(2.0 * np.pi * n / N))


def smooth(signal: np.ndarray, config: SmoothingConfig) -> np.ndarray:
    """Convolve with the sum-normalized Hanning window.

    Both ends are extended by N mirror-reflected samples before the
    convolution and trimmed back afterwards, so the output has the input
    length and constant signals pass through unchanged.
    """
    x = np.asarray(signal, dtype=np.float64)
    N = config.N
    if x.shape[0] <= N:
        raise SignalTooShort(f"need more than {N} samples, got {x.shape[0]}")
    w = hanning_window(N)
    w = w / w.sum()
    ext = np.pad(x, N, mode="reflect")
    out = np.convolve(ext, w, mode="same")
    return out[N : N + x.shape[0]]


def correct_baseline(signal: np.ndarray, bin_width: float) -> np.ndarray:
    """Shift the modal amplitude bin to 0 mV.

    Bins are centered on integer multiples of ``bin_width``; count ties
    break toward the bin nearest 0 (then toward the more negative one).
    """
    if bin_width <= 0:
        raise ValueError("bin_width must be positive")
    x = np.asarray(signal, dtype=np.float64)
    idx = np.floor(x / bin_width + 0.5).astype(np.int64)
    bins, counts = np.unique(idx, return_counts=True)
    best = counts.max()
    candidates = bins[counts == best]
    order = np.lexsort((candidates, np.abs(candidates)))
    mode_center = candidates[order[0]] * bin_width
    return x - mode_center


def compute_global_range(
    beats: list[BeatSegment] | list[np.ndarray],
    clip_lo: float = 0.1,
    clip_hi: float = 99.9,
) -> tuple[float, float]:
    """Percentile amplitude bounds over all samples of all beats."""
    if not 0 <= clip_lo < clip_hi <= 100:
        raise ValueError("need 0 <= clip_lo < clip_hi <= 100")
    if not beats:
        raise ValueError("at least one beat required")
    arrays = [b.samples if isinstance(b, BeatSegment) else np.asarray(b) for b in beats]
    allv = np.concatenate(arrays)
    lo = float(np.percentile(allv, clip_lo))
    hi = float(np.percentile(allv, clip_hi))
    if lo >= hi:
        raise DegenerateRange(f"amplitude range collapsed: [{lo}, {hi}]")
    return lo, hi


def _draw_line(bits: np.ndarray, c0: int, r0: int, c1: int, r1: int) -> None:
    """4-connected integer line from (c0, r0) to (c1, r1), inclusive.

    Steps one pixel at a time, column before row when both are pending,
    picking whichever move tracks the ideal segment closer; ties step
    the column. Fully deterministic.
    """
    bits[r0, c0] = 1
    dc = abs(c1 - c0)
    dr = abs(r1 - r0)
    sc = 1 if c1 > c0 else -1
    sr = 1 if r1 > r0 else -1
    err = dc - dr
    c, r = c0, r0
    while c != c1 or r != r1:
        if r == r1:
            c += sc
        elif c == c1:
            r += sr
        else:
            e2 = 2 * err
            if e2 >= -dr:
                err -= dr
                c += sc
            else:
                err += dc
                r += sr
        bits[r, c] = 1


def rasterize(
    beat: BeatSegment | np.ndarray,
    value_range: tuple[float, float],
    height: int,
    width: int,
) -> RasterGrid:
    """Plot a beat as a binary H x W polyline image.

    Sample i lands in column floor(i * W / len); amplitude maps linearly
    with ``value_range[1]`` at row 0 (top) and ``value_range[0]`` at the
    bottom row, clamped outside the range. Consecutive points are joined
    with a 4-connected integer line.
    """
    lo, hi = value_range
    if lo >= hi:
        raise DegenerateRange(f"bad raster range [{lo}, {hi}]")
    if height < 8 or width < 8:
        raise ValueError("raster dimensions must be >= 8")
    x = beat.samples if isinstance(beat, BeatSegment) else np.asarray(beat, dtype=np.float64)
    n = x.shape[0]
    cols = np.floor(np.arange(n) * width / n).astype(np.int64)
    cols = np.clip(cols, 0, width - 1)
    frac = (hi - np.clip(x, lo, hi)) / (hi - lo)
    rows = np.floor(frac * (height - 1) + 0.5).astype(np.int64)
    rows = np.clip(rows, 0, height - 1)

    bits = np.zeros((height, width), dtype=np.uint8)
    for i in range(n - 1):
        _draw_line(bits, int(cols[i]), int(rows[i]), int(cols[i + 1]), int(rows[i + 1]))
    if n == 1:
        bits[int(rows[0]), int(cols[0])] = 1
    # when W > len the floor mapping leaves trailing columns untouched;
    # continue the final sample flat to the right edge so the plot fills
    # its canvas and every column carries the trace
    bits[int(rows[-1]), int(cols[-1]) :] = 1
    return RasterGrid(bits=bits, value_range=(float(lo), float(hi)))


def prepare_beat(beat: BeatSegment, smoothing: SmoothingConfig, bin_width: float) -> BeatSegment:
    """Smoothing followed by baseline correction, returning a new segment."""
    y = smooth(beat.samples, smoothing)
    y = correct_baseline(y, bin_width)
    return BeatSegment(
        samples=y,
        fs=beat.fs,
        center_index=beat.center_index,
        symbol=beat.symbol,
        record_name=beat.record_name,
        half=beat.half,
    )
