"""Synthetic WFDB fixture records.

Builds physiologically-shaped (not physiological) multi-beat signals
with per-class morphologies, baseline wander and noise, then writes
genuine ``.hea``/``.dat``/``.atr`` triples through the package's own
format-212 and annotation encoders. Used by the test suite and by the
demo pipeline when no real database directory is available.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .wfdb import AnnotationEntry, encode_annotations, encode_format212, interleave

GAIN = 200.0
ADC_ZERO = 1024

# Gaussian bumps (center s, width s, amplitude mV) per beat class. The
# shapes only need to be mutually distinguishable and roughly beat-like.
_MORPHOLOGIES: dict[str, list[tuple[float, float, float]]] = {
    "N": [(-0.20, 0.025, 0.15), (-0.04, 0.010, -0.10), (0.0, 0.012, 1.10),
          (0.035, 0.012, -0.25), (0.25, 0.060, 0.30)],
    "L": [(-0.20, 0.025, 0.12), (0.0, 0.035, 0.85), (0.055, 0.030, 0.45),
          (0.28, 0.060, -0.30)],
    "R": [(-0.20, 0.025, 0.14), (-0.012, 0.014, 0.80), (0.05, 0.032, -0.70),
          (0.26, 0.060, 0.25)],
    "V": [(0.0, 0.050, 1.40), (0.30, 0.080, -0.45)],
    "/": [(-0.055, 0.004, 1.80), (0.02, 0.045, 0.90), (0.30, 0.070, -0.30)],
    "A": [(-0.15, 0.015, 0.28), (-0.04, 0.010, -0.08), (0.0, 0.012, 1.00),
          (0.035, 0.012, -0.22), (0.24, 0.055, 0.28)],
    "f": [(-0.055, 0.004, 1.20), (0.0, 0.025, 0.95), (0.26, 0.060, 0.15)],
    "F": [(0.0, 0.030, 1.20), (0.045, 0.020, -0.30), (0.27, 0.070, -0.10)],
    "j": [(0.0, 0.012, 0.95), (0.035, 0.012, -0.20), (0.25, 0.060, 0.28)],
    "a": [(-0.14, 0.018, 0.30), (0.0, 0.026, 0.85), (0.24, 0.055, 0.22)],
}


def beat_waveform(symbol: str, t: np.ndarray, scale: float = 1.0) -> np.ndarray:
    out = np.zeros_like(t)
    for mu, sigma, amp in _MORPHOLOGIES[symbol]:
        out += amp * np.exp(-0.5 * ((t - mu) / sigma) ** 2)
    return scale * out


def synth_record_signal(
    symbols: list[str],
    fs: float,
    rng: np.random.Generator,
    rr_s: float = 0.75,
    noise_mv: float = 0.02,
    wander_mv: float = 0.15,
    amp_scale: float = 1.0,
) -> tuple[np.ndarray, list[int]]:
    """One lead of concatenated beats; returns (signal mV, peak indices)."""
    n_beats = len(symbols)
    rr = rr_s * (1.0 + rng.uniform(-0.08, 0.08, size=n_beats))
    centers_s = 0.6 + np.cumsum(rr) - rr[0]
    total_s = centers_s[-1] + 0.8
    n = int(total_s * fs)
    tgrid = np.arange(n) / fs
    sig = np.zeros(n)
    peaks = []
    for sym, c in zip(symbols, centers_s):
        jitter = 1.0 + rng.uniform(-0.06, 0.06)
        lo = max(0, int((c - 0.45) * fs))
        hi = min(n, int((c + 0.55) * fs))
        sig[lo:hi] += beat_waveform(sym, tgrid[lo:hi] - c, scale=amp_scale * jitter)
        peaks.append(int(round(c * fs)))
    phase = rng.uniform(0, 2 * np.pi)
    sig += wander_mv * np.sin(2 * np.pi * 0.3 * tgrid + phase)
    sig += noise_mv * rng.standard_normal(n)
    return sig, peaks


def write_wfdb_record(
    directory: str | Path,
    name: str,
    signals_mv: np.ndarray,
    fs: float,
    annotations: list[AnnotationEntry],
    age: int | None,
    sex: str,
    lead_names: tuple[str, ...] = ("MLII", "V1"),
) -> None:
    """Encode mV signals to ADC units and write the record triple."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    n_signals, n_samples = signals_mv.shape
    adu = np.clip(np.round(signals_mv * GAIN + ADC_ZERO), -2048, 2047).astype(np.int64)

    flat = adu.T.reshape(-1)  # frame-interleaved stream order
    (directory / f"{name}.dat").write_bytes(encode_format212(flat[0::2], flat[1::2]))

    lines = [f"{name} {n_signals} {fs:g} {n_samples}"]
    for i in range(n_signals):
        lines.append(
            f"{name}.dat 212 {GAIN:g} 11 {ADC_ZERO} {adu[i, 0]} 0 0 {lead_names[i]}"
        )
    lines.append(f"# {'?' if age is None else age} {sex}")
    (directory / f"{name}.hea").write_text("\n".join(lines) + "\n")

    (directory / f"{name}.atr").write_bytes(encode_annotations(annotations))


def generate_dataset(
    directory: str | Path,
    n_records: int,
    beats_per_record: int,
    class_weights: dict[str, float],
    fs: float = 360.0,
    seed: int = 0,
) -> list[str]:
    """Write a directory of synthetic records; returns the record names.

    Each record gets one synthetic patient whose sex nudges the beat
    amplitude, so the demographic channel carries a little real signal.
    """
    rng = np.random.default_rng(seed)
    syms = sorted(class_weights)
    probs = np.array([class_weights[s] for s in syms], dtype=np.float64)
    probs = probs / probs.sum()
    names = []
    for r in range(n_records):
        name = f"s{r:03d}"
        age = int(rng.integers(28, 86))
        sex = "M" if rng.random() < 0.5 else "F"
        amp = 1.0 + (0.10 if sex == "M" else 0.0) - 0.002 * (age - 50)
        symbols = [syms[i] for i in rng.choice(len(syms), size=beats_per_record, p=probs)]
        lead0, peaks = synth_record_signal(symbols, fs, rng, amp_scale=amp)
        lead1 = 0.6 * lead0 + 0.01 * rng.standard_normal(lead0.shape[0])
        annotations = [
            AnnotationEntry(sample_index=p, symbol=s) for p, s in zip(peaks, symbols)
        ]
        write_wfdb_record(
            directory,
            name,
            np.stack([lead0, lead1]),
            fs,
            annotations,
            age,
            sex,
        )
        names.append(name)
    return names
