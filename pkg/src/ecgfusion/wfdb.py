"""WFDB record ingestion: headers, format-212 signals, MIT annotations.

Only signal format 212 (two 12-bit two's-complement samples packed into
three bytes) is supported; it covers the arrhythmia databases this
pipeline targets. Everything here is pure over immutable inputs, so
records can be parsed in parallel.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    MalformedAnnotation,
    MalformedHeader,
    TruncatedData,
    UnsupportedFormat,
    ZeroGain,
)

# MIT annotation code -> display symbol (beat codes plus the non-beat
# codes we need to recognize and skip).
CODE_TO_SYMBOL = {
    1: "N", 2: "L", 3: "R", 4: "a", 5: "V", 6: "F", 7: "J", 8: "A",
    9: "S", 10: "E", 11: "j", 12: "/", 13: "Q", 14: "~", 16: "|",
    18: "s", 19: "T", 20: "*", 21: "D", 22: '"', 23: "=", 24: "p",
    25: "B", 26: "^", 27: "t", 28: "+", 29: "u", 30: "?", 31: "!",
    32: "[", 33: "]", 34: "e", 35: "n", 36: "@", 37: "x", 38: "f",
    39: "(", 40: ")", 41: "r",
}
SYMBOL_TO_CODE = {s: c for c, s in CODE_TO_SYMBOL.items()}

# Codes that mark an actual heartbeat (QRS); everything else is rhythm,
# quality or bookkeeping information and is skipped during ingestion.
BEAT_CODES = frozenset(
    {1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12, 13, 25, 34, 35, 38, 41}
)

# Special annotation pseudo-codes with payloads.
_SKIP, _NUM, _SUB, _CHN, _AUX = 59, 60, 61, 62, 63


@dataclass(frozen=True)
class SignalSpec:
    """Per-signal line of a WFDB header."""

    file_name: str
    format_code: int
    gain: float            # ADC units per mV
    adc_resolution: int
    adc_zero: int
    initial_value: int
    checksum: int
    block_size: int
    lead_name: str
    baseline: int          # ADC value of 0 mV (defaults to adc_zero)


@dataclass(frozen=True)
class RecordHeader:
    record_name: str
    n_signals: int
    fs: float
    n_samples: int
    signals: tuple[SignalSpec, ...]
    comments: tuple[str, ...]


@dataclass(frozen=True)
class AnnotationEntry:
    sample_index: int
    symbol: str


@dataclass(frozen=True)
class PatientMeta:
    age: int | None
    sex: str  # "M", "F" or "?"


@dataclass
class RawRecord:
    header: RecordHeader
    signals: np.ndarray            # (n_signals, n_samples) in mV
    annotations: list[AnnotationEntry] = field(default_factory=list)
    patient: PatientMeta = field(default_factory=lambda: PatientMeta(None, "?"))

    def lead_index(self, lead: str | None) -> int:
        """Resolve a lead name to its signal row; None means first lead."""
        if lead is None or lead == "":
            return 0
        for i, spec in enumerate(self.header.signals):
            if spec.lead_name == lead:
                return i
        raise KeyError(f"lead {lead!r} not in record {self.header.record_name}")


_GAIN_RE = re.compile(r"^([0-9.eE+-]+)(?:\(([-+]?\d+)\))?(?:/.*)?$")


def _parse_gain_token(token: str) -> tuple[float, int | None]:
    """Parse a header gain field: ``gain``, ``gain(baseline)`` or
    ``gain(baseline)/units``; returns (gain, baseline_or_None)."""
    m = _GAIN_RE.match(token)
    if not m:
        raise MalformedHeader(f"bad gain token {token!r}")
    try:
        gain = float(m.group(1))
    except ValueError as exc:
        raise MalformedHeader(f"bad gain token {token!r}") from exc
    baseline = int(m.group(2)) if m.group(2) is not None else None
    return gain, baseline


def parse_header(text: str) -> RecordHeader:
    """Parse the contents of a ``.hea`` file.

    Layout: one record line ``name n_signals fs n_samples``, one line per
    signal, then ``#``-prefixed comment lines (kept verbatim, without the
    leading ``#``). Signals in any format other than 212 are rejected.
    """
    lines = [ln.rstrip("\r\n") for ln in text.splitlines()]
    lines = [ln for ln in lines if ln.strip() != ""]
    if not lines:
        raise MalformedHeader("empty header")

    head = lines[0].split()
    if len(head) < 4:
        raise MalformedHeader(f"record line needs 4 fields, got {len(head)}")
    record_name = head[0].split("/")[0]
    try:
        n_signals = int(head[1])
        fs = float(head[2].split("/")[0])
        n_samples = int(head[3])
    except ValueError as exc:
        raise MalformedHeader(f"non-numeric record line field: {lines[0]!r}") from exc
    if n_signals < 1:
        raise MalformedHeader("n_signals must be >= 1")
    if fs <= 0:
        raise MalformedHeader("sampling frequency must be positive")

    if len(lines) < 1 + n_signals:
        raise MalformedHeader("fewer signal lines than n_signals")

    signals = []
    for ln in lines[1 : 1 + n_signals]:
        tok = ln.split()
        if len(tok) < 9:
            raise MalformedHeader(f"signal line needs 9 fields, got {len(tok)}: {ln!r}")
        try:
            fmt = int(tok[1].split("x")[0].split(":")[0].split("+")[0])
            gain, baseline = _parse_gain_token(tok[2])
            adc_res = int(tok[3])
            adc_zero = int(tok[4])
            init = int(tok[5])
            checksum = int(tok[6])
            blk = int(tok[7])
        except ValueError as exc:
            raise MalformedHeader(f"non-numeric signal field: {ln!r}") from exc
        if fmt != 212:
            raise UnsupportedFormat(f"signal format {fmt} not supported (only 212)")
        lead = " ".join(tok[8:])
        signals.append(
            SignalSpec(
                file_name=tok[0],
                format_code=fmt,
                gain=gain,
                adc_resolution=adc_res,
                adc_zero=adc_zero,
                initial_value=init,
                checksum=checksum,
                block_size=blk,
                lead_name=lead,
                baseline=baseline if baseline is not None else adc_zero,
            )
        )

    comments = tuple(
        ln[1:].strip() for ln in lines[1 + n_signals :] if ln.startswith("#")
    )
    return RecordHeader(
        record_name=record_name,
        n_signals=n_signals,
        fs=fs,
        n_samples=n_samples,
        signals=tuple(signals),
        comments=comments,
    )


def decode_format212(data: bytes | np.ndarray, n_samples: int) -> tuple[np.ndarray, np.ndarray]:
    """Decode a format-212 byte stream into its two interleaved sample
    sequences.

    ``n_samples`` is the total sample count across the stream (even and
    odd positions together); each 3-byte group packs one even-position
    and one odd-position 12-bit two's-complement sample.
    """
    need = (3 * n_samples + 1) // 2
    buf = np.frombuffer(bytes(data), dtype=np.uint8)
    if buf.size < need:
        raise TruncatedData(f"need {need} bytes for {n_samples} samples, got {buf.size}")
    n_groups = (n_samples + 1) // 2
    b = buf[: 3 * n_groups].astype(np.int32)
    if b.size < 3 * n_groups:  # odd sample count may leave a ragged tail
        b = np.concatenate([b, np.zeros(3 * n_groups - b.size, dtype=np.int32)])
    b0, b1, b2 = b[0::3], b[1::3], b[2::3]
    first = ((b1 & 0x0F) << 8) | b0
    second = ((b1 & 0xF0) << 4) | b2
    first = np.where(first > 2047, first - 4096, first)
    second = np.where(second > 2047, second - 4096, second)
    n_first = (n_samples + 1) // 2
    n_second = n_samples // 2
    return first[:n_first].astype(np.int16), second[:n_second].astype(np.int16)


def encode_format212(first: np.ndarray, second: np.ndarray) -> bytes:
    """Inverse of :func:`decode_format212`; odd totals pad the final
    second-channel slot with zero."""
    first = np.asarray(first, dtype=np.int64)
    second = np.asarray(second, dtype=np.int64)
    if not (first.size == second.size or first.size == second.size + 1):
        raise ValueError("first sequence must be same length as second, or one longer")
    if first.size and (first.min() < -2048 or first.max() > 2047):
        raise ValueError("sample out of 12-bit range")
    if second.size and (second.min() < -2048 or second.max() > 2047):
        raise ValueError("sample out of 12-bit range")
    if first.size > second.size:
        second = np.concatenate([second, np.zeros(1, dtype=np.int64)])
    a = np.where(first < 0, first + 4096, first)
    c = np.where(second < 0, second + 4096, second)
    out = np.empty(3 * a.size, dtype=np.uint8)
    out[0::3] = a & 0xFF
    out[1::3] = ((a >> 8) & 0x0F) | (((c >> 8) & 0x0F) << 4)
    out[2::3] = c & 0xFF
    return out.tobytes()


def interleave(first: np.ndarray, second: np.ndarray) -> np.ndarray:
    """Riffle the two decoded sequences back into stream order."""
    n = first.size + second.size
    out = np.empty(n, dtype=first.dtype)
    out[0::2] = first
    out[1::2] = second
    return out


def parse_annotations(data: bytes) -> list[AnnotationEntry]:
    """Parse a MIT annotation stream into beat entries.

    16-bit little-endian words: code in bits 15..10, time delta in bits
    9..0. SKIP carries a 4-byte interval added to the running time; NUM,
    SUB and CHN are single words; AUX carries a length-prefixed string.
    None of these emit entries. A zero word terminates the stream.
    Non-beat codes advance time but are not returned.
    """
    buf = np.frombuffer(bytes(data), dtype=np.uint8)
    if buf.size % 2:
        buf = buf[:-1]
    entries: list[AnnotationEntry] = []
    t = 0
    i = 0  # word index
    n_words = buf.size // 2

    def word(k: int) -> tuple[int, int]:
        lo = int(buf[2 * k])
        hi = int(buf[2 * k + 1])
        return hi >> 2, ((hi & 0x03) << 8) | lo

    terminated = False
    while i < n_words:
        code, delta = word(i)
        if code == 0 and delta == 0:
            terminated = True
            break
        if code == _SKIP:
            if i + 2 >= n_words:
                raise MalformedAnnotation("SKIP payload runs past end of stream")
            # 4-byte interval: high word first, each little-endian
            hi_lo = int(buf[2 * (i + 1)])
            hi_hi = int(buf[2 * (i + 1) + 1])
            lo_lo = int(buf[2 * (i + 2)])
            lo_hi = int(buf[2 * (i + 2) + 1])
            interval = (hi_hi << 24) | (hi_lo << 16) | (lo_hi << 8) | lo_lo
            if interval >= 1 << 31:
                interval -= 1 << 32
            t += interval
            i += 3
            continue
        if code in (_NUM, _SUB, _CHN):
            i += 1
            continue
        if code == _AUX:
            aux_len = delta & 0xFF
            i += 1 + (aux_len + 1) // 2
            continue
        t += delta
        if code in BEAT_CODES:
            if entries and t <= entries[-1].sample_index:
                raise MalformedAnnotation(f"beat indices not strictly increasing at {t}")
            entries.append(AnnotationEntry(sample_index=t, symbol=CODE_TO_SYMBOL[code]))
        i += 1

    if not terminated:
        raise MalformedAnnotation("stream ended without zero terminator")
    return entries


def encode_annotations(entries: list[AnnotationEntry]) -> bytes:
    """Write beat entries back to the MIT annotation format (used for
    synthetic fixtures). Gaps wider than the 10-bit delta field are
    bridged with SKIP words."""
    out = bytearray()
    t = 0
    for e in entries:
        delta = e.sample_index - t
        if delta < 0:
            raise ValueError("annotation indices must be non-decreasing")
        if delta > 1023:
            out += bytes([0, _SKIP << 2])
            out += bytes([(delta >> 16) & 0xFF, (delta >> 24) & 0xFF])
            out += bytes([delta & 0xFF, (delta >> 8) & 0xFF])
            delta = 0
        code = SYMBOL_TO_CODE[e.symbol]
        out += bytes([delta & 0xFF, (code << 2) | ((delta >> 8) & 0x03)])
        t = e.sample_index
    out += bytes([0, 0])
    return bytes(out)


def adu_to_mv(sample, gain: float, adc_zero: float):
    """Affine ADC-to-millivolt calibration: (sample - adc_zero) / gain."""
    if gain == 0:
        raise ZeroGain("gain must be non-zero")
    return (np.asarray(sample, dtype=np.float64) - adc_zero) / gain


_AGE_RE = re.compile(r"^\d{1,3}$")


def extract_patient_meta(comments: tuple[str, ...] | list[str]) -> PatientMeta:
    """Pull ``<age> <sex>`` off the first header comment line.

    MITDB encodes the patient as e.g. ``69 M 1085 653 x1``. Unparseable
    or absent comments degrade to missing/unknown rather than failing
    the record.
    """
    if not comments:
        return PatientMeta(None, "?")
    tokens = comments[0].split()
    age: int | None = None
    sex = "?"
    if tokens:
        if _AGE_RE.match(tokens[0]):
            age = int(tokens[0])
        elif tokens[0] != "?":
            return PatientMeta(None, "?")
    if len(tokens) >= 2 and tokens[1] in ("M", "F"):
        sex = tokens[1]
    return PatientMeta(age, sex)


def read_record(dataset_dir: str | Path, record_name: str) -> RawRecord:
    """Read a ``.hea``/``.dat``/``.atr`` triple into a calibrated record.

    All signals of the record must live in one format-212 ``.dat`` file
    (the layout used by the supported arrhythmia databases).
    """
    base = Path(dataset_dir) / record_name
    header = parse_header(base.with_suffix(".hea").read_text())

    dat_path = Path(dataset_dir) / header.signals[0].file_name
    raw = dat_path.read_bytes()
    total = header.n_signals * header.n_samples
    first, second = decode_format212(raw, total)
    flat = interleave(first, second)

    signals = np.empty((header.n_signals, header.n_samples), dtype=np.float64)
    for i, spec in enumerate(header.signals):
        adu = flat[i :: header.n_signals]
        signals[i] = adu_to_mv(adu, spec.gain, spec.baseline)
    if not np.all(np.isfinite(signals)):
        raise TruncatedData(f"non-finite samples in record {record_name}")

    annotations = parse_annotations(base.with_suffix(".atr").read_bytes())
    patient = extract_patient_meta(header.comments)
    return RawRecord(header=header, signals=signals, annotations=annotations, patient=patient)


def list_records(dataset_dir: str | Path) -> list[str]:
    """All record names (``.hea`` stems) in a dataset directory, sorted."""
    return sorted(p.stem for p in Path(dataset_dir).glob("*.hea"))
