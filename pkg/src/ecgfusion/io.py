"""On-disk artifact formats.

Everything the pipeline writes is either a tab-delimited text table with
a header row, or a binary PBM (P4) bitmap for rasters. Formats carry no
timestamps or machine state, so identical runs produce identical bytes.

- inventory.tsv: record, fs, n_signals, leads, n_beats, age, sex
- beats.tsv (manifest): beat_id, record, lead, center_index, symbol,
  age, sex, raster (path relative to the manifest file)
- plan.tsv: example_id, fold, class_id, stratum
- steps.tsv / epochs.tsv: training history
"""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np

from .dataset import LabeledExample, SplitPlan, build_patient_vector
from .training import TrainHistory


# --- rasters (binary PBM, magic "P4") ---

def write_pbm(path: str | Path, bits: np.ndarray) -> None:
    """Packed 1-bit image: rows MSB-first, each row padded to a byte."""
    h, w = bits.shape
    packed = np.packbits(bits.astype(np.uint8), axis=1)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(f"P4\n{w} {h}\n".encode("ascii"))
        f.write(packed.tobytes())


def read_pbm(path: str | Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if not raw.startswith(b"P4"):
        raise ValueError(f"{path}: not a binary PBM file")
    # header: "P4\n<w> <h>\n" with optional comment lines
    pos = 2
    fields = []
    while len(fields) < 2:
        end = raw.index(b"\n", pos)
        line = raw[pos:end].strip()
        pos = end + 1
        if line.startswith(b"#") or not line:
            continue
        fields.extend(line.split())
    w, h = int(fields[0]), int(fields[1])
    row_bytes = (w + 7) // 8
    data = np.frombuffer(raw[pos : pos + h * row_bytes], dtype=np.uint8)
    bits = np.unpackbits(data.reshape(h, row_bytes), axis=1)[:, :w]
    return bits.astype(np.uint8)


# --- delimited tables ---

def write_tsv(path: str | Path, header: list[str], rows) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f, delimiter="\t", lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)


def _read_tsv(path: str | Path) -> tuple[list[str], list[list[str]]]:
    with open(Path(path), newline="") as f:
        reader = csv.reader(f, delimiter="\t")
        rows = list(reader)
    return rows[0], rows[1:]


def write_inventory(path: str | Path, rows: list[dict]) -> None:
    write_tsv(
        path,
        ["record", "fs", "n_signals", "leads", "n_beats", "age", "sex"],
        [
            [r["record"], r["fs"], r["n_signals"], r["leads"], r["n_beats"],
             "?" if r["age"] is None else r["age"], r["sex"]]
            for r in rows
        ],
    )


def write_manifest(path: str | Path, rows: list[dict]) -> None:
    """One row per kept beat; ``raster`` references the bitmap file
    relative to the manifest's directory."""
    write_tsv(
        path,
        ["beat_id", "record", "lead", "center_index", "symbol", "age", "sex", "raster"],
        [
            [r["beat_id"], r["record"], r["lead"], r["center_index"], r["symbol"],
             "?" if r["age"] is None else r["age"], r["sex"], r["raster"]]
            for r in rows
        ],
    )


def read_manifest(path: str | Path) -> list[dict]:
    header, rows = _read_tsv(path)
    out = []
    for row in rows:
        rec = dict(zip(header, row))
        rec["center_index"] = int(rec["center_index"])
        rec["age"] = None if rec["age"] == "?" else int(rec["age"])
        out.append(rec)
    return out


def manifest_examples(rows: list[dict], class_map) -> list[LabeledExample]:
    """Manifest rows to labeled examples; ``class_map(symbol) -> id`` and
    excluded symbols (negative ids) are dropped."""
    out = []
    for r in rows:
        cid = class_map(r["symbol"])
        if cid < 0:
            continue
        out.append(
            LabeledExample(
                example_id=r["beat_id"],
                raster_ref=r["raster"],
                patient=build_patient_vector(r["age"], r["sex"]),
                class_id=cid,
                age=r["age"],
                sex=r["sex"],
                record_name=r["record"],
            )
        )
    return out


def write_split_plan(path: str | Path, plan: SplitPlan) -> None:
    rows = []
    for ex in plan.examples:
        bucket, sex, cid = ex.strata_key
        rows.append(
            [ex.example_id, plan.assignment[ex.example_id], ex.class_id, f"{bucket}:{sex}:{cid}"]
        )
    write_tsv(path, ["example_id", "fold", "class_id", "stratum"], rows)


def read_split_plan(path: str | Path) -> dict[str, int]:
    """example_id -> fold (the plan's example details live in the manifest)."""
    _, rows = _read_tsv(path)
    return {row[0]: int(row[1]) for row in rows}


def write_history(directory: str | Path, history: TrainHistory) -> None:
    directory = Path(directory)
    write_tsv(
        directory / "steps.tsv",
        ["step", "loss", "lr"],
        [[t, f"{loss:.10g}", f"{lr:.10g}"] for t, loss, lr in history.steps],
    )
    write_tsv(
        directory / "epochs.tsv",
        ["epoch", "step", "val_accuracy", "val_macro_f1", "improved"],
        [
            [e["epoch"], e["step"], f"{e['val_accuracy']:.10g}",
             f"{e['val_macro_f1']:.10g}", int(e["improved"])]
            for e in history.epochs
        ],
    )


def write_report_files(directory: str | Path, artifacts: dict[str, str]) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for name, content in artifacts.items():
        (directory / name).write_text(content)
