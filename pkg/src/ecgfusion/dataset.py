"""Labeled-example assembly: class schemes, demographic encoding,
stratified splitting and imbalance handling.

Plans are generated single-threaded with all randomness drawn from the
caller's seed, so a (seed, example list) pair always yields the same
folds. Fold assignment deals shuffled strata round-robin with a rotating
start offset, which keeps per-fold class counts independent of the seed.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ShiftTooLarge, TooFewExamples
from .prep import BeatSegment

MISSING_AGE_NORM = 0.55  # roughly the mean recorded age / 100

# Table-driven class schemes. MIT10 lists its symbols in the reporting
# order used throughout; AAMI4 groups fine symbols into four classes and
# leaves paced-related symbols out; BINARY is normal-vs-abnormal over
# the MIT10 alphabet. MIT5 restricts to the five highest-scoring fine
# classes, the subset the desk-scale end-to-end benchmark trains on.
MIT10_SYMBOLS = ("N", "L", "R", "V", "/", "A", "f", "F", "j", "a")
MIT5_SYMBOLS = ("N", "L", "R", "V", "/")
AAMI4_GROUPS = {
    "Normal": ("N", "L", "R", "e", "j"),
    "SEB": ("A", "a", "J", "S"),
    "VEB": ("V", "E"),
    "Fusion": ("F",),
}
AAMI4_ORDER = ("Normal", "SEB", "VEB", "Fusion")
BINARY_ORDER = ("N", "AB")

EXCLUDED = -1


@dataclass(frozen=True)
class ClassScheme:
    name: str
    class_names: tuple[str, ...]
    mapping: dict[str, int]  # beat symbol -> class id

    @property
    def n_classes(self) -> int:
        return len(self.class_names)


def _build_schemes() -> dict[str, ClassScheme]:
    mit10 = ClassScheme(
        name="MIT10",
        class_names=MIT10_SYMBOLS,
        mapping={s: i for i, s in enumerate(MIT10_SYMBOLS)},
    )
    aami_map = {}
    for gi, gname in enumerate(AAMI4_ORDER):
        for s in AAMI4_GROUPS[gname]:
            aami_map[s] = gi
    aami4 = ClassScheme(name="AAMI4", class_names=AAMI4_ORDER, mapping=aami_map)
    binary = ClassScheme(
        name="BINARY",
        class_names=BINARY_ORDER,
        mapping={s: (0 if s == "N" else 1) for s in MIT10_SYMBOLS},
    )
    mit5 = ClassScheme(
        name="MIT5",
        class_names=MIT5_SYMBOLS,
        mapping={s: i for i, s in enumerate(MIT5_SYMBOLS)},
    )
    return {"MIT10": mit10, "AAMI4": aami4, "BINARY": binary, "MIT5": mit5}


SCHEMES = _build_schemes()


def get_scheme(name: str) -> ClassScheme:
    try:
        return SCHEMES[name.upper()]
    except KeyError as exc:
        raise KeyError(f"unknown class scheme {name!r}; choose from {sorted(SCHEMES)}") from exc


def map_class(symbol: str, scheme: ClassScheme) -> int:
    """Class id for a beat symbol, or EXCLUDED (-1). Never raises."""
    return scheme.mapping.get(symbol, EXCLUDED)


def build_patient_vector(age: int | None, sex: str) -> np.ndarray:
    """[age/100 clamped to [0, 1.2], is_male, is_female, age_missing]."""
    if age is None:
        age_norm = MISSING_AGE_NORM
        missing = 1.0
    else:
        age_norm = min(max(age / 100.0, 0.0), 1.2)
        missing = 0.0
    return np.array(
        [age_norm, 1.0 if sex == "M" else 0.0, 1.0 if sex == "F" else 0.0, missing],
        dtype=np.float64,
    )


def age_bucket(age: int | None) -> int:
    """Stratification bucket: <45, 45-65, >65. Missing ages fall in the
    bucket of the imputed age (55)."""
    a = age if age is not None else 55
    if a < 45:
        return 0
    if a <= 65:
        return 1
    return 2


@dataclass(frozen=True)
class LabeledExample:
    example_id: str         # manifest beat id
    raster_ref: str         # raster file path relative to the manifest
    patient: np.ndarray     # encoded demographic vector
    class_id: int
    age: int | None
    sex: str
    record_name: str = ""

    @property
    def strata_key(self) -> tuple[int, str, int]:
        return (age_bucket(self.age), self.sex, self.class_id)


@dataclass
class SplitPlan:
    k: int
    seed: int
    assignment: dict[str, int]   # example_id -> fold
    examples: list[LabeledExample] = field(default_factory=list)

    def fold_of(self, example_id: str) -> int:
        return self.assignment[example_id]

    def fold_examples(self, folds: set[int] | int) -> list[LabeledExample]:
        if isinstance(folds, int):
            folds = {folds}
        return [e for e in self.examples if self.assignment[e.example_id] in folds]


def stratified_split(examples: list[LabeledExample], k: int, seed: int) -> SplitPlan:
    """Deal each (age bucket, sex, class) stratum round-robin into k folds.

    Strata are visited in sorted key order; the dealing offset advances
    by each stratum's size so no fold systematically collects the
    remainders. The seed only shuffles membership, not counts.
    """
    if k < 2:
        raise ValueError("k must be >= 2")
    strata: dict[tuple, list[LabeledExample]] = {}
    class_counts: dict[int, int] = {}
    for ex in examples:
        strata.setdefault(ex.strata_key, []).append(ex)
        class_counts[ex.class_id] = class_counts.get(ex.class_id, 0) + 1
    if not strata:
        raise TooFewExamples("no examples to split")
    for cid, cnt in sorted(class_counts.items()):
        if cnt < k:
            raise TooFewExamples(f"class {cid} has {cnt} examples, fewer than k={k}")

    rng = np.random.default_rng(seed)
    assignment: dict[str, int] = {}
    offset = 0
    for key in sorted(strata.keys()):
        members = strata[key]
        order = rng.permutation(len(members))
        for j, idx in enumerate(order):
            assignment[members[idx].example_id] = (offset + j) % k
        offset = (offset + len(members)) % k
    return SplitPlan(k=k, seed=seed, assignment=assignment, examples=list(examples))


def patient_level_split(examples: list[LabeledExample], k: int, seed: int) -> SplitPlan:
    """Strict mode: whole records go to one fold, stratified by the
    record's (age bucket, sex) only. Class balance per fold is whatever
    the records imply, which is why this is opt-in."""
    if k < 2:
        raise ValueError("k must be >= 2")
    records: dict[str, list[LabeledExample]] = {}
    for ex in examples:
        records.setdefault(ex.record_name, []).append(ex)
    if len(records) < k:
        raise TooFewExamples(f"{len(records)} records cannot fill {k} folds")

    strata: dict[tuple, list[str]] = {}
    for name, members in records.items():
        key = (age_bucket(members[0].age), members[0].sex)
        strata.setdefault(key, []).append(name)

    rng = np.random.default_rng(seed)
    assignment: dict[str, int] = {}
    offset = 0
    for key in sorted(strata.keys()):
        names = sorted(strata[key])
        order = rng.permutation(len(names))
        for j, idx in enumerate(order):
            fold = (offset + j) % k
            for ex in records[names[idx]]:
                assignment[ex.example_id] = fold
        offset = (offset + len(names)) % k
    return SplitPlan(k=k, seed=seed, assignment=assignment, examples=list(examples))


def rebalance_by_discard(plan: SplitPlan, max_ratio: float, seed: int) -> list[LabeledExample]:
    """Discard whole (stratum, fold) cells of over-represented classes.

    Cells are removed, never single examples, until each class count is
    at most ``max_ratio`` times the smallest class, or no remaining cell
    can go without dropping the class below that smallest count.
    """
    if max_ratio < 1:
        raise ValueError("max_ratio must be >= 1")
    rng = np.random.default_rng(seed)

    cells: dict[tuple, list[LabeledExample]] = {}
    for ex in plan.examples:
        key = (ex.strata_key, plan.assignment[ex.example_id])
        cells.setdefault(key, []).append(ex)

    class_counts: dict[int, int] = {}
    for ex in plan.examples:
        class_counts[ex.class_id] = class_counts.get(ex.class_id, 0) + 1
    floor = min(class_counts.values())
    if not np.isfinite(max_ratio):
        return list(plan.examples)
    target = max_ratio * floor

    removed: set[tuple] = set()
    for cid in sorted(class_counts.keys()):
        if class_counts[cid] <= target:
            continue
        cand = sorted([key for key in cells if key[0][2] == cid])
        order = rng.permutation(len(cand))
        for idx in order:
            key = cand[idx]
            size = len(cells[key])
            if class_counts[cid] <= target:
                break
            if class_counts[cid] - size < floor:
                continue
            removed.add(key)
            class_counts[cid] -= size
    kept = []
    for ex in plan.examples:
        key = (ex.strata_key, plan.assignment[ex.example_id])
        if key not in removed:
            kept.append(ex)
    return kept


def shift_beat(beat: BeatSegment, shift: int) -> BeatSegment:
    """Shift contents by ``shift`` samples, repeating the edge sample.

    Positive shifts move the waveform toward later indices.
    """
    if abs(shift) >= beat.half:
        raise ShiftTooLarge(f"|shift|={abs(shift)} must be < half={beat.half}")
    x = beat.samples
    if shift == 0:
        y = x.copy()
    elif shift > 0:
        y = np.concatenate([np.full(shift, x[0]), x[:-shift]])
    else:
        y = np.concatenate([x[-shift:], np.full(-shift, x[-1])])
    return BeatSegment(
        samples=y,
        fs=beat.fs,
        center_index=beat.center_index,
        symbol=beat.symbol,
        record_name=beat.record_name,
        half=beat.half,
    )


def horizontal_shift_augment(
    beat: BeatSegment, max_shift: int, rng: np.random.Generator
) -> BeatSegment:
    """Random horizontal shift in [-max_shift, +max_shift]. Off by
    default in the pipeline; kept for experimentation."""
    if max_shift >= beat.half:
        raise ShiftTooLarge(f"max_shift={max_shift} must be < half={beat.half}")
    s = int(rng.integers(-max_shift, max_shift + 1))
    return shift_beat(beat, s)
