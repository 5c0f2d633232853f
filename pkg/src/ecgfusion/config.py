"""Run configuration: a flat key=value file with CLI overrides.

Precedence is flag > file > default. Every key has a documented default
(``DEFAULTS``); unknown keys fail before any work starts. The run id is
a digest over the keys that influence computation, so re-running the
same configuration lands in the same output subdirectory with identical
content, while ``output_dir`` and ``threads`` stay out of the digest.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from pathlib import Path

DEFAULTS: dict[str, str] = {
    # data
    "dataset_dir": "",
    "records": "all",            # or comma-separated record names
    "lead": "",                  # empty = first lead in each record
    # preprocessing
    "x_ms": "280",
    "smoothing_n": "0",          # 0 = auto (20 ms of support, even)
    "bin_width": "0",            # 0 = auto (one ADC quantum, 1/gain)
    "clip_lo": "0.1",
    "clip_hi": "99.9",
    "raster_h": "224",
    "raster_w": "224",
    # dataset
    "scheme": "MIT10",
    "split_k": "9",
    "seed": "7",
    "max_ratio": "10",
    "patient_strict": "false",
    "val_folds": "7",
    "test_folds": "8",
    "augment_max_shift": "0",
    # model
    "dtype": "float64",          # float32 allowed for faster training
    "stem_channels": "8",
    "block_widths": "16,24,32",
    "block_strides": "1,2,2",
    "expansion": "6",
    "se_ratio": "4",
    "sepce_width": "16",
    "sepce_se_ratio": "4",
    "mcnet_hidden": "64,32",
    # training
    "lr_i": "1e-3",
    "epochs": "30",
    "batch_size": "64",
    "beta1": "0.9",
    "beta2": "0.999",
    "eps": "1e-8",
    "scheduler_mode": "continuous",
    "warmup_frac": "0.05",
    "patience": "10",
    # transfer
    "transfer_scheme": "BINARY",
    "transfer_source": "",       # checkpoint path
    "transfer_epochs": "10",
    # random search
    "search_budget": "5",
    "search_epochs": "3",
    "search_lr_lo": "1e-4",
    "search_lr_hi": "1e-2",
    "search_batch_choices": "32,64,128",
    # execution
    "output_dir": "out",
    "threads": "0",              # 0 = leave the kernel backend's default
}

# keys that do not change computed artifact content
_NON_DIGEST_KEYS = {"output_dir", "threads"}


class ConfigError(ValueError):
    pass


def parse_config_file(path: str | Path) -> dict[str, str]:
    """Read ``key = value`` lines; '#' starts a comment."""
    out: dict[str, str] = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key=value, got {raw!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def _to_bool(s: str) -> bool:
    if s.lower() in ("true", "1", "yes"):
        return True
    if s.lower() in ("false", "0", "no"):
        return False
    raise ConfigError(f"expected boolean, got {s!r}")


def _to_int_tuple(s: str) -> tuple[int, ...]:
    return tuple(int(x) for x in s.split(",") if x.strip() != "")


@dataclass(frozen=True)
class RunConfig:
    values: dict[str, str]

    # typed accessors ---------------------------------------------------
    def s(self, key: str) -> str:
        return self.values[key]

    def i(self, key: str) -> int:
        try:
            return int(self.values[key])
        except ValueError as exc:
            raise ConfigError(f"{key} must be an integer, got {self.values[key]!r}") from exc

    def f(self, key: str) -> float:
        try:
            return float(self.values[key])
        except ValueError as exc:
            raise ConfigError(f"{key} must be a number, got {self.values[key]!r}") from exc

    def b(self, key: str) -> bool:
        return _to_bool(self.values[key])

    def ints(self, key: str) -> tuple[int, ...]:
        return _to_int_tuple(self.values[key])

    # derived -----------------------------------------------------------
    def run_id(self) -> str:
        canon = "\n".join(
            f"{k}={self.values[k]}"
            for k in sorted(self.values)
            if k not in _NON_DIGEST_KEYS
        )
        return hashlib.sha256(canon.encode("utf-8")).hexdigest()[:12]

    def run_dir(self) -> Path:
        return Path(self.s("output_dir")) / self.run_id()

    def record_list(self, dataset_dir: Path) -> list[str]:
        from .wfdb import list_records

        if self.s("records") == "all":
            return list_records(dataset_dir)
        return [r.strip() for r in self.s("records").split(",") if r.strip()]

    def canonical_text(self) -> str:
        return "\n".join(f"{k} = {self.values[k]}" for k in sorted(self.values)) + "\n"


def build_config(
    config_path: str | Path | None,
    overrides: dict[str, str] | None = None,
) -> RunConfig:
    """Merge defaults, optional file, and flag overrides; validate keys."""
    values = dict(DEFAULTS)
    if config_path:
        file_values = parse_config_file(config_path)
        unknown = set(file_values) - set(DEFAULTS)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        values.update(file_values)
    if overrides:
        unknown = set(overrides) - set(DEFAULTS)
        if unknown:
            raise ConfigError(f"unknown override keys: {sorted(unknown)}")
        values.update(overrides)

    cfg = RunConfig(values=values)
    # fail fast on malformed numerics before any command runs
    for key in ("x_ms", "clip_lo", "clip_hi", "lr_i", "beta1", "beta2", "eps", "warmup_frac",
                "max_ratio", "bin_width", "search_lr_lo", "search_lr_hi"):
        cfg.f(key)
    for key in ("smoothing_n", "raster_h", "raster_w", "split_k", "seed", "epochs",
                "batch_size", "patience", "stem_channels", "expansion", "se_ratio",
                "sepce_width", "sepce_se_ratio", "augment_max_shift", "threads",
                "search_budget", "search_epochs", "transfer_epochs"):
        cfg.i(key)
    for key in ("block_widths", "block_strides", "mcnet_hidden", "val_folds", "test_folds",
                "search_batch_choices"):
        cfg.ints(key)
    cfg.b("patient_strict")
    if cfg.s("scheduler_mode") not in ("continuous", "paper_verbatim"):
        raise ConfigError("scheduler_mode must be continuous or paper_verbatim")
    if cfg.s("dtype") not in ("float64", "float32"):
        raise ConfigError("dtype must be float64 or float32")
    return cfg
