"""Flat ``key = value`` run configuration.

One setting per line, ``#`` starts a comment, blank lines are ignored.
Unknown keys, bad values and duplicate keys are errors that carry the line
number.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path

from ..backward import LSS_MODES
from ..exceptions import Int4Error
from ..hadamard import MAX_K
from ..layer import MODES

TASKS = ("verify", "train", "bench", "inspect")
GENERATORS = ("dense-regression", "sparse-token-classification", "outlier-activation")
MODELS = ("transformer", "mlp")
FAULTS = ("", "lss-sign-flip")


class ConfigError(Int4Error, ValueError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


@dataclass(frozen=True)
class RunConfig:
    task: str = "train"
    # model
    model: str = "transformer"
    layers: int = 2
    hidden: int = 64
    heads: int = 2
    seq_len: int = 16
    batch: int = 8
    # optimisation
    steps: int = 2000
    lr: float = 0.05
    seed: int = 0
    # quantization
    mode: str = "hq+lss"
    k_max: int = 5
    cold_start_steps: int = 200
    lss_mode: str = "bernoulli"
    reselect_step: int = 0
    # synthetic data
    generator: str = "sparse-token-classification"
    train_size: int = 512
    vocab: int = 32
    classes: int = 4
    features: int = 16
    noise: float = 0.0
    outlier_magnitude: float = 50.0
    outlier_fraction: float = 0.01
    signal_tokens: int = 1
    # bench / inspect / verify
    shapes: str = "32x64x32;128x128x64"
    repeats: int = 20
    bins: int = 128
    log_magnitude: bool = False
    suites: str = "all"
    inject_fault: str = ""
    output: str = "out"

    def __post_init__(self):
        _check_choice("task", self.task, TASKS)
        _check_choice("model", self.model, MODELS)
        _check_choice("mode", self.mode, MODES)
        _check_choice("lss_mode", self.lss_mode, LSS_MODES)
        _check_choice("generator", self.generator, GENERATORS)
        _check_choice("inject_fault", self.inject_fault, FAULTS)
        for name in ("layers", "hidden", "heads", "seq_len", "batch", "steps", "train_size",
                     "vocab", "classes", "features", "repeats", "bins", "signal_tokens"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        for name in ("cold_start_steps", "reselect_step", "seed", "k_max"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative")
        if self.k_max > MAX_K:
            raise ConfigError(f"k_max {self.k_max} exceeds {MAX_K}")
        if not self.lr > 0:
            raise ConfigError("lr must be positive")
        if self.hidden % self.heads:
            raise ConfigError(f"hidden {self.hidden} is not divisible by heads {self.heads}")
        if self.model == "transformer" and self.hidden % (1 << self.k_max):
            raise ConfigError(f"hidden {self.hidden} is not divisible by 2^k_max = {1 << self.k_max}")
        if self.train_size % self.batch:
            raise ConfigError(f"train_size {self.train_size} is not a multiple of batch {self.batch}")
        if self.generator == "sparse-token-classification" and self.vocab <= self.classes + 1:
            raise ConfigError("vocab must exceed classes + 1")
        if not 0 <= self.outlier_fraction < 1:
            raise ConfigError("outlier_fraction must lie in [0, 1)")
        if not 0 <= self.noise < 1 and self.generator != "dense-regression":
            raise ConfigError("noise is a label-flip rate for classification tasks and must lie in [0, 1)")

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    def shape_list(self) -> list[tuple[int, int, int]]:
        out = []
        for item in filter(None, (s.strip() for s in self.shapes.split(";"))):
            try:
                n, d, c = (int(v) for v in item.lower().split("x"))
            except ValueError:
                raise ConfigError(f"bad shape {item!r}; expected NxDxC") from None
            if min(n, d, c) <= 0:
                raise ConfigError(f"bad shape {item!r}")
            out.append((n, d, c))
        if not out:
            raise ConfigError("shapes list is empty")
        return out


def _check_choice(name, value, choices):
    if value not in choices:
        raise ConfigError(f"{name} must be one of {', '.join(choices)}; got {value!r}")


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _convert(kind, raw: str, key: str, line: int):
    try:
        if kind is bool:
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {kind.__name__}", line) from None
    return raw


_TYPES = {"int": int, "float": float, "bool": bool, "str": str}


def parse_config(text: str) -> RunConfig:
    kinds = {f.name: _TYPES[f.type] for f in fields(RunConfig)}
    values: dict[str, object] = {}
    for lineno, raw_line in enumerate(text.splitlines(), start=1):
        line = raw_line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"expected 'key = value', got {raw_line.strip()!r}", lineno)
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in kinds:
            raise ConfigError(f"unknown key {key!r}", lineno)
        if key in values:
            raise ConfigError(f"duplicate key {key!r}", lineno)
        values[key] = _convert(kinds[key], value, key, lineno)
    try:
        return RunConfig(**values)
    except ConfigError as err:
        if err.line is None:
            raise ConfigError(str(err), _line_of(text, err)) from None
        raise


def _line_of(text: str, err: ConfigError) -> int | None:
    """Best-effort line number for a validation error: the first key it mentions."""
    msg = str(err)
    for lineno, raw_line in enumerate(text.splitlines(), start=1):
        key = raw_line.split("#", 1)[0].split("=", 1)[0].strip()
        if key and msg.startswith(key):
            return lineno
    return None


def format_config(cfg: RunConfig) -> str:
    return "".join(f"{f.name} = {_format(getattr(cfg, f.name))}\n" for f in fields(cfg))


def load_config(path) -> RunConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as err:
        raise ConfigError(f"cannot read config {path}: {err.strerror}") from None
    return parse_config(text)
