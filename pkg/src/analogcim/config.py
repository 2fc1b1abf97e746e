"""TOML tool configuration.

One document with a section per parameter group::

    seed = 0

    [paths]
    network = "net.json"        # inputs are resolved against the file's folder
    dataset = "data/train"
    eval_dataset = "data/test"
    energy = "energy.json"
    calibration_table = "tops_per_w.csv"
    out = "out"

    [crossbar]   # CrossbarConfig fields plus tile = "1024x512", scheme = "M4"
    [noise]      # NoiseParams
    [timing]     # TimingParams; t_cim is a table keyed by bit width
    [train]      # TrainConfig
    [simulate]   # checkpoints, n_runs, gdc, converter_mode, adc_bits, noise_off
    [perf]       # bits
    [sweep]      # schemes, bits, tiles, fp_units

Unknown keys are rejected so that typos do not pass silently.
"""

from __future__ import annotations

import sys
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Optional

from .errors import ConfigurationError
from .mapper import SCHEMES, TILE_PRESETS, CrossbarConfig
from .pcm import NoiseParams
from .perf import TimingParams
from .simulator import DEFAULT_CHECKPOINTS, DeploymentTimes, EvalProtocol
from .train.trainer import TrainConfig

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

INPUT_PATHS = ("network", "dataset", "eval_dataset", "energy", "calibration_table")


@dataclass(frozen=True)
class Paths:
    network: Optional[Path] = None
    dataset: Optional[Path] = None
    eval_dataset: Optional[Path] = None
    energy: Optional[Path] = None
    calibration_table: Optional[Path] = None
    out: Path = Path("out")


@dataclass(frozen=True)
class SimulateOptions:
    checkpoints: tuple[float, ...] = DEFAULT_CHECKPOINTS
    n_runs: int = 25
    gdc: bool = True
    converter_mode: str = "auto"
    adc_bits: Optional[int] = None
    noise_off: bool = False
    calibration_samples: int = 256

    @property
    def times(self) -> DeploymentTimes:
        return DeploymentTimes(tuple(float(t) for t in self.checkpoints))


@dataclass(frozen=True)
class SweepOptions:
    schemes: tuple[str, ...] = ("M1", "M2", "M4")
    bits: tuple[int, ...] = (4, 6, 8)
    tiles: tuple[str, ...] = ("1024x512",)
    fp_units: tuple[int, ...] = (32,)


@dataclass(frozen=True)
class ToolConfig:
    paths: Paths = field(default_factory=Paths)
    crossbar: CrossbarConfig = field(default_factory=CrossbarConfig)
    noise: NoiseParams = field(default_factory=NoiseParams)
    timing: TimingParams = field(default_factory=TimingParams)
    train: TrainConfig = field(default_factory=TrainConfig)
    simulate: SimulateOptions = field(default_factory=SimulateOptions)
    sweep: SweepOptions = field(default_factory=SweepOptions)
    bits: int = 8
    seed: int = 0

    def protocol(self) -> EvalProtocol:
        return EvalProtocol(n_runs=self.simulate.n_runs, seed=self.seed, gdc=self.simulate.gdc)

    def noise_params(self) -> NoiseParams:
        return NoiseParams.noiseless() if self.simulate.noise_off else self.noise

    def require(self, name: str) -> Path:
        p = getattr(self.paths, name)
        if p is None:
            raise ConfigurationError(f"no {name.replace('_', ' ')} path given "
                                     f"(set paths.{name} or pass --{name.replace('_', '-')})")
        return p


def _build(cls, section: dict, where: str, convert: Optional[dict] = None):
    known = {f.name for f in fields(cls)}
    extra = set(section) - known
    if extra:
        raise ConfigurationError(f"[{where}] unknown keys: {', '.join(sorted(extra))}")
    kw = dict(section)
    for key, fn in (convert or {}).items():
        if key in kw and kw[key] is not None:
            kw[key] = fn(kw[key])
    try:
        return cls(**kw)
    except (TypeError, ValueError) as exc:
        raise ConfigurationError(f"[{where}] {exc}") from None


def _crossbar(section: dict) -> CrossbarConfig:
    section = dict(section)
    tile = section.pop("tile", None)
    scheme = section.pop("scheme", None)
    if tile is not None:
        if tile not in TILE_PRESETS:
            raise ConfigurationError(f"[crossbar] unknown tile {tile!r}; choose from {sorted(TILE_PRESETS)}")
        section.setdefault("rows", TILE_PRESETS[tile][0])
        section.setdefault("cols", TILE_PRESETS[tile][1])
    if scheme is not None:
        if scheme not in SCHEMES:
            raise ConfigurationError(f"[crossbar] unknown scheme {scheme!r}; choose from {sorted(SCHEMES)}")
        section.setdefault("adc_mux", SCHEMES[scheme])
    if section.get("max_tiles", 1) == 0:
        section["max_tiles"] = None  # TOML has no null; 0 means unlimited
    return _build(CrossbarConfig, section, "crossbar")


def _resolve(value: Optional[str], base: Path) -> Optional[Path]:
    if value is None:
        return None
    p = Path(value)
    return p if p.is_absolute() else base / p


def config_from_dict(doc: dict, base: Path = Path(".")) -> ToolConfig:
    top = {"paths", "crossbar", "noise", "timing", "train", "simulate", "perf", "sweep", "seed"}
    extra = set(doc) - top
    if extra:
        raise ConfigurationError(f"unknown top-level keys: {', '.join(sorted(extra))}")
    raw_paths = dict(doc.get("paths", {}))
    paths = _build(Paths, {k: _resolve(v, base) for k, v in raw_paths.items()}, "paths")
    if "out" not in raw_paths:
        paths = replace(paths, out=Path("out"))
    timing_sec = dict(doc.get("timing", {}))
    perf_sec = dict(doc.get("perf", {}))
    if set(perf_sec) - {"bits"}:
        raise ConfigurationError(f"[perf] unknown keys: {', '.join(sorted(set(perf_sec) - {'bits'}))}")
    cfg = ToolConfig(
        paths=paths,
        crossbar=_crossbar(doc.get("crossbar", {})),
        noise=_build(NoiseParams, doc.get("noise", {}), "noise", {"prog_poly": tuple}),
        timing=_build(TimingParams, timing_sec, "timing",
                      {"t_cim": lambda d: {int(k): float(v) for k, v in d.items()}}),
        train=_build(TrainConfig, doc.get("train", {}), "train"),
        simulate=_build(SimulateOptions, doc.get("simulate", {}), "simulate", {"checkpoints": tuple}),
        sweep=_build(SweepOptions, doc.get("sweep", {}), "sweep",
                     {"schemes": tuple, "bits": tuple, "tiles": tuple, "fp_units": tuple}),
        bits=int(perf_sec.get("bits", 8)),
        seed=int(doc.get("seed", 0)),
    )
    validate(cfg)
    return cfg


def validate(cfg: ToolConfig) -> None:
    """Range checks that cut across sections, and existence of input files."""
    if cfg.bits not in cfg.timing.t_cim:
        raise ConfigurationError(f"bits={cfg.bits} has no CiM cycle time")
    if cfg.seed < 0:
        raise ConfigurationError("seed must be non-negative")
    try:
        cfg.simulate.times.validate(cfg.noise)
        cfg.protocol()
    except ValueError as exc:
        raise ConfigurationError(str(exc)) from None
    if cfg.simulate.converter_mode not in ("auto", "trained", "heuristic", "calibrated"):
        raise ConfigurationError(f"unknown converter_mode {cfg.simulate.converter_mode!r}")
    for s in cfg.sweep.schemes:
        if s not in SCHEMES:
            raise ConfigurationError(f"[sweep] unknown scheme {s!r}")
    for t in cfg.sweep.tiles:
        if t not in TILE_PRESETS:
            raise ConfigurationError(f"[sweep] unknown tile {t!r}")
    for name in INPUT_PATHS:
        p = getattr(cfg.paths, name)
        if p is not None and not p.exists():
            raise ConfigurationError(f"{name.replace('_', ' ')} not found: {p}")


def load_config(path=None, overrides: Optional[dict[str, Any]] = None) -> ToolConfig:
    """Read a TOML file (or start from defaults) and apply dotted-key overrides.

    ``overrides`` maps keys such as ``"paths.dataset"`` or ``"seed"`` to
    values; ``None`` values are ignored so unset command-line flags fall
    through to the file.
    """
    doc: dict = {}
    base = Path(".")
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigurationError(f"config file not found: {path}")
        try:
            doc = tomllib.loads(path.read_text())
        except tomllib.TOMLDecodeError as exc:
            raise ConfigurationError(f"{path}: {exc}") from None
        base = path.parent
    for dotted, value in (overrides or {}).items():
        if value is None:
            continue
        *sections, key = dotted.split(".")
        node = doc
        for s in sections:
            node = node.setdefault(s, {})
        if sections == ["paths"]:
            # command-line paths are relative to the working directory
            value = str(Path(value).resolve())
        node[key] = value
    return config_from_dict(doc, base)
