"""Statistical PCM device model: programming noise, drift, read noise, GDC.

Conductances are stored normalized to ``g_max`` (so ``g`` lies in [0, 1] for
targets).  The published programming-noise polynomial and the read-noise
``Q`` term are fitted on conductance values; ``NoiseParams.argument_units``
selects whether they are evaluated on the normalized value (default) or on
the value in microsiemens.  Either way the polynomial output is read as
microsiemens and divided by ``g_max`` to get a normalized standard deviation.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import CalibrationError, DomainError
from .tensor_net import load_tensor, save_tensor


@dataclass(frozen=True)
class NoiseParams:
    prog_poly: tuple[float, float, float] = (-1.1731, 1.9650, 0.2635)  # (a2, a1, a0)
    t_c: float = 25.0
    t_r: float = 250e-9
    q_coeff: float = 0.0088
    q_exp: float = 0.65
    q_cap: float = 0.2
    # placeholders: only "normally distributed" is known about nu
    drift_nu_mean: float = 0.06
    drift_nu_std: float = 0.01
    g_max: float = 25e-6  # siemens
    argument_units: str = "normalized"  # or "uS"
    read_mode: str = "per_layer"  # or "per_vector"

    def __post_init__(self):
        if self.t_c <= 0 or self.t_r <= 0:
            raise ValueError("t_c and t_r must be positive")
        if not 0 < self.q_cap <= 1:
            raise ValueError("q_cap must lie in (0, 1]")
        if self.g_max <= 0:
            raise ValueError("g_max must be positive")
        if self.argument_units not in ("normalized", "uS"):
            raise ValueError(f"argument_units must be 'normalized' or 'uS', not {self.argument_units!r}")
        if self.read_mode not in ("per_layer", "per_vector"):
            raise ValueError(f"read_mode must be 'per_layer' or 'per_vector', not {self.read_mode!r}")

    @property
    def g_max_us(self) -> float:
        return self.g_max * 1e6

    @property
    def unit_scale(self) -> float:
        """Factor turning a microsiemens-valued std into normalized units."""
        return 1.0 / self.g_max_us

    def _arg(self, g):
        g = np.asarray(g, dtype=np.float64)
        return g * self.g_max_us if self.argument_units == "uS" else g

    @classmethod
    def noiseless(cls, **kw) -> "NoiseParams":
        base = dict(prog_poly=(0.0, 0.0, 0.0), q_coeff=0.0, drift_nu_mean=0.0, drift_nu_std=0.0)
        base.update(kw)
        return cls(**base)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["prog_poly"] = list(self.prog_poly)
        return d


def sigma_prog(g_target, params: NoiseParams = NoiseParams()):
    """Programming-noise std in microsiemens: ``max(a2 g^2 + a1 g + a0, 0)``."""
    a2, a1, a0 = params.prog_poly
    g = params._arg(g_target)
    return np.maximum(a2 * g * g + a1 * g + a0, 0.0)


def q_factor(g_target, params: NoiseParams = NoiseParams()):
    g = params._arg(g_target)
    with np.errstate(divide="ignore", invalid="ignore"):
        q = params.q_coeff / np.power(np.abs(g), params.q_exp)
    # g -> 0 sends the ratio to +inf, the cap takes over
    return np.where(g == 0, params.q_cap if params.q_coeff > 0 else 0.0, np.minimum(q, params.q_cap))


def drift_factor(t, nu, params: NoiseParams = NoiseParams()):
    t = np.asarray(t, dtype=np.float64)
    if np.any(t < params.t_c):
        raise DomainError(f"drift is defined for t >= t_c = {params.t_c} s")
    return np.power(t / params.t_c, -np.asarray(nu, dtype=np.float64))


def drift(g_programmed, nu, t, params: NoiseParams = NoiseParams()):
    return np.asarray(g_programmed, dtype=np.float64) * drift_factor(t, nu, params)


def read_sigma(g_drifted, g_target, t, params: NoiseParams = NoiseParams()):
    if np.any(np.asarray(t) < 0):
        raise DomainError("read time must be non-negative")
    root = np.sqrt(np.log((t + params.t_r) / params.t_r))
    return np.abs(np.asarray(g_drifted, dtype=np.float64)) * q_factor(g_target, params) * root


@dataclass(frozen=True)
class ConductanceState:
    """Differential conductance pair for one crossbar block.

    Arrays carry a leading polarity axis: index 0 is the positive device,
    index 1 the negative one, each of shape ``(rows, cols)``.
    """

    g_target: np.ndarray
    g_programmed: Optional[np.ndarray] = None
    nu: Optional[np.ndarray] = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        gt = self.g_target
        if gt.ndim != 3 or gt.shape[0] != 2:
            raise ValueError(f"g_target must have shape (2, rows, cols), got {gt.shape}")
        if np.any(gt < 0) or np.any(gt > 1):
            raise ValueError("target conductances must lie in [0, 1]")
        if np.any((gt[0] > 0) & (gt[1] > 0)):
            raise ValueError("a differential pair may hold at most one nonzero target")

    @property
    def shape(self) -> tuple[int, int]:
        return self.g_target.shape[1:]

    @property
    def programmed(self) -> bool:
        return self.g_programmed is not None

    def signed_target(self) -> np.ndarray:
        return self.g_target[0] - self.g_target[1]


def program(state: ConductanceState, seed, params: NoiseParams = NoiseParams()) -> ConductanceState:
    """Apply programming noise and draw per-device drift coefficients."""
    rng = np.random.default_rng(seed)
    gt = state.g_target.astype(np.float64)
    sigma = sigma_prog(gt, params) * params.unit_scale
    g_p = gt + sigma * rng.standard_normal(gt.shape)
    nu = params.drift_nu_mean + params.drift_nu_std * rng.standard_normal(gt.shape)
    nu = np.maximum(nu, 0.0)
    return replace(state, g_programmed=g_p, nu=nu)


def drifted(state: ConductanceState, t: float, params: NoiseParams = NoiseParams()) -> np.ndarray:
    if not state.programmed:
        raise ValueError("state has not been programmed")
    return drift(state.g_programmed, state.nu, t, params)


def read(state: ConductanceState, t: float, seed, params: NoiseParams = NoiseParams()) -> np.ndarray:
    """One realization of the instantaneous conductances at time ``t``."""
    g_d = drifted(state, t, params)
    sigma = read_sigma(g_d, state.g_target, t, params)
    if not np.any(sigma):
        return g_d
    rng = np.random.default_rng(seed)
    return g_d + sigma * rng.standard_normal(g_d.shape)


def gdc_response(g: np.ndarray, probe: Optional[np.ndarray] = None) -> float:
    """Summed absolute column response of a differential array to ``probe``."""
    diff = g[0] - g[1]
    if probe is None:
        probe = np.ones(diff.shape[0])
    return float(np.sum(np.abs(probe @ diff)))


def gdc_factor(state: ConductanceState, t: float, calibration_input=None,
               params: NoiseParams = NoiseParams()) -> float:
    """Digital output scale that undoes the common drift component at ``t``.

    The reference response is taken on the programmed state (time ``t_c``);
    the default probe is the all-ones full-scale input vector.
    """
    ref = gdc_response(state.g_programmed, calibration_input)
    now = gdc_response(drifted(state, t, params), calibration_input)
    if now == 0.0:
        raise CalibrationError("GDC probe response is zero; cannot compensate")
    return ref / now


# ---------------------------------------------------------------------------
# persistence


def save_state(state: ConductanceState, directory, name: str, timestamps: Optional[dict] = None) -> Path:
    """Dump ``state`` as AONTENSR arrays plus a JSON manifest; returns the manifest path."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    files = {}
    for key in ("g_target", "g_programmed", "nu"):
        arr = getattr(state, key)
        if arr is None:
            continue
        fname = f"{name}.{key}.aont"
        save_tensor(directory / fname, arr)
        files[key] = fname
    manifest = {
        "name": name,
        "shape": list(state.shape),
        "polarity": ["+", "-"],
        "files": files,
        "timestamps": timestamps or {},
        "meta": state.meta,
    }
    path = directory / f"{name}.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def load_state(manifest_path) -> ConductanceState:
    manifest_path = Path(manifest_path)
    m = json.loads(manifest_path.read_text())
    arrays = {k: load_tensor(manifest_path.parent / f).astype(np.float64) for k, f in m["files"].items()}
    return ConductanceState(
        g_target=arrays["g_target"],
        g_programmed=arrays.get("g_programmed"),
        nu=arrays.get("nu"),
        meta=m.get("meta", {}),
    )
