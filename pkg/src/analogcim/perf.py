"""Analytic latency, energy and area model of the layer-serial accelerator.

Each analog layer runs alone on the array.  For every input vector the array
integrates for ``t_cim(bits)`` once per ADC phase while the digital datapath
applies two pipelined floating-point scalings per output word; the slower of
the two sets the per-vector time (pipeline fill is ignored).  Sub-GEMMs of a
split layer run back to back.
"""

from __future__ import annotations

import csv
import io
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Mapping, Optional, Sequence

import numpy as np

from .errors import CalibrationError, ConfigurationError, MappingError
from .mapper import SCHEMES, CrossbarConfig, MappingPlan, place
from .tensor_net import NetworkSpec


@dataclass(frozen=True)
class TimingParams:
    t_cim: Mapping[int, float] = field(default_factory=lambda: {8: 130e-9, 6: 34e-9, 4: 10e-9})
    t_digital: float = 1.25e-9
    fp_ops_per_output: int = 2

    def __post_init__(self):
        object.__setattr__(self, "t_cim", {int(k): float(v) for k, v in self.t_cim.items()})
        if self.t_digital <= 0 or self.fp_ops_per_output < 1:
            raise ValueError("t_digital must be positive and fp_ops_per_output >= 1")
        bits = sorted(self.t_cim)
        times = [self.t_cim[b] for b in bits]
        if any(t <= 0 for t in times) or any(a >= b for a, b in zip(times, times[1:])):
            raise ValueError("t_cim must be positive and strictly increasing with bit width")

    def cim(self, bits: int) -> float:
        try:
            return self.t_cim[int(bits)]
        except KeyError:
            raise ConfigurationError(f"no CiM cycle time for {bits}-bit activations "
                                     f"(known: {sorted(self.t_cim)})") from None


@dataclass(frozen=True)
class EnergyParams:
    """Per-event energies in joules, static power in watts."""

    e_dac: Mapping[int, float]
    e_adc: Mapping[int, float]
    e_fp: float = 0.0
    e_sram: float = 0.0
    p_static: float = 0.0
    residuals: Optional[dict] = None

    def __post_init__(self):
        object.__setattr__(self, "e_dac", {int(k): float(v) for k, v in self.e_dac.items()})
        object.__setattr__(self, "e_adc", {int(k): float(v) for k, v in self.e_adc.items()})
        vals = list(self.e_dac.values()) + list(self.e_adc.values()) + [self.e_fp, self.e_sram, self.p_static]
        if any(v < 0 for v in vals):
            raise ValueError("energy constants must be non-negative")

    @classmethod
    def zero(cls, bits=(4, 6, 8)) -> "EnergyParams":
        return cls({b: 0.0 for b in bits}, {b: 0.0 for b in bits})

    def dac(self, bits: int) -> float:
        return self._lookup(self.e_dac, bits, "e_dac")

    def adc(self, bits: int) -> float:
        return self._lookup(self.e_adc, bits, "e_adc")

    @staticmethod
    def _lookup(table, bits, name):
        try:
            return table[int(bits)]
        except KeyError:
            raise ConfigurationError(f"{name} has no entry for {bits} bits") from None

    def to_dict(self) -> dict:
        d = asdict(self)
        d["e_dac"] = {str(k): v for k, v in sorted(self.e_dac.items())}
        d["e_adc"] = {str(k): v for k, v in sorted(self.e_adc.items())}
        if d["residuals"] is None:
            del d["residuals"]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "EnergyParams":
        d = dict(d)
        try:
            return cls(e_dac=d.pop("e_dac"), e_adc=d.pop("e_adc"), **d)
        except (KeyError, TypeError) as exc:
            raise ConfigurationError(f"malformed energy parameters: {exc}") from None


@dataclass(frozen=True)
class AreaParams:
    a_cim: float = 3.07
    a_digital_sram: float = 0.15
    totals: Mapping[str, float] = field(default_factory=lambda: {"M1": 4.11, "M2": 3.60, "M4": 3.34})
    ref_rows: int = 1024
    ref_cols: int = 512


# ---------------------------------------------------------------------------
# throughput


def peak_throughput(cfg: CrossbarConfig, bits: int, timing: TimingParams = TimingParams()) -> float:
    """Peak TOPS of a fully used array: 2*rows*cols / (adc_mux * t_cim)."""
    return 2 * cfg.rows * cfg.cols / (cfg.adc_mux * timing.cim(bits)) / 1e12


def vector_latency(cols: int, bits: int, cfg: CrossbarConfig, timing: TimingParams = TimingParams()) -> float:
    """Time to push one input vector through a block with ``cols`` used columns."""
    phases = math.ceil(cols / cfg.adc_count)
    analog = phases * timing.cim(bits)
    digital = math.ceil(cols / cfg.fp_units) * timing.fp_ops_per_output * timing.t_digital
    return max(analog, digital)


def layer_vectors(net: NetworkSpec) -> dict[str, int]:
    """Input vectors per inference of every analog layer (output pixels for convs)."""
    shapes = net.shapes()
    out = {}
    for layer, out_shape in zip(net.layers, shapes[1:]):
        if layer.analog:
            out[layer.name] = int(np.prod(out_shape[1:])) if layer.kind != "dense" else 1
    return out


def layer_latency(plan: MappingPlan, layer: str, n_vectors: int, bits: int,
                  timing: TimingParams = TimingParams()) -> float:
    parts = plan.layer_placements(layer)
    if not parts:
        raise MappingError(f"layer {layer!r} is not placed", [layer])
    per_vector = sum(vector_latency(p.cols, bits, plan.cfg, timing) for p in parts)
    return n_vectors * per_vector


def serial_phases(plan: MappingPlan, net: NetworkSpec) -> int:
    """Array integrations per inference: sum over layers of vectors x phases of every part."""
    vectors = layer_vectors(net)
    return sum(vectors[p.layer] * plan.phases(p) for p in plan.placements)


# ---------------------------------------------------------------------------
# whole-model report


@dataclass
class LayerPerf:
    name: str
    ops: float
    n_vectors: int
    phases: int
    latency: float
    energy: float

    @property
    def tops(self) -> float:
        return self.ops / self.latency / 1e12 if self.latency else 0.0

    @property
    def tops_per_w(self) -> float:
        return self.ops / self.energy / 1e12 if self.energy else math.inf

    def row(self) -> dict:
        return {"layer": self.name, "ops": self.ops, "n_vectors": self.n_vectors, "phases": self.phases,
                "latency_s": self.latency, "energy_j": self.energy, "tops": self.tops,
                "tops_per_w": self.tops_per_w}


@dataclass
class PerfReport:
    layers: list[LayerPerf]
    utilization: float
    effective_utilization: float
    bits: int
    scheme: str
    tile: str

    @property
    def latency(self) -> float:
        return sum(layer.latency for layer in self.layers)

    @property
    def inf_per_s(self) -> float:
        return 1.0 / self.latency if self.latency else math.inf

    @property
    def energy(self) -> float:
        return sum(layer.energy for layer in self.layers)

    @property
    def ops(self) -> float:
        return sum(layer.ops for layer in self.layers)

    @property
    def tops(self) -> float:
        return self.ops / self.latency / 1e12 if self.latency else 0.0

    @property
    def tops_per_w(self) -> float:
        return self.ops / self.energy / 1e12 if self.energy else math.inf

    def summary(self) -> dict:
        return {"bits": self.bits, "scheme": self.scheme, "tile": self.tile,
                "latency_s": self.latency, "inf_per_s": self.inf_per_s, "energy_j": self.energy,
                "ops": self.ops, "tops": self.tops, "tops_per_w": self.tops_per_w,
                "utilization": self.utilization, "effective_utilization": self.effective_utilization}

    def to_csv(self) -> str:
        return rows_to_csv([dict(layer.row(), bits=self.bits, scheme=self.scheme, tile=self.tile)
                            for layer in self.layers])

    def to_json(self) -> str:
        return json.dumps({"summary": self.summary(), "layers": [layer.row() for layer in self.layers]},
                          indent=2, sort_keys=True) + "\n"


def model_perf(plan: MappingPlan, net: NetworkSpec, bits: int, energy: Optional[EnergyParams],
               timing: TimingParams = TimingParams()) -> PerfReport:
    """Latency and energy of one inference of ``net`` executed layer by layer.

    Dynamic energy per vector and part is ``rows*e_dac + cols*e_adc +
    fp_ops_per_output*cols*e_fp + (rows+cols)*e_sram``; static power is
    charged over the layer latency.  Ops count the useful MACs (structural
    zeros of expanded depthwise blocks excluded), two ops per MAC.
    """
    if energy is None:
        raise ConfigurationError("energy parameters are required (run calibration first)")
    from .mapper import utilization, effective_utilization

    vectors = layer_vectors(net)
    e_dac, e_adc = energy.dac(bits), energy.adc(bits)
    layers = []
    for name in plan.splits:
        parts = plan.layer_placements(name)
        n = vectors[name]
        latency = layer_latency(plan, name, n, bits, timing)
        dyn = sum(p.rows * e_dac + p.cols * e_adc + timing.fp_ops_per_output * p.cols * energy.e_fp
                  + (p.rows + p.cols) * energy.e_sram for p in parts)
        layers.append(LayerPerf(
            name=name,
            ops=2.0 * sum(p.nonzeros for p in parts) * n,
            n_vectors=n,
            phases=sum(plan.phases(p) for p in parts),
            latency=latency,
            energy=n * dyn + energy.p_static * latency,
        ))
    frac, _ = utilization(plan)
    return PerfReport(layers, frac, effective_utilization(plan), bits, plan.cfg.scheme, plan.cfg.tile_name)


def full_array_power(cfg: CrossbarConfig, bits: int, energy: EnergyParams,
                     timing: TimingParams = TimingParams()) -> float:
    """Power drawn while every cell of the array is busy."""
    t = cfg.adc_mux * timing.cim(bits)
    e = (cfg.rows * energy.dac(bits) + cfg.cols * energy.adc(bits)
         + timing.fp_ops_per_output * cfg.cols * energy.e_fp)
    return e / t + energy.p_static


def peak_efficiency(cfg: CrossbarConfig, bits: int, energy: EnergyParams,
                    timing: TimingParams = TimingParams()) -> float:
    """TOPS/W at full utilization."""
    return peak_throughput(cfg, bits, timing) / full_array_power(cfg, bits, energy, timing)


# ---------------------------------------------------------------------------
# energy calibration


@dataclass(frozen=True)
class EnergyPriors:
    """Fixed splits that make the full-utilization fit identifiable.

    Full-array power only constrains ``rows*e_dac(b) + cols*e_adc(b) +
    2*cols*e_fp`` per bit width, so the DAC/ADC ratio and ``e_fp`` are set
    here rather than fitted.
    """

    adc_per_dac: float = 8.0
    e_fp: float = 0.5e-12


def _design_row(cfg: CrossbarConfig, bits: int, bit_list: Sequence[int], timing: TimingParams,
                free: bool, priors: EnergyPriors) -> tuple[list[float], float]:
    t = cfg.adc_mux * timing.cim(bits)
    k = bit_list.index(bits)
    fp = timing.fp_ops_per_output * cfg.cols
    if free:
        row = [0.0] * (2 * len(bit_list) + 2)
        row[k] = cfg.rows / t
        row[len(bit_list) + k] = cfg.cols / t
        row[-2] = fp / t
        row[-1] = 1.0
        return row, 0.0
    row = [0.0] * (len(bit_list) + 1)
    row[k] = (cfg.rows / priors.adc_per_dac + cfg.cols) / t
    row[-1] = 1.0
    return row, fp * priors.e_fp / t


def calibrate_energy(peak_table: Mapping[tuple[str, int], float], rows: int = 1024, cols: int = 512,
                     timing: TimingParams = TimingParams(), priors: EnergyPriors = EnergyPriors(),
                     free: bool = False, cond_limit: float = 1e10) -> EnergyParams:
    """Fit energy constants to full-utilization TOPS/W points.

    ``peak_table`` maps ``(scheme, bits)`` to TOPS/W.  The measured power at
    each point is ``peak_TOPS / TOPS_per_W``; the fit minimizes relative
    power residuals.  With ``free=True`` every DAC, ADC and FP constant is a
    separate unknown, which is rank deficient for single-array data and
    raises ``CalibrationError`` with the condition number.
    """
    if len(peak_table) < 8:
        raise CalibrationError(f"need at least 8 calibration points, got {len(peak_table)}")
    keys = sorted(peak_table, key=lambda k: (SCHEMES[k[0].upper()], int(k[1])))
    bit_list = sorted({int(b) for _, b in keys})
    a_rows, rhs, power = [], [], []
    for scheme, bits in keys:
        cfg = CrossbarConfig(rows=rows, cols=cols, adc_mux=SCHEMES[scheme.upper()])
        p = peak_throughput(cfg, bits, timing) / float(peak_table[(scheme, bits)])
        row, fixed = _design_row(cfg, int(bits), bit_list, timing, free, priors)
        a_rows.append(row)
        rhs.append(p - fixed)
        power.append(p)
    a = np.array(a_rows)
    b = np.array(rhs)
    w = 1.0 / np.array(power)
    aw = a * w[:, None]
    # column equilibration keeps the condition number about structure, not units
    col_norm = np.linalg.norm(aw, axis=0)
    col_norm[col_norm == 0] = 1.0
    scaled = aw / col_norm
    sv = np.linalg.svd(scaled, compute_uv=False)
    cond = sv[0] / sv[-1] if sv[-1] > 0 else math.inf
    rank = int(np.sum(sv > sv[0] * 1e-12))
    if rank < a.shape[1] or cond > cond_limit:
        raise CalibrationError(
            f"energy fit is rank deficient: rank {rank} of {a.shape[1]} unknowns, "
            f"condition number {cond:.3g}")
    sol, *_ = np.linalg.lstsq(scaled, b * w, rcond=None)
    x = sol / col_norm
    tol = 1e-9 * np.max(np.abs(x))
    if np.any(x < -tol):
        raise CalibrationError(f"fit produced negative energy constants: {x.tolist()}")
    x = np.maximum(x, 0.0)
    nb = len(bit_list)
    if free:
        e_dac = dict(zip(bit_list, x[:nb]))
        e_adc = dict(zip(bit_list, x[nb:2 * nb]))
        e_fp, p_static = float(x[-2]), float(x[-1])
    else:
        e_adc = dict(zip(bit_list, x[:nb]))
        e_dac = {bb: v / priors.adc_per_dac for bb, v in e_adc.items()}
        e_fp, p_static = priors.e_fp, float(x[-1])
    fitted = EnergyParams(e_dac=e_dac, e_adc=e_adc, e_fp=e_fp, p_static=p_static)
    residuals = {}
    for scheme, bits in keys:
        cfg = CrossbarConfig(rows=rows, cols=cols, adc_mux=SCHEMES[scheme.upper()])
        model = peak_efficiency(cfg, bits, fitted, timing)
        target = float(peak_table[(scheme, bits)])
        residuals[f"{scheme}-{bits}b"] = (model - target) / target
    return EnergyParams(e_dac=e_dac, e_adc=e_adc, e_fp=e_fp, p_static=p_static,
                        residuals={"relative_tops_per_w": residuals, "condition_number": float(cond)})


def synthetic_peak_table(energy: EnergyParams, rows: int = 1024, cols: int = 512,
                         timing: TimingParams = TimingParams(), schemes=("M1", "M2", "M4"),
                         bits=(4, 6, 8)) -> dict[tuple[str, int], float]:
    """Full-utilization TOPS/W generated from known constants."""
    return {(s, b): peak_efficiency(CrossbarConfig(rows=rows, cols=cols, adc_mux=SCHEMES[s]), b, energy, timing)
            for s in schemes for b in bits}


# ---------------------------------------------------------------------------
# area


def area(cfg: CrossbarConfig, params: AreaParams = AreaParams()) -> dict[str, float]:
    """Area breakdown in mm^2.

    Tabulated totals of the reference array are used as is.  Other ADC
    counts follow the straight line through the M1 and M4 totals; other
    array sizes scale the CiM cell area with the number of cells.
    """
    m1 = params.totals["M1"]
    m4 = params.totals["M4"]
    adc_m1 = params.ref_cols // SCHEMES["M1"]
    adc_m4 = params.ref_cols // SCHEMES["M4"]
    per_adc = (m1 - m4) / (adc_m1 - adc_m4)
    base = m4 - per_adc * adc_m4  # everything except the ADC bank
    is_ref = cfg.rows == params.ref_rows and cfg.cols == params.ref_cols
    cell_frac = cfg.rows * cfg.cols / (params.ref_rows * params.ref_cols)
    adc_area = per_adc * cfg.adc_count
    if is_ref and cfg.scheme in params.totals:
        total = params.totals[cfg.scheme]
    else:
        total = base + (cell_frac - 1.0) * params.a_cim + adc_area
    return {
        "total": total,
        "interpolated": base + (cell_frac - 1.0) * params.a_cim + adc_area,
        "cim": params.a_cim * cell_frac,
        "digital_sram": params.a_digital_sram,
        "adc": adc_area,
    }


# ---------------------------------------------------------------------------
# sweeps


def rows_to_csv(rows: Sequence[dict]) -> str:
    if not rows:
        return ""
    fieldnames = list(dict.fromkeys(k for row in rows for k in row))  # ordered union
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=fieldnames, restval="", lineterminator="\r\n")
    writer.writeheader()
    for row in rows:
        writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
    return buf.getvalue()


@dataclass(frozen=True)
class SweepPoint:
    scheme: str
    bits: int
    tile: str = "1024x512"
    fp_units: int = 32


def peak_row(point: SweepPoint, energy: Optional[EnergyParams], timing: TimingParams = TimingParams(),
             area_params: AreaParams = AreaParams()) -> dict:
    cfg = CrossbarConfig.from_names(point.tile, point.scheme, fp_units=point.fp_units)
    row = {"tile": point.tile, "scheme": point.scheme, "bits": point.bits, "fp_units": point.fp_units,
           "peak_tops": peak_throughput(cfg, point.bits, timing),
           "area_mm2": area(cfg, area_params)["total"]}
    if energy is not None:
        row["peak_power_w"] = full_array_power(cfg, point.bits, energy, timing)
        row["peak_tops_per_w"] = peak_efficiency(cfg, point.bits, energy, timing)
    return row


def _sweep_one(args) -> dict:
    point, net, energy, timing, split, max_tiles = args
    row = peak_row(point, energy, timing)
    if net is not None:
        cfg = CrossbarConfig.from_names(point.tile, point.scheme, fp_units=point.fp_units,
                                        split=split, max_tiles=max_tiles)
        plan = place(net, cfg)
        rep = model_perf(plan, net, point.bits, energy or EnergyParams.zero(), timing)
        row.update({"model_inf_per_s": rep.inf_per_s, "model_tops": rep.tops,
                    "model_utilization": rep.utilization,
                    "model_effective_utilization": rep.effective_utilization})
        if energy is not None:
            row.update({"model_j_per_inf": rep.energy, "model_tops_per_w": rep.tops_per_w})
    return row


def sweep(points: Sequence[SweepPoint], net: Optional[NetworkSpec] = None,
          energy: Optional[EnergyParams] = None, timing: TimingParams = TimingParams(),
          jobs: int = 1, split: bool = False, max_tiles: Optional[int] = 1) -> list[dict]:
    """Evaluate every configuration; rows come back in input order."""
    work = [(p, net, energy, timing, split, max_tiles) for p in points]
    if jobs > 1 and len(work) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(_sweep_one, work))
    return [_sweep_one(w) for w in work]
