"""Inference-time simulation of a network deployed on PCM crossbars.

Per analog layer the pipeline is: clip the weights, rescale by ``max|W|``,
split into a differential conductance pair, program (noise plus a drift
coefficient per device), then at every evaluation time drift analytically,
add read noise and execute the MVM between a DAC and an ADC quantizer.

MVM arithmetic for one block::

    x_norm  = DAC code / (2^(b_DAC-1) - 1)
    current = x_norm @ (G+ - G-)            # times the GDC factor when enabled
    code    = ADC code of (current * max|W| * r_DAC / r_ADC) at full scale 1
    y       = code * r_ADC / (2^(b_ADC-1) - 1) + bias

With the trained constraint ``r_DAC = r_ADC * S / W_max`` the analog gain in
the third line is the global ``S`` whenever ``max|W| = W_max``.
"""

from __future__ import annotations

import csv
import io
import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .converters import (
    ConverterAttachment,
    QuantizerParams,
    activation_percentile,
    heuristic_effective_gain,
    quantize,
)
from .errors import ConfigurationError, MappingError
from .mapper import CrossbarConfig, MappingPlan, place, weights_to_conductances
from .pcm import (
    ConductanceState,
    NoiseParams,
    drifted,
    gdc_response,
    program,
    read_sigma,
)
from .tensor_net import (
    ANALOG_KINDS,
    NetworkSpec,
    add_bias,
    apply_digital,
    conv_output_hw,
    forward,
    im2col,
    linear_op,
)

DEFAULT_CHECKPOINTS = (25.0, 3600.0, 86400.0, 2.592e6, 3.1536e7)


@dataclass(frozen=True)
class DeploymentTimes:
    checkpoints: tuple[float, ...] = DEFAULT_CHECKPOINTS

    def __post_init__(self):
        cps = tuple(float(t) for t in self.checkpoints)
        object.__setattr__(self, "checkpoints", cps)
        if not cps:
            raise ConfigurationError("at least one checkpoint is required")
        if any(b <= a for a, b in zip(cps, cps[1:])):
            raise ConfigurationError("checkpoints must be strictly increasing")

    def validate(self, noise: NoiseParams) -> None:
        if self.checkpoints[0] < noise.t_c:
            raise ConfigurationError(f"checkpoints must be >= t_c = {noise.t_c} s")


@dataclass(frozen=True)
class EvalProtocol:
    n_runs: int = 25
    seed: int = 0
    gdc: bool = True

    def __post_init__(self):
        if self.n_runs < 2:
            raise ConfigurationError("n_runs must be >= 2 to report a standard deviation")


# ---------------------------------------------------------------------------
# converter ranges


@dataclass(frozen=True)
class ConverterSetup:
    attachments: dict[str, ConverterAttachment]
    S: Optional[float]
    mode: str


def _layer_inputs(net: NetworkSpec, x: np.ndarray) -> dict[str, tuple[np.ndarray, np.ndarray]]:
    """Floating-point input and pre-activation of every analog layer."""
    out = {}
    h = np.asarray(x, dtype=np.float64)
    for layer in net.layers:
        if layer.kind in ANALOG_KINDS:
            y = linear_op(h, layer, layer.weights.astype(np.float64))
            if layer.analog:
                out[layer.name] = (h, y)
            h = add_bias(y, layer)
        else:
            h = apply_digital(h, layer)
    return out


def _w_scale(net: NetworkSpec, name: str) -> float:
    return float(np.max(np.abs(clipped_weights(net, name))))


def clipped_weights(net: NetworkSpec, name: str) -> np.ndarray:
    layer = net.layer(name)
    entry = ((net.converters or {}).get("layers") or {}).get(name, {})
    w = layer.weights.astype(np.float64)
    if "w_max" in entry:
        w = np.clip(w, entry["w_min"], entry["w_max"])
    return w


def prepare_converters(net: NetworkSpec, adc_bits: Optional[int] = None, mode: str = "auto",
                       calibration_x: Optional[np.ndarray] = None, heuristic_rows: Optional[int] = 1024,
                       percentile: float = 99.995, g_max: float = 25e-6) -> ConverterSetup:
    """Per-layer DAC/ADC ranges.

    ``trained`` reads the ranges stored with the network.  ``heuristic``
    sets ``r_DAC`` to the input percentile and derives ``r_ADC`` from the
    array-statistics gain.  ``calibrated`` picks ``r_DAC = max|x|`` and one
    gain ``S`` small enough that no layer's ADC saturates on the
    calibration data.  ``auto`` uses trained ranges when present, else the
    heuristic.  ``heuristic_rows=None`` uses each layer's own row count in
    place of the crossbar size.
    """
    stored = net.converters or {}
    if mode == "auto":
        mode = "trained" if stored.get("trained") else "heuristic"
    if mode == "trained":
        if not stored.get("trained"):
            raise ConfigurationError("network carries no trained converter ranges")
        bits = int(adc_bits if adc_bits is not None else stored["adc_bits"])
        atts = {}
        for layer in net.analog_layers():
            e = stored["layers"].get(layer.name)
            if e is None or "r_adc" not in e:
                raise ConfigurationError(f"no trained ranges for layer {layer.name!r}")
            atts[layer.name] = ConverterAttachment.build(layer.name, bits, e["r_dac"], e["r_adc"], True)
        return ConverterSetup(atts, float(stored["S"]), mode)
    if mode not in ("heuristic", "calibrated"):
        raise ConfigurationError(f"unknown converter mode {mode!r}")
    if calibration_x is None:
        raise ConfigurationError(f"{mode} converter ranges need calibration data")
    bits = int(adc_bits if adc_bits is not None else 8)
    acts = _layer_inputs(net, calibration_x)
    atts = {}
    if mode == "heuristic":
        for name, (h, _) in acts.items():
            rows = heuristic_rows or net.layer(name).crossbar_shape[0]
            s_eff = heuristic_effective_gain(bits, bits + 1, g_max=g_max, crossbar_rows=rows)
            r_dac = activation_percentile(h, percentile)
            if r_dac <= 0:
                r_dac = 1.0
            r_adc = _w_scale(net, name) * r_dac / s_eff
            atts[name] = ConverterAttachment.build(name, bits, r_dac, r_adc)
        return ConverterSetup(atts, s_eff if heuristic_rows else None, mode)
    r_dacs, ratios = {}, []
    for name, (h, y) in acts.items():
        r_dacs[name] = float(np.max(np.abs(h))) or 1.0
        y_max = float(np.max(np.abs(y))) or 1.0
        ratios.append(_w_scale(net, name) * r_dacs[name] / y_max)
    S = min(ratios)
    for name in acts:
        r_adc = _w_scale(net, name) * r_dacs[name] / S
        atts[name] = ConverterAttachment.build(name, bits, r_dacs[name], r_adc)
    return ConverterSetup(atts, S, mode)


# ---------------------------------------------------------------------------
# deployment


@dataclass(frozen=True)
class LayerDeployment:
    name: str
    state: ConductanceState
    attach: ConverterAttachment
    w_scale: float
    parts: tuple  # SubGemm blocks of this layer
    gdc_ref: float

    @property
    def gain(self) -> float:
        return self.w_scale * self.attach.dac.r_max / self.attach.adc.r_max


@dataclass(frozen=True)
class DeployedModel:
    net: NetworkSpec
    layers: dict[str, LayerDeployment]
    noise: NoiseParams
    plan: MappingPlan
    S: Optional[float] = None

    def gains(self) -> dict[str, float]:
        return {k: v.gain for k, v in self.layers.items()}


def deploy(net: NetworkSpec, plan: Optional[MappingPlan], noise: NoiseParams, seed, converters: ConverterSetup,
           ) -> DeployedModel:
    """Program every analog layer of ``net`` once."""
    if plan is None:
        plan = place(net, CrossbarConfig(max_tiles=None, split=True))
    missing = [layer.name for layer in net.analog_layers() if layer.name not in plan.splits]
    if missing:
        raise MappingError(f"layers missing from the mapping plan: {', '.join(missing)}", missing)
    root = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    seeds = root.spawn(len(net.analog_layers()))
    layers = {}
    for layer, ss in zip(net.analog_layers(), seeds):
        w = clipped_weights(net, layer.name)
        target = weights_to_conductances(layer, weights=w)
        state = program(target, np.random.default_rng(ss), noise)
        layers[layer.name] = LayerDeployment(
            name=layer.name,
            state=state,
            attach=converters.attachments[layer.name],
            w_scale=target.meta["w_scale"],
            parts=tuple(plan.splits[layer.name]),
            gdc_ref=gdc_response(state.g_programmed),
        )
    return DeployedModel(net, layers, noise, plan, converters.S)


def gdc_alpha(dep: LayerDeployment, t: float, noise: NoiseParams) -> float:
    now = gdc_response(drifted(dep.state, t, noise))
    return dep.gdc_ref / now if now else 1.0


def analog_mvm(dep: LayerDeployment, x: np.ndarray, t: float, gdc_on: bool, rng: np.random.Generator,
               noise: NoiseParams) -> np.ndarray:
    """Digital output of one layer for row vectors ``x`` of shape ``(B, rows)``."""
    dac, adc = dep.attach.dac, dep.attach.adc
    x_norm = quantize(x, dac) / dac.levels
    g_d = drifted(dep.state, t, noise)
    sigma = read_sigma(g_d, dep.state.g_target, t, noise)
    has_read = bool(np.any(sigma))
    if has_read and noise.read_mode == "per_layer":
        g_d = g_d + sigma * rng.standard_normal(g_d.shape)
    alpha = gdc_alpha(dep, t, noise) if gdc_on else 1.0
    diff = g_d[0] - g_d[1]
    var = sigma[0] ** 2 + sigma[1] ** 2 if has_read and noise.read_mode == "per_vector" else None
    adc_unit = QuantizerParams(adc.bits, 1.0, "ADC")
    out = np.zeros((x.shape[0], dep.state.shape[1]))
    for p in dep.parts:
        xs = x_norm[:, p.row_start:p.row_stop]
        current = xs @ diff[p.row_start:p.row_stop, p.col_start:p.col_stop]
        if var is not None:
            spread = np.sqrt((xs * xs) @ var[p.row_start:p.row_stop, p.col_start:p.col_stop])
            current = current + spread * rng.standard_normal(current.shape)
        code = quantize(current * alpha * dep.gain, adc_unit)
        out[:, p.col_start:p.col_stop] += code * (adc.r_max / adc.levels)
    return out


def simulate_forward(model: DeployedModel, x: np.ndarray, t: float, gdc_on: bool = True,
                     rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """Logits of the deployed network at time ``t``."""
    rng = rng if rng is not None else np.random.default_rng(0)
    h = np.asarray(x, dtype=np.float64)
    n = h.shape[0]
    for layer in model.net.layers:
        if layer.kind in ANALOG_KINDS and layer.analog:
            dep = model.layers[layer.name]
            if layer.kind == "dense":
                y = analog_mvm(dep, h.reshape(n, -1), t, gdc_on, rng, model.noise)
            else:
                ho, wo = conv_output_hw(h.shape[2:], layer.kernel, layer.stride, layer.padding)
                cols = im2col(h, layer).T
                y = analog_mvm(dep, cols, t, gdc_on, rng, model.noise)
                y = y.reshape(n, ho, wo, -1).transpose(0, 3, 1, 2)
            h = add_bias(y, layer)
        elif layer.kind in ANALOG_KINDS:
            h = add_bias(linear_op(h, layer), layer)
        else:
            h = apply_digital(h, layer)
    return h.reshape(n, -1)


def quantized_reference(net: NetworkSpec, converters: ConverterSetup, x: np.ndarray) -> np.ndarray:
    """Noise-free digital emulation with the same DAC/ADC ranges (no crossbar)."""
    from .converters import fake_quantize

    h = np.asarray(x, dtype=np.float64)
    for layer in net.layers:
        if layer.kind in ANALOG_KINDS and layer.analog:
            att = converters.attachments[layer.name]
            y = linear_op(fake_quantize(h, att.dac), layer, clipped_weights(net, layer.name))
            h = add_bias(fake_quantize(y, att.adc), layer)
        elif layer.kind in ANALOG_KINDS:
            h = add_bias(linear_op(h, layer), layer)
        else:
            h = apply_digital(h, layer)
    return h.reshape(h.shape[0], -1)


# ---------------------------------------------------------------------------
# repeated-evaluation protocol


@dataclass
class EvalResult:
    records: list[tuple[int, float, float]]
    times: tuple[float, ...]
    n_runs: int
    digital_accuracy: float
    meta: dict = field(default_factory=dict)

    def accuracies(self, t: float) -> np.ndarray:
        return np.array([a for _, tt, a in self.records if tt == t])

    def mean(self, t: float) -> float:
        return float(np.mean(self.accuracies(t)))

    def std(self, t: float) -> float:
        return float(np.std(self.accuracies(t), ddof=1))

    def summary(self) -> dict:
        return {
            "n_runs": self.n_runs,
            "digital_accuracy": self.digital_accuracy,
            "checkpoints": [{"time_s": t, "mean": self.mean(t), "std": self.std(t)} for t in self.times],
            **self.meta,
        }

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\r\n")
        w.writerow(["run", "time_s", "accuracy"])
        for run, t, acc in self.records:
            w.writerow([run, repr(t), repr(acc)])
        return buf.getvalue()

    def to_json(self) -> str:
        return json.dumps(self.summary(), indent=2, sort_keys=True) + "\n"


def _run_one(args) -> list[tuple[int, float, float]]:
    run, seq, net, plan, noise, converters, x, y, times, gdc = args
    # spawn from a copy: SeedSequence.spawn advances the parent's child counter
    fresh = np.random.SeedSequence(seq.entropy, spawn_key=seq.spawn_key, pool_size=seq.pool_size)
    prog_seq, *time_seqs = fresh.spawn(1 + len(times))
    model = deploy(net, plan, noise, prog_seq, converters)
    out = []
    for t, ts in zip(times, time_seqs):
        logits = simulate_forward(model, x, t, gdc, np.random.default_rng(ts))
        out.append((run, t, float(np.mean(logits.argmax(axis=1) == y))))
    return out


def evaluate(net: NetworkSpec, x: np.ndarray, y: np.ndarray, converters: ConverterSetup,
             noise: NoiseParams = NoiseParams(), plan: Optional[MappingPlan] = None,
             times: DeploymentTimes = DeploymentTimes(), protocol: EvalProtocol = EvalProtocol(),
             jobs: int = 1) -> EvalResult:
    """Accuracy per run and checkpoint; every run reprograms the arrays.

    Seeds for run ``k`` come from ``SeedSequence(protocol.seed).spawn(n_runs)[k]``
    so a run's outcome does not depend on how runs are scheduled.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y)
    if len(y) == 0:
        raise ConfigurationError("empty evaluation set")
    times.validate(noise)
    if plan is None:
        plan = place(net, CrossbarConfig(max_tiles=None, split=True))
    seqs = np.random.SeedSequence(protocol.seed).spawn(protocol.n_runs)
    work = [(k, s, net, plan, noise, converters, x, y, times.checkpoints, protocol.gdc)
            for k, s in enumerate(seqs)]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            chunks = list(pool.map(_run_one, work))
    else:
        chunks = [_run_one(w) for w in work]
    records = [r for chunk in chunks for r in chunk]
    digital = float(np.mean(forward(net, x).argmax(axis=1) == y))
    return EvalResult(records, times.checkpoints, protocol.n_runs, digital,
                      {"converter_mode": converters.mode, "gdc": protocol.gdc})


def digital_accuracy(net: NetworkSpec, x: np.ndarray, y: np.ndarray) -> float:
    return float(np.mean(forward(net, np.asarray(x, dtype=np.float64)).argmax(axis=1) == np.asarray(y)))
