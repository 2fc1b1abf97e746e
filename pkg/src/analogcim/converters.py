"""DAC/ADC quantizers, the shared ADC-gain constraint and range heuristics.

Quantizers are symmetric and uniform over ``[-r_max, r_max]`` with integer
codes in ``[-(2^(b-1)-1), 2^(b-1)-1]``; the most negative two's-complement
code is never produced.  Ties round away from zero so ``quantize`` stays odd.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .errors import CalibrationError, ConfigurationError, DegenerateLayerError


def full_scale(bits: int) -> int:
    """Largest positive code of a symmetric ``bits``-bit quantizer."""
    return 2 ** (bits - 1) - 1


@dataclass(frozen=True)
class QuantizerParams:
    bits: int
    r_max: float
    role: str = "ADC"

    def __post_init__(self):
        if self.bits < 2:
            raise ValueError("quantizers need at least 2 bits")
        if not self.r_max > 0:
            raise ValueError(f"r_max must be positive, got {self.r_max}")
        if self.role not in ("DAC", "ADC"):
            raise ValueError(f"role must be DAC or ADC, not {self.role!r}")

    @property
    def levels(self) -> int:
        return full_scale(self.bits)

    @property
    def step(self) -> float:
        return self.r_max / self.levels


def round_half_away(x):
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def quantize(x, q: QuantizerParams):
    """Integer code of ``x``: round(clip(x, -r, r) / (r / (2^(b-1)-1)))."""
    x = np.asarray(x, dtype=np.float64)
    codes = round_half_away(np.clip(x, -q.r_max, q.r_max) / q.step)
    return codes.astype(np.int64)


def dequantize(code, q: QuantizerParams):
    return np.asarray(code, dtype=np.float64) * q.step


def fake_quantize(x, q: QuantizerParams):
    return dequantize(quantize(x, q), q)


@dataclass(frozen=True)
class ConverterAttachment:
    layer_id: str
    dac: QuantizerParams
    adc: QuantizerParams
    trained: bool = False

    def __post_init__(self):
        if self.dac.bits != self.adc.bits + 1:
            raise ValueError(
                f"layer {self.layer_id!r}: DAC must have one bit more than the ADC "
                f"({self.dac.bits} vs {self.adc.bits})")

    @classmethod
    def build(cls, layer_id: str, adc_bits: int, r_dac: float, r_adc: float, trained: bool = False):
        return cls(layer_id,
                   QuantizerParams(adc_bits + 1, r_dac, "DAC"),
                   QuantizerParams(adc_bits, r_adc, "ADC"),
                   trained)

    def gain(self, w_max: float) -> float:
        """The ratio r_DAC * W_max / r_ADC that must be common to all layers."""
        return self.dac.r_max * w_max / self.adc.r_max


@dataclass(frozen=True)
class GainState:
    S: float
    per_layer_w_max: tuple[float, ...] = ()

    def __post_init__(self):
        if self.S == 0:
            raise ValueError("ADC gain S must be nonzero")


def enforce_gain_constraint(attachments: Sequence[ConverterAttachment], gain: GainState) -> list[ConverterAttachment]:
    """Re-derive every DAC range as r_DAC = r_ADC * |S| / W_max."""
    if len(attachments) != len(gain.per_layer_w_max):
        raise ValueError("one W_max per attachment is required")
    out = []
    for att, w_max in zip(attachments, gain.per_layer_w_max):
        if not w_max > 0:
            raise DegenerateLayerError(f"layer {att.layer_id!r}: W_max must be positive, got {w_max}")
        r_dac = att.adc.r_max * abs(gain.S) / w_max
        out.append(replace(att, dac=replace(att.dac, r_max=r_dac)))
    return out


def check_gain_constraint(attachments, gain: GainState, rel_tol: float = 1e-6) -> bool:
    return all(math.isclose(att.gain(w), abs(gain.S), rel_tol=rel_tol)
               for att, w in zip(attachments, gain.per_layer_w_max))


# ---------------------------------------------------------------------------
# heuristics used when no trained ranges exist


def activation_percentile(x, q: float = 99.995) -> float:
    return float(np.percentile(np.abs(np.asarray(x, dtype=np.float64)).ravel(), q, method="linear"))


def heuristic_input_scale(percentile_in: float, n_dac: int) -> float:
    """Scale_inp = (2^(n_dac-1)-1) / percentile of the layer input."""
    if not percentile_in > 0:
        raise CalibrationError(f"input percentile must be positive, got {percentile_in}")
    return full_scale(n_dac) / percentile_in


def heuristic_output_scale(n_adc: int, n_dac: int, g_max: float = 25e-6, crossbar_rows: int = 1024,
                           n_std_in: float = 4.0, n_std_out: float = 4.0, w_std: float = 1.0) -> float:
    """ADC-side scale from array statistics.

    Grouping used::

        ((2^(n_adc-1)-1) / n_std_out) / ((2^(n_dac-1)-1) * g_max * sqrt(rows)) * n_std_in * w_std
    """
    for name, v in (("g_max", g_max), ("crossbar_rows", crossbar_rows),
                    ("n_std_in", n_std_in), ("n_std_out", n_std_out), ("w_std", w_std)):
        if not v > 0:
            raise ValueError(f"{name} must be positive")
    num = full_scale(n_adc) / n_std_out
    den = full_scale(n_dac) * g_max * math.sqrt(crossbar_rows)
    return num / den * n_std_in * w_std


def trained_adc_scale(trained_adc: Sequence[float], trained_dac: Sequence[float], w_max: Sequence[float],
                      g_max: float, n_adc: int) -> tuple[float, float]:
    """Collapse per-layer trained ranges into one ADC scale.

    Returns ``(trained_ADC, Scale_out)`` where ``trained_ADC`` is the mean of
    ``r_adc * g_max / max|W| * (2^(n_adc-1)-1) / r_dac`` over layers and
    ``Scale_out = (2^(n_adc-1)-1) / trained_ADC``.
    """
    if not (len(trained_adc) == len(trained_dac) == len(w_max)):
        raise ConfigurationError("per-layer lists must have equal length")
    if len(trained_adc) == 0:
        raise ConfigurationError("at least one layer is required")
    n = full_scale(n_adc)
    terms = [a * g_max / w * n / d for a, d, w in zip(trained_adc, trained_dac, w_max)]
    t = sum(terms) / len(terms)
    return t, n / t


def heuristic_effective_gain(n_adc: int, n_dac: int, **kw) -> float:
    """Heuristic Scale_out expressed as a gain on the normalized bit-line sum.

    The heuristic converts a physical current ``g_max * sum(g * dac_code)`` to
    ADC codes; on normalized inputs (``dac_code / (2^(n_dac-1)-1)``) and a
    full-scale-1 ADC this is ``Scale_out * g_max * (2^(n_dac-1)-1) / (2^(n_adc-1)-1)``.
    """
    g_max = kw.get("g_max", 25e-6)
    return heuristic_output_scale(n_adc, n_dac, **kw) * g_max * full_scale(n_dac) / full_scale(n_adc)
