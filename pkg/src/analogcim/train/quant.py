"""Differentiable DAC/ADC quantization nodes with trainable ranges.

Forward values come from :mod:`analogcim.converters`.  Gradients follow the
straight-through rule for rounding:

* ``dq/dx = 1`` inside ``[-r, r]`` and 0 where the input is clipped;
* ``dq/dr = sign(x)`` where clipped and ``(round(x/D) - x/D) / n`` inside,
  with ``D = r / n`` and ``n = 2^(b-1) - 1``.

``ResidualTape`` supports a surrogate mode used for gradient checks: the
rounding residual and clip mask of a reference pass are recorded and then
replayed, giving a smooth function of ``x`` and ``r`` whose exact derivative
is the straight-through gradient above.
"""

from __future__ import annotations

from typing import Optional

import numpy as np

from ..converters import full_scale, round_half_away
from .autodiff import Node


class ResidualTape:
    """Records ``(residual, clip mask)`` per quantizer key, then replays them.

    Rectifier masks are recorded on the same tape so that the replayed
    function has no kinks at activations quantized to exactly zero.
    """

    def __init__(self):
        self.entries: dict[str, object] = {}
        self.replaying = False

    def freeze(self) -> None:
        self.replaying = True


def fake_quant(x: Node, r: Node, bits: int, tape: Optional[ResidualTape] = None, key: str = "",
               bypass: Optional[np.ndarray] = None) -> Node:
    """Quantize-dequantize ``x`` over ``[-r, r]``; ``r`` is a scalar node.

    ``bypass`` is an optional boolean mask (broadcastable to ``x``) of
    elements that skip quantization altogether.
    """
    n = full_scale(bits)
    xv = x.value
    rv = float(r.value)
    step = rv / n
    u = xv / step
    if tape is not None and tape.replaying:
        resid, clipped = tape.entries[key]
        out = np.where(clipped, np.sign(xv) * rv, xv + step * resid)
    else:
        clipped = np.abs(xv) >= rv
        code = round_half_away(np.clip(u, -n, n))
        resid = code - u
        out = code * step
        if tape is not None:
            tape.entries[key] = (resid, clipped)
    dx = (~clipped).astype(np.float64)
    dr = np.where(clipped, np.sign(xv), resid / n)
    if bypass is not None:
        out = np.where(bypass, xv, out)
        dx = np.where(bypass, 1.0, dx)
        dr = np.where(bypass, 0.0, dr)

    def back(g):
        return g * dx, np.asarray(np.sum(g * dr)).reshape(r.shape)

    return Node(out, (x, r), back)


def quant_mask(rng: np.random.Generator, p: float, shape, per_element: bool) -> Optional[np.ndarray]:
    """Bypass mask for one quantizer node: whole tensor or per element."""
    if p <= 0.0:
        return None
    if per_element:
        return rng.random(shape) < p
    return np.full((1,) * len(shape), rng.random() < p)

