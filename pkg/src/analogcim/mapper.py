"""Lowering of a network onto crossbar tiles.

Every analog layer becomes one or more rectangular blocks (sub-GEMMs) that
are packed onto tiles first-fit-decreasing by height.  Inside a tile a
skyline bottom-left rule picks the lowest free spot, so tall layers end up
side by side and short layers stack in the space next to or above them.  A block
occupies ``rows`` word lines (one per input element of the lowered GEMM) and
``cols`` logical columns, each logical column being a differential pair.

ADC ``a`` of a tile serves the physical columns ``c`` with
``c % adc_count == a``, so a contiguous block of ``n`` columns needs
``ceil(n / adc_count)`` conversion phases regardless of where it sits.
"""

from __future__ import annotations

import json
import math
import string
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import DegenerateLayerError, MappingError
from .pcm import ConductanceState
from .tensor_net import LayerSpec, NetworkSpec, crossbar_matrix

TILE_PRESETS = {
    "1024x512": (1024, 512),
    "256x256": (256, 256),
    "128x128": (128, 128),
    "64x64": (64, 64),
}
SCHEMES = {"M1": 1, "M2": 2, "M4": 4}


@dataclass(frozen=True)
class CrossbarConfig:
    rows: int = 1024
    cols: int = 512
    adc_mux: int = 4
    fp_units: int = 32
    max_tiles: Optional[int] = 1  # None: allocate as many tiles as needed
    split: bool = False

    def __post_init__(self):
        if min(self.rows, self.cols, self.adc_mux, self.fp_units) < 1:
            raise ValueError("crossbar counts must all be >= 1")
        if self.cols % self.adc_mux:
            raise ValueError(f"{self.cols} columns cannot be shared evenly by mux-{self.adc_mux} ADCs")
        if self.max_tiles is not None and self.max_tiles < 1:
            raise ValueError("max_tiles must be >= 1")

    @property
    def dac_count(self) -> int:
        return self.rows

    @property
    def adc_count(self) -> int:
        return self.cols // self.adc_mux

    @property
    def scheme(self) -> str:
        return f"M{self.adc_mux}"

    @property
    def tile_name(self) -> str:
        return f"{self.rows}x{self.cols}"

    @classmethod
    def from_names(cls, tile: str = "1024x512", scheme: str = "M4", **kw) -> "CrossbarConfig":
        try:
            rows, cols = TILE_PRESETS[tile]
        except KeyError:
            rows, cols = (int(v) for v in tile.lower().split("x"))
        return cls(rows=rows, cols=cols, adc_mux=SCHEMES[scheme.upper()], **kw)


# ---------------------------------------------------------------------------
# weights -> conductances


def weights_to_conductances(layer: LayerSpec, w_min: float = -np.inf, w_max: float = np.inf,
                            weights: Optional[np.ndarray] = None) -> ConductanceState:
    """Differential target conductances of ``layer`` after clipping.

    The clipped crossbar matrix is divided by its largest magnitude; positive
    entries go to the ``+`` device and magnitudes of negative entries to the
    ``-`` device.  ``meta['w_scale']`` keeps that largest magnitude.
    """
    w = weights if weights is not None else layer.weights
    w = np.clip(np.asarray(w, dtype=np.float64), w_min, w_max)
    mat = crossbar_matrix(layer, w)
    scale = float(np.max(np.abs(mat))) if mat.size else 0.0
    if scale == 0.0:
        raise DegenerateLayerError(f"layer {layer.name!r}: all weights are zero after clipping")
    g = mat / scale
    target = np.stack([np.clip(g, 0.0, 1.0), np.clip(-g, 0.0, 1.0)])
    return ConductanceState(g_target=target, meta={"layer": layer.name, "w_scale": scale})


def conductances_to_weights(state: ConductanceState, g: Optional[np.ndarray] = None) -> np.ndarray:
    """Signed crossbar matrix represented by ``g`` (defaults to the targets)."""
    g = state.g_target if g is None else g
    return (g[0] - g[1]) * state.meta["w_scale"]


# ---------------------------------------------------------------------------
# splitting


@dataclass(frozen=True)
class SubGemm:
    layer: str
    part: int
    row_start: int
    row_stop: int
    col_start: int
    col_stop: int
    nonzeros: int

    @property
    def rows(self) -> int:
        return self.row_stop - self.row_start

    @property
    def cols(self) -> int:
        return self.col_stop - self.col_start

    @property
    def cells(self) -> int:
        return self.rows * self.cols


def structural_nonzeros(layer: LayerSpec) -> int:
    rows, cols = layer.crossbar_shape
    if layer.kind == "depthwise_conv2d":
        return layer.kernel_size * cols
    return rows * cols


def split_layer(layer: LayerSpec, max_rows: int, max_cols: int) -> list[SubGemm]:
    """Decompose a layer's crossbar matrix into blocks no larger than the tile.

    Dense matrices are cut on a regular grid (``ceil(R/max_rows) *
    ceil(C/max_cols)`` blocks, row-block partial sums accumulated serially).
    Depthwise matrices are cut along the diagonal into channel groups so the
    all-zero off-diagonal blocks are never stored.
    """
    rows, cols = layer.crossbar_shape
    if rows <= max_rows and cols <= max_cols:
        return [SubGemm(layer.name, 0, 0, rows, 0, cols, structural_nonzeros(layer))]
    if layer.kind == "depthwise_conv2d":
        k, m = layer.kernel_size, layer.multiplier
        group = min(max_rows // k, max_cols // m)
        if group < 1:
            raise MappingError(
                f"layer {layer.name!r}: a {max_rows}x{max_cols} tile cannot hold one "
                f"{k}x{m} depthwise kernel block", [layer.name])
        parts = []
        for i, c0 in enumerate(range(0, layer.in_channels, group)):
            c1 = min(c0 + group, layer.in_channels)
            parts.append(SubGemm(layer.name, i, c0 * k, c1 * k, c0 * m, c1 * m, (c1 - c0) * k * m))
        return parts
    parts = []
    for r0 in range(0, rows, max_rows):
        for c0 in range(0, cols, max_cols):
            r1, c1 = min(r0 + max_rows, rows), min(c0 + max_cols, cols)
            parts.append(SubGemm(layer.name, len(parts), r0, r1, c0, c1, (r1 - r0) * (c1 - c0)))
    return parts


def split_mvm(matrix: np.ndarray, x: np.ndarray, parts: list[SubGemm]) -> np.ndarray:
    """Evaluate ``x @ matrix`` by serially accumulating sub-GEMM partial sums."""
    out = np.zeros(x.shape[:-1] + (matrix.shape[1],), dtype=np.result_type(matrix, x))
    for p in parts:
        out[..., p.col_start:p.col_stop] += (
            x[..., p.row_start:p.row_stop] @ matrix[p.row_start:p.row_stop, p.col_start:p.col_stop])
    return out


# ---------------------------------------------------------------------------
# placement


@dataclass(frozen=True)
class Placement:
    layer: str
    part: int
    tile: int
    row_offset: int
    col_offset: int
    rows: int
    cols: int
    nonzeros: int

    @property
    def cells(self) -> int:
        return self.rows * self.cols


@dataclass
class MappingPlan:
    cfg: CrossbarConfig
    placements: list[Placement] = field(default_factory=list)
    splits: dict[str, list[SubGemm]] = field(default_factory=dict)
    tiles_used: int = 0

    @property
    def total_cells(self) -> int:
        return self.tiles_used * self.cfg.rows * self.cfg.cols

    @property
    def used_cells(self) -> int:
        return sum(p.cells for p in self.placements)

    @property
    def nonzero_cells(self) -> int:
        return sum(p.nonzeros for p in self.placements)

    def layer_placements(self, layer: str) -> list[Placement]:
        return [p for p in self.placements if p.layer == layer]

    def phases(self, placement: Placement) -> int:
        return math.ceil(placement.cols / self.cfg.adc_count)

    def to_dict(self) -> dict:
        frac, per_layer = utilization(self)
        return {
            "tile": {"rows": self.cfg.rows, "cols": self.cfg.cols, "scheme": self.cfg.scheme,
                     "adc_count": self.cfg.adc_count, "fp_units": self.cfg.fp_units},
            "tiles_used": self.tiles_used,
            "utilization": frac,
            "effective_utilization": effective_utilization(self),
            "layer_effective_utilization": per_layer,
            "placements": [p.__dict__ for p in self.placements],
            "splits": {k: [s.__dict__ for s in v] for k, v in self.splits.items()},
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


def utilization(plan: MappingPlan) -> tuple[float, dict[str, float]]:
    """Occupied fraction of the allocated tiles, and nonzero/occupied per layer."""
    total = plan.total_cells
    frac = plan.used_cells / total if total else 0.0
    per_layer = {}
    for name in plan.splits:
        ps = plan.layer_placements(name)
        cells = sum(p.cells for p in ps)
        per_layer[name] = sum(p.nonzeros for p in ps) / cells if cells else 0.0
    return frac, per_layer


def effective_utilization(plan: MappingPlan) -> float:
    total = plan.total_cells
    return plan.nonzero_cells / total if total else 0.0


class _Tile:
    """Skyline of one tile: the lowest free row above every column."""

    def __init__(self, rows, cols):
        self.rows, self.cols = rows, cols
        self.sky = np.zeros(cols, dtype=np.int64)

    def insert(self, h, w) -> Optional[tuple[int, int]]:
        if w > self.cols or h > self.rows:
            return None
        tops = np.lib.stride_tricks.sliding_window_view(self.sky, w).max(axis=1)
        fits = np.nonzero(tops + h <= self.rows)[0]
        if fits.size == 0:
            return None
        # lowest position first, leftmost among equals
        x = int(fits[np.argmin(tops[fits])])
        y = int(tops[x])
        self.sky[x:x + w] = y + h
        return (y, x)


def place(net: NetworkSpec, cfg: CrossbarConfig = CrossbarConfig()) -> MappingPlan:
    """Pack every analog layer of ``net`` onto the tiles described by ``cfg``."""
    splits: dict[str, list[SubGemm]] = {}
    too_big = []
    for layer in net.analog_layers():
        rows, cols = layer.crossbar_shape
        if cfg.split:
            splits[layer.name] = split_layer(layer, cfg.rows, cfg.cols)
        elif rows <= cfg.rows and cols <= cfg.cols:
            splits[layer.name] = split_layer(layer, rows, cols)
        else:
            too_big.append(layer.name)
    if too_big:
        raise MappingError(
            f"layers exceed a {cfg.rows}x{cfg.cols} tile (enable splitting): {', '.join(too_big)}", too_big)

    items = [s for parts in splits.values() for s in parts]
    order = sorted(range(len(items)), key=lambda i: (-items[i].rows, -items[i].cols, i))
    tiles: list[_Tile] = []
    placements = []
    unplaced = []
    for i in order:
        item = items[i]
        spot = None
        for t, tile in enumerate(tiles):
            spot = tile.insert(item.rows, item.cols)
            if spot is not None:
                break
        if spot is None and (cfg.max_tiles is None or len(tiles) < cfg.max_tiles):
            tiles.append(_Tile(cfg.rows, cfg.cols))
            t = len(tiles) - 1
            spot = tiles[t].insert(item.rows, item.cols)
        if spot is None:
            unplaced.append(item.layer)
            continue
        placements.append(Placement(item.layer, item.part, t, spot[0], spot[1],
                                    item.rows, item.cols, item.nonzeros))
    if unplaced:
        names = sorted(set(unplaced), key=unplaced.index)
        raise MappingError(f"crossbar capacity exceeded; could not place: {', '.join(names)}", names)
    layer_order = {name: i for i, name in enumerate(splits)}
    placements.sort(key=lambda p: (layer_order[p.layer], p.part))
    return MappingPlan(cfg=cfg, placements=placements, splits=splits, tiles_used=len(tiles))


def check_plan(plan: MappingPlan) -> None:
    """Raise ``MappingError`` if any block leaves its tile or overlaps another."""
    cfg = plan.cfg
    occupancy = {}
    for p in plan.placements:
        if p.row_offset < 0 or p.col_offset < 0 or p.row_offset + p.rows > cfg.rows \
                or p.col_offset + p.cols > cfg.cols:
            raise MappingError(f"{p.layer}[{p.part}] leaves tile {p.tile}", [p.layer])
        grid = occupancy.setdefault(p.tile, np.zeros((cfg.rows, cfg.cols), dtype=bool))
        block = grid[p.row_offset:p.row_offset + p.rows, p.col_offset:p.col_offset + p.cols]
        if block.any():
            raise MappingError(f"{p.layer}[{p.part}] overlaps another block on tile {p.tile}", [p.layer])
        block[...] = True


def occupancy_map(plan: MappingPlan, width: int = 64, height: int = 32) -> str:
    """ASCII rendering of each tile; one letter per layer, '.' for free cells."""
    cfg = plan.cfg
    glyphs = string.ascii_uppercase + string.ascii_lowercase + string.digits
    names = list(plan.splits)
    legend = [f"{glyphs[i % len(glyphs)]} = {name}" for i, name in enumerate(names)]
    h = min(height, cfg.rows)
    w = min(width, cfg.cols)
    out = []
    for t in range(plan.tiles_used):
        grid = np.full((cfg.rows, cfg.cols), -1, dtype=np.int32)
        for p in plan.placements:
            if p.tile == t:
                grid[p.row_offset:p.row_offset + p.rows, p.col_offset:p.col_offset + p.cols] = names.index(p.layer)
        out.append(f"tile {t} ({cfg.rows}x{cfg.cols})")
        for r in range(h):
            r0, r1 = r * cfg.rows // h, max((r + 1) * cfg.rows // h, r * cfg.rows // h + 1)
            line = []
            for c in range(w):
                c0, c1 = c * cfg.cols // w, max((c + 1) * cfg.cols // w, c * cfg.cols // w + 1)
                cell = grid[r0:r1, c0:c1]
                vals = cell[cell >= 0]
                line.append(glyphs[np.bincount(vals).argmax() % len(glyphs)] if vals.size * 2 >= cell.size else ".")
            out.append("".join(line))
    frac, _ = utilization(plan)
    out.append(f"utilization {frac:.4f}  effective {effective_utilization(plan):.4f}")
    out.extend(legend)
    return "\n".join(out) + "\n"
