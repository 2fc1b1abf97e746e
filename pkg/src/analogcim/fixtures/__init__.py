"""Golden reference tables and approximate network specs shipped with the package.

Tables are CSV files under ``data/``.  Every column before ``expected`` is a
key column; ``rel_tol`` or ``abs_tol`` gives the tolerance and
``provenance`` records where the number comes from.  A blank tolerance
marks an informational row that is reported but never fails.

Network specs under ``specs/`` carry shapes only; :func:`with_random_weights`
fills them in for mapping and performance runs.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from importlib import resources
from typing import Mapping, Optional, Sequence

import numpy as np

from ..errors import FixtureError
from ..tensor_net import NetworkSpec, network_from_dict

_TOL_FIELDS = ("rel_tol", "abs_tol")


def _data_file(name: str):
    return resources.files(__package__).joinpath("data", f"{name}.csv")


def _spec_file(name: str):
    return resources.files(__package__).joinpath("specs", f"{name}.json")


def _key(parts) -> tuple[str, ...]:
    if not isinstance(parts, tuple):
        parts = (parts,)
    return tuple(str(p) for p in parts)


@dataclass(frozen=True)
class GoldenRow:
    key: tuple[str, ...]
    expected: float
    tolerance: Optional[float]
    relative: bool
    provenance: str

    @property
    def informational(self) -> bool:
        return self.tolerance is None


@dataclass
class GoldenTable:
    name: str
    key_fields: tuple[str, ...]
    rows: list[GoldenRow] = field(default_factory=list)

    def __post_init__(self):
        for row in self.rows:
            if not row.provenance:
                raise FixtureError(f"{self.name}: row {row.key} has no provenance")

    def __len__(self) -> int:
        return len(self.rows)

    def keys(self) -> list[tuple[str, ...]]:
        return [row.key for row in self.rows]

    def row(self, *key) -> GoldenRow:
        k = _key(tuple(key))
        for row in self.rows:
            if row.key == k:
                return row
        raise FixtureError(f"{self.name}: no row {k}")

    def expected(self, *key) -> float:
        return self.row(*key).expected


@dataclass(frozen=True)
class RowResult:
    key: tuple[str, ...]
    expected: float
    computed: float
    residual: float  # relative when the row is relative, otherwise absolute; signed
    tolerance: Optional[float]
    passed: Optional[bool]  # None for informational rows
    provenance: str

    def line(self) -> str:
        status = {True: "PASS", False: "FAIL", None: "INFO"}[self.passed]
        tol = "-" if self.tolerance is None else f"{self.tolerance:g}"
        return (f"{status} {'/'.join(self.key)}: computed={self.computed:.6g} "
                f"expected={self.expected:.6g} residual={self.residual:+.3e} tol={tol}")


@dataclass
class CheckReport:
    table: str
    results: list[RowResult]

    @property
    def passed(self) -> bool:
        return all(r.passed is not False for r in self.results)

    @property
    def failures(self) -> list[RowResult]:
        return [r for r in self.results if r.passed is False]

    @property
    def max_residual(self) -> float:
        checked = [abs(r.residual) for r in self.results if r.passed is not None]
        return max(checked, default=0.0)

    def lines(self) -> list[str]:
        return [r.line() for r in self.results]


def table_from_records(name: str, records: Sequence[Mapping[str, str]]) -> GoldenTable:
    if not records:
        raise FixtureError(f"{name}: empty table")
    header = list(records[0])
    if "expected" not in header:
        raise FixtureError(f"{name}: no 'expected' column")
    key_fields = tuple(header[:header.index("expected")])
    tol_field = next((f for f in _TOL_FIELDS if f in header), None)
    rows = []
    for rec in records:
        raw_tol = (rec.get(tol_field) or "").strip() if tol_field else ""
        rows.append(GoldenRow(
            key=tuple(rec[f] for f in key_fields),
            expected=float(rec["expected"]),
            tolerance=float(raw_tol) if raw_tol else None,
            relative=tol_field == "rel_tol",
            provenance=rec.get("provenance", ""),
        ))
    return GoldenTable(name, key_fields, rows)


def load_records(name: str) -> list[dict[str, str]]:
    """Raw rows of a fixture CSV as dictionaries of strings."""
    path = _data_file(name)
    if not path.is_file():
        raise FixtureError(f"no fixture table named {name!r}")
    with path.open(newline="") as fh:
        return list(csv.DictReader(fh))


def load_table(name: str) -> GoldenTable:
    return table_from_records(name, load_records(name))


def table_names() -> list[str]:
    folder = resources.files(__package__).joinpath("data")
    return sorted(p.name[:-4] for p in folder.iterdir() if p.name.endswith(".csv"))


def check(table: GoldenTable, computed: Mapping) -> CheckReport:
    """Compare ``computed`` (key tuple -> value) against every row of ``table``.

    Keys are matched after converting each element to ``str``; a row with no
    computed counterpart raises :class:`FixtureError`.
    """
    values = {_key(k): float(v) for k, v in computed.items()}
    results = []
    for row in table.rows:
        if row.key not in values:
            raise FixtureError(f"{table.name}: computed values lack key {row.key}")
        got = values[row.key]
        diff = got - row.expected
        if row.relative:
            residual = diff / row.expected if row.expected != 0 else (0.0 if diff == 0 else np.copysign(np.inf, diff))
        else:
            residual = diff
        passed = None if row.informational else bool(abs(residual) <= row.tolerance)
        results.append(RowResult(row.key, row.expected, got, float(residual), row.tolerance,
                                 passed, row.provenance))
    return CheckReport(table.name, results)


# ---------------------------------------------------------------------------
# network specs


def spec_names() -> list[str]:
    folder = resources.files(__package__).joinpath("specs")
    return sorted(p.name[:-5] for p in folder.iterdir() if p.name.endswith(".json"))


def load_spec(name: str) -> NetworkSpec:
    path = _spec_file(name)
    if not path.is_file():
        raise FixtureError(f"no network spec named {name!r}")
    return network_from_dict(json.loads(path.read_text()))


def with_random_weights(net: NetworkSpec, seed: int = 0, density: float = 1.0) -> NetworkSpec:
    """Copy of ``net`` with He-scaled Gaussian weights on every analog layer.

    ``density`` < 1 zeroes a random fraction of each weight matrix (at least
    one entry per layer is kept nonzero).
    """
    rng = np.random.default_rng(seed)
    out = net
    for layer in net.analog_layers():
        shape = layer.weight_shape
        w = rng.standard_normal(shape) * np.sqrt(2.0 / shape[1])
        if density < 1.0:
            keep = rng.random(shape) < density
            keep.flat[rng.integers(w.size)] = True
            w = np.where(keep, w, 0.0)
        out = out.replace_layer(layer.name, layer.with_weights(w, np.zeros(layer.out_channels)))
    return out


__all__ = [
    "CheckReport", "GoldenRow", "GoldenTable", "RowResult", "check", "load_records",
    "load_spec", "load_table", "spec_names", "table_from_records", "table_names",
    "with_random_weights",
]
