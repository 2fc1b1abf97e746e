"""``analogcim`` command-line front end.

Every subcommand reads an optional TOML config (see :mod:`analogcim.config`),
lets flags override it, writes its outputs atomically into ``--out`` and
exits with 0 on success, 2 on configuration or input errors, 3 when a
network does not fit the crossbar and 4 on numerical failures.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
import tempfile
from dataclasses import replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import fixtures
from .config import ToolConfig, load_config
from .errors import (CalibrationError, ConfigurationError, DomainError, FixtureError, MappingError,
                     TrainingError)
from .mapper import SCHEMES, TILE_PRESETS, check_plan, occupancy_map, place
from .perf import (EnergyParams, SweepPoint, area, calibrate_energy, model_perf, peak_row, rows_to_csv,
                   sweep)
from .simulator import evaluate, prepare_converters
from .tensor_net import NetworkSpec, load_network, network_to_dict
from .train import (Dataset, gaussian_blobs, load_dataset, pattern_images, save_dataset, separable_pair,
                    toy_cnn, toy_mlp, train_two_stage)
from .train.trainer import accuracy

EXIT_OK, EXIT_CONFIG, EXIT_MAPPING, EXIT_NUMERIC = 0, 2, 3, 4


# ---------------------------------------------------------------------------
# output helpers


def atomic_write(path: Path, data) -> None:
    """Write to a temporary sibling, then rename over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    blob = data.encode() if isinstance(data, str) else data
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(blob)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _dump_json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def write_network(net: NetworkSpec, path: Path) -> None:
    """Checkpoint JSON plus one AONTENSR file per tensor, each written atomically."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with tempfile.TemporaryDirectory(dir=path.parent) as tmp:
        tmp = Path(tmp)
        (tmp / "tensors").mkdir()
        d = network_to_dict(net, tmp / "tensors", tmp)
        for f in sorted((tmp / "tensors").iterdir()):
            atomic_write(path.parent / "tensors" / f.name, f.read_bytes())
    atomic_write(path, _dump_json(d))


def write_dataset(ds: Dataset, directory: Path) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    with tempfile.TemporaryDirectory(dir=directory) as tmp:
        save_dataset(ds, tmp)
        for f in sorted(Path(tmp).iterdir()):
            atomic_write(directory / f.name, f.read_bytes())


def _say(msg: str) -> None:
    print(msg, flush=True)


# ---------------------------------------------------------------------------
# shared loading


def _load_net(cfg: ToolConfig, spec: Optional[str] = None, seed: Optional[int] = None) -> NetworkSpec:
    if spec is not None:
        net = fixtures.load_spec(spec)
    else:
        path = cfg.require("network")
        if not path.is_file():
            raise ConfigurationError(f"network not found: {path}")
        net = load_network(path)
    if any(layer.weights is None for layer in net.analog_layers()):
        net = fixtures.with_random_weights(net, cfg.seed if seed is None else seed)
    return net


def _load_data(cfg: ToolConfig, which: str) -> Dataset:
    path = cfg.require(which)
    try:
        return load_dataset(path)
    except FileNotFoundError as exc:
        raise ConfigurationError(str(exc)) from None


def _default_net(data: Dataset, seed: int) -> NetworkSpec:
    classes = data.class_count
    if data.x.ndim == 2:
        return toy_mlp(in_dim=data.x.shape[1], classes=classes, seed=seed)
    if data.x.ndim == 4 and data.x.shape[1] == 1 and data.x.shape[2] == data.x.shape[3]:
        return toy_cnn(size=data.x.shape[2], classes=classes, seed=seed)
    raise ConfigurationError(f"no default network for inputs of shape {data.x.shape[1:]}; "
                             "provide paths.network")


def _energy(cfg: ToolConfig) -> tuple[EnergyParams, str]:
    if cfg.paths.energy is not None:
        try:
            return EnergyParams.from_dict(json.loads(cfg.paths.energy.read_text())), str(cfg.paths.energy)
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            raise ConfigurationError(f"{cfg.paths.energy}: bad energy file ({exc})") from None
    table = _calibration_table(cfg)
    return calibrate_energy(table, timing=cfg.timing), "calibrated on the bundled TOPS/W table"


def _calibration_table(cfg: ToolConfig) -> dict[tuple[str, int], float]:
    if cfg.paths.calibration_table is None:
        rows = fixtures.load_records("peak_tops_per_w")
        source = "bundled table"
    else:
        with open(cfg.paths.calibration_table, newline="") as fh:
            rows = list(csv.DictReader(fh))
        source = str(cfg.paths.calibration_table)
    table = {}
    for r in rows:
        value = r.get("tops_per_w", r.get("expected"))
        if value is None or "scheme" not in r or "bits" not in r:
            raise ConfigurationError(f"{source}: needs columns scheme, bits and tops_per_w")
        if r.get("tile", "1024x512") != "1024x512":
            continue
        table[(r["scheme"], int(r["bits"]))] = float(value)
    return table


# ---------------------------------------------------------------------------
# subcommands


def cmd_make_dataset(cfg: ToolConfig, args) -> int:
    gen = {"patterns": lambda n, s: pattern_images(n, size=args.size, noise=args.noise, seed=s),
           "blobs": lambda n, s: gaussian_blobs(n, n_classes=args.classes, dim=args.dim, seed=s),
           "pair": lambda n, s: separable_pair(n, dim=args.dim, seed=s)}[args.kind]
    full = gen(args.n_train + args.n_test, cfg.seed)
    train, test = full.split(args.n_train)
    out = cfg.paths.out
    write_dataset(train, out / "train")
    write_dataset(test, out / "test")
    _say(f"seed: {cfg.seed}")
    _say(f"wrote {len(train)} training and {len(test)} test samples of shape {train.x.shape[1:]} to {out}")
    return EXIT_OK


def cmd_train(cfg: ToolConfig, args) -> int:
    data = _load_data(cfg, "dataset")
    net = _default_net(data, cfg.seed) if cfg.paths.network is None else _load_net(cfg)
    tcfg = replace(cfg.train, seed=cfg.seed)
    _say(f"seed: {cfg.seed}")
    result = train_two_stage(net, data, tcfg)
    out = cfg.paths.out
    write_network(result.net, out / "checkpoint.json")
    atomic_write(out / "train_log.csv", rows_to_csv(result.log))
    _say(f"training accuracy (float): {accuracy(result.net, data):.4f}")
    _say(f"wrote {out / 'checkpoint.json'} and {out / 'train_log.csv'}")
    return EXIT_OK


def cmd_map(cfg: ToolConfig, args) -> int:
    net = _load_net(cfg, args.spec)
    plan = place(net, cfg.crossbar)
    check_plan(plan)
    d = plan.to_dict()
    out = cfg.paths.out
    atomic_write(out / "plan.json", plan.to_json())
    atomic_write(out / "occupancy.txt", occupancy_map(plan))
    _say(f"tiles used: {plan.tiles_used}")
    _say(f"utilization: {d['utilization']:.6f}")
    _say(f"effective utilization: {d['effective_utilization']:.6f}")
    for name, u in d["layer_effective_utilization"].items():
        _say(f"  {name}: effective utilization {u:.6f}")
    _say(occupancy_map(plan))
    return EXIT_OK


def cmd_simulate(cfg: ToolConfig, args) -> int:
    net = _load_net(cfg)
    test = _load_data(cfg, "eval_dataset")
    sim = cfg.simulate
    calib = None
    if sim.converter_mode != "trained" and not (sim.converter_mode == "auto"
                                                 and (net.converters or {}).get("trained")):
        source = _load_data(cfg, "dataset") if cfg.paths.dataset is not None else test
        calib = source.x[:sim.calibration_samples].astype(np.float64)
    conv = prepare_converters(net, adc_bits=sim.adc_bits, mode=sim.converter_mode, calibration_x=calib)
    plan = place(net, replace(cfg.crossbar, split=True, max_tiles=None))
    _say(f"seed: {cfg.seed}")
    res = evaluate(net, test.x, test.y, conv, cfg.noise_params(), plan, sim.times, cfg.protocol(),
                   jobs=args.jobs)
    res.meta["noise_off"] = sim.noise_off
    out = cfg.paths.out
    atomic_write(out / "accuracy.csv", res.to_csv())
    atomic_write(out / "accuracy.json", res.to_json())
    _say(f"digital accuracy: {res.digital_accuracy:.4f}")
    for cp in res.summary()["checkpoints"]:
        _say(f"t={cp['time_s']:>12g} s  mean={cp['mean']:.4f}  std={cp['std']:.4f}")
    return EXIT_OK


def cmd_perf(cfg: ToolConfig, args) -> int:
    net = _load_net(cfg, args.spec)
    energy, source = _energy(cfg)
    plan = place(net, cfg.crossbar)
    rep = model_perf(plan, net, cfg.bits, energy, cfg.timing)
    point = SweepPoint(cfg.crossbar.scheme, cfg.bits, cfg.crossbar.tile_name, cfg.crossbar.fp_units)
    peak = peak_row(point, energy, cfg.timing)
    doc = json.loads(rep.to_json())
    doc["peak"] = peak
    doc["area_mm2"] = area(cfg.crossbar)
    doc["energy_source"] = source
    out = cfg.paths.out
    atomic_write(out / "perf.csv", rep.to_csv())
    atomic_write(out / "perf.json", _dump_json(doc))
    _say(f"energy: {source}")
    _say(f"peak: {peak['peak_tops']:.4f} TOPS, {peak.get('peak_tops_per_w', float('nan')):.2f} TOPS/W")
    s = rep.summary()
    _say(f"model: {s['inf_per_s']:.1f} inf/s, {s['tops']:.4f} TOPS, {s['tops_per_w']:.2f} TOPS/W, "
         f"utilization {s['utilization']:.4f}")
    return EXIT_OK


def cmd_sweep(cfg: ToolConfig, args) -> int:
    sw = cfg.sweep
    schemes = (args.scheme,) if args.scheme else sw.schemes
    bits = (args.bits,) if args.bits else sw.bits
    tiles = (args.tile,) if args.tile else sw.tiles
    points = [SweepPoint(s, b, t, f) for t in tiles for s in schemes for b in bits for f in sw.fp_units]
    net = _load_net(cfg, args.spec) if (args.spec or cfg.paths.network) else None
    energy, source = _energy(cfg)
    rows = sweep(points, net, energy, cfg.timing, jobs=args.jobs, split=cfg.crossbar.split,
                 max_tiles=cfg.crossbar.max_tiles)
    atomic_write(cfg.paths.out / "sweep.csv", rows_to_csv(rows))
    _say(f"energy: {source}")
    for r in rows:
        _say(f"{r['tile']:>9} {r['scheme']} {r['bits']}b fp={r['fp_units']:<3} "
             f"{r['peak_tops']:9.4f} TOPS {r['peak_tops_per_w']:8.2f} TOPS/W")
    return EXIT_OK


def cmd_calibrate(cfg: ToolConfig, args) -> int:
    table = _calibration_table(cfg)
    energy = calibrate_energy(table, timing=cfg.timing, free=args.free)
    atomic_write(cfg.paths.out / "energy.json", _dump_json(energy.to_dict()))
    _say(f"static power: {energy.p_static:.6g} W")
    for key, r in energy.residuals["relative_tops_per_w"].items():
        _say(f"{key}: residual {r:+.3e}")
    _say(f"condition number: {energy.residuals['condition_number']:.3g}")
    return EXIT_OK


def cmd_report(cfg: ToolConfig, args) -> int:
    out = cfg.paths.out
    lines = []
    found = False
    if (out / "accuracy.json").is_file():
        found = True
        acc = json.loads((out / "accuracy.json").read_text())
        lines.append(f"accuracy ({acc['n_runs']} runs, digital {acc['digital_accuracy']:.4f})")
        lines.append(f"{'time_s':>12}  {'mean':>7}  {'std':>7}")
        lines += [f"{c['time_s']:>12g}  {c['mean']:7.4f}  {c['std']:7.4f}" for c in acc["checkpoints"]]
    if (out / "perf.json").is_file():
        found = True
        s = json.loads((out / "perf.json").read_text())["summary"]
        lines.append(f"performance ({s['tile']} {s['scheme']} {s['bits']}-bit)")
        for k in ("inf_per_s", "latency_s", "energy_j", "tops", "tops_per_w", "utilization",
                  "effective_utilization"):
            lines.append(f"  {k:<22} {s[k]:.6g}")
    if (out / "plan.json").is_file():
        found = True
        p = json.loads((out / "plan.json").read_text())
        lines.append(f"mapping: {p['tiles_used']} tile(s), utilization {p['utilization']:.4f}, "
                     f"effective {p['effective_utilization']:.4f}")
    if not found:
        raise ConfigurationError(f"no accuracy.json, perf.json or plan.json in {out}")
    text = "\n".join(lines) + "\n"
    atomic_write(out / "report.txt", text)
    sys.stdout.write(text)
    return EXIT_OK


COMMANDS = {"make-dataset": cmd_make_dataset, "train": cmd_train, "map": cmd_map, "simulate": cmd_simulate,
            "perf": cmd_perf, "sweep": cmd_sweep, "calibrate": cmd_calibrate, "report": cmd_report}


# ---------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    shared = argparse.ArgumentParser(add_help=False)
    shared.add_argument("--config", type=Path, help="TOML configuration file")
    shared.add_argument("--seed", type=int, help="master seed (default 0)")
    shared.add_argument("--out", type=Path, help="output directory")
    shared.add_argument("--jobs", type=int, default=1, help="worker processes")
    shared.add_argument("--bits", type=int, choices=(4, 6, 8), help="activation/ADC precision")
    shared.add_argument("--scheme", choices=sorted(SCHEMES), help="ADC multiplexing scheme")
    shared.add_argument("--tile", choices=list(TILE_PRESETS), help="crossbar size")
    shared.add_argument("--network", type=Path, help="network spec or checkpoint JSON")
    shared.add_argument("--dataset", type=Path, help="training dataset directory")
    shared.add_argument("--eval-dataset", type=Path, help="evaluation dataset directory")
    shared.add_argument("--energy", type=Path, help="fitted energy constants (JSON)")

    parser = argparse.ArgumentParser(prog="analogcim", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("make-dataset", parents=[shared], help="write a synthetic dataset")
    p.add_argument("--kind", choices=("patterns", "blobs", "pair"), default="patterns")
    p.add_argument("--n-train", type=int, default=1000)
    p.add_argument("--n-test", type=int, default=200)
    p.add_argument("--size", type=int, default=16)
    p.add_argument("--noise", type=float, default=0.8)
    p.add_argument("--dim", type=int, default=16)
    p.add_argument("--classes", type=int, default=4)

    p = sub.add_parser("train", parents=[shared], help="two-stage hardware-aware training")
    p.add_argument("--eta", type=float, help="weight-noise coefficient")
    p.add_argument("--epochs1", type=int, help="stage-1 epochs")
    p.add_argument("--epochs2", type=int, help="stage-2 epochs")

    for name, text in (("map", "place layers on crossbar tiles"), ("perf", "latency/energy report")):
        p = sub.add_parser(name, parents=[shared], help=text)
        p.add_argument("--spec", choices=fixtures.spec_names(), help="bundled network spec")
        p.add_argument("--split", action="store_true", default=None, help="split layers larger than a tile")
        p.add_argument("--max-tiles", type=int, help="tile budget (0 = unlimited)")

    p = sub.add_parser("simulate", parents=[shared], help="deploy on simulated PCM and evaluate")
    p.add_argument("--noise-off", action="store_true", default=None, help="disable all device noise")
    p.add_argument("--runs", type=int, help="number of programming runs")
    p.add_argument("--no-gdc", action="store_true", help="disable drift compensation")
    p.add_argument("--converters", choices=("auto", "trained", "heuristic", "calibrated"))

    p = sub.add_parser("sweep", parents=[shared], help="design-space sweep")
    p.add_argument("--spec", choices=fixtures.spec_names(), help="bundled network spec")

    p = sub.add_parser("calibrate", parents=[shared], help="fit energy constants to TOPS/W points")
    p.add_argument("--table", type=Path, help="CSV with scheme, bits, tops_per_w columns")
    p.add_argument("--free", action="store_true", help="fit every constant separately")

    sub.add_parser("report", parents=[shared], help="summarize outputs found in --out")
    return parser


def _overrides(args) -> dict:
    g = lambda name: getattr(args, name, None)  # noqa: E731
    ov = {
        "seed": g("seed"), "paths.out": g("out"), "paths.network": g("network"),
        "paths.dataset": g("dataset"), "paths.eval_dataset": g("eval_dataset"),
        "paths.energy": g("energy"), "paths.calibration_table": g("table"),
        "crossbar.tile": g("tile"), "crossbar.scheme": g("scheme"), "crossbar.split": g("split"),
        "crossbar.max_tiles": g("max_tiles"),
        "train.eta": g("eta"), "train.epochs_stage1": g("epochs1"), "train.epochs_stage2": g("epochs2"),
        "simulate.noise_off": g("noise_off"), "simulate.n_runs": g("runs"),
        "simulate.converter_mode": g("converters"),
    }
    if g("no_gdc"):
        ov["simulate.gdc"] = False
    if g("bits") is not None:
        ov.update({"perf.bits": args.bits, "train.adc_bits": args.bits, "simulate.adc_bits": args.bits})
    for key in [k for k, v in ov.items() if isinstance(v, Path)]:
        ov[key] = str(ov[key])
    return ov


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = load_config(args.config, _overrides(args))
        if getattr(args, "jobs", 1) < 1:
            raise ConfigurationError("--jobs must be >= 1")
        return COMMANDS[args.command](cfg, args)
    except MappingError as exc:
        print(f"error: {exc}", file=sys.stderr)
        if exc.layers:
            print("offending layers: " + ", ".join(exc.layers), file=sys.stderr)
        return EXIT_MAPPING
    except (CalibrationError, TrainingError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigurationError, DomainError, FixtureError, FileNotFoundError, ValueError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"error: {msg}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
