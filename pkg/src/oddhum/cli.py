"""Command line entry point.

    oddhum --mode linear --out runs/lin --nx 64 --nt 128 --delta 1e-2
    oddhum --config exp.json --override control.N2=3 --override verify.trials=20

A config file is JSON with the keys ``mode``, ``seed``, ``control`` (fields
of :class:`~oddhum.control.ControlConfig`), ``verify`` and ``sweep``.  A
``manifest.json`` written by a previous run is accepted as a config, which
reruns the experiment it records.
"""

from __future__ import annotations

import argparse
import copy
import csv
import itertools
import json
import math
import platform
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from .control import ControlConfig, cascade_control, null_control_linear, null_control_semilinear, replay_cascade
from .errors import ConfigError, OddHumError
from .grid import write_field_csv
from .verify import (
    convexity_spot_check,
    default_workers,
    gradient_certify,
    gradient_step_order,
    loglog_slope,
    max_principle_probe,
    observability_battery,
)
from .weights import WeightFamily

MODES = ("linear", "semilinear", "cascade", "verify", "sweep")
CHECKS = ("gradient", "order", "convexity", "observability", "probe")
SWEEP_KEYS = ("delta", "nx", "nt", "exponents")

EXIT_CODES = {
    "CONFIG_INVALID": 2,
    "PARAMETER_ERROR": 2,
    "CONSTRAINT_VIOLATION": 2,
    "GEOMETRY_ERROR": 2,
    "DOMAIN_ERROR": 2,
    "SHAPE_ERROR": 2,
    "N2_MUST_BE_ODD": 3,
    "PRECONDITION_FAILED": 3,
}
EXIT_NUMERICAL = 4


@dataclass
class ExperimentConfig:
    mode: str = "linear"
    seed: int = 0
    control: ControlConfig = field(default_factory=ControlConfig)
    verify: dict = field(default_factory=dict)
    sweep: dict = field(default_factory=dict)
    replay: bool = True

    def validate(self) -> "ExperimentConfig":
        if self.mode not in MODES:
            raise ConfigError(f"unknown mode {self.mode!r}; expected one of {MODES}")
        if not (isinstance(self.seed, int) and 0 <= self.seed < 2**64):
            raise ConfigError(f"seed must be an unsigned 64-bit integer, got {self.seed!r}")
        checks = self.verify.get("checks", list(CHECKS))
        bad = [c for c in checks if c not in CHECKS]
        if bad:
            raise ConfigError(f"unknown verify checks {bad}; expected a subset of {CHECKS}")
        unknown = set(self.sweep) - set(SWEEP_KEYS) - {"mode"}
        if unknown:
            raise ConfigError(f"unknown sweep keys {sorted(unknown)}")
        if self.mode == "sweep" and self.sweep.get("mode", "semilinear") not in MODES[:4]:
            raise ConfigError(f"sweep points must use one of {MODES[:4]}")
        if self.mode != "sweep":
            self.control.validate(cascade=self.mode == "cascade")
            self.control.exponents()
        return self

    def to_dict(self) -> dict:
        return {
            "mode": self.mode,
            "seed": self.seed,
            "control": self.control.to_dict(),
            "verify": copy.deepcopy(self.verify),
            "sweep": copy.deepcopy(self.sweep),
            "replay": self.replay,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        if "config" in data and "mode" not in data:
            data = data["config"]
        unknown = set(data) - {"mode", "seed", "control", "verify", "sweep", "replay"}
        if unknown:
            raise ConfigError(f"unknown config keys {sorted(unknown)}")
        try:
            control = ControlConfig.from_dict(dict(data.get("control", {})))
        except TypeError as exc:
            raise ConfigError(f"bad control section: {exc}") from exc
        return cls(
            mode=data.get("mode", "linear"),
            seed=data.get("seed", 0),
            control=control,
            verify=dict(data.get("verify", {})),
            sweep=dict(data.get("sweep", {})),
            replay=bool(data.get("replay", True)),
        )


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_override(data: dict, assignment: str) -> None:
    """Apply ``KEY=VALUE``; bare keys address the control section."""
    if "=" not in assignment:
        raise ConfigError(f"override {assignment!r} is not of the form KEY=VALUE")
    key, value = assignment.split("=", 1)
    parts = key.strip().split(".")
    if parts[0] not in ("mode", "seed", "control", "verify", "sweep", "replay"):
        parts = ["control"] + parts
    node = data
    for p in parts[:-1]:
        node = node.setdefault(p, {})
        if not isinstance(node, dict):
            raise ConfigError(f"override {assignment!r} descends into a non-table value")
    node[parts[-1]] = _parse_value(value)


def resolve_config(args: argparse.Namespace) -> ExperimentConfig:
    data: dict = {}
    if args.config:
        try:
            data = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from exc
        if "config" in data and "mode" not in data:
            data = data["config"]
    if args.mode:
        data["mode"] = args.mode
    if args.seed is not None:
        data["seed"] = args.seed
    ctrl = data.setdefault("control", {})
    for name in ("nx", "nt", "delta"):
        val = getattr(args, name)
        if val is not None:
            ctrl[name] = val
    for assignment in args.override or []:
        apply_override(data, assignment)
    return ExperimentConfig.from_dict(data).validate()


# --------------------------------------------------------------------------- pipelines


def _sine(cfg: ControlConfig) -> np.ndarray:
    grid = cfg.grid()
    return cfg.delta * np.sin(math.pi * grid.x / grid.L)


def run_linear(exp: ExperimentConfig, out: Path) -> dict:
    cfg = exp.control
    res = null_control_linear(_sine(cfg), None, cfg)
    grid = cfg.grid()
    write_field_csv(out / "fields" / "y.csv", res.replay.y, grid)
    write_field_csv(out / "fields" / "h.csv", res.duality.h, grid)
    return res.diagnostics()


def run_semilinear(exp: ExperimentConfig, out: Path) -> dict:
    cfg = exp.control
    res = null_control_semilinear(_sine(cfg), cfg)
    write_field_csv(out / "fields" / "y.csv", res.replay.y, res.grid)
    write_field_csv(out / "fields" / "h.csv", res.duality.h, res.grid)
    return res.diagnostics()


def run_cascade(exp: ExperimentConfig, out: Path) -> dict:
    cfg = exp.control
    y0 = _sine(cfg)
    run = cascade_control(y0, y0, cfg)
    for name in ("y1", "y2", "h"):
        write_field_csv(out / "fields" / f"{name}.csv", getattr(run, name), run.grid)
    diag = dict(run.diagnostics)
    if exp.replay:
        diag["replay"] = replay_cascade(run, cfg).to_dict()
    return diag


def run_verify(exp: ExperimentConfig, out: Path) -> dict:
    cfg, opts = exp.control, exp.verify
    grid = cfg.grid()
    exps = cfg.exponents()
    weights = WeightFamily.build(grid, exps)
    checks = opts.get("checks", list(CHECKS))
    diag: dict = {}
    if "gradient" in checks:
        cert = gradient_certify(exp.seed, weights, trials=int(opts.get("trials", 50)))
        diag["gradient"] = {"worst": cert.worst, "trials": cert.trials, "step": cert.step, "seed": cert.seed}
    if "order" in checks:
        diag["order"] = gradient_step_order(exp.seed, weights)
    if "convexity" in checks:
        diag["convexity"] = convexity_spot_check(exp.seed, weights, pairs=int(opts.get("pairs", 100))).to_dict()
    if "observability" in checks:
        rep = observability_battery(weights, n_samples=int(opts.get("n_samples", 100)), seed=exp.seed, omega=cfg.omega)
        rep.write_csv(out / "observability.csv")
        diag["observability"] = {"constant": rep.constant, "n_samples": rep.n_samples, "violations": rep.violations}
    if "probe" in checks:
        even = ControlConfig.from_dict({**cfg.to_dict(), "N2": 2 * (cfg.N2 // 2) or 2})
        prof = np.sin(math.pi * grid.x / grid.L)
        diag["probe"] = {"N2": even.N2, "min_y2_T": max_principle_probe(cfg.delta * prof, prof, even)}
    return diag


PIPELINES = {"linear": run_linear, "semilinear": run_semilinear, "cascade": run_cascade, "verify": run_verify}


# --------------------------------------------------------------------------- manifest


def versions() -> dict:
    return {"oddhum": __version__, "numpy": np.__version__, "scipy": scipy.__version__, "python": platform.python_version()}


def _json_default(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def write_json(path: Path, payload: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, default=_json_default))


def run_point(exp: ExperimentConfig, out: Path) -> dict:
    """Run one non-sweep experiment and write its manifest; never raises."""
    out.mkdir(parents=True, exist_ok=True)
    start = time.perf_counter()
    manifest = {"config": exp.to_dict(), "versions": versions(), "seed": exp.seed}
    try:
        manifest["diagnostics"] = PIPELINES[exp.mode](exp, out)
        manifest["status"] = "ok"
    except OddHumError as exc:
        manifest["status"] = "error"
        manifest["error"] = exc.to_dict()
    manifest["wall_time"] = time.perf_counter() - start
    write_json(out / "manifest.json", manifest)
    return manifest


def sweep_points(exp: ExperimentConfig) -> list[ExperimentConfig]:
    """Cartesian product of the sweep axes in a fixed order (delta, nx, nt, exponents)."""
    axes = [(k, list(exp.sweep[k])) for k in SWEEP_KEYS if k in exp.sweep]
    if not axes or any(not vals for _, vals in axes):
        return []
    points = []
    for combo in itertools.product(*(vals for _, vals in axes)):
        ctrl = exp.control.to_dict()
        for (key, _), val in zip(axes, combo):
            if key == "exponents":
                ctrl["exponent_overrides"] = dict(val)
            else:
                ctrl[key] = val
        points.append(
            ExperimentConfig(
                mode=exp.sweep.get("mode", "semilinear"),
                seed=exp.seed,
                control=ControlConfig.from_dict(ctrl),
                verify=copy.deepcopy(exp.verify),
                replay=exp.replay,
            )
        )
    return points


def _headline(diag: dict) -> dict:
    return {
        "h_linf": diag.get("h_linf", ""),
        "terminal_linf": diag.get("terminal_linf", diag.get("terminal", {}).get("y2_T", "")),
        "rel_grad": diag.get("optimizer", {}).get("rel_grad", ""),
    }


def run_sweep(exp: ExperimentConfig, out: Path) -> dict:
    points = sweep_points(exp)

    def one(item):
        i, point = item
        try:
            point.validate()
        except OddHumError as exc:
            manifest = {"config": point.to_dict(), "status": "error", "error": exc.to_dict()}
            write_json(out / "points" / f"{i:04d}" / "manifest.json", manifest)
            return manifest
        return run_point(point, out / "points" / f"{i:04d}")

    with ThreadPoolExecutor(max_workers=default_workers()) as pool:
        manifests = list(pool.map(one, enumerate(points)))

    rows = []
    for i, (point, man) in enumerate(zip(points, manifests)):
        c = point.control
        row = {"point": i, "delta": c.delta, "nx": c.nx, "nt": c.nt, "exponents": json.dumps(c.exponent_overrides, sort_keys=True)}
        row["status"] = man["status"]
        row["error_class"] = man.get("error", {}).get("error_class", "")
        row.update(_headline(man.get("diagnostics", {})))
        rows.append(row)
    slope = None
    ok = [r for r in rows if r["status"] == "ok" and r["delta"] > 0 and r["h_linf"] != ""]
    if "delta" in exp.sweep and len({r["delta"] for r in ok}) >= 2:
        slope = loglog_slope([r["delta"] for r in ok], [r["h_linf"] for r in ok])
    _write_aggregate(out / "aggregate.csv", rows, slope)
    return {"points": len(rows), "failures": sum(r["status"] != "ok" for r in rows), "slope": slope}


def _write_aggregate(path: Path, rows: list, slope) -> None:
    keys = ["point", "delta", "nx", "nt", "exponents", "status", "error_class", "h_linf", "terminal_linf", "rel_grad"]
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(keys)
        for r in rows:
            w.writerow([repr(r[k]) if isinstance(r[k], float) else r[k] for k in keys])
        if slope is not None:
            w.writerow(["slope", repr(slope)] + [""] * (len(keys) - 2))


# --------------------------------------------------------------------------- entry point


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="oddhum", description="Null-control experiments with odd controls.")
    ap.add_argument("--config", help="JSON config or a previous manifest.json")
    ap.add_argument("--mode", choices=MODES)
    ap.add_argument("--out", default="oddhum-out", help="output directory")
    ap.add_argument("--seed", type=int)
    ap.add_argument("--nx", type=int)
    ap.add_argument("--nt", type=int)
    ap.add_argument("--delta", type=float)
    ap.add_argument("--override", action="append", metavar="KEY=VALUE", help="repeatable; dotted keys")
    return ap


def _fail(exc: OddHumError, out: Path | None) -> int:
    payload = exc.to_dict()
    print(json.dumps(payload, default=_json_default), file=sys.stderr)
    if out is not None:
        write_json(out / "manifest.json", {"status": "error", "error": payload, "versions": versions()})
    return EXIT_CODES.get(exc.error_class, EXIT_NUMERICAL)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    out = Path(args.out)
    try:
        exp = resolve_config(args)
    except OddHumError as exc:
        return _fail(exc, out)
    if exp.mode == "sweep":
        start = time.perf_counter()
        summary = run_sweep(exp, out)
        write_json(
            out / "manifest.json",
            {
                "config": exp.to_dict(),
                "versions": versions(),
                "seed": exp.seed,
                "status": "ok",
                "diagnostics": summary,
                "wall_time": time.perf_counter() - start,
            },
        )
        print(json.dumps(summary, default=_json_default))
        return 0
    manifest = run_point(exp, out)
    if manifest["status"] != "ok":
        err = manifest["error"]
        print(json.dumps(err, default=_json_default), file=sys.stderr)
        return EXIT_CODES.get(err["error_class"], EXIT_NUMERICAL)
    print(json.dumps({"status": "ok", "out": str(out), "wall_time": manifest["wall_time"]}))
    return 0


if __name__ == "__main__":
    sys.exit(main())
