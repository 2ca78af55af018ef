"""Command-line entry point.

Config files are flat INI sections with key=value entries; unspecified
keys take the defaults below (the published simulation parameters).  The
resolved configuration is echoed into the output directory so a run is
fully reproducible from its artifacts.

Sections and keys::

    [sim]      seed num_runs slots_max scheduler batching workers record_trace
    [planner]  horizon xi_coll xi_fail d_min kappa_max sigma_max pair_radius
               q_diag qm_diag r_diag a_max delta_max v_max road_halfwidth
               enforce_boundary feas_tol accept_residual slack_penalty
    [world]    ccz_size ca_size lane_width left_radius right_radius
               lanes_per_road arrival_rate mix num_vehicles v_ref spawn_headway
    [channel]  kind s_fixed n_channels eta gamma_db n0_dbm ptx_dbm tx_rate
    [noise]    g_diag d_diag sigma0_diag sigma_tilde0_diag process_scale
               meas_scale

Exit codes: 0 ok, 2 configuration/usage error, 3 runtime invariant
violation.
"""

from __future__ import annotations

import argparse
import configparser
import io
import json
import math
import os
import sys
from dataclasses import dataclass, replace

import numpy as np

from . import scheduler as sched_mod
from .channel import ChannelModel
from .dynamics import NoiseSpec
from .planner import PlannerConfig
from .sim import SimConfig, run_batch, run_once, write_summary, write_trace
from .world import IntersectionGeometry


class ConfigError(Exception):
    pass


_DEFAULT_DIAGS = {
    "g_diag": (0.03, 0.02, math.pi / 180, 0.1),
    "d_diag": (0.4, 0.2, math.pi / 150, 0.1),
    "sigma0_diag": (0.1, 0.05, math.pi / 180, 0.02),
    "sigma_tilde0_diag": (0.02, 0.01, math.pi / 360, 0.02),
}

_SCHEMA = {
    "sim": {
        "seed": ("int", 0),
        "num_runs": ("int", 1),
        "slots_max": ("int", 1200),
        "scheduler": ("str", "context"),
        "batching": ("str", "off"),
        "workers": ("int", 1),
        "record_trace": ("bool", True),
    },
    "planner": {
        "horizon": ("int", 20),
        "xi_coll": ("float", 0.1),
        "xi_fail": ("float", 0.05),
        "d_min": ("float", 4.0),
        "kappa_max": ("float", 30.0),
        "sigma_max": ("float", 0.5),
        "pair_radius": ("float", 30.0),
        "q_diag": ("vec4", (10.0, 10.0, 1.0, 1.0)),
        "qm_diag": ("vec4", (50.0, 50.0, 1.0, 1.0)),
        "r_diag": ("vec2", (20.0, 20.0)),
        "a_max": ("float", 5.0),
        "delta_max": ("float", 0.78),
        "v_max": ("float", 20.0),
        "road_halfwidth": ("float", 10.0),
        "enforce_boundary": ("bool", True),
        "feas_tol": ("float", 1e-7),
        "accept_residual": ("float", 1e-4),
        "slack_penalty": ("float", 1e4),
    },
    "world": {
        "ccz_size": ("float", 100.0),
        "ca_size": ("float", 20.0),
        "lane_width": ("float", 5.0),
        "left_radius": ("float", 15.0),
        "right_radius": ("float", 5.0),
        "lanes_per_road": ("int", 2),
        "arrival_rate": ("float", 1.2),
        "mix": ("vec3", (0.375, 0.375, 0.25)),
        "num_vehicles": ("int", 10),
        "v_ref": ("float", 20.0),
        "spawn_headway": ("float", 8.0),
    },
    "channel": {
        "kind": ("str", "fixed"),
        "s_fixed": ("float", 0.95),
        "n_channels": ("int", 20),
        "eta": ("float", 3.0),
        "gamma_db": ("float", 16.0),
        "n0_dbm": ("float", -99.0),
        "ptx_dbm": ("float", -18.0),
        "tx_rate": ("float", 10.0),
    },
    "noise": {
        "g_diag": ("vec4", _DEFAULT_DIAGS["g_diag"]),
        "d_diag": ("vec4", _DEFAULT_DIAGS["d_diag"]),
        "sigma0_diag": ("vec4", _DEFAULT_DIAGS["sigma0_diag"]),
        "sigma_tilde0_diag": ("vec4", _DEFAULT_DIAGS["sigma_tilde0_diag"]),
        "process_scale": ("float", 1.0),
        "meas_scale": ("float", 1.0),
    },
}

SWEEP_AXES = ("num_vehicles", "n_channels", "s_fixed", "xi_coll", "noise_scale",
              "scheduler")


def _parse_value(kind: str, raw: str, path: str):
    try:
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        if kind == "bool":
            if raw.lower() in ("true", "1", "yes", "on"):
                return True
            if raw.lower() in ("false", "0", "no", "off"):
                return False
            raise ValueError(f"not a boolean: {raw!r}")
        if kind == "str":
            return raw.strip()
        if kind.startswith("vec"):
            n = int(kind[3:])
            vals = tuple(float(x) for x in raw.split(","))
            if len(vals) != n:
                raise ValueError(f"expected {n} comma-separated values")
            return vals
    except ValueError as e:
        raise ConfigError(f"{path}: {e}") from e
    raise AssertionError(kind)


def parse_config_text(text: str) -> dict:
    """Parse config text into the flat {section: {key: value}} dict with
    defaults filled in; unknown sections/keys are rejected by name."""
    cp = configparser.ConfigParser()
    try:
        cp.read_string(text)
    except configparser.Error as e:
        raise ConfigError(str(e)) from e
    resolved = {sec: {k: v[1] for k, v in keys.items()}
                for sec, keys in _SCHEMA.items()}
    for sec in cp.sections():
        if sec not in _SCHEMA:
            raise ConfigError(f"unknown section [{sec}]")
        for key, raw in cp.items(sec):
            if key not in _SCHEMA[sec]:
                raise ConfigError(f"unknown key {sec}.{key}")
            kind = _SCHEMA[sec][key][0]
            resolved[sec][key] = _parse_value(kind, raw, f"{sec}.{key}")
    return resolved


def build_sim_config(resolved: dict) -> SimConfig:
    """Turn the resolved key/value dict into a validated SimConfig."""
    s, p, w, c, n = (resolved[k] for k in ("sim", "planner", "world", "channel",
                                           "noise"))
    if s["scheduler"] not in sched_mod.SCHEDULER_KINDS:
        raise ConfigError(f"sim.scheduler: must be one of {sched_mod.SCHEDULER_KINDS}")
    batching = None
    if s["batching"] != "off":
        if not s["batching"].startswith("fifo:"):
            raise ConfigError("sim.batching: must be 'off' or 'fifo:<size>'")
        try:
            batching = int(s["batching"].split(":", 1)[1])
        except ValueError as e:
            raise ConfigError(f"sim.batching: {e}") from e
        if batching < 1:
            raise ConfigError("sim.batching: batch size must be >= 1")
    try:
        planner = PlannerConfig(
            M=p["horizon"], xi_coll=p["xi_coll"], xi_fail_u=p["xi_fail"],
            d_min=p["d_min"], kappa_max=p["kappa_max"], sigma_max=p["sigma_max"],
            Q=np.diag(p["q_diag"]), Q_M=np.diag(p["qm_diag"]), R=np.diag(p["r_diag"]),
            pair_radius=p["pair_radius"], a_max=p["a_max"], delta_max=p["delta_max"],
            v_max=p["v_max"], road_halfwidth=p["road_halfwidth"],
            enforce_boundary=p["enforce_boundary"], feas_tol=p["feas_tol"],
            accept_residual=p["accept_residual"], slack_penalty=p["slack_penalty"])
    except ValueError as e:
        raise ConfigError(f"planner: {e}") from e
    try:
        geometry = IntersectionGeometry(
            ccz_size=w["ccz_size"], ca_size=w["ca_size"], lane_width=w["lane_width"],
            left_radius=w["left_radius"], right_radius=w["right_radius"],
            lanes_per_road=w["lanes_per_road"])
    except ValueError as e:
        raise ConfigError(f"world: {e}") from e
    try:
        channel = ChannelModel(kind=c["kind"], s_fixed=c["s_fixed"],
                               eta=c["eta"], gamma_db=c["gamma_db"],
                               n0_dbm=c["n0_dbm"], ptx_dbm=c["ptx_dbm"],
                               n_channels=c["n_channels"], tx_rate=c["tx_rate"])
    except ValueError as e:
        raise ConfigError(f"channel: {e}") from e
    try:
        noise = NoiseSpec(G=n["process_scale"] * np.diag(n["g_diag"]),
                          C=np.eye(4),
                          D=n["meas_scale"] * np.diag(n["d_diag"]))
    except ValueError as e:
        raise ConfigError(f"noise: {e}") from e
    if abs(sum(w["mix"]) - 1.0) > 1e-9:
        raise ConfigError("world.mix: intent probabilities must sum to 1")
    try:
        cfg = SimConfig(
            planner=planner, channel=channel, scheduler_kind=s["scheduler"],
            geometry=geometry, noise=noise,
            sigma0=np.diag(n["sigma0_diag"]),
            sigma_tilde0=np.diag(n["sigma_tilde0_diag"]),
            arrival_rate=w["arrival_rate"], mix=tuple(w["mix"]),
            num_vehicles=(w["num_vehicles"] or None), v_ref=w["v_ref"],
            slots_max=s["slots_max"], spawn_headway=w["spawn_headway"],
            batching=batching, seed=s["seed"], num_runs=s["num_runs"],
            workers=s["workers"], record_trace=s["record_trace"])
    except ValueError as e:
        raise ConfigError(f"sim: {e}") from e
    return cfg


def parse_config(path: str) -> tuple[SimConfig, dict]:
    if not os.path.exists(path):
        raise ConfigError(f"config file not found: {path}")
    with open(path) as f:
        resolved = parse_config_text(f.read())
    return build_sim_config(resolved), resolved


def emit_config(resolved: dict) -> str:
    out = io.StringIO()
    for sec in _SCHEMA:
        out.write(f"[{sec}]\n")
        for key in _SCHEMA[sec]:
            val = resolved[sec][key]
            if isinstance(val, tuple):
                val = ",".join(repr(float(x)) for x in val)
            elif isinstance(val, bool):
                val = "true" if val else "false"
            elif isinstance(val, float):
                val = repr(val)
            out.write(f"{key} = {val}\n")
        out.write("\n")
    return out.getvalue()


def _echo_config(resolved: dict, out_dir: str) -> None:
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "config.resolved.cfg"), "w") as f:
        f.write(emit_config(resolved))


def _apply_axis(resolved: dict, axis: str, value: str) -> dict:
    r = json.loads(json.dumps({k: {k2: list(v2) if isinstance(v2, tuple) else v2
                                   for k2, v2 in v.items()}
                               for k, v in resolved.items()}))
    for sec in r:
        for k in r[sec]:
            if isinstance(r[sec][k], list):
                r[sec][k] = tuple(r[sec][k])
    if axis == "num_vehicles":
        r["world"]["num_vehicles"] = int(value)
    elif axis == "n_channels":
        r["channel"]["n_channels"] = int(value)
    elif axis == "s_fixed":
        r["channel"]["s_fixed"] = float(value)
        r["channel"]["kind"] = "fixed"
    elif axis == "xi_coll":
        r["planner"]["xi_coll"] = float(value)
    elif axis == "noise_scale":
        r["noise"]["meas_scale"] = float(value)
    elif axis == "scheduler":
        r["sim"]["scheduler"] = value
    else:
        raise ConfigError(f"unknown sweep axis {axis!r}; allowed: {SWEEP_AXES}")
    return r


def expand_sweep(resolved: dict, axes: list[str]) -> list[tuple[dict, dict]]:
    """Expand repeated --axis name=v1,v2,... flags into the config grid."""
    grid = [({}, resolved)]
    for spec in axes:
        if "=" not in spec:
            raise ConfigError(f"--axis must look like name=v1,v2,... (got {spec!r})")
        name, vals = spec.split("=", 1)
        name = name.strip()
        values = [v.strip() for v in vals.split(",") if v.strip()]
        if not values:
            raise ConfigError(f"--axis {name}: no values given")
        nxt = []
        for params, cfg in grid:
            for v in values:
                p2 = dict(params)
                p2[name] = v
                nxt.append((p2, _apply_axis(cfg, name, v)))
        grid = nxt
    return grid


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(prog="cavcoord",
                                 description="robust cooperative intersection crossing")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", default=None, help="config file (INI)")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out", default=None, help="output directory")
        p.add_argument("--scheduler", default=None,
                       choices=list(sched_mod.SCHEDULER_KINDS))
        p.add_argument("--timeout-slots", type=int, default=None)
        p.add_argument("--dump-programs", action="store_true")

    p_run = sub.add_parser("run", help="one seeded closed-loop run")
    common(p_run)
    p_batch = sub.add_parser("batch", help="seeded Monte Carlo batch")
    common(p_batch)
    p_batch.add_argument("--runs", type=int, default=None)
    p_sweep = sub.add_parser("sweep", help="parameter-grid batches")
    common(p_sweep)
    p_sweep.add_argument("--runs", type=int, default=None)
    p_sweep.add_argument("--axis", action="append", default=[],
                         help="name=v1,v2,... (repeatable); axes: %s" % (SWEEP_AXES,))
    p_dump = sub.add_parser("dump-config", help="print resolved defaults")
    p_dump.add_argument("--config", default=None)

    args = ap.parse_args(argv)
    try:
        if args.config:
            cfg, resolved = parse_config(args.config)
        else:
            resolved = parse_config_text("")
            cfg = build_sim_config(resolved)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2

    if args.command == "dump-config":
        print(emit_config(resolved), end="")
        return 0

    if args.seed is not None:
        resolved["sim"]["seed"] = args.seed
    if getattr(args, "runs", None) is not None:
        resolved["sim"]["num_runs"] = args.runs
    if args.scheduler is not None:
        resolved["sim"]["scheduler"] = args.scheduler
    if args.timeout_slots is not None:
        resolved["sim"]["slots_max"] = args.timeout_slots
    try:
        cfg = build_sim_config(resolved)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2

    out_dir = args.out or "out"
    try:
        if args.command == "run":
            _echo_config(resolved, out_dir)
            if args.dump_programs:
                cfg = replace(cfg, dump_programs=os.path.join(out_dir, "programs"))
            metrics, trace = run_once(cfg, cfg.seed)
            write_trace(os.path.join(out_dir, "run_0000.csv"), trace)
            one = replace(cfg, num_runs=1)
            batch = run_batch(replace(one, record_trace=False))
            write_summary(os.path.join(out_dir, "summary.json"), batch)
            print(f"run complete: {metrics.slots} slots, "
                  f"{len(metrics.collision_events)} collision events, "
                  f"TPT {metrics.total_passing_time:.2f} s")
        elif args.command == "batch":
            _echo_config(resolved, out_dir)
            batch = run_batch(cfg, out_dir=out_dir)
            print(f"batch complete: {cfg.num_runs} runs, "
                  f"CP {batch.collision_probability[0]:.4f} "
                  f"TPT {batch.total_passing_time[0]:.2f} s")
        elif args.command == "sweep":
            grid = expand_sweep(resolved, args.axis)
            index = []
            for i, (params, r) in enumerate(grid):
                sub_dir = os.path.join(out_dir, f"point_{i:03d}")
                cfg_i = build_sim_config(r)
                _echo_config(r, sub_dir)
                batch = run_batch(cfg_i, out_dir=sub_dir)
                index.append({"params": params,
                              "dir": os.path.basename(sub_dir),
                              "summary": os.path.join(os.path.basename(sub_dir),
                                                      "summary.json")})
            with open(os.path.join(out_dir, "sweep.json"), "w") as f:
                json.dump({"schema": "cavcoord-sweep-v1", "points": index},
                          f, indent=2, sort_keys=True)
                f.write("\n")
            print(f"sweep complete: {len(grid)} grid points")
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except (ValueError, AssertionError) as e:
        print(f"runtime invariant violation: {e}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
