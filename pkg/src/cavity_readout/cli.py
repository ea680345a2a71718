"""Command-line recipes: simulate, analyze, sweep, fit, project.

Every run reads one JSON scenario (units: Hz, Gauss, seconds, degrees) and
writes deterministic primary outputs plus a `meta.json` sidecar that holds the
only non-reproducible fields (timestamp, argv).

Exit codes: 0 success, 1 analysis failure, 2 usage or configuration error.
"""
from __future__ import annotations

import argparse
import datetime as _dt
import json
import math
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from . import fitting, inference, presets
from . import spin_model as sm
from .photon_sim import SimConfig, dark_counts_for_snr, load_record, save_record, simulate_record


class ConfigError(ValueError):
    pass


SCENARIO_KEYS = {"name", "preset", "ion", "model", "sim", "analysis", "sweep", "fit", "project", "output_dir"}
SECTION_KEYS = {
    "sim": {f for f in SimConfig.__dataclass_fields__} | {"snr"},
    "analysis": {"chain", "max_offset", "mode", "window", "ties", "f_target", "max_pulses"},
    "sweep": {"axis", "start", "stop", "num", "orientation", "average"},
    "fit": {"kind", "data", "axis", "fit_purcell", "free_scale", "orientation", "bootstrap", "average"},
    "project": {
        "q_int", "q_wg", "fiber_coupling", "detector", "other", "cyclicity", "p_ex", "snr", "f_target",
    },
    "model": {"ground", "excited", "coupling"},
}


@dataclass
class Scenario:
    name: str = "run"
    preset: str | None = None
    ion: sm.IonCavityParams | None = None
    model: dict = field(default_factory=dict)
    sim: dict = field(default_factory=dict)
    analysis: dict = field(default_factory=dict)
    sweep: dict = field(default_factory=dict)
    fit: dict = field(default_factory=dict)
    project: dict = field(default_factory=dict)
    output_dir: str = "out"

    @classmethod
    def from_dict(cls, data: dict) -> "Scenario":
        if not isinstance(data, dict):
            raise ConfigError("scenario must be a JSON object")
        unknown = set(data) - SCENARIO_KEYS
        if unknown:
            raise ConfigError(f"unknown scenario keys: {sorted(unknown)}")
        for section, allowed in SECTION_KEYS.items():
            extra = set(data.get(section, {})) - allowed
            if extra:
                raise ConfigError(f"unknown keys in '{section}': {sorted(extra)}")
        if "preset" in data and "ion" in data:
            raise ConfigError("give either 'preset' or 'ion', not both")
        preset = data.get("preset")
        if preset is not None and preset not in presets.ION_PRESETS:
            raise ConfigError(f"unknown preset {preset!r}; choose from {sorted(presets.ION_PRESETS)}")
        try:
            ion = presets.params_from_dict(data["ion"]) if "ion" in data else None
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"invalid 'ion' block: {exc}") from None
        kwargs = {k: data[k] for k in ("name", "model", "sim", "analysis", "sweep", "fit", "project", "output_dir") if k in data}
        return cls(preset=preset, ion=ion, **kwargs)

    @property
    def ion_params(self) -> sm.IonCavityParams:
        if self.ion is not None:
            return self.ion
        return presets.get_preset(self.preset or "ion1").params

    def tensors_and_coupling(self):
        ground, excited = presets.default_tensors()
        try:
            if "ground" in self.model:
                ground = presets.tensor_from_dict(self.model["ground"])
            if "excited" in self.model:
                excited = presets.tensor_from_dict(self.model["excited"])
            m = presets.coupling_from_dict(self.model["coupling"]) if "coupling" in self.model else presets.fitted_coupling()
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"invalid 'model' block: {exc}") from None
        return ground, excited, m

    def sim_config(self, seed: int | None = None) -> SimConfig:
        sim = dict(self.sim)
        n_pulses = sim.pop("n_pulses", 10**6)
        snr = sim.pop("snr", None)
        if seed is not None:
            sim["seed"] = seed
        if sim.get("t1_dark", 0.0) is None:
            sim["t1_dark"] = math.inf
        try:
            if self.preset is not None:
                base = presets.sim_config_for(self.preset, n_pulses).to_dict()
                base["t1_dark"] = presets.get_preset(self.preset).t1_dark
            else:
                base = {"n_pulses": n_pulses}
                if self.ion is not None:
                    base.update(eta=self.ion.eta)
            base.update(sim)
            base["n_pulses"] = n_pulses
            if snr is not None:
                cfg = SimConfig(**base)
                base["dark_counts_per_window"] = dark_counts_for_snr(cfg.p_ex, cfg.eta, snr)
            elif self.ion is not None and "dark_counts_per_window" not in sim:
                cfg = SimConfig(**base)
                base["dark_counts_per_window"] = dark_counts_for_snr(cfg.p_ex, cfg.eta, self.ion.snr)
            return SimConfig(**base)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"invalid 'sim' block: {exc}") from None


def load_scenario(path) -> Scenario:
    if path is None:
        return Scenario()
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    try:
        data = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{p}: invalid JSON ({exc})") from None
    return Scenario.from_dict(data)


def _orientation(block: dict | None, default: sm.FieldOrientation) -> sm.FieldOrientation:
    if not block:
        return default
    extra = set(block) - {"phi", "theta", "magnitude"}
    if extra:
        raise ConfigError(f"unknown orientation keys: {sorted(extra)}")
    return sm.FieldOrientation(block.get("phi", default.phi), block.get("theta", default.theta), block.get("magnitude", 1.0))


# --- output helpers ---------------------------------------------------------

def _out_dir(args, scenario: Scenario) -> Path:
    out = Path(args.out or scenario.output_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ConfigError(f"cannot create output directory {out}: {exc}") from None
    return out


def _write_meta(out: Path, command: str, argv) -> None:
    meta = {
        "command": command,
        "argv": list(argv),
        "version": __version__,
        "timestamp": _dt.datetime.now(_dt.timezone.utc).isoformat(),
    }
    (out / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def _clean(value):
    if isinstance(value, dict):
        return {k: _clean(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_clean(v) for v in value]
    if isinstance(value, (np.integer,)):
        return int(value)
    if isinstance(value, (float, np.floating)):
        return float(value) if math.isfinite(value) else None
    return value


def _emit(out: Path, stem: str, payload: dict, tables: dict, fmt: str) -> None:
    """Write `<stem>.json`; tables go to CSV files, or inline with --format json."""
    payload = _clean(payload)
    if fmt == "json":
        payload["tables"] = {
            name: {"columns": list(header), "rows": _clean([list(r) for r in rows])}
            for name, (header, rows) in tables.items()
        }
    else:
        for name, (header, rows) in tables.items():
            inference.write_table_csv(header, rows, out / f"{name}.csv")
    inference.write_json(payload, out / f"{stem}.json")


# --- commands ---------------------------------------------------------------

def cmd_simulate(args, scenario: Scenario) -> int:
    cfg = scenario.sim_config(args.seed)
    out = _out_dir(args, scenario)
    record = simulate_record(cfg)
    suffix = ".json" if args.format == "json" else ".csv"
    save_record(record, out / f"record{suffix}")
    inference.write_json({"name": scenario.name, "preset": scenario.preset, "sim": _clean(cfg.to_dict())}, out / "config.json")
    return 0


def _hmm_for(record, scenario: Scenario, seed) -> tuple[SimConfig, inference.HmmParams]:
    cfg = record.config
    if cfg is None:
        if not scenario.sim and scenario.preset is None and scenario.ion is None:
            raise ConfigError("record carries no sim config; pass --config with a 'sim' block or preset")
        cfg = scenario.sim_config(seed)
    return cfg, inference.HmmParams.from_sim(cfg)


def cmd_analyze(args, scenario: Scenario) -> int:
    path = Path(args.record)
    if not path.is_file():
        raise ConfigError(f"record file not found: {path}")
    try:
        record = load_record(path)
    except (ValueError, KeyError) as exc:
        raise ConfigError(f"cannot read record: {exc}") from None
    opts = dict(scenario.analysis)
    chain = args.chain or opts.get("chain")
    if chain not in ("g2", "bayes", "ml", "window"):
        raise ConfigError("analysis chain must be one of g2, bayes, ml, window")
    cfg, hmm = _hmm_for(record, scenario, args.seed)
    out = _out_dir(args, scenario)
    payload: dict = {"chain": chain, "n_pulses": len(record)}
    tables: dict = {}

    if chain == "g2":
        c, fit, curve = inference.estimate_cyclicity(record, cfg.p_ex, opts.get("mode", "difference"), opts.get("max_offset"))
        payload.update(inference.n0_payload(fit, c, cfg.p_ex))
        tables["g2"] = (("offset", "g2", "n_pairs"), inference.g2_rows(curve))
    elif chain == "bayes":
        post = inference.bayes_smoother(record, hmm)
        payload["hmm"] = hmm.__dict__
        payload["mean_posterior_up"] = float(post.mean())
        if record.truth is not None:
            payload["accuracy_vs_truth"] = float(np.mean((post > 0.5) == (record.truth == 1)))
        tables["posterior"] = (("pulse_index", "p_up"), zip(range(len(post)), post.tolist()))
    elif chain == "ml":
        f_target = opts.get("f_target", 0.946)
        max_pulses = opts.get("max_pulses", 2000)
        res = inference.adaptive_ml_readout(record, hmm, f_target, max_pulses)
        if not res:
            raise inference.FitError("no measurement completed within the record")
        durations = np.array([r.duration_pulses for r in res])
        payload.update(
            hmm=hmm.__dict__, f_target=f_target, max_pulses=max_pulses, n_measurements=len(res),
            mean_duration_pulses=float(durations.mean()),
            mean_duration_s=float(durations.mean() * cfg.t_rep),
            timeout_fraction=float(np.mean([r.terminated_by == "timeout" for r in res])),
            consecutive_agreement=inference.consecutive_agreement(res) if len(res) > 1 else None,
        )
        if record.truth is not None:
            payload["accuracy_vs_truth"] = inference.readout_accuracy(res, record.truth)
        rows = ((r.start_pulse, r.duration_pulses, "up" if r.state else "down", r.confidence, r.terminated_by) for r in res)
        tables["readout"] = (("start_pulse", "duration_pulses", "state", "confidence", "terminated_by"), rows)
    else:
        window = int(opts.get("window", 850))
        wr = inference.fixed_window_readout(record, window, opts.get("ties", "previous"), seed=args.seed or 0)
        payload.update(window=window, threshold=wr.threshold, fidelity_vs_truth=wr.fidelity, n_windows=len(wr.states))
        values, counts = wr.histogram
        tables["histogram"] = (("n_a_minus_n_b", "windows"), zip(values.tolist(), counts.tolist()))
    _emit(out, "result", payload, tables, args.format)
    return 0


SWEEP_DEFAULTS = {
    "phi": (0.0, 180.0), "theta": (0.0, 180.0), "detuning": (-10e9, 10e9),
    "field": (0.0, 2000.0), "t_rep": (1e-6, 1e-3),
}


def cmd_sweep(args, scenario: Scenario) -> int:
    opts = dict(scenario.sweep)
    axis = args.axis or opts.get("axis")
    if axis not in SWEEP_DEFAULTS:
        raise ConfigError(f"sweep axis must be one of {sorted(SWEEP_DEFAULTS)}")
    lo, hi = SWEEP_DEFAULTS[axis]
    start = args.start if args.start is not None else opts.get("start", lo)
    stop = args.stop if args.stop is not None else opts.get("stop", hi)
    num = args.num if args.num is not None else opts.get("num", 91)
    if num < 1 or stop < start:
        raise ConfigError("empty sweep range")
    xs = np.linspace(start, stop, int(num))
    ground, excited, m = scenario.tensors_and_coupling()
    params = scenario.ion_params
    base = _orientation(opts.get("orientation"), presets.DEFAULT_REFERENCE.with_magnitude(200.0))
    average = opts.get("average", "cyclicity")
    out = _out_dir(args, scenario)

    if axis == "t_rep":
        cfg = scenario.sim_config(args.seed)
        values = fitting.spin_relaxation_time(xs, cfg.t1_dark, cfg.cyclicity, cfg.p_ex)
        header, rows = ("t_rep", "t_sr"), zip(xs.tolist(), np.atleast_1d(values).tolist())
    elif axis == "detuning":
        c = sm.cyclicity_vs_detuning(params, m, ground, excited, base, xs, average)
        header, rows = ("detuning", "cyclicity"), zip(xs.tolist(), np.atleast_1d(c).tolist())
    else:
        if axis == "field":
            orients = [base.with_magnitude(x) for x in xs]
        elif axis == "phi":
            orients = [sm.FieldOrientation(x, base.theta, base.magnitude) for x in xs]
        else:
            orients = [sm.FieldOrientation(base.phi, x, base.magnitude) for x in xs]
        corrected, ideal = [], []
        for o in orients:
            corrected.append(sm.cyclicity_vs_detuning(params, m, ground, excited, o, None, average))
            if o.magnitude > 0:
                ideal.append(sm.ideal_cyclicity(*sm.coupling_at(m, ground, excited, o)))
            else:
                ideal.append(sm.ideal_cyclicity(m.g_par, m.g_perp))
        header = (axis, "cyclicity", "ideal_cyclicity")
        rows = zip(xs.tolist(), corrected, ideal)
    rows = list(rows)
    col = np.array([r[1] for r in rows], dtype=float)
    payload = {"axis": axis, "n_points": len(rows), "max": float(col.max()), "min": float(col.min())}
    _emit(out, "sweep", payload, {"sweep": (header, rows)}, args.format)
    return 0


def cmd_fit(args, scenario: Scenario) -> int:
    opts = dict(scenario.fit)
    data_path = args.data or opts.get("data")
    if data_path is None or not Path(data_path).is_file():
        raise ConfigError(f"data file not found: {data_path}")
    try:
        data = fitting.read_series_csv(data_path)
    except (ValueError, StopIteration) as exc:
        raise ConfigError(f"cannot read data series: {exc}") from None
    kind = args.kind or opts.get("kind") or {"angle": "angle", "detuning": "c0", "field": "c0", "t_rep": "relaxation"}[data.kind]
    ground, excited, m = scenario.tensors_and_coupling()
    out = _out_dir(args, scenario)
    bootstrap = int(opts.get("bootstrap", 0))
    seed = args.seed or 0
    if kind == "angle":
        params = scenario.ion_params if (scenario.ion or scenario.preset) else None
        report = fitting.fit_angle_model(
            data, ground, excited,
            purcell=params.purcell_max if params else None, c0=params.c0 if params else None,
            free_scale=bool(opts.get("free_scale", False)), bootstrap=bootstrap, seed=seed,
        )
        payload = report.to_dict()
        payload["coupling"] = presets.coupling_to_dict(report.extra["coupling"])
    elif kind == "c0":
        orientation = _orientation(opts.get("orientation"), presets.DEFAULT_REFERENCE.with_magnitude(200.0))
        report = fitting.fit_c0(
            data, scenario.ion_params, m, ground, excited, orientation,
            axis=opts.get("axis", data.kind if data.kind in ("detuning", "field") else "detuning"),
            fit_purcell=bool(opts.get("fit_purcell", False)), average=opts.get("average", "cyclicity"),
            bootstrap=bootstrap, seed=seed,
        )
        payload = report.to_dict()
    elif kind == "relaxation":
        p_ex = scenario.sim.get("p_ex", 0.5)
        report = fitting.fit_spin_relaxation(data, p_ex)
        payload = report.to_dict()
    else:
        raise ConfigError(f"unknown fit kind {kind!r}")
    payload["kind"] = kind
    _emit(out, "fit", payload, {}, args.format)
    return 0


def cmd_project(args, scenario: Scenario) -> int:
    opts = dict(scenario.project)
    device = presets.IMPROVED_DEVICE
    stack_keys = {"q_int", "q_wg", "fiber_coupling", "detector", "other"}
    stack = presets.EfficiencyStack(**{k: opts[k] for k in stack_keys & set(opts)}) if stack_keys & set(opts) else device["stack"]
    cyclicity = args.cyclicity if args.cyclicity is not None else opts.get("cyclicity", device["cyclicity"])
    p_ex = args.p_ex if args.p_ex is not None else opts.get("p_ex", device["p_ex"])
    snr = opts.get("snr", device["snr"])
    f_target = args.f_target if args.f_target is not None else opts.get("f_target", 0.95)
    metrics = inference.readout_metrics(stack.eta, cyclicity, p_ex, snr, f_target)
    out = _out_dir(args, scenario)
    payload = {
        "eta": stack.eta, "eta_cav": stack.eta_cav, "loaded_q": stack.loaded_q, "t_rep": stack.t_rep,
        "cyclicity": cyclicity, "p_ex": p_ex, "snr": snr, "f_target": f_target,
        "photons_needed": metrics.photons_needed, "f_avg": metrics.f_avg,
        "threshold_fidelity": metrics.threshold_fidelity,
        "t_meas_pulses": metrics.t_meas_pulses, "t_meas_s": metrics.t_meas_pulses * stack.t_rep,
        "t_target_pulses": metrics.t_target_pulses, "t_target_s": metrics.t_target_pulses * stack.t_rep,
        "target_reachable": metrics.target_reachable,
    }
    if not metrics.target_reachable:
        payload["warning"] = "f_target exceeds the cyclicity-limited fidelity 1 - m/(eta C)"
    _emit(out, "project", payload, {}, args.format)
    return 0


COMMANDS = {
    "simulate": cmd_simulate, "analyze": cmd_analyze, "sweep": cmd_sweep,
    "fit": cmd_fit, "project": cmd_project,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="scenario JSON file")
    common.add_argument("--seed", type=int, help="override the scenario seed")
    common.add_argument("--out", help="output directory (overrides output_dir)")
    common.add_argument("--format", choices=("csv", "json"), default="csv")

    parser = argparse.ArgumentParser(prog="cavity-readout", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("simulate", parents=[common], help="generate a photon record")
    p = sub.add_parser("analyze", parents=[common], help="run an analysis chain on a record")
    p.add_argument("record")
    p.add_argument("--chain", choices=("g2", "bayes", "ml", "window"))
    p = sub.add_parser("sweep", parents=[common], help="tabulate cyclicity or T_SR along one axis")
    p.add_argument("--axis", choices=sorted(SWEEP_DEFAULTS))
    p.add_argument("--start", type=float)
    p.add_argument("--stop", type=float)
    p.add_argument("--num", type=int)
    p = sub.add_parser("fit", parents=[common], help="fit a measured series")
    p.add_argument("data", nargs="?")
    p.add_argument("--kind", choices=("angle", "c0", "relaxation"))
    p = sub.add_parser("project", parents=[common], help="readout metrics for a projected device")
    p.add_argument("--cyclicity", type=float)
    p.add_argument("--p-ex", type=float, dest="p_ex")
    p.add_argument("--f-target", type=float, dest="f_target")
    return parser


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    args = build_parser().parse_args(argv)
    try:
        scenario = load_scenario(args.config)
        code = COMMANDS[args.command](args, scenario)
    except (ConfigError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (fitting.FitError, ValueError, ArithmeticError) as exc:
        print(f"analysis failed: {exc}", file=sys.stderr)
        return 1
    _write_meta(_out_dir(args, scenario), args.command, argv)
    return code


if __name__ == "__main__":
    sys.exit(main())
