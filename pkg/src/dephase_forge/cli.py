"""``dephase-forge`` command-line front end.

Every run is driven by a flat JSON config; command-line flags override its
keys.  Unknown ``--some-key value`` flags are accepted as overrides for the
config key ``some_key``.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import math
import sys
from importlib import resources
from pathlib import Path

import numpy as np

from . import metrics
from .dynamics import PulseSequence, channel_of_sequence, simulate_monte_carlo
from .fluctuator import (
    FIXTURE_GAMMA_M,
    FluctuatorModel,
    SynthesisError,
    assemble_noise_vector,
    paper_fixture,
    synthesize_rate_matrix,
)
from .metrics import TargetGate, calibrate_epsilon, estimate_t2, gate_errors, offset_sweep
from .pulse_opt import (
    TARGETS,
    OptimizationSpec,
    carr_purcell,
    carr_purcell_duty,
    grape_search,
    ideal_cp_channel,
    robust_grid,
)
from .spectral import FrequencyBand, LorentzianModel, TargetSpectrum, fit_spectrum, load_tabulated_spectrum

COMMANDS = (
    "fit-spectrum",
    "synthesize",
    "simulate",
    "optimize",
    "baseline-cp",
    "sweep-offset",
    "estimate-t2",
    "np-sweep",
)

EXIT_OK, EXIT_INVALID, EXIT_NOT_CONVERGED = 0, 1, 2


class ConfigError(ValueError):
    pass


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _overrides(extra: list) -> dict:
    out = {}
    i = 0
    while i < len(extra):
        tok = extra[i]
        if not tok.startswith("--"):
            raise ConfigError(f"unexpected argument {tok!r}")
        key = tok[2:]
        if "=" in key:
            key, value = key.split("=", 1)
        elif i + 1 < len(extra) and not extra[i + 1].startswith("--"):
            i += 1
            value = extra[i]
        else:
            value = "true"
        out[key.replace("-", "_")] = _parse_value(value)
        i += 1
    return out


def load_config(path, overrides: dict) -> dict:
    cfg = {}
    if path:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file {path} does not exist")
        cfg = json.loads(p.read_text())
        if not isinstance(cfg, dict):
            raise ConfigError("config must be a JSON object")
    cfg.update({k: v for k, v in overrides.items() if v is not None})
    return cfg


def _resolve(cfg: dict, key: str, base: Path | None):
    value = cfg[key]
    p = Path(value)
    if not p.is_absolute() and base is not None and not p.exists():
        p = base / p
    if not p.exists():
        raise ConfigError(f"{key}: file {value} does not exist")
    return p


# -- builders --------------------------------------------------------------------------


def build_fluctuator(cfg: dict, base=None) -> FluctuatorModel:
    if cfg.get("fluctuator") and cfg.get("fixture") != "paper":
        fluct = FluctuatorModel.load(_resolve(cfg, "fluctuator", base))
        if "epsilon" in cfg:
            fluct = fluct.with_epsilon(float(cfg["epsilon"]))
    else:
        if cfg.get("fixture", "paper") != "paper":
            raise ConfigError(f"unknown fixture {cfg['fixture']!r}")
        fluct = paper_fixture(
            float(cfg.get("epsilon", 1e-3)), float(cfg.get("gamma_m", FIXTURE_GAMMA_M)), 0.0
        )
    return fluct.with_offset(float(cfg.get("eta_os", fluct.eta_os)))


def build_target(cfg: dict) -> TargetGate:
    t = cfg.get("target", "identity")
    if isinstance(t, str):
        if t not in TARGETS:
            raise ConfigError(f"unknown target {t!r}")
        return TARGETS[t]()
    return TargetGate(np.asarray(t, dtype=float).reshape(3, 3))


def paper_cp_sequence() -> PulseSequence:
    text = resources.files("dephase_forge").joinpath("data/paper_cp.json").read_text()
    return PulseSequence.from_dict(json.loads(text))


def build_sequence(cfg: dict, base=None):
    """A PulseSequence, or a callable channel source for idealized CP."""
    s = cfg.get("sequence", "paper-cp")
    if s == "paper-cp":
        return paper_cp_sequence()
    if s == "ideal-cp":
        n_reps, wait = int(cfg.get("n_reps", 7)), float(cfg.get("wait", 4 * math.pi / 7))
        return lambda fl: ideal_cp_channel(fl, n_reps, wait)
    if s == "cp":
        return _cp_from_config(cfg)
    return PulseSequence.load(_resolve(cfg, "sequence", base))


def _cp_from_config(cfg: dict) -> PulseSequence:
    amplitude = float(cfg.get("amplitude", 1.0))
    if "duty" in cfg:
        return carr_purcell_duty(float(cfg["duty"]), int(cfg.get("n_reps", 1)), amplitude)
    return carr_purcell(int(cfg.get("n_reps", 7)), float(cfg.get("wait", 4 * math.pi / 7)), amplitude)


def build_offsets(cfg: dict, epsilon: float, default_n: int) -> tuple:
    grid = cfg.get("offset_grid", cfg.get("offsets"))
    if grid is None:
        n = int(cfg.get("n_offsets", default_n))
        return robust_grid(epsilon, n)
    if isinstance(grid, (int, float)):
        return robust_grid(epsilon, int(grid))
    return tuple(float(x) for x in grid)


def _has_grid(cfg: dict) -> bool:
    return any(k in cfg for k in ("offset_grid", "offsets", "n_offsets"))


def build_optimization_spec(cfg: dict, base=None) -> OptimizationSpec:
    fluct = build_fluctuator(cfg, base)
    return OptimizationSpec(
        target=build_target(cfg),
        fluct=fluct,
        n_pulses=int(cfg.get("n_pulses", 6)),
        total_time=float(cfg.get("total_time", 6 * math.pi)),
        offset_grid=build_offsets(cfg, fluct.epsilon, 11) if _has_grid(cfg) else (0.0,),
        n_starts=int(cfg.get("n_starts", 200)),
        seed=int(cfg.get("seed", 0)),
        duty_enforced=bool(cfg.get("duty_enforced", True)),
        fd_step=float(cfg.get("fd_step", 1e-4)),
        maxiter=int(cfg.get("maxiter", 500)),
    )


# -- commands --------------------------------------------------------------------------


def _write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text if text.endswith("\n") else text + "\n")


def _dumps(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True)


def cmd_fit_spectrum(cfg, out, base):
    gamma_m = float(cfg.get("gamma_m", FIXTURE_GAMMA_M))
    kind = cfg.get("fixture_target", cfg.get("target_kind", "one-over-omega"))
    scale = float(cfg.get("scale", 1.0))
    offset_weight = float(cfg.get("offset_weight", 0.0))
    if kind == "tabulated" or "table" in cfg:
        target = load_tabulated_spectrum(_resolve(cfg, "table", base), scale, offset_weight)
    elif kind == "one-over-omega":
        target = TargetSpectrum("one-over-omega", scale, offset_weight)
    else:
        raise ConfigError(f"unsupported target kind {kind!r}")
    band = FrequencyBand(
        float(cfg.get("omega_min", gamma_m / 10)),
        float(cfg.get("omega_max", gamma_m * 10)),
        int(cfg.get("n_grid", 64)),
    )
    model, report = fit_spectrum(
        target,
        int(cfg.get("n_states", 4)),
        band,
        int(cfg.get("seed", 0)),
        int(cfg.get("n_starts", 32)),
        maxiter=int(cfg.get("maxiter", 5000)),
    )
    payload = report.to_dict(model)
    payload["offset_weight"] = offset_weight
    _write(out, _dumps(payload))
    status = EXIT_OK if report.converged else EXIT_NOT_CONVERGED
    return f"max_rel_dev={report.max_rel_dev:.6g}", status


def cmd_synthesize(cfg, out, base):
    if cfg.get("fixture") == "paper" and "fit" not in cfg:
        fluct = build_fluctuator(cfg, base)
        _write(out, _dumps(fluct.to_dict()))
        return f"n={fluct.n}", EXIT_OK
    fit = json.loads(_resolve(cfg, "fit", base).read_text())
    model = LorentzianModel(fit["lambdas"], fit["bs"])
    eta_os = float(cfg.get("eta_os", math.sqrt(float(fit.get("offset_weight", 0.0)))))
    try:
        gamma = synthesize_rate_matrix(model.lambdas, int(cfg.get("seed", 0)), int(cfg.get("n_starts", 16)))
        status = EXIT_OK
    except SynthesisError as exc:
        gamma, status = exc.best, EXIT_NOT_CONVERGED
    eta = assemble_noise_vector(gamma, model, eta_os)
    epsilon = float(cfg.get("epsilon", math.sqrt(model.variance()) or 1.0))
    fluct = FluctuatorModel(gamma, eta, epsilon, eta_os, 1.0)
    _write(out, _dumps(fluct.to_dict()))
    return f"n={fluct.n}", status


def cmd_simulate(cfg, out, base):
    fluct = build_fluctuator(cfg, base)
    seq = build_sequence(cfg, base)
    target = build_target(cfg)
    channel = metrics._channel(fluct, seq)
    avg, worst = gate_errors(channel, target)
    payload = {"eta_os": fluct.eta_os, "channel": channel.to_list(), "avg_error": avg, "worst_error": worst}
    n_traj = cfg.get("n_traj")
    if n_traj:
        if not isinstance(seq, PulseSequence):
            raise ConfigError("Monte-Carlo needs an explicit pulse sequence")
        est, err = simulate_monte_carlo(fluct, seq, int(n_traj), int(cfg.get("seed", 0)))
        payload["monte_carlo"] = {"channel": est.to_list(), "stderr": [float(x) for x in err.reshape(-1)]}
    _write(out, _dumps(payload))
    return f"worst_error={worst:.6g}", EXIT_OK


def cmd_optimize(cfg, out, base, threads):
    spec = build_optimization_spec(cfg, base)
    report = grape_search(spec, workers=threads)
    seq_path = Path(cfg["sequence_out"]) if "sequence_out" in cfg else out.with_name(out.stem + "_sequence.json")
    _write(out, _dumps(report.to_dict()))
    _write(seq_path, _dumps(report.best_sequence.to_dict()))
    err = 1.0 - metrics.worst_case_fidelity(channel_of_sequence(spec.fluct, report.best_sequence), spec.target)[0]
    return f"best_objective={report.best_objective:.12g} worst_error_at_eta_os={err:.6g}", EXIT_OK


def cmd_baseline_cp(cfg, out, base):
    seq = _cp_from_config(cfg)
    _write(out, _dumps(seq.to_dict()))
    fluct = build_fluctuator(cfg, base)
    _, worst = gate_errors(channel_of_sequence(fluct, seq), build_target(cfg))
    return f"worst_error={worst:.6g}", EXIT_OK


def cmd_sweep_offset(cfg, out, base):
    fluct = build_fluctuator(cfg, base)
    offsets = build_offsets(cfg, fluct.epsilon, 41)
    res = offset_sweep(fluct, build_sequence(cfg, base), build_target(cfg), offsets, cfg.get("label", ""))
    _write(out, res.to_json() if out.suffix == ".json" else res.to_csv())
    return f"max_worst_error={max(res.worst_error):.6g}", EXIT_OK


def cmd_estimate_t2(cfg, out, base):
    n_reps_max = int(cfg.get("n_reps_max", 64))
    if "target_t2" in cfg:
        interval = tuple(cfg.get("search_interval", (1e-5, 1e-1)))
        eps = calibrate_epsilon(float(cfg["target_t2"]), float(cfg.get("duty", 0.01)), interval,
                                float(cfg.get("gamma_m", FIXTURE_GAMMA_M)), n_reps_max)
        _write(out, _dumps({"epsilon": eps, "target_t2": float(cfg["target_t2"])}))
        return f"epsilon={eps:.6g}", EXIT_OK
    cfg = {"sequence": "cp", "duty": 0.01, **cfg}
    fluct = build_fluctuator(cfg, base)
    seq = build_sequence(cfg, base)
    if not isinstance(seq, PulseSequence):
        raise ConfigError("estimate-t2 needs an explicit pulse sequence")
    est = estimate_t2(fluct, seq, n_reps_max)
    _write(out, _dumps(est.to_dict()))
    return f"t2={est.t2:.6g}", EXIT_OK


def np_sweep(cfg, base=None, threads=1) -> str:
    """CSV of worst-case error at eta_os = 0 versus number of pulses."""
    values = cfg.get("n_pulses_list", [2, 4, 6])
    if isinstance(values, (int, float)):
        values = [values]
    if not values:
        raise ConfigError("n_pulses_list must be nonempty")
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["n_pulses", "worst_case_error"])
    for n_p in values:
        spec = build_optimization_spec({**cfg, "n_pulses": int(n_p)}, base)
        report = grape_search(spec, workers=threads)
        fid, _ = metrics.worst_case_fidelity(channel_of_sequence(spec.fluct, report.best_sequence), spec.target)
        w.writerow([int(n_p), f"{max(1.0 - fid, 0.0):.12g}"])
    return buf.getvalue()


def cmd_np_sweep(cfg, out, base, threads):
    cfg = {"target": "hadamard", "n_starts": 20, **cfg}
    text = np_sweep(cfg, base, threads)
    _write(out, text)
    rows = list(csv.reader(io.StringIO(text)))[1:]
    best = min(rows, key=lambda r: float(r[1]))
    return f"best_n_pulses={best[0]} worst_case_error={best[1]}", EXIT_OK


HANDLERS = {
    "fit-spectrum": cmd_fit_spectrum,
    "synthesize": cmd_synthesize,
    "simulate": cmd_simulate,
    "optimize": cmd_optimize,
    "baseline-cp": cmd_baseline_cp,
    "sweep-offset": cmd_sweep_offset,
    "estimate-t2": cmd_estimate_t2,
    "np-sweep": cmd_np_sweep,
}
DEFAULT_SUFFIX = {"sweep-offset": ".csv", "np-sweep": ".csv"}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dephase-forge", description=__doc__.splitlines()[0])
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", help="JSON config file (flat keys)")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", help="output artifact path")
    p.add_argument("--threads", type=int, default=1, help="worker processes for multistart search")
    p.add_argument("--fixture", choices=["paper"], default=None, help="use the built-in 4-state 1/omega fluctuator")
    return p


def run(argv=None) -> int:
    parser = build_parser()
    args, extra = parser.parse_known_args(argv)
    try:
        overrides = _overrides(extra)
        overrides.update({"seed": args.seed, "fixture": args.fixture})
        cfg = load_config(args.config, overrides)
        base = Path(args.config).parent if args.config else None
        out = Path(args.out or cfg.get("out") or args.command + DEFAULT_SUFFIX.get(args.command, ".json"))
        handler = HANDLERS[args.command]
        if args.command in ("optimize", "np-sweep"):
            metric, status = handler(cfg, out, base, max(1, args.threads))
        else:
            metric, status = handler(cfg, out, base)
    except (ValueError, KeyError, TypeError, OSError, json.JSONDecodeError) as exc:
        err = {"error": type(exc).__name__, "message": str(exc), "command": args.command}
        print(json.dumps(err), file=sys.stderr)
        return EXIT_INVALID
    print(f"{args.command} {metric} -> {out}")
    return status


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
