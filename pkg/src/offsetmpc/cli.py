"""Command-line front end: config parsing, condition checks, scenario runs,
steady-state sweeps, and regression fitting.

Configs are YAML with all quantities in absolute physical units; conversion
to deviation coordinates around the operating point happens here, so the
numeric core never sees absolute values. Exit codes: 0 success, 2 config or
input-file errors, 3 condition-check failure, 4 runtime failure.
"""

import argparse
import dataclasses
import logging
import os
import sys
from types import SimpleNamespace

import numpy as np
import yaml

from . import closed_loop as cl
from . import grnn as grnn_mod
from . import model as model_mod
from . import numerics
from . import ocp as ocp_mod
from . import plant as plant_mod

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_CONDITION = 3
EXIT_RUNTIME = 4


class ConfigError(Exception):
    pass


@dataclasses.dataclass
class RunConfig:
    model: model_mod.LinearModel
    dist: model_mod.DisturbanceModel
    L_x: np.ndarray
    L_d: np.ndarray
    ocp_cfg: ocp_mod.OcpConfig
    params: plant_mod.CstrParams
    op: plant_mod.OperatingPoint
    scenario: cl.ScenarioConfig
    grnn_train: str
    sweep_cap: int
    out_dir: str
    config_dir: str
    stem: str

    def make_gains(self):
        return model_mod.EstimatorGains(self.L_x, self.L_d, self.model,
                                        self.dist)


def _get(section, key, path, default=KeyError):
    if key not in section:
        if default is KeyError:
            raise ConfigError(f"missing required field {path}.{key}")
        return default
    return section[key]


def _matrix(value, shape, path):
    try:
        m = np.array(value, dtype=float)
    except (TypeError, ValueError):
        raise ConfigError(f"{path}: not a numeric matrix")
    if m.shape != shape:
        raise ConfigError(f"{path}: expected shape {shape}, got {m.shape}")
    return m


def _vector(value, n, path):
    return _matrix(value, (n,), path)


def _resolve(path, config_dir):
    if os.path.isabs(path):
        return path
    local = os.path.join(config_dir, path)
    return local if os.path.exists(local) else path


def _coerce_params(section):
    """Plant parameter values as proper numbers; YAML reads unsigned
    exponents like 7.2e10 as strings."""
    out = {}
    for key, val in section.items():
        if key == "substeps":
            out[key] = int(val)
        elif key == "concentration_mismatch":
            out[key] = bool(val)
        else:
            try:
                out[key] = float(val)
            except (TypeError, ValueError):
                raise ConfigError(f"plant.{key}: not a number: {val!r}")
    return out


def load_config(path):
    try:
        with open(path) as fh:
            raw = yaml.safe_load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}")
    except yaml.YAMLError as exc:
        raise ConfigError(f"config is not valid YAML: {exc}")
    if not isinstance(raw, dict):
        raise ConfigError("top level must be a mapping")

    op_sec = _get(raw, "operating_point", "")
    op = plant_mod.OperatingPoint(
        np.array([_get(op_sec, k, "operating_point") for k in ("c", "T", "h")],
                 dtype=float),
        np.array([_get(op_sec, k, "operating_point") for k in ("Tc", "F")],
                 dtype=float))

    dt = float(raw.get("dt", 1.0))
    msec = _get(raw, "model", "")
    A = _matrix(_get(msec, "A", "model"), (3, 3), "model.A")
    B = _matrix(_get(msec, "B", "model"), (3, 2), "model.B")
    C = _matrix(_get(msec, "C", "model"), (3, 3), "model.C")
    H = _matrix(_get(msec, "H", "model"), (2, 3), "model.H")
    dsec = _get(raw, "disturbance", "")
    Bd = _matrix(_get(dsec, "Bd", "disturbance"), (3, 2), "disturbance.Bd")
    Cd = _matrix(_get(dsec, "Cd", "disturbance"), (3, 2), "disturbance.Cd")
    esec = _get(raw, "estimator", "")
    L_x = _matrix(_get(esec, "Lx", "estimator"), (3, 3), "estimator.Lx")
    L_d = _matrix(_get(esec, "Ld", "estimator"), (2, 3), "estimator.Ld")
    try:
        model = model_mod.LinearModel(A, B, C, H, dt)
        dist = model_mod.DisturbanceModel(Bd, Cd)
    except (model_mod.DimensionMismatch, ValueError) as exc:
        raise ConfigError(f"model: {exc}")

    osec = _get(raw, "ocp", "")
    u_min = _vector(_get(osec, "u_min", "ocp"), 2, "ocp.u_min")
    u_max = _vector(_get(osec, "u_max", "ocp"), 2, "ocp.u_max")
    x_bounds = None
    if "x_min" in osec or "x_max" in osec:
        x_min = _vector(_get(osec, "x_min", "ocp"), 3, "ocp.x_min")
        x_max = _vector(_get(osec, "x_max", "ocp"), 3, "ocp.x_max")
        x_bounds = (x_min - op.x_ss, x_max - op.x_ss)
    try:
        ocp_cfg = ocp_mod.OcpConfig(
            N=_get(osec, "N", "ocp"),
            q_x=_vector(_get(osec, "q_x", "ocp"), 3, "ocp.q_x"),
            q_u=_vector(_get(osec, "q_u", "ocp"), 2, "ocp.q_u"),
            q_xN=_vector(_get(osec, "q_xN", "ocp"), 3, "ocp.q_xN"),
            u_bounds=(u_min - op.u_ss, u_max - op.u_ss),
            x_bounds=x_bounds,
            terminal_rho=osec.get("terminal_rho"))
    except ValueError as exc:
        raise ConfigError(f"ocp: {exc}")

    psec = _get(raw, "plant", "")
    try:
        params = plant_mod.CstrParams(**_coerce_params(psec))
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"plant: {exc}")

    ssec = _get(raw, "scenario", "")
    schedule = []
    for i, row in enumerate(_get(ssec, "schedule", "scenario")):
        row = _vector(row, 3, f"scenario.schedule[{i}]")
        schedule.append((row[0], (row[1] - op.x_ss[0], row[2] - op.x_ss[1])))
    events = []
    for i, ev in enumerate(ssec.get("events", [])):
        if not isinstance(ev, dict) or "time" not in ev or "set" not in ev:
            raise ConfigError(f"scenario.events[{i}]: need {{time, set}}")
        events.append((float(ev["time"]), _coerce_params(ev["set"])))
    steady = ssec.get("steady", {})
    gsec = ssec.get("grnn", {})
    sigma = gsec.get("sigma", "auto")
    if sigma != "auto":
        sigma = float(sigma)
    try:
        scenario = cl.ScenarioConfig(
            duration=float(_get(ssec, "duration", "scenario")),
            schedule=tuple(schedule),
            mode=_get(ssec, "mode", "scenario", "nominal"),
            grnn_capacity=int(gsec.get("capacity", 50)),
            grnn_sigma=sigma,
            events=tuple(events),
            harvest=bool(ssec.get("harvest", False)),
            steady_M=int(steady.get("M", 5)),
            steady_tol_y=float(steady.get("tol_y", 1e-5)),
            steady_tol_u=float(steady.get("tol_u", 1e-5)),
            seed=int(ssec.get("seed", 0)))
    except ValueError as exc:
        raise ConfigError(f"scenario: {exc}")

    config_dir = os.path.dirname(os.path.abspath(path))
    return RunConfig(
        model=model, dist=dist, L_x=L_x, L_d=L_d, ocp_cfg=ocp_cfg,
        params=params, op=op, scenario=scenario,
        grnn_train=gsec.get("train"),
        sweep_cap=int(raw.get("sweep", {}).get("cap", 200)),
        out_dir=raw.get("output", {}).get("dir", "out"),
        config_dir=config_dir,
        stem=os.path.splitext(os.path.basename(path))[0])


def run_checks(rc):
    """The four admissibility conditions; returns (all_pass, report lines)."""
    lines = []
    ok = True

    obs = model_mod.check_augmented_observability(rc.model, rc.dist)
    need = rc.model.n_x + rc.dist.n_d
    ok &= obs["holds"]
    lines.append(("PASS" if obs["holds"] else "FAIL",
                  f"augmented observability: rank {obs['rank']} (required {need})"))

    shim = SimpleNamespace(L_x=rc.L_x, L_d=rc.L_d)
    rho = numerics.spectral_radius(
        model_mod.estimator_error_matrix(rc.model, rc.dist, shim))
    stable = rho < 1.0
    ok &= stable
    lines.append(("PASS" if stable else "FAIL",
                  f"estimator stability: spectral radius {rho:.6f} (required < 1)"))

    if stable:
        lemma = model_mod.check_lemma1_nonsingularity(rc.model, rc.dist, shim)
        ok &= lemma
        lines.append(("PASS" if lemma else "FAIL",
                      "steady-map nonsingularity"))
    else:
        ok = False
        lines.append(("FAIL", "steady-map nonsingularity: skipped "
                      "(estimator unstable)"))

    try:
        pred = ocp_mod.build_prediction(rc.model, rc.dist, rc.ocp_cfg)
        k_un = ocp_mod.unconstrained_gain(pred, rc.ocp_cfg)
        off = model_mod.check_offset_free_condition(rc.model, shim, k_un)
        ok &= off["holds"]
        lines.append(("PASS" if off["holds"] else "FAIL",
                      f"offset-free null space: residual {off['residual']:.3e} "
                      f"(tol 1e-8)"))
    except model_mod.SingularClosedLoop as exc:
        ok = False
        lines.append(("FAIL", f"offset-free null space: {exc}"))
    return ok, lines


def _print_checks(lines):
    for status, text in lines:
        print(f"[{status}] {text}")


def _ensure_checks(rc):
    ok, lines = run_checks(rc)
    if not ok:
        _print_checks(lines)
        print("condition checks failed", file=sys.stderr)
    return ok


def _out_dir(rc, flag):
    out = flag or os.environ.get("OFFSETMPC_OUT_DIR") or rc.out_dir
    os.makedirs(out, exist_ok=True)
    return out


def _load_setpoints(path, op):
    try:
        pts = np.loadtxt(path, comments="#", ndmin=2)
    except OSError as exc:
        raise ConfigError(f"cannot read setpoints: {exc}")
    except ValueError as exc:
        raise ConfigError(f"setpoints file: {exc}")
    if pts.shape[1] != 2:
        raise ConfigError(f"setpoints file must have 2 columns (c, T), "
                          f"got {pts.shape[1]}")
    return [(c - op.x_ss[0], T - op.x_ss[1]) for c, T in pts]


def _build_grnn(rc, mode):
    if mode is not cl.ControllerMode.LEARNED:
        return None
    g = grnn_mod.make_model(rc.scenario.grnn_capacity, rc.dist.n_d)
    if rc.grnn_train:
        train_path = _resolve(rc.grnn_train, rc.config_dir)
        if not os.path.exists(train_path):
            raise ConfigError(f"grnn train file not found: {train_path}")
        for r, d in grnn_mod.load_samples(train_path):
            g = grnn_mod.add_sample(g, r, d)
    sigma = rc.scenario.grnn_sigma
    if sigma == "auto":
        sigma = grnn_mod.default_sigma(g)
    return grnn_mod.with_sigma(g, sigma)


def _fresh_plant(rc):
    return cl.NonlinearPlant(plant_mod.PlantState(*rc.op.x_ss), rc.params,
                             rc.op, dt=rc.model.dt)


def cmd_check(args):
    rc = load_config(args.config)
    ok, lines = run_checks(rc)
    _print_checks(lines)
    return EXIT_OK if ok else EXIT_CONDITION


def cmd_run(args):
    rc = load_config(args.config)
    if not _ensure_checks(rc):
        return EXIT_CONDITION
    gains = rc.make_gains()
    modes = ([cl.ControllerMode.NOMINAL, cl.ControllerMode.LEARNED]
             if args.mode == "both"
             else [cl.ControllerMode(args.mode) if args.mode
                   else rc.scenario.mode])
    out = _out_dir(rc, args.out)
    code = EXIT_OK
    for mode in modes:
        scenario = dataclasses.replace(rc.scenario, mode=mode)
        grnn = _build_grnn(rc, mode)
        log = cl.run_scenario(scenario, rc.model, rc.dist, gains, rc.ocp_cfg,
                              _fresh_plant(rc), grnn=grnn)
        base = os.path.join(out, f"{rc.stem}_{mode.value}")
        cl.write_log_csv(log, base + ".csv")
        cl.write_summary(log, base + "_summary.txt", dt=rc.model.dt)
        if log.aborted:
            print(f"{mode.value}: ABORTED at t={log.aborted['time']}: "
                  f"{log.aborted['reason']}", file=sys.stderr)
            code = EXIT_RUNTIME
            continue
        if not log.records:
            print(f"{mode.value}: 0 steps -> {base}.csv")
            continue
        m = cl.metrics(log, dt=rc.model.dt)
        worst = max(seg.terminal_e.max() for seg in m["segments"])
        print(f"{mode.value}: {len(log.records)} steps, "
              f"{len(m['segments'])} segments, total ISE {m['total_ise']:.6g}, "
              f"worst terminal |e| {worst:.3e}, "
              f"harvested {len(log.harvested)} -> {base}.csv")
    return code


def cmd_sweep(args):
    rc = load_config(args.config)
    if not _ensure_checks(rc):
        return EXIT_CONDITION
    gains = rc.make_gains()
    setpoints = _load_setpoints(args.setpoints, rc.op)
    samples, log = cl.sweep_harvest(
        rc.model, rc.dist, gains, rc.ocp_cfg, _fresh_plant(rc), setpoints,
        cap=rc.sweep_cap, steady_M=rc.scenario.steady_M,
        steady_tol_y=rc.scenario.steady_tol_y,
        steady_tol_u=rc.scenario.steady_tol_u)
    if log.aborted:
        print(f"sweep ABORTED at step {log.aborted['time']}: "
              f"{log.aborted['reason']}", file=sys.stderr)
        return EXIT_RUNTIME
    out = _out_dir(rc, args.out)
    sp_stem = os.path.splitext(os.path.basename(args.setpoints))[0]
    dest = os.path.join(out, f"{sp_stem}_train.txt")
    grnn_mod.write_samples(dest, [(s.r, s.d_ss) for s in samples])
    worst = max((s.residual for s in samples), default=0.0)
    print(f"harvested {len(samples)} samples over {len(log.records)} steps, "
          f"worst cross-check residual {worst:.3e} -> {dest}")
    return EXIT_OK


def cmd_grnn_fit(args):
    samples = grnn_mod.load_samples(args.samples)
    if not samples:
        raise ConfigError("no samples in file")
    n_out = samples[0][1].shape[0]
    g = grnn_mod.make_model(max(len(samples), 1), n_out)
    for r, d in samples:
        g = grnn_mod.add_sample(g, r, d)
    if args.sigma == "auto":
        sigma = grnn_mod.select_sigma(g)
    else:
        sigma = float(args.sigma)
    g = grnn_mod.with_sigma(g, sigma)

    out = args.out or os.environ.get("OFFSETMPC_OUT_DIR") or "out"
    os.makedirs(out, exist_ok=True)
    stem = os.path.splitext(os.path.basename(args.samples))[0]
    model_path = os.path.join(out, f"{stem}_model.txt")
    grnn_mod.write_model(model_path, g)

    loo_path = os.path.join(out, f"{stem}_loo.txt")
    with open(loo_path, "w") as fh:
        fh.write("# sigma loo_mean_squared_error\n")
        if len(samples) >= 2:
            for s in grnn_mod.SIGMA_GRID:
                fh.write("%.17g %.17g\n" % (s, grnn_mod.loo_error(g, float(s))))
        else:
            fh.write("# single sample: loo undefined\n")

    X = np.array([r for r, _ in samples])
    curve_path = os.path.join(out, f"{stem}_curve.txt")
    with open(curve_path, "w") as fh:
        fh.write("# prediction sweeps, one block per input dimension\n")
        for j in range(X.shape[1]):
            fh.write(f"# dim {j} sweep, other dims at sample mean\n")
            qs = np.linspace(X[:, j].min(), X[:, j].max(), 101)
            base = X.mean(axis=0)
            for q in qs:
                query = base.copy()
                query[j] = q
                pred = grnn_mod.predict(g, query)
                fh.write("%.17g " % q + " ".join("%.17g" % v for v in pred)
                         + "\n")
    print(f"fitted sigma {sigma:.6g} on {len(samples)} samples -> "
          f"{model_path}")
    return EXIT_OK


def sample_setpoints(n, seed, params, op, c_range=(0.84, 0.91),
                     T_range=(321.0, 329.0)):
    """Seeded uniform setpoints over the given ranges, rejecting pairs whose
    steady level leaves [0.45, 1.15] m or whose temperature sits in the
    upper band where the level target collapses; visit order groups by
    1-K temperature band, ascending concentration."""
    rng = np.random.default_rng(seed)
    pts = []
    while len(pts) < n:
        c = rng.uniform(*c_range)
        T = rng.uniform(*T_range)
        if 0.45 <= plant_mod.steady_height(c, T, params) <= 1.15 and T <= 328.5:
            pts.append((c, T))
    pts.sort(key=lambda p: (round((p[1] - T_range[0]) / 1.0), p[0]))
    return pts


def cmd_sample_setpoints(args):
    rc = load_config(args.config)
    pts = sample_setpoints(args.n, args.seed, rc.params, rc.op)
    dest = args.out or f"setpoints_{args.n}_{args.seed}.txt"
    with open(dest, "w") as fh:
        fh.write("# absolute setpoints: c (kmol/m3), T (K)\n")
        for c, T in pts:
            fh.write("%.17g %.17g\n" % (c, T))
    print(f"wrote {len(pts)} setpoints -> {dest}")
    return EXIT_OK


def main(argv=None):
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
    parser = argparse.ArgumentParser(
        prog="offsetmpc",
        description="offset-free MPC with a learned mismatch map: "
                    "condition checks, closed-loop runs, steady-state "
                    "sweeps, regression fitting")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("check", help="run the four admissibility conditions")
    p.add_argument("config")
    p.set_defaults(func=cmd_check)

    p = sub.add_parser("run", help="run the configured scenario")
    p.add_argument("config")
    p.add_argument("--mode", choices=["nominal", "learned", "both"],
                   default=None, help="override the configured mode")
    p.add_argument("--out", default=None, help="output directory")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("sweep", help="harvest steady-state samples over a "
                                     "setpoint list")
    p.add_argument("config")
    p.add_argument("--setpoints", required=True,
                   help="text file, two columns: c T (absolute units)")
    p.add_argument("--out", default=None, help="output directory")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("grnn-fit", help="fit the regression model to a "
                                        "sample file")
    p.add_argument("samples")
    p.add_argument("--sigma", default="auto",
                   help="kernel width, or 'auto' for leave-one-out selection")
    p.add_argument("--out", default=None, help="output directory")
    p.set_defaults(func=cmd_grnn_fit)

    p = sub.add_parser("sample-setpoints",
                       help="draw admissible random setpoints for sweeps")
    p.add_argument("config")
    p.add_argument("-n", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None, help="output file")
    p.set_defaults(func=cmd_sample_setpoints)

    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, grnn_mod.ParseError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (model_mod.UnstableEstimator, model_mod.SingularClosedLoop) as exc:
        print(f"condition error: {exc}", file=sys.stderr)
        return EXIT_CONDITION
    except (ocp_mod.Infeasible, ocp_mod.MaxIterations, cl.SteadyNotReached,
            cl.CrossCheckFailed, plant_mod.NonPhysicalState,
            plant_mod.UnknownEvent, grnn_mod.InsufficientData,
            numerics.SingularMatrix, numerics.NoConvergence) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
