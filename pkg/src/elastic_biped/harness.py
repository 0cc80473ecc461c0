"""Named scenarios, their exports and their pass/fail verdicts.

Every scenario writes its time series as CSV into its output directory, then
the verdicts are computed by reading those files back, so a report can be
recomputed offline with :func:`evaluate`.
"""

from __future__ import annotations

import csv
import json
import math
import os
import time
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np

from .closed_loop import COLUMNS, ClosedLoop, LoopConfig
from .dynamics import DisturbanceProfile, Plant, Push, Sensors, SimulationBlowUp
from .estimation import EstimatorConfig
from .fieldbus import MASTER_PERIOD, BusTopology, Fault, Fieldbus, halt_propagation
from .joint_control import ChannelConditioner, DobState, assign_kdob, dob_force_control
from .model import load_model, load_shipped

SCHEMA_VERSION = 1
OUT_ENV = "ELASTIC_BIPED_OUT"
DEFAULT_OUT = "runs"


class ScenarioError(ValueError):
    pass


@dataclass(frozen=True)
class Scenario:
    name: str
    description: str
    duration: float
    criteria: tuple
    model: str = "pandora_planar"     # shipped model name or path to a TOML file
    seed: int = 0
    gait: str = "balance"
    oracle_state: bool = False
    rigid_limit: bool = False
    kf: bool = True
    assist_damping: float = 0.0
    out: str | None = None

    def __post_init__(self):
        if self.duration <= 0:
            raise ScenarioError("duration must be > 0")
        if self.gait not in ("balance", "step_in_place"):
            raise ScenarioError(f"unknown gait mode {self.gait!r}")

    def bound_criteria(self) -> tuple:
        """Criteria this run is judged on, given its flags."""
        crit = list(self.criteria)
        if self.gait == "step_in_place" or self.name in ("balance_pushes", "kinematic_deflection"):
            if self.rigid_limit or not self.kf:
                crit = [c for c in crit if c != 6]
            if self.rigid_limit and 3 not in crit:
                crit.append(3)
        return tuple(sorted(crit))


@dataclass
class Verdict:
    criterion: int
    passed: bool
    measured: dict
    target: str


@dataclass
class RunReport:
    scenario: str
    seed: int
    flags: dict
    verdicts: list
    files: list
    runtime: float
    halts: list
    error: str | None = None
    schema: int = SCHEMA_VERSION

    @property
    def passed(self) -> bool:
        return self.error is None and all(v.passed for v in self.verdicts)

    def to_json(self) -> dict:
        d = asdict(self)
        d["passed"] = self.passed
        return d


# --- shipped scenarios --------------------------------------------------------------------

PUSH_FORCE = 20.0            # N, horizontal
PUSH_LENGTH = 0.2            # s
PUSH_OFFSET = (0.0, 0.12)    # m above the pelvis frame
PUSH_TIMES = ((1.5, -1.0), (6.5, 1.0))
HALF_K = 437.5               # N m/rad, half the testbed's nominal joint stiffness

SCENARIOS = {
    "pendulum_dob": Scenario(
        "pendulum_dob",
        "Single elastic actuator on the pendulum test bed: 100 N step in force command with the "
        "plant spring at half the nominal stiffness, k_dob = 0.8 against k_dob = 0. Also exports "
        "the per-actuator k_dob assignment of the biped.",
        1.5, (2,), model="pendulum_testbed"),
    "kinematic_deflection": Scenario(
        "kinematic_deflection",
        "Biped balancing in a staggered stance while a 1 Hz horizontal pelvis force wiggles it. "
        "Compares the inter-foot forward-kinematics error of raw encoders, the stiffness "
        "heuristic and the Kalman filter; a rigid-link companion run gives the rigid limit.",
        3.5, (3, 6)),
    "balance_pushes": Scenario(
        "balance_pushes",
        "12 s balancing trial with pelvis pushes in -x then +x. Logs CoM, foot estimates "
        "and reference against measured torque.",
        12.0, (4, 6, 7)),
    "step_in_place": Scenario(
        "step_in_place",
        "Stepping in place with DCM tracking after 1 s of balancing, five contiguous steps. "
        "Runs on ground-truth state by default.",
        9.0, (5, 7), gait="step_in_place", oracle_state=True),
    "bus_faults": Scenario(
        "bus_faults",
        "Fieldbus fault injection: dead hop desync detection, HALT propagation across a 50-seed "
        "drop/jitter matrix, deadline overruns and event-log determinism.",
        0.2, (8,)),
}


def list_scenarios() -> list:
    return list(SCENARIOS)


def get_scenario(name: str) -> Scenario:
    try:
        return SCENARIOS[name]
    except KeyError:
        raise ScenarioError(f"unknown scenario {name!r}; valid names: {', '.join(SCENARIOS)}") from None


def describe(name: str) -> str:
    s = get_scenario(name)
    flags = []
    if s.oracle_state:
        flags.append("oracle-state")
    return (f"{s.name}: {s.description}\n"
            f"  duration {s.duration:g} s, model {s.model}, seed {s.seed}"
            + (f", defaults: {', '.join(flags)}" if flags else "")
            + f"\n  criteria: {', '.join(str(c) for c in s.criteria)}")


def output_root(out: str | None = None) -> Path:
    return Path(out or os.environ.get(OUT_ENV, DEFAULT_OUT))


def _load(model: str):
    if model.endswith(".toml") or os.sep in model:
        return load_model(model)
    return load_shipped(model)


# --- CSV helpers --------------------------------------------------------------------------

def write_csv(path: Path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(x) for x in r])


def _fmt(x):
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    return x


def read_csv(path: Path) -> dict:
    """Column name -> numpy array (strings kept as object arrays)."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    head, body = rows[0], rows[1:]
    out = {}
    for i, h in enumerate(head):
        col = [r[i] for r in body]
        try:
            out[h] = np.array([float(c) for c in col])
        except ValueError:
            out[h] = np.array(col, dtype=object)
    return out


# --- runners ------------------------------------------------------------------------------

def dob_step_response(model, k_dob: float, stiffness: float, duration: float, seed: int, f_step: float = 100.0,
              t_step: float = 0.1):
    plant = Plant(model.with_elasticity(stiffness=stiffness))
    s = plant.initial_state(q=[0.0])
    c = plant.contact_state(s)
    dob = DobState(k_dob=k_dob)
    sensors = Sensors(plant, seed=seed)
    cond = ChannelConditioner()
    out = []
    for k in range(int(round(duration * 1000))):
        t = k * 1e-3
        fd = f_step if t >= t_step else 0.0
        u, _ = dob_force_control(dob, fd, cond(sensors.measure(s, c)["testbed"].force[0]))
        s, c = plant.advance(s, np.array([u]), n=10)
        out.append((t, fd, float(plant.actuator_spring_force(s)[0])))
    return out


def _run_pendulum_dob(sc: Scenario, out: Path) -> list:
    model = _load(sc.model)
    a = dob_step_response(model, 0.8, HALF_K, sc.duration, sc.seed)
    b = dob_step_response(model, 0.0, HALF_K, sc.duration, sc.seed)
    rows = [(ta, fd, fa, fb) for (ta, fd, fa), (_, _, fb) in zip(a, b)]
    write_csv(out / "dob_step.csv", ("t", "f_des", "f_kdob_0.8", "f_kdob_0"), rows)
    kmap = assign_kdob(load_shipped())
    write_csv(out / "kdob_map.csv", ("actuator", "k_dob"), sorted(kmap.items()))
    return ["dob_step.csv", "kdob_map.csv"]


def loop_config(sc: Scenario) -> LoopConfig:
    est = EstimatorConfig(mode="kf" if sc.kf else "heuristic")
    cfg = LoopConfig(gait=sc.gait, oracle_state=sc.oracle_state, estimator=est,
                     rigid_links=sc.rigid_limit, assist_damping=sc.assist_damping)
    if sc.name == "kinematic_deflection":
        cfg = replace(cfg, stagger=0.1, wiggle=(15.0, 1.0, 1.5, sc.duration))
    elif sc.name == "balance_pushes":
        pushes = tuple(Push(t0, PUSH_LENGTH, (sign * PUSH_FORCE, 0.0), "pelvis", PUSH_OFFSET)
                       for t0, sign in PUSH_TIMES)
        cfg = replace(cfg, pushes=DisturbanceProfile(pushes))
    elif sc.gait == "step_in_place":
        cfg = replace(cfg, n_steps=5)
    return cfg


def _closed_loop(sc: Scenario, out: Path, stem: str = "timeseries") -> tuple[list, list, str | None]:
    loop = ClosedLoop(_load(sc.model), loop_config(sc), seed=sc.seed)
    err = None
    try:
        loop.run(sc.duration)
    except SimulationBlowUp as exc:
        err = f"simulation blow-up at t={loop.state.time:.4f} s: {exc}"
    write_csv(out / f"{stem}.csv", COLUMNS, loop.rows)
    loop.bus.write_events(out / f"{stem}_events.csv")
    halts = [e.row() for e in loop.bus.events if e.event.startswith("Halt")]
    return [f"{stem}.csv", f"{stem}_events.csv"], halts, err


def _run_kinematic_deflection(sc, out):
    files, halts, err = _closed_loop(sc, out)
    if not sc.rigid_limit:
        f2, h2, e2 = _closed_loop(replace(sc, rigid_limit=True), out, "rigid")
        files += f2
        halts += h2
        err = err or e2
    return files, halts, err


def _bus_run(seed, faults, cycles, topology=BusTopology()):
    bus = Fieldbus(topology, seed=seed, faults=faults)
    for k in range(cycles):
        bus.run_cycle(k)
    return bus


EVENT_HEADER = ("time", "llc", "event", "detail")
DESYNC_FAULT = Fault("drop", 0.010, 0.012, hop=3, value=1.0)
OVERRUN_FAULT = Fault("overrun", 0.010, llc="l_ankle", value=1.8)
SHORT_OVERRUN = Fault("overrun", 0.010, 0.014, llc="r_thigh", value=1.8)    # four ticks only


def _noisy_bus(seed):
    faults = (Fault("overrun", 0.05, 0.06, llc="r_thigh", value=1.5),)
    return _bus_run(seed, faults, 60, BusTopology(jitter_std=1e-4, drop_prob=0.02))


def _run_bus_faults(sc: Scenario, out: Path):
    files = []
    for stem, faults in (("desync", (DESYNC_FAULT,)), ("deadline", (OVERRUN_FAULT,)),
                         ("deadline_short", (SHORT_OVERRUN,))):
        bus = _bus_run(sc.seed, faults, int(round(sc.duration / MASTER_PERIOD)))
        write_csv(out / f"{stem}_events.csv", EVENT_HEADER, [e.row() for e in bus.events])
        files.append(f"{stem}_events.csv")

    rows = []
    for seed in range(50):
        p_hop = 0.055 * (seed % 5) / 4
        topo = BusTopology(hop_latency=50e-6, jitter_std=200e-6 * (seed % 3) / 2, drop_prob=p_hop)
        bus = Fieldbus(topo, seed=seed + sc.seed)
        source = topo.llcs[seed % 6] if seed % 7 else "master"
        raise_time = 0.02 + 0.0007 * seed
        r = halt_propagation(bus, source, raise_time)
        last = max(r.latch_times.values())
        # within: every LLC latched by the time the first intact frame after the raise came back,
        # i.e. one master cycle plus chain latency, one more cycle per dropped frame
        rows.append((seed, source, raise_time, p_hop, r.drops, r.sent, last, r.bound, int(r.within_bound)))
    write_csv(out / "propagation.csv",
              ("seed", "source", "raise_time", "drop_prob", "drops", "sent", "last_latch", "bound", "within"), rows)
    files.append("propagation.csv")

    for i in (1, 2):
        bus = _noisy_bus(sc.seed + 4)
        write_csv(out / f"determinism_{i}.csv", EVENT_HEADER, [e.row() for e in bus.events])
        files.append(f"determinism_{i}.csv")
    return files, [], None


# --- verdicts -----------------------------------------------------------------------------

def _after(d, t0):
    return d["t"] >= t0 - 1e-9


def _window(d, a, b):
    return (d["t"] >= a - 1e-9) & (d["t"] < b - 1e-9)


STATIC_WINDOW = (0.5, 1.5)      # s, settled and before any disturbance
SETTLE = 0.5                    # s of start-up transient excluded from peaks


def crit3_elastic(d) -> float:
    peak = float(np.nanmax(d["kin_err_raw"][_after(d, SETTLE)]))
    return peak


def crit6(frames: list) -> Verdict:
    eigs = np.concatenate([d["kf_min_eig"] for d in frames])
    eigs = eigs[~np.isnan(eigs)]
    eig = float(eigs.min()) if len(eigs) else math.nan
    d = frames[0]
    w = _window(d, *STATIC_WINDOW)
    raw, heur, kf = (float(np.nanmean(d[f"fk_err_{m}"][w])) for m in ("raw", "heur", "kf"))
    ok = len(eigs) > 0 and eig > 0 and kf <= 0.5 * raw and heur < raw
    return Verdict(6, bool(ok), {"min_cov_eig": eig, "fk_err_raw": raw, "fk_err_heur": heur, "fk_err_kf": kf},
                   "covariance SPD on every update; KF static FK error <= 50% of raw; heuristic < raw")


def crit7(frames: list) -> Verdict:
    kkt = fn = fr = dyn = 0.0
    fn_min = math.inf
    n = 0
    for d in frames:
        solved = ~np.isnan(d["kkt"])
        n += int(solved.sum())
        kkt = max(kkt, float(np.max(d["kkt"][solved], initial=0.0)))
        fn_min = min(fn_min, float(np.min(d["fn_min"][solved], initial=math.inf)))
        fr = max(fr, float(np.max(d["friction_excess"][solved], initial=0.0)))
        dyn = max(dyn, float(np.max(d["dyn_residual"][solved], initial=0.0)))
    fn = fn_min
    ok = n > 0 and kkt < 1e-6 and fn >= -1e-9 and fr <= 1e-9 and dyn < 1e-8
    return Verdict(7, bool(ok), {"solved_ticks": n, "max_kkt": kkt, "min_normal_force": fn,
                                 "max_friction_excess": fr, "max_dynamics_residual": dyn},
                   "KKT < 1e-6 on every solved tick; f_n >= -1e-9 and friction cone (+1e-9) on all ticks; "
                   "dynamics residual < 1e-8")


def crit3_rigid(d) -> float:
    return float(np.nanmax(d["kin_err_raw"][_after(d, SETTLE)]))


def push_recovery(d) -> list:
    """Per push: time from release until the CoM stays within 2 cm of the setpoint."""
    setpoint = float(np.mean(d["xi_ref"][_window(d, *STATIC_WINDOW)]))
    err = np.abs(d["com_x"] - setpoint)
    t = d["t"]
    out = []
    ends = [t0 for t0, _ in PUSH_TIMES[1:]] + [t[-1] + 1e-9]
    for (t0, _), t_next in zip(PUSH_TIMES, ends):
        release = t0 + PUSH_LENGTH
        w = (t >= release) & (t < t_next)
        bad = t[w][err[w] > 0.02]
        settle = float(bad[-1] - release) if len(bad) else 0.0
        out.append({"release": release, "settle_time": settle,
                    "max_err": float(err[w].max()) if w.any() else math.nan,
                    "recovered": bool(w.any() and (len(bad) == 0 or bad[-1] < t_next - 1e-3))})
    return out


def torque_tracking(d) -> float:
    ref = np.column_stack([d[c] for c in COLUMNS if c.startswith("tau_ref")])
    act = np.column_stack([d[c] for c in COLUMNS if c.startswith("tau_act")])
    ok = ~np.isnan(ref).any(axis=1)
    rms = float(np.sqrt(np.mean((ref[ok] - act[ok]) ** 2)))
    return rms / float(np.max(np.abs(ref[ok])))


def foot_drift(d) -> float:
    drift = 0.0
    for f in "lr":
        p = np.column_stack([d[f"foot_{f}_x_est"], d[f"foot_{f}_z_est"]])
        p = p[~np.isnan(p).any(axis=1)]
        if len(p):
            drift = max(drift, float(np.max(np.linalg.norm(p - p[0], axis=1))))
    return drift


def evaluate(sc: Scenario, out: Path) -> list:
    """Verdicts for the bound criteria, from the CSV files in ``out`` only."""
    bound = sc.bound_criteria()
    v = {}
    if sc.name == "pendulum_dob":
        d = read_csv(out / "dob_step.csv")
        tail = d["t"] >= d["t"][-1] - 0.3 + 1e-9
        f = float(d["f_des"][-1])
        e08 = abs(float(np.mean(d["f_kdob_0.8"][tail])) - f) / f
        e0 = abs(float(np.mean(d["f_kdob_0"][tail])) - f) / f
        km = read_csv(out / "kdob_map.csv")
        expect = {a: (0.4 if a.endswith(("hip_pitch_act", "knee_act")) else 0.8) for a in km["actuator"]}
        map_ok = all(expect[a] == k for a, k in zip(km["actuator"], km["k_dob"]))
        v[2] = Verdict(2, bool(e08 < 0.02 and e0 > e08 and map_ok),
                       {"ss_error_kdob_0.8": e08, "ss_error_kdob_0": e0, "kdob_map_ok": map_ok},
                       "steady-state error < 2% at k_dob 0.8, larger at k_dob 0; hip/ankle 0.8, thigh/knee 0.4")
    elif sc.name == "bus_faults":
        v[8] = _bus_verdict(out)
    else:
        d = read_csv(out / "timeseries.csv")
        frames = [d]
        complete = len(d["t"]) > 0 and d["t"][-1] >= sc.duration - 2 * MASTER_PERIOD - 1e-9
        if 3 in bound:
            if sc.rigid_limit:
                peak = crit3_rigid(d)
                v[3] = Verdict(3, bool(complete and peak < 1e-3), {"peak_kinematic_error_rigid": peak},
                               "rigid limit: peak inter-foot FK error < 1e-3 m")
            else:
                r = read_csv(out / "rigid.csv")
                frames.append(r)
                peak, peak_r = crit3_elastic(d), crit3_rigid(r)
                v[3] = Verdict(3, bool(complete and 0.005 <= peak <= 0.03 and peak_r < 1e-3),
                               {"peak_kinematic_error": peak, "peak_kinematic_error_rigid": peak_r},
                               "peak in [0.005, 0.03] m; rigid limit < 1e-3 m")
        if 4 in bound:
            rec = push_recovery(d)
            drift = foot_drift(d)
            halts = int(np.nansum(d["halt"]))
            track = torque_tracking(d)
            ok = (complete and all(r["recovered"] and r["settle_time"] <= 5.0 for r in rec)
                  and drift <= 0.05 and halts == 0 and track < 0.15)
            v[4] = Verdict(4, bool(ok), {"pushes": rec, "foot_drift": drift, "halt_ticks": halts,
                                         "torque_rms_over_peak": track},
                           "CoM within 2 cm within 5 s of each release; drift <= 0.05 m; no HALT; "
                           "torque RMS < 15% of peak")
        if 5 in bound:
            steps = int(np.nanmax(d["steps"]))
            fall = int(np.nanmax(d["fall"]))
            halts = int(np.nanmax(d["halt"]))
            w = d["t"] >= 1.0
            rms = float(np.sqrt(np.nanmean((d["xi_true"][w] - d["xi_ref"][w]) ** 2)))
            v[5] = Verdict(5, bool(steps >= 5 and fall == 0 and halts == 0 and rms < 0.05),
                           {"steps": steps, "fall_flag": fall, "halt": halts, "dcm_rms": rms,
                            "oracle_state": sc.oracle_state},
                           ">= 5 steps without fall flag; DCM RMS < 0.05 m")
        if 6 in bound:
            v[6] = crit6(frames)
        if 7 in bound:
            v[7] = crit7(frames)
    missing = [c for c in bound if c not in v]
    if missing:
        raise ScenarioError(f"no evaluator for criteria {missing} in {sc.name}")
    return [v[c] for c in bound]


def _events(path):
    d = read_csv(path)
    if len(d["time"]) == 0:
        return []
    return list(zip(d["time"], d["llc"], d["event"], d["detail"]))


def _bus_verdict(out: Path) -> Verdict:
    downstream = ("r_hip", "r_thigh", "r_ankle")
    ev = _events(out / "desync_events.csv")
    first = {}
    for t, llc, e, _ in ev:
        if e == "Desync":
            first.setdefault(llc, t)
    desync_delay = max((first.get(n, math.inf) - DESYNC_FAULT.start for n in downstream))
    desync_ok = desync_delay <= MASTER_PERIOD + 1e-12 and not any(n in first for n in ("l_hip", "l_thigh", "l_ankle"))

    ev = _events(out / "deadline_events.csv")
    raised = [t for t, llc, e, _ in ev if e == "HaltRaised" and llc == OVERRUN_FAULT.llc]
    overruns = [t for t, llc, e, _ in ev if e == "DeadlineOverrun" and llc == OVERRUN_FAULT.llc
                and raised and t <= raised[0] + 1e-12]
    short = _events(out / "deadline_short_events.csv")
    short_halt = any(e == "HaltRaised" for _, _, e, _ in short)
    deadline_ok = bool(raised) and len(overruns) == 5 and not short_halt

    p = read_csv(out / "propagation.csv")
    # the first intact frame leaves at most (drops + 1) cycles after the raise
    frame_ok = p["sent"] - p["raise_time"] <= (p["drops"] + 1) * MASTER_PERIOD + 1e-12
    prop_ok = bool(np.all(p["within"] == 1) and np.all(frame_ok))

    a = (out / "determinism_1.csv").read_bytes()
    b = (out / "determinism_2.csv").read_bytes()
    det_ok = a == b

    return Verdict(8, bool(desync_ok and deadline_ok and prop_ok and det_ok),
                   {"desync_delay": desync_delay, "overruns_before_halt": len(overruns),
                    "four_overruns_halt": short_halt, "propagation_seeds": int(len(p["seed"])),
                    "worst_latch_delay": float(np.max(p["last_latch"] - p["raise_time"])),
                    "worst_send_delay_cycles": float(np.max((p["sent"] - p["raise_time"]) / MASTER_PERIOD - p["drops"])),
                    "max_drops": int(np.max(p["drops"])),
                    "deterministic": det_ok},
                   "desync within 1 cycle; HALT on all LLCs within 1 cycle (+1 per drop) over 50 seeds; "
                   "HALT after exactly 5 overruns; identical event logs")


# --- entry point --------------------------------------------------------------------------

RUNNERS = {
    "pendulum_dob": _run_pendulum_dob,
    "kinematic_deflection": _run_kinematic_deflection,
    "bus_faults": _run_bus_faults,
}


def run_scenario(sc: Scenario) -> RunReport:
    out = output_root(sc.out) / sc.name
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    runner = RUNNERS.get(sc.name, _closed_loop)
    res = runner(sc, out)
    files, halts, err = (res, [], None) if isinstance(res, list) else res
    runtime = time.perf_counter() - t0
    verdicts = evaluate(sc, out)
    flags = {"oracle_state": sc.oracle_state, "rigid_limit": sc.rigid_limit, "kf": sc.kf,
             "assist_damping": sc.assist_damping, "model": sc.model, "duration": sc.duration}
    report = RunReport(sc.name, sc.seed, flags, verdicts, files, runtime, halts, err)
    with open(out / "summary.json", "w") as fh:
        json.dump(report.to_json(), fh, indent=2, default=_json_default)
        fh.write("\n")
    return report


def _json_default(x):
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, (np.floating,)):
        return float(x)
    if isinstance(x, np.bool_):
        return bool(x)
    raise TypeError(type(x).__name__)
