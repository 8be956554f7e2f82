"""Experiment drivers: convergence study, spinodal decomposition, rising bubble."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

from . import __version__, fem
from . import diagnostics as D
from . import io
from . import scheme as S
from .config import RunConfig
from .mesh import build_mesh
from .physics import ExactSolution, PhysParams, initial_conditions, manufactured_forcing

log = logging.getLogger("chmhd")

ERROR_FIELDS = ("phi_L2", "phi_H1", "u_L2", "u_H1", "B_L2", "B_H1", "p_L2", "omega_L2", "omega_H1")


class ExperimentError(RuntimeError):
    """Solver or diagnostics failure with experiment context."""

    def __init__(self, message: str, context: dict | None = None):
        super().__init__(message)
        self.context = context or {}


@dataclass
class ExperimentResult:
    kind: str
    directory: Path
    files: dict = field(default_factory=dict)
    summary: dict = field(default_factory=dict)


def solver_config(cfg: RunConfig, dt: float | None = None) -> S.SolverConfig:
    return S.SolverConfig(dt=cfg.dt if dt is None else dt, **cfg.solver)


def _outdir(cfg: RunConfig) -> Path:
    d = Path(cfg.output["directory"])
    try:
        d.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise io.OutputError(f"cannot create output directory {d}: {exc}") from exc
    return d


def _metadata(cfg: RunConfig, extra: dict) -> dict:
    return {"version": __version__, "kind": cfg.kind, "config": cfg.to_dict(), **extra}


def phase_variance(state) -> float:
    """Spatial variance of phi; grows as the mixture separates into pure phases."""
    mesh = state.mesh
    phi, _ = fem.eval_at_quadrature(state.phi)
    area = mesh.rect.area
    mean = fem.integrate(mesh, phi) / area
    return fem.integrate(mesh, (phi - mean) ** 2) / area


def snapshot_steps(times, dt: float, n_steps: int) -> dict:
    """Map each requested time to the nearest reachable step.

    Positive times never map to the initial state.
    """
    out = {}
    for t in times:
        k = int(round(t / dt))
        if t > 0:
            k = max(k, 1)
        out.setdefault(min(max(k, 0), n_steps), []).append(float(t))
    return out


# ---------------------------------------------------------------------------
# convergence study


def convergence_dt(t_final: float, h: float) -> float:
    """Largest step not exceeding ``h**2`` that divides ``t_final`` evenly."""
    return t_final / math.ceil(t_final / h ** 2 - 1e-9)


def density_settings(cfg: RunConfig) -> list[tuple[str, PhysParams]]:
    P, which = cfg.params, cfg.experiment["density"]
    out = []
    if which in ("matched", "both"):
        out.append(("matched", P.replace(rho2=P.rho1)))
    if which in ("ratio", "both"):
        out.append(("ratio", P.replace(rho2=P.rho1 * cfg.experiment["density_ratio"])))
    return out


def converge_level(n: int, params: PhysParams, cfg: RunConfig) -> dict:
    """One manufactured-solution run on an ``n x n`` grid; returns a table row."""
    T = float(cfg.experiment["t_final"])
    mesh = build_mesh(cfg.rect, n, n)
    h = mesh.cell_size
    dt = convergence_dt(T, h)
    ex = ExactSolution(params)
    bcs = S.BCSet(velocity_value=lambda x, t: ex.u(x, t), magnetic_value=lambda x, t: ex.B(x, t))
    forcing = lambda x, t: manufactured_forcing(t, t - dt, dt, params, x, ex)
    scfg = solver_config(cfg, dt)
    state0 = S.initial_state(mesh, params, initial_conditions("converge", params), bcs)
    system = S.CoupledSystem(mesh, params, scfg, bcs, forcing)
    track = {"div": 0.0, "balance": 0.0, "its": 0}
    m_prev = [D.mass(state0)]

    def observe(k, sk, sk1, rec):
        fphi = manufactured_forcing(sk1.time, sk.time, dt, params, system.xq, ex)[2]
        expected = m_prev[0] + dt * fem.integrate(mesh, fphi)
        track["balance"] = max(track["balance"], abs(rec.mass - expected))
        track["div"] = max(track["div"], rec.div_residual)
        track["its"] = max(track["its"], rec.newton_iterations)
        m_prev[0] = rec.mass

    t0 = time.perf_counter()
    final, _ = S.run(state0, params, scfg, bcs, T, observers=[observe], forcing=forcing,
                     system=system, full_diagnostics=False)
    row = {"n": n, "h": h, "h_max_edge": mesh.h, "dt": dt, "steps": S.steps_for(T, dt)}
    row.update(D.error_norms(final, ex, final.time))
    row.update(max_div_residual=track["div"], max_mass_balance=track["balance"],
               max_newton_iterations=track["its"], seconds=time.perf_counter() - t0)
    return row


def add_rates(rows: list[dict]) -> list[dict]:
    """Append ``<field>_rate`` to every row after the first of each density setting."""
    for setting in dict.fromkeys(r["density"] for r in rows):
        sub = [r for r in rows if r["density"] == setting]
        for f in ERROR_FIELDS:
            rates = D.eoc([r[f] for r in sub], [r["h"] for r in sub]) if len(sub) > 1 else []
            sub[0][f"{f}_rate"] = None
            for r, q in zip(sub[1:], rates):
                r[f"{f}_rate"] = q
    return rows


def format_table(rows: list[dict], fields=("phi_L2", "phi_H1", "u_L2", "u_H1", "B_L2", "B_H1", "p_L2")) -> str:
    lines = []
    for setting in dict.fromkeys(r["density"] for r in rows):
        lines.append(f"density: {setting}")
        head = f"{'h':>7}" + "".join(f"{f:>11}{'rate':>6}" for f in fields)
        lines.append(head)
        for r in (r for r in rows if r["density"] == setting):
            cells = []
            for f in fields:
                q = r.get(f"{f}_rate")
                cells.append(f"{r[f]:11.3e}{'' if q is None else format(q, '6.2f'):>6}")
            lines.append(f"{'1/' + str(r['n']):>7}" + "".join(cells))
    return "\n".join(lines)


def run_converge(cfg: RunConfig) -> ExperimentResult:
    out = _outdir(cfg)
    rows = []
    for setting, params in density_settings(cfg):
        for n in cfg.experiment["levels"]:
            log.info("converge: density=%s h=1/%d", setting, n)
            try:
                row = converge_level(n, params, cfg)
            except (S.StepError, ValueError) as exc:
                raise ExperimentError(f"converge h=1/{n} density={setting}: {exc}",
                                      {"h": 1.0 / n, "density": setting}) from exc
            rows.append({"density": setting, **row})
    add_rates(rows)
    table = out / cfg.output["table_csv"]
    io.write_csv(rows, table)
    print(format_table(rows))
    files = {"table": table}
    if cfg.output["figures"]:
        from . import plotting
        files["figure"] = plotting.convergence(rows, out / "convergence.png")
    meta = out / "metadata.json"
    io.write_metadata(_metadata(cfg, {
        "t_final": cfg.experiment["t_final"],
        "dt_rule": "dt = T / ceil(T / h^2), h = cell size",
        "boundary": "velocity and magnetic field Dirichlet from the reference solution",
        "rows": rows}), meta)
    files["metadata"] = meta
    return ExperimentResult("converge", out, files, {"rows": rows})


# ---------------------------------------------------------------------------
# spinodal decomposition


def spinodal_run(cfg: RunConfig, dt: float, n_steps: int, out: Path | None = None,
                 label: str = "", snapshots: dict | None = None):
    """One spinodal run; returns ``(energy_rows, mass_rows, stats, final_state)``."""
    P, e = cfg.params, cfg.experiment
    mesh = build_mesh(cfg.rect, cfg.nx, cfg.ny)
    bcs = S.BCSet()
    data = initial_conditions("spinodal", P, seed=e["seed"], mesh=mesh, psi0=e["psi0"],
                              amplitude=e["amplitude"])
    state0 = S.initial_state(mesh, P, data, bcs)
    scfg = solver_config(cfg, dt)
    system = S.CoupledSystem(mesh, P, scfg, bcs)
    e0 = D.discrete_energy(state0, P)
    energy_rows = [{"dt": dt, "step": 0, "time": 0.0, **{f"energy_{k}": v for k, v in e0.items()},
                    "identity_residual": 0.0, "newton_iterations": 0,
                    "phase_variance": phase_variance(state0)}]
    mass_rows = [{"dt": dt, "step": 0, "time": 0.0, "mass": D.mass(state0)}]
    snapshots = snapshots or {}
    written = []

    def snap(k, state):
        if out is None or k not in snapshots:
            return
        path = out / f"snapshot_{label}step{k:05d}.vtk"
        io.write_vtk(state, path, f"spinodal dt={dt} t={state.time:.6g}")
        written.append({"step": k, "time": state.time, "requested": snapshots[k], "path": path.name})
        if cfg.output["figures"]:
            from . import plotting
            plotting.phase_field(state, path.with_suffix(".png"))

    vtk_every = cfg.output["vtk_every"]

    def observe(k, sk, sk1, rec):
        energy_rows.append({"dt": dt, "step": k, "time": sk1.time,
                            **{f"energy_{n}": v for n, v in rec.energy.items()},
                            "identity_residual": rec.identity_residual,
                            "newton_iterations": rec.newton_iterations,
                            "phase_variance": phase_variance(sk1)})
        mass_rows.append({"dt": dt, "step": k, "time": sk1.time, "mass": rec.mass})
        if vtk_every and k % vtk_every == 0 and k not in snapshots:
            snapshots[k] = []
        snap(k, sk1)

    snap(0, state0)
    try:
        final, _ = S.run(state0, P, scfg, bcs, n_steps * dt, observers=[observe], system=system)
    except S.StepError as exc:
        raise ExperimentError(f"spinodal dt={dt}: {exc}", {"dt": dt, "step": exc.step}) from exc
    stats = {"dt": dt, "steps": n_steps, "E0": e0["total"], "snapshots": written,
             "coefficient_range": {k: [system.stats.lo.get(k), system.stats.hi.get(k)]
                                   for k in system.stats.lo}}
    return energy_rows, mass_rows, stats, final


def run_spinodal(cfg: RunConfig) -> ExperimentResult:
    out = _outdir(cfg)
    e = cfg.experiment
    sweep = [float(v) for v in e["dt_sweep"]]
    energy, masses, runs = [], [], []
    if sweep:
        plan = [(dt, int(e["steps"]), {}) for dt in sweep]
    else:
        n = S.steps_for(cfg.t_end, cfg.dt)
        plan = [(cfg.dt, n, snapshot_steps(e["snapshot_times"], cfg.dt, n))]
    for dt, n, snaps in plan:
        log.info("spinodal: dt=%g steps=%d", dt, n)
        label = f"dt{dt:g}_" if sweep else ""
        er, mr, stats, _ = spinodal_run(cfg, dt, n, out, label, snaps)
        energy += er
        masses += mr
        runs.append(stats)
    files = {"energy": out / cfg.output["energy_csv"], "mass": out / cfg.output["mass_csv"]}
    io.write_csv(energy, files["energy"])
    io.write_csv(masses, files["mass"])
    if cfg.output["figures"]:
        from . import plotting
        series = {}
        for dt, *_ in plan:
            sel = [i for i, r in enumerate(energy) if r["dt"] == dt]
            series[f"dt={dt:g}"] = ([energy[i]["step"] for i in sel],
                                    [energy[i]["energy_total"] for i in sel],
                                    [masses[i]["mass"] for i in sel])
        files["figure"] = plotting.energy_mass(series, out / "energy_mass.png")
    summary = {"runs": runs,
               "max_energy_increase": max_energy_increase(energy),
               "max_mass_drift": max_mass_drift(masses)}
    meta = out / "metadata.json"
    io.write_metadata(_metadata(cfg, {
        "steps_per_dt": int(e["steps"]) if sweep else None,
        "note": "each dt of a sweep runs a fixed number of steps" if sweep else "",
        **summary}), meta)
    files["metadata"] = meta
    print(f"spinodal: max energy increase {summary['max_energy_increase']:.3e}, "
          f"max mass drift {summary['max_mass_drift']:.3e}")
    return ExperimentResult("spinodal", out, files, summary)


def max_energy_increase(rows: list[dict]) -> float:
    """Largest ``E(k+1) - E(k)`` over consecutive rows of the same run."""
    worst = -math.inf
    for a, b in zip(rows, rows[1:]):
        if a["dt"] == b["dt"] and b["step"] == a["step"] + 1:
            worst = max(worst, b["energy_total"] - a["energy_total"])
    return worst


def max_mass_drift(rows: list[dict]) -> float:
    worst, start = 0.0, {}
    for r in rows:
        start.setdefault(r["dt"], r["mass"])
        worst = max(worst, abs(r["mass"] - start[r["dt"]]))
    return worst


# ---------------------------------------------------------------------------
# rising bubble


def run_bubble(cfg: RunConfig) -> ExperimentResult:
    out = _outdir(cfg)
    P, e = cfg.params, cfg.experiment
    mesh = build_mesh(cfg.rect, cfg.nx, cfg.ny)
    bcs = S.bubble_bcs(e["b_far"])
    data = initial_conditions("bubble", P, center=e["center"], radius=e["radius"], B0=e["b_far"])
    state0 = S.initial_state(mesh, P, data, bcs)
    scfg = solver_config(cfg)
    n = S.steps_for(cfg.t_end, cfg.dt)
    snaps = snapshot_steps(e["snapshot_times"], cfg.dt, n)
    vtk_every = cfg.output["vtk_every"]
    rows, written = [], []

    def record(k, state, rec=None):
        try:
            stats = D.bubble_stats(state)
        except D.EmptyRegionError as exc:
            raise ExperimentError(f"bubble vanished at step {k}: {exc}", {"step": k}) from exc
        row = {"step": k, "time": state.time, **stats,
               "mass": D.mass(state) if rec is None else rec.mass,
               "energy_total": (D.discrete_energy(state, P) if rec is None else rec.energy)["total"],
               "newton_iterations": 0 if rec is None else rec.newton_iterations}
        rows.append(row)
        if k in snaps or (vtk_every and k % vtk_every == 0):
            path = out / f"snapshot_step{k:05d}.vtk"
            io.write_vtk(state, path, f"bubble t={state.time:.6g}")
            written.append({"step": k, "time": state.time, "requested": snaps.get(k, []), "path": path.name})
            if cfg.output["figures"]:
                from . import plotting
                plotting.phase_field(state, path.with_suffix(".png"))

    record(0, state0)
    log.info("bubble: %dx%d mesh, %d steps", cfg.nx, cfg.ny, n)
    t0 = time.perf_counter()
    try:
        final, _ = S.run(state0, P, scfg, bcs, cfg.t_end,
                         observers=[lambda k, sk, sk1, rec: record(k, sk1, rec)],
                         full_diagnostics=False)
    except S.StepError as exc:
        raise ExperimentError(f"bubble: {exc}", {"step": exc.step}) from exc
    seconds = time.perf_counter() - t0
    files = {"centroid": out / cfg.output["centroid_csv"]}
    io.write_csv(rows, files["centroid"])
    if cfg.output["figures"]:
        from . import plotting
        files["figure"] = plotting.centroid(
            {"centroid": ([r["time"] for r in rows], [r["centroid_y"] for r in rows])},
            out / "centroid.png")
    summary = {"final_centroid_y": rows[-1]["centroid_y"],
               "rising_after_0.1": strictly_increasing(rows, 0.1),
               "final_aspect": rows[-1]["aspect"], "seconds": seconds}
    meta = out / "metadata.json"
    io.write_metadata(_metadata(cfg, {"snapshots": written, **summary}), meta)
    files["metadata"] = meta
    print(f"bubble: centroid y {rows[0]['centroid_y']:.6f} -> {rows[-1]['centroid_y']:.6f}, "
          f"aspect {rows[-1]['aspect']:.4f}, {seconds:.1f} s")
    return ExperimentResult("bubble", out, files, summary)


def strictly_increasing(rows: list[dict], t_from: float, key: str = "centroid_y") -> bool:
    v = [r[key] for r in rows if r["time"] >= t_from - 1e-12]
    return all(b > a for a, b in zip(v, v[1:]))


# ---------------------------------------------------------------------------
# custom runs


def run_custom(cfg: RunConfig) -> ExperimentResult:
    """Time series of energy and mass for a user-specified setup."""
    out = _outdir(cfg)
    P, e = cfg.params, cfg.experiment
    mesh = build_mesh(cfg.rect, cfg.nx, cfg.ny)
    if e["initial"] == "bubble":
        bcs = S.bubble_bcs(e["b_far"])
        data = initial_conditions("bubble", P, center=e["center"], radius=e["radius"], B0=e["b_far"])
    elif e["initial"] == "spinodal":
        bcs = S.BCSet()
        data = initial_conditions("spinodal", P, seed=e["seed"], mesh=mesh, psi0=e["psi0"],
                                  amplitude=e["amplitude"])
    else:
        raise ExperimentError(f"experiment.initial: expected spinodal or bubble, got {e['initial']!r}")
    state0 = S.initial_state(mesh, P, data, bcs)
    vtk_every = cfg.output["vtk_every"]

    def observe(k, sk, sk1, rec):
        if vtk_every and k % vtk_every == 0:
            io.write_vtk(sk1, out / f"snapshot_step{k:05d}.vtk")

    try:
        _, recs = S.run(state0, P, solver_config(cfg), bcs, cfg.t_end, observers=[observe])
    except S.StepError as exc:
        raise ExperimentError(f"custom: {exc}", {"step": exc.step}) from exc
    files = {"series": out / cfg.output["series_csv"]}
    io.write_csv([{k: v for k, v in r.flat().items()} for r in recs], files["series"])
    meta = out / "metadata.json"
    io.write_metadata(_metadata(cfg, {"steps": len(recs)}), meta)
    files["metadata"] = meta
    return ExperimentResult("custom", out, files, {"steps": len(recs)})


RUNNERS = {"converge": run_converge, "spinodal": run_spinodal, "bubble": run_bubble,
           "custom": run_custom}


def run_experiment(cfg: RunConfig) -> ExperimentResult:
    return RUNNERS[cfg.kind](cfg)
